//! Subject directories: one seen reference, held-out variants, class word.
//!
//! ```text
//! <subject>/class.txt       class noun, e.g. `dog`
//! <subject>/seen.png        the single training reference
//! <subject>/unseen_*.png    held-out views of the same subject
//! ```

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::img::ImageTensor;
use crate::world::{Background, Position, Scene, Size, CANVAS};

pub const CLASS_FILE: &str = "class.txt";
pub const SEEN_FILE: &str = "seen.png";
pub const UNSEEN_PREFIX: &str = "unseen_";
pub const MIN_UNSEEN: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub name: String,
    pub class_word: String,
    pub seen: ImageTensor,
    pub unseen: Vec<ImageTensor>,
    pub unseen_paths: Vec<PathBuf>,
}

/// Brings a loaded image to `size × size`, box-averaging when possible.
pub fn fit_image(img: ImageTensor, size: usize) -> Result<ImageTensor> {
    let (_, h, w) = img.shape();
    if h != w {
        return Err(Error::Image(format!("subject images must be square, got {w}×{h}")));
    }
    if h == size {
        Ok(img)
    } else if h > size && h % size == 0 {
        img.downsample(h / size)
    } else {
        img.resize_square(size)
    }
}

impl ToyDataset {
    pub fn load(dir: &Path, image_size: usize) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::config(format!("subject directory {} does not exist", dir.display())));
        }
        let class_path = dir.join(CLASS_FILE);
        if !class_path.is_file() {
            return Err(Error::config(format!("{} is missing", class_path.display())));
        }
        let class_word = std::fs::read_to_string(&class_path)?.trim().to_lowercase();
        if class_word.is_empty() || class_word.contains(char::is_whitespace) {
            return Err(Error::config(format!("{} must hold a single word", class_path.display())));
        }
        let seen_path = dir.join(SEEN_FILE);
        if !seen_path.is_file() {
            return Err(Error::config(format!("{} is missing", seen_path.display())));
        }
        let seen = fit_image(ImageTensor::load_png(&seen_path)?, image_size)?;
        let mut unseen_paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with(UNSEEN_PREFIX) && n.ends_with(".png"))
            })
            .collect();
        unseen_paths.sort();
        if unseen_paths.len() < MIN_UNSEEN {
            return Err(Error::config(format!(
                "{} has {} held-out images, need at least {MIN_UNSEEN}",
                dir.display(),
                unseen_paths.len()
            )));
        }
        let unseen = unseen_paths
            .iter()
            .map(|p| fit_image(ImageTensor::load_png(p)?, image_size))
            .collect::<Result<_>>()?;
        Ok(Self {
            name: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            class_word,
            seen,
            unseen,
            unseen_paths,
        })
    }
}

/// Held-out views of `subject`: same object, new position, size, facing
/// or background.
pub fn variants(subject: &Scene, rng: &mut impl Rng, n: usize) -> Vec<Scene> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut v = *subject;
        v.mirrored = rng.gen();
        v.position = Position::ALL[rng.gen_range(0..Position::ALL.len())];
        v.size = Size::ALL[rng.gen_range(0..Size::ALL.len())];
        v.background = Background::ALL[rng.gen_range(0..Background::ALL.len())];
        if v != *subject && !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Writes a subject directory rendered at the world's canvas size.
pub fn write_subject(dir: &Path, subject: &Scene, held_out: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CLASS_FILE), format!("{}\n", subject.class.word()))?;
    subject.render().save_png(&dir.join(SEEN_FILE))?;
    for (i, v) in held_out.iter().enumerate() {
        v.render().save_png(&dir.join(format!("{UNSEEN_PREFIX}{i}.png")))?;
    }
    debug_assert_eq!(subject.render().height(), CANVAS);
    Ok(())
}
