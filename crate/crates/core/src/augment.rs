//! Paired image/prompt augmentations with learnable augmentation tokens.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::ImageTensor;
use crate::text::{normalize, vocab, TextEncoder};

/// Smallest image side the geometric transforms accept.
pub const MIN_IMAGE_SIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    HorizontalFlip,
    VerticalFlip,
    Scale,
    Translate,
    RandomCropResize,
    Grayscale,
    Brightness,
    Cutout,
    Grid,
}

impl AugKind {
    pub const ALL: [AugKind; 9] = [
        Self::HorizontalFlip,
        Self::VerticalFlip,
        Self::Scale,
        Self::Translate,
        Self::RandomCropResize,
        Self::Grayscale,
        Self::Brightness,
        Self::Cutout,
        Self::Grid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::HorizontalFlip => "horizontal_flip",
            Self::VerticalFlip => "vertical_flip",
            Self::Scale => "scale",
            Self::Translate => "translate",
            Self::RandomCropResize => "random_crop_resize",
            Self::Grayscale => "grayscale",
            Self::Brightness => "brightness",
            Self::Cutout => "cutout",
            Self::Grid => "grid",
        }
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown augmentation `{s}`")))
    }
}

/// One token group of an augmentation: its placeholder tag and the words
/// its tokens start from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugVariant {
    pub tag: String,
    pub init_words: String,
}

/// Ranges of the randomly drawn transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TransformParams {
    None,
    Scale { zoom_in: (f64, f64), zoom_out: (f64, f64) },
    /// Horizontal shift as a fraction of the width.
    Translate { shift: (f64, f64) },
    /// Area fraction of the square crop.
    Crop { area: (f64, f64) },
    /// Offset on the `[0, 1]` intensity scale; the sign is drawn separately.
    Brightness { delta: (f64, f64) },
    /// Hole side as a fraction of the image side.
    Cutout { side: f64 },
    Grid { tiles: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: AugKind,
    pub token_count: usize,
    /// Scale, translate and brightness have two variants chosen by the drawn
    /// direction; the rest have one.
    pub variants: Vec<AugVariant>,
    pub params: TransformParams,
}

impl AugmentationSpec {
    fn new(kind: AugKind, token_count: usize, variants: &[(&str, &str)], params: TransformParams) -> Self {
        Self {
            kind,
            token_count,
            variants: variants
                .iter()
                .map(|(tag, words)| AugVariant {
                    tag: (*tag).to_owned(),
                    init_words: (*words).to_owned(),
                })
                .collect(),
            params,
        }
    }

    pub fn variant(&self, tag: &str) -> Option<&AugVariant> {
        self.variants.iter().find(|v| v.tag == tag)
    }
}

pub fn default_augmentation_set() -> Vec<AugmentationSpec> {
    use AugKind::*;
    use TransformParams as P;
    vec![
        AugmentationSpec::new(HorizontalFlip, 1, &[("hflip", "flip")], P::None),
        AugmentationSpec::new(VerticalFlip, 1, &[("vflip", "flip")], P::None),
        AugmentationSpec::new(
            Scale,
            2,
            &[("zoom_in", "zoom in"), ("zoom_out", "zoom out")],
            P::Scale {
                zoom_in: (1.2, 1.4),
                zoom_out: (0.4, 0.6),
            },
        ),
        AugmentationSpec::new(
            Translate,
            3,
            &[("shift_left", "on the left"), ("shift_right", "on the right")],
            P::Translate { shift: (0.05, 0.25) },
        ),
        AugmentationSpec::new(RandomCropResize, 1, &[("crop", "crop")], P::Crop { area: (0.6, 0.9) }),
        AugmentationSpec::new(Grayscale, 1, &[("gray", "gray")], P::None),
        AugmentationSpec::new(
            Brightness,
            1,
            &[("bright", "bright"), ("dark", "dark")],
            P::Brightness { delta: (0.1, 0.3) },
        ),
        AugmentationSpec::new(Cutout, 1, &[("cutout", "hole")], P::Cutout { side: 0.25 }),
        AugmentationSpec::new(Grid, 2, &[("grid", "grid of")], P::Grid { tiles: 2 }),
    ]
}

/// Registers the A\* tokens of every variant of `spec`, returning all ids.
pub fn register_aug_tokens(encoder: &mut TextEncoder, spec: &AugmentationSpec) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for v in &spec.variants {
        ids.extend(encoder.register_aug_group(&v.tag, &v.init_words, spec.token_count)?);
    }
    Ok(ids)
}

/// With probability `p_apply`, one spec chosen uniformly; otherwise identity.
pub fn draw<'s>(rng: &mut impl Rng, specs: &'s [AugmentationSpec], p_apply: f64) -> Result<Option<&'s AugmentationSpec>> {
    if !(0.0..=1.0).contains(&p_apply) {
        return Err(Error::config(format!("augmentation probability {p_apply} outside [0, 1]")));
    }
    if specs.is_empty() {
        if p_apply > 0.0 {
            return Err(Error::config("augmentation probability is positive but no augmentations are enabled"));
        }
        return Ok(None);
    }
    if rng.gen_bool(p_apply) {
        Ok(Some(&specs[rng.gen_range(0..specs.len())]))
    } else {
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Before,
    After,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentedSample {
    pub image: ImageTensor,
    pub prompt: String,
    /// Augmentation name, or `identity`.
    pub applied: String,
    /// Tag of the token group inserted, if any.
    pub variant: Option<String>,
    pub placement: Option<Placement>,
    pub drawn_params: BTreeMap<String, f64>,
}

pub const IDENTITY: &str = "identity";

fn contains_subject(prompt: &str) -> bool {
    normalize(prompt).split(' ').any(|w| {
        w.strip_prefix(vocab::SUBJECT_LITERAL)
            .is_some_and(|rest| rest.chars().all(|c| c.is_ascii_digit()))
    })
}

pub fn contains_aug_placeholder(prompt: &str) -> bool {
    normalize(prompt).split(' ').any(|w| w.starts_with("<aug:"))
}

/// Transforms the image and, when `insert_tokens` is set, inserts the
/// matching A\* placeholders before or after `base_prompt`.
pub fn apply(
    image: &ImageTensor,
    base_prompt: &str,
    spec: Option<&AugmentationSpec>,
    insert_tokens: bool,
    rng: &mut impl Rng,
) -> Result<AugmentedSample> {
    if !contains_subject(base_prompt) {
        return Err(Error::arg(format!("base prompt {base_prompt:?} has no subject token")));
    }
    if contains_aug_placeholder(base_prompt) {
        return Err(Error::arg(format!("base prompt {base_prompt:?} already has augmentation tokens")));
    }
    let Some(spec) = spec else {
        return Ok(AugmentedSample {
            image: image.clone(),
            prompt: base_prompt.to_owned(),
            applied: IDENTITY.to_owned(),
            variant: None,
            placement: None,
            drawn_params: BTreeMap::new(),
        });
    };
    let mut drawn = BTreeMap::new();
    let (out, variant) = transform(image, spec, rng, &mut drawn)?;
    let placement = if rng.gen_bool(0.5) {
        Placement::Before
    } else {
        Placement::After
    };
    let prompt = if insert_tokens {
        let tokens: Vec<String> = (0..spec.token_count).map(|k| vocab::aug_literal(&variant, k)).collect();
        let tokens = tokens.join(" ");
        match placement {
            Placement::Before => format!("{tokens} {base_prompt}"),
            Placement::After => format!("{base_prompt} {tokens}"),
        }
    } else {
        base_prompt.to_owned()
    };
    Ok(AugmentedSample {
        image: out,
        prompt,
        applied: spec.kind.name().to_owned(),
        variant: Some(variant),
        placement: Some(placement),
        drawn_params: drawn,
    })
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn tag_of(spec: &AugmentationSpec, i: usize) -> Result<String> {
    spec.variants
        .get(i)
        .map(|v| v.tag.clone())
        .ok_or_else(|| Error::config(format!("augmentation `{}` is missing variant {i}", spec.kind)))
}

/// Applies `spec` to the image alone, returning the result and the tag of
/// the variant that was drawn.
pub fn transform_image(img: &ImageTensor, spec: &AugmentationSpec, rng: &mut impl Rng) -> Result<(ImageTensor, String)> {
    transform(img, spec, rng, &mut BTreeMap::new())
}

fn transform(
    img: &ImageTensor,
    spec: &AugmentationSpec,
    rng: &mut impl Rng,
    drawn: &mut BTreeMap<String, f64>,
) -> Result<(ImageTensor, String)> {
    let (_, h, w) = img.shape();
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(Error::arg(format!(
            "image of {h}x{w} is smaller than the minimum side {MIN_IMAGE_SIDE}"
        )));
    }
    use AugKind::*;
    let out = match (spec.kind, spec.params) {
        (HorizontalFlip, _) => (hflip(img), tag_of(spec, 0)?),
        (VerticalFlip, _) => (vflip(img), tag_of(spec, 0)?),
        (Scale, TransformParams::Scale { zoom_in, zoom_out }) => {
            let inward = rng.gen_bool(0.5);
            let s = uniform(rng, if inward { zoom_in } else { zoom_out });
            drawn.insert("factor".into(), s);
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let fill = border_mean(img);
            let out = warp(img, &fill, |y, x| (cy + (y - cy) / s, cx + (x - cx) / s));
            (out, tag_of(spec, if inward { 0 } else { 1 })?)
        }
        (Translate, TransformParams::Translate { shift }) => {
            let left = rng.gen_bool(0.5);
            let px = (uniform(rng, shift) * w as f64).round().max(1.0);
            let dx = if left { -px } else { px };
            drawn.insert("dx".into(), dx);
            let fill = border_mean(img);
            let out = warp(img, &fill, |y, x| (y, x - dx));
            (out, tag_of(spec, if left { 0 } else { 1 })?)
        }
        (RandomCropResize, TransformParams::Crop { area }) => {
            let a = uniform(rng, area);
            let side = ((a.sqrt() * h.min(w) as f64).round() as usize).clamp(1, h.min(w));
            let y0 = rng.gen_range(0..=h - side);
            let x0 = rng.gen_range(0..=w - side);
            drawn.insert("area".into(), a);
            drawn.insert("y0".into(), y0 as f64);
            drawn.insert("x0".into(), x0 as f64);
            drawn.insert("side".into(), side as f64);
            let sy = (side as f64 - 1.0) / (h as f64 - 1.0);
            let sx = (side as f64 - 1.0) / (w as f64 - 1.0);
            let fill = border_mean(img);
            let out = warp(img, &fill, |y, x| (y0 as f64 + y * sy, x0 as f64 + x * sx));
            (out, tag_of(spec, 0)?)
        }
        (Grayscale, _) => (grayscale(img), tag_of(spec, 0)?),
        (Brightness, TransformParams::Brightness { delta }) => {
            let brighter = rng.gen_bool(0.5);
            let d = uniform(rng, delta) * if brighter { 1.0 } else { -1.0 };
            drawn.insert("delta".into(), d);
            // [0, 1] offset is doubled on the [-1, 1] pixel scale.
            let out = img.map(|v| (v + 2.0 * d).clamp(-1.0, 1.0));
            (out, tag_of(spec, if brighter { 0 } else { 1 })?)
        }
        (Cutout, TransformParams::Cutout { side }) => {
            let hs = ((side * h as f64).round() as usize).clamp(1, h);
            let ws = ((side * w as f64).round() as usize).clamp(1, w);
            let y0 = rng.gen_range(0..=h - hs);
            let x0 = rng.gen_range(0..=w - ws);
            drawn.insert("y0".into(), y0 as f64);
            drawn.insert("x0".into(), x0 as f64);
            let mut out = img.clone();
            for c in 0..img.channels() {
                for y in y0..y0 + hs {
                    for x in x0..x0 + ws {
                        out.set(c, y, x, 0.0);
                    }
                }
            }
            (out, tag_of(spec, 0)?)
        }
        (Grid, TransformParams::Grid { tiles }) => {
            if tiles == 0 || h % tiles != 0 || w % tiles != 0 {
                return Err(Error::arg(format!("cannot tile a {h}x{w} image {tiles}x{tiles}")));
            }
            (grid(img, tiles), tag_of(spec, 0)?)
        }
        (kind, params) => {
            return Err(Error::config(format!(
                "augmentation `{kind}` cannot use parameters {params:?}"
            )))
        }
    };
    Ok(out)
}

pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let (c, h, w) = img.shape();
    let mut out = img.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ch, y, x, img.get(ch, y, w - 1 - x));
            }
        }
    }
    out
}

pub fn vflip(img: &ImageTensor) -> ImageTensor {
    let (c, h, w) = img.shape();
    let mut out = img.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ch, y, x, img.get(ch, h - 1 - y, x));
            }
        }
    }
    out
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Luma replicated to every channel; images whose channels already agree
/// are returned unchanged.
pub fn grayscale(img: &ImageTensor) -> ImageTensor {
    let (c, h, w) = img.shape();
    let plane = h * w;
    let d = img.data();
    let uniform = (1..c).all(|ch| d[ch * plane..(ch + 1) * plane] == d[..plane]);
    if c != 3 || uniform {
        return img.clone();
    }
    let mut out = img.clone();
    for i in 0..plane {
        let l = LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i];
        for ch in 0..3 {
            out.data_mut()[ch * plane + i] = l;
        }
    }
    out
}

/// Per-channel mean over the one-pixel border.
fn border_mean(img: &ImageTensor) -> Vec<f64> {
    let (c, h, w) = img.shape();
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            let mut n = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                        s += img.get(ch, y, x);
                        n += 1;
                    }
                }
            }
            s / n as f64
        })
        .collect()
}

/// Bilinear resampling: output pixel `(y, x)` reads the source at `map(y, x)`;
/// points outside the source take `fill`.
fn warp(img: &ImageTensor, fill: &[f64], map: impl Fn(f64, f64) -> (f64, f64)) -> ImageTensor {
    let (c, h, w) = img.shape();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y as f64, x as f64);
            if sy < -0.5 || sx < -0.5 || sy > h as f64 - 0.5 || sx > w as f64 - 0.5 {
                for (ch, f) in fill.iter().enumerate() {
                    out.set(ch, y, x, *f);
                }
                continue;
            }
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let top = img.get(ch, y0, x0) * (1.0 - fx) + img.get(ch, y0, x1) * fx;
                let bot = img.get(ch, y1, x0) * (1.0 - fx) + img.get(ch, y1, x1) * fx;
                out.set(ch, y, x, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// `tiles×tiles` repetition of the box-downscaled image.
fn grid(img: &ImageTensor, tiles: usize) -> ImageTensor {
    let (c, h, w) = img.shape();
    let (th, tw) = (h / tiles, w / tiles);
    let mut out = img.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (ty, tx) = (y % th, x % tw);
                let mut s = 0.0;
                for dy in 0..tiles {
                    for dx in 0..tiles {
                        s += img.get(ch, ty * tiles + dy, tx * tiles + dx);
                    }
                }
                out.set(ch, y, x, s / (tiles * tiles) as f64);
            }
        }
    }
    out
}
