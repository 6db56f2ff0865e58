//! Procedural sprite scenes and their captions: the corpus the base
//! text-to-image model is pretrained on and the source of the fixture
//! subjects.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::img::ImageTensor;

/// Side of the rendered canvas; training images are box-downsampled from it.
pub const CANVAS: usize = 32;

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.word() == w)
            }
        }
    };
}

word_enum!(Class {
    Dog => "dog", Cat => "cat", Ball => "ball", Box => "box",
    Tree => "tree", Car => "car", Cup => "cup", Bird => "bird",
});

word_enum!(Color {
    Red => "red", Green => "green", Blue => "blue", Yellow => "yellow", Orange => "orange",
    Purple => "purple", White => "white", Black => "black", Brown => "brown", Pink => "pink",
});

word_enum!(Pattern { Plain => "plain", Striped => "striped", Spotted => "spotted" });

word_enum!(Background { Grass => "grass", Sky => "sky", Sand => "sand", Snow => "snow", Night => "night" });

word_enum!(Position { Left => "left", Middle => "middle", Right => "right" });

word_enum!(Size { Small => "small", Big => "big" });

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Self::Red => [0.85, 0.12, 0.12],
            Self::Green => [0.15, 0.7, 0.2],
            Self::Blue => [0.15, 0.3, 0.9],
            Self::Yellow => [0.95, 0.85, 0.1],
            Self::Orange => [0.95, 0.5, 0.1],
            Self::Purple => [0.55, 0.2, 0.7],
            Self::White => [0.95, 0.95, 0.95],
            Self::Black => [0.08, 0.08, 0.08],
            Self::Brown => [0.5, 0.3, 0.12],
            Self::Pink => [0.95, 0.55, 0.7],
        }
    }
}

impl Background {
    /// Colors above and below the horizon.
    fn colors(self) -> ([f64; 3], [f64; 3]) {
        match self {
            Self::Grass => ([0.55, 0.75, 0.95], [0.3, 0.6, 0.2]),
            Self::Sky => ([0.45, 0.65, 0.95], [0.7, 0.85, 1.0]),
            Self::Sand => ([0.55, 0.75, 0.95], [0.9, 0.8, 0.55]),
            Self::Snow => ([0.75, 0.78, 0.82], [0.97, 0.97, 1.0]),
            Self::Night => ([0.05, 0.05, 0.2], [0.15, 0.15, 0.2]),
        }
    }

    /// Caption phrase, e.g. `on the grass`.
    pub fn phrase(self) -> &'static str {
        match self {
            Self::Grass => "on the grass",
            Self::Sky => "in the sky",
            Self::Sand => "on the sand",
            Self::Snow => "in the snow",
            Self::Night => "at night",
        }
    }
}

impl Position {
    fn center_x(self) -> f64 {
        match self {
            Self::Left => 10.0,
            Self::Middle => 16.0,
            Self::Right => 22.0,
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Self::Left => "on the left",
            Self::Middle => "in the middle",
            Self::Right => "on the right",
        }
    }
}

/// Shape proportions that make one object instance recognizable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Style {
    /// Body width and height multipliers around 1.
    pub stretch: (f64, f64),
    /// Accent color for details (ears, roof, handle, beak...).
    pub accent: Color,
    /// Seed of the spot layout.
    pub spots: u64,
}

impl Style {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            stretch: (rng.gen_range(0.85..1.15), rng.gen_range(0.85..1.15)),
            accent: *Color::ALL.choose(rng).expect("non-empty"),
            spots: rng.gen(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub class: Class,
    pub color: Color,
    pub pattern: Pattern,
    pub background: Background,
    pub position: Position,
    pub size: Size,
    pub mirrored: bool,
    pub style: Style,
}

impl Scene {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            class: *Class::ALL.choose(rng).expect("non-empty"),
            color: *Color::ALL.choose(rng).expect("non-empty"),
            pattern: *Pattern::ALL.choose(rng).expect("non-empty"),
            background: *Background::ALL.choose(rng).expect("non-empty"),
            position: *Position::ALL.choose(rng).expect("non-empty"),
            size: *Size::ALL.choose(rng).expect("non-empty"),
            mirrored: rng.gen(),
            style: Style::random(rng),
        }
    }

    /// Full caption with every attribute.
    pub fn caption(&self) -> String {
        self.caption_with(&[true; 5])
    }

    /// Caption keeping each attribute with probability `keep`; the class
    /// noun is always kept.
    pub fn caption_dropout(&self, rng: &mut impl Rng, keep: f64) -> String {
        let mut flags = [false; 5];
        for f in &mut flags {
            *f = rng.gen_bool(keep);
        }
        self.caption_with(&flags)
    }

    /// Flags: size, color, pattern, position, background.
    fn caption_with(&self, flags: &[bool; 5]) -> String {
        let mut words = vec!["a", "photo", "of", "a"];
        if flags[0] {
            words.push(self.size.word());
        }
        if flags[1] {
            words.push(self.color.word());
        }
        if flags[2] && self.pattern != Pattern::Plain {
            words.push(self.pattern.word());
        }
        words.push(self.class.word());
        if flags[3] {
            words.push(self.position.phrase());
        }
        if flags[4] {
            words.push(self.background.phrase());
        }
        words.join(" ")
    }

    pub fn render(&self) -> ImageTensor {
        let mut canvas = Canvas::new(self.background);
        let scale = match self.size {
            Size::Small => 0.7,
            Size::Big => 1.0,
        };
        let frame = Frame {
            cx: self.position.center_x(),
            cy: 20.0,
            sx: scale * self.style.stretch.0 * if self.mirrored { -1.0 } else { 1.0 },
            sy: scale * self.style.stretch.1,
        };
        let body = self.color.rgb();
        let accent = self.style.accent.rgb();
        let paint = Paint {
            base: body,
            pattern: self.pattern,
            spots: self.style.spots,
        };
        draw_object(&mut canvas, self.class, &frame, &paint, accent);
        canvas.into_image()
    }
}

/// Object-local coordinates: the object is drawn around `(0, 0)` in units
/// of pixels of a big, unstretched instance.
struct Frame {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
}

impl Frame {
    /// Canvas pixel centre to object-local coordinates.
    fn local(&self, x: usize, y: usize) -> (f64, f64) {
        ((x as f64 + 0.5 - self.cx) / self.sx, (y as f64 + 0.5 - self.cy) / self.sy)
    }
}

struct Paint {
    base: [f64; 3],
    pattern: Pattern,
    spots: u64,
}

impl Paint {
    fn at(&self, u: f64, v: f64) -> [f64; 3] {
        let dark = |c: [f64; 3]| c.map(|x| x * 0.45);
        match self.pattern {
            Pattern::Plain => self.base,
            Pattern::Striped => {
                if (u + 40.0).rem_euclid(4.0) < 2.0 {
                    dark(self.base)
                } else {
                    self.base
                }
            }
            Pattern::Spotted => {
                let (cu, cv) = ((u / 4.0).floor(), (v / 4.0).floor());
                let h = hash(self.spots, cu as i64, cv as i64);
                let (ou, ov) = (cu * 4.0 + 2.0, cv * 4.0 + 2.0);
                if h % 2 == 0 && (u - ou).powi(2) + (v - ov).powi(2) < 1.6 {
                    dark(self.base)
                } else {
                    self.base
                }
            }
        }
    }
}

fn hash(seed: u64, a: i64, b: i64) -> u64 {
    let mut x = seed ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^= x >> 33;
    x
}

struct Canvas {
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(bg: Background) -> Self {
        let (top, bottom) = bg.colors();
        let mut rgb = Vec::with_capacity(CANVAS * CANVAS);
        for y in 0..CANVAS {
            for _ in 0..CANVAS {
                let c = if y < 14 {
                    let k = y as f64 / 14.0;
                    top.map(|v| v * (0.85 + 0.15 * k))
                } else {
                    bottom
                };
                rgb.push(c);
            }
        }
        if bg == Background::Night {
            for (x, y) in [(3usize, 2usize), (11, 5), (19, 1), (27, 4), (24, 9)] {
                rgb[y * CANVAS + x] = [0.9, 0.9, 0.7];
            }
        }
        Self { rgb }
    }

    /// Paints every pixel whose object-local coordinates satisfy `inside`.
    fn fill(&mut self, f: &Frame, inside: impl Fn(f64, f64) -> bool, color: impl Fn(f64, f64) -> [f64; 3]) {
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let (u, v) = f.local(x, y);
                if inside(u, v) {
                    self.rgb[y * CANVAS + x] = color(u, v);
                }
            }
        }
    }

    fn into_image(self) -> ImageTensor {
        let mut img = ImageTensor::zeros(3, CANVAS, CANVAS);
        for (i, px) in self.rgb.iter().enumerate() {
            for (c, v) in px.iter().enumerate() {
                img.set(c, i / CANVAS, i % CANVAS, v.clamp(0.0, 1.0) * 2.0 - 1.0);
            }
        }
        img
    }
}

fn ellipse(cu: f64, cv: f64, ru: f64, rv: f64) -> impl Fn(f64, f64) -> bool {
    move |u, v| ((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2) <= 1.0
}

fn rect(u0: f64, v0: f64, u1: f64, v1: f64) -> impl Fn(f64, f64) -> bool {
    move |u, v| u >= u0 && u <= u1 && v >= v0 && v <= v1
}

/// Triangle with apex `(au, av)` over a horizontal base at `bv` spanning `bu0..bu1`.
fn triangle(au: f64, av: f64, bu0: f64, bu1: f64, bv: f64) -> impl Fn(f64, f64) -> bool {
    move |u, v| {
        let t = (v - av) / (bv - av);
        if !(0.0..=1.0).contains(&t) {
            return false;
        }
        let lo = au + (bu0 - au) * t;
        let hi = au + (bu1 - au) * t;
        u >= lo.min(hi) && u <= lo.max(hi)
    }
}

fn draw_object(c: &mut Canvas, class: Class, f: &Frame, p: &Paint, accent: [f64; 3]) {
    let body = |u: f64, v: f64| p.at(u, v);
    let solid = |col: [f64; 3]| move |_: f64, _: f64| col;
    let black = [0.05, 0.05, 0.05];
    match class {
        Class::Dog => {
            for lu in [-5.0, -2.0, 2.5, 5.5] {
                c.fill(f, rect(lu - 0.9, 2.0, lu + 0.9, 7.0), &body);
            }
            c.fill(f, triangle(-9.0, -4.0, -8.0, -6.5, 0.5), &body);
            c.fill(f, ellipse(0.0, 0.0, 7.5, 4.0), &body);
            c.fill(f, ellipse(7.5, -4.0, 3.5, 3.2), &body);
            c.fill(f, ellipse(6.2, -5.5, 1.3, 3.0), solid(accent));
            c.fill(f, ellipse(10.6, -3.5, 1.0, 0.9), solid(black));
        }
        Class::Cat => {
            for lu in [-4.0, -1.5, 2.0, 4.5] {
                c.fill(f, rect(lu - 0.7, 2.0, lu + 0.7, 6.0), &body);
            }
            c.fill(f, |u, v| (-11.0..=-6.0).contains(&u) && (v - (-2.0 - 0.5 * (u + 6.0))).abs() < 0.9, &body);
            c.fill(f, ellipse(0.0, 0.0, 6.0, 3.2), &body);
            c.fill(f, ellipse(7.0, -3.5, 3.0, 2.8), &body);
            c.fill(f, triangle(5.5, -9.0, 4.5, 6.8, -5.5), solid(accent));
            c.fill(f, triangle(8.5, -9.0, 7.3, 9.7, -5.5), solid(accent));
            c.fill(f, ellipse(8.3, -3.8, 0.7, 0.7), solid(black));
        }
        Class::Ball => {
            c.fill(f, ellipse(0.0, -1.0, 7.0, 7.0), &body);
            c.fill(f, |u, v| (v + 1.0).abs() < 0.8 && u * u + (v + 1.0).powi(2) < 49.0, solid(accent));
        }
        Class::Box => {
            c.fill(f, rect(-7.0, -6.0, 7.0, 7.0), &body);
            c.fill(f, rect(-7.0, -9.0, 7.0, -6.0), solid(accent));
        }
        Class::Tree => {
            c.fill(f, rect(-1.5, 0.0, 1.5, 8.0), solid(Color::Brown.rgb()));
            c.fill(f, triangle(0.0, -14.0, -8.0, 8.0, 2.0), &body);
            c.fill(f, ellipse(0.0, -14.0, 1.3, 1.3), solid(accent));
        }
        Class::Car => {
            c.fill(f, rect(-10.0, -2.0, 10.0, 4.0), &body);
            c.fill(f, rect(-4.0, -7.0, 5.0, -2.0), solid(accent));
            c.fill(f, ellipse(-6.0, 4.5, 2.3, 2.3), solid(black));
            c.fill(f, ellipse(6.0, 4.5, 2.3, 2.3), solid(black));
            c.fill(f, rect(9.0, -1.0, 10.0, 1.0), solid([1.0, 0.95, 0.6]));
        }
        Class::Cup => {
            c.fill(
                f,
                |u, v| {
                    let r = (u - 6.0).powi(2) + (v + 1.0).powi(2);
                    (5.0..=12.0).contains(&r) && u > 5.0
                },
                solid(accent),
            );
            c.fill(f, |u, v| (-6.0..=7.0).contains(&v) && u.abs() <= 5.5 - 0.15 * (v + 6.0), &body);
        }
        Class::Bird => {
            c.fill(f, triangle(-8.0, -2.0, -11.0, -11.0, 2.0), &body);
            c.fill(f, ellipse(0.0, 0.0, 6.0, 3.6), &body);
            c.fill(f, ellipse(5.0, -3.0, 2.6, 2.4), &body);
            c.fill(f, triangle(9.5, -2.8, 7.0, 7.0, -2.8 + 0.01), solid(accent));
            c.fill(f, triangle(-1.0, -5.0, -3.0, 2.0, 0.0), solid(accent));
            c.fill(f, ellipse(5.8, -3.5, 0.6, 0.6), solid(black));
        }
    }
}

/// Every word the world's captions can use.
pub fn caption_words() -> Vec<&'static str> {
    let mut w: Vec<&str> = vec!["a", "photo", "of", "on", "the", "in", "at"];
    w.extend(Class::ALL.iter().map(|c| c.word()));
    w.extend(Color::ALL.iter().map(|c| c.word()));
    w.extend(Pattern::ALL.iter().map(|c| c.word()));
    w.extend(Background::ALL.iter().map(|c| c.word()));
    w.extend(Position::ALL.iter().map(|c| c.word()));
    w.extend(Size::ALL.iter().map(|c| c.word()));
    w
}
