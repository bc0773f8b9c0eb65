//! Seeded seven-segment digit renderings with a controlled photometric shift
//! between the source and target domains.

use std::fmt;
use std::str::FromStr;

use ndarray::Array4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{quantize, Dataset, DomainPair, Split};
use crate::error::ensure;
use crate::{Error, Result};

/// Segments a..g as `(u0, v0, u1, v1)` inside a unit glyph box, v pointing down.
const SEGMENTS: [(f32, f32, f32, f32); 7] = [
    (0.0, 0.0, 1.0, 0.0),
    (1.0, 0.0, 1.0, 0.5),
    (1.0, 0.5, 1.0, 1.0),
    (0.0, 1.0, 1.0, 1.0),
    (0.0, 0.5, 0.0, 1.0),
    (0.0, 0.0, 0.0, 0.5),
    (0.0, 0.5, 1.0, 0.5),
];

/// Lit segments per digit, bit i = segment i.
const DIGITS: [u8; 10] = [
    0b011_1111, 0b000_0110, 0b101_1011, 0b100_1111, 0b110_0110, 0b110_1101, 0b111_1101, 0b000_0111,
    0b111_1111, 0b110_1111,
];

const BACKGROUND: [f32; 3] = [0.35, 0.40, 0.45];
const FOREGROUND: [f32; 3] = [0.70, 0.60, 0.50];
const COLOR_JITTER: f32 = 0.05;
const PIXEL_NOISE: f32 = 0.03;

pub const DEFAULT_TINT: [f32; 3] = [0.15, -0.15, 0.15];
pub const DEFAULT_BRIGHTNESS: f32 = 0.6;
pub const DEFAULT_SATURATION: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    ColorTint,
    Brightness,
    Saturation,
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::ColorTint => "color_tint",
            ShiftKind::Brightness => "brightness",
            ShiftKind::Saturation => "saturation",
        })
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color_tint" | "tint" => Ok(ShiftKind::ColorTint),
            "brightness" => Ok(ShiftKind::Brightness),
            "saturation" => Ok(ShiftKind::Saturation),
            other => Err(Error::Config(format!(
                "unknown shift `{other}` (expected color_tint, brightness or saturation)"
            ))),
        }
    }
}

/// A photometric transform applied to every target pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shift {
    /// Added per channel.
    ColorTint([f32; 3]),
    /// Multiplies every channel.
    Brightness(f32),
    /// Interpolates between the pixel's luma (0) and the pixel itself (1).
    Saturation(f32),
}

impl Shift {
    pub fn default_for(kind: ShiftKind) -> Self {
        match kind {
            ShiftKind::ColorTint => Shift::ColorTint(DEFAULT_TINT),
            ShiftKind::Brightness => Shift::Brightness(DEFAULT_BRIGHTNESS),
            ShiftKind::Saturation => Shift::Saturation(DEFAULT_SATURATION),
        }
    }

    pub fn kind(&self) -> ShiftKind {
        match self {
            Shift::ColorTint(_) => ShiftKind::ColorTint,
            Shift::Brightness(_) => ShiftKind::Brightness,
            Shift::Saturation(_) => ShiftKind::Saturation,
        }
    }

    pub fn apply(&self, rgb: [f32; 3]) -> [f32; 3] {
        match *self {
            Shift::ColorTint(t) => [rgb[0] + t[0], rgb[1] + t[1], rgb[2] + t[2]],
            Shift::Brightness(f) => rgb.map(|v| v * f),
            Shift::Saturation(s) => {
                let luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                rgb.map(|v| luma + s * (v - luma))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        // Source pixels span at most [lo, hi]; the shifted range must stay inside [0, 1].
        let lo = BACKGROUND
            .iter()
            .chain(&FOREGROUND)
            .fold(f32::INFINITY, |a, &b| a.min(b))
            - COLOR_JITTER
            - PIXEL_NOISE;
        let hi = BACKGROUND
            .iter()
            .chain(&FOREGROUND)
            .fold(0.0f32, |a, &b| a.max(b))
            + COLOR_JITTER
            + PIXEL_NOISE;
        let ok = match *self {
            Shift::ColorTint(t) => t.iter().all(|&d| lo + d >= 0.0 && hi + d <= 1.0),
            Shift::Brightness(f) => f > 0.0 && hi * f <= 1.0,
            Shift::Saturation(s) => (0.0..=1.0).contains(&s),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "shift {self:?} would push pixels outside [0, 1]"
            )))
        }
    }
}

/// Everything that determines a synthetic domain pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_per_class: usize,
    pub shift: Shift,
    pub image_size: usize,
    pub num_classes: usize,
}

impl SyntheticSpec {
    pub fn new(seed: u64, n_per_class: usize, kind: ShiftKind) -> Self {
        Self {
            seed,
            n_per_class,
            shift: Shift::default_for(kind),
            image_size: super::DIGIT_SIZE,
            num_classes: super::DIGIT_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_per_class >= 10,
            "n_per_class must be at least 10, got {}",
            self.n_per_class
        );
        ensure!(
            (2..=10).contains(&self.num_classes),
            "synthetic glyphs support 2 to 10 classes, got {}",
            self.num_classes
        );
        ensure!(
            self.image_size >= 8,
            "image_size must be at least 8, got {}",
            self.image_size
        );
        self.shift.validate()
    }

    pub fn source(&self, split: Split) -> Result<Dataset> {
        self.render(split, None)
    }

    pub fn target(&self, split: Split) -> Result<Dataset> {
        self.render(split, Some(self.shift))
    }

    pub fn pair(&self, split: Split) -> Result<DomainPair> {
        DomainPair::new(self.source(split)?, self.target(split)?)
    }

    fn render(&self, split: Split, shift: Option<Shift>) -> Result<Dataset> {
        self.validate()?;
        let stream = match split {
            Split::Train => 0,
            Split::Test => 2,
        } + u64::from(shift.is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);

        let n = self.n_per_class * self.num_classes;
        let s = self.image_size;
        let mut pixels = Array4::<u8>::zeros((n, 3, s, s));
        let labels: Vec<usize> = (0..n).map(|i| i % self.num_classes).collect();
        let mut canvas = vec![[0.0f32; 3]; s * s];
        for (i, &label) in labels.iter().enumerate() {
            draw(&mut canvas, s, label, &mut rng);
            for (p, rgb) in canvas.iter().enumerate() {
                let rgb = shift.map_or(*rgb, |sh| sh.apply(*rgb));
                for (c, v) in rgb.iter().enumerate() {
                    pixels[[i, c, p / s, p % s]] = quantize(*v);
                }
            }
        }
        let name = match shift {
            None => "synth-source".to_string(),
            Some(sh) => format!("synth-{}", sh.kind()),
        };
        Dataset::new(pixels, labels, self.num_classes, split, name)
    }
}

/// Training split of the default synthetic pair for `shift`.
pub fn make_synthetic_pair(seed: u64, n_per_class: usize, shift: ShiftKind) -> Result<DomainPair> {
    SyntheticSpec::new(seed, n_per_class, shift).pair(Split::Train)
}

fn jitter<R: Rng>(base: [f32; 3], rng: &mut R) -> [f32; 3] {
    base.map(|v| v + rng.gen_range(-COLOR_JITTER..=COLOR_JITTER))
}

fn segment_distance(px: f32, py: f32, (x0, y0, x1, y1): (f32, f32, f32, f32)) -> f32 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let t = (((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy).max(1e-12)).clamp(0.0, 1.0);
    let (cx, cy) = (x0 + t * dx - px, y0 + t * dy - py);
    (cx * cx + cy * cy).sqrt()
}

fn draw<R: Rng>(canvas: &mut [[f32; 3]], size: usize, digit: usize, rng: &mut R) {
    let s = size as f32;
    let bg = jitter(BACKGROUND, rng);
    let fg = jitter(FOREGROUND, rng);
    let gh = rng.gen_range(0.5..0.7) * s;
    let gw = rng.gen_range(0.3..0.45) * s;
    let cx = s / 2.0 + rng.gen_range(-0.08..0.08) * s;
    let cy = s / 2.0 + rng.gen_range(-0.08..0.08) * s;
    let slant = rng.gen_range(-0.15..0.15);
    let thickness = rng.gen_range(0.07..0.11) * s;

    let place = |u: f32, v: f32| {
        (
            cx + (u - 0.5) * gw + slant * (0.5 - v) * gh,
            cy + (v - 0.5) * gh,
        )
    };
    let lit: Vec<_> = SEGMENTS
        .iter()
        .enumerate()
        .filter(|(k, _)| DIGITS[digit] >> k & 1 == 1)
        .map(|(_, &(u0, v0, u1, v1))| {
            let (x0, y0) = place(u0, v0);
            let (x1, y1) = place(u1, v1);
            (x0, y0, x1, y1)
        })
        .collect();

    for (p, px) in canvas.iter_mut().enumerate() {
        let (x, y) = ((p % size) as f32 + 0.5, (p / size) as f32 + 0.5);
        let d = lit
            .iter()
            .map(|&seg| segment_distance(x, y, seg))
            .fold(f32::INFINITY, f32::min);
        let m = (thickness / 2.0 - d + 0.5).clamp(0.0, 1.0);
        for c in 0..3 {
            px[c] = bg[c] * (1.0 - m) + fg[c] * m + rng.gen_range(-PIXEL_NOISE..=PIXEL_NOISE);
        }
    }
}
