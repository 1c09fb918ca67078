//! Deterministic synthetic segmentation corpus.
//!
//! Each image is a smooth low-contrast background texture with one to three
//! bright elliptical lesions (the mask), optional clutter drawn in the same
//! intensity range as the lesions but excluded from the mask (small blobs
//! and thin strokes), and additive Gaussian noise.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::{read_pgm, write_pgm, GrayImage};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clutter {
    None,
    Low,
    High,
}

impl Clutter {
    /// Inclusive range of distractor counts per image.
    pub fn distractor_range(self) -> (usize, usize) {
        match self {
            Clutter::None => (0, 0),
            Clutter::Low => (0, 3),
            Clutter::High => (0, 6),
        }
    }
}

impl fmt::Display for Clutter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Clutter::None => "none",
            Clutter::Low => "low",
            Clutter::High => "high",
        })
    }
}

impl FromStr for Clutter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Clutter::None),
            "low" => Ok(Clutter::Low),
            "high" => Ok(Clutter::High),
            _ => Err(Error::contract(format!("unknown clutter level {s:?}"))),
        }
    }
}

/// How the corpus is partitioned into train/val/test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRule {
    /// Train and validation fractions; the rest is test.
    Fractions { train: f64, val: f64 },
    /// Exact sizes; must sum to the corpus size.
    Counts { train: usize, val: usize, test: usize },
}

impl Default for SplitRule {
    fn default() -> Self {
        SplitRule::Fractions { train: 0.70, val: 0.15 }
    }
}

impl SplitRule {
    fn sizes(&self, count: usize) -> Result<(usize, usize, usize)> {
        match *self {
            SplitRule::Fractions { train, val } => {
                if !(train > 0.0 && val >= 0.0 && train + val <= 1.0) {
                    return Err(Error::contract(format!("bad split fractions {train}/{val}")));
                }
                let tr = (train * count as f64).round() as usize;
                let va = ((val * count as f64).round() as usize).min(count - tr);
                Ok((tr, va, count - tr - va))
            }
            SplitRule::Counts { train, val, test } => {
                if train + val + test != count {
                    return Err(Error::contract(format!(
                        "split counts {train}+{val}+{test} do not sum to {count}"
                    )));
                }
                Ok((train, val, test))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    pub count: usize,
    pub seed: u64,
    pub clutter: Clutter,
    pub noise_sigma: f64,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub split: SplitRule,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            count: 200,
            seed: 0,
            clutter: Clutter::High,
            noise_sigma: 0.08,
            min_blobs: 1,
            max_blobs: 3,
            split: SplitRule::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 16 != 0 {
            return Err(Error::contract(format!("size {} is not a positive multiple of 16", self.size)));
        }
        if self.count < 20 {
            return Err(Error::contract(format!("count {} is below the minimum of 20", self.count)));
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return Err(Error::contract("blob count range must be non-empty and start at 1 or more"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::contract("noise sigma must be non-negative"));
        }
        self.split.sizes(self.count).map(|_| ())
    }
}

/// One image with its binary mask, both `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

impl Sample {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown split {s:?}")))
    }
}

/// Samples in generation order plus split membership by index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.indices(split).iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.image.dims()[1], s.image.dims()[2]))
    }

    /// Writes `images/ID.pgm`, `masks/ID.pgm` and `{train,val,test}.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for s in &self.samples {
            write_pgm(dir.join("images").join(format!("{}.pgm", s.id)), &GrayImage::from_tensor(&s.image)?)?;
            write_pgm(dir.join("masks").join(format!("{}.pgm", s.id)), &GrayImage::from_tensor(&s.mask)?)?;
        }
        for split in Split::ALL {
            let mut body = String::new();
            for &i in self.indices(split) {
                body.push_str(&self.samples[i].id);
                body.push('\n');
            }
            let p = dir.join(format!("{}.txt", split.as_str()));
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Reads a corpus written by [`Dataset::save`]. Samples are ordered
    /// train, val, test, each in list order.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut ds = Dataset {
            samples: Vec::new(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for split in Split::ALL {
            let p = dir.join(format!("{}.txt", split.as_str()));
            let list = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            for id in list.lines().map(str::trim).filter(|l| !l.is_empty()) {
                let image = read_pgm(dir.join("images").join(format!("{id}.pgm")))?;
                let mask = read_pgm(dir.join("masks").join(format!("{id}.pgm")))?;
                if (image.width, image.height) != (mask.width, mask.height) {
                    return Err(Error::shape(format!("image and mask of {id} differ in size")));
                }
                if let Some(b) = mask.pixels.iter().find(|&&b| b != 0 && b != 255) {
                    return Err(Error::contract(format!("mask {id} holds non-binary byte {b}")));
                }
                let idx = ds.samples.len();
                ds.samples.push(Sample {
                    id: id.to_string(),
                    image: image.to_tensor(),
                    mask: mask.to_tensor(),
                });
                match split {
                    Split::Train => ds.train.push(idx),
                    Split::Val => ds.val.push(idx),
                    Split::Test => ds.test.push(idx),
                }
            }
        }
        Ok(ds)
    }
}

/// Stacks `[1,H,W]` images and masks into `[N,1,H,W]` batches.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::contract("cannot stack an empty batch"))?;
    let (h, w) = (first.image.dims()[1], first.image.dims()[2]);
    let mut img = Vec::with_capacity(samples.len() * h * w);
    let mut msk = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.dims() != [1, h, w] || s.mask.dims() != [1, h, w] {
            return Err(Error::shape(format!("sample {} is not [1,{h},{w}]", s.id)));
        }
        img.extend_from_slice(s.image.data());
        msk.extend_from_slice(s.mask.data());
    }
    let dims = [samples.len(), 1, h, w];
    Ok((Tensor::from_values(&dims, img)?, Tensor::from_values(&dims, msk)?))
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generates the corpus; fully determined by `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.count)
        .map(|i| generate_sample(cfg, i).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    let (tr, va, _) = cfg.split.sizes(cfg.count)?;
    let mut order: Vec<usize> = (0..cfg.count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    order.shuffle(&mut rng);
    let mut train = order[..tr].to_vec();
    let mut val = order[tr..tr + va].to_vec();
    let mut test = order[tr + va..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Dataset {
        samples,
        train,
        val,
        test,
    })
}

/// Per-pixel layers behind a generated sample.
#[derive(Clone, Debug)]
pub struct SampleLayers {
    pub background: Vec<f64>,
    pub foreground: Vec<bool>,
    pub distractor: Vec<bool>,
}

#[derive(Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Distance from `(y, x)` to the segment `a`–`b`.
fn segment_distance(y: f64, x: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vy, vx) = (b.0 - a.0, b.1 - a.1);
    let len2 = vy * vy + vx * vx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((y - a.0) * vy + (x - a.1) * vx) / len2).clamp(0.0, 1.0)
    };
    let (py, px) = (a.0 + t * vy, a.1 + t * vx);
    ((y - py).powi(2) + (x - px).powi(2)).sqrt()
}

/// Smooth field in `[0, 1]`: bilinear interpolation of a random grid.
fn smooth_field(rng: &mut impl Rng, size: usize, grid: usize) -> Vec<f64> {
    let knots: Vec<f64> = (0..grid * grid).map(|_| rng.random::<f64>()).collect();
    let scale = (grid - 1) as f64 / (size - 1) as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let gy = y as f64 * scale;
        let y0 = (gy.floor() as usize).min(grid - 2);
        let fy = gy - y0 as f64;
        for x in 0..size {
            let gx = x as f64 * scale;
            let x0 = (gx.floor() as usize).min(grid - 2);
            let fx = gx - x0 as f64;
            let k = |r: usize, c: usize| knots[r * grid + c];
            let top = (1.0 - fx) * k(y0, x0) + fx * k(y0, x0 + 1);
            let bot = (1.0 - fx) * k(y0 + 1, x0) + fx * k(y0 + 1, x0 + 1);
            out.push((1.0 - fy) * top + fy * bot);
        }
    }
    out
}

const BACKGROUND_LEVEL: f64 = 0.25;
const BACKGROUND_SPREAD: f64 = 0.15;
const OFFSET_RANGE: (f64, f64) = (0.25, 0.45);
const FOREGROUND_FRACTION: (f64, f64) = (0.02, 0.40);

/// Generates sample `index` of the corpus together with its layers.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<(Sample, SampleLayers)> {
    let size = cfg.size;
    let s = size as f64;
    let mut rng = sample_rng(cfg.seed, index);
    let coarse = smooth_field(&mut rng, size, 5);
    let fine = smooth_field(&mut rng, size, 13);
    let background: Vec<f64> = coarse
        .iter()
        .zip(&fine)
        .map(|(c, f)| BACKGROUND_LEVEL + BACKGROUND_SPREAD * (0.7 * c + 0.3 * f))
        .collect();

    let mut fg_offset = vec![0.0f64; size * size];
    let mut foreground = vec![false; size * size];
    for attempt in 0.. {
        if attempt == 1000 {
            return Err(Error::contract("could not place foreground within the allowed fraction"));
        }
        fg_offset.fill(0.0);
        foreground.fill(false);
        let blobs = rng.random_range(cfg.min_blobs..=cfg.max_blobs);
        for _ in 0..blobs {
            let e = Ellipse {
                cy: rng.random_range(0.15 * s..0.85 * s),
                cx: rng.random_range(0.15 * s..0.85 * s),
                ry: rng.random_range(0.08 * s..0.18 * s),
                rx: rng.random_range(0.08 * s..0.18 * s),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            };
            let off = rng.random_range(OFFSET_RANGE.0..OFFSET_RANGE.1);
            for y in 0..size {
                for x in 0..size {
                    if e.contains(y as f64, x as f64) {
                        let i = y * size + x;
                        foreground[i] = true;
                        fg_offset[i] = fg_offset[i].max(off);
                    }
                }
            }
        }
        let frac = foreground.iter().filter(|&&b| b).count() as f64 / (size * size) as f64;
        if (FOREGROUND_FRACTION.0..=FOREGROUND_FRACTION.1).contains(&frac) {
            break;
        }
    }

    let mut clutter_offset = vec![0.0f64; size * size];
    let mut distractor = vec![false; size * size];
    let (lo, hi) = cfg.clutter.distractor_range();
    let count = rng.random_range(lo..=hi);
    for _ in 0..count {
        let off = rng.random_range(OFFSET_RANGE.0..OFFSET_RANGE.1);
        let inside: Box<dyn Fn(f64, f64) -> bool> = if rng.random_bool(0.5) {
            let e = Ellipse {
                cy: rng.random_range(0.0..s),
                cx: rng.random_range(0.0..s),
                ry: rng.random_range(0.025 * s..0.06 * s),
                rx: rng.random_range(0.025 * s..0.06 * s),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            };
            Box::new(move |y, x| e.contains(y, x))
        } else {
            let a = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let len = rng.random_range(0.25 * s..0.6 * s);
            let dir = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            let b = (a.0 + len * dir.sin(), a.1 + len * dir.cos());
            let half = rng.random_range(0.8..1.5);
            Box::new(move |y, x| segment_distance(y, x, a, b) <= half)
        };
        for y in 0..size {
            for x in 0..size {
                let i = y * size + x;
                if !foreground[i] && inside(y as f64, x as f64) {
                    distractor[i] = true;
                    clutter_offset[i] = clutter_offset[i].max(off);
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::contract(format!("noise distribution: {e}")))?;
    let image: Vec<f64> = (0..size * size)
        .map(|i| {
            let eps = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (background[i] + fg_offset[i].max(clutter_offset[i]) + eps).clamp(0.0, 1.0)
        })
        .collect();
    let mask: Vec<f64> = foreground.iter().map(|&b| b as u8 as f64).collect();
    let sample = Sample {
        id: format!("img_{index:05}"),
        image: Tensor::from_values(&[1, size, size], image)?,
        mask: Tensor::from_values(&[1, size, size], mask)?,
    };
    Ok((
        sample,
        SampleLayers {
            background,
            foreground,
            distractor,
        },
    ))
}
