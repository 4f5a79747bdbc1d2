//! Synthetic sparse-informative-frame clips.
//!
//! Every clip has a static noise background. On `k` informative frames the
//! label's glyph is drawn in white; every other frame carries a glyph of a
//! different class drawn in orange. Glyph positions are redrawn per frame.
//! All glyphs are left/right symmetric, so horizontal flips keep the label.
//!
//! # File layout
//!
//! One file per split, little-endian:
//!
//! ```text
//! magic    8 bytes  "NUTACLIP"
//! version  u32      1
//! count, channels, frames, height, width, classes, informative   u32 each
//! count x { pixels u8[channels * frames * height * width]   row-major [C, T, H, W], value / 255
//!           label  u32
//!           frames u64  bitmap of informative frame indices }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"NUTACLIP";
pub const VERSION: u32 = 1;

const GLYPH_CELLS: usize = 4;
const BACKGROUND_MAX: f64 = 0.2;
const LABEL_COLOUR: [f64; 3] = [1.0, 1.0, 1.0];
const DISTRACTOR_COLOUR: [f64; 3] = [1.0, 0.6, 0.0];

/// Split identifiers mixed into per-sample seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

/// Generation parameters, loadable from flat TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub num_train: usize,
    pub num_val: usize,
    pub classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Informative frames per clip.
    pub informative: usize,
    /// Glyph cell size in pixels (glyphs are 4x4 cells).
    #[serde(default = "two")]
    pub glyph_scale: usize,
    pub seed: u64,
}

fn two() -> usize {
    2
}

impl DataConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: DataConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("need at least two classes, got {}", self.classes));
        }
        if self.classes > glyph_bank().len() {
            return fail(format!("at most {} classes are available", glyph_bank().len()));
        }
        if self.informative == 0 || self.informative >= self.frames {
            return fail(format!("informative frames {} must lie in [1, {})", self.informative, self.frames));
        }
        if self.frames > 64 {
            return fail("at most 64 frames per clip".into());
        }
        let side = GLYPH_CELLS * self.glyph_scale;
        if self.glyph_scale == 0 || side > self.height || side > self.width {
            return fail(format!("{side}px glyph does not fit a {}x{} frame", self.height, self.width));
        }
        Ok(())
    }

    pub fn meta(&self) -> DataMeta {
        DataMeta {
            channels: 3,
            frames: self.frames,
            height: self.height,
            width: self.width,
            classes: self.classes,
            informative: self.informative,
        }
    }
}

/// Shape header shared by every clip of a split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataMeta {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub informative: usize,
}

impl DataMeta {
    pub fn clip_len(&self) -> usize {
        self.channels * self.frames * self.height * self.width
    }
}

/// A decoded sample.
#[derive(Clone, Debug)]
pub struct SyntheticClip {
    /// `[3, T, H, W]` in `[0, 1]`.
    pub frames: Tensor<f64>,
    pub label: usize,
    /// Sorted informative frame indices.
    pub informative_frames: Vec<usize>,
}

/// Left/right symmetric 4x4 glyphs. Each code holds the two left columns of
/// every row (bit 0 is the outer column); the right half mirrors it. Codes are
/// picked greedily so every glyph sets at least three code bits (six cells)
/// and any two differ in at least three code bits.
pub fn glyph_bank() -> &'static [u8] {
    static BANK: std::sync::OnceLock<Vec<u8>> = std::sync::OnceLock::new();
    BANK.get_or_init(|| {
        let mut bank: Vec<u8> = Vec::new();
        for code in 0u8..=255 {
            if code.count_ones() >= 3 && bank.iter().all(|&b| (b ^ code).count_ones() >= 3) {
                bank.push(code);
            }
        }
        bank
    })
}

/// The 4x4 cell mask of a glyph code, row-major.
pub fn glyph_mask(code: u8) -> [[bool; GLYPH_CELLS]; GLYPH_CELLS] {
    let mut m = [[false; GLYPH_CELLS]; GLYPH_CELLS];
    for (r, row) in m.iter_mut().enumerate() {
        let bits = (code >> (2 * r)) & 0b11;
        row[0] = bits & 1 != 0;
        row[1] = bits & 2 != 0;
        row[2] = row[1];
        row[3] = row[0];
    }
    m
}

fn quantise(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream() << 40) | index as u64);
    rng
}

/// Per-clip background, `[H, W]` grey levels shared by every frame and channel.
pub fn render_background(cfg: &DataConfig, split: Split, index: usize) -> Vec<u8> {
    let mut rng = sample_rng(cfg.seed, split, index);
    (0..cfg.height * cfg.width)
        .map(|_| quantise(rng.gen::<f64>() * BACKGROUND_MAX))
        .collect()
}

/// Renders one clip: pixels `[3, T, H, W]`, label, informative bitmap.
pub fn render_clip(cfg: &DataConfig, split: Split, index: usize) -> (Vec<u8>, usize, u64) {
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let plane = h * w;
    let background = render_background(cfg, split, index);
    // skip past the background draws so the background can be re-rendered alone
    let mut rng = sample_rng(cfg.seed, split, index);
    for _ in 0..plane {
        rng.gen::<f64>();
    }
    let label = index % cfg.classes;
    let mut bitmap = 0u64;
    for f in sample(&mut rng, t, cfg.informative).iter() {
        bitmap |= 1 << f;
    }
    let bank = glyph_bank();
    let side = GLYPH_CELLS * cfg.glyph_scale;
    let mut pixels = vec![0u8; 3 * t * plane];
    for c in 0..3 {
        for f in 0..t {
            pixels[(c * t + f) * plane..(c * t + f + 1) * plane].copy_from_slice(&background);
        }
    }
    for f in 0..t {
        let informative = bitmap & (1 << f) != 0;
        let (class, colour) = if informative {
            (label, LABEL_COLOUR)
        } else {
            let other = rng.gen_range(0..cfg.classes - 1);
            (if other >= label { other + 1 } else { other }, DISTRACTOR_COLOUR)
        };
        let mask = glyph_mask(bank[class]);
        let y0 = rng.gen_range(0..=h - side);
        let x0 = rng.gen_range(0..=w - side);
        for y in 0..side {
            for x in 0..side {
                if !mask[y / cfg.glyph_scale][x / cfg.glyph_scale] {
                    continue;
                }
                for (c, &v) in colour.iter().enumerate() {
                    pixels[(c * t + f) * plane + (y0 + y) * w + x0 + x] = quantise(v);
                }
            }
        }
    }
    (pixels, label, bitmap)
}

/// A split held as quantised pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DataMeta,
    pub pixels: Vec<u8>,
    pub labels: Vec<u32>,
    pub informative: Vec<u64>,
}

/// Renders `count` clips of a split; sample `i` has label `i mod K`, so every
/// class appears equally often when `K` divides `count`.
pub fn generate_split(cfg: &DataConfig, split: Split, count: usize) -> Result<Dataset> {
    cfg.validate()?;
    let meta = cfg.meta();
    let mut pixels = Vec::with_capacity(count * meta.clip_len());
    let mut labels = Vec::with_capacity(count);
    let mut informative = Vec::with_capacity(count);
    for i in 0..count {
        let (p, label, bits) = render_clip(cfg, split, i);
        pixels.extend_from_slice(&p);
        labels.push(label as u32);
        informative.push(bits);
    }
    Ok(Dataset {
        meta,
        pixels,
        labels,
        informative,
    })
}

/// Train and validation splits.
pub fn generate_dataset(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    Ok((
        generate_split(cfg, Split::Train, cfg.num_train)?,
        generate_split(cfg, Split::Val, cfg.num_val)?,
    ))
}

/// Augmentations applied while batching.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub temporal_offset: bool,
}

fn bits_to_frames(bits: u64, frames: usize) -> Vec<usize> {
    (0..frames).filter(|f| bits & (1 << f) != 0).collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn informative_frames(&self, i: usize) -> Vec<usize> {
        bits_to_frames(self.informative[i], self.meta.frames)
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let len = self.meta.clip_len();
        &self.pixels[i * len..(i + 1) * len]
    }

    pub fn clip(&self, i: usize) -> Result<SyntheticClip> {
        let m = self.meta;
        let data = self.raw(i).iter().map(|&v| v as f64 / 255.0).collect();
        Ok(SyntheticClip {
            frames: Tensor::new(data, [m.channels, m.frames, m.height, m.width])?,
            label: self.label(i),
            informative_frames: self.informative_frames(i),
        })
    }

    /// Stacks samples into `[N, 3, T, H, W]`. With augmentation, each sample
    /// may be flipped left/right and rolled by a random number of frames; the
    /// returned informative sets follow the roll.
    pub fn batch<T: Scalar, R: Rng + ?Sized>(
        &self,
        indices: &[usize],
        augment: Augment,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Vec<usize>, Vec<Vec<usize>>)> {
        let m = self.meta;
        let (t, h, w) = (m.frames, m.height, m.width);
        let plane = h * w;
        let lut: Vec<T> = (0..=255u8).map(|v| T::of(v as f64 / 255.0)).collect();
        let mut data = Vec::with_capacity(indices.len() * m.clip_len());
        let mut labels = Vec::with_capacity(indices.len());
        let mut frames = Vec::with_capacity(indices.len());
        for &i in indices {
            let flip = augment.flip && rng.gen::<bool>();
            let shift = if augment.temporal_offset { rng.gen_range(0..t) } else { 0 };
            let raw = self.raw(i);
            for c in 0..m.channels {
                for f in 0..t {
                    let src = (f + t - shift) % t;
                    let frame = &raw[(c * t + src) * plane..(c * t + src + 1) * plane];
                    for row in frame.chunks(w) {
                        if flip {
                            data.extend(row.iter().rev().map(|&v| lut[v as usize]));
                        } else {
                            data.extend(row.iter().map(|&v| lut[v as usize]));
                        }
                    }
                }
            }
            labels.push(self.label(i));
            let mut inf: Vec<usize> = self.informative_frames(i).iter().map(|&f| (f + shift) % t).collect();
            inf.sort_unstable();
            frames.push(inf);
        }
        let x = Tensor::new(data, [indices.len(), m.channels, t, h, w])?;
        Ok((x, labels, frames))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(self.pixels.len() + self.len() * 12 + 48);
        buf.extend_from_slice(MAGIC);
        let m = self.meta;
        for v in [
            VERSION as usize,
            self.len(),
            m.channels,
            m.frames,
            m.height,
            m.width,
            m.classes,
            m.informative,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for i in 0..self.len() {
            buf.extend_from_slice(self.raw(i));
            buf.extend_from_slice(&self.labels[i].to_le_bytes());
            buf.extend_from_slice(&self.informative[i].to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if buf.len() < 40 || &buf[..8] != MAGIC {
            return Err(bad("not a clip file (bad magic)"));
        }
        let word = |i: usize| u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != VERSION as usize {
            return Err(bad(&format!("unsupported version {}", word(0))));
        }
        let count = word(1);
        let meta = DataMeta {
            channels: word(2),
            frames: word(3),
            height: word(4),
            width: word(5),
            classes: word(6),
            informative: word(7),
        };
        let len = meta.clip_len();
        let record = len + 12;
        let body = &buf[40..];
        if body.len() != count * record {
            return Err(bad(&format!("expected {} payload bytes, found {}", count * record, body.len())));
        }
        let mut data = Dataset {
            meta,
            pixels: Vec::with_capacity(count * len),
            labels: Vec::with_capacity(count),
            informative: Vec::with_capacity(count),
        };
        for r in body.chunks(record) {
            data.pixels.extend_from_slice(&r[..len]);
            data.labels.push(u32::from_le_bytes(r[len..len + 4].try_into().unwrap()));
            data.informative.push(u64::from_le_bytes(r[len + 4..].try_into().unwrap()));
        }
        if data.labels.iter().any(|&l| l as usize >= meta.classes) {
            return Err(bad("label outside class range"));
        }
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            num_train: 16,
            num_val: 8,
            classes: 8,
            frames: 8,
            height: 32,
            width: 32,
            informative: 2,
            glyph_scale: 2,
            seed: 7,
        }
    }

    #[test]
    fn glyphs_are_symmetric_and_distinct() {
        let bank = glyph_bank();
        assert!(bank.len() >= 8);
        for (i, &a) in bank.iter().enumerate() {
            let m = glyph_mask(a);
            assert!(m.iter().all(|r| r[0] == r[3] && r[1] == r[2]));
            for &b in &bank[..i] {
                assert_ne!(glyph_mask(b), m);
            }
        }
    }

    #[test]
    fn labels_are_balanced() {
        let d = generate_split(&small(), Split::Train, 16).unwrap();
        for k in 0..8 {
            assert_eq!(d.labels.iter().filter(|&&l| l == k).count(), 2);
        }
        assert!(d.informative.iter().all(|b| b.count_ones() == 2));
    }

    #[test]
    fn infeasible_geometry_rejected() {
        let cfg = DataConfig { height: 6, ..small() };
        assert!(cfg.validate().is_err());
        let cfg = DataConfig { informative: 8, ..small() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flip_keeps_label_and_roll_moves_frames() {
        let d = generate_split(&small(), Split::Val, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let aug = Augment {
            flip: true,
            temporal_offset: true,
        };
        let (x, labels, frames) = d.batch::<f64, _>(&[0, 1, 2, 3], aug, &mut rng).unwrap();
        assert_eq!(x.dims(), &[4, 3, 8, 32, 32]);
        assert_eq!(labels, vec![0, 1, 2, 3]);
        assert!(frames.iter().all(|f| f.len() == 2));
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, b"NOTACLIPxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(Dataset::load(&p), Err(Error::Format { .. })));
    }
}
