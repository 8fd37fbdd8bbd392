//! Synthetic clips whose classes differ only in the direction of motion.
//!
//! A small glyph moves over a noisy background. Three class pairs are exact
//! time reversals of each other (the reverse clip reuses the forward clip's
//! frames in reverse order), so any model that pools frames symmetrically
//! cannot tell the two classes of a pair apart.
//!
//! File layout (little-endian): magic `STANDS1\0`, version `u32`, then `N`,
//! `T`, `H`, `W` as `u32`; per clip the `T·H·W` pixels as `f32`, the label
//! as `u32`, the caption length as `u8` and the caption ids as `u32`.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::encoders::weights::{read_exact, read_u32};
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::rng::{stream_rng, streams, StreamRng};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"STANDS1\0";
pub const VERSION: u32 = 1;

pub const LEFT_TO_RIGHT: usize = 0;
pub const RIGHT_TO_LEFT: usize = 1;
pub const TOP_TO_BOTTOM: usize = 2;
pub const BOTTOM_TO_TOP: usize = 3;
pub const CLOCKWISE: usize = 4;
pub const COUNTER_CLOCKWISE: usize = 5;
pub const STATIC: usize = 6;
pub const BLINK: usize = 7;
pub const NUM_CLASSES: usize = 8;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "left_to_right",
    "right_to_left",
    "top_to_bottom",
    "bottom_to_top",
    "clockwise",
    "counter_clockwise",
    "static",
    "blink",
];

/// `(forward, reverse)` class pairs.
pub const REVERSE_PAIRS: [(usize, usize); 3] = [
    (LEFT_TO_RIGHT, RIGHT_TO_LEFT),
    (TOP_TO_BOTTOM, BOTTOM_TO_TOP),
    (CLOCKWISE, COUNTER_CLOCKWISE),
];

/// The time-reversed class of `label`, if it has one.
pub fn reverse_partner(label: usize) -> Option<usize> {
    REVERSE_PAIRS.iter().find_map(|&(f, r)| {
        if label == f {
            Some(r)
        } else if label == r {
            Some(f)
        } else {
            None
        }
    })
}

pub const GLYPH: usize = 4;
const SHAPES: [[u8; GLYPH]; 3] = [
    [0b1111, 0b1001, 0b1001, 0b1111], // ring
    [0b0110, 0b1111, 0b1111, 0b0110], // plus
    [0b1001, 0b0110, 0b0110, 0b1001], // cross
];
pub const NUM_SHAPES: usize = SHAPES.len();
/// Glyph "colours" of the single-channel frames.
pub const INTENSITIES: [f32; 3] = [1.0, 0.75, 0.5];
pub const NUM_COLORS: usize = INTENSITIES.len();

pub const TOKEN_PAD: usize = 0;
pub const TOKEN_STOP: usize = 1;
pub const TOKEN_SHAPE: usize = 2;
pub const TOKEN_COLOR: usize = 10;
pub const TOKEN_MOTION: usize = 20;
/// Smallest text vocabulary that covers every caption token.
pub const MIN_VOCAB: usize = TOKEN_MOTION + NUM_CLASSES;
pub const CAPTION_LEN: usize = 4;

/// Clips in one pass over every caption tuple.
pub const RETRIEVAL_SET_LEN: usize = NUM_SHAPES * NUM_COLORS * NUM_CLASSES;

/// `[shape, color, motion, stop]`.
pub fn caption(shape: usize, color: usize, motion: usize) -> Vec<usize> {
    vec![
        TOKEN_SHAPE + shape,
        TOKEN_COLOR + color,
        TOKEN_MOTION + motion,
        TOKEN_STOP,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    /// `T·H·W` pixels in `[0, 1]`, frame-major.
    pub frames: Vec<f32>,
    pub label: usize,
    pub caption: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub clips: Vec<SyntheticClip>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Clip `i` as a `[T, 1, H, W]` tensor.
    pub fn clip_tensor(&self, i: usize) -> Tensor {
        let c = &self.clips[i];
        Tensor::new(
            &[self.frames, 1, self.height, self.width],
            c.frames.iter().map(|&v| v as f64).collect(),
        )
        .expect("clip size is checked on construction")
    }

    pub fn clip_tensors(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.clip_tensor(i)).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.label).collect()
    }

    pub fn captions(&self) -> Vec<Vec<usize>> {
        self.clips.iter().map(|c| c.caption.clone()).collect()
    }

    /// Errors unless the clips fit a model with this configuration.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if config.channels != 1
            || self.frames != config.frames
            || self.height != config.frame_height()
            || self.width != config.frame_width()
        {
            return Err(Error::Config(format!(
                "dataset clips are {}x1x{}x{}, model expects {}x{}x{}x{}",
                self.frames,
                self.height,
                self.width,
                config.frames,
                config.channels,
                config.frame_height(),
                config.frame_width()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Background pixels are uniform in `[0, noise)`.
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            noise: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn for_model(config: &ModelConfig) -> Self {
        Self {
            frames: config.frames,
            height: config.frame_height(),
            width: config.frame_width(),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames < 3 {
            return Err(Error::Config(format!(
                "{} frames cannot show a direction of motion (need at least 3)",
                self.frames
            )));
        }
        if self.height < 2 * GLYPH || self.width < 2 * GLYPH {
            return Err(Error::Config(format!(
                "{}x{} frames are too small for a {GLYPH}x{GLYPH} glyph",
                self.height, self.width
            )));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise level {} outside [0, 1)", self.noise)));
        }
        Ok(())
    }
}

/// Independent sample streams of the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => streams::DATA_TRAIN,
            Split::Test => streams::DATA_TEST,
        }
    }
}

struct Renderer<'a> {
    cfg: &'a SynthConfig,
    rng: StreamRng,
}

impl Renderer<'_> {
    /// Glyph top-left corner per frame (`None` = glyph hidden), for a forward
    /// or unpaired class.
    fn path(&mut self, class: usize) -> Vec<Option<(usize, usize)>> {
        let t_n = self.cfg.frames;
        let (max_y, max_x) = (self.cfg.height - GLYPH, self.cfg.width - GLYPH);
        let lerp = |a: usize, b: usize, t: usize| -> usize {
            let v = a as f64 + (b as f64 - a as f64) * t as f64 / (t_n - 1) as f64;
            v.round() as usize
        };
        match class {
            LEFT_TO_RIGHT => {
                let y = self.rng.gen_range(0..=max_y);
                let (a, b) = (self.rng.gen_range(0..=max_x / 4), max_x - self.rng.gen_range(0..=max_x / 4));
                (0..t_n).map(|t| Some((y, lerp(a, b, t)))).collect()
            }
            TOP_TO_BOTTOM => {
                let x = self.rng.gen_range(0..=max_x);
                let (a, b) = (self.rng.gen_range(0..=max_y / 4), max_y - self.rng.gen_range(0..=max_y / 4));
                (0..t_n).map(|t| Some((lerp(a, b, t), x))).collect()
            }
            CLOCKWISE => {
                let r = (max_y.min(max_x) as f64 / 2.0 - 1.0).max(1.0);
                let cy = max_y as f64 / 2.0 + self.rng.gen_range(-1.0..=1.0);
                let cx = max_x as f64 / 2.0 + self.rng.gen_range(-1.0..=1.0);
                // start near the top: with a uniform start phase, where the glyph is at
                // each time looks the same for both rotation senses
                let theta0 = -PI / 2.0 + self.rng.gen_range(-PI / 8.0..=PI / 8.0);
                let sweep = 1.5 * PI;
                (0..t_n)
                    .map(|t| {
                        // y grows downwards, so increasing angle turns clockwise on screen
                        let th = theta0 + sweep * t as f64 / (t_n - 1) as f64;
                        let y = (cy + r * th.sin()).round().clamp(0.0, max_y as f64) as usize;
                        let x = (cx + r * th.cos()).round().clamp(0.0, max_x as f64) as usize;
                        Some((y, x))
                    })
                    .collect()
            }
            STATIC => {
                let p = (self.rng.gen_range(0..=max_y), self.rng.gen_range(0..=max_x));
                vec![Some(p); t_n]
            }
            BLINK => {
                let p = (self.rng.gen_range(0..=max_y), self.rng.gen_range(0..=max_x));
                (0..t_n).map(|t| (t % 2 == 0).then_some(p)).collect()
            }
            _ => unreachable!("class {class} is rendered as a reversal"),
        }
    }

    fn render(&mut self, class: usize, shape: usize, color: usize) -> Vec<f32> {
        let path = self.path(class);
        let (h, w) = (self.cfg.height, self.cfg.width);
        let mut out = Vec::with_capacity(path.len() * h * w);
        for pos in path {
            let start = out.len();
            for _ in 0..h * w {
                out.push(self.rng.gen_range(0.0..1.0f32) * self.cfg.noise);
            }
            if let Some((y0, x0)) = pos {
                for (dy, bits) in SHAPES[shape].iter().enumerate() {
                    for dx in 0..GLYPH {
                        if bits >> (GLYPH - 1 - dx) & 1 == 1 {
                            out[start + (y0 + dy) * w + x0 + dx] = INTENSITIES[color];
                        }
                    }
                }
            }
        }
        out
    }

    fn attributes(&mut self) -> (usize, usize) {
        (self.rng.gen_range(0..NUM_SHAPES), self.rng.gen_range(0..NUM_COLORS))
    }
}

/// The clip with its frames in reverse order.
pub fn reverse_frames(frames: &[f32], t: usize) -> Vec<f32> {
    let per = frames.len() / t;
    frames.chunks(per).rev().flatten().copied().collect()
}

fn push_pair(
    out: &mut Vec<SyntheticClip>,
    r: &mut Renderer,
    (fwd, rev): (usize, usize),
    shape: usize,
    color: usize,
) {
    let frames = r.render(fwd, shape, color);
    let reversed = reverse_frames(&frames, r.cfg.frames);
    out.push(SyntheticClip {
        frames,
        label: fwd,
        caption: caption(shape, color, fwd),
    });
    out.push(SyntheticClip {
        frames: reversed,
        label: rev,
        caption: caption(shape, color, rev),
    });
}

fn push_single(out: &mut Vec<SyntheticClip>, r: &mut Renderer, class: usize, shape: usize, color: usize) {
    out.push(SyntheticClip {
        frames: r.render(class, shape, color),
        label: class,
        caption: caption(shape, color, class),
    });
}

fn finish(cfg: &SynthConfig, clips: Vec<SyntheticClip>) -> Dataset {
    Dataset {
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        clips,
    }
}

/// `n_per_class` clips of each class with random shape and colour.
///
/// Clips come grouped by class pair: each forward clip is followed by its
/// reversal.
pub fn generate_split(seed: u64, n_per_class: usize, cfg: &SynthConfig, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    if n_per_class == 0 {
        return Err(Error::Config("need at least one clip per class".into()));
    }
    let mut r = Renderer {
        cfg,
        rng: stream_rng(seed, split.stream()),
    };
    let mut clips = Vec::with_capacity(n_per_class * NUM_CLASSES);
    for pair in REVERSE_PAIRS {
        for _ in 0..n_per_class {
            let (s, c) = r.attributes();
            push_pair(&mut clips, &mut r, pair, s, c);
        }
    }
    for class in [STATIC, BLINK] {
        for _ in 0..n_per_class {
            let (s, c) = r.attributes();
            push_single(&mut clips, &mut r, class, s, c);
        }
    }
    Ok(finish(cfg, clips))
}

/// Training split of [`generate_split`].
pub fn generate_dataset(seed: u64, n_per_class: usize, cfg: &SynthConfig) -> Result<Dataset> {
    generate_split(seed, n_per_class, cfg, Split::Train)
}

/// One clip per (shape, colour, motion) tuple, so every caption is unique.
pub fn generate_retrieval_set(seed: u64, cfg: &SynthConfig, split: Split) -> Result<Dataset> {
    generate_retrieval_split(seed, cfg, split, 1)
}

/// `repeats` consecutive passes over every (shape, colour, motion) tuple.
///
/// Captions are unique within each pass of [`RETRIEVAL_SET_LEN`] clips.
pub fn generate_retrieval_split(seed: u64, cfg: &SynthConfig, split: Split, repeats: usize) -> Result<Dataset> {
    cfg.validate()?;
    if repeats == 0 {
        return Err(Error::Config("need at least one pass over the caption tuples".into()));
    }
    let mut r = Renderer {
        cfg,
        rng: stream_rng(seed, split.stream()),
    };
    let mut clips = Vec::with_capacity(repeats * RETRIEVAL_SET_LEN);
    for _ in 0..repeats {
        for s in 0..NUM_SHAPES {
            for c in 0..NUM_COLORS {
                for pair in REVERSE_PAIRS {
                    push_pair(&mut clips, &mut r, pair, s, c);
                }
                for class in [STATIC, BLINK] {
                    push_single(&mut clips, &mut r, class, s, c);
                }
            }
        }
    }
    Ok(finish(cfg, clips))
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    let per = ds.frames * ds.height * ds.width;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (v, what) in [
        (ds.len(), "clip count"),
        (ds.frames, "frame count"),
        (ds.height, "height"),
        (ds.width, "width"),
    ] {
        w.write_all(&dim_u32(v, what)?.to_le_bytes())?;
    }
    for (i, c) in ds.clips.iter().enumerate() {
        if c.frames.len() != per {
            return Err(Error::Format(format!("clip {i} has {} pixels, expected {per}", c.frames.len())));
        }
        for v in &c.frames {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&dim_u32(c.label, "label")?.to_le_bytes())?;
        let len = u8::try_from(c.caption.len())
            .map_err(|_| Error::Format(format!("clip {i} caption longer than 255 tokens")))?;
        w.write_all(&[len])?;
        for &t in &c.caption {
            w.write_all(&dim_u32(t, "token id")?.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let n = read_u32(&mut r, "clip count")? as usize;
    let t = read_u32(&mut r, "frame count")? as usize;
    let h = read_u32(&mut r, "height")? as usize;
    let w = read_u32(&mut r, "width")? as usize;
    let per = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Corrupt(format!("clip size {t}x{h}x{w} overflows")))?;
    let mut clips = Vec::new();
    let mut buf = vec![0u8; per * 4];
    for i in 0..n {
        read_exact(&mut r, &mut buf, &format!("clip {i} pixels"))?;
        let frames = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let label = read_u32(&mut r, "label")? as usize;
        let mut len = [0u8; 1];
        read_exact(&mut r, &mut len, "caption length")?;
        let caption = (0..len[0])
            .map(|_| read_u32(&mut r, "caption").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        clips.push(SyntheticClip { frames, label, caption });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Corrupt("trailing bytes after the last clip".into()));
    }
    Ok(Dataset {
        frames: t,
        height: h,
        width: w,
        clips,
    })
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(fs::File::open(path)?))
}
