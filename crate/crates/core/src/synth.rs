//! Synthetic motion clips, single-frame image clips, weighted dataset
//! mixtures and the flat binary dataset file.
//!
//! Every clip shows a filled square on a dark background. The eight motion
//! classes translate, rotate or scale that square at a fixed per-frame rate.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const CLIP_FRAMES: usize = 8;
pub const CLIP_SIZE: usize = 32;
pub const SQUARE_SIDE: f64 = 10.0;
pub const TRANSLATE_PX: f64 = 2.0;
pub const ROTATE_DEG: f64 = 15.0;
pub const SCALE_STEP: f64 = 1.08;
pub const N_MOTION_CLASSES: usize = 8;

/// A clip of `[T, H, W, C]` intensities in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Tensor,
    pub label: Option<usize>,
    /// Dataset tag the clip came from.
    pub source: String,
    /// Single-frame image; patchify with tubelet length 1.
    pub is_image: bool,
}

impl VideoClip {
    pub fn new(frames: Tensor, label: Option<usize>, source: impl Into<String>) -> Result<Self> {
        let clip = Self {
            frames,
            label,
            source: source.into(),
            is_image: false,
        };
        clip.validate(None)?;
        Ok(clip)
    }

    /// `(T, H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Intensity at frame `t`, row `y`, column `x`, channel `c`.
    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        let (_, h, w, ch) = self.dims();
        self.frames.data()[((t * h + y) * w + x) * ch + c]
    }

    pub fn validate(&self, n_classes: Option<usize>) -> Result<()> {
        let s = self.frames.shape();
        if s.len() != 4 || s.contains(&0) {
            return Err(Error::InvalidClip(format!("frames must be [T,H,W,C], got {s:?}")));
        }
        if self.frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidClip("pixel outside [0, 1]".into()));
        }
        if let (Some(label), Some(n)) = (self.label, n_classes) {
            if label >= n {
                return Err(Error::InvalidClip(format!("label {label} not below {n}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionKind {
    TranslateUp,
    TranslateDown,
    TranslateLeft,
    TranslateRight,
    RotateCw,
    RotateCcw,
    ScaleUp,
    ScaleDown,
}

/// One of the eight synthetic motion classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MotionClass {
    pub id: usize,
    pub kind: MotionKind,
}

impl MotionClass {
    pub const ALL: [MotionKind; N_MOTION_CLASSES] = [
        MotionKind::TranslateUp,
        MotionKind::TranslateDown,
        MotionKind::TranslateLeft,
        MotionKind::TranslateRight,
        MotionKind::RotateCw,
        MotionKind::RotateCcw,
        MotionKind::ScaleUp,
        MotionKind::ScaleDown,
    ];

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .map(|&kind| Self { id, kind })
            .ok_or_else(|| Error::InvalidClip(format!("motion class {id} out of range")))
    }

    pub fn from_kind(kind: MotionKind) -> Self {
        let id = Self::ALL.iter().position(|&k| k == kind).expect("kind is listed");
        Self { id, kind }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            MotionKind::TranslateUp => "translate-up",
            MotionKind::TranslateDown => "translate-down",
            MotionKind::TranslateLeft => "translate-left",
            MotionKind::TranslateRight => "translate-right",
            MotionKind::RotateCw => "rotate-cw",
            MotionKind::RotateCcw => "rotate-ccw",
            MotionKind::ScaleUp => "scale-up",
            MotionKind::ScaleDown => "scale-down",
        }
    }
}

/// Square pose in pixel coordinates (x right, y down; positive angles turn
/// clockwise on screen).
#[derive(Debug, Clone, Copy)]
struct Pose {
    cx: f64,
    cy: f64,
    angle: f64,
    scale: f64,
}

fn render_square(pose: Pose, size: usize, out: &mut [f64]) {
    let half = 0.5 * SQUARE_SIDE * pose.scale;
    let (s, c) = pose.angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - pose.cx;
            let dy = y as f64 + 0.5 - pose.cy;
            // Rotate the sample back into the square's frame.
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            out[y * size + x] = if u.abs() <= half && v.abs() <= half { 1.0 } else { 0.0 };
        }
    }
}

fn pose_at(kind: MotionKind, jitter: (f64, f64, f64), t: usize) -> Pose {
    let (jx, jy, angle0) = jitter;
    let t = t as f64;
    let mid = 0.5 * (CLIP_FRAMES - 1) as f64;
    let travel = TRANSLATE_PX * (t - mid);
    // Along the motion axis the jitter is squeezed so that the whole
    // trajectory keeps the square inside the frame.
    let reach = 0.5 * SQUARE_SIDE * std::f64::consts::SQRT_2 + TRANSLATE_PX * mid;
    let size = CLIP_SIZE as f64;
    let squeeze = |j: f64| reach + (j - 8.0) / 16.0 * (size - 2.0 * reach);
    let step = ROTATE_DEG.to_radians() * t;
    let base = Pose {
        cx: jx,
        cy: jy,
        angle: angle0,
        scale: 1.0,
    };
    match kind {
        MotionKind::TranslateUp => Pose { cy: squeeze(jy) - travel, ..base },
        MotionKind::TranslateDown => Pose { cy: squeeze(jy) + travel, ..base },
        MotionKind::TranslateLeft => Pose { cx: squeeze(jx) - travel, ..base },
        MotionKind::TranslateRight => Pose { cx: squeeze(jx) + travel, ..base },
        MotionKind::RotateCw => Pose { angle: angle0 + step, ..base },
        MotionKind::RotateCcw => Pose { angle: angle0 - step, ..base },
        MotionKind::ScaleUp => Pose { scale: SCALE_STEP.powf(t), ..base },
        MotionKind::ScaleDown => Pose { scale: SCALE_STEP.powf(-t), ..base },
    }
}

/// Pose jitter shared by every class for a given seed: centre in the middle
/// 16x16 region and an initial angle in `[0, 90)` degrees.
fn jitter(seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = (CLIP_SIZE as f64 - 16.0) / 2.0;
    let jx = rng.random_range(lo..lo + 16.0);
    let jy = rng.random_range(lo..lo + 16.0);
    let angle = rng.random_range(0.0..0.5 * PI);
    (jx, jy, angle)
}

/// Renders an 8-frame 32x32 single-channel clip of `class`.
pub fn gen_motion_clip(class: MotionClass, seed: u64) -> VideoClip {
    let j = jitter(seed);
    let frame_len = CLIP_SIZE * CLIP_SIZE;
    let mut data = vec![0.0; CLIP_FRAMES * frame_len];
    for (t, frame) in data.chunks_mut(frame_len).enumerate() {
        render_square(pose_at(class.kind, j, t), CLIP_SIZE, frame);
    }
    let frames = Tensor::new(&[CLIP_FRAMES, CLIP_SIZE, CLIP_SIZE, 1], data)
        .expect("clip buffer matches its shape");
    VideoClip {
        frames,
        label: Some(class.id),
        source: "synthetic-motion".into(),
        is_image: false,
    }
}

/// SplitMix64 step, used to derive independent per-clip seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A named collection of clips.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub name: String,
    pub clips: Vec<VideoClip>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Label histogram over `n_classes`.
    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for clip in &self.clips {
            if let Some(l) = clip.label {
                counts[l] += 1;
            }
        }
        counts
    }
}

/// `n_per_class` clips of each motion class, class-interleaved.
pub fn gen_motion_dataset(n_per_class: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let mut clips = Vec::with_capacity(n_per_class * N_MOTION_CLASSES);
    for i in 0..n_per_class {
        for id in 0..N_MOTION_CLASSES {
            let clip_seed = mix_seed(seed, (i * N_MOTION_CLASSES + id) as u64);
            clips.push(gen_motion_clip(MotionClass::from_id(id)?, clip_seed));
        }
    }
    Ok(Dataset {
        name: "synthetic-motion".into(),
        clips,
    })
}

/// Wraps an `[H, W, C]` image as a one-frame clip.
pub fn image_as_clip(image: &Tensor, label: Option<usize>) -> Result<VideoClip> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::InvalidClip(format!("image must be [H,W,C], got {s:?}")));
    }
    let frames = image.reshape(&[1, s[0], s[1], s[2]])?.detach();
    let mut clip = VideoClip::new(frames, label, "image")?;
    clip.is_image = true;
    Ok(clip)
}

/// Still images of the square at a random pose, as one-frame clips.
pub fn gen_image_dataset(n: usize, seed: u64) -> Result<Dataset> {
    let mut clips = Vec::with_capacity(n);
    for i in 0..n {
        let clip_seed = mix_seed(seed, i as u64);
        let mut frame = vec![0.0; CLIP_SIZE * CLIP_SIZE];
        let (jx, jy, angle) = jitter(clip_seed);
        let scale = 0.7 + 0.6 * (clip_seed % 1000) as f64 / 1000.0;
        render_square(Pose { cx: jx, cy: jy, angle, scale }, CLIP_SIZE, &mut frame);
        let image = Tensor::new(&[CLIP_SIZE, CLIP_SIZE, 1], frame)?;
        let mut clip = image_as_clip(&image, None)?;
        clip.source = "synthetic-image".into();
        clips.push(clip);
    }
    Ok(Dataset {
        name: "synthetic-image".into(),
        clips,
    })
}

/// Dataset weights for mixed sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn new(weights: Vec<f64>, seed: u64) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { weights, seed })
    }
}

/// One mixture draw: which dataset, and which element in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub dataset: usize,
    pub index: usize,
}

/// Deterministic stream of mixture draws.
pub struct MixtureSampler {
    cumulative: Vec<f64>,
    sizes: Vec<usize>,
    rng: ChaCha8Rng,
}

impl MixtureSampler {
    pub fn new(spec: &MixtureSpec, datasets: &[Dataset]) -> Result<Self> {
        if datasets.len() != spec.weights.len() {
            return Err(Error::Config("one weight per dataset is required".into()));
        }
        if let Some(empty) = datasets.iter().find(|d| d.is_empty()) {
            return Err(Error::Config(format!("dataset '{}' is empty", empty.name)));
        }
        let mut acc = 0.0;
        let cumulative = spec
            .weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self {
            cumulative,
            sizes: datasets.iter().map(Dataset::len).collect(),
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        })
    }
}

impl Iterator for MixtureSampler {
    type Item = Draw;

    fn next(&mut self) -> Option<Draw> {
        let u: f64 = self.rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let dataset = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1);
        let index = self.rng.random_range(0..self.sizes[dataset]);
        Some(Draw { dataset, index })
    }
}

/// First `n` draws of the mixture.
pub fn sample_mixture(spec: &MixtureSpec, datasets: &[Dataset], n: usize) -> Result<Vec<Draw>> {
    Ok(MixtureSampler::new(spec, datasets)?.take(n).collect())
}

const SYNV_MAGIC: &[u8; 4] = b"SYNV";
const SYNV_VERSION: u32 = 1;
const NO_LABEL: u32 = u32::MAX;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Writes clips sharing one `[T, H, W, C]` shape as little-endian f32 pixels.
/// Unlabelled clips carry `u32::MAX`.
pub fn write_dataset(w: &mut impl Write, clips: &[VideoClip]) -> Result<()> {
    let dims = clips.first().map(VideoClip::dims).unwrap_or((0, 0, 0, 0));
    if clips.iter().any(|c| c.dims() != dims) {
        return Err(Error::Format("all clips in a dataset file must share one shape".into()));
    }
    w.write_all(SYNV_MAGIC)?;
    put_u32(w, SYNV_VERSION)?;
    put_u32(w, clips.len() as u32)?;
    for d in [dims.0, dims.1, dims.2, dims.3] {
        put_u32(w, d as u32)?;
    }
    for clip in clips {
        put_u32(w, clip.label.map_or(NO_LABEL, |l| l as u32))?;
        let mut buf = Vec::with_capacity(clip.frames.numel() * 4);
        for &v in clip.frames.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read, name: &str) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SYNV_MAGIC {
        return Err(Error::Format("missing SYNV magic".into()));
    }
    let version = get_u32(r)?;
    if version != SYNV_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = get_u32(r)? as usize;
    let dims: Vec<usize> = (0..4).map(|_| get_u32(r).map(|v| v as usize)).collect::<std::io::Result<_>>()?;
    let len: usize = dims.iter().product();
    let mut clips = Vec::with_capacity(n);
    let mut buf = vec![0u8; len * 4];
    for _ in 0..n {
        let label = get_u32(r)?;
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let mut clip = VideoClip::new(
            Tensor::new(&dims, data)?,
            (label != NO_LABEL).then_some(label as usize),
            name,
        )?;
        clip.is_image = dims[0] == 1;
        clips.push(clip);
    }
    Ok(Dataset {
        name: name.into(),
        clips,
    })
}
