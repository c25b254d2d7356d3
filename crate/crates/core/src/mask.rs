//! Visible/target token partitions: random tubes, motion-guided tubes,
//! future-predictive masks and per-target distance weights.

use rand::Rng;

use crate::synth::VideoClip;
use crate::{Error, Result};

/// Tolerance on the achieved target fraction of a tube mask.
pub const RATIO_TOLERANCE: f64 = 0.1;
const MAX_BLOCKS: usize = 4;
const MAX_ATTEMPTS: usize = 10_000;

/// Token grid: `t` temporal blocks of `h x w` spatial tokens. Token `i` is
/// `tb * h * w + y * w + x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::Mask(format!("empty grid {t}x{h}x{w}")));
        }
        Ok(Self { t, h, w })
    }

    pub fn n_spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn n_tokens(&self) -> usize {
        self.t * self.n_spatial()
    }

    /// `(temporal block, row, column)` of a token.
    pub fn coords(&self, token: usize) -> (usize, usize, usize) {
        let s = token % self.n_spatial();
        (token / self.n_spatial(), s / self.w, s % self.w)
    }
}

/// A visible/target partition with per-target distance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub grid: Grid,
    pub target: Vec<bool>,
    pub visible: Vec<bool>,
    pub n_targets: usize,
    /// One weight per target token, in ascending token order.
    pub distance_weight: Vec<f64>,
}

impl MaskSpec {
    /// Builds a mask and fills in its distance weights.
    pub fn new(grid: Grid, visible: Vec<bool>, target: Vec<bool>) -> Result<Self> {
        let n = grid.n_tokens();
        if visible.len() != n || target.len() != n {
            return Err(Error::Mask(format!("flags must cover {n} tokens")));
        }
        if visible.iter().zip(&target).any(|(v, t)| *v && *t) {
            return Err(Error::Mask("a token cannot be both visible and target".into()));
        }
        let n_targets = target.iter().filter(|&&t| t).count();
        if n_targets == 0 || !visible.iter().any(|&v| v) {
            return Err(Error::Mask("need at least one visible and one target token".into()));
        }
        let mut mask = Self {
            grid,
            target,
            visible,
            n_targets,
            distance_weight: Vec::new(),
        };
        mask.distance_weight = distance_weights(&mask);
        Ok(mask)
    }

    /// Every token not visible is a target.
    pub fn from_visible(grid: Grid, visible: Vec<bool>) -> Result<Self> {
        let target = visible.iter().map(|v| !v).collect();
        Self::new(grid, visible, target)
    }

    pub fn target_indices(&self) -> Vec<usize> {
        (0..self.target.len()).filter(|&i| self.target[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.visible.len()).filter(|&i| self.visible[i]).collect()
    }

    pub fn n_visible(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Visible and target flags partition the whole grid.
    pub fn is_complementary(&self) -> bool {
        self.visible.iter().zip(&self.target).all(|(v, t)| v ^ t)
    }

    pub fn check_grid(&self, grid: Grid) -> Result<()> {
        if self.grid != grid {
            return Err(Error::Mask(format!("mask grid {:?} does not match {grid:?}", self.grid)));
        }
        Ok(())
    }
}

/// `1 / (1 + d)` per target, mean-normalized to 1. `d` is the Chebyshev
/// distance to the nearest visible token in the same temporal block; blocks
/// without any visible token measure across blocks, counting the temporal
/// offset as one more axis.
pub fn distance_weights(mask: &MaskSpec) -> Vec<f64> {
    let g = mask.grid;
    let visible: Vec<(usize, usize, usize)> = mask.visible_indices().into_iter().map(|i| g.coords(i)).collect();
    let block_has_visible: Vec<bool> = (0..g.t).map(|b| visible.iter().any(|v| v.0 == b)).collect();
    let raw: Vec<f64> = mask
        .target_indices()
        .into_iter()
        .map(|i| {
            let (tb, y, x) = g.coords(i);
            let d = visible
                .iter()
                .filter(|v| !block_has_visible[tb] || v.0 == tb)
                .map(|&(vb, vy, vx)| vb.abs_diff(tb).max(vy.abs_diff(y)).max(vx.abs_diff(x)))
                .min()
                .unwrap_or(0);
            1.0 / (1.0 + d as f64)
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter().map(|w| w / mean).collect()
}

/// Per-patch motion score, normalized so the busiest patch scores 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionEnergy {
    pub h: usize,
    pub w: usize,
    pub score: Vec<f64>,
}

/// Mean `|frame(t+1) - frame(t)|` per `patch x patch` region over all frame
/// pairs and channels, divided by the clip maximum.
pub fn motion_energy(clip: &VideoClip, patch: usize) -> Result<MotionEnergy> {
    let (t, h, w, c) = clip.dims();
    if t < 2 {
        return Err(Error::InvalidClip("motion energy needs at least two frames".into()));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidClip(format!("{h}x{w} frames do not tile into {patch}px patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut score = vec![0.0; ph * pw];
    let px = clip.frames.data();
    let frame = h * w * c;
    for f in 0..t - 1 {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let i = f * frame + (y * w + x) * c + ch;
                    score[(y / patch) * pw + x / patch] += (px[i + frame] - px[i]).abs();
                }
            }
        }
    }
    let per_patch = ((t - 1) * patch * patch * c) as f64;
    score.iter_mut().for_each(|s| *s /= per_patch);
    let max = score.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        score.iter_mut().for_each(|s| *s /= max);
    }
    Ok(MotionEnergy { h: ph, w: pw, score })
}

/// A sampled mask with the block centres that produced it.
#[derive(Debug, Clone)]
pub struct MaskDraw {
    pub mask: MaskSpec,
    /// Spatial index of each block centre.
    pub centers: Vec<usize>,
    /// Whether a motion-guided sampler fell back to uniform centres.
    pub fell_back: bool,
}

fn categorical<R: Rng + ?Sized>(cumulative: &[f64], rng: &mut R) -> usize {
    let total = *cumulative.last().expect("non-empty distribution");
    let u = rng.random::<f64>() * total;
    cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
}

fn check_ratio(grid: Grid, ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Mask(format!("mask ratio {ratio} must lie in (0, 1)")));
    }
    // Some whole number of targets in 1..n must land inside the tolerance.
    let n = grid.n_spatial();
    let feasible = (1..n).any(|k| (k as f64 / n as f64 - ratio).abs() <= RATIO_TOLERANCE + 1e-12);
    if !feasible {
        return Err(Error::Mask(format!("a {}x{} grid cannot hit ratio {ratio}", grid.h, grid.w)));
    }
    Ok(())
}

/// Union of 1-4 rectangles placed around centres drawn from `weights`,
/// wrapping at the grid edges, extruded through every temporal block.
/// Centres are drawn once; only the block shapes are resampled until the
/// union lands inside the ratio tolerance, so the accepted centres keep the
/// requested distribution.
fn sample_blocks<R: Rng + ?Sized>(grid: Grid, ratio: f64, weights: &[f64], rng: &mut R) -> Result<(Vec<bool>, Vec<usize>)> {
    check_ratio(grid, ratio)?;
    let mut acc = 0.0;
    let cumulative: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    let n = grid.n_spatial();
    let n_blocks = rng.random_range(1..=MAX_BLOCKS);
    let centers: Vec<usize> = (0..n_blocks).map(|_| categorical(&cumulative, rng)).collect();
    let mut area = ratio * n as f64 / n_blocks as f64;
    for _ in 0..MAX_ATTEMPTS {
        let mut spatial = vec![false; n];
        for &c in &centers {
            let aspect = rng.random_range(-(3f64.ln())..3f64.ln()).exp();
            let bh = (area * aspect).sqrt().round().clamp(1.0, grid.h as f64) as usize;
            let bw = (area / bh as f64).round().clamp(1.0, grid.w as f64) as usize;
            let (cy, cx) = (c / grid.w, c % grid.w);
            for dy in 0..bh {
                for dx in 0..bw {
                    let y = (cy + grid.h + dy - (bh - 1) / 2) % grid.h;
                    let x = (cx + grid.w + dx - (bw - 1) / 2) % grid.w;
                    spatial[y * grid.w + x] = true;
                }
            }
        }
        let k = spatial.iter().filter(|&&s| s).count();
        let frac = k as f64 / n as f64;
        if k > 0 && k < n && (frac - ratio).abs() <= RATIO_TOLERANCE + 1e-12 {
            return Ok((spatial, centers));
        }
        area *= if frac < ratio { 1.1 } else { 1.0 / 1.1 };
        area = area.clamp(1.0, n as f64);
    }
    Err(Error::Mask(format!("no tube mask within tolerance of ratio {ratio}")))
}

fn extrude(grid: Grid, spatial: &[bool]) -> Vec<bool> {
    (0..grid.n_tokens()).map(|i| spatial[i % grid.n_spatial()]).collect()
}

fn tube_draw<R: Rng + ?Sized>(grid: Grid, ratio: f64, weights: &[f64], rng: &mut R, fell_back: bool) -> Result<MaskDraw> {
    let (spatial, centers) = sample_blocks(grid, ratio, weights, rng)?;
    let target = extrude(grid, &spatial);
    let visible = target.iter().map(|t| !t).collect();
    Ok(MaskDraw {
        mask: MaskSpec::new(grid, visible, target)?,
        centers,
        fell_back,
    })
}

/// Uniform multi-block tube mask.
pub fn sample_tube_mask<R: Rng + ?Sized>(grid: Grid, mask_ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    Ok(sample_tube_draw(grid, mask_ratio, rng)?.mask)
}

/// [`sample_tube_mask`] with its block centres.
pub fn sample_tube_draw<R: Rng + ?Sized>(grid: Grid, mask_ratio: f64, rng: &mut R) -> Result<MaskDraw> {
    tube_draw(grid, mask_ratio, &vec![1.0; grid.n_spatial()], rng, false)
}

/// Softmax of `alpha * energy` over patches.
pub fn center_distribution(energy: &MotionEnergy, alpha: f64) -> Vec<f64> {
    let max = energy.score.iter().map(|s| alpha * s).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = energy.score.iter().map(|s| (alpha * s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Tube mask whose block centres favour high-motion patches. With
/// probability `fallback_rate` the centres are uniform instead. Without
/// energy (single-frame clips) sampling is uniform.
pub fn sample_motion_guided<R: Rng + ?Sized>(
    grid: Grid,
    mask_ratio: f64,
    energy: Option<&MotionEnergy>,
    alpha: f64,
    fallback_rate: f64,
    rng: &mut R,
) -> Result<MaskDraw> {
    if !(alpha >= 0.0) || !(0.0..=1.0).contains(&fallback_rate) {
        return Err(Error::Mask(format!("strength {alpha} or fallback {fallback_rate} out of range")));
    }
    let uniform = vec![1.0; grid.n_spatial()];
    let Some(energy) = energy else {
        return tube_draw(grid, mask_ratio, &uniform, rng, false);
    };
    if energy.h != grid.h || energy.w != grid.w {
        return Err(Error::Mask("motion energy does not match the spatial grid".into()));
    }
    if rng.random::<f64>() < fallback_rate {
        return tube_draw(grid, mask_ratio, &uniform, rng, true);
    }
    tube_draw(grid, mask_ratio, &center_distribution(energy, alpha), rng, false)
}

/// Keeps visible tokens only in the first `ceil(keep * t)` temporal blocks.
/// With `full_complement` every other token becomes a target.
pub fn restrict_to_past(mask: &MaskSpec, full_complement: bool, max_temporal_keep: f64) -> Result<MaskSpec> {
    if !(max_temporal_keep > 0.0 && max_temporal_keep <= 1.0) {
        return Err(Error::Mask(format!("temporal keep {max_temporal_keep} must lie in (0, 1]")));
    }
    let g = mask.grid;
    let horizon = (max_temporal_keep * g.t as f64 - 1e-9).ceil().max(1.0) as usize;
    let visible: Vec<bool> = (0..g.n_tokens()).map(|i| mask.visible[i] && g.coords(i).0 < horizon).collect();
    let target = if full_complement {
        visible.iter().map(|v| !v).collect()
    } else {
        mask.target.clone()
    };
    MaskSpec::new(g, visible, target)
}

/// Future-predictive mask: a tube mask whose visible set is cut back to the
/// leading temporal blocks.
pub fn sample_future_predictive<R: Rng + ?Sized>(
    grid: Grid,
    mask_ratio: f64,
    full_complement: bool,
    max_temporal_keep: f64,
    rng: &mut R,
) -> Result<MaskSpec> {
    if !(max_temporal_keep > 0.0 && max_temporal_keep <= 1.0) {
        return Err(Error::Mask(format!("temporal keep {max_temporal_keep} must lie in (0, 1]")));
    }
    let base = sample_tube_mask(grid, mask_ratio, rng)?;
    restrict_to_past(&base, full_complement, max_temporal_keep)
}

/// Masking switches as they appear in run configs.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskConfig {
    pub mask_ratio: f64,
    pub motion_guided: bool,
    pub motion_guided_strength: f64,
    pub motion_guided_random_rate: f64,
    pub future_predictive: bool,
    pub full_complement: bool,
    pub max_temporal_keep: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.5,
            motion_guided: false,
            motion_guided_strength: 2.0,
            motion_guided_random_rate: 0.1,
            future_predictive: false,
            full_complement: true,
            max_temporal_keep: 0.5,
        }
    }
}

/// Draws one mask for `clip` under `cfg`.
pub fn sample_mask<R: Rng + ?Sized>(cfg: &MaskConfig, clip: &VideoClip, grid: Grid, patch: usize, rng: &mut R) -> Result<MaskDraw> {
    let mut draw = if cfg.motion_guided {
        let energy = if clip.n_frames() >= 2 {
            Some(motion_energy(clip, patch)?)
        } else {
            None
        };
        sample_motion_guided(
            grid,
            cfg.mask_ratio,
            energy.as_ref(),
            cfg.motion_guided_strength,
            cfg.motion_guided_random_rate,
            rng,
        )?
    } else {
        sample_tube_draw(grid, cfg.mask_ratio, rng)?
    };
    if cfg.future_predictive && grid.t > 1 {
        draw.mask = restrict_to_past(&draw.mask, cfg.full_complement, cfg.max_temporal_keep)?;
    }
    Ok(draw)
}
