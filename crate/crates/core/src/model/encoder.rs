use rand::Rng;

use super::layers::{constant, gaussian, join, sinusoidal_positions, Block, Module, Norm};
use crate::autodiff::Tensor;
use crate::mask::{Grid, MaskSpec};
use crate::synth::VideoClip;
use crate::{Error, Result};

/// Architecture sizes shared by student, teacher and heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub predictor_layers: usize,
    pub predictor_dim: usize,
    pub patch: usize,
    pub tubelet: usize,
    pub channels: usize,
    pub dyn_hidden: usize,
    pub ham_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 2,
            heads: 2,
            ff: 64,
            predictor_layers: 2,
            predictor_dim: 32,
            patch: 8,
            tubelet: 2,
            channels: 1,
            dyn_hidden: 64,
            ham_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dim > 0
            && self.heads > 0
            && self.dim.is_multiple_of(self.heads)
            && self.predictor_dim.is_multiple_of(self.heads)
            && self.patch > 0
            && self.tubelet > 0
            && self.channels > 0;
        if !ok {
            return Err(Error::Config(format!("inconsistent model sizes {self:?}")));
        }
        Ok(())
    }

    /// Pixels per token for a clip patched with tubelet `tubelet`.
    pub fn token_width(&self, tubelet: usize) -> usize {
        tubelet * self.patch * self.patch * self.channels
    }
}

/// Flattened `tubelet x patch x patch x C` pixel groups, one row per token,
/// ordered temporal block first.
#[derive(Debug, Clone)]
pub struct Tokens {
    pub grid: Grid,
    pub tubelet: usize,
    pub pixels: Tensor,
}

/// Groups a clip into tokens. Single-frame image clips use tubelet 1.
pub fn patchify(clip: &VideoClip, patch: usize, tubelet: usize) -> Result<Tokens> {
    let (t, h, w, c) = clip.dims();
    let tubelet = if clip.is_image || t == 1 { 1 } else { tubelet };
    if patch == 0 || tubelet == 0 || h % patch != 0 || w % patch != 0 || t % tubelet != 0 {
        return Err(Error::InvalidClip(format!(
            "{t}x{h}x{w} clip does not split into tubelet {tubelet}, patch {patch}"
        )));
    }
    let grid = Grid::new(t / tubelet, h / patch, w / patch)?;
    let width = tubelet * patch * patch * c;
    let px = clip.frames.data();
    let mut data = Vec::with_capacity(grid.n_tokens() * width);
    for tb in 0..grid.t {
        for gy in 0..grid.h {
            for gx in 0..grid.w {
                for dt in 0..tubelet {
                    let f = tb * tubelet + dt;
                    for dy in 0..patch {
                        let row = ((f * h + gy * patch + dy) * w + gx * patch) * c;
                        data.extend_from_slice(&px[row..row + patch * c]);
                    }
                }
            }
        }
    }
    Ok(Tokens {
        grid,
        tubelet,
        pixels: Tensor::new(&[grid.n_tokens(), width], data)?,
    })
}

/// Token embeddings `[T' * N_s, D]` on a grid, rows ordered time-major.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    pub values: Tensor,
    pub blocks: usize,
}

impl LatentGrid {
    pub fn new(values: Tensor, blocks: usize) -> Result<Self> {
        let (rows, _) = values.dims2()?;
        if blocks == 0 || rows % blocks != 0 {
            return Err(Error::Config(format!("{rows} rows do not form {blocks} temporal blocks")));
        }
        Ok(Self { values, blocks })
    }

    pub fn n_spatial(&self) -> usize {
        self.values.shape()[0] / self.blocks
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_tokens(&self) -> usize {
        self.values.shape()[0]
    }

    /// Rows of temporal blocks `[start, start + len)`.
    pub fn blocks_range(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.n_spatial();
        Ok(self.values.narrow(0, start * s, len * s)?)
    }

    /// `z^(t+1) - z^(t)` for every token, `[(T'-1) * N_s, D]`.
    pub fn first_difference(&self) -> Result<Tensor> {
        let later = self.blocks_range(1, self.blocks - 1)?;
        let earlier = self.blocks_range(0, self.blocks - 1)?;
        Ok(later.sub(&earlier)?)
    }

    pub fn detach(&self) -> Self {
        Self {
            values: self.values.detach(),
            blocks: self.blocks,
        }
    }
}

/// Channel split into `(Z_app, Z_dyn)` at `D * app_ratio`.
pub fn split_channels(z: &LatentGrid, app_ratio: f64) -> Result<(LatentGrid, LatentGrid)> {
    let d = z.dim();
    let cut = d as f64 * app_ratio;
    if !(app_ratio > 0.0 && app_ratio < 1.0) || (cut - cut.round()).abs() > 1e-9 {
        return Err(Error::Config(format!("app_ratio {app_ratio} does not split {d} channels")));
    }
    let cut = cut.round() as usize;
    Ok((
        LatentGrid::new(z.values.narrow(1, 0, cut)?, z.blocks)?,
        LatentGrid::new(z.values.narrow(1, cut, d - cut)?, z.blocks)?,
    ))
}

/// Transformer encoder over patch tokens.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: ModelConfig,
    pub embed: Tensor,
    pub embed_bias: Tensor,
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let fan_in = cfg.token_width(cfg.tubelet);
        Ok(Self {
            cfg,
            embed: gaussian(&[fan_in, cfg.dim], (1.0 / fan_in as f64).sqrt(), rng),
            embed_bias: constant(&[cfg.dim], 0.0),
            blocks: (0..cfg.layers).map(|_| Block::new(cfg.dim, cfg.heads, cfg.ff, rng)).collect(),
            norm: Norm::new(cfg.dim),
        })
    }

    /// Embedding matrix for tokens of the given tubelet length. Shorter
    /// tubelets sum the matching slices, which embeds an image exactly like
    /// a clip that repeats it for a full tubelet.
    fn embedding_for(&self, tubelet: usize) -> Result<Tensor> {
        if tubelet == self.cfg.tubelet {
            return Ok(self.embed.clone());
        }
        if tubelet != 1 {
            return Err(Error::InvalidClip(format!("unsupported tubelet {tubelet}")));
        }
        let slice = self.cfg.token_width(1);
        let mut acc = self.embed.narrow(0, 0, slice)?;
        for k in 1..self.cfg.tubelet {
            acc = acc.add(&self.embed.narrow(0, k * slice, slice)?)?;
        }
        Ok(acc)
    }

    /// Patch embeddings plus positions, before any transformer block.
    pub fn embed_tokens(&self, tokens: &Tokens) -> Result<Tensor> {
        let w = self.embedding_for(tokens.tubelet)?;
        let pos = sinusoidal_positions(tokens.grid.t, tokens.grid.n_spatial(), self.cfg.dim);
        Ok(tokens.pixels.matmul(&w)?.add_row(&self.embed_bias)?.add(&pos)?)
    }

    /// Encodes all tokens, or only the visible ones of `mask`. Rows follow
    /// ascending token order.
    pub fn encode(&self, tokens: &Tokens, mask: Option<&MaskSpec>) -> Result<Tensor> {
        let mut x = self.embed_tokens(tokens)?;
        if let Some(m) = mask {
            m.check_grid(tokens.grid)?;
            x = x.gather_rows(&m.visible_indices())?;
        }
        self.transform(&x)
    }

    /// Transformer blocks and final norm over already-embedded rows.
    pub fn transform(&self, embedded: &Tensor) -> Result<Tensor> {
        let mut x = embedded.clone();
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.norm.forward(&x)
    }

    /// Full-clip latents as a grid.
    pub fn encode_grid(&self, tokens: &Tokens) -> Result<LatentGrid> {
        LatentGrid::new(self.encode(tokens, None)?, tokens.grid.t)
    }

    /// Copy whose tensors take no gradient.
    pub fn frozen(&self) -> Self {
        let mut copy = self.clone();
        for (_, t) in copy.named_params_mut() {
            *t = t.detach();
        }
        copy
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "embed"), self.embed.clone()));
        out.push((join(prefix, "embed_bias"), self.embed_bias.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), out);
        }
        self.norm.visit(&join(prefix, "norm"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "embed"), &mut self.embed));
        out.push((join(prefix, "embed_bias"), &mut self.embed_bias));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), out);
        }
        self.norm.visit_mut(&join(prefix, "norm"), out);
    }
}

/// `teacher <- m * teacher + (1 - m) * student`, tensor by tensor.
pub fn ema_update(teacher: &mut Encoder, student: &Encoder, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    let src = student.named_params();
    let mut dst = teacher.named_params_mut();
    if src.len() != dst.len() {
        return Err(Error::Config("teacher and student differ in structure".into()));
    }
    for ((name, s), (_, t)) in src.iter().zip(dst.iter_mut()) {
        if s.shape() != t.shape() {
            return Err(Error::Config(format!("EMA shape mismatch at {name}")));
        }
        let data = t
            .data()
            .iter()
            .zip(s.data())
            .map(|(&a, &b)| momentum * a + (1.0 - momentum) * b)
            .collect();
        **t = Tensor::new(t.shape(), data)?;
    }
    Ok(())
}
