use rand::Rng;

use super::encoder::ModelConfig;
use super::layers::{constant, gaussian, join, sinusoidal_positions, Block, Linear, Module, Norm};
use crate::autodiff::Tensor;
use crate::mask::MaskSpec;
use crate::{Error, Result};

/// Maps visible latents plus positional queries to predictions for every
/// target token.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub input: Linear,
    pub mask_token: Tensor,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub output: Linear,
}

impl Predictor {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let p = cfg.predictor_dim;
        Self {
            input: Linear::new(cfg.dim, p, rng),
            mask_token: gaussian(&[p], 0.02, rng),
            blocks: (0..cfg.predictor_layers)
                .map(|_| Block::new(p, cfg.heads, 2 * p, rng))
                .collect(),
            norm: Norm::new(p),
            output: Linear::new(p, cfg.dim, rng),
        }
    }

    /// One row per target of `mask`, in ascending token order.
    pub fn predict(&self, visible: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
        let (n_vis, _) = visible.dims2()?;
        if n_vis != mask.n_visible() {
            return Err(Error::Mask(format!(
                "{n_vis} visible latents for a mask with {} visible tokens",
                mask.n_visible()
            )));
        }
        let pos = sinusoidal_positions(mask.grid.t, mask.grid.n_spatial(), self.mask_token.numel());
        self.predict_at(visible, &pos, &mask.visible_indices(), &mask.target_indices())
    }

    /// Predictions for the `targets` rows of the positional table `pos`,
    /// given latents for its `visible` rows, in the order listed.
    pub fn predict_at(&self, visible: &Tensor, pos: &Tensor, visible_rows: &[usize], targets: &[usize]) -> Result<Tensor> {
        let context = self.input.forward(visible)?.add(&pos.gather_rows(visible_rows)?)?;
        let queries = pos.gather_rows(targets)?.add_row(&self.mask_token)?;
        let mut x = Tensor::concat(&[context, queries], 0)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = self.norm.forward(&x)?.narrow(0, visible_rows.len(), targets.len())?;
        self.output.forward(&x)
    }
}

impl Module for Predictor {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.input.visit(&join(prefix, "input"), out);
        out.push((join(prefix, "mask_token"), self.mask_token.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), out);
        }
        self.norm.visit(&join(prefix, "norm"), out);
        self.output.visit(&join(prefix, "output"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.input.visit_mut(&join(prefix, "input"), out);
        out.push((join(prefix, "mask_token"), &mut self.mask_token));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), out);
        }
        self.norm.visit_mut(&join(prefix, "norm"), out);
        self.output.visit_mut(&join(prefix, "output"), out);
    }
}

/// Two-layer GELU MLP predicting the teacher's temporal difference.
#[derive(Debug, Clone)]
pub struct DynHead {
    pub l1: Linear,
    pub l2: Linear,
}

impl DynHead {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(input, hidden, rng),
            l2: Linear::new(hidden, output, rng),
        }
    }

    pub fn input_width(&self) -> usize {
        self.l1.fan_in()
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        if z.last_dim() != self.input_width() {
            return Err(Error::Config(format!(
                "dynamics head takes {} channels, got {}",
                self.input_width(),
                z.last_dim()
            )));
        }
        self.l2.forward(&self.l1.forward(z)?.gelu()?)
    }
}

impl Module for DynHead {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.l1.visit(&join(prefix, "l1"), out);
        self.l2.visit(&join(prefix, "l2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.l1.visit_mut(&join(prefix, "l1"), out);
        self.l2.visit_mut(&join(prefix, "l2"), out);
    }
}

/// Linear map from latents to per-token mean pixel change per channel.
#[derive(Debug, Clone)]
pub struct ActionHead {
    pub l: Linear,
}

impl ActionHead {
    pub fn new<R: Rng + ?Sized>(input: usize, channels: usize, rng: &mut R) -> Self {
        Self {
            l: Linear::new(input, channels, rng),
        }
    }

    pub fn input_width(&self) -> usize {
        self.l.fan_in()
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        if z.last_dim() != self.input_width() {
            return Err(Error::Config(format!(
                "action head takes {} channels, got {}",
                self.input_width(),
                z.last_dim()
            )));
        }
        self.l.forward(z)
    }
}

impl Module for ActionHead {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.l.visit(&join(prefix, "l"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.l.visit_mut(&join(prefix, "l"), out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HamActivation {
    Tanh,
    /// `u^2 / 2`, which makes quadratic energies expressible exactly.
    HalfSquare,
}

/// Learned scalar energy `H(x) = sum_j w2_j * act((x W1 + b1)_j)` over the
/// full latent `x = (q, p)`.
#[derive(Debug, Clone)]
pub struct HamNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub activation: HamActivation,
}

impl HamNet {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: gaussian(&[dim, hidden], (1.0 / dim as f64).sqrt(), rng),
            b1: constant(&[hidden], 0.0),
            w2: gaussian(&[hidden], (1.0 / hidden as f64).sqrt(), rng),
            activation: HamActivation::Tanh,
        }
    }

    /// Per-row energy, `[n]`.
    pub fn energy(&self, x: &Tensor) -> Result<Tensor> {
        let a = x.matmul(&self.w1)?.add_row(&self.b1)?;
        let act = match self.activation {
            HamActivation::Tanh => a.tanh()?,
            HamActivation::HalfSquare => a.square()?.scale(0.5)?,
        };
        Ok(act.mul_row(&self.w2)?.sum(Some(1))?)
    }

    /// `dH/dx` per row, built from differentiable operations so that losses
    /// using it can be differentiated again.
    pub fn grad(&self, x: &Tensor) -> Result<Tensor> {
        let a = x.matmul(&self.w1)?.add_row(&self.b1)?;
        let slope = match self.activation {
            HamActivation::Tanh => a.tanh()?.square()?.neg()?.add_scalar(1.0)?,
            HamActivation::HalfSquare => a,
        };
        Ok(slope.mul_row(&self.w2)?.matmul(&self.w1.transpose()?)?)
    }
}

impl Module for HamNet {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "w1"), self.w1.clone()));
        out.push((join(prefix, "b1"), self.b1.clone()));
        out.push((join(prefix, "w2"), self.w2.clone()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "w1"), &mut self.w1));
        out.push((join(prefix, "b1"), &mut self.b1));
        out.push((join(prefix, "w2"), &mut self.w2));
    }
}

/// Which optional heads a model carries, and their input widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeadLayout {
    pub dyn_input: Option<usize>,
    pub action_input: Option<usize>,
    pub hamiltonian: bool,
}

/// Predictor plus the optional auxiliary heads.
#[derive(Debug, Clone)]
pub struct Heads {
    pub predictor: Predictor,
    pub dyn_head: Option<DynHead>,
    pub action_head: Option<ActionHead>,
    pub ham: Option<HamNet>,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, layout: HeadLayout, rng: &mut R) -> Self {
        Self {
            predictor: Predictor::new(cfg, rng),
            dyn_head: layout.dyn_input.map(|w| DynHead::new(w, cfg.dyn_hidden, cfg.dim, rng)),
            action_head: layout.action_input.map(|w| ActionHead::new(w, cfg.channels, rng)),
            ham: layout.hamiltonian.then(|| HamNet::new(cfg.dim, cfg.ham_hidden, rng)),
        }
    }
}

impl Module for Heads {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.predictor.visit(&join(prefix, "predictor"), out);
        if let Some(h) = &self.dyn_head {
            h.visit(&join(prefix, "dyn_head"), out);
        }
        if let Some(h) = &self.action_head {
            h.visit(&join(prefix, "action_head"), out);
        }
        if let Some(h) = &self.ham {
            h.visit(&join(prefix, "ham"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.predictor.visit_mut(&join(prefix, "predictor"), out);
        if let Some(h) = &mut self.dyn_head {
            h.visit_mut(&join(prefix, "dyn_head"), out);
        }
        if let Some(h) = &mut self.action_head {
            h.visit_mut(&join(prefix, "action_head"), out);
        }
        if let Some(h) = &mut self.ham {
            h.visit_mut(&join(prefix, "ham"), out);
        }
    }
}
