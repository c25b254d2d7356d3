//! Optimizer, schedule, the per-batch training step and whole-run driver.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::mask::{sample_mask, MaskDraw};
use crate::model::{
    ema_update, load_module, patchify, prefixed, read_checkpoint, split_channels, write_atomic, write_checkpoint,
    Encoder, Heads, LatentGrid, ModelConfig, Module,
};
use crate::objective::{
    ac_loss, action_targets, delta_loss, fold_terms, fwm_losses, hamiltonian_loss, hard_weighted_loss, jepa_loss,
    kinematic_loss, ld_loss, ltc_loss, sigreg_loss, spectral_loss, velgate_loss, Component, JepaTerms, LossBundle,
    ObjectiveConfig,
};
use crate::synth::{mix_seed, Dataset, MixtureSpec, VideoClip};
use crate::{Error, Result};

/// Linear warmup from `lr_start` to `lr_peak`, then cosine decay to 0.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, lr_start: f64, lr_peak: f64) -> Result<f64> {
    if warmup_steps == 0 || warmup_steps > total_steps || step > total_steps {
        return Err(Error::Config(format!(
            "schedule needs 1 <= warmup ({warmup_steps}) <= total ({total_steps}) and step {step} <= total"
        )));
    }
    if step < warmup_steps {
        return Ok(lr_start + (lr_peak - lr_start) * step as f64 / warmup_steps as f64);
    }
    let span = (total_steps - warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    Ok(lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Rounds through f32, the checkpoint precision, so saved state is exact.
fn to_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Decoupled-weight-decay Adam with per-tensor moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(shapes: &[usize], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of every tensor in `params` with matching `grads`.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            if g.len() != p.numel() || m.len() != p.numel() {
                return Err(crate::TensorError::ShapeMismatch {
                    lhs: vec![p.numel()],
                    rhs: vec![g.len()],
                }
                .into());
            }
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                data[i] = data[i] - lr * self.weight_decay * data[i] - lr * step;
            }
            let fresh = Tensor::new(p.shape(), data)?;
            **p = if p.requires_grad() { fresh.requires_grad_() } else { fresh };
        }
        Ok(())
    }

    fn round_state(&mut self) {
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            buf.iter_mut().for_each(|x| *x = to_f32(*x));
        }
    }
}

/// Schedule and optimizer settings for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch: usize,
    /// Defaults to one epoch when `None`.
    pub warmup_steps: Option<usize>,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            iters_per_epoch: 40,
            batch: 8,
            warmup_steps: None,
            lr_start: 1e-4,
            lr_peak: 6e-4,
            weight_decay: 0.04,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.iters_per_epoch).clamp(1, self.total_steps().max(1))
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        lr_at(step.min(self.total_steps()), self.total_steps(), self.warmup(), self.lr_start, self.lr_peak)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps() == 0 || self.batch == 0 {
            return Err(Error::Config("epochs, iters_per_epoch and batch must be positive".into()));
        }
        if !(self.lr_start >= 0.0 && self.lr_peak > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything a run carries between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub student: Encoder,
    pub teacher: Encoder,
    pub heads: Heads,
    pub opt: AdamW,
    pub step: usize,
    pub seed: u64,
}

/// Re-labels a non-finite tensor error with the pipeline stage it came from.
fn blame<T>(r: Result<T>, component: &str, step: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::Tensor(crate::TensorError::NonFinite { .. }) => Error::NonFinite {
            component: component.into(),
            step,
        },
        other => other,
    })
}

/// Per-clip RNG for masks and projections at `step`.
pub fn clip_rng(seed: u64, step: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, 1 + step as u64), index as u64))
}

impl TrainState {
    pub fn new(model: ModelConfig, objective: ObjectiveConfig, weight_decay: f64, seed: u64) -> Result<Self> {
        model.validate()?;
        objective.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
        let student = Encoder::new(model, &mut rng)?;
        let layout = objective.head_layout(model.dim)?;
        let heads = Heads::new(&model, layout, &mut rng);
        let mut state = Self {
            model,
            teacher: student.frozen(),
            student,
            heads,
            opt: AdamW::new(&[], weight_decay),
            objective,
            step: 0,
            seed,
        };
        let shapes: Vec<usize> = state.trainable().iter().map(|(_, t)| t.numel()).collect();
        state.opt = AdamW::new(&shapes, weight_decay);
        state.round_params();
        Ok(state)
    }

    /// Optimizer-owned tensors: student then heads. The teacher is absent.
    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        let mut out = prefixed(&self.student, "student");
        out.extend(prefixed(&self.heads, "heads"));
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.student.named_params_mut().into_iter().map(|(_, t)| t).collect();
        out.extend(self.heads.named_params_mut().into_iter().map(|(_, t)| t));
        out
    }

    fn round_params(&mut self) {
        let round = |t: &mut Tensor| {
            let data = t.data().iter().map(|&x| to_f32(x)).collect();
            let fresh = Tensor::new(t.shape(), data).expect("same shape");
            *t = if t.requires_grad() { fresh.requires_grad_() } else { fresh };
        };
        for t in self.trainable_mut() {
            round(t);
        }
        for (_, t) in self.teacher.named_params_mut() {
            round(t);
        }
        self.opt.round_state();
    }

    /// Loss terms for one clip, in recipe order, plus their weighted total.
    pub fn clip_losses(&self, clip: &VideoClip, index: usize) -> Result<ClipLosses> {
        let cfg = &self.objective;
        let mut rng = clip_rng(self.seed, self.step, index);
        let tokens = patchify(clip, self.model.patch, self.model.tubelet)?;
        let draw = sample_mask(&cfg.mask, clip, tokens.grid, self.model.patch, &mut rng)?;
        let recipe = cfg.recipe(self.step);
        let needs_full = !cfg.ema || recipe.iter().any(|(c, _)| !matches!(c, Component::Jepa | Component::HwJepa));

        let step = self.step;
        let z_vis = blame(self.student.encode(&tokens, Some(&draw.mask)), "student", step)?;
        let pred = blame(self.heads.predictor.predict(&z_vis, &draw.mask), "predictor", step)?;
        let full = if needs_full {
            Some(blame(self.student.encode_grid(&tokens), "student", step)?)
        } else {
            None
        };
        let h = if cfg.ema {
            blame(self.teacher.encode_grid(&tokens), "teacher", step)?.detach()
        } else {
            full.as_ref().expect("student latents computed without EMA").detach()
        };
        let h_m = h.values.gather_rows(&draw.mask.target_indices())?;
        let jepa = blame(jepa_loss(&pred, &h_m, &draw.mask.distance_weight), "jepa", step)?;

        let mut parts: BTreeMap<Component, Tensor> = BTreeMap::new();
        for &(c, _) in &recipe {
            if parts.contains_key(&c) {
                continue;
            }
            let t = blame(self.component(c, clip, &jepa, &h, full.as_ref(), &mut rng, &mut parts), c.name(), step)?;
            parts.insert(c, t);
        }
        for (c, t) in &parts {
            if !t.item().is_finite() {
                return Err(Error::NonFinite {
                    component: c.name().into(),
                    step: self.step,
                });
            }
        }
        let total = fold_terms(&recipe, |c, w| Ok(parts[&c].scale(w)?), |a, b| Ok(a.add(&b)?))?;
        if !total.item().is_finite() {
            return Err(Error::NonFinite {
                component: "total".into(),
                step: self.step,
            });
        }
        let bundle = LossBundle {
            parts: parts.iter().map(|(c, t)| (*c, t.item())).collect(),
            total: total.item(),
        };
        Ok(ClipLosses {
            draw,
            parts,
            total,
            bundle,
        })
    }

    /// One recipe term. Static and orth are computed together; the sibling
    /// lands in `parts` directly.
    #[allow(clippy::too_many_arguments)]
    fn component(
        &self,
        c: Component,
        clip: &VideoClip,
        jepa: &JepaTerms,
        h: &LatentGrid,
        full: Option<&LatentGrid>,
        rng: &mut ChaCha8Rng,
        parts: &mut BTreeMap<Component, Tensor>,
    ) -> Result<Tensor> {
        let cfg = &self.objective;
        let single = h.blocks == 1;
        let z = || full.ok_or_else(|| Error::Config(format!("{} needs full student latents", c.name())));
        Ok(match c {
            Component::Jepa => jepa.loss.clone(),
            Component::HwJepa => hard_weighted_loss(&jepa.token_errors, cfg.tau)?,
            Component::Kin => {
                let kind = cfg.kinematic().ok_or_else(|| Error::Config("kinematic term without a kind".into()))?;
                kinematic_loss(z()?, kind)?
            }
            Component::SigReg => sigreg_loss(&z()?.values, cfg.sigreg_projections, rng)?,
            Component::Ham => {
                let ham = self.heads.ham.as_ref().ok_or_else(|| Error::Config("missing Hamiltonian head".into()))?;
                hamiltonian_loss(z()?, ham)?
            }
            Component::VelGate => velgate_loss(z()?)?,
            Component::Delta => delta_loss(z()?, h)?,
            Component::Spectral if single => Tensor::scalar(0.0),
            Component::Spectral => spectral_loss(z()?, h)?,
            Component::Ltc => ltc_loss(z()?, h, cfg.ltc_margin)?,
            Component::Static | Component::Orth => {
                let (app, dynamics) = split_channels(z()?, cfg.app_ratio)?;
                let (stat, orth) = fwm_losses(&app, &dynamics)?;
                if c == Component::Static {
                    parts.insert(Component::Orth, orth);
                    stat
                } else {
                    parts.insert(Component::Static, stat);
                    orth
                }
            }
            Component::Ld | Component::LdHw if single => Tensor::scalar(0.0),
            Component::Ld | Component::LdHw => {
                let head = self.heads.dyn_head.as_ref().ok_or_else(|| Error::Config("missing dynamics head".into()))?;
                let input = self.head_input(z()?)?;
                let ld = ld_loss(&head.forward(&input.blocks_range(0, input.blocks - 1)?)?, h)?;
                if c == Component::Ld {
                    ld.loss
                } else {
                    hard_weighted_loss(&ld.token_errors, cfg.tau)?
                }
            }
            Component::Ac if single => Tensor::scalar(0.0),
            Component::Ac => {
                let head = self.heads.action_head.as_ref().ok_or_else(|| Error::Config("missing action head".into()))?;
                let targets = action_targets(clip, self.model.patch, self.model.tubelet)?;
                let input = self.head_input(z()?)?;
                ac_loss(&head.forward(&input.blocks_range(0, input.blocks - 1)?)?, &targets)?
            }
        })
    }

    /// Dynamics channels under factorization, the whole latent otherwise.
    fn head_input(&self, z: &LatentGrid) -> Result<LatentGrid> {
        if self.objective.variant.factorized() {
            Ok(split_channels(z, self.objective.app_ratio)?.1)
        } else {
            Ok(z.clone())
        }
    }

    /// Batch-mean loss graph and bundle, without touching any parameter.
    pub fn batch_losses(&self, batch: &[VideoClip]) -> Result<(Tensor, LossBundle)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut total: Option<Tensor> = None;
        let mut bundles = Vec::with_capacity(batch.len());
        for (i, clip) in batch.iter().enumerate() {
            let cl = self.clip_losses(clip, i)?;
            total = Some(match total {
                None => cl.total,
                Some(acc) => acc.add(&cl.total)?,
            });
            bundles.push(cl.bundle);
        }
        let total = total.expect("non-empty batch").scale(1.0 / batch.len() as f64)?;
        Ok((total, LossBundle::mean(&bundles)?))
    }

    /// Backward, AdamW, then EMA when enabled. Returns the batch bundle.
    pub fn train_step(&mut self, batch: &[VideoClip], lr: f64) -> Result<LossBundle> {
        let (total, bundle) = self.batch_losses(batch)?;
        let grads = total.backward()?;
        let names: Vec<(String, Tensor)> = self.trainable();
        let g: Vec<Vec<f64>> = names.iter().map(|(_, t)| grads.get_or_zeros(t)).collect();
        let mut opt = std::mem::replace(&mut self.opt, AdamW::new(&[], 0.0));
        let updated = opt.update(&mut self.trainable_mut(), &g, lr);
        self.opt = opt;
        updated?;
        if self.objective.ema {
            let momentum = self.objective.ema_momentum;
            ema_update(&mut self.teacher, &self.student, momentum)?;
        }
        self.round_params();
        for (name, t) in self.trainable() {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    component: name,
                    step: self.step,
                });
            }
        }
        self.step += 1;
        Ok(bundle)
    }

    /// Tensors, optimizer moments and step as checkpoint records.
    pub fn records(&self) -> Vec<(String, Tensor)> {
        let mut out = self.trainable();
        out.extend(prefixed(&self.teacher, "teacher"));
        for (k, (name, t)) in self.trainable().iter().enumerate() {
            out.push((format!("opt.m.{name}"), Tensor::new(t.shape(), self.opt.m[k].clone()).expect("moment shape")));
            out.push((format!("opt.v.{name}"), Tensor::new(t.shape(), self.opt.v[k].clone()).expect("moment shape")));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &self.records())?;
        write_atomic(path, &bytes)?;
        let meta = CheckpointMeta {
            step: self.step,
            opt_step: self.opt.step,
            seed: self.seed,
        };
        write_atomic(&meta_path(path), serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    /// Restores a state saved by [`TrainState::save`] for the same configs.
    pub fn load(path: &Path, model: ModelConfig, objective: ObjectiveConfig, weight_decay: f64) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?;
        let mut state = Self::new(model, objective, weight_decay, meta.seed)?;
        let records: HashMap<String, Tensor> = read_checkpoint(&mut std::fs::File::open(path)?)?.into_iter().collect();
        load_module(&mut state.student, "student", &records)?;
        load_module(&mut state.heads, "heads", &records)?;
        load_module(&mut state.teacher, "teacher", &records)?;
        for (k, (name, _)) in state.trainable().iter().enumerate() {
            for (prefix, buf) in [("m", &mut state.opt.m[k]), ("v", &mut state.opt.v[k])] {
                let key = format!("opt.{prefix}.{name}");
                let t = records.get(&key).ok_or_else(|| Error::Format(format!("checkpoint lacks '{key}'")))?;
                if t.numel() != buf.len() {
                    return Err(Error::Format(format!("'{key}' has the wrong size")));
                }
                *buf = t.to_vec();
            }
        }
        state.step = meta.step;
        state.opt.step = meta.opt_step;
        Ok(state)
    }
}

/// Per-clip loss graph pieces.
#[derive(Debug, Clone)]
pub struct ClipLosses {
    pub draw: MaskDraw,
    pub parts: BTreeMap<Component, Tensor>,
    pub total: Tensor,
    pub bundle: LossBundle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct CheckpointMeta {
    step: usize,
    opt_step: u64,
    seed: u64,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Source clips and the mixture weights to sample them with.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub datasets: Vec<Dataset>,
    pub weights: Vec<f64>,
}

impl TrainData {
    pub fn single(dataset: Dataset) -> Self {
        Self {
            datasets: vec![dataset],
            weights: vec![1.0],
        }
    }

    /// The batch for `step`, a pure function of `(seed, step)`.
    pub fn batch(&self, seed: u64, step: usize, size: usize) -> Result<Vec<VideoClip>> {
        let spec = MixtureSpec::new(self.weights.clone(), mix_seed(seed ^ 0xDA7A, step as u64))?;
        let draws = crate::synth::sample_mixture(&spec, &self.datasets, size)?;
        Ok(draws
            .into_iter()
            .map(|d| self.datasets[d.dataset].clips[d.index].clone())
            .collect())
    }
}

/// One metrics-log line: step, learning rate, components and total.
pub fn metrics_record(step: usize, lr: f64, bundle: &LossBundle) -> Result<String> {
    let mut map = serde_json::Map::new();
    map.insert("step".into(), step.into());
    map.insert("lr".into(), lr.into());
    for (c, v) in &bundle.parts {
        map.insert(c.name().into(), (*v).into());
    }
    map.insert("total".into(), bundle.total.into());
    Ok(serde_json::to_string(&serde_json::Value::Object(map))?)
}

/// Where a run keeps its artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.jpck")
    }
}

/// What a pretraining run leaves behind.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub state: TrainState,
    pub steps_run: usize,
    pub last: Option<LossBundle>,
}

/// Trains from `state` until the schedule ends or `stop_after` steps in
/// total have run, appending metrics and writing the checkpoint atomically.
pub fn run_pretrain(
    mut state: TrainState,
    train: &TrainConfig,
    data: &TrainData,
    paths: &RunPaths,
    stop_after: Option<usize>,
) -> Result<RunSummary> {
    train.validate()?;
    std::fs::create_dir_all(&paths.dir)?;
    let end = stop_after.unwrap_or(usize::MAX).min(train.total_steps());
    let mut log = OpenOptions::new().create(true).append(true).open(paths.metrics())?;
    let mut last = None;
    let start = state.step;
    while state.step < end {
        let lr = train.lr(state.step)?;
        let batch = data.batch(state.seed, state.step, train.batch)?;
        let step = state.step;
        let bundle = state.train_step(&batch, lr)?;
        writeln!(log, "{}", metrics_record(step, lr, &bundle)?)?;
        last = Some(bundle);
    }
    log.flush()?;
    state.save(&paths.checkpoint())?;
    Ok(RunSummary {
        steps_run: state.step - start,
        state,
        last,
    })
}
