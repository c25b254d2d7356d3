//! Frozen-encoder evaluation: feature extraction, probes and top-1.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::model::{gaussian, patchify, Encoder, Linear, Module};
use crate::synth::{gen_motion_dataset, mix_seed, Dataset, VideoClip, N_MOTION_CLASSES};
use crate::train::AdamW;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Attentive,
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Attentive => "attentive",
        })
    }
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ProbeKind::Linear),
            "attentive" => Ok(ProbeKind::Attentive),
            other => Err(Error::Config(format!("unknown probe kind {other:?}"))),
        }
    }
}

/// Latents of every token of a clip, with no gradient path to the encoder.
pub fn extract_tokens(encoder: &Encoder, clip: &VideoClip) -> Result<Tensor> {
    let tokens = patchify(clip, encoder.cfg.patch, encoder.cfg.tubelet)?;
    Ok(encoder.encode(&tokens, None)?.detach())
}

/// Token-mean latent, `[D]`.
pub fn extract_pooled(encoder: &Encoder, clip: &VideoClip) -> Result<Tensor> {
    Ok(extract_tokens(encoder, clip)?.mean(Some(0))?)
}

/// Per-sample probe input: pooled vectors or token sets.
pub fn extract_features(encoder: &Encoder, clips: &[VideoClip], kind: ProbeKind) -> Result<Vec<Tensor>> {
    clips
        .iter()
        .map(|c| match kind {
            ProbeKind::Linear => extract_pooled(encoder, c),
            ProbeKind::Attentive => extract_tokens(encoder, c),
        })
        .collect()
}

/// Single-query attention pooling ahead of the classifier.
#[derive(Debug, Clone)]
pub struct AttentionPool {
    pub query: Tensor,
    pub key: Linear,
    pub value: Linear,
}

impl Module for AttentionPool {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.query"), self.query.clone()));
        self.key.visit(&format!("{prefix}.key"), out);
        self.value.visit(&format!("{prefix}.value"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.query"), &mut self.query));
        self.key.visit_mut(&format!("{prefix}.key"), out);
        self.value.visit_mut(&format!("{prefix}.value"), out);
    }
}

/// Trained probe: optional attention pooling, feature standardization
/// fitted on the training split, then a linear classifier.
#[derive(Debug, Clone)]
pub struct ProbeParams {
    pub kind: ProbeKind,
    pub pool: Option<AttentionPool>,
    pub shift: Tensor,
    pub scale: Tensor,
    pub classifier: Linear,
}

impl Module for ProbeParams {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let Some(p) = &self.pool {
            p.visit(&format!("{prefix}pool"), out);
        }
        self.classifier.visit(&format!("{prefix}classifier"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        if let Some(p) = &mut self.pool {
            p.visit_mut(&format!("{prefix}pool"), out);
        }
        self.classifier.visit_mut(&format!("{prefix}classifier"), out);
    }
}

impl ProbeParams {
    pub fn n_classes(&self) -> usize {
        self.classifier.fan_out()
    }

    fn pooled(&self, features: &Tensor) -> Result<Tensor> {
        match (&self.pool, self.kind) {
            (None, ProbeKind::Linear) => Ok(features.reshape(&[1, features.numel()])?),
            (Some(p), ProbeKind::Attentive) => {
                let d = features.last_dim() as f64;
                let keys = p.key.forward(features)?;
                let scores = keys.matmul(&p.query.reshape(&[p.query.numel(), 1])?)?.transpose()?;
                let att = scores.softmax(d.sqrt(), None)?;
                Ok(att.matmul(&p.value.forward(features)?)?)
            }
            _ => Err(Error::Config("probe pooling does not match its kind".into())),
        }
    }

    /// Class logits, one row per sample.
    pub fn logits(&self, features: &[Tensor]) -> Result<Tensor> {
        if features.is_empty() {
            return Err(crate::TensorError::Empty.into());
        }
        let rows = features.iter().map(|f| self.pooled(f)).collect::<Result<Vec<_>>>()?;
        let x = Tensor::concat(&rows, 0)?.add_row(&self.shift)?.mul_row(&self.scale)?;
        self.classifier.forward(&x)
    }
}

/// Optimizer and schedule for probe training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            weight_decay: 0.0,
            batch: 16,
            seed: 0,
        }
    }
}

/// Column mean and inverse standard deviation of pooled training features.
fn standardizer(rows: &[Tensor]) -> Result<(Tensor, Tensor)> {
    let d = rows[0].last_dim();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        r.data().iter().enumerate().for_each(|(j, v)| mean[j] += v / n);
    }
    let mut var = vec![0.0; d];
    for r in rows {
        r.data().iter().enumerate().for_each(|(j, v)| var[j] += (v - mean[j]).powi(2) / n);
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-6)).collect();
    Ok((Tensor::new(&[d], mean.iter().map(|m| -m).collect())?, Tensor::new(&[d], inv)?))
}

/// Cross-entropy training of a fresh probe on fixed features.
pub fn train_probe(
    features: &[Tensor],
    labels: &[usize],
    n_classes: usize,
    kind: ProbeKind,
    cfg: &ProbeConfig,
) -> Result<ProbeParams> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Config("features and labels must be non-empty and aligned".into()));
    }
    if labels.iter().any(|&l| l >= n_classes) {
        return Err(Error::Config(format!("labels must lie below {n_classes}")));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Config("probe training needs at least two classes".into()));
    }
    let d = features[0].last_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x9B0B));
    let pool = match kind {
        ProbeKind::Linear => None,
        ProbeKind::Attentive => Some(AttentionPool {
            query: gaussian(&[d], 0.02, &mut rng),
            key: Linear::new(d, d, &mut rng),
            value: Linear::new(d, d, &mut rng),
        }),
    };
    let mut probe = ProbeParams {
        kind,
        pool,
        shift: Tensor::zeros(&[d]),
        scale: Tensor::full(&[d], 1.0),
        classifier: Linear::zeros(d, n_classes),
    };
    if kind == ProbeKind::Linear {
        let rows = features.iter().map(|f| probe.pooled(f)).collect::<Result<Vec<_>>>()?;
        let (shift, scale) = standardizer(&rows)?;
        probe.shift = shift;
        probe.scale = scale;
    }
    let shapes: Vec<usize> = probe.named_params().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::new(&shapes, cfg.weight_decay);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let batch = cfg.batch.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xs: Vec<Tensor> = chunk.iter().map(|&i| features[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = probe.logits(&xs)?.cross_entropy(&ys)?;
            let grads = loss.backward()?;
            let g: Vec<Vec<f64>> = probe.named_params().iter().map(|(_, t)| grads.get_or_zeros(t)).collect();
            let mut params: Vec<&mut Tensor> = probe.named_params_mut().into_iter().map(|(_, t)| t).collect();
            opt.update(&mut params, &g, cfg.lr)?;
        }
    }
    Ok(probe)
}

/// Fraction of rows whose first maximal logit sits at the label.
pub fn top1(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dims2()?;
    if n == 0 || labels.len() != n {
        return Err(Error::Config("top-1 needs a non-empty, label-aligned set".into()));
    }
    let mut hits = 0usize;
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        hits += usize::from(best == label);
    }
    Ok(hits as f64 / n as f64)
}

/// One evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    pub top1: f64,
    pub n_samples: usize,
    pub probe: ProbeKind,
    pub checkpoint: String,
}

fn labels_of(data: &Dataset) -> Result<Vec<usize>> {
    data.clips
        .iter()
        .map(|c| c.label.ok_or_else(|| Error::InvalidClip(format!("unlabelled clip from {}", c.source))))
        .collect()
}

/// Trains a probe on one labelled set and scores it on another.
pub fn evaluate(
    encoder: &Encoder,
    train: &Dataset,
    test: &Dataset,
    n_classes: usize,
    kind: ProbeKind,
    cfg: &ProbeConfig,
    checkpoint: &str,
) -> Result<EvalReport> {
    let frozen = encoder.frozen();
    let train_x = extract_features(&frozen, &train.clips, kind)?;
    let probe = train_probe(&train_x, &labels_of(train)?, n_classes, kind, cfg)?;
    let test_x = extract_features(&frozen, &test.clips, kind)?;
    let test_y = labels_of(test)?;
    Ok(EvalReport {
        benchmark: test.name.clone(),
        top1: top1(&probe.logits(&test_x)?, &test_y)?,
        n_samples: test_y.len(),
        probe: kind,
        checkpoint: checkpoint.into(),
    })
}

/// Seed streams for the train and test splits; distinct streams give
/// disjoint clip seeds.
pub const TRAIN_SPLIT: u64 = 1;
pub const TEST_SPLIT: u64 = 2;

/// The 8-class motion task: fresh train/test splits and a probe.
pub fn synthetic_benchmark(
    encoder: &Encoder,
    n_per_class: usize,
    seed: u64,
    kind: ProbeKind,
    cfg: &ProbeConfig,
    checkpoint: &str,
) -> Result<EvalReport> {
    let train = gen_motion_dataset(n_per_class, mix_seed(seed, TRAIN_SPLIT))?;
    let test = gen_motion_dataset(n_per_class, mix_seed(seed, TEST_SPLIT))?;
    evaluate(encoder, &train, &test, N_MOTION_CLASSES, kind, cfg, checkpoint)
}
