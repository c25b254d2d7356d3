//! Run configuration, commands and reports behind the `lab` binary.

mod commands;
mod report;
mod verify;

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::model::ModelConfig;
use crate::objective::{ObjectiveConfig, Variant};
use crate::probe::{ProbeConfig, ProbeKind};
use crate::train::TrainConfig;
use crate::{Error, Result};

pub use commands::{
    cmd_gendata, cmd_pretrain, cmd_probe, cmd_report, cmd_sweep, cmd_verify, load_run_encoder, run_dir, run_name,
    GendataOutcome, PretrainOutcome, CONFIG_FILE, PRETRAIN_SPLIT,
};
pub use report::{SweepRow, SweepTable, DELTA_TOLERANCE};
pub use verify::{Check, VerifyReport};

/// Every setting a command needs, flat as in the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub objective: ObjectiveConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub probe_kind: ProbeKind,
    pub probe_n_per_class: usize,
    /// Dataset files for pretraining; empty means freshly generated motion clips.
    pub datasets: Vec<PathBuf>,
    pub mixture_weights: Vec<f64>,
    pub pretrain_n_per_class: usize,
    pub gen_images: usize,
    pub sweep: Vec<Variant>,
    pub sweep_baseline: Variant,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Baseline)
    }
}

fn parse_value<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| format!("cannot parse {value:?}: {e}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {value:?}")),
    }
}

fn parse_list<T>(value: &str, item: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| item(v.trim())).collect()
}

fn variant(value: &str) -> std::result::Result<Variant, String> {
    Variant::from_label(value).map_err(|e| e.to_string())
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults with the presets of `variant` filled in.
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            objective: ObjectiveConfig::for_variant(variant),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            probe_kind: ProbeKind::Linear,
            probe_n_per_class: 25,
            datasets: Vec::new(),
            mixture_weights: Vec::new(),
            pretrain_n_per_class: 32,
            gen_images: 64,
            sweep: vec![Variant::Baseline, Variant::KinL1, Variant::MotionGuided],
            sweep_baseline: Variant::Baseline,
            seed: 0,
            out: PathBuf::from("runs"),
        }
    }

    pub fn variant(&self) -> Variant {
        self.objective.variant
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_variant(text, None)
    }

    /// Like [`RunConfig::parse`], with `variant` replacing any `variant=`
    /// line. Presets of the variant apply first, then every other key.
    pub fn parse_with_variant(text: &str, variant_override: Option<Variant>) -> Result<Self> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigLine {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            lines.push((i + 1, key.trim(), value.trim()));
        }
        let mut chosen = Variant::Baseline;
        for &(line, key, value) in &lines {
            if key == "variant" {
                chosen = variant(value).map_err(|message| Error::ConfigLine { line, message })?;
            }
        }
        let mut cfg = Self::for_variant(variant_override.unwrap_or(chosen));
        let mut seen = std::collections::HashSet::new();
        let mut future_explicit = false;
        let mut future_implied = false;
        for &(line, key, value) in &lines {
            let fail = |message: String| Error::ConfigLine { line, message };
            if !seen.insert(key) {
                return Err(fail(format!("duplicate key {key:?}")));
            }
            match key {
                "variant" => {}
                "future_predictive" => future_explicit = true,
                "max_temporal_keep" | "full_complement" => future_implied = true,
                _ => {}
            }
            if key != "variant" {
                cfg.set(key, value).map_err(fail)?;
            }
            cfg.objective.validate().map_err(|e| fail(e.to_string()))?;
        }
        if future_implied && !future_explicit {
            cfg.objective.mask.future_predictive = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let o = &mut self.objective;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "lambda_kin" => o.lambda_kin = parse_value(value)?,
            "lambda_s" => o.lambda_s = parse_value(value)?,
            "lambda_o" => o.lambda_o = parse_value(value)?,
            "lambda_d" => o.lambda_d = parse_value(value)?,
            "lambda_hw" => o.lambda_hw = parse_value(value)?,
            "lambda_ac" => o.lambda_ac = parse_value(value)?,
            "lambda_delta" => o.lambda_delta = parse_value(value)?,
            "lambda_spec" => o.lambda_spec = parse_value(value)?,
            "lambda_ltc" => o.lambda_ltc = parse_value(value)?,
            "lambda_sigreg" => o.lambda_sigreg = parse_value(value)?,
            "lambda_ham" => o.lambda_ham = parse_value(value)?,
            "lambda_velgate" => o.lambda_velgate = parse_value(value)?,
            "tau" => o.tau = parse_value(value)?,
            "huber_delta" => o.huber_delta = parse_value(value)?,
            "ltc_margin" => o.ltc_margin = parse_value(value)?,
            "app_ratio" => o.app_ratio = parse_value(value)?,
            "anneal_horizon" => o.anneal_horizon = parse_value(value)?,
            "sigreg_projections" => o.sigreg_projections = parse_value(value)?,
            "ema" => o.ema = parse_bool(value)?,
            "ema_momentum" => o.ema_momentum = parse_value(value)?,
            "mask_ratio" => o.mask.mask_ratio = parse_value(value)?,
            "motion_guided" => o.mask.motion_guided = parse_bool(value)?,
            "motion_guided_strength" => o.mask.motion_guided_strength = parse_value(value)?,
            "motion_guided_random_rate" => o.mask.motion_guided_random_rate = parse_value(value)?,
            "future_predictive" => o.mask.future_predictive = parse_bool(value)?,
            "full_complement" => o.mask.full_complement = parse_bool(value)?,
            "max_temporal_keep" => o.mask.max_temporal_keep = parse_value(value)?,
            "dim" => m.dim = parse_value(value)?,
            "layers" => m.layers = parse_value(value)?,
            "heads" => m.heads = parse_value(value)?,
            "ff" => m.ff = parse_value(value)?,
            "predictor_layers" => m.predictor_layers = parse_value(value)?,
            "predictor_dim" => m.predictor_dim = parse_value(value)?,
            "patch" => m.patch = parse_value(value)?,
            "tubelet" => m.tubelet = parse_value(value)?,
            "channels" => m.channels = parse_value(value)?,
            "dyn_hidden" => m.dyn_hidden = parse_value(value)?,
            "ham_hidden" => m.ham_hidden = parse_value(value)?,
            "epochs" => t.epochs = parse_value(value)?,
            "iters_per_epoch" => t.iters_per_epoch = parse_value(value)?,
            "batch" => t.batch = parse_value(value)?,
            "warmup_steps" => t.warmup_steps = if value.is_empty() { None } else { Some(parse_value(value)?) },
            "lr_start" => t.lr_start = parse_value(value)?,
            "lr_peak" => t.lr_peak = parse_value(value)?,
            "weight_decay" => t.weight_decay = parse_value(value)?,
            "probe" => self.probe_kind = value.parse().map_err(|e: Error| e.to_string())?,
            "probe_epochs" => self.probe.epochs = parse_value(value)?,
            "probe_lr" => self.probe.lr = parse_value(value)?,
            "probe_weight_decay" => self.probe.weight_decay = parse_value(value)?,
            "probe_batch" => self.probe.batch = parse_value(value)?,
            "probe_n_per_class" => self.probe_n_per_class = parse_value(value)?,
            "datasets" => self.datasets = parse_list(value, |v| Ok(PathBuf::from(v)))?,
            "mixture_weights" => self.mixture_weights = parse_list(value, parse_value)?,
            "pretrain_n_per_class" => self.pretrain_n_per_class = parse_value(value)?,
            "gen_images" => self.gen_images = parse_value(value)?,
            "sweep" => self.sweep = parse_list(value, variant)?,
            "sweep_baseline" => self.sweep_baseline = variant(value)?,
            "seed" => self.seed = parse_value(value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let o = &self.objective;
        let m = &self.model;
        let t = &self.train;
        let mut out = vec![("variant", o.variant.label().to_string())];
        out.extend(o.lambdas().iter().map(|&(k, v)| (k, v.to_string())));
        out.extend([
            ("tau", o.tau.to_string()),
            ("huber_delta", o.huber_delta.to_string()),
            ("ltc_margin", o.ltc_margin.to_string()),
            ("app_ratio", o.app_ratio.to_string()),
            ("anneal_horizon", o.anneal_horizon.to_string()),
            ("sigreg_projections", o.sigreg_projections.to_string()),
            ("ema", o.ema.to_string()),
            ("ema_momentum", o.ema_momentum.to_string()),
            ("mask_ratio", o.mask.mask_ratio.to_string()),
            ("motion_guided", o.mask.motion_guided.to_string()),
            ("motion_guided_strength", o.mask.motion_guided_strength.to_string()),
            ("motion_guided_random_rate", o.mask.motion_guided_random_rate.to_string()),
            ("future_predictive", o.mask.future_predictive.to_string()),
            ("full_complement", o.mask.full_complement.to_string()),
            ("max_temporal_keep", o.mask.max_temporal_keep.to_string()),
            ("dim", m.dim.to_string()),
            ("layers", m.layers.to_string()),
            ("heads", m.heads.to_string()),
            ("ff", m.ff.to_string()),
            ("predictor_layers", m.predictor_layers.to_string()),
            ("predictor_dim", m.predictor_dim.to_string()),
            ("patch", m.patch.to_string()),
            ("tubelet", m.tubelet.to_string()),
            ("channels", m.channels.to_string()),
            ("dyn_hidden", m.dyn_hidden.to_string()),
            ("ham_hidden", m.ham_hidden.to_string()),
            ("epochs", t.epochs.to_string()),
            ("iters_per_epoch", t.iters_per_epoch.to_string()),
            ("batch", t.batch.to_string()),
            ("warmup_steps", t.warmup_steps.map(|w| w.to_string()).unwrap_or_default()),
            ("lr_start", t.lr_start.to_string()),
            ("lr_peak", t.lr_peak.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("probe", self.probe_kind.to_string()),
            ("probe_epochs", self.probe.epochs.to_string()),
            ("probe_lr", self.probe.lr.to_string()),
            ("probe_weight_decay", self.probe.weight_decay.to_string()),
            ("probe_batch", self.probe.batch.to_string()),
            ("probe_n_per_class", self.probe_n_per_class.to_string()),
            (
                "datasets",
                self.datasets.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            ),
            ("mixture_weights", join(&self.mixture_weights)),
            ("pretrain_n_per_class", self.pretrain_n_per_class.to_string()),
            ("gen_images", self.gen_images.to_string()),
            ("sweep", self.sweep.iter().map(|v| v.label()).collect::<Vec<_>>().join(",")),
            ("sweep_baseline", self.sweep_baseline.label().to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
        ]);
        out
    }

    /// Canonical text form; parsing it gives back `self`.
    pub fn serialize(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.probe.epochs == 0 || self.probe.batch == 0 || self.probe_n_per_class == 0 || self.pretrain_n_per_class == 0 {
            return Err(Error::Config(
                "probe_epochs, probe_batch, probe_n_per_class and pretrain_n_per_class must be positive".into(),
            ));
        }
        if !(self.probe.lr > 0.0 && self.probe.weight_decay >= 0.0) {
            return Err(Error::Config("probe_lr must be positive and probe_weight_decay non-negative".into()));
        }
        if self.datasets.len() != self.mixture_weights.len() {
            return Err(Error::Config(format!(
                "{} datasets but {} mixture weights",
                self.datasets.len(),
                self.mixture_weights.len()
            )));
        }
        if self.datasets.iter().any(|p| p.as_os_str().is_empty() || p.to_string_lossy().contains(',')) {
            return Err(Error::Config("dataset paths must be non-empty and free of commas".into()));
        }
        if self.sweep.is_empty() {
            return Err(Error::Config("sweep needs at least one variant".into()));
        }
        Ok(())
    }
}
