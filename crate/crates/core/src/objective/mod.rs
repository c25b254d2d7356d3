//! Loss functions and the per-variant recipes that combine them.

mod losses;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::mask::MaskConfig;
use crate::model::HeadLayout;
use crate::{Error, Result};

pub use losses::{
    ac_loss, action_targets, delta_loss, fwm_losses, hamiltonian_loss, hard_weighted_loss, hard_weights, jepa_loss,
    kinematic_loss, ld_loss, ltc_loss, random_directions, sigreg_loss, sigreg_with_directions, spectral_loss,
    spectral_weights, velgate_loss, velocity_gate, weighted_error_mean, JepaTerms, KinematicKind, LdTerms, HW_LOGIT_CLIP,
};

/// Every trainable method, named by its table label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    MotionGuided,
    KinL1,
    KinHuber,
    KinAccel,
    KinSplit,
    KinAnneal,
    SigReg,
    SigRegNoEma,
    Hamiltonian,
    VelGate,
    FuturePredictive,
    MotionFuture,
    FwmHwLd,
    Ld,
    Fwm,
    AcHw,
    Amg,
    Hw,
    HwLd,
    FwmLd,
    Combo,
    Delta,
    Ac,
    Fac,
    Ltc,
    Spectral,
}

impl Variant {
    pub const ALL: [Variant; 27] = [
        Variant::Baseline,
        Variant::MotionGuided,
        Variant::KinL1,
        Variant::KinHuber,
        Variant::KinAccel,
        Variant::KinSplit,
        Variant::KinAnneal,
        Variant::SigReg,
        Variant::SigRegNoEma,
        Variant::Hamiltonian,
        Variant::VelGate,
        Variant::FuturePredictive,
        Variant::MotionFuture,
        Variant::FwmHwLd,
        Variant::Ld,
        Variant::Fwm,
        Variant::AcHw,
        Variant::Amg,
        Variant::Hw,
        Variant::HwLd,
        Variant::FwmLd,
        Variant::Combo,
        Variant::Delta,
        Variant::Ac,
        Variant::Fac,
        Variant::Ltc,
        Variant::Spectral,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::MotionGuided => "Motion-Guided",
            Variant::KinL1 => "Kin.-L1",
            Variant::KinHuber => "Kin.-Huber",
            Variant::KinAccel => "Kin.-Accel",
            Variant::KinSplit => "Kin.-Split",
            Variant::KinAnneal => "Kin.-Anneal",
            Variant::SigReg => "SIGReg",
            Variant::SigRegNoEma => "SIGReg-no-EMA",
            Variant::Hamiltonian => "Hamiltonian",
            Variant::VelGate => "VelGate",
            Variant::FuturePredictive => "Future-Predictive",
            Variant::MotionFuture => "Motion-Future",
            Variant::FwmHwLd => "FWM-HW-LD",
            Variant::Ld => "LD-JEPA",
            Variant::Fwm => "FWM-JEPA",
            Variant::AcHw => "AC+HW-JEPA",
            Variant::Amg => "AMG-JEPA",
            Variant::Hw => "HW-JEPA",
            Variant::HwLd => "HW-LD-JEPA",
            Variant::FwmLd => "FWM-LD-JEPA",
            Variant::Combo => "Combo",
            Variant::Delta => "Delta-JEPA",
            Variant::Ac => "AC-JEPA",
            Variant::Fac => "FAC-JEPA",
            Variant::Ltc => "LTC-JEPA",
            Variant::Spectral => "Spectral-JEPA",
        }
    }

    /// Accepts the table label, plus "Baseline V-JEPA" as an alias.
    pub fn from_label(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "Baseline V-JEPA" {
            return Ok(Variant::Baseline);
        }
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn kinematic(self) -> Option<KinematicKind> {
        match self {
            Variant::KinL1 => Some(KinematicKind::L1),
            Variant::KinHuber => Some(KinematicKind::Huber(1.0)),
            Variant::KinAccel => Some(KinematicKind::Accel),
            Variant::KinSplit => Some(KinematicKind::Split),
            Variant::KinAnneal => Some(KinematicKind::Anneal),
            _ => None,
        }
    }

    /// Whether the variant keeps an EMA teacher by default.
    pub fn default_ema(self) -> bool {
        self.kinematic().is_none() && self != Variant::SigRegNoEma
    }

    /// Variants that split the latent channels into appearance and dynamics.
    pub fn factorized(self) -> bool {
        matches!(self, Variant::Fwm | Variant::FwmLd | Variant::FwmHwLd | Variant::Fac)
    }

    pub fn has_dyn_head(self) -> bool {
        matches!(self, Variant::Ld | Variant::HwLd | Variant::FwmLd | Variant::FwmHwLd)
    }

    pub fn has_action_head(self) -> bool {
        matches!(self, Variant::Ac | Variant::Fac | Variant::AcHw)
    }

    /// Default hard-weight coefficient: 1.0 when LD is also hard-weighted.
    pub fn default_lambda_hw(self) -> f64 {
        match self {
            Variant::HwLd | Variant::FwmHwLd => 1.0,
            _ => 0.3,
        }
    }

    /// Masking presets: the variant decides which strategy is on.
    pub fn default_mask(self) -> MaskConfig {
        let mut m = MaskConfig::default();
        match self {
            Variant::MotionGuided => m.motion_guided = true,
            Variant::Amg | Variant::Combo => {
                m.motion_guided = true;
                m.motion_guided_strength = 5.0;
                m.motion_guided_random_rate = 0.0;
            }
            Variant::FuturePredictive => m.future_predictive = true,
            Variant::MotionFuture => {
                m.motion_guided = true;
                m.future_predictive = true;
            }
            _ => {}
        }
        m
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Named scalar terms a recipe can combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    Jepa,
    HwJepa,
    Static,
    Orth,
    LdHw,
    Kin,
    SigReg,
    Ham,
    VelGate,
    Delta,
    Ld,
    Spectral,
    Ltc,
    Ac,
}

impl Component {
    pub const ALL: [Component; 14] = [
        Component::Jepa,
        Component::HwJepa,
        Component::Static,
        Component::Orth,
        Component::LdHw,
        Component::Kin,
        Component::SigReg,
        Component::Ham,
        Component::VelGate,
        Component::Delta,
        Component::Ld,
        Component::Spectral,
        Component::Ltc,
        Component::Ac,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Jepa => "jepa",
            Component::HwJepa => "hw_jepa",
            Component::Static => "static",
            Component::Orth => "orth",
            Component::LdHw => "ld_hw",
            Component::Kin => "kin",
            Component::SigReg => "sigreg",
            Component::Ham => "ham",
            Component::VelGate => "velgate",
            Component::Delta => "delta",
            Component::Ld => "ld",
            Component::Spectral => "spectral",
            Component::Ltc => "ltc",
            Component::Ac => "ac",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Variant choice plus every coefficient the recipes read.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    pub lambda_kin: f64,
    pub lambda_s: f64,
    pub lambda_o: f64,
    pub lambda_d: f64,
    pub lambda_hw: f64,
    pub lambda_ac: f64,
    pub lambda_delta: f64,
    pub lambda_spec: f64,
    pub lambda_ltc: f64,
    pub lambda_sigreg: f64,
    pub lambda_ham: f64,
    pub lambda_velgate: f64,
    pub tau: f64,
    pub huber_delta: f64,
    pub ltc_margin: f64,
    pub app_ratio: f64,
    pub anneal_horizon: usize,
    pub sigreg_projections: usize,
    pub ema: bool,
    pub ema_momentum: f64,
    pub mask: MaskConfig,
}

pub const EMA_MOMENTUM: f64 = 0.99925;

impl ObjectiveConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            lambda_kin: 0.1,
            lambda_s: 0.05,
            lambda_o: 0.01,
            lambda_d: 1.0,
            lambda_hw: variant.default_lambda_hw(),
            lambda_ac: 1.0,
            lambda_delta: 0.5,
            lambda_spec: 1.0,
            lambda_ltc: 0.5,
            lambda_sigreg: 1.0,
            lambda_ham: 1.0,
            lambda_velgate: 1.0,
            tau: 1.0,
            huber_delta: 1.0,
            ltc_margin: 0.5,
            app_ratio: 0.5,
            anneal_horizon: 500,
            sigreg_projections: 32,
            ema: variant.default_ema(),
            ema_momentum: EMA_MOMENTUM,
            mask: variant.default_mask(),
        }
    }

    pub fn lambdas(&self) -> [(&'static str, f64); 12] {
        [
            ("lambda_kin", self.lambda_kin),
            ("lambda_s", self.lambda_s),
            ("lambda_o", self.lambda_o),
            ("lambda_d", self.lambda_d),
            ("lambda_hw", self.lambda_hw),
            ("lambda_ac", self.lambda_ac),
            ("lambda_delta", self.lambda_delta),
            ("lambda_spec", self.lambda_spec),
            ("lambda_ltc", self.lambda_ltc),
            ("lambda_sigreg", self.lambda_sigreg),
            ("lambda_ham", self.lambda_ham),
            ("lambda_velgate", self.lambda_velgate),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.lambdas() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be a non-negative number")));
            }
        }
        let checks = [
            (self.tau > 0.0 && self.tau.is_finite(), "tau must be positive"),
            (self.huber_delta > 0.0, "huber_delta must be positive"),
            (self.ltc_margin >= 0.0, "ltc_margin must be non-negative"),
            (self.app_ratio > 0.0 && self.app_ratio < 1.0, "app_ratio must lie in (0, 1)"),
            (self.anneal_horizon >= 1, "anneal_horizon must be at least 1"),
            (self.sigreg_projections >= 1, "sigreg_projections must be at least 1"),
            ((0.0..=1.0).contains(&self.ema_momentum), "ema_momentum must lie in [0, 1]"),
            (self.mask.mask_ratio > 0.0 && self.mask.mask_ratio < 1.0, "mask_ratio must lie in (0, 1)"),
            (self.mask.motion_guided_strength >= 0.0, "motion_guided_strength must be non-negative"),
            (
                (0.0..=1.0).contains(&self.mask.motion_guided_random_rate),
                "motion_guided_random_rate must lie in [0, 1]",
            ),
            (
                self.mask.max_temporal_keep > 0.0 && self.mask.max_temporal_keep <= 1.0,
                "max_temporal_keep must lie in (0, 1]",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    /// Kinematic penalty kind with the configured Huber threshold.
    pub fn kinematic(&self) -> Option<KinematicKind> {
        self.variant.kinematic().map(|k| match k {
            KinematicKind::Huber(_) => KinematicKind::Huber(self.huber_delta),
            other => other,
        })
    }

    /// Auxiliary heads the variant trains, for latent width `dim`.
    pub fn head_layout(&self, dim: usize) -> Result<HeadLayout> {
        let head_input = if self.variant.factorized() {
            let cut = dim as f64 * self.app_ratio;
            if (cut - cut.round()).abs() > 1e-9 || cut.round() as usize == 0 || cut.round() as usize >= dim {
                return Err(Error::Config(format!("app_ratio {} does not split {dim} channels", self.app_ratio)));
            }
            dim - cut.round() as usize
        } else {
            dim
        };
        Ok(HeadLayout {
            dyn_input: self.variant.has_dyn_head().then_some(head_input),
            action_input: self.variant.has_action_head().then_some(head_input),
            hamiltonian: self.variant == Variant::Hamiltonian,
        })
    }

    /// `lambda * (1 + cos(pi * step / horizon)) / 2`, flat at 0 past the horizon.
    pub fn annealed_kin(&self, step: usize) -> f64 {
        let frac = (step as f64 / self.anneal_horizon as f64).min(1.0);
        self.lambda_kin * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Ordered `(component, coefficient)` terms of the variant's total loss.
    /// The JEPA term always comes first with coefficient 1.
    pub fn recipe(&self, step: usize) -> Vec<(Component, f64)> {
        use Component as C;
        let mut r = vec![(C::Jepa, 1.0)];
        let fwm = [(C::Static, self.lambda_s), (C::Orth, self.lambda_o)];
        match self.variant {
            Variant::Baseline
            | Variant::MotionGuided
            | Variant::Amg
            | Variant::FuturePredictive
            | Variant::MotionFuture => {}
            Variant::KinAnneal => r.push((C::Kin, self.annealed_kin(step))),
            Variant::KinL1 | Variant::KinHuber | Variant::KinAccel | Variant::KinSplit => {
                r.push((C::Kin, self.lambda_kin))
            }
            Variant::SigReg | Variant::SigRegNoEma => r.push((C::SigReg, self.lambda_sigreg)),
            Variant::Hamiltonian => r.push((C::Ham, self.lambda_ham)),
            Variant::VelGate => r.push((C::VelGate, self.lambda_velgate)),
            Variant::Delta => r.push((C::Delta, self.lambda_delta)),
            Variant::Ld => r.push((C::Ld, self.lambda_d)),
            Variant::Spectral => r.push((C::Spectral, self.lambda_spec)),
            Variant::Ltc => r.push((C::Ltc, self.lambda_ltc)),
            Variant::Fwm => r.extend(fwm),
            Variant::Hw => r.push((C::HwJepa, self.lambda_hw)),
            Variant::HwLd => r.extend([(C::HwJepa, self.lambda_hw), (C::LdHw, self.lambda_d)]),
            Variant::FwmLd => {
                r.extend(fwm);
                r.push((C::Ld, self.lambda_d));
            }
            Variant::Ac => r.push((C::Ac, self.lambda_ac)),
            Variant::Fac => {
                r.push((C::Ac, self.lambda_ac));
                r.extend(fwm);
            }
            Variant::AcHw => r.extend([(C::Ac, self.lambda_ac), (C::HwJepa, self.lambda_hw)]),
            Variant::Combo => r.extend([(C::Delta, self.lambda_delta), (C::HwJepa, self.lambda_hw)]),
            Variant::FwmHwLd => {
                r.push((C::HwJepa, self.lambda_hw));
                r.extend(fwm);
                r.push((C::LdHw, self.lambda_d));
            }
        }
        r
    }

    pub fn components(&self) -> Vec<Component> {
        self.recipe(0).into_iter().map(|(c, _)| c).collect()
    }
}

/// Component values and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub parts: BTreeMap<Component, f64>,
    pub total: f64,
}

impl LossBundle {
    pub fn get(&self, c: Component) -> Option<f64> {
        self.parts.get(&c).copied()
    }

    /// Elementwise mean of bundles with identical components.
    pub fn mean(bundles: &[LossBundle]) -> Result<LossBundle> {
        let first = bundles.first().ok_or_else(|| Error::Config("no bundles to average".into()))?;
        let n = bundles.len() as f64;
        let mut parts = BTreeMap::new();
        for &c in first.parts.keys() {
            let mut acc = 0.0;
            for b in bundles {
                acc += b.get(c).ok_or_else(|| Error::Config(format!("bundle lacks {c}")))?;
            }
            parts.insert(c, acc / n);
        }
        let total = bundles.iter().map(|b| b.total).sum::<f64>() / n;
        Ok(LossBundle { parts, total })
    }
}

/// Folds `terms` in recipe order: `acc = t0 * c0`, then `acc += t_i * c_i`.
/// Training applies the same fold to tensors, so totals agree bit for bit.
pub fn fold_terms<T, F, G>(terms: &[(Component, f64)], mut value: F, mut add: G) -> Result<T>
where
    F: FnMut(Component, f64) -> Result<T>,
    G: FnMut(T, T) -> Result<T>,
{
    let mut iter = terms.iter();
    let &(c0, w0) = iter.next().ok_or_else(|| Error::Config("empty recipe".into()))?;
    let mut acc = value(c0, w0)?;
    for &(c, w) in iter {
        acc = add(acc, value(c, w)?)?;
    }
    Ok(acc)
}

/// Weighted total over the variant's recipe at `step`.
pub fn compose_total(config: &ObjectiveConfig, parts: &BTreeMap<Component, f64>, step: usize) -> Result<LossBundle> {
    let recipe = config.recipe(step);
    let mut kept = BTreeMap::new();
    for &(c, _) in &recipe {
        let v = parts.get(&c).copied().ok_or_else(|| {
            Error::Config(format!("{} recipe needs the {} component", config.variant.label(), c.name()))
        })?;
        kept.insert(c, v);
    }
    let total = fold_terms(&recipe, |c, w| Ok(kept[&c] * w), |a, b| Ok(a + b))?;
    Ok(LossBundle { parts: kept, total })
}
