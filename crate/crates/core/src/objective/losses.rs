use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::model::{HamNet, LatentGrid};
use crate::synth::VideoClip;
use crate::{Error, Result};

/// Logit clamp applied before the hard-weight softmax.
pub const HW_LOGIT_CLIP: (f64, f64) = (-20.0, 20.0);
const MOMENT_EPS: f64 = 1e-12;

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(crate::TensorError::ShapeMismatch {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

fn check_grids(z: &LatentGrid, h: &LatentGrid) -> Result<()> {
    check_same(&z.values, &h.values)?;
    if z.blocks != h.blocks {
        return Err(Error::Config("latent grids differ in temporal blocks".into()));
    }
    Ok(())
}

fn zero() -> Tensor {
    Tensor::scalar(0.0)
}

/// Prediction loss and its unweighted per-target errors.
#[derive(Debug, Clone)]
pub struct JepaTerms {
    pub loss: Tensor,
    /// Channel-mean absolute error per target, `[n_targets]`.
    pub token_errors: Tensor,
}

/// Mean over targets and channels of `w * |pred - target|`.
pub fn jepa_loss(pred: &Tensor, target: &Tensor, weights: &[f64]) -> Result<JepaTerms> {
    check_same(pred, target)?;
    let (n, _) = pred.dims2()?;
    if weights.len() != n {
        return Err(Error::Config(format!("{} distance weights for {n} targets", weights.len())));
    }
    let token_errors = pred.sub(&target.detach())?.abs()?.mean(Some(1))?;
    let w = Tensor::new(&[n], weights.to_vec())?;
    let loss = token_errors.mul(&w)?.mean(None)?;
    Ok(JepaTerms { loss, token_errors })
}

/// Softmax over clipped `e / tau`, scaled by the token count. The result is
/// plain data, so it acts as a constant in any loss that uses it.
pub fn hard_weights(errors: &[f64], tau: f64) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(crate::TensorError::Empty.into());
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let logits: Vec<f64> = errors
        .iter()
        .map(|e| (e / tau).clamp(HW_LOGIT_CLIP.0, HW_LOGIT_CLIP.1))
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let n = errors.len() as f64;
    Ok(exps.iter().map(|e| e / z * n).collect())
}

/// `mean(w * e)` with `w = hard_weights(e, tau)` held constant.
pub fn hard_weighted_loss(errors: &Tensor, tau: f64) -> Result<Tensor> {
    weighted_error_mean(errors, &hard_weights(errors.data(), tau)?)
}

/// `mean(w * e)` for given constant weights.
pub fn weighted_error_mean(errors: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let w = Tensor::new(errors.shape(), weights.to_vec())?;
    Ok(errors.mul(&w)?.mean(None)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KinematicKind {
    L1,
    Huber(f64),
    Accel,
    Split,
    /// L1 value; the schedule lives in the recipe coefficient.
    Anneal,
}

fn second_difference(z: &LatentGrid) -> Result<Tensor> {
    let n = z.blocks - 2;
    let a = z.blocks_range(2, n)?;
    let b = z.blocks_range(1, n)?.scale(2.0)?;
    let c = z.blocks_range(0, n)?;
    Ok(a.sub(&b)?.add(&c)?)
}

/// Temporal smoothness penalty on the student latents. Single-block grids
/// give 0; second-order kinds need at least three blocks otherwise.
pub fn kinematic_loss(z: &LatentGrid, kind: KinematicKind) -> Result<Tensor> {
    if z.blocks == 1 {
        return Ok(zero());
    }
    let needs_three = matches!(kind, KinematicKind::Accel | KinematicKind::Split);
    if needs_three && z.blocks < 3 {
        return Err(Error::Config("acceleration penalties need at least three temporal blocks".into()));
    }
    match kind {
        KinematicKind::L1 | KinematicKind::Anneal => Ok(z.first_difference()?.abs()?.mean(None)?),
        KinematicKind::Huber(delta) => Ok(z.first_difference()?.huber(delta)?.mean(None)?),
        KinematicKind::Accel => Ok(second_difference(z)?.abs()?.mean(None)?),
        KinematicKind::Split => {
            let half = z.dim() / 2;
            let part = LatentGrid::new(z.values.narrow(1, 0, half)?, z.blocks)?;
            Ok(second_difference(&part)?.abs()?.mean(None)?)
        }
    }
}

/// Random unit directions as the columns of a `[dim, n]` matrix.
pub fn random_directions<R: Rng + ?Sized>(dim: usize, n: usize, rng: &mut R) -> Tensor {
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for c in &mut cols {
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        c.iter_mut().for_each(|v| *v /= norm);
    }
    let mut data = vec![0.0; dim * n];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            data[i * n + j] = *v;
        }
    }
    Tensor::new(&[dim, n], data).expect("direction matrix matches its shape")
}

/// Four-moment normality penalty averaged over the columns of `directions`:
/// `mean^2 + (var - 1)^2 + skew^2 + (excess kurtosis)^2` of each projection.
pub fn sigreg_with_directions(z: &Tensor, directions: &Tensor) -> Result<Tensor> {
    let (n, _) = z.dims2()?;
    if n < 8 {
        return Err(Error::Config(format!("normality penalty needs at least 8 tokens, got {n}")));
    }
    let proj = z.matmul(directions)?;
    let mean = proj.mean(Some(0))?;
    let centered = proj.add_row(&mean.neg()?)?;
    let sq = centered.square()?;
    let var = sq.mean(Some(0))?;
    let m3 = sq.mul(&centered)?.mean(Some(0))?;
    let m4 = sq.square()?.mean(Some(0))?;
    let var_eps = var.add_scalar(MOMENT_EPS)?;
    let skew = m3.div(&var_eps.mul(&var_eps.sqrt()?)?)?;
    let kurt = m4.div(&var_eps.square()?)?.add_scalar(-3.0)?;
    let per_dir = mean
        .square()?
        .add(&var.add_scalar(-1.0)?.square()?)?
        .add(&skew.square()?)?
        .add(&kurt.square()?)?;
    Ok(per_dir.mean(None)?)
}

/// [`sigreg_with_directions`] over `n_proj` fresh directions.
pub fn sigreg_loss<R: Rng + ?Sized>(z: &Tensor, n_proj: usize, rng: &mut R) -> Result<Tensor> {
    if n_proj == 0 {
        return Err(Error::Config("need at least one projection".into()));
    }
    let dirs = random_directions(z.last_dim(), n_proj, rng);
    sigreg_with_directions(z, &dirs)
}

/// Residual of the discrete Hamilton equations: with `q`, `p` the channel
/// halves, `mean|dq - dH/dp| + mean|dp + dH/dq|` over consecutive pairs,
/// gradients of `H` taken at the earlier step.
pub fn hamiltonian_loss(z: &LatentGrid, ham: &HamNet) -> Result<Tensor> {
    let d = z.dim();
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("q/p split needs an even width, got {d}")));
    }
    if z.blocks == 1 {
        return Ok(zero());
    }
    let half = d / 2;
    let delta = z.first_difference()?;
    let grad = ham.grad(&z.blocks_range(0, z.blocks - 1)?)?;
    let dq = delta.narrow(1, 0, half)?;
    let dp = delta.narrow(1, half, half)?;
    let dh_dq = grad.narrow(1, 0, half)?;
    let dh_dp = grad.narrow(1, half, half)?;
    let q_term = dq.sub(&dh_dp)?.abs()?.mean(None)?;
    let p_term = dp.add(&dh_dq)?.abs()?.mean(None)?;
    Ok(q_term.add(&p_term)?)
}

/// Spatial tokens in the low-velocity half: the `floor(N_s / 2)` smallest by
/// `(velocity, index)`.
pub fn velocity_gate(z: &LatentGrid) -> Result<Vec<usize>> {
    if z.blocks == 1 {
        return Ok(Vec::new());
    }
    let s = z.n_spatial();
    let d = z.dim();
    let diff = z.first_difference()?;
    let mut v = vec![0.0; s];
    for (row, chunk) in diff.data().chunks(d).enumerate() {
        v[row % s] += chunk.iter().map(|x| x.abs()).sum::<f64>();
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut gate: Vec<usize> = order[..s / 2].to_vec();
    gate.sort_unstable();
    Ok(gate)
}

/// First-difference L1 restricted to the low-velocity spatial tokens.
pub fn velgate_loss(z: &LatentGrid) -> Result<Tensor> {
    let gate = velocity_gate(z)?;
    if gate.is_empty() {
        return Ok(zero());
    }
    let s = z.n_spatial();
    let rows: Vec<usize> = (0..z.blocks - 1).flat_map(|t| gate.iter().map(move |&g| t * s + g)).collect();
    Ok(z.first_difference()?.gather_rows(&rows)?.abs()?.mean(None)?)
}

/// Mean L1 between student and teacher first differences.
pub fn delta_loss(z: &LatentGrid, h: &LatentGrid) -> Result<Tensor> {
    check_grids(z, h)?;
    if z.blocks == 1 {
        return Ok(zero());
    }
    let dh = h.detach().first_difference()?;
    Ok(z.first_difference()?.sub(&dh)?.abs()?.mean(None)?)
}

/// Dynamics-head loss and its per-token errors.
#[derive(Debug, Clone)]
pub struct LdTerms {
    pub loss: Tensor,
    /// Channel-mean absolute error per `(t, s)`, `t < T' - 1`.
    pub token_errors: Tensor,
}

/// `pred` holds one row per token of blocks `0..T'-1`.
pub fn ld_loss(pred: &Tensor, h: &LatentGrid) -> Result<LdTerms> {
    if h.blocks < 2 {
        return Err(Error::Config("latent dynamics need at least two temporal blocks".into()));
    }
    let dh = h.detach().first_difference()?;
    check_same(pred, &dh)?;
    let token_errors = pred.sub(&dh)?.abs()?.mean(Some(1))?;
    let loss = token_errors.mean(None)?;
    Ok(LdTerms { loss, token_errors })
}

/// `w_k = k / (T' - 1)` for frequency `k`.
pub fn spectral_weights(blocks: usize) -> Vec<f64> {
    (0..blocks).map(|k| k as f64 / (blocks - 1) as f64).collect()
}

/// Frequency-weighted L1 between student and teacher temporal spectra.
pub fn spectral_loss(z: &LatentGrid, h: &LatentGrid) -> Result<Tensor> {
    check_grids(z, h)?;
    if z.blocks < 2 {
        return Err(Error::Config("spectral loss needs at least two temporal blocks".into()));
    }
    let rows = z.n_tokens();
    let d = z.dim();
    let s = z.n_spatial();
    let spec = z.values.sub(&h.values.detach())?.temporal_dft(z.blocks)?;
    let wk = spectral_weights(z.blocks);
    let mut w = Vec::with_capacity(2 * rows * d);
    for _ in 0..2 {
        for r in 0..rows {
            w.extend(std::iter::repeat_n(wk[r / s], d));
        }
    }
    let w = Tensor::new(&[2 * rows, d], w)?;
    Ok(spec.abs()?.mul(&w)?.sum(None)?.scale(1.0 / (rows * d) as f64)?)
}

/// Hinge `max(0, margin - cos(z_t, h_t) + cos(z_t, h_{t+1}))` per token.
pub fn ltc_loss(z: &LatentGrid, h: &LatentGrid, margin: f64) -> Result<Tensor> {
    check_grids(z, h)?;
    if z.blocks == 1 {
        return Ok(zero());
    }
    let n = z.blocks - 1;
    let h = h.detach();
    let zt = z.blocks_range(0, n)?;
    let pos = zt.row_cosine(&h.blocks_range(0, n)?)?;
    let neg = zt.row_cosine(&h.blocks_range(1, n)?)?;
    Ok(neg.sub(&pos)?.add_scalar(margin)?.relu()?.mean(None)?)
}

/// `(L_static, L_orth)` for the appearance and dynamics channel groups.
pub fn fwm_losses(app: &LatentGrid, dynamics: &LatentGrid) -> Result<(Tensor, Tensor)> {
    if app.n_tokens() != dynamics.n_tokens() {
        return Err(Error::Config("channel groups cover different tokens".into()));
    }
    let stat = if app.blocks == 1 {
        zero()
    } else {
        app.first_difference()?.abs()?.mean(None)?
    };
    let center = |x: &Tensor| -> Result<Tensor> { Ok(x.add_row(&x.mean(Some(0))?.neg()?)?) };
    let ca = center(&app.values)?;
    let cd = center(&dynamics.values)?;
    let cross = ca.transpose()?.matmul(&cd)?;
    let orth = cross.square()?.sum(None)?.scale(1.0 / app.n_tokens() as f64)?;
    Ok((stat, orth))
}

/// Per-token patch-mean change between consecutive frame blocks,
/// `[(T' - 1) * N_s, C]`. Empty for single-block clips.
pub fn action_targets(clip: &VideoClip, patch: usize, tubelet: usize) -> Result<Tensor> {
    let (t, h, w, c) = clip.dims();
    let tubelet = if clip.is_image || t == 1 { 1 } else { tubelet };
    if patch == 0 || h % patch != 0 || w % patch != 0 || t % tubelet != 0 {
        return Err(Error::InvalidClip("clip does not tile into tokens".into()));
    }
    let blocks = t / tubelet;
    let (gh, gw) = (h / patch, w / patch);
    let s = gh * gw;
    let mut means = vec![0.0; blocks * s * c];
    let px = clip.frames.data();
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let tok = (f / tubelet) * s + (y / patch) * gw + x / patch;
                    means[tok * c + ch] += px[((f * h + y) * w + x) * c + ch];
                }
            }
        }
    }
    let per = (tubelet * patch * patch) as f64;
    means.iter_mut().for_each(|m| *m /= per);
    let pairs = blocks.saturating_sub(1);
    let data = (0..pairs * s * c).map(|i| means[i + s * c] - means[i]).collect();
    Ok(Tensor::new(&[pairs * s, c], data)?)
}

/// Mean L1 between action-head output and the pixel targets.
pub fn ac_loss(pred: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if targets.numel() == 0 {
        return Ok(zero());
    }
    check_same(pred, targets)?;
    Ok(pred.sub(&targets.detach())?.abs()?.mean(None)?)
}
