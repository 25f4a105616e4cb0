//! Pretext losses and their multi-task combinations.
//!
//! * reconstruction: mean absolute error over every element, i.e. the
//!   batch mean of each image's l1 distance divided by `C*H*W`;
//! * rotation: 4-way softmax cross-entropy;
//! * contrastive: NT-Xent over `2N` views, averaged over all `2N` anchors;
//! * combination: fixed weights, or learned log-variances `s_i = log(alpha_i^2)`
//!   giving `exp(-s1/2) L_rec + exp(-s2) L_rot + exp(-s3) L_con + (s1+s2+s3)/2`.
//!   The reconstruction term uses the Laplace scale `1/alpha` (hence `-s/2`)
//!   and the two classification terms the softmax scale `1/alpha^2`.

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::ROTATION_CLASSES;
use crate::tensor::{Real, Tensor};

/// Floor applied to embedding norms before cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.5 }
    }
}

pub fn l1_reconstruction<T: Real>(tape: &mut Tape<T>, target: Var, recon: Var) -> Result<Var> {
    if tape.shape(target) != tape.shape(recon) {
        return shape_err(
            "l1_reconstruction",
            format!("target {:?} vs recon {:?}", tape.shape(target), tape.shape(recon)),
        );
    }
    let diff = tape.sub(recon, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

/// Mean softmax cross-entropy of `[N, K]` logits against integer labels.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return shape_err("cross_entropy", format!("logits {s:?} with {} labels", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::Contract(format!("label {bad} out of range for {} classes", s[1])));
    }
    let lp = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(lp, labels)?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

/// Cross-entropy against per-row target distributions `[N, K]`.
pub fn soft_cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, targets: Tensor<T>) -> Result<Var> {
    if tape.shape(logits) != targets.shape() {
        return shape_err("soft_cross_entropy", format!("{:?} vs {:?}", tape.shape(logits), targets.shape()));
    }
    let n = targets.shape()[0];
    let lp = tape.log_softmax(logits, 1)?;
    let q = tape.input(targets);
    let prod = tape.mul(lp, q)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -T::one() / T::from_usize(n).unwrap()))
}

/// Cross-entropy of the 4-way rotation logits.
pub fn rotation_ce<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if tape.shape(logits).get(1) != Some(&ROTATION_CLASSES) {
        return shape_err("rotation_ce", format!("expected [N, 4] logits, got {:?}", tape.shape(logits)));
    }
    cross_entropy(tape, logits, labels)
}

/// Check that `pair` is a fixed-point-free involution on `0..n`.
pub fn validate_pairs(pair: &[usize], n: usize) -> Result<()> {
    if pair.len() != n {
        return Err(Error::Contract(format!("pair index has {} entries for {n} rows", pair.len())));
    }
    for (i, &j) in pair.iter().enumerate() {
        if j >= n || j == i || pair[j] != i {
            return Err(Error::Contract(format!("pair index is not a fixed-point-free involution at {i}")));
        }
    }
    Ok(())
}

/// NT-Xent over `[2N, d]` embeddings with positives given by `pair`.
///
/// Rows are l2-normalised, similarities divided by the temperature, and for
/// each anchor `i` the loss is `-log(exp(s_ip) / sum_{k != i} exp(s_ik))`.
/// Since cosine similarity is at most 1, every logit is shifted by `-1/tau`
/// first, which leaves the loss unchanged and keeps `exp` in range.
pub fn nt_xent<T: Real>(tape: &mut Tape<T>, embeddings: Var, pair: &[usize], cfg: ContrastiveConfig) -> Result<Var> {
    let s = tape.shape(embeddings).to_vec();
    if s.len() != 2 {
        return shape_err("nt_xent", format!("expected [2N, d], got {s:?}"));
    }
    let n = s[0];
    if n < 4 || n % 2 != 0 {
        return Err(Error::Contract(format!("nt_xent needs at least 2 positive pairs (4 rows), got {n}")));
    }
    if cfg.temperature <= 0.0 || !cfg.temperature.is_finite() {
        return Err(Error::Contract(format!("temperature must be positive, got {}", cfg.temperature)));
    }
    validate_pairs(pair, n)?;
    let floor = T::from_f64_lossy(NORM_FLOOR);
    for (i, row) in tape.value(embeddings).data().chunks(s[1]).enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm >= floor) {
            return Err(Error::Contract(format!("contrastive embedding {i} has norm {norm}")));
        }
    }
    let inv_tau = T::from_f64_lossy(1.0 / cfg.temperature);
    let z = tape.l2_normalize(embeddings, floor);
    let sim = tape.matmul_t(z, z, false, true)?;
    let logits = tape.scale(sim, inv_tau);
    let logits = tape.offset(logits, -inv_tau);
    let e = tape.exp(logits);
    let mut mask = Tensor::full(&[n, n], T::one());
    for i in 0..n {
        mask.data_mut()[i * n + i] = T::zero();
    }
    let mask = tape.input(mask);
    let e = tape.mul(e, mask)?;
    let denom = tape.sum_last(e)?;
    let log_denom = tape.log(denom);
    let pos = tape.pick(logits, pair)?;
    let per_anchor = tape.sub(log_denom, pos)?;
    Ok(tape.mean(per_anchor))
}

/// Loss vars of the enabled tasks.
#[derive(Clone, Copy, Debug, Default)]
pub struct TaskLosses {
    pub recons: Option<Var>,
    pub rotation: Option<Var>,
    pub contrastive: Option<Var>,
}

impl TaskLosses {
    fn slots(&self) -> [Option<Var>; 3] {
        [self.recons, self.rotation, self.contrastive]
    }
}

/// Values of one combined objective. Disabled tasks report 0 loss and 0 weight.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recons: f64,
    pub rotation: f64,
    pub contrastive: f64,
    pub total: f64,
    pub effective_weights: [f64; 3],
}

fn values<T: Real>(tape: &Tape<T>, losses: &TaskLosses) -> [f64; 3] {
    losses.slots().map(|v| v.map_or(0.0, |v| tape.scalar(v).as_f64()))
}

/// `alpha1 L_rec + alpha2 L_rot + alpha3 L_con`.
pub fn fixed_weighted_total<T: Real>(
    tape: &mut Tape<T>,
    losses: &TaskLosses,
    alphas: [f64; 3],
) -> Result<(Var, LossBreakdown)> {
    if alphas.iter().any(|&a| !(a >= 0.0)) {
        return Err(Error::Contract(format!("loss weights must be non-negative, got {alphas:?}")));
    }
    let mut total: Option<Var> = None;
    let mut weights = [0.0; 3];
    for (i, slot) in losses.slots().into_iter().enumerate() {
        let Some(l) = slot else { continue };
        weights[i] = alphas[i];
        let term = tape.scale(l, T::from_f64_lossy(alphas[i]));
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("no task losses enabled".into()))?;
    let [recons, rotation, contrastive] = values(tape, losses);
    let breakdown = LossBreakdown {
        recons,
        rotation,
        contrastive,
        total: tape.scalar(total).as_f64(),
        effective_weights: weights,
    };
    Ok((total, breakdown))
}

/// The three learnable log-variances `s1..s3`, initialised at zero.
#[derive(Clone, Debug)]
pub struct UncertaintyWeights<T> {
    store: ParamStore<T>,
    ids: [ParamId; 3],
}

impl<T: Real> Default for UncertaintyWeights<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> UncertaintyWeights<T> {
    pub const NAMES: [&'static str; 3] = ["uncertainty.s1", "uncertainty.s2", "uncertainty.s3"];

    pub fn new() -> Self {
        Self::from_values([0.0; 3])
    }

    pub fn from_values(s: [f64; 3]) -> Self {
        let mut store = ParamStore::new();
        let ids = [0, 1, 2].map(|i| {
            store
                .add(Self::NAMES[i], Tensor::scalar(T::from_f64_lossy(s[i])))
                .expect("distinct names")
        });
        Self { store, ids }
    }

    pub fn values(&self) -> [f64; 3] {
        self.ids.map(|id| self.store.get(id).value.item().as_f64())
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Multipliers `exp(-s1/2), exp(-s2), exp(-s3)`.
    pub fn effective_weights(&self) -> [f64; 3] {
        let s = self.values();
        [(-s[0] / 2.0).exp(), (-s[1]).exp(), (-s[2]).exp()]
    }

    pub fn cast<U: Real>(&self) -> UncertaintyWeights<U> {
        UncertaintyWeights {
            store: self.store.cast(),
            ids: self.ids,
        }
    }
}

/// Uncertainty-weighted objective. Disabled tasks contribute neither a loss
/// term nor a regulariser, so their `s_i` receives no gradient.
pub fn uncertainty_total<T: Real>(
    tape: &mut Tape<T>,
    losses: &TaskLosses,
    weights: &UncertaintyWeights<T>,
) -> Result<(Var, LossBreakdown)> {
    let mut total: Option<Var> = None;
    let mut eff = [0.0; 3];
    let all = weights.effective_weights();
    for (i, slot) in losses.slots().into_iter().enumerate() {
        let Some(l) = slot else { continue };
        if !tape.scalar(l).is_finite() {
            return Err(Error::Contract(format!("task loss {} is not finite", i + 1)));
        }
        let s = tape.param(&weights.store, weights.ids[i]);
        let factor = if i == 0 { -0.5 } else { -1.0 };
        let neg_s = tape.scale(s, T::from_f64_lossy(factor));
        let w = tape.exp(neg_s);
        let weighted = tape.mul_scalar(l, w)?;
        let reg = tape.scale(s, T::from_f64_lossy(0.5));
        let term = tape.add(weighted, reg)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        eff[i] = all[i];
    }
    let total = total.ok_or_else(|| Error::Contract("no task losses enabled".into()))?;
    let [recons, rotation, contrastive] = values(tape, losses);
    let breakdown = LossBreakdown {
        recons,
        rotation,
        contrastive,
        total: tape.scalar(total).as_f64(),
        effective_weights: eff,
    };
    Ok((total, breakdown))
}
