//! Losses and targets for conservative offline training: the CQL
//! regularizer, maskable QRDQN, discrete maskable SAC, behavioural cloning,
//! and hard target synchronization.
//!
//! Per-state action values are `B × J` matrices (one row per state, one
//! column per job) with a row-major `B·J` availability mask. Masked entries
//! never contribute to a loss or receive gradient.

use offld_autodiff::{ParamStore, Scalar, Tape, Tensor, Var};

use crate::dataset::RewardMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub alpha_cql: f64,
    pub gamma: f64,
    pub n_quantiles: usize,
    /// Huber threshold of the quantile loss.
    pub kappa: f64,
    /// Target entropy as a fraction of the maximum entropy `log |A(s)|`.
    pub c_h: f64,
    pub target_update_every: u64,
    pub reward_mode: RewardMode,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            alpha_cql: 1.0,
            gamma: 1.0,
            n_quantiles: 32,
            kappa: 1.0,
            c_h: 0.98,
            target_update_every: 2500,
            reward_mode: RewardMode::Normalized,
        }
    }
}

impl AgentConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.n_quantiles == 0 {
            return Err(Error::Config("n_quantiles must be at least 1".into()));
        }
        if !(self.c_h > 0.0 && self.c_h <= 1.0) {
            return Err(Error::Config(format!("c_h {} outside (0, 1]", self.c_h)));
        }
        if !(self.kappa > 0.0) || !(self.alpha_cql >= 0.0) {
            return Err(Error::Config(
                "kappa must be positive and alpha_cql non-negative".into(),
            ));
        }
        if self.target_update_every == 0 {
            return Err(Error::Config("target_update_every must be at least 1".into()));
        }
        Ok(())
    }
}

fn c<T: Scalar>(x: f64) -> T {
    T::from_f64_lossy(x)
}

/// Checks every dataset action is an available column of its row.
pub fn check_actions(mask: &[bool], num_actions: usize, actions: &[usize]) -> Result<()> {
    if mask.len() != actions.len() * num_actions {
        return Err(Error::Dimension(format!(
            "mask of {} for {} states of {num_actions} actions",
            mask.len(),
            actions.len()
        )));
    }
    for (i, &a) in actions.iter().enumerate() {
        if a >= num_actions || !mask[i * num_actions + a] {
            return Err(Error::Data(format!("dataset action {a} of state {i} is masked")));
        }
    }
    Ok(())
}

/// `alpha · mean_s [ logsumexp_{a ∈ A(s)} Q(s, a) − Q(s, a_data) ]`.
pub fn cql_term<T: Scalar>(tape: &mut Tape<T>, q: Var, mask: &[bool], actions: &[usize], alpha: f64) -> Result<Var> {
    check_actions(mask, tape.shape(q).1, actions)?;
    let lse = tape.logsumexp_masked(q, mask)?;
    let qa = tape.pick_cols(q, actions)?;
    let gap = tape.sub(lse, qa)?;
    let m = tape.mean(gap)?;
    Ok(tape.scale(m, c(alpha)))
}

/// `τ̂_i = (2i − 1) / 2N` for `i = 1..=N`.
pub fn quantile_midpoints(n: usize) -> Vec<f64> {
    (1..=n).map(|i| (2 * i - 1) as f64 / (2 * n) as f64).collect()
}

/// Distributional target for one transition. `next_quantiles` is
/// `J × N` row-major; the greedy next action maximizes the quantile mean
/// over available actions only.
pub fn qrdqn_target<T: Scalar>(
    reward: T,
    next_quantiles: &[T],
    n: usize,
    next_mask: &[bool],
    terminal: bool,
    gamma: T,
) -> Result<Vec<T>> {
    if terminal {
        return Ok(vec![reward; n]);
    }
    if next_quantiles.len() != next_mask.len() * n {
        return Err(Error::Dimension(format!(
            "{} quantiles for {} actions of {n}",
            next_quantiles.len(),
            next_mask.len()
        )));
    }
    let means: Vec<T> = next_quantiles
        .chunks(n)
        .map(|row| row.iter().copied().sum::<T>() / T::from_usize(n).unwrap())
        .collect();
    let a = crate::model::masked_argmax(&means, next_mask)
        .ok_or_else(|| Error::Data("non-terminal next state without an available action".into()))?;
    Ok(next_quantiles[a * n..(a + 1) * n]
        .iter()
        .map(|&d| reward + gamma * d)
        .collect())
}

/// Quantile Huber loss `Σ_i mean_j |τ̂_i − 1{u_ij < 0}| L_κ(u_ij)` with
/// `u_ij = target_j − pred_i`, averaged over the batch. `pred` is `B × N`.
pub fn qrdqn_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, kappa: f64) -> Result<Var> {
    let (b, n) = tape.shape(pred);
    if target.shape() != (b, n) {
        return Err(Error::Dimension(format!(
            "target {:?} for predictions {b}x{n}",
            target.shape()
        )));
    }
    // column i*n + j holds pred_i / target_j
    let rep: Vec<usize> = (0..n * n).map(|k| k / n).collect();
    let pred_rep = tape.gather_cols(pred, &rep)?;
    let mut tiled = Vec::with_capacity(b * n * n);
    for s in 0..b {
        for _ in 0..n {
            tiled.extend_from_slice(target.row(s));
        }
    }
    let tiled = tape.constant(Tensor::new(b, n * n, tiled)?);
    let u = tape.sub(tiled, pred_rep)?;
    let tau = quantile_midpoints(n);
    let weights: Vec<T> = tape
        .value(u)
        .data()
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let t = tau[(k % (n * n)) / n];
            c::<T>((t - if x < T::zero() { 1.0 } else { 0.0 }).abs())
        })
        .collect();
    let w = tape.constant(Tensor::new(b, n * n, weights)?);
    let h = tape.huber(u, c(kappa));
    let wh = tape.mul(w, h)?;
    let s = tape.sum(wh);
    Ok(tape.scale(s, T::one() / T::from_usize(b * n).unwrap()))
}

/// `mean_s (pred_s − target_s)²` for a `B × 1` prediction.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &[T]) -> Result<Var> {
    let (b, _) = tape.shape(pred);
    let t = tape.constant(Tensor::new(b, 1, target.to_vec())?);
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq)?)
}

/// Critic loss of the offline objective: `cql + ½·td`.
pub fn total_q_loss<T: Scalar>(tape: &mut Tape<T>, cql: Var, td: Var) -> Result<Var> {
    let half = tape.scale(td, c(0.5));
    Ok(tape.add(cql, half)?)
}

/// Soft target for one transition:
/// `r + γ Σ_a π(a|s') min(Q1', Q2')(s', a)` over available next actions.
pub fn sac_q_target<T: Scalar>(
    reward: T,
    next_probs: &[T],
    next_q1: &[T],
    next_q2: &[T],
    next_mask: &[bool],
    terminal: bool,
    gamma: T,
) -> T {
    if terminal {
        return reward;
    }
    let v: T = next_probs
        .iter()
        .zip(next_q1.iter().zip(next_q2))
        .zip(next_mask)
        .filter(|(_, &m)| m)
        .map(|((&p, (&a, &b)), _)| p * a.min(b))
        .sum();
    reward + gamma * v
}

/// Actor loss `mean_s π(s)ᵀ (α log π(s) − min(Q1, Q2)(s))` from policy
/// logits (`B × J`). The critics and `alpha` are constants here.
pub fn sac_policy_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    mask: &[bool],
    q1: &Tensor<T>,
    q2: &Tensor<T>,
    alpha: T,
) -> Result<Var> {
    let (b, j) = tape.shape(logits);
    if q1.shape() != (b, j) || q2.shape() != (b, j) {
        return Err(Error::Dimension(format!("critics {:?} for logits {b}x{j}", q1.shape())));
    }
    let probs = tape.softmax_masked(logits, mask)?;
    let logp = tape.log_softmax_masked(logits, mask)?;
    let minq: Vec<T> = q1
        .data()
        .iter()
        .zip(q2.data())
        .zip(mask)
        .map(|((&a, &b), &m)| if m { a.min(b) } else { T::zero() })
        .collect();
    let minq = tape.constant(Tensor::new(b, j, minq)?);
    let scaled = tape.scale(logp, alpha);
    let inner = tape.sub(scaled, minq)?;
    let prod = tape.mul(probs, inner)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, T::one() / T::from_usize(b).unwrap()))
}

/// Entropy of each row of a masked distribution.
pub fn masked_entropy<T: Scalar>(probs: &Tensor<T>, mask: &[bool]) -> Vec<T> {
    let j = probs.cols();
    (0..probs.rows())
        .map(|i| {
            -probs
                .row(i)
                .iter()
                .zip(&mask[i * j..(i + 1) * j])
                .filter(|(&p, &m)| m && p > T::zero())
                .map(|(&p, _)| p * p.ln())
                .sum::<T>()
        })
        .collect()
}

/// Temperature loss `α · mean_s [H(π(s)) − c_H log |A(s)|]` with
/// `α = exp(log_alpha)`. Descending it lowers `α` while the policy is more
/// random than the size-dependent target and raises it otherwise.
pub fn temperature_loss<T: Scalar>(
    tape: &mut Tape<T>,
    log_alpha: Var,
    probs: &Tensor<T>,
    mask: &[bool],
    c_h: f64,
) -> Result<Var> {
    let (b, j) = probs.shape();
    if mask.len() != b * j {
        return Err(Error::Dimension(format!("mask of {} for {b}x{j}", mask.len())));
    }
    let h = masked_entropy(probs, mask);
    let mut gap = T::zero();
    for (i, &hi) in h.iter().enumerate() {
        let size = mask[i * j..(i + 1) * j].iter().filter(|&&m| m).count();
        if size == 0 {
            return Err(Error::Data(format!("state {i} has no available action")));
        }
        gap += hi - c::<T>(c_h) * T::from_usize(size).unwrap().ln();
    }
    let alpha = tape.exp(log_alpha);
    Ok(tape.scale(alpha, gap / T::from_usize(b).unwrap()))
}

/// Masked cross-entropy of the dataset actions.
pub fn bc_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, mask: &[bool], actions: &[usize]) -> Result<Var> {
    check_actions(mask, tape.shape(logits).1, actions)?;
    let logp = tape.log_softmax_masked(logits, mask)?;
    let picked = tape.pick_cols(logp, actions)?;
    let m = tape.mean(picked)?;
    Ok(tape.neg(m))
}

/// Hard copy of `online` into `target` when `step` is a multiple of
/// `every`. Returns whether a copy happened.
pub fn sync_target<T: Scalar>(
    online: &ParamStore<T>,
    target: &mut ParamStore<T>,
    step: u64,
    every: u64,
) -> Result<bool> {
    if !online.same_layout(target) {
        return Err(Error::Compatibility(
            "target network layout differs from the online network".into(),
        ));
    }
    if every == 0 || !step.is_multiple_of(every) {
        return Ok(false);
    }
    target.copy_values_from(online)?;
    Ok(true)
}
