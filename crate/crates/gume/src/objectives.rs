//! Loss terms: distribution alignment between modalities, behavior-modality
//! and user-interest InfoNCE terms, noise-contrastive regularization, BPR,
//! and the weighted total.

use std::sync::Arc;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{ForwardState, ParamVars};
use crate::error::{GumeError, Result};
use crate::tape::{Tape, Var};

/// Scalar values of every loss component for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub l_vt: f64,
    pub l_bm: f64,
    pub l_al: f64,
    pub l_c: f64,
    pub l_n_bar: f64,
    pub l_n_hat: f64,
    pub l_um: f64,
    pub l_bpr: f64,
    pub l_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("l_vt", self.l_vt),
            ("l_bm", self.l_bm),
            ("l_c", self.l_c),
            ("l_n_bar", self.l_n_bar),
            ("l_n_hat", self.l_n_hat),
            ("l_bpr", self.l_bpr),
            ("l_reg", self.l_reg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Loss hyper-parameters, with per-term temperature overrides resolved.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub tau_bm: f64,
    pub tau_c: f64,
    pub tau_noise: f64,
    /// L2-normalize embeddings inside InfoNCE (stabilization; the literal
    /// raw-dot-product form stays available for tests).
    pub normalize: bool,
}

/// One training batch: BPR triples plus the deduplicated user/item index
/// sets used as in-batch InfoNCE candidates.
#[derive(Debug, Clone)]
pub struct Batch {
    pub users: Vec<usize>,
    pub pos_items: Vec<usize>,
    pub neg_items: Vec<usize>,
    pub nce_users: Vec<usize>,
    pub nce_items: Vec<usize>,
}

impl Batch {
    pub fn from_triples(users: Vec<usize>, pos_items: Vec<usize>, neg_items: Vec<usize>) -> Batch {
        let mut nce_users = users.clone();
        nce_users.sort_unstable();
        nce_users.dedup();
        let mut nce_items: Vec<usize> = pos_items.iter().chain(neg_items.iter()).copied().collect();
        nce_items.sort_unstable();
        nce_items.dedup();
        Batch {
            users,
            pos_items,
            neg_items,
            nce_users,
            nce_items,
        }
    }
}

/// Distribution alignment between the two modalities' explicit features:
/// mean over dimensions of |mu_v - mu_t| + |sigma_v - sigma_t|, with the
/// population standard-deviation convention.
pub fn loss_vt(tape: &mut Tape, explicit_v: Var, explicit_t: Var) -> Result<Var> {
    if tape.value(explicit_v).nrows() < 2 || tape.value(explicit_t).nrows() < 2 {
        return Err(GumeError::Validation(
            "loss_vt needs at least 2 rows for a standard deviation".into(),
        ));
    }
    let stats = |tape: &mut Tape, x: Var| {
        let mu = tape.col_mean(x);
        let neg_mu = tape.scale(mu, -1.0);
        let centered = tape.add_row_broadcast(x, neg_mu);
        let sq = tape.mul(centered, centered);
        let var = tape.col_mean(sq);
        let sd = tape.sqrt(var);
        (mu, sd)
    };
    let (mu_v, sd_v) = stats(tape, explicit_v);
    let (mu_t, sd_t) = stats(tape, explicit_t);
    let d_mu = tape.sub(mu_v, mu_t);
    let d_mu = tape.abs(d_mu);
    let d_sd = tape.sub(sd_v, sd_t);
    let d_sd = tape.abs(d_sd);
    let both = tape.add(d_mu, d_sd);
    Ok(tape.mean_all(both))
}

/// InfoNCE: mean over anchors of `-log(exp(a.p / tau) / sum_c exp(a.c / tau))`.
/// Candidates must contain every positive; the in-batch callers pass the
/// positive matrix itself as the candidate set.
pub fn info_nce(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    candidates: Var,
    tau: f64,
    normalize: bool,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(GumeError::Config(format!("temperature must be > 0, got {tau}")));
    }
    if tape.value(anchors).nrows() == 0 {
        return Err(GumeError::Validation("info_nce on an empty batch".into()));
    }
    let (a, p, c) = if normalize {
        let a = tape.l2_normalize_rows(anchors);
        let p = tape.l2_normalize_rows(positives);
        let c = if candidates == positives {
            p
        } else {
            tape.l2_normalize_rows(candidates)
        };
        (a, p, c)
    } else {
        (anchors, positives, candidates)
    };
    let pos = tape.row_dot(a, p);
    let pos = tape.scale(pos, 1.0 / tau);
    let sims = tape.matmul_nt(a, c);
    let sims = tape.scale(sims, 1.0 / tau);
    let lse = tape.log_sum_exp_rows(sims);
    let per_anchor = tape.sub(lse, pos);
    Ok(tape.mean_all(per_anchor))
}

/// Behavior-modality alignment: user-side plus item-side InfoNCE between the
/// propagated ID embeddings and the enhanced explicit features.
#[allow(clippy::too_many_arguments)]
pub fn loss_bm(
    tape: &mut Tape,
    extended_id: Var,
    enhanced: Var,
    n_users: usize,
    batch_users: &[usize],
    batch_items: &[usize],
    tau: f64,
    normalize: bool,
) -> Result<Var> {
    if batch_users.is_empty() || batch_items.is_empty() {
        return Err(GumeError::Validation("loss_bm on an empty batch".into()));
    }
    let user_rows = Arc::new(batch_users.to_vec());
    let item_rows = Arc::new(batch_items.iter().map(|&i| n_users + i).collect::<Vec<_>>());

    let a_u = tape.gather_rows(extended_id, Arc::clone(&user_rows));
    let p_u = tape.gather_rows(enhanced, user_rows);
    let user_term = info_nce(tape, a_u, p_u, p_u, tau, normalize)?;

    let a_i = tape.gather_rows(extended_id, Arc::clone(&item_rows));
    let p_i = tape.gather_rows(enhanced, item_rows);
    let item_term = info_nce(tape, a_i, p_i, p_i, tau, normalize)?;

    Ok(tape.add(user_term, item_term))
}

/// User-interest mutual information: anchors are the enhanced explicit user
/// features, positives the fused extended interest features.
pub fn loss_c(
    tape: &mut Tape,
    enhanced: Var,
    extended_fused: Var,
    batch_users: &[usize],
    tau: f64,
    normalize: bool,
) -> Result<Var> {
    if batch_users.is_empty() {
        return Err(GumeError::Validation("loss_c on an empty batch".into()));
    }
    let rows = Arc::new(batch_users.to_vec());
    let a = tape.gather_rows(enhanced, Arc::clone(&rows));
    let p = tape.gather_rows(extended_fused, rows);
    info_nce(tape, a, p, p, tau, normalize)
}

/// Two independently perturbed views `x + U(0,1)` noise, deterministic for a
/// fixed RNG state.
pub fn perturb(tape: &mut Tape, x: Var, rng: &mut ChaCha20Rng) -> (Var, Var) {
    let dim = tape.value(x).dim();
    let mut draw = |rng: &mut ChaCha20Rng| Array2::from_shape_fn(dim, |_| rng.gen::<f64>());
    let d1 = draw(rng);
    let d2 = draw(rng);
    let n1 = tape.constant(d1);
    let n2 = tape.constant(d2);
    (tape.add(x, n1), tape.add(x, n2))
}

/// Noise-contrastive view agreement on one feature matrix restricted to the
/// batch users.
pub fn loss_noise(
    tape: &mut Tape,
    features: Var,
    batch_users: &[usize],
    tau: f64,
    normalize: bool,
    rng: &mut ChaCha20Rng,
) -> Result<Var> {
    if batch_users.is_empty() {
        return Err(GumeError::Validation("loss_noise on an empty batch".into()));
    }
    let rows = Arc::new(batch_users.to_vec());
    let x = tape.gather_rows(features, rows);
    let (x1, x2) = perturb(tape, x, rng);
    info_nce(tape, x1, x2, x2, tau, normalize)
}

/// Pairwise ranking loss over sampled triples: mean of `-log sigmoid(pos - neg)`
/// in the numerically stable softplus form. Empty triple lists give 0.
pub fn loss_bpr(tape: &mut Tape, pos_scores: Var, neg_scores: Var) -> Var {
    if tape.value(pos_scores).nrows() == 0 {
        return tape.constant(Array2::zeros((1, 1)));
    }
    let diff = tape.sub(neg_scores, pos_scores);
    let sp = tape.softplus(diff);
    tape.mean_all(sp)
}

/// Squared-entry sum over all parameter tensors.
pub fn l2_penalty(tape: &mut Tape, params: &ParamVars) -> Var {
    let mut acc: Option<Var> = None;
    for &v in &params.all {
        let sq = tape.mul(v, v);
        let s = tape.sum_all(sq);
        acc = Some(match acc {
            None => s,
            Some(prev) => tape.add(prev, s),
        });
    }
    acc.expect("parameters present")
}

/// The full objective on one batch. Components with zero weight are skipped
/// (reported as 0) so ablations drop out of both the value and the gradient.
pub fn total_loss(
    tape: &mut Tape,
    fwd: &ForwardState,
    params: &ParamVars,
    weights: &LossWeights,
    batch: &Batch,
    noise_rng: &mut ChaCha20Rng,
) -> Result<(Var, LossBreakdown)> {
    let n_users = fwd.n_users;
    let zero = tape.constant(Array2::zeros((1, 1)));

    // BPR over the prediction embeddings e = extended_id + enhanced.
    let e_all = tape.add(fwd.extended_id, fwd.enhanced);
    let (bpr, bpr_val) = if batch.users.is_empty() {
        (zero, 0.0)
    } else {
        let u_rows = Arc::new(batch.users.clone());
        let pos_rows = Arc::new(batch.pos_items.iter().map(|&i| n_users + i).collect::<Vec<_>>());
        let neg_rows = Arc::new(batch.neg_items.iter().map(|&i| n_users + i).collect::<Vec<_>>());
        let e_u = tape.gather_rows(e_all, u_rows);
        let e_pos = tape.gather_rows(e_all, pos_rows);
        let e_neg = tape.gather_rows(e_all, neg_rows);
        let y_pos = tape.row_dot(e_u, e_pos);
        let y_neg = tape.row_dot(e_u, e_neg);
        let l = loss_bpr(tape, y_pos, y_neg);
        (l, tape.scalar(l))
    };

    let mut total = bpr;
    let mut breakdown = LossBreakdown {
        l_bpr: bpr_val,
        ..LossBreakdown::default()
    };

    // Alignment: alpha * L_VT + beta * L_BM.
    let mut al_terms: Vec<Var> = Vec::new();
    if weights.alpha != 0.0 && fwd.per_modality.len() >= 2 {
        let vt = loss_vt(
            tape,
            fwd.per_modality[0].explicit,
            fwd.per_modality[1].explicit,
        )?;
        breakdown.l_vt = tape.scalar(vt);
        al_terms.push(tape.scale(vt, weights.alpha));
    }
    if weights.beta != 0.0 {
        let bm = loss_bm(
            tape,
            fwd.extended_id,
            fwd.enhanced,
            n_users,
            &batch.nce_users,
            &batch.nce_items,
            weights.tau_bm,
            weights.normalize,
        )?;
        breakdown.l_bm = tape.scalar(bm);
        al_terms.push(tape.scale(bm, weights.beta));
    }
    for term in al_terms {
        breakdown.l_al += tape.scalar(term);
        total = tape.add(total, term);
    }

    // User modality enhancement: gamma * (L_C + L_N' + L_N'').
    if weights.gamma != 0.0 {
        let c = loss_c(
            tape,
            fwd.enhanced,
            fwd.extended_fused,
            &batch.nce_users,
            weights.tau_c,
            weights.normalize,
        )?;
        let n_bar = loss_noise(
            tape,
            fwd.enhanced,
            &batch.nce_users,
            weights.tau_noise,
            weights.normalize,
            noise_rng,
        )?;
        let n_hat = loss_noise(
            tape,
            fwd.extended_fused,
            &batch.nce_users,
            weights.tau_noise,
            weights.normalize,
            noise_rng,
        )?;
        breakdown.l_c = tape.scalar(c);
        breakdown.l_n_bar = tape.scalar(n_bar);
        breakdown.l_n_hat = tape.scalar(n_hat);
        let um = tape.add(c, n_bar);
        let um = tape.add(um, n_hat);
        let um = tape.scale(um, weights.gamma);
        breakdown.l_um = tape.scalar(um);
        total = tape.add(total, um);
    }

    if weights.delta != 0.0 {
        let reg = l2_penalty(tape, params);
        let reg = tape.scale(reg, weights.delta);
        breakdown.l_reg = tape.scalar(reg);
        total = tape.add(total, reg);
    }

    breakdown.total = tape.scalar(total);
    Ok((total, breakdown))
}
