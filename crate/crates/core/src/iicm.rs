//! Integrated Information Coordination Module: RBF-kernel alignment between
//! the modality summaries, an adaptive median-heuristic bandwidth, a
//! ridge-regularized kernel score estimator, and the entropy-maximization
//! surrogate built on detached scores.
//!
//! Bandwidths and score estimates are computed outside the tape: no gradient
//! ever flows through them.

use nalgebra::{Cholesky, DMatrix};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum SteinError {
    #[error("score estimation needs at least 2 distinct samples")]
    DegenerateSamples,
    #[error("regularized kernel system is numerically singular")]
    SolveError,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SteinConfig {
    /// Ridge regularizer for the score solve (scaled by n).
    pub eta: f64,
    /// Weight of the entropy surrogate inside the coordination loss.
    pub gamma: f64,
    /// Overall coordination weight in the training objective.
    pub lambda: f64,
}

impl Default for SteinConfig {
    fn default() -> Self {
        SteinConfig { eta: 0.01, gamma: 0.1, lambda: 1e-3 }
    }
}

/// Kernel bandwidth `h` (the full denominator of the exponent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth(pub f64);

/// `exp(-||x - y||^2 / h)`.
pub fn rbf_kernel(x: &[f64], y: &[f64], h: Bandwidth) -> f64 {
    debug_assert!(h.0 > 0.0);
    let d2: f64 = x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum();
    (-d2 / h.0).exp()
}

/// Median heuristic: `h = median(pairwise squared distances) / ln(n + 1)`,
/// with `h = 1` when there is no spread to measure.
pub fn median_bandwidth(rows: &[Vec<f64>]) -> Bandwidth {
    let n = rows.len();
    if n <= 1 {
        return Bandwidth(1.0);
    }
    let mut d2s = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = rows[i].iter().zip(&rows[j]).map(|(&a, &b)| (a - b) * (a - b)).sum();
            d2s.push(d2);
        }
    }
    d2s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = if d2s.len() % 2 == 1 {
        d2s[d2s.len() / 2]
    } else {
        0.5 * (d2s[d2s.len() / 2 - 1] + d2s[d2s.len() / 2])
    };
    if med == 0.0 {
        return Bandwidth(1.0);
    }
    Bandwidth(med / ((n + 1) as f64).ln())
}

fn rows_of(tape: &Tape, z: TensorId) -> Vec<Vec<f64>> {
    let d = *tape.shape(z).last().unwrap();
    tape.data(z).chunks(d).map(|c| c.to_vec()).collect()
}

/// Batch alignment loss `1 - mean_i K(z_img[i], z_txt[i])` with the bandwidth
/// taken over the union of both batches. Returns the loss node and the raw
/// mean kernel value (the quantity the loss drives up).
pub fn alignment_loss(tape: &mut Tape, z_img: TensorId, z_txt: TensorId) -> Result<(TensorId, f64), TensorError> {
    let (si, st) = (tape.shape(z_img).to_vec(), tape.shape(z_txt).to_vec());
    if si != st || si.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "alignment_loss",
            details: format!("{si:?} vs {st:?}"),
        });
    }
    let mut union = rows_of(tape, z_img);
    union.extend(rows_of(tape, z_txt));
    let h = median_bandwidth(&union);

    let diff = tape.sub(z_img, z_txt)?;
    let sq = tape.mul(diff, diff)?;
    let row_d2 = tape.sum_axis(sq, 1)?;
    let scaled = tape.scale(row_d2, -1.0 / h.0)?;
    let k = tape.exp(scaled)?;
    let mean_k = tape.mean_all(k)?;
    let raw_ek = tape.scalar_value(mean_k);
    let neg = tape.scale(mean_k, -1.0)?;
    let loss = tape.add_scalar(neg, 1.0)?;
    Ok((loss, raw_ek))
}

/// Estimated scores `grad_z log q(z)` at the n sample points (n x d,
/// row-major). Constant with respect to the graph.
#[derive(Debug, Clone)]
pub struct ScoreEstimate {
    pub s_hat: Vec<f64>,
    pub n: usize,
    pub d: usize,
}

/// Ridge-regularized kernel Stein estimator at the sample points:
/// `S = -(K + eta n I)^{-1} G` with `G_i = sum_j d k(z_j, z_i) / d z_j`.
pub fn stein_score_estimate(rows: &[Vec<f64>], eta: f64) -> Result<ScoreEstimate, SteinError> {
    let n = rows.len();
    if n < 2 {
        return Err(SteinError::DegenerateSamples);
    }
    let d = rows[0].len();
    if rows.iter().all(|r| r == &rows[0]) {
        return Err(SteinError::DegenerateSamples);
    }
    let h = median_bandwidth(rows).0;

    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = rbf_kernel(&rows[i], &rows[j], Bandwidth(h));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    // G_i = sum_j -(2/h)(z_j - z_i) K_ji
    let mut g = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            let kij = k[(i, j)];
            for c in 0..d {
                g[(i, c)] += -(2.0 / h) * (rows[j][c] - rows[i][c]) * kij;
            }
        }
    }
    let mut reg = k;
    for i in 0..n {
        reg[(i, i)] += eta * n as f64;
    }
    let chol = Cholesky::new(reg).ok_or(SteinError::SolveError)?;
    let sol = chol.solve(&g);
    let mut s_hat = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            s_hat[i * d + c] = -sol[(i, c)];
        }
    }
    if !s_hat.iter().all(|v| v.is_finite()) {
        return Err(SteinError::SolveError);
    }
    Ok(ScoreEstimate { s_hat, n, d })
}

/// `L_ent = (1/n) sum_i <stopgrad(S_hat[i]), Z[i]>`: its parameter gradient
/// is the negated estimated entropy gradient, so minimizing it spreads the
/// batch out.
pub fn entropy_surrogate_loss(tape: &mut Tape, z: TensorId, est: &ScoreEstimate) -> Result<TensorId, TensorError> {
    let s = tape.shape(z);
    if s != [est.n, est.d] {
        return Err(TensorError::ShapeMismatch {
            op: "entropy_surrogate",
            details: format!("z {s:?} vs scores [{}, {}]", est.n, est.d),
        });
    }
    let scores = tape.constant(Tensor::new(vec![est.n, est.d], est.s_hat.clone()))?;
    let prod = tape.mul(z, scores)?;
    let total = tape.sum_all(prod)?;
    tape.scale(total, 1.0 / est.n as f64)
}

/// Everything the trainer wants back from one coordination-loss evaluation.
pub struct IicmOut {
    pub loss: TensorId,
    /// Raw mean kernel value E[K] before the 1 - x flip, for logging.
    pub raw_ek: f64,
    /// Mean of the two entropy surrogates, None when skipped as degenerate.
    pub l_ent: Option<f64>,
}

/// Full coordination loss: alignment plus `gamma * (ent_img + ent_txt) / 2`.
/// Degenerate batches silently drop the entropy term; the alignment term is
/// always computed.
pub fn iicm_loss(
    tape: &mut Tape,
    z_img: TensorId,
    z_txt: TensorId,
    cfg: &SteinConfig,
) -> Result<IicmOut, TensorError> {
    let (align, raw_ek) = alignment_loss(tape, z_img, z_txt)?;
    if cfg.gamma == 0.0 {
        return Ok(IicmOut { loss: align, raw_ek, l_ent: None });
    }
    let est_img = stein_score_estimate(&rows_of(tape, z_img), cfg.eta);
    let est_txt = stein_score_estimate(&rows_of(tape, z_txt), cfg.eta);
    match (est_img, est_txt) {
        (Ok(ei), Ok(et)) => {
            let li = entropy_surrogate_loss(tape, z_img, &ei)?;
            let lt = entropy_surrogate_loss(tape, z_txt, &et)?;
            let sum = tape.add(li, lt)?;
            let ent = tape.scale(sum, 0.5)?;
            let l_ent = tape.scalar_value(ent);
            let weighted = tape.scale(ent, cfg.gamma)?;
            let loss = tape.add(align, weighted)?;
            Ok(IicmOut { loss, raw_ek, l_ent: Some(l_ent) })
        }
        (Err(SteinError::DegenerateSamples), _) | (_, Err(SteinError::DegenerateSamples)) => {
            Ok(IicmOut { loss: align, raw_ek, l_ent: None })
        }
        (Err(SteinError::SolveError), _) | (_, Err(SteinError::SolveError)) => Err(TensorError::Numerical {
            op: "stein_score_estimate",
            details: "regularized kernel solve failed".into(),
        }),
    }
}
