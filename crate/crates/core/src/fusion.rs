//! Fusion of the ID-stream and cross-modal summaries, catalog scoring
//! against the tied embedding table, and the recommendation losses.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::params::{self, Binding, Mode, ParamId, ParamSet};
use crate::tensor::{Parameter, Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Bpr,
}

/// `concat(z_id, o_exp) -> affine -> gelu -> dropout -> affine`, landing back
/// on the embedding width so dot-product scoring is defined.
#[derive(Debug, Clone)]
pub struct FusionHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    d_id: usize,
    site: u64,
}

impl FusionHead {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        d_id: usize,
        d_hidden: usize,
        site: u64,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let d_in = d_id + d_hidden;
        FusionHead {
            w1: set.add(Parameter::new(
                format!("{prefix}.w1"),
                params::normal(rng, &[d_in, d_id], (1.0 / d_in as f64).sqrt()),
            )),
            b1: set.add(Parameter::new(format!("{prefix}.b1"), params::zeros(&[d_id]))),
            w2: set.add(Parameter::new(
                format!("{prefix}.w2"),
                params::normal(rng, &[d_id, d_id], (1.0 / d_id as f64).sqrt()),
            )),
            b2: set.add(Parameter::new(format!("{prefix}.b2"), params::zeros(&[d_id]))),
            d_id,
            site,
        }
    }

    pub fn fuse(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        z_id_last: TensorId,
        o_exp_last: TensorId,
        mode: Mode,
    ) -> Result<TensorId, TensorError> {
        if tape.shape(z_id_last)[0] != tape.shape(o_exp_last)[0] {
            return Err(TensorError::ShapeMismatch {
                op: "fuse",
                details: format!(
                    "batch sizes differ: {:?} vs {:?}",
                    tape.shape(z_id_last),
                    tape.shape(o_exp_last)
                ),
            });
        }
        let cat = tape.concat_last(&[z_id_last, o_exp_last])?;
        let h = tape.matmul(cat, bind.id(self.w1))?;
        let hb = tape.add(h, bind.id(self.b1))?;
        let act = tape.gelu(hb)?;
        let dropped = match mode.dropout_key(self.site) {
            Some((p, key)) => tape.dropout(act, p, key)?,
            None => act,
        };
        let out = tape.matmul(dropped, bind.id(self.w2))?;
        tape.add(out, bind.id(self.b2))
    }

    pub fn d_id(&self) -> usize {
        self.d_id
    }
}

/// `logits = s @ table^T` with the padding column forced far below any real
/// score so item 0 never ranks.
pub fn score_items(tape: &mut Tape, s: TensorId, table: TensorId) -> Result<TensorId, TensorError> {
    let n_rows = tape.shape(table)[0];
    let bsz = tape.shape(s)[0];
    let table_t = tape.transpose2(table)?;
    let logits = tape.matmul(s, table_t)?;
    let mut mask = vec![0.0; bsz * n_rows];
    for b in 0..bsz {
        mask[b * n_rows] = -1e30;
    }
    let mask_id = tape.constant(Tensor::new(vec![bsz, n_rows], mask))?;
    tape.add(logits, mask_id)
}

/// Mean cross entropy over the catalog; the padding column contributes
/// nothing to the normalizer because its logit is effectively -inf.
pub fn rec_loss_ce(tape: &mut Tape, logits: TensorId, targets: &[u32]) -> Result<TensorId, TensorError> {
    let classes = tape.shape(logits)[1];
    for &t in targets {
        if t == 0 || t as usize >= classes {
            return Err(TensorError::IndexOutOfRange {
                op: "rec_loss_ce",
                index: t as usize,
                limit: classes,
            });
        }
    }
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    tape.cross_entropy(logits, &idx)
}

/// Uniform negatives from `1..=n_items`, excluding the paired target.
pub fn sample_negatives(targets: &[u32], n_items: usize, n_neg: usize, rng: &mut ChaCha20Rng) -> Vec<u32> {
    assert!(n_items >= 2, "need a catalog to sample negatives from");
    let mut negs = Vec::with_capacity(targets.len() * n_neg);
    for &t in targets {
        for _ in 0..n_neg {
            loop {
                let cand = rng.gen_range(1..=n_items as u32);
                if cand != t {
                    negs.push(cand);
                    break;
                }
            }
        }
    }
    negs
}

/// Pairwise ranking loss: mean of `-ln sigmoid(logit_pos - logit_neg)`,
/// computed stably as `softplus(neg - pos)`. With `k = negatives.len() /
/// targets.len()` negatives per positive, every pair contributes equally.
pub fn rec_loss_bpr(
    tape: &mut Tape,
    logits: TensorId,
    targets: &[u32],
    negatives: &[u32],
) -> Result<TensorId, TensorError> {
    if targets.is_empty() || negatives.len() % targets.len() != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "rec_loss_bpr",
            details: format!("{} negatives for {} targets", negatives.len(), targets.len()),
        });
    }
    let n_neg = negatives.len() / targets.len();
    let rows: Vec<usize> = (0..targets.len())
        .flat_map(|b| std::iter::repeat(b).take(n_neg))
        .collect();
    let pos_cols: Vec<usize> = targets
        .iter()
        .flat_map(|&t| std::iter::repeat(t as usize).take(n_neg))
        .collect();
    let neg_cols: Vec<usize> = negatives.iter().map(|&t| t as usize).collect();
    let pos = tape.pick(logits, &rows, &pos_cols)?;
    let neg = tape.pick(logits, &rows, &neg_cols)?;
    let margin = tape.sub(neg, pos)?;
    let losses = tape.softplus(margin)?;
    tape.mean_all(losses)
}

/// `L = l_rec + lambda * l_iicm`.
pub fn total_loss(tape: &mut Tape, l_rec: TensorId, l_iicm: TensorId, lambda: f64) -> Result<TensorId, TensorError> {
    let weighted = tape.scale(l_iicm, lambda)?;
    tape.add(l_rec, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn head(d_id: usize, d_hidden: usize, seed: u64) -> (ParamSet, FusionHead) {
        let mut set = ParamSet::new();
        let f = FusionHead::init(&mut set, "fuse", d_id, d_hidden, 200, &mut rng(seed));
        (set, f)
    }

    #[test]
    fn fuse_shapes_and_zero_case() {
        let (set, f) = head(3, 5, 1);
        let mut tape = Tape::new();
        let bind = set.bind(&mut tape).unwrap();
        let z = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let o = tape.leaf(Tensor::zeros(vec![2, 5])).unwrap();
        let s = f.fuse(&mut tape, &bind, z, o, Mode::Eval).unwrap();
        assert_eq!(tape.shape(s), &[2, 3]);
        assert!(tape.data(s).iter().all(|&v| v == 0.0), "zero in, zero biases, zero out");
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_dropout_differs() {
        let (set, f) = head(4, 4, 2);
        let mut r = rng(3);
        let zt = Tensor::new(vec![2, 4], (0..8).map(|_| r.gen_range(-1.0..1.0)).collect());
        let ot = Tensor::new(vec![2, 4], (0..8).map(|_| r.gen_range(-1.0..1.0)).collect());
        let run = |mode: Mode| {
            let mut tape = Tape::new();
            let bind = set.bind(&mut tape).unwrap();
            let z = tape.leaf(zt.clone()).unwrap();
            let o = tape.leaf(ot.clone()).unwrap();
            let s = f.fuse(&mut tape, &bind, z, o, mode).unwrap();
            tape.data(s).to_vec()
        };
        assert_eq!(run(Mode::Eval), run(Mode::Eval));
        let trained = run(Mode::Train { seed: 1, step: 0, dropout: 0.5 });
        assert_ne!(trained, run(Mode::Eval), "dropout must be active in train mode");
        assert_eq!(trained, run(Mode::Train { seed: 1, step: 0, dropout: 0.5 }));
    }

    #[test]
    fn scoring_geometry_and_padding_column() {
        let mut tape = Tape::new();
        // orthonormal 3-item table (plus padding row 0)
        let table = tape
            .leaf(Tensor::new(
                vec![4, 3],
                vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            ))
            .unwrap();
        let s = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0])).unwrap();
        let logits = score_items(&mut tape, s, table).unwrap();
        assert_eq!(tape.shape(logits), &[1, 4]);
        let row = tape.data(logits);
        assert!(row[0] <= -1e29, "padding column pinned");
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 2, "s equals item 2's embedding row");
    }

    #[test]
    fn ce_uniform_logits_gives_ln_n() {
        let mut tape = Tape::new();
        let n = 6;
        let mut row = vec![0.0; n + 1];
        row[0] = -1e30;
        let logits = tape.leaf(Tensor::new(vec![1, n + 1], row).with_grad()).unwrap();
        let loss = rec_loss_ce(&mut tape, logits, &[3]).unwrap();
        assert!((tape.scalar_value(loss) - (n as f64).ln()).abs() < 1e-12);
        assert!(tape.scalar_value(loss) >= 0.0);
    }

    #[test]
    fn ce_rejects_padding_target() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 4])).unwrap();
        assert!(matches!(
            rec_loss_ce(&mut tape, logits, &[0]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            rec_loss_ce(&mut tape, logits, &[4]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn confident_correct_ce_approaches_zero() {
        let mut tape = Tape::new();
        let logits = tape
            .leaf(Tensor::new(vec![1, 3], vec![-1e30, 40.0, 0.0]))
            .unwrap();
        let loss = rec_loss_ce(&mut tape, logits, &[1]).unwrap();
        assert!(tape.scalar_value(loss) < 1e-12);
    }

    #[test]
    fn bpr_closed_forms() {
        let mut tape = Tape::new();
        // pos == neg -> ln 2
        let logits = tape
            .leaf(Tensor::new(vec![1, 3], vec![0.0, 1.5, 1.5]).with_grad())
            .unwrap();
        let loss = rec_loss_bpr(&mut tape, logits, &[1], &[2]).unwrap();
        assert!((tape.scalar_value(loss) - 2.0f64.ln()).abs() < 1e-15);
        // pos >> neg -> 0
        let easy = tape
            .leaf(Tensor::new(vec![1, 3], vec![0.0, 50.0, -50.0]))
            .unwrap();
        let l2 = rec_loss_bpr(&mut tape, easy, &[1], &[2]).unwrap();
        assert!(tape.scalar_value(l2) < 1e-12);
        // sigma(m) + sigma(-m) = 1: losses at swapped pos/neg satisfy
        // exp(-l1) + exp(-l2) = 1
        let m = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, 2.0, 0.7])).unwrap();
        let l_fwd = rec_loss_bpr(&mut tape, m, &[1], &[2]).unwrap();
        let l_swap = rec_loss_bpr(&mut tape, m, &[2], &[1]).unwrap();
        let total = (-tape.scalar_value(l_fwd)).exp() + (-tape.scalar_value(l_swap)).exp();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negative_sampling_avoids_the_target() {
        let mut r = rng(5);
        let targets: Vec<u32> = vec![1, 2, 3, 4];
        let negs = sample_negatives(&targets, 5, 3, &mut r);
        assert_eq!(negs.len(), 12);
        for (i, &n) in negs.iter().enumerate() {
            assert_ne!(n, targets[i / 3]);
            assert!((1..=5).contains(&n));
        }
    }

    #[test]
    fn total_loss_is_linear_in_lambda() {
        let mut tape = Tape::new();
        let l_rec = tape.leaf(Tensor::scalar(1.3)).unwrap();
        let l_iicm = tape.leaf(Tensor::scalar(0.4)).unwrap();
        let at = |tape: &mut Tape, lam: f64| {
            let t = total_loss(tape, l_rec, l_iicm, lam).unwrap();
            tape.scalar_value(t)
        };
        let t0 = at(&mut tape, 0.0);
        assert_eq!(t0, 1.3, "lambda 0 is the pure recommendation loss");
        let t1 = at(&mut tape, 1e-3);
        let t2 = at(&mut tape, 2e-3);
        assert!(((t2 - t0) - 2.0 * (t1 - t0)).abs() < 1e-15);
    }
}
