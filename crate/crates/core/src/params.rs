//! Named parameter registry and its per-step binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::tensor::{GradStore, Parameter, Tape, Tensor, TensorError, TensorId};

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of uniquely named parameters. Registration order is the
/// canonical order for clipping, checkpoints, and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, p: Parameter) -> ParamId {
        assert!(
            !self.index.contains_key(&p.name),
            "duplicate parameter name {}",
            p.name
        );
        self.index.insert(p.name.clone(), self.params.len());
        self.params.push(p);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Insert every parameter value into the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Binding, TensorError> {
        let ids = self
            .params
            .iter()
            .map(|p| tape.param(&p.value))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Binding { ids })
    }

    /// Pull gradients for every bound parameter out of a backward pass.
    /// Frozen padding rows are forced back to zero.
    pub fn accumulate_grads(&mut self, binding: &Binding, store: &GradStore) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some(g) = store.get(binding.ids[i]) {
                for (dst, src) in p.grad.data.iter_mut().zip(g) {
                    *dst += src;
                }
            }
            if p.pad_row_frozen {
                let row = p.row_len();
                p.grad.data[..row].iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }
}

/// TensorIds of one step's bound parameters, indexed by [`ParamId`].
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

/// Forward-pass mode: training enables dropout keyed by (seed, step, site).
#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Train { seed: u64, step: u64, dropout: f64 },
    Eval,
}

impl Mode {
    pub fn dropout_key(&self, site: u64) -> Option<(f64, u64)> {
        match *self {
            Mode::Train { seed, step, dropout } if dropout > 0.0 => {
                Some((dropout, crate::tensor::dropout_key(seed, step, site)))
            }
            _ => None,
        }
    }
}

// ── Initializers ────────────────────────────────────────────────────

pub fn normal(rng: &mut ChaCha20Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape.to_vec())
}

pub fn full(shape: &[usize], v: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![v; n])
}

/// Bias such that `softplus(bias)` lands log-uniformly in `[lo, hi]`.
pub fn softplus_inverse_uniform(rng: &mut ChaCha20Rng, n: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>();
            let dt = (u * (hi.ln() - lo.ln()) + lo.ln()).exp();
            // inverse softplus: ln(e^x - 1)
            (dt.exp() - 1.0).ln()
        })
        .collect();
    Tensor::new(vec![n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_unique() {
        let mut set = ParamSet::new();
        set.add(Parameter::new("a.w", zeros(&[2, 2])));
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            set.add(Parameter::new("a.w", zeros(&[2, 2])));
        }));
        assert!(r.is_err());
    }

    #[test]
    fn softplus_inverse_lands_in_range() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let t = softplus_inverse_uniform(&mut rng, 100, 0.001, 0.1);
        for &b in &t.data {
            let dt = b.max(0.0) + (-b.abs()).exp().ln_1p();
            assert!((0.0009..0.101).contains(&dt), "softplus(bias) = {dt}");
        }
    }

    #[test]
    fn grads_accumulate_and_frozen_rows_stay_zero() {
        let mut set = ParamSet::new();
        let pid = set.add(Parameter::frozen_pad_row("emb", full(&[3, 2], 1.0)));
        let mut tape = Tape::new();
        let binding = set.bind(&mut tape).unwrap();
        let sq = tape.mul(binding.id(pid), binding.id(pid)).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let store = tape.backward(loss).unwrap();
        set.accumulate_grads(&binding, &store);
        let g = &set.get(pid).grad.data;
        assert_eq!(&g[..2], &[0.0, 0.0], "padding row grad masked");
        assert_eq!(&g[2..], &[2.0, 2.0, 2.0, 2.0]);
    }
}
