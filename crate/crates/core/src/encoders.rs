//! Item-ID embedding table, per-modality projections, and the lightweight
//! per-modality sequence encoders feeding the alignment and attention stages.

use rand_chacha::ChaCha20Rng;

use crate::mamba::{MambaConfig, MambaLayer};
use crate::params::{self, Binding, Mode, ParamId, ParamSet};
use crate::tensor::{Parameter, Tape, TensorError, TensorId};

/// `(n_items + 1) x d_id` embedding rows; row 0 is the padding row, pinned to
/// zero for the whole life of the model.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub n_items: usize,
    pub d_id: usize,
}

impl EmbeddingTable {
    pub fn init(set: &mut ParamSet, name: &str, n_items: usize, d_id: usize, rng: &mut ChaCha20Rng) -> Self {
        let mut value = params::normal(rng, &[n_items + 1, d_id], (1.0 / d_id as f64).sqrt());
        value.data[..d_id].iter_mut().for_each(|v| *v = 0.0);
        let table = set.add(Parameter::frozen_pad_row(name, value));
        EmbeddingTable { table, n_items, d_id }
    }

    /// Gather rows for `item_ids [B, L]`; padding id 0 yields zero rows.
    pub fn embed(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        item_ids: &[u32],
        bsz: usize,
        l: usize,
    ) -> Result<TensorId, TensorError> {
        let ids: Vec<usize> = item_ids.iter().map(|&i| i as usize).collect();
        tape.gather_rows(bind.id(self.table), &ids, &[bsz, l])
    }
}

/// Position-wise affine map from raw modality features to the shared width.
#[derive(Debug, Clone)]
pub struct ModalityProjector {
    w: ParamId,
    b: ParamId,
    pub d_raw: usize,
    pub d_hidden: usize,
}

impl ModalityProjector {
    pub fn init(set: &mut ParamSet, prefix: &str, d_raw: usize, d_hidden: usize, rng: &mut ChaCha20Rng) -> Self {
        ModalityProjector {
            w: set.add(Parameter::new(
                format!("{prefix}.w"),
                params::normal(rng, &[d_raw, d_hidden], (1.0 / d_raw as f64).sqrt()),
            )),
            b: set.add(Parameter::new(format!("{prefix}.b"), params::zeros(&[d_hidden]))),
            d_raw,
            d_hidden,
        }
    }

    /// `x [B, L, d_raw] -> x W + b [B, L, d_hidden]`.
    pub fn project(&self, tape: &mut Tape, bind: &Binding, feats: TensorId) -> Result<TensorId, TensorError> {
        let s = tape.shape(feats).to_vec();
        if s.len() != 3 || s[2] != self.d_raw {
            return Err(TensorError::ShapeMismatch {
                op: "project_modality",
                details: format!("expected [B, L, {}], got {s:?}", self.d_raw),
            });
        }
        let flat = tape.reshape(feats, vec![s[0] * s[1], self.d_raw])?;
        let xw = tape.matmul(flat, bind.id(self.w))?;
        let xwb = tape.add(xw, bind.id(self.b))?;
        tape.reshape(xwb, vec![s[0], s[1], self.d_hidden])
    }
}

/// Projection, one Mamba layer, layer norm, and an alignment head that maps
/// the last valid position into the alignment space.
#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    pub projector: ModalityProjector,
    layer: MambaLayer,
    norm_gamma: ParamId,
    norm_beta: ParamId,
    align: ParamId,
    pub d_align: usize,
}

impl ModalityEncoder {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        d_raw: usize,
        d_hidden: usize,
        d_align: usize,
        ssm: &MambaConfig,
        dropout_site: u64,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let cfg = MambaConfig { d_model: d_hidden, n_layers: 1, ..*ssm };
        ModalityEncoder {
            projector: ModalityProjector::init(set, &format!("{prefix}.proj"), d_raw, d_hidden, rng),
            layer: MambaLayer::init(set, &format!("{prefix}.mamba"), &cfg, dropout_site, rng),
            norm_gamma: set.add(Parameter::new(format!("{prefix}.norm.gamma"), params::full(&[d_hidden], 1.0))),
            norm_beta: set.add(Parameter::new(format!("{prefix}.norm.beta"), params::zeros(&[d_hidden]))),
            align: set.add(Parameter::new(
                format!("{prefix}.align"),
                params::normal(rng, &[d_hidden, d_align], (1.0 / d_hidden as f64).sqrt()),
            )),
            d_align,
        }
    }

    /// Returns `(Z [B,L,d_hidden], z_last [B,d_align])`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        feats: TensorId,
        valid_len: &[usize],
        mode: Mode,
    ) -> Result<(TensorId, TensorId), TensorError> {
        let projected = self.projector.project(tape, bind, feats)?;
        let seq = self.layer.forward(tape, bind, projected, mode)?;
        let z = tape.layer_norm(seq, bind.id(self.norm_gamma), bind.id(self.norm_beta), 1e-5)?;
        let last_idx: Vec<usize> = valid_len.iter().map(|&v| v - 1).collect();
        let z_last_hidden = tape.select_time(z, &last_idx)?;
        let z_last = tape.matmul(z_last_hidden, bind.id(self.align))?;
        Ok((z, z_last))
    }
}
