//! The assembled recommender: ID stream through the SSM stack, modality
//! streams through their encoders, cross-modal refinement, fusion, and
//! catalog scoring against the tied embedding table.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crossmodal::{CrossModalMoe, HeadConfig, Variant};
use crate::data::Batch;
use crate::encoders::{EmbeddingTable, ModalityEncoder};
use crate::fusion::{score_items, FusionHead};
use crate::mamba::{MambaConfig, MambaStack};
use crate::params::{Binding, Mode, ParamSet};
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_id: usize,
    pub d_hidden: usize,
    pub d_align: usize,
    pub heads: usize,
    pub n_experts: usize,
    pub n_layers: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_id: 128,
            d_hidden: 256,
            d_align: 512,
            heads: 8,
            n_experts: 4,
            n_layers: 2,
            d_state: 16,
            expand: 2,
            conv_kernel: 4,
            max_len: 50,
            dropout: 0.2,
        }
    }
}

// dropout mask site ids, stable across runs
const SITE_ID_STACK: u64 = 0; // .. n_layers-1
const SITE_TXT: u64 = 100;
const SITE_IMG: u64 = 101;
const SITE_FUSE: u64 = 200;

#[derive(Debug, Clone)]
pub struct FindRecModel {
    pub cfg: ModelConfig,
    pub n_items: usize,
    pub params: ParamSet,
    pub embedding: EmbeddingTable,
    pub id_stack: MambaStack,
    pub txt_encoder: ModalityEncoder,
    pub img_encoder: ModalityEncoder,
    pub crossmodal: CrossModalMoe,
    pub fusion: FusionHead,
}

/// Tape handles produced by one forward pass.
pub struct ForwardOut {
    pub logits: TensorId,
    pub z_img_last: TensorId,
    pub z_txt_last: TensorId,
}

impl FindRecModel {
    pub fn init(
        cfg: &ModelConfig,
        n_items: usize,
        d_txt_raw: usize,
        d_img_raw: usize,
        variant: Variant,
        seed: u64,
    ) -> Result<Self, TensorError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let ssm = MambaConfig {
            d_model: cfg.d_id,
            d_state: cfg.d_state,
            expand: cfg.expand,
            conv_kernel: cfg.conv_kernel,
            n_layers: cfg.n_layers,
        };
        let embedding = EmbeddingTable::init(&mut params, "item_embedding", n_items, cfg.d_id, &mut rng);
        let id_stack = MambaStack::init(&mut params, "id_mamba", &ssm, SITE_ID_STACK, &mut rng);
        let txt_encoder = ModalityEncoder::init(
            &mut params,
            "txt",
            d_txt_raw,
            cfg.d_hidden,
            cfg.d_align,
            &ssm,
            SITE_TXT,
            &mut rng,
        );
        let img_encoder = ModalityEncoder::init(
            &mut params,
            "img",
            d_img_raw,
            cfg.d_hidden,
            cfg.d_align,
            &ssm,
            SITE_IMG,
            &mut rng,
        );
        let crossmodal = CrossModalMoe::init(
            &mut params,
            "xmodal",
            cfg.d_hidden,
            &HeadConfig { heads: cfg.heads, n_experts: cfg.n_experts },
            variant,
            &mut rng,
        )?;
        let fusion = FusionHead::init(&mut params, "fusion", cfg.d_id, cfg.d_hidden, SITE_FUSE, &mut rng);
        Ok(FindRecModel {
            cfg: *cfg,
            n_items,
            params,
            embedding,
            id_stack,
            txt_encoder,
            img_encoder,
            crossmodal,
            fusion,
        })
    }

    pub fn variant(&self) -> Variant {
        self.crossmodal.variant()
    }

    /// One full forward pass over a batch. The caller owns the tape and the
    /// binding so it can run backward and read gradients out afterwards.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        batch: &Batch,
        mode: Mode,
    ) -> Result<ForwardOut, TensorError> {
        let (bsz, l) = (batch.batch, batch.max_len);
        let e_id = self.embedding.embed(tape, bind, &batch.item_ids, bsz, l)?;
        let (_z_id, z_id_last) = self.id_stack.forward(tape, bind, e_id, &batch.valid_len, mode)?;

        let d_txt = self.txt_encoder.projector.d_raw;
        let d_img = self.img_encoder.projector.d_raw;
        let txt = tape.constant(Tensor::new(vec![bsz, l, d_txt], batch.text_feats.clone()))?;
        let img = tape.constant(Tensor::new(vec![bsz, l, d_img], batch.img_feats.clone()))?;
        let (z_txt, z_txt_last) = self.txt_encoder.encode(tape, bind, txt, &batch.valid_len, mode)?;
        let (z_img, z_img_last) = self.img_encoder.encode(tape, bind, img, &batch.valid_len, mode)?;

        let (_o_exp, o_exp_last) = self.crossmodal.forward(tape, bind, z_img, z_txt, &batch.valid_len)?;
        let s = self.fusion.fuse(tape, bind, z_id_last, o_exp_last, mode)?;
        let logits = score_items(tape, s, bind.id(self.embedding.table))?;
        Ok(ForwardOut { logits, z_img_last, z_txt_last })
    }

    /// Eval-mode logits as plain values, one row per batch row.
    pub fn score(&self, batch: &Batch) -> Result<Vec<Vec<f64>>, TensorError> {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape)?;
        let out = self.forward(&mut tape, &bind, batch, Mode::Eval)?;
        let cols = self.n_items + 1;
        Ok(tape.data(out.logits).chunks(cols).map(|c| c.to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, leave_one_out_split, load_interactions, make_batches};
    use crate::data::{DataBundle, FeatureTable, Modality, SynthConfig};

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_id: 8,
            d_hidden: 8,
            d_align: 6,
            heads: 2,
            n_experts: 2,
            n_layers: 1,
            d_state: 2,
            expand: 2,
            conv_kernel: 2,
            max_len: 6,
            dropout: 0.1,
        }
    }

    pub(crate) fn tiny_bundle(seed: u64) -> DataBundle {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_users: 6,
            n_items: 10,
            style_dim: 3,
            seq_len_range: (5, 8),
            noise_sigma: 0.1,
            text_dim: 4,
            image_dim: 5,
            seed,
        };
        generate_synthetic(&cfg, dir.path()).unwrap();
        let ds = load_interactions(dir.path().join("interactions.tsv")).unwrap();
        let text = FeatureTable::load(dir.path().join("text.frf"), Modality::Text)
            .unwrap()
            .reindex(&ds)
            .unwrap();
        let image = FeatureTable::load(dir.path().join("image.frf"), Modality::Image)
            .unwrap()
            .reindex(&ds)
            .unwrap();
        DataBundle { dataset: ds, text, image }
    }

    #[test]
    fn forward_produces_catalog_scores() {
        let bundle = tiny_bundle(42);
        let (train, _, _) = leave_one_out_split(&bundle.dataset);
        let batches = make_batches(&bundle, &train, 4, 6, 0);
        let model = FindRecModel::init(
            &tiny_cfg(),
            bundle.dataset.n_items(),
            bundle.text.dim,
            bundle.image.dim,
            Variant::Full,
            7,
        )
        .unwrap();
        let scores = model.score(&batches[0]).unwrap();
        assert_eq!(scores.len(), batches[0].batch);
        assert_eq!(scores[0].len(), bundle.dataset.n_items() + 1);
        assert!(scores[0][0] <= -1e29, "padding item never ranks");
        assert!(scores[0][1..].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_is_deterministic_in_eval() {
        let bundle = tiny_bundle(43);
        let (_, valid, _) = leave_one_out_split(&bundle.dataset);
        let batches = make_batches(&bundle, &valid, 3, 6, 1);
        let model = FindRecModel::init(
            &tiny_cfg(),
            bundle.dataset.n_items(),
            bundle.text.dim,
            bundle.image.dim,
            Variant::Full,
            8,
        )
        .unwrap();
        assert_eq!(model.score(&batches[0]).unwrap(), model.score(&batches[0]).unwrap());
    }

    #[test]
    fn gradients_reach_every_stage() {
        let bundle = tiny_bundle(44);
        let (train, _, _) = leave_one_out_split(&bundle.dataset);
        let batches = make_batches(&bundle, &train, 4, 6, 2);
        let mut model = FindRecModel::init(
            &tiny_cfg(),
            bundle.dataset.n_items(),
            bundle.text.dim,
            bundle.image.dim,
            Variant::Full,
            9,
        )
        .unwrap();
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape).unwrap();
        let out = model
            .forward(&mut tape, &bind, &batches[0], Mode::Eval)
            .unwrap();
        let loss = crate::fusion::rec_loss_ce(&mut tape, out.logits, &batches[0].target).unwrap();
        let store = tape.backward(loss).unwrap();
        model.params.accumulate_grads(&bind, &store);
        let mut touched = 0;
        for p in model.params.iter() {
            let nz = p.grad.data.iter().filter(|&&g| g != 0.0).count();
            if nz > 0 {
                touched += 1;
            }
        }
        // alignment heads only feed the coordination loss, so they stay zero
        // here, but the bulk of the model must receive gradient
        assert!(
            touched * 10 >= model.params.len() * 8,
            "only {touched}/{} parameters touched",
            model.params.len()
        );
        let emb = model.params.by_name("item_embedding").unwrap();
        assert!(emb.grad.data[model.cfg.d_id..].iter().any(|&g| g != 0.0));
        assert!(emb.grad.data[..model.cfg.d_id].iter().all(|&g| g == 0.0));
    }
}
