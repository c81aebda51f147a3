//! Padded fixed-length batches over a split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{Dataset, DenseFeatures, Split};

/// Dataset plus its two modality tables, already reindexed.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub dataset: Dataset,
    pub text: DenseFeatures,
    pub image: DenseFeatures,
}

/// Right-padded training/evaluation batch. `item_ids[b, t] == 0` exactly for
/// `t >= valid_len[b]`, and padding feature rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub max_len: usize,
    pub item_ids: Vec<u32>,
    pub text_feats: Vec<f64>,
    pub img_feats: Vec<f64>,
    pub valid_len: Vec<usize>,
    pub target: Vec<u32>,
    pub users: Vec<u32>,
}

impl Batch {
    /// Recover the unpadded contexts (round-trip identity with the source split).
    pub fn contexts(&self) -> Vec<Vec<u32>> {
        (0..self.batch)
            .map(|b| self.item_ids[b * self.max_len..b * self.max_len + self.valid_len[b]].to_vec())
            .collect()
    }
}

/// Deterministic batch stream: examples shuffled by `seed`, contexts clipped
/// to the most recent `max_len` items, right-padded with id 0.
pub fn make_batches(bundle: &DataBundle, split: &Split, batch_size: usize, max_len: usize, seed: u64) -> Vec<Batch> {
    assert!(max_len >= 1 && batch_size >= 1);
    let mut order: Vec<usize> = (0..split.examples.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let (td, id) = (bundle.text.dim, bundle.image.dim);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let b = chunk.len();
        let mut batch = Batch {
            batch: b,
            max_len,
            item_ids: vec![0; b * max_len],
            text_feats: vec![0.0; b * max_len * td],
            img_feats: vec![0.0; b * max_len * id],
            valid_len: vec![0; b],
            target: vec![0; b],
            users: vec![0; b],
        };
        for (row, &ex_idx) in chunk.iter().enumerate() {
            let ex = &split.examples[ex_idx];
            let ctx = if ex.context.len() > max_len {
                &ex.context[ex.context.len() - max_len..]
            } else {
                &ex.context[..]
            };
            batch.valid_len[row] = ctx.len();
            batch.target[row] = ex.target;
            batch.users[row] = ex.user;
            for (t, &item) in ctx.iter().enumerate() {
                batch.item_ids[row * max_len + t] = item;
                let tf = &mut batch.text_feats[(row * max_len + t) * td..(row * max_len + t + 1) * td];
                tf.copy_from_slice(bundle.text.row(item));
                let vf = &mut batch.img_feats[(row * max_len + t) * id..(row * max_len + t + 1) * id];
                vf.copy_from_slice(bundle.image.row(item));
            }
        }
        batches.push(batch);
    }
    batches
}

/// One batch over the split's examples in their given order (evaluation path:
/// no shuffling, aggregation happens per user downstream).
pub fn make_eval_batch(bundle: &DataBundle, split: &Split, max_len: usize) -> Batch {
    let (td, id) = (bundle.text.dim, bundle.image.dim);
    let b = split.examples.len();
    let mut batch = Batch {
        batch: b,
        max_len,
        item_ids: vec![0; b * max_len],
        text_feats: vec![0.0; b * max_len * td],
        img_feats: vec![0.0; b * max_len * id],
        valid_len: vec![0; b],
        target: vec![0; b],
        users: vec![0; b],
    };
    for (row, ex) in split.examples.iter().enumerate() {
        let ctx = if ex.context.len() > max_len {
            &ex.context[ex.context.len() - max_len..]
        } else {
            &ex.context[..]
        };
        batch.valid_len[row] = ctx.len();
        batch.target[row] = ex.target;
        batch.users[row] = ex.user;
        for (t, &item) in ctx.iter().enumerate() {
            batch.item_ids[row * max_len + t] = item;
            batch.text_feats[(row * max_len + t) * td..(row * max_len + t + 1) * td]
                .copy_from_slice(bundle.text.row(item));
            batch.img_feats[(row * max_len + t) * id..(row * max_len + t + 1) * id]
                .copy_from_slice(bundle.image.row(item));
        }
    }
    batch
}
