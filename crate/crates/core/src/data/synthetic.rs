//! Seeded synthetic multimodal dataset with a known generative rule.
//!
//! Each item gets a latent style vector. The next item of every sequence is
//! the catalog item whose style is nearest to a fixed linear map of the
//! previous item's style, and modality features are random linear projections
//! of style plus Gaussian noise. The rule is written to `truth.json` so an
//! independent replay can re-derive every sequence.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, FeatureTable, Modality};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub style_dim: usize,
    /// Inclusive range of sequence lengths; the low end must clear the
    /// 5-interaction filter.
    pub seq_len_range: (usize, usize),
    pub noise_sigma: f64,
    pub text_dim: usize,
    pub image_dim: usize,
    pub seed: u64,
}

/// The generative rule, serialized as `truth.json`. `item_styles[i]` is the
/// style of item id `i + 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTruth {
    pub style_dim: usize,
    pub transition_matrix: Vec<Vec<f64>>,
    pub item_styles: Vec<Vec<f64>>,
}

impl SynthTruth {
    /// The deterministic next-item rule: nearest style (excluding the item
    /// itself) to `transition_matrix * style[prev]`.
    pub fn next_item(&self, prev: u32) -> u32 {
        let s = &self.item_styles[(prev - 1) as usize];
        let d = self.style_dim;
        let mut mapped = vec![0.0; d];
        for (i, row) in self.transition_matrix.iter().enumerate() {
            mapped[i] = row.iter().zip(s).map(|(&m, &x)| m * x).sum();
        }
        let mut best = 0u32;
        let mut best_d2 = f64::INFINITY;
        for (j, style) in self.item_styles.iter().enumerate() {
            let cand = (j + 1) as u32;
            if cand == prev {
                continue;
            }
            let d2: f64 = style.iter().zip(&mapped).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if d2 < best_d2 {
                best_d2 = d2;
                best = cand;
            }
        }
        best
    }
}

fn validate(cfg: &SynthConfig) -> Result<(), DataError> {
    let bad = |msg: &str| Err(DataError::Config(msg.into()));
    if cfg.n_items < 2 {
        return bad("n_items must be at least 2");
    }
    if cfg.n_users == 0 {
        return bad("n_users must be positive");
    }
    if cfg.style_dim == 0 || cfg.text_dim == 0 || cfg.image_dim == 0 {
        return bad("all dimensions must be positive");
    }
    if cfg.noise_sigma < 0.0 {
        return bad("noise_sigma must be nonnegative");
    }
    if cfg.seq_len_range.0 < 5 || cfg.seq_len_range.0 > cfg.seq_len_range.1 {
        return bad("seq_len_range must satisfy 5 <= lo <= hi");
    }
    Ok(())
}

/// Write `interactions.tsv`, `text.frf`, `image.frf`, and `truth.json` into
/// `out_dir`. Identical configs produce byte-identical files.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthTruth, DataError> {
    validate(cfg)?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let d = cfg.style_dim;

    let item_styles: Vec<Vec<f64>> = (0..cfg.n_items)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    // 0.95 I + 0.2 G keeps mapped styles on the catalog's scale so nearest
    // lookups stay informative, and consecutive styles stay correlated.
    let mut transition = vec![vec![0.0; d]; d];
    let gscale = 0.2 / (d as f64).sqrt();
    for (i, row) in transition.iter_mut().enumerate() {
        for (j, m) in row.iter_mut().enumerate() {
            *m = gscale * rng.sample::<f64, _>(StandardNormal) + if i == j { 0.95 } else { 0.0 };
        }
    }
    let truth = SynthTruth { style_dim: d, transition_matrix: transition, item_styles };

    let proj = |rng: &mut ChaCha20Rng, dim_out: usize| -> Vec<f64> {
        // feature coords come out with std ~0.5, so noise_sigma is measured
        // against a sub-unit signal
        let scale = 0.5 / (d as f64).sqrt();
        (0..dim_out * d)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let p_text = proj(&mut rng, cfg.text_dim);
    let p_image = proj(&mut rng, cfg.image_dim);

    let project = |p: &[f64], dim_out: usize, rng: &mut ChaCha20Rng| -> HashMap<u64, Vec<f64>> {
        let mut table = HashMap::new();
        for (i, style) in truth.item_styles.iter().enumerate() {
            let mut v = vec![0.0; dim_out];
            for (o, slot) in v.iter_mut().enumerate() {
                *slot = p[o * d..(o + 1) * d].iter().zip(style).map(|(&a, &b)| a * b).sum();
                *slot += cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            table.insert((i + 1) as u64, v);
        }
        table
    };
    let text_vectors = project(&p_text, cfg.text_dim, &mut rng);
    let image_vectors = project(&p_image, cfg.image_dim, &mut rng);

    // memoized transitions: the rule is a pure function of the previous item
    let next_map: Vec<u32> = (1..=cfg.n_items as u32).map(|i| truth.next_item(i)).collect();

    let mut tsv = String::new();
    for user in 0..cfg.n_users {
        let len = rng.gen_range(cfg.seq_len_range.0..=cfg.seq_len_range.1);
        let mut item = rng.gen_range(1..=cfg.n_items as u32);
        for t in 0..len {
            tsv.push_str(&format!("{user}\t{item}\t{t}\n"));
            item = next_map[(item - 1) as usize];
        }
    }
    fs::write(out_dir.join("interactions.tsv"), tsv)?;

    FeatureTable { modality: Modality::Text, dim: cfg.text_dim, vectors: text_vectors }
        .write(out_dir.join("text.frf"))?;
    FeatureTable { modality: Modality::Image, dim: cfg.image_dim, vectors: image_vectors }
        .write(out_dir.join("image.frf"))?;
    fs::write(
        out_dir.join("truth.json"),
        serde_json::to_string_pretty(&truth).expect("truth serializes"),
    )?;
    Ok(truth)
}
