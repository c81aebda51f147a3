// Scratch harness for desk-scale training experiments.

use findrec_core::crossmodal::Variant;
use findrec_core::data::{generate_synthetic, leave_one_out_split, load_interactions};
use findrec_core::data::{DataBundle, FeatureTable, Modality, SynthConfig};
use findrec_core::iicm::SteinConfig;
use findrec_core::metrics::evaluate;
use findrec_core::model::ModelConfig;
use findrec_core::trainer::{mean_alignment_ek, model_from_checkpoint, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let variant = match args.get(4).map(|s| s.as_str()) {
        Some("no_cross_attn") => Variant::NoCrossAttn,
        Some("no_iicm") => Variant::NoIicm,
        Some("no_moe") => Variant::NoMoe,
        _ => Variant::Full,
    };

    let hard = args.get(5).map(|s| s == "hard").unwrap_or(false);
    let dir = tempfile::tempdir().unwrap();
    let synth = if hard {
        SynthConfig {
            n_users: 100,
            n_items: 40,
            style_dim: 4,
            seq_len_range: (8, 14),
            noise_sigma: noise,
            text_dim: 12,
            image_dim: 10,
            seed: 1234,
        }
    } else {
        SynthConfig {
            n_users: 100,
            n_items: 50,
            style_dim: 8,
            seq_len_range: (8, 16),
            noise_sigma: noise,
            text_dim: 16,
            image_dim: 12,
            seed: 1234,
        }
    };
    generate_synthetic(&synth, dir.path()).unwrap();
    let ds = load_interactions(dir.path().join("interactions.tsv")).unwrap();
    println!(
        "dataset: {} users, {} items, {} interactions",
        ds.stats.n_users, ds.stats.n_items, ds.stats.n_interactions
    );
    let text = FeatureTable::load(dir.path().join("text.frf"), Modality::Text)
        .unwrap()
        .reindex(&ds)
        .unwrap();
    let image = FeatureTable::load(dir.path().join("image.frf"), Modality::Image)
        .unwrap()
        .reindex(&ds)
        .unwrap();
    let bundle = DataBundle { dataset: ds, text, image };

    let model_cfg = if hard {
        ModelConfig {
            d_id: 16,
            d_hidden: 16,
            d_align: 8,
            heads: 2,
            n_experts: 2,
            n_layers: 1,
            d_state: 4,
            expand: 2,
            conv_kernel: 4,
            max_len: 12,
            dropout: 0.1,
        }
    } else {
        ModelConfig {
            d_id: 32,
            d_hidden: 32,
            d_align: 16,
            heads: 4,
            n_experts: 2,
            n_layers: 1,
            d_state: 4,
            expand: 2,
            conv_kernel: 4,
            max_len: 12,
            dropout: 0.1,
        }
    };
    let train_cfg = TrainConfig {
        lr_peak: 3e-3,
        weight_decay: 0.01,
        batch_size: 64,
        epochs,
        warmup_steps: 30,
        clip_norm: 1.0,
        seed,
        variant,
        ..Default::default()
    };
    let stein_cfg = SteinConfig::default();

    let t0 = std::time::Instant::now();
    let result = train(&model_cfg, &train_cfg, &stein_cfg, &bundle).unwrap();
    let elapsed = t0.elapsed();

    let (train_split, _, test_split) = leave_one_out_split(&bundle.dataset);
    let best = model_from_checkpoint(&result.best).unwrap();
    let report = evaluate(&best, &bundle, &test_split, true, 64).unwrap();
    let ek = mean_alignment_ek(&result.model, &bundle, &train_split, 64).unwrap();

    println!(
        "variant {:?} seed {}: best valid NDCG@10 {:.4}",
        variant, seed, result.best_valid_ndcg10
    );
    println!(
        "test NDCG@5 {:.4} NDCG@10 {:.4} MRR@5 {:.4} EK {:.5} time {:.1?} ({} steps)",
        report.overall.ndcg5.unwrap(),
        report.overall.ndcg10.unwrap(),
        report.overall.mrr5.unwrap(),
        ek,
        elapsed,
        result.run_log.len()
    );
    let first = &result.run_log[0];
    let last = result.run_log.last().unwrap();
    println!("l_rec first {:.4} last {:.4}", first.l_rec, last.l_rec);
}
