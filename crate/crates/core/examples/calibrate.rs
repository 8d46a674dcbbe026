use addgcn_core::config::TrainConfig;
use addgcn_core::data::{generate, make_biased_eval_split};
use addgcn_core::dgcn::GraphMode;
use addgcn_core::train::{build_datasets, train_baseline, train_datasets};

fn base_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.num_classes = 8;
    cfg.in_channels = 16;
    cfg.repr_channels = 24;
    cfg.hidden_dim = 24;
    cfg.out_dim = 24;
    cfg.height = 6;
    cfg.width = 6;
    cfg.block_height = 2;
    cfg.block_width = 2;
    cfg.amplitude = 1.0;
    cfg.noise_sigma = 0.5;
    cfg.marginal = 0.4;
    cfg.train_samples = 2000;
    cfg.eval_samples = 500;
    cfg.epochs = 50;
    cfg.lr_step_epochs = vec![30, 40];
    cfg.lr_head = 0.05;
    cfg.lr_features = 0.01;
    cfg
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    if which == "learn" {
        let t0 = std::time::Instant::now();
        for seed in 0..5u64 {
            let mut cfg = base_cfg();
            cfg.seed = seed;
            cfg.data_seed = 100 + seed;
            let (train_ds, eval_ds) = build_datasets(&cfg).unwrap();
            let out = train_datasets(&cfg, &train_ds, &eval_ds, None, None, cfg.epochs).unwrap();
            let best = out.history.iter().map(|r| r.report.map).fold(0.0, f64::max);
            let (_, _, bh) = train_baseline(&cfg, &train_ds, &eval_ds).unwrap();
            let best_base = bh.iter().map(|r| r.report.map).fold(0.0, f64::max);
            println!(
                "seed {seed}: head best mAP {best:.4} | baseline best mAP {best_base:.4} | margin {:.4}",
                best - best_base
            );
        }
        println!("total: {:?}", t0.elapsed());
    } else if which == "bias" {
        let t0 = std::time::Instant::now();
        for seed in 0..5u64 {
            let mut cfg = base_cfg();
            cfg.seed = seed;
            cfg.data_seed = 300 + seed;
            cfg.marginal = 0.45;
            cfg.cooccur_pairs = vec!["0:1:0.9".into()];
            cfg.epochs = 30;
            cfg.lr_step_epochs = vec![20];
            cfg.noise_sigma = 0.6;
            let spec_train = cfg.synthetic_spec(1000 + seed, cfg.train_samples).unwrap();
            let train_ds = generate(&spec_train).unwrap();
            let mut spec_eval = spec_train.clone();
            spec_eval.seed = 2000 + seed;
            spec_eval.samples = cfg.eval_samples;
            let eval_plain = generate(&spec_eval).unwrap();
            let eval_flip = make_biased_eval_split(&spec_eval, (0, 1), 3000 + seed, cfg.eval_samples).unwrap();
            let mut deltas = Vec::new();
            for mode in [GraphMode::S, GraphMode::D] {
                let mut c = cfg.clone();
                c.graph_mode = mode;
                let out = train_datasets(&c, &train_ds, &eval_plain, None, None, c.epochs).unwrap();
                let (rep_plain, _) = addgcn_core::train::evaluate_model(&out.model, &out.store, &eval_plain, c.batch_size).unwrap();
                let (rep_flip, _) = addgcn_core::train::evaluate_model(&out.model, &out.store, &eval_flip, c.batch_size).unwrap();
                let delta = rep_plain.map - rep_flip.map;
                println!(
                    "  seed {seed} {:?}: plain {:.4} flipped {:.4} delta {:.4}",
                    mode, rep_plain.map, rep_flip.map, delta
                );
                deltas.push(delta);
            }
            println!("seed {seed}: dynamic delta {} static delta {} -> dyn loses less: {}", deltas[1], deltas[0], deltas[1] < deltas[0]);
        }
        println!("total: {:?}", t0.elapsed());
    }
}
