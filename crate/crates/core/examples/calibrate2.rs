use addgcn_core::config::TrainConfig;
use addgcn_core::train::{build_datasets, train_baseline, train_datasets};

fn main() {
    for (label, bh, bw, amp, lr) in [
        ("b3_a1.5_lr.05", 3usize, 3usize, 1.5f32, 0.05f32),
        ("b3_a2.0_lr.05", 3, 3, 2.0, 0.05),
        ("b3_a1.5_lr.1", 3, 3, 1.5, 0.1),
        ("b2_a2.0_lr.1", 2, 2, 2.0, 0.1),
    ] {
        let t0 = std::time::Instant::now();
        let mut worst_head: f64 = 1.0;
        let mut worst_margin: f64 = 1.0;
        for seed in 0..2u64 {
            let mut cfg = TrainConfig::default();
            cfg.num_classes = 8;
            cfg.in_channels = 16;
            cfg.repr_channels = 24;
            cfg.hidden_dim = 24;
            cfg.out_dim = 24;
            cfg.height = 6;
            cfg.width = 6;
            cfg.block_height = bh;
            cfg.block_width = bw;
            cfg.amplitude = amp;
            cfg.noise_sigma = 0.5;
            cfg.marginal = 0.4;
            cfg.train_samples = 2000;
            cfg.eval_samples = 500;
            cfg.epochs = 50;
            cfg.lr_step_epochs = vec![30, 40];
            cfg.lr_head = lr;
            cfg.lr_features = lr / 5.0;
            cfg.seed = seed;
            cfg.data_seed = 100 + seed;
            let (train_ds, eval_ds) = build_datasets(&cfg).unwrap();
            let out = train_datasets(&cfg, &train_ds, &eval_ds, None, None, cfg.epochs).unwrap();
            let best = out.history.iter().map(|r| r.report.map).fold(0.0, f64::max);
            let (_, _, hist) = train_baseline(&cfg, &train_ds, &eval_ds).unwrap();
            let best_base = hist.iter().map(|r| r.report.map).fold(0.0, f64::max);
            worst_head = worst_head.min(best);
            worst_margin = worst_margin.min(best - best_base);
        }
        println!("{label}: worst head {worst_head:.4} worst margin {worst_margin:.4} ({:?})", t0.elapsed());
    }
}
