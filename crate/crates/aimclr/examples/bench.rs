use aimclr::checkpoint::load_checkpoint;
use aimclr::encoder::ModelParams;
use aimclr::eval::*;
use aimclr::rng::{derive_rng, Purpose};
use aimclr::skeleton::*;
use aimclr::train::*;
use std::time::Instant;
use tempfile::tempdir;

fn raw_1nn(data: &[SkeletonSequence]) -> f64 {
    let n = data.len();
    let mut correct = 0;
    for i in 0..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if i == j { continue; }
            let d: f64 = data[i].data.iter().zip(data[j].data.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d { best_d = d; best = j; }
        }
        if data[best].label == data[i].label { correct += 1; }
    }
    correct as f64 / n as f64
}

fn main() {
    std::env::set_var("AIMCLR_THREADS", "1");
    let dir = tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let total = 96;
    let m = generate_synthetic(&data_dir, 4, total, 32, 9, 1, 7, "seq_").unwrap();
    let (mut train_e, mut test_e) = (vec![], vec![]);
    for (i, e) in m.entries.iter().enumerate() {
        if i % total < 64 { train_e.push(e.clone()) } else { test_e.push(e.clone()) }
    }
    let train_m = DatasetManifest { num_classes: 4, entries: train_e };
    let test_m = DatasetManifest { num_classes: 4, entries: test_e };
    let mp = data_dir.join("manifest.json");
    let tp = data_dir.join("test_manifest.json");
    train_m.save(&mp).unwrap();
    test_m.save(&tp).unwrap();
    let gp = data_dir.join("graph.json");
    let graph = SkeletonGraph::load(&gp).unwrap();
    let train_data = load_dataset(&mp).unwrap();
    let test_data = load_dataset(&tp).unwrap();
    println!("raw LOO 1-NN on train set: {:.4}", raw_1nn(&train_data));

    let base = TrainConfig { seed: 7, encoder_momentum: 0.99, bank_size: 128, ..TrainConfig::default() };
    let mut rng = derive_rng(base.seed, Purpose::ParamInit, 0, 0);
    let rand_params = ModelParams::init(&base.encoder, &mut rng);
    let r0 = knn_eval(&rand_params, &base.encoder, &graph, &train_data, &test_data, 4, 1, "joint").unwrap();
    let (lin0, _) = linear_eval(&rand_params, &base.encoder, &graph, &train_data, &test_data, 4,
        &ClassifierOpts::default(), "joint").unwrap();
    println!("random-init: KNN {:.4} linear {:.4}", r0.top1, lin0.top1);

    for (lr, drop) in [(0.1, 0.01), (0.05, 0.005), (0.03, 0.003)] {
        let cfg = TrainConfig { lr, ..base.clone() };
        let t0 = Instant::now();
        let out = dir.path().join(format!("run_lr{lr}"));
        let summary = run_pretraining(&cfg, &mp, &gp, &out, None).unwrap();
        let params = load_checkpoint(&summary.last_checkpoint, &cfg.encoder).unwrap();
        let feats = extract_features(&params, &cfg.encoder, &graph, &train_data).unwrap();
        let mag: f64 = feats.iter().map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / feats.len() as f64;
        let r1 = knn_eval(&params, &cfg.encoder, &graph, &train_data, &test_data, 4, 1, "joint").unwrap();
        let (lin, _) = linear_eval(&params, &cfg.encoder, &graph, &train_data, &test_data, 4,
            &ClassifierOpts::default(), "joint").unwrap();
        println!(
            "lr={lr}(->{drop}): {:.0}s loss {:.3}->{:.3} |h| {:.1} | KNN {:.4} (gap {:+.4}) lin {:.4}",
            t0.elapsed().as_secs_f64(),
            summary.loss_history[0], summary.loss_history.last().unwrap(),
            mag, r1.top1, r1.top1 - r0.top1, lin.top1
        );
    }
}
