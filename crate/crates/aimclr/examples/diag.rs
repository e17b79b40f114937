use aimclr::augment::*;
use aimclr::encoder::*;
use aimclr::eval::*;
use aimclr::rng::{derive_rng, Purpose};
use aimclr::skeleton::*;
use aimclr::train::*;
use tempfile::tempdir;

fn main() {
    std::env::set_var("AIMCLR_THREADS", "1");
    let dir = tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let m = generate_synthetic(&data_dir, 4, 64, 32, 9, 1, 7, "seq_").unwrap();
    let mp = data_dir.join("manifest.json");
    m.save(&mp).unwrap();
    let graph = SkeletonGraph::load(&data_dir.join("graph.json")).unwrap();
    let data = load_dataset(&mp).unwrap();
    let adj = normalized_adjacency(&graph);

    let lr: f64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let m_enc: f64 = std::env::args().nth(2).unwrap().parse().unwrap();
    let tau: f64 = std::env::args().nth(3).unwrap().parse().unwrap();
    let cfg = TrainConfig {
        seed: 7,
        encoder_momentum: m_enc,
        bank_size: 128,
        lr,
        tau,
        beta: 0.0,
        stage_switch_epoch: 30,
        ..TrainConfig::default()
    };
    println!("--- lr {lr} m {m_enc} tau {tau} ---");
    let mut state = TrainState::new(&cfg);

    // fixed probe views
    let probe: Vec<(SkeletonSequence, SkeletonSequence)> = (0..24)
        .map(|i| {
            let mut r1 = derive_rng(999, Purpose::QueryAugment, i as u64, 0);
            let mut r2 = derive_rng(999, Purpose::KeyAugment, i as u64, 0);
            let a = apply_pipeline(&data[i], &Pipeline::normal(), &sample_params(32, &mut r1), &graph).unwrap();
            let b = apply_pipeline(&data[i], &Pipeline::normal(), &sample_params(32, &mut r2), &graph).unwrap();
            (a, b)
        })
        .collect();

    let stats = |state: &TrainState| -> (f64, f64, f64, f64) {
        let mut pos = 0.0;
        let mut neg = 0.0;
        let mut hmag = 0.0;
        let mut zq_all: Vec<Vec<f64>> = Vec::new();
        for (a, b) in &probe {
            let (h, zq) = embed(&state.pair.query, &cfg.encoder, a, &adj).unwrap();
            let (_, zk) = embed(&state.pair.key, &cfg.encoder, b, &adj).unwrap();
            pos += zq.iter().zip(zk.iter()).map(|(x, y)| x * y).sum::<f64>();
            hmag += h.iter().map(|v| v * v).sum::<f64>().sqrt();
            zq_all.push(zq);
        }
        let mut np = 0;
        for i in 0..zq_all.len() {
            for j in (i + 1)..zq_all.len() {
                neg += zq_all[i].iter().zip(zq_all[j].iter()).map(|(x, y)| x * y).sum::<f64>();
                np += 1;
            }
        }
        // same-view alignment query vs key encoder
        let (_, zq0) = embed(&state.pair.query, &cfg.encoder, &probe[0].0, &adj).unwrap();
        let (_, zk0) = embed(&state.pair.key, &cfg.encoder, &probe[0].0, &adj).unwrap();
        let same: f64 = zq0.iter().zip(zk0.iter()).map(|(x, y)| x * y).sum();
        (pos / probe.len() as f64, neg / np as f64, hmag / probe.len() as f64, same)
    };

    let (p, n, h, s) = stats(&state);
    println!("epoch -: pos {p:+.4} neg {n:+.4} |h| {h:8.2} sameview {s:+.4}");
    for epoch in 0..12 {
        let mut order: Vec<usize> = (0..data.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut derive_rng(cfg.seed, Purpose::Shuffle, epoch as u64, 0));
        let mut total = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SkeletonSequence> = chunk.iter().map(|&i| &data[i]).collect();
            let rec = pretrain_step(&mut state, &cfg, &batch, &graph, &adj, epoch, step).unwrap();
            total += rec.total;
            steps += 1;
        }
        let (p, n, h, s) = stats(&state);
        println!(
            "epoch {epoch}: loss {:.3} pos {p:+.4} neg {n:+.4} |h| {h:8.2} sameview {s:+.4}",
            total / steps as f64
        );
    }
}
