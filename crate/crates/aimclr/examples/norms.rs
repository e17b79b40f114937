use aimclr::encoder::*;
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
    let cfg = TrainConfig {
        seed: 7, encoder_momentum: 0.9, bank_size: 128, lr: 0.03,
        beta: 0.0, stage_switch_epoch: 30, ..TrainConfig::default()
    };
    let mut state = TrainState::new(&cfg);
    let names: Vec<String> = ModelParams::named_shapes(&cfg.encoder).into_iter().map(|(n, _)| n).collect();
    let print_norms = |state: &TrainState, tag: &str| {
        let norms: Vec<String> = state.pair.query.tensors().iter().zip(names.iter())
            .map(|(t, n)| format!("{}={:.2}", n.replace("encoder.block", "b").replace(".weight", "_w").replace(".bias", "_b"), t.iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect();
        println!("{tag}: {}", norms.join(" "));
    };
    print_norms(&state, "init   ");
    use rand::seq::SliceRandom;
    for epoch in 0..4 {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, Purpose::Shuffle, epoch as u64, 0));
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SkeletonSequence> = chunk.iter().map(|&i| &data[i]).collect();
            pretrain_step(&mut state, &cfg, &batch, &graph, &adj, epoch, step).unwrap();
        }
        print_norms(&state, &format!("epoch {epoch}"));
    }
}
