//! Two-stage contrastive pretraining: per-sample augmentation, query/key
//! encoding, the attention-guided drop branch, loss assembly, SGD with
//! momentum, momentum tracking of the key encoder and bank maintenance.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_pipeline, sample_params, Pipeline};
use crate::checkpoint::{save_checkpoint, TrainStateSnapshot};
use crate::contrast::{
    conditional_distribution, cross_entropy_const_target, distribution_on_tape, info_nce_on_tape,
    mine_neighbors, nnm_on_tape, union_indices, MemoryBank,
};
use crate::eadm::drop_on_tape;
use crate::encoder::{
    embed, encode, normalized_adjacency, pool_feature, project, register_params, EncoderConfig,
    EncoderPair, ModelParams, TapeParams,
};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, Purpose};
use crate::skeleton::{apply_stream, load_dataset, SkeletonGraph, SkeletonSequence, Stream};
use crate::tensor::{Tape, TensorRef};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// First epoch index that trains with the mined-neighbor loss.
    pub stage_switch_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Memory bank capacity M.
    pub bank_size: usize,
    /// Neighbors mined per query in stage two.
    pub nnm_k: usize,
    pub keep_margin: f64,
    pub energy_lambda: f64,
    /// Key-encoder momentum coefficient.
    pub encoder_momentum: f64,
    pub seed: u64,
    pub stream: Stream,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            stage_switch_epoch: 15,
            batch_size: 16,
            lr: 0.1,
            lr_drop_epoch: 25,
            lr_drop_factor: 0.1,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            alpha: 1.0,
            beta: 1.0,
            tau: 0.07,
            bank_size: 1024,
            nnm_k: 1,
            // Attention values live in (sigmoid(0.5), 1); thresholding the
            // location means against keep_margin * max only drops a proper
            // subset when the margin sits near 1.
            keep_margin: 0.98,
            energy_lambda: 1e-4,
            encoder_momentum: 0.999,
            seed: 0,
            stream: Stream::Joint,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.epochs == 0 || self.stage_switch_epoch == 0 || self.stage_switch_epoch > self.epochs
        {
            return Err(Error::invalid(
                "train_config",
                format!(
                    "stage_switch_epoch {} must be in 1..={}",
                    self.stage_switch_epoch, self.epochs
                ),
            ));
        }
        if self.alpha <= 0.0 || self.beta < 0.0 {
            return Err(Error::invalid(
                "train_config",
                "alpha must be > 0 and beta >= 0",
            ));
        }
        if self.tau <= 0.0 || self.batch_size == 0 || self.bank_size == 0 {
            return Err(Error::invalid("train_config", "tau, batch, bank must be positive"));
        }
        if !(self.keep_margin > 0.0 && self.keep_margin <= 1.0) {
            return Err(Error::invalid("train_config", "keep_margin outside (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.encoder_momentum) {
            return Err(Error::invalid("train_config", "encoder momentum outside [0, 1)"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }

    pub fn is_stage_two(&self, epoch: usize) -> bool {
        epoch >= self.stage_switch_epoch
    }
}

/// Live training state between steps.
pub struct TrainState {
    pub epoch_next: usize,
    pub pair: EncoderPair,
    pub velocity: Vec<Vec<f64>>,
    pub bank: MemoryBank,
    /// Mean total loss per completed epoch.
    pub loss_history: Vec<f64>,
    pub seed: u64,
}

impl TrainState {
    /// Fresh state: seeded parameter init, key = query, bank filled with
    /// random unit vectors so the negative pool is never empty.
    pub fn new(cfg: &TrainConfig) -> TrainState {
        let mut init_rng = derive_rng(cfg.seed, Purpose::ParamInit, 0, 0);
        let query = ModelParams::init(&cfg.encoder, &mut init_rng);
        let pair = EncoderPair::new(query, cfg.encoder_momentum);
        let velocity = pair
            .query
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        let mut bank_rng = derive_rng(cfg.seed, Purpose::BankInit, 0, 0);
        let bank = MemoryBank::random_init(cfg.bank_size, cfg.encoder.projection_dim, &mut bank_rng);
        TrainState {
            epoch_next: 0,
            pair,
            velocity,
            bank,
            loss_history: Vec::new(),
            seed: cfg.seed,
        }
    }

    pub fn snapshot(&self) -> TrainStateSnapshot {
        TrainStateSnapshot::capture(
            self.seed,
            self.epoch_next,
            &self.pair,
            &self.velocity,
            &self.bank,
            &self.loss_history,
        )
    }

    pub fn from_snapshot(snap: &TrainStateSnapshot, cfg: &TrainConfig) -> Result<TrainState> {
        let (pair, velocity, bank) = snap.restore(&cfg.encoder)?;
        Ok(TrainState {
            epoch_next: snap.epoch_next,
            pair,
            velocity,
            bank,
            loss_history: snap.loss_history.clone(),
            seed: snap.seed,
        })
    }
}

/// One metrics-log line. Stage one records the InfoNCE term, stage two the
/// mined-neighbor term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_info: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_n: Option<f64>,
    pub l_d1: f64,
    pub l_d2: f64,
    pub total: f64,
    pub lr: f64,
}

/// SGD with momentum and coupled weight decay:
/// v <- momentum*v + grad + wd*param; param <- param - lr*v.
pub fn sgd_update(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.iter())
        .zip(velocity.iter_mut())
    {
        for i in 0..p.len() {
            v[i] = momentum * v[i] + g[i] + weight_decay * p[i];
            p[i] -= lr * v[i];
        }
    }
}

fn flat_refs(tp: &TapeParams) -> Vec<TensorRef> {
    let mut refs = Vec::new();
    for b in &tp.blocks {
        refs.push(b.point_w);
        refs.push(b.temp_w);
    }
    refs.push(tp.head.fc1_w);
    refs.push(tp.head.fc2_w);
    refs
}

struct SampleOutcome {
    grads: Vec<Vec<f64>>,
    z_key: Vec<f64>,
    main: f64,
    l_d1: f64,
    l_d2: f64,
    total: f64,
}

/// Forward/backward for one sample. Reads the pair and bank immutably: the
/// key parameters and bank contents cannot be touched by the backward pass.
#[allow(clippy::too_many_arguments)]
fn process_sample(
    seq: &SkeletonSequence,
    cfg: &TrainConfig,
    pair: &EncoderPair,
    bank: &MemoryBank,
    adj: &[f64],
    graph: &SkeletonGraph,
    epoch: usize,
    step: usize,
    sample_index: usize,
    stage_two: bool,
) -> Result<SampleOutcome> {
    let coord = ((epoch as u64) << 32) | step as u64;
    let frames = seq.frames;

    // Three independently drawn views of the input sequence.
    let mut rng_key = derive_rng(cfg.seed, Purpose::KeyAugment, coord, sample_index as u64);
    let x_key = apply_pipeline(seq, &Pipeline::normal(), &sample_params(frames, &mut rng_key), graph)?;
    let mut rng_query = derive_rng(cfg.seed, Purpose::QueryAugment, coord, sample_index as u64);
    let x_query = apply_pipeline(seq, &Pipeline::normal(), &sample_params(frames, &mut rng_query), graph)?;

    // Key embedding (no gradient path).
    let (_, z_key) = embed(&pair.key, &cfg.encoder, &x_key, adj)?;

    let mut tape = Tape::new();
    let tp = register_params(&mut tape, &pair.query, &cfg.encoder, true)?;

    let (_, h_query) = encode(&mut tape, &tp, &cfg.encoder, &x_query, adj)?;
    let z_query = project(&mut tape, &tp, h_query)?;

    // Fixed target distribution from the normally augmented query.
    let p_hat = conditional_distribution(tape.data(z_query), &z_key, bank, cfg.tau)?;

    // Extreme branch: one encoder pass shared by the plain and dropped heads.
    let use_extreme = cfg.beta > 0.0;
    let mut z_extreme: Option<TensorRef> = None;
    let mut z_extreme_drop: Option<TensorRef> = None;
    if use_extreme {
        let mut rng_ext =
            derive_rng(cfg.seed, Purpose::ExtremeAugment, coord, sample_index as u64);
        let x_extreme = apply_pipeline(
            seq,
            &Pipeline::extreme(),
            &sample_params(frames, &mut rng_ext),
            graph,
        )?;
        let (fmap, h_ext) = encode(&mut tape, &tp, &cfg.encoder, &x_extreme, adj)?;
        z_extreme = Some(project(&mut tape, &tp, h_ext)?);
        // Degenerate all-drop masks fall back to the undropped feature map.
        let dropped = match drop_on_tape(&mut tape, fmap, cfg.energy_lambda, cfg.keep_margin) {
            Ok(d) => d,
            Err(Error::AllDropped(_)) => fmap,
            Err(e) => return Err(e),
        };
        let h_drop = pool_feature(&mut tape, dropped)?;
        z_extreme_drop = Some(project(&mut tape, &tp, h_drop)?);
    }

    // Main contrastive term: InfoNCE in stage one, mined neighbors after.
    let main = if stage_two {
        let mut sets: Vec<Vec<usize>> = vec![mine_neighbors(tape.data(z_query), bank, cfg.nnm_k)];
        if let Some(zt) = z_extreme {
            sets.push(mine_neighbors(tape.data(zt), bank, cfg.nnm_k));
        }
        if let Some(zd) = z_extreme_drop {
            sets.push(mine_neighbors(tape.data(zd), bank, cfg.nnm_k));
        }
        let refs: Vec<&[usize]> = sets.iter().map(|s| s.as_slice()).collect();
        let n_plus = union_indices(&refs);
        nnm_on_tape(&mut tape, z_query, &z_key, bank, cfg.tau, &n_plus)?
    } else {
        info_nce_on_tape(&mut tape, z_query, &z_key, bank, cfg.tau)?
    };

    let (total, l_d1_val, l_d2_val) = if use_extreme {
        let dist_ext = distribution_on_tape(&mut tape, z_extreme.unwrap(), &z_key, bank, cfg.tau)?;
        let l_d1 = cross_entropy_const_target(&mut tape, &p_hat, dist_ext)?;
        let dist_drop =
            distribution_on_tape(&mut tape, z_extreme_drop.unwrap(), &z_key, bank, cfg.tau)?;
        let l_d2 = cross_entropy_const_target(&mut tape, &p_hat, dist_drop)?;
        let d_sum = tape.add(l_d1, l_d2)?;
        let l_d = tape.mul_scalar(d_sum, 0.5);
        let main_scaled = tape.mul_scalar(main, cfg.alpha);
        let d_scaled = tape.mul_scalar(l_d, cfg.beta);
        let total = tape.add(main_scaled, d_scaled)?;
        (total, tape.value(l_d1), tape.value(l_d2))
    } else {
        (tape.mul_scalar(main, cfg.alpha), 0.0, 0.0)
    };

    let main_val = tape.value(main);
    let total_val = tape.value(total);
    tape.backward(total)?;
    let grads = flat_refs(&tp)
        .into_iter()
        .map(|r| tape.grad_or_zeros(r))
        .collect();
    Ok(SampleOutcome {
        grads,
        z_key,
        main: main_val,
        l_d1: l_d1_val,
        l_d2: l_d2_val,
        total: total_val,
    })
}

/// Worker cap: the AIMCLR_THREADS environment variable when set, otherwise
/// the machine's available parallelism.
pub fn worker_count() -> usize {
    if let Ok(v) = std::env::var("AIMCLR_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Index-preserving parallel map over a batch; results are reduced in input
/// order so worker count never changes outcomes.
fn map_batch<R: Send>(
    n: usize,
    workers: usize,
    f: impl Fn(usize) -> R + Sync,
) -> Vec<R> {
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let workers = workers.min(n);
    let chunk = n.div_ceil(workers);
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let slot_chunks: Vec<&mut [Option<R>]> = slots.chunks_mut(chunk).collect();
    std::thread::scope(|scope| {
        for (w, out) in slot_chunks.into_iter().enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (offset, slot) in out.iter_mut().enumerate() {
                    *slot = Some(f(w * chunk + offset));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.unwrap()).collect()
}

/// One optimization step over a batch: forward/backward per sample, averaged
/// gradients, SGD update, key momentum update, then bank enqueue.
pub fn pretrain_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &[&SkeletonSequence],
    graph: &SkeletonGraph,
    adj: &[f64],
    epoch: usize,
    step: usize,
) -> Result<StepRecord> {
    let stage_two = cfg.is_stage_two(epoch);
    let workers = worker_count();
    let outcomes: Vec<Result<SampleOutcome>> = map_batch(batch.len(), workers, |i| {
        process_sample(
            batch[i], cfg, &state.pair, &state.bank, adj, graph, epoch, step, i, stage_two,
        )
    });
    let mut collected = Vec::with_capacity(batch.len());
    for o in outcomes {
        collected.push(o?);
    }
    for o in &collected {
        if !o.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step,
                components: format!("main={}, l_d1={}, l_d2={}", o.main, o.l_d1, o.l_d2),
            });
        }
    }
    let b = collected.len() as f64;
    let mut grads: Vec<Vec<f64>> = collected[0].grads.iter().map(|g| vec![0.0; g.len()]).collect();
    for o in &collected {
        for (acc, g) in grads.iter_mut().zip(o.grads.iter()) {
            for (a, v) in acc.iter_mut().zip(g.iter()) {
                *a += v;
            }
        }
    }
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v /= b;
        }
    }
    let lr = cfg.lr_at_epoch(epoch);
    sgd_update(
        &mut state.pair.query,
        &grads,
        &mut state.velocity,
        lr,
        cfg.sgd_momentum,
        cfg.weight_decay,
    );
    state.pair.momentum_update();
    let keys: Vec<Vec<f64>> = collected.iter().map(|o| o.z_key.clone()).collect();
    state.bank.enqueue(&keys)?;

    let mean = |f: fn(&SampleOutcome) -> f64| collected.iter().map(f).sum::<f64>() / b;
    let main_mean = mean(|o| o.main);
    Ok(StepRecord {
        epoch,
        step,
        l_info: (!stage_two).then_some(main_mean),
        l_n: stage_two.then_some(main_mean),
        l_d1: mean(|o| o.l_d1),
        l_d2: mean(|o| o.l_d2),
        total: mean(|o| o.total),
        lr,
    })
}

/// Artifacts produced by a pretraining run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub last_checkpoint: PathBuf,
    pub last_state: PathBuf,
    pub loss_history: Vec<f64>,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("ep{epoch}.ckpt"))
}

pub fn state_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("state_ep{epoch}.bin"))
}

/// Full pretraining driver: loads data, runs the epoch loop with the stage
/// switch and the learning-rate drop, writes a checkpoint and a resumable
/// state per epoch plus a line-delimited metrics log.
pub fn run_pretraining(
    cfg: &TrainConfig,
    manifest_path: &Path,
    graph_path: &Path,
    out_dir: &Path,
    resume_state: Option<&Path>,
) -> Result<RunSummary> {
    cfg.validate()?;
    let graph = SkeletonGraph::load(graph_path)?;
    let raw = load_dataset(manifest_path)?;
    let mut data = Vec::with_capacity(raw.len());
    for seq in &raw {
        if seq.joints != graph.num_joints {
            return Err(Error::invalid(
                "run_pretraining",
                format!(
                    "sequence has {} joints but graph has {}",
                    seq.joints, graph.num_joints
                ),
            ));
        }
        data.push(apply_stream(seq, cfg.stream, &graph)?);
    }
    if data.is_empty() {
        return Err(Error::InvalidManifest("empty dataset".into()));
    }
    let adj = normalized_adjacency(&graph);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    cfg.save(&out_dir.join("config.json"))?;

    let mut state = match resume_state {
        Some(p) => TrainState::from_snapshot(&TrainStateSnapshot::load(p)?, cfg)?,
        None => TrainState::new(cfg),
    };
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = if resume_state.is_some() {
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?
    } else {
        fs::File::create(&metrics_path)
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?
    };

    let mut last_ckpt = PathBuf::new();
    let mut last_state = PathBuf::new();
    for epoch in state.epoch_next..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = derive_rng(cfg.seed, Purpose::Shuffle, epoch as u64, 0);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SkeletonSequence> = chunk.iter().map(|&i| &data[i]).collect();
            let record = pretrain_step(&mut state, cfg, &batch, &graph, &adj, epoch, step)?;
            epoch_total += record.total;
            steps += 1;
            let line = serde_json::to_string(&record)?;
            metrics
                .write_all(line.as_bytes())
                .and_then(|_| metrics.write_all(b"\n"))
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
        }
        state.loss_history.push(epoch_total / steps as f64);
        state.epoch_next = epoch + 1;
        last_ckpt = checkpoint_path(out_dir, epoch);
        save_checkpoint(&last_ckpt, &state.pair.query, &cfg.encoder)?;
        last_state = state_path(out_dir, epoch);
        state.snapshot().save(&last_state)?;
    }
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        metrics_path,
        last_checkpoint: last_ckpt,
        last_state,
        loss_history: state.loss_history,
    })
}
