//! Downstream evaluation protocols: KNN on frozen features, linear probe,
//! semi-supervised / full finetune, multi-stream score fusion and embedding
//! export.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    embed, encode, normalized_adjacency, register_params, EncoderConfig, ModelParams,
};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, Purpose};
use crate::skeleton::{SkeletonGraph, SkeletonSequence};
use crate::tensor::Tape;
use crate::train::{sgd_update, worker_count};

/// Outcome of one evaluation protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub num_train: usize,
    pub num_test: usize,
    pub streams: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_weights: Option<Vec<f64>>,
}

impl EvalReport {
    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "protocol: {}\nstreams: {}\ntrain/test: {}/{}\ntop-1: {:.4}\n",
            self.protocol,
            self.streams.join("+"),
            self.num_train,
            self.num_test,
            self.top1
        ));
        if let Some(w) = &self.fusion_weights {
            out.push_str(&format!(
                "weights: {}\n",
                w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            ));
        }
        out.push_str("class  accuracy\n");
        for (c, acc) in self.per_class.iter().enumerate() {
            out.push_str(&format!("{c:>5}  {acc:.4}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Per-sample class scores for one test set, the unit of stream fusion.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreSet {
    pub stream: String,
    pub labels: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn labels_of(seqs: &[SkeletonSequence], context: &str) -> Result<Vec<usize>> {
    seqs.iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::InvalidManifest(format!("unlabeled sequence in {context}")))
        })
        .collect()
}

/// Frozen pooled features h for every sequence, in input order.
pub fn extract_features(
    params: &ModelParams,
    cfg: &EncoderConfig,
    graph: &SkeletonGraph,
    seqs: &[SkeletonSequence],
) -> Result<Vec<Vec<f64>>> {
    let adj = normalized_adjacency(graph);
    let workers = worker_count();
    let results: Vec<Result<Vec<f64>>> = map_indexed(seqs.len(), workers, |i| {
        embed(params, cfg, &seqs[i], &adj).map(|(h, _)| h)
    });
    results.into_iter().collect()
}

fn map_indexed<R: Send>(n: usize, workers: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let workers = workers.min(n);
    let chunk = n.div_ceil(workers);
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let chunks: Vec<&mut [Option<R>]> = slots.chunks_mut(chunk).collect();
    std::thread::scope(|scope| {
        for (w, out) in chunks.into_iter().enumerate() {
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

/// Unit-normalize feature vectors in place; zero vectors are left alone.
/// The encoder has no batch normalization, so raw pooled-feature magnitudes
/// drift freely during pretraining; classifier training uses directions only.
fn normalize_features(feats: &mut [Vec<f64>]) {
    for f in feats.iter_mut() {
        let n: f64 = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            for v in f.iter_mut() {
                *v /= n;
            }
        }
    }
}

/// Mean feature of the training set; subtracted before probing. Mean-pooled
/// ReLU features share a large constant component across samples that would
/// otherwise dwarf the class signal.
fn feature_mean(feats: &[Vec<f64>]) -> Vec<f64> {
    let dim = feats[0].len();
    let mut mean = vec![0.0f64; dim];
    for f in feats {
        for (m, v) in mean.iter_mut().zip(f.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= feats.len() as f64;
    }
    mean
}

fn center_features(feats: &mut [Vec<f64>], mean: &[f64]) {
    for f in feats.iter_mut() {
        for (v, m) in f.iter_mut().zip(mean.iter()) {
            *v -= m;
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn report_from_predictions(
    protocol: &str,
    stream: &str,
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
    num_train: usize,
) -> EvalReport {
    let mut per_class_correct = vec![0usize; num_classes];
    let mut per_class_total = vec![0usize; num_classes];
    let mut correct = 0usize;
    for (&pred, &truth) in predictions.iter().zip(labels.iter()) {
        per_class_total[truth] += 1;
        if pred == truth {
            per_class_correct[truth] += 1;
            correct += 1;
        }
    }
    EvalReport {
        protocol: protocol.into(),
        top1: correct as f64 / labels.len() as f64,
        per_class: per_class_correct
            .iter()
            .zip(per_class_total.iter())
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect(),
        num_train,
        num_test: labels.len(),
        streams: vec![stream.into()],
        fusion_weights: None,
    }
}

/// Classify test features by cosine similarity against train features:
/// majority vote among the k nearest, ties resolved by the nearest member
/// of the tied labels.
pub fn knn_predict(
    train_feats: &[Vec<f64>],
    train_labels: &[usize],
    test_feats: &[Vec<f64>],
    k: usize,
    num_classes: usize,
) -> Vec<usize> {
    let k = k.max(1).min(train_feats.len());
    test_feats
        .iter()
        .map(|f| {
            let mut sims: Vec<(usize, f64)> = train_feats
                .iter()
                .enumerate()
                .map(|(i, tf)| (i, cosine(f, tf)))
                .collect();
            sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let top = &sims[..k];
            let mut votes = vec![0usize; num_classes];
            for (i, _) in top {
                votes[train_labels[*i]] += 1;
            }
            let best_votes = *votes.iter().max().unwrap();
            // Nearest neighbor among the tied classes wins.
            top.iter()
                .map(|(i, _)| train_labels[*i])
                .find(|l| votes[*l] == best_votes)
                .unwrap()
        })
        .collect()
}

/// KNN evaluation protocol over frozen encoder features.
#[allow(clippy::too_many_arguments)]
pub fn knn_eval(
    params: &ModelParams,
    cfg: &EncoderConfig,
    graph: &SkeletonGraph,
    train: &[SkeletonSequence],
    test: &[SkeletonSequence],
    num_classes: usize,
    k_eval: usize,
    stream: &str,
) -> Result<EvalReport> {
    let train_labels = labels_of(train, "knn train set")?;
    let test_labels = labels_of(test, "knn test set")?;
    let train_feats = extract_features(params, cfg, graph, train)?;
    let test_feats = extract_features(params, cfg, graph, test)?;
    let predictions = knn_predict(&train_feats, &train_labels, &test_feats, k_eval, num_classes);
    Ok(report_from_predictions(
        "knn",
        stream,
        &predictions,
        &test_labels,
        num_classes,
        train.len(),
    ))
}

/// Options shared by the classifier-based protocols.
#[derive(Debug, Clone)]
pub struct ClassifierOpts {
    pub epochs: usize,
    pub lr: f64,
    /// None trains full batch.
    pub batch_size: Option<usize>,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ClassifierOpts {
    fn default() -> Self {
        ClassifierOpts {
            epochs: 60,
            lr: 0.5,
            batch_size: Some(32),
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Linear softmax classifier on fixed features, trained with SGD. Returns
/// the weight matrix `[classes, dim]`, bias, and the per-epoch training loss.
pub fn train_linear_classifier(
    feats: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    opts: &ClassifierOpts,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = feats.len();
    let dim = feats[0].len();
    let mut w = vec![0.0f64; num_classes * dim];
    let mut b = vec![0.0f64; num_classes];
    let mut vel_w = vec![0.0f64; w.len()];
    let mut vel_b = vec![0.0f64; b.len()];
    let mut losses = Vec::with_capacity(opts.epochs);
    let batch = opts.batch_size.unwrap_or(n).max(1);
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if opts.batch_size.is_some() {
            let mut rng = derive_rng(opts.seed, Purpose::ClassifierTrain, epoch as u64, 0);
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch) {
            let m = chunk.len() as f64;
            let mut grad_w = vec![0.0f64; w.len()];
            let mut grad_b = vec![0.0f64; b.len()];
            let mut loss = 0.0;
            for &i in chunk {
                let f = &feats[i];
                let mut logits = b.clone();
                for (c, l) in logits.iter_mut().enumerate() {
                    let row = &w[c * dim..(c + 1) * dim];
                    *l += row.iter().zip(f.iter()).map(|(a, x)| a * x).sum::<f64>();
                }
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
                loss += -(probs[labels[i]].ln());
                for c in 0..num_classes {
                    let delta = probs[c] - if c == labels[i] { 1.0 } else { 0.0 };
                    grad_b[c] += delta;
                    let row = &mut grad_w[c * dim..(c + 1) * dim];
                    for (g, x) in row.iter_mut().zip(f.iter()) {
                        *g += delta * x;
                    }
                }
            }
            for g in grad_w.iter_mut() {
                *g /= m;
            }
            for g in grad_b.iter_mut() {
                *g /= m;
            }
            for i in 0..w.len() {
                vel_w[i] = opts.momentum * vel_w[i] + grad_w[i];
                w[i] -= opts.lr * vel_w[i];
            }
            for i in 0..b.len() {
                vel_b[i] = opts.momentum * vel_b[i] + grad_b[i];
                b[i] -= opts.lr * vel_b[i];
            }
            epoch_loss += loss / m;
            steps += 1;
        }
        losses.push(epoch_loss / steps.max(1) as f64);
    }
    Ok((w, b, losses))
}

fn classifier_scores(w: &[f64], b: &[f64], feats: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = if feats.is_empty() { 0 } else { feats[0].len() };
    feats
        .iter()
        .map(|f| {
            let mut logits = b.to_vec();
            for (c, l) in logits.iter_mut().enumerate() {
                let row = &w[c * dim..(c + 1) * dim];
                *l += row.iter().zip(f.iter()).map(|(a, x)| a * x).sum::<f64>();
            }
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        })
        .collect()
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Linear evaluation protocol: encoder frozen, affine + softmax trained on
/// its pooled features.
#[allow(clippy::too_many_arguments)]
pub fn linear_eval(
    params: &ModelParams,
    cfg: &EncoderConfig,
    graph: &SkeletonGraph,
    train: &[SkeletonSequence],
    test: &[SkeletonSequence],
    num_classes: usize,
    opts: &ClassifierOpts,
    stream: &str,
) -> Result<(EvalReport, ScoreSet)> {
    let train_labels = labels_of(train, "linear train set")?;
    let test_labels = labels_of(test, "linear test set")?;
    let mut train_feats = extract_features(params, cfg, graph, train)?;
    let mut test_feats = extract_features(params, cfg, graph, test)?;
    let mean = feature_mean(&train_feats);
    center_features(&mut train_feats, &mean);
    center_features(&mut test_feats, &mean);
    normalize_features(&mut train_feats);
    normalize_features(&mut test_feats);
    let (w, b, _) = train_linear_classifier(&train_feats, &train_labels, num_classes, opts)?;
    let scores = classifier_scores(&w, &b, &test_feats);
    let predictions: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let report = report_from_predictions(
        "linear",
        stream,
        &predictions,
        &test_labels,
        num_classes,
        train.len(),
    );
    Ok((
        report,
        ScoreSet {
            stream: stream.into(),
            labels: test_labels,
            scores,
        },
    ))
}

/// Per-class stratified subsample with at least one sample per class.
/// Returns selected indices in ascending order; deterministic per seed.
pub fn subsample_per_class(
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::invalid(
            "subsample_per_class",
            format!("label fraction {fraction} outside (0, 1]"),
        ));
    }
    let mut picked = Vec::new();
    for class in 0..num_classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        let keep = ((members.len() as f64 * fraction).round() as usize).max(1);
        let mut rng = derive_rng(seed, Purpose::EvalSubsample, class as u64, 0);
        members.shuffle(&mut rng);
        picked.extend(members.into_iter().take(keep));
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Finetune protocol: a linear classifier on h with the whole encoder
/// trainable. `label_fraction` subsamples the train set per class;
/// 1.0 is the full finetune protocol.
#[allow(clippy::too_many_arguments)]
pub fn finetune_eval(
    params: &ModelParams,
    cfg: &EncoderConfig,
    graph: &SkeletonGraph,
    train: &[SkeletonSequence],
    label_fraction: f64,
    test: &[SkeletonSequence],
    num_classes: usize,
    opts: &ClassifierOpts,
    stream: &str,
) -> Result<(EvalReport, ScoreSet)> {
    let all_labels = labels_of(train, "finetune train set")?;
    let test_labels = labels_of(test, "finetune test set")?;
    let picked = subsample_per_class(&all_labels, num_classes, label_fraction, opts.seed)?;
    let selected: Vec<&SkeletonSequence> = picked.iter().map(|&i| &train[i]).collect();
    let selected_labels: Vec<usize> = picked.iter().map(|&i| all_labels[i]).collect();

    let adj = normalized_adjacency(graph);
    let mut model = params.clone();
    let dim = cfg.feature_dim;
    let mut w = vec![0.0f64; num_classes * dim];
    let mut b = vec![0.0f64; num_classes];
    let mut vel_model: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut vel_w = vec![0.0f64; w.len()];
    let mut vel_b = vec![0.0f64; b.len()];
    let batch = opts.batch_size.unwrap_or(selected.len()).max(1);
    let workers = worker_count();

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..selected.len()).collect();
        let mut rng = derive_rng(opts.seed, Purpose::ClassifierTrain, epoch as u64, 1);
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let m = chunk.len() as f64;
            let outcomes: Vec<Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)>> =
                map_indexed(chunk.len(), workers, |ci| {
                    let i = chunk[ci];
                    supervised_sample_grads(
                        selected[i],
                        selected_labels[i],
                        &model,
                        cfg,
                        &adj,
                        &w,
                        &b,
                        num_classes,
                    )
                });
            let mut grads: Option<Vec<Vec<f64>>> = None;
            let mut gw = vec![0.0f64; w.len()];
            let mut gb = vec![0.0f64; b.len()];
            for o in outcomes {
                let (g_model, g_w, g_b) = o?;
                match &mut grads {
                    None => grads = Some(g_model),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(g_model.iter()) {
                            for (x, y) in a.iter_mut().zip(g.iter()) {
                                *x += y;
                            }
                        }
                    }
                }
                for (x, y) in gw.iter_mut().zip(g_w.iter()) {
                    *x += y;
                }
                for (x, y) in gb.iter_mut().zip(g_b.iter()) {
                    *x += y;
                }
            }
            let mut grads = grads.unwrap();
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v /= m;
                }
            }
            for v in gw.iter_mut() {
                *v /= m;
            }
            for v in gb.iter_mut() {
                *v /= m;
            }
            sgd_update(&mut model, &grads, &mut vel_model, opts.lr, opts.momentum, 0.0);
            for i in 0..w.len() {
                vel_w[i] = opts.momentum * vel_w[i] + gw[i];
                w[i] -= opts.lr * vel_w[i];
            }
            for i in 0..b.len() {
                vel_b[i] = opts.momentum * vel_b[i] + gb[i];
                b[i] -= opts.lr * vel_b[i];
            }
        }
    }

    let mut test_feats = extract_features(&model, cfg, graph, test)?;
    normalize_features(&mut test_feats);
    let scores = classifier_scores(&w, &b, &test_feats);
    let predictions: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let protocol = if (label_fraction - 1.0).abs() < 1e-12 {
        "finetune".to_string()
    } else {
        format!("semi_supervised_{label_fraction}")
    };
    let report = report_from_predictions(
        &protocol,
        stream,
        &predictions,
        &test_labels,
        num_classes,
        selected.len(),
    );
    Ok((
        report,
        ScoreSet {
            stream: stream.into(),
            labels: test_labels,
            scores,
        },
    ))
}

/// Cross-entropy gradients of one supervised sample with respect to every
/// encoder parameter and the classifier.
#[allow(clippy::too_many_arguments)]
fn supervised_sample_grads(
    seq: &SkeletonSequence,
    label: usize,
    model: &ModelParams,
    cfg: &EncoderConfig,
    adj: &[f64],
    w: &[f64],
    b: &[f64],
    num_classes: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let dim = cfg.feature_dim;
    let mut tape = Tape::new();
    let tp = register_params(&mut tape, model, cfg, true)?;
    let (_, h) = encode(&mut tape, &tp, cfg, seq, adj)?;
    let h = tape.l2_normalize(h, 0)?;
    let w_t = tape.leaf(w.to_vec(), vec![num_classes, dim], true)?;
    let b_t = tape.leaf(b.to_vec(), vec![num_classes], true)?;
    let h_col = tape.reshape(h, &[dim, 1])?;
    let logits = tape.matmul(w_t, h_col)?;
    let b_col = tape.reshape(b_t, &[num_classes, 1])?;
    let logits = tape.add(logits, b_col)?;
    let probs = tape.softmax(logits, 0)?;
    let lp = tape.log(probs);
    let mut pick = vec![0.0f64; num_classes];
    pick[label] = 1.0;
    let picked = tape.mask_mul(lp, &pick)?;
    let s = tape.sum_all(picked)?;
    let loss = tape.neg(s);
    tape.backward(loss)?;
    let mut refs = Vec::new();
    for blk in &tp.blocks {
        refs.extend([blk.point_w, blk.temp_w]);
    }
    refs.extend([tp.head.fc1_w, tp.head.fc2_w]);
    let g_model = refs.into_iter().map(|r| tape.grad_or_zeros(r)).collect();
    Ok((g_model, tape.grad_or_zeros(w_t), tape.grad_or_zeros(b_t)))
}

/// Weighted score fusion across streams: fused = sum_s w_s * score_s,
/// prediction by argmax. All score sets must describe the same test set.
pub fn fuse_streams(sets: &[ScoreSet], weights: &[f64], num_classes: usize) -> Result<EvalReport> {
    if sets.is_empty() || sets.len() != weights.len() {
        return Err(Error::invalid(
            "fuse_streams",
            format!("{} score sets but {} weights", sets.len(), weights.len()),
        ));
    }
    let labels = &sets[0].labels;
    for s in sets.iter().skip(1) {
        if s.labels != *labels {
            return Err(Error::invalid(
                "fuse_streams",
                "score sets describe different test sets",
            ));
        }
    }
    let n = labels.len();
    let mut predictions = Vec::with_capacity(n);
    for i in 0..n {
        let mut fused = vec![0.0f64; num_classes];
        for (s, &wt) in sets.iter().zip(weights.iter()) {
            if s.scores[i].len() != num_classes {
                return Err(Error::invalid(
                    "fuse_streams",
                    format!(
                        "score vector has {} entries, expected {num_classes}",
                        s.scores[i].len()
                    ),
                ));
            }
            for (f, &v) in fused.iter_mut().zip(s.scores[i].iter()) {
                *f += wt * v;
            }
        }
        predictions.push(argmax(&fused));
    }
    let mut report = report_from_predictions("fusion", "", &predictions, labels, num_classes, 0);
    report.streams = sets.iter().map(|s| s.stream.clone()).collect();
    report.fusion_weights = Some(weights.to_vec());
    Ok(report)
}

/// Export one line-delimited record `{id, label, h}` per manifest entry, in
/// manifest order.
pub fn export_embeddings(
    params: &ModelParams,
    cfg: &EncoderConfig,
    graph: &SkeletonGraph,
    seqs: &[SkeletonSequence],
    ids: &[String],
    out_path: &Path,
) -> Result<()> {
    #[derive(Serialize)]
    struct Record<'a> {
        id: &'a str,
        label: Option<usize>,
        h: &'a [f64],
    }
    let feats = extract_features(params, cfg, graph, seqs)?;
    let mut f =
        fs::File::create(out_path).map_err(|e| Error::io(out_path.display().to_string(), e))?;
    for ((seq, id), h) in seqs.iter().zip(ids.iter()).zip(feats.iter()) {
        let line = serde_json::to_string(&Record {
            id,
            label: seq.label,
            h,
        })?;
        f.write_all(line.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(|e| Error::io(out_path.display().to_string(), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;
    use crate::skeleton::{generate_synthetic, load_dataset, make_tree_graph};
    use rand::Rng;
    use tempfile::tempdir;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            channels: vec![4, 8],
            temporal_kernel: 3,
            temporal_strides: vec![2, 2],
            feature_dim: 8,
            projection_dim: 4,
        }
    }

    fn tiny_setup() -> (EncoderConfig, ModelParams, SkeletonGraph, Vec<SkeletonSequence>) {
        let dir = tempdir().unwrap();
        let m = generate_synthetic(dir.path(), 3, 8, 16, 9, 1, 21, "seq_").unwrap();
        let mp = dir.path().join("manifest.json");
        m.save(&mp).unwrap();
        let data = load_dataset(&mp).unwrap();
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, &mut derive_rng(1, Purpose::ParamInit, 0, 0));
        (cfg, params, make_tree_graph(9), data)
    }

    #[test]
    fn knn_on_itself_is_perfect() {
        let (cfg, params, graph, data) = tiny_setup();
        let report = knn_eval(&params, &cfg, &graph, &data, &data, 3, 1, "joint").unwrap();
        assert_eq!(report.top1, 1.0);
        assert!(report.per_class.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        // Independent oracle: all-pairs cosine, pick the most similar.
        let (cfg, params, graph, data) = tiny_setup();
        let (train, test) = data.split_at(16);
        let train_feats = extract_features(&params, &cfg, &graph, train).unwrap();
        let test_feats = extract_features(&params, &cfg, &graph, test).unwrap();
        let train_labels: Vec<usize> = train.iter().map(|s| s.label.unwrap()).collect();
        let got = knn_predict(&train_feats, &train_labels, &test_feats, 1, 3);
        for (i, tf) in test_feats.iter().enumerate() {
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for (j, trf) in train_feats.iter().enumerate() {
                let dot: f64 = tf.iter().zip(trf.iter()).map(|(a, b)| a * b).sum();
                let sim = dot
                    / (tf.iter().map(|v| v * v).sum::<f64>().sqrt()
                        * trf.iter().map(|v| v * v).sum::<f64>().sqrt());
                if sim > best_sim {
                    best_sim = sim;
                    best = j;
                }
            }
            assert_eq!(got[i], train_labels[best], "test sample {i}");
        }
    }

    #[test]
    fn linear_probe_learns_separable_features() {
        // Hand-built linearly separable features: class c peaks coordinate c.
        let mut rng = seed_rng(2);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for class in 0..3usize {
            for _ in 0..20 {
                let mut f = vec![0.0f64; 4];
                for v in f.iter_mut() {
                    *v = rng.gen_range(-0.1..0.1);
                }
                f[class] += 1.0;
                feats.push(f);
                labels.push(class);
            }
        }
        let opts = ClassifierOpts {
            epochs: 80,
            lr: 0.5,
            batch_size: Some(16),
            momentum: 0.9,
            seed: 3,
        };
        let (w, b, _) = train_linear_classifier(&feats, &labels, 3, &opts).unwrap();
        let scores = classifier_scores(&w, &b, &feats);
        let correct = scores
            .iter()
            .zip(labels.iter())
            .filter(|(s, &l)| argmax(s) == l)
            .count();
        assert_eq!(correct, feats.len());
    }

    #[test]
    fn full_batch_training_loss_is_non_increasing() {
        let mut rng = seed_rng(4);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2usize {
            for _ in 0..12 {
                let mut f = vec![0.0f64; 3];
                for v in f.iter_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
                f[class] += 0.8;
                feats.push(f);
                labels.push(class);
            }
        }
        let opts = ClassifierOpts {
            epochs: 40,
            lr: 0.2,
            batch_size: None,
            momentum: 0.0,
            seed: 0,
        };
        let (_, _, losses) = train_linear_classifier(&feats, &labels, 2, &opts).unwrap();
        for pair in losses.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn linear_eval_leaves_encoder_untouched() {
        let (cfg, params, graph, data) = tiny_setup();
        let before = params.clone();
        let opts = ClassifierOpts {
            epochs: 3,
            ..ClassifierOpts::default()
        };
        linear_eval(&params, &cfg, &graph, &data, &data, 3, &opts, "joint").unwrap();
        assert_eq!(before, params);
    }

    #[test]
    fn subsample_counts_and_determinism() {
        let labels: Vec<usize> = (0..256).map(|i| i / 64).collect();
        let picked = subsample_per_class(&labels, 4, 0.1, 7).unwrap();
        // 64 per class * 0.1 rounds to 6 -> 24 total, at least one per class.
        assert_eq!(picked.len(), 24);
        for class in 0..4 {
            assert!(picked.iter().any(|&i| labels[i] == class));
        }
        let again = subsample_per_class(&labels, 4, 0.1, 7).unwrap();
        assert_eq!(picked, again);
        // Tiny fraction still keeps one per class.
        let minimal = subsample_per_class(&labels, 4, 0.001, 7).unwrap();
        assert_eq!(minimal.len(), 4);
        // Fraction 1.0 selects everything.
        let all = subsample_per_class(&labels, 4, 1.0, 7).unwrap();
        assert_eq!(all.len(), 256);
    }

    #[test]
    fn finetune_with_zero_epochs_is_a_consistent_baseline() {
        let (cfg, params, graph, data) = tiny_setup();
        let opts = ClassifierOpts {
            epochs: 0,
            seed: 5,
            ..ClassifierOpts::default()
        };
        let (r1, s1) =
            finetune_eval(&params, &cfg, &graph, &data, 0.5, &data, 3, &opts, "joint").unwrap();
        let (r2, s2) =
            finetune_eval(&params, &cfg, &graph, &data, 0.5, &data, 3, &opts, "joint").unwrap();
        assert_eq!(r1.top1, r2.top1);
        assert_eq!(s1, s2);
    }

    #[test]
    fn finetune_can_fit_the_training_set() {
        let (cfg, params, graph, data) = tiny_setup();
        let opts = ClassifierOpts {
            epochs: 40,
            lr: 0.05,
            batch_size: Some(8),
            momentum: 0.9,
            seed: 6,
        };
        let (report, _) =
            finetune_eval(&params, &cfg, &graph, &data, 1.0, &data, 3, &opts, "joint").unwrap();
        assert!(report.top1 > 0.8, "finetuned train accuracy {}", report.top1);
    }

    #[test]
    fn fusion_matches_hand_computation() {
        // 2 samples, 2 classes, weighted sum picks different classes.
        let a = ScoreSet {
            stream: "joint".into(),
            labels: vec![0, 1],
            scores: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        };
        let b = ScoreSet {
            stream: "bone".into(),
            labels: vec![0, 1],
            scores: vec![vec![0.1, 0.9], vec![0.6, 0.4]],
        };
        // fused sample0 = 0.6*[0.9,0.1] + 0.4*[0.1,0.9] = [0.58, 0.42] -> 0
        // fused sample1 = 0.6*[0.2,0.8] + 0.4*[0.6,0.4] = [0.36, 0.64] -> 1
        let report = fuse_streams(&[a, b], &[0.6, 0.4], 2).unwrap();
        assert_eq!(report.top1, 1.0);
    }

    #[test]
    fn fusion_is_scale_invariant_and_identity_for_single_stream() {
        let s = ScoreSet {
            stream: "joint".into(),
            labels: vec![0, 1, 1],
            scores: vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.9, 0.1]],
        };
        let single = fuse_streams(std::slice::from_ref(&s), &[1.0], 2).unwrap();
        let r1 = fuse_streams(&[s.clone(), s.clone()], &[0.6, 0.4], 2).unwrap();
        let r2 = fuse_streams(&[s.clone(), s.clone()], &[6.0, 4.0], 2).unwrap();
        assert_eq!(r1.top1, r2.top1);
        // Two identical streams with any positive weights match the single stream.
        assert_eq!(single.top1, r1.top1);
    }

    #[test]
    fn export_embeddings_is_ordered_and_reproducible() {
        let dir = tempdir().unwrap();
        let (cfg, params, graph, data) = tiny_setup();
        let ids: Vec<String> = (0..data.len()).map(|i| format!("seq_{i:04}")).collect();
        let p1 = dir.path().join("e1.jsonl");
        let p2 = dir.path().join("e2.jsonl");
        export_embeddings(&params, &cfg, &graph, &data, &ids, &p1).unwrap();
        export_embeddings(&params, &cfg, &graph, &data, &ids, &p2).unwrap();
        let b1 = fs::read(&p1).unwrap();
        let b2 = fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        let text = String::from_utf8(b1).unwrap();
        assert_eq!(text.lines().count(), data.len());
        assert!(text.lines().next().unwrap().contains("seq_0000"));
    }
}
