//! Spatial-temporal graph-convolution encoder pair with MLP projection head.
//!
//! Each block aggregates joints through a fixed symmetric-normalized
//! adjacency, applies a pointwise channel map plus ReLU, then a strided
//! temporal convolution. The key encoder tracks the query encoder by
//! exponential moving average and never receives gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{SkeletonGraph, SkeletonSequence};
use crate::tensor::{Tape, TensorRef};

/// Raw coordinate channels expected at the encoder input.
pub const IN_CHANNELS: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Output channel width of each spatial-temporal block.
    pub channels: Vec<usize>,
    pub temporal_kernel: usize,
    /// Temporal stride per block (subsamples T).
    pub temporal_strides: Vec<usize>,
    /// Pooled feature dimension h; equals the last block width.
    pub feature_dim: usize,
    /// Projection embedding dimension z.
    pub projection_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![16, 32, 64],
            temporal_kernel: 5,
            temporal_strides: vec![2, 2, 2],
            feature_dim: 64,
            projection_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("encoder_config", "no blocks"));
        }
        if self.channels.len() != self.temporal_strides.len() {
            return Err(Error::invalid(
                "encoder_config",
                format!(
                    "{} channel widths but {} strides",
                    self.channels.len(),
                    self.temporal_strides.len()
                ),
            ));
        }
        if self.temporal_kernel == 0 || self.temporal_kernel % 2 == 0 {
            return Err(Error::invalid("encoder_config", "temporal kernel must be odd"));
        }
        if self.channels.iter().any(|&c| c == 0)
            || self.temporal_strides.iter().any(|&s| s == 0)
            || self.feature_dim == 0
            || self.projection_dim == 0
        {
            return Err(Error::invalid("encoder_config", "all dims must be >= 1"));
        }
        if *self.channels.last().unwrap() != self.feature_dim {
            return Err(Error::invalid(
                "encoder_config",
                format!(
                    "feature_dim {} must equal last block width {}",
                    self.feature_dim,
                    self.channels.last().unwrap()
                ),
            ));
        }
        Ok(())
    }

    fn block_in_channels(&self, block: usize) -> usize {
        if block == 0 {
            IN_CHANNELS
        } else {
            self.channels[block - 1]
        }
    }
}

/// Symmetric-normalized adjacency D^{-1/2} (A + I) D^{-1/2} over the
/// undirected skeleton edges, row-major `[V,V]`.
pub fn normalized_adjacency(g: &SkeletonGraph) -> Vec<f64> {
    let v = g.num_joints;
    let mut a = vec![0.0f64; v * v];
    for i in 0..v {
        a[i * v + i] = 1.0;
    }
    for &(p, c) in &g.edges {
        a[p * v + c] = 1.0;
        a[c * v + p] = 1.0;
    }
    let mut deg = vec![0.0f64; v];
    for i in 0..v {
        deg[i] = a[i * v..(i + 1) * v].iter().sum();
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    for i in 0..v {
        for j in 0..v {
            a[i * v + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    a
}

// ── Parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub point_w: Vec<f64>,
    pub temp_w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub fc1_w: Vec<f64>,
    pub fc2_w: Vec<f64>,
}

/// All learnable parameters of one encoder + head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub blocks: Vec<BlockParams>,
    pub head: HeadParams,
}

impl ModelParams {
    /// Canonical (name, shape) list; defines the tensor order used by the
    /// optimizer, checkpoints and the momentum update.
    pub fn named_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            let c_in = cfg.block_in_channels(i);
            out.push((format!("encoder.block{i}.point_weight"), vec![c_out, c_in]));
            out.push((
                format!("encoder.block{i}.temporal_weight"),
                vec![c_out, c_out, cfg.temporal_kernel],
            ));
        }
        let h = cfg.feature_dim;
        let z = cfg.projection_dim;
        out.push(("head.fc1.weight".into(), vec![h, h]));
        out.push(("head.fc2.weight".into(), vec![z, h]));
        out
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let shapes = Self::named_shapes(cfg);
        let mut data: Vec<Vec<f64>> = shapes
            .iter()
            .map(|(_, s)| vec![0.0; s.iter().product()])
            .collect();
        Self::from_tensor_list(cfg, &mut data)
    }

    /// Scaled-uniform initialization (bound sqrt(6 / fan_in)).
    /// Convolution rows start with zero mean per output channel: ReLU inputs
    /// carry a large constant component, and without batch normalization a
    /// nonzero row mean would park every pooled feature on one shared ray.
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = Self::zeros(cfg);
        for (i, block) in params.blocks.iter_mut().enumerate() {
            let c_in = cfg.block_in_channels(i);
            let c_out = cfg.channels[i];
            fill_uniform(&mut block.point_w, c_in, rng);
            center_rows(&mut block.point_w, c_in);
            fill_uniform(&mut block.temp_w, c_out * cfg.temporal_kernel, rng);
            center_rows(&mut block.temp_w, c_out * cfg.temporal_kernel);
        }
        fill_uniform(&mut params.head.fc1_w, cfg.feature_dim, rng);
        fill_uniform(&mut params.head.fc2_w, cfg.feature_dim, rng);
        params
    }

    fn from_tensor_list(cfg: &EncoderConfig, data: &mut Vec<Vec<f64>>) -> Self {
        let mut it = data.drain(..);
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        for _ in 0..cfg.channels.len() {
            blocks.push(BlockParams {
                point_w: it.next().unwrap(),
                temp_w: it.next().unwrap(),
            });
        }
        let head = HeadParams {
            fc1_w: it.next().unwrap(),
            fc2_w: it.next().unwrap(),
        };
        ModelParams { blocks, head }
    }

    /// Tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.point_w);
            out.push(&b.temp_w);
        }
        out.push(&self.head.fc1_w);
        out.push(&self.head.fc2_w);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.point_w);
            out.push(&mut b.temp_w);
        }
        out.push(&mut self.head.fc1_w);
        out.push(&mut self.head.fc2_w);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuild from a canonical-order tensor list, validating shapes.
    pub fn from_tensors(cfg: &EncoderConfig, tensors: Vec<Vec<f64>>) -> Result<Self> {
        let shapes = Self::named_shapes(cfg);
        if tensors.len() != shapes.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(tensors.iter()) {
            let want: usize = shape.iter().product();
            if t.len() != want {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: expected {want} values, got {}",
                    t.len()
                )));
            }
        }
        let mut data = tensors;
        Ok(Self::from_tensor_list(cfg, &mut data))
    }
}

fn fill_uniform(w: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in w.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

fn center_rows(w: &mut [f64], row_len: usize) {
    for row in w.chunks_mut(row_len) {
        let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
}

/// Query parameters (gradient-trained) and key parameters (momentum-tracked).
#[derive(Debug, Clone)]
pub struct EncoderPair {
    pub query: ModelParams,
    pub key: ModelParams,
    pub momentum: f64,
}

impl EncoderPair {
    /// Key starts as an exact copy of the query.
    pub fn new(query: ModelParams, momentum: f64) -> Self {
        let key = query.clone();
        EncoderPair {
            query,
            key,
            momentum,
        }
    }

    /// Eq. of motion for the key parameters: k <- m*k + (1-m)*q elementwise.
    pub fn momentum_update(&mut self) {
        let m = self.momentum;
        let q_tensors: Vec<Vec<f64>> = self.query.tensors().into_iter().cloned().collect();
        for (k, q) in self.key.tensors_mut().into_iter().zip(q_tensors.iter()) {
            for (kv, qv) in k.iter_mut().zip(q.iter()) {
                *kv = m * *kv + (1.0 - m) * qv;
            }
        }
    }
}

// ── Tape forward ────────────────────────────────────────────────────────

pub struct TapeBlock {
    pub point_w: TensorRef,
    pub temp_w: TensorRef,
}

pub struct TapeHead {
    pub fc1_w: TensorRef,
    pub fc2_w: TensorRef,
}

/// Parameter handles registered on one tape.
pub struct TapeParams {
    pub blocks: Vec<TapeBlock>,
    pub head: TapeHead,
}

/// Register every parameter tensor as a tape leaf. With `trainable` false
/// the forward pass records nothing and is pure computation.
pub fn register_params(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &EncoderConfig,
    trainable: bool,
) -> Result<TapeParams> {
    let shapes = ModelParams::named_shapes(cfg);
    let tensors = params.tensors();
    let mut refs = Vec::with_capacity(tensors.len());
    for ((_, shape), t) in shapes.iter().zip(tensors.iter()) {
        refs.push(tape.leaf((*t).clone(), shape.clone(), trainable)?);
    }
    let mut it = refs.into_iter();
    let mut blocks = Vec::with_capacity(cfg.channels.len());
    for _ in 0..cfg.channels.len() {
        blocks.push(TapeBlock {
            point_w: it.next().unwrap(),
            temp_w: it.next().unwrap(),
        });
    }
    let head = TapeHead {
        fc1_w: it.next().unwrap(),
        fc2_w: it.next().unwrap(),
    };
    Ok(TapeParams { blocks, head })
}

/// Per-sample, per-channel standardization of a `[C,T,V]` feature map over
/// its (T,V) positions. Keeps activation statistics bounded between blocks
/// without batch statistics: deterministic per sample and differentiable, so
/// finite-difference checks still apply. Zero inputs stay exactly zero.
fn standardize(tape: &mut Tape, x: TensorRef) -> Result<TensorRef> {
    const EPS: f64 = 1e-5;
    let shape = tape.shape(x).to_vec();
    let c = shape[0];
    let mu = tape.mean_axes(x, &[1, 2])?;
    let mu_b = tape.reshape(mu, &[c, 1, 1])?;
    let centered = tape.sub(x, mu_b)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axes(sq, &[1, 2])?;
    let var_eps = tape.add_scalar(var, EPS);
    let log_var = tape.log(var_eps);
    let half_log = tape.mul_scalar(log_var, 0.5);
    let std = tape.exp(half_log);
    let std_b = tape.reshape(std, &[c, 1, 1])?;
    tape.div(centered, std_b)
}

/// One spatial-temporal block: input standardization, adjacency aggregation,
/// pointwise channel map, ReLU, strided temporal convolution.
fn block_forward(
    tape: &mut Tape,
    block: &TapeBlock,
    cfg: &EncoderConfig,
    index: usize,
    x: TensorRef,
    adj: TensorRef,
) -> Result<TensorRef> {
    let x = standardize(tape, x)?;
    let shape = tape.shape(x).to_vec(); // [C, T, V]
    let (c, t, v) = (shape[0], shape[1], shape[2]);
    let flat_tv = tape.reshape(x, &[c * t, v])?;
    let agg = tape.matmul(flat_tv, adj)?;
    let by_channel = tape.reshape(agg, &[c, t * v])?;
    let mapped = tape.matmul(block.point_w, by_channel)?;
    let c_out = cfg.channels[index];
    let cube = tape.reshape(mapped, &[c_out, t, v])?;
    let activated = tape.relu(cube);
    let zero_bias = tape.constant(vec![0.0; c_out], vec![c_out])?;
    tape.conv1d_temporal(
        activated,
        block.temp_w,
        zero_bias,
        cfg.temporal_strides[index],
        cfg.temporal_kernel / 2,
    )
}

/// Encoder forward: blocks per person slot, feature maps mean-pooled over
/// persons, then globally mean-pooled over time and joints.
///
/// Returns the `[C', T', V]` feature map and the `[C']` pooled feature h.
pub fn encode(
    tape: &mut Tape,
    params: &TapeParams,
    cfg: &EncoderConfig,
    seq: &SkeletonSequence,
    adj: &[f64],
) -> Result<(TensorRef, TensorRef)> {
    if seq.channels != IN_CHANNELS {
        return Err(Error::invalid(
            "encode",
            format!("expected {IN_CHANNELS} channels, got {}", seq.channels),
        ));
    }
    let v = seq.joints;
    if adj.len() != v * v {
        return Err(Error::invalid(
            "encode",
            format!("adjacency has {} entries, expected {}", adj.len(), v * v),
        ));
    }
    let adj_t = tape.constant(adj.to_vec(), vec![v, v])?;
    let mut pooled: Option<TensorRef> = None;
    for p in 0..seq.persons {
        let slice = seq.person_slice(p);
        let mut cur = tape.constant(slice, vec![seq.channels, seq.frames, v])?;
        for (i, block) in params.blocks.iter().enumerate() {
            cur = block_forward(tape, block, cfg, i, cur, adj_t)?;
        }
        pooled = Some(match pooled {
            None => cur,
            Some(acc) => tape.add(acc, cur)?,
        });
    }
    let sum = pooled.expect("at least one person slot");
    let fmap = tape.mul_scalar(sum, 1.0 / seq.persons as f64);
    let h = tape.mean_axes(fmap, &[1, 2])?;
    Ok((fmap, h))
}

/// Global mean pool of a `[C,T,V]` feature map (used by the drop branch).
pub fn pool_feature(tape: &mut Tape, fmap: TensorRef) -> Result<TensorRef> {
    tape.mean_axes(fmap, &[1, 2])
}

/// Projection head: bias-free 2-layer MLP with ReLU, then L2 normalization.
/// The pooled feature is standardized across channels on entry. Without it
/// the pooled magnitude drifts upward during pretraining, shrinking every
/// encoder gradient by its reciprocal, and the shared component of mean-
/// pooled ReLU features dominates the per-sample signal. Additive constants
/// in the head would offer a constant-output shortcut that satisfies the
/// contrastive loss trivially, so the layers carry no bias.
pub fn project(tape: &mut Tape, params: &TapeParams, h: TensorRef) -> Result<TensorRef> {
    const EPS: f64 = 1e-5;
    let dim = tape.shape(h)[0];
    let mu = tape.mean_all(h)?;
    let centered = tape.sub(h, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_all(sq)?;
    let var_eps = tape.add_scalar(var, EPS);
    let log_var = tape.log(var_eps);
    let half_log = tape.mul_scalar(log_var, 0.5);
    let std = tape.exp(half_log);
    let h = tape.div(centered, std)?;
    let col = tape.reshape(h, &[dim, 1])?;
    let z1 = tape.matmul(params.head.fc1_w, col)?;
    let a1 = tape.relu(z1);
    let z2 = tape.matmul(params.head.fc2_w, a1)?;
    let zdim = tape.shape(z2)[0];
    let unit = tape.l2_normalize(z2, 0)?;
    tape.reshape(unit, &[zdim])
}

/// Plain-value embedding: pooled feature h and unit projection z, computed
/// without gradient recording.
pub fn embed(
    params: &ModelParams,
    cfg: &EncoderConfig,
    seq: &SkeletonSequence,
    adj: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let tp = register_params(&mut tape, params, cfg, false)?;
    let (_, h) = encode(&mut tape, &tp, cfg, seq, adj)?;
    let z = project(&mut tape, &tp, h)?;
    Ok((tape.data(h).to_vec(), tape.data(z).to_vec()))
}
