//! Energy-based attention-guided drop: per-neuron energy, attention map,
//! and masked spatial/temporal drop with magnitude renormalization.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tape, TensorRef};

/// Dimensions of a `[C,T,V]` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatDims {
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
}

impl FeatDims {
    pub fn numel(&self) -> usize {
        self.channels * self.frames * self.joints
    }
}

/// Per-neuron attention values in (sigmoid(0.5), 1).
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub values: Vec<f64>,
    pub dims: FeatDims,
    pub lambda: f64,
}

/// Per-neuron energy: within each channel, with mean and population variance
/// over the channel's T*V neurons,
/// `e = 4 (var + lambda) / ((x - mean)^2 + 2 (var + lambda))`.
/// Energies lie in (0, 2], hitting 2 exactly where x equals the mean.
pub fn energy(x: &[f64], dims: FeatDims, lambda: f64) -> Result<Vec<f64>> {
    if lambda <= 0.0 {
        return Err(Error::invalid("energy", format!("lambda {lambda} must be > 0")));
    }
    if x.len() != dims.numel() {
        return Err(Error::ShapeMismatch {
            op: "energy",
            lhs: vec![dims.channels, dims.frames, dims.joints],
            rhs: vec![x.len()],
        });
    }
    let n = dims.frames * dims.joints;
    let mut out = vec![0.0f64; x.len()];
    for c in 0..dims.channels {
        let slice = &x[c * n..(c + 1) * n];
        let mean: f64 = slice.iter().sum::<f64>() / n as f64;
        let var: f64 = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let s = var + lambda;
        for (i, &v) in slice.iter().enumerate() {
            let d = v - mean;
            out[c * n + i] = 4.0 * s / (d * d + 2.0 * s);
        }
    }
    Ok(out)
}

/// Attention from energy: sigmoid(1/e) elementwise. Lower energy means a
/// more distinctive neuron and higher attention.
pub fn attention(e: &[f64], dims: FeatDims, lambda: f64) -> AttentionMap {
    AttentionMap {
        values: e.iter().map(|&v| sigmoid(1.0 / v)).collect(),
        dims,
        lambda,
    }
}

/// Spatial and temporal binary masks plus their renormalization factors.
#[derive(Debug, Clone)]
pub struct DropMasks {
    /// Per-joint keep mask (0 = dropped).
    pub spatial: Vec<f64>,
    /// Per-frame keep mask.
    pub temporal: Vec<f64>,
    pub spatial_scale: f64,
    pub temporal_scale: f64,
}

/// Threshold rule: a location is dropped when its mean attention strictly
/// exceeds keep_margin times the maximum over locations.
pub fn drop_masks(attn: &AttentionMap, keep_margin: f64) -> Result<DropMasks> {
    if !(keep_margin > 0.0 && keep_margin <= 1.0) {
        return Err(Error::invalid(
            "drop_masks",
            format!("keep_margin {keep_margin} outside (0, 1]"),
        ));
    }
    let FeatDims {
        channels,
        frames,
        joints,
    } = attn.dims;
    let n = frames * joints;
    let mut spatial_mean = vec![0.0f64; joints];
    let mut temporal_mean = vec![0.0f64; frames];
    for c in 0..channels {
        for t in 0..frames {
            for v in 0..joints {
                let a = attn.values[c * n + t * joints + v];
                spatial_mean[v] += a;
                temporal_mean[t] += a;
            }
        }
    }
    for v in spatial_mean.iter_mut() {
        *v /= (channels * frames) as f64;
    }
    for t in temporal_mean.iter_mut() {
        *t /= (channels * joints) as f64;
    }
    let mask_of = |means: &[f64]| -> (Vec<f64>, usize) {
        let mx = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let threshold = keep_margin * mx;
        let mask: Vec<f64> = means
            .iter()
            .map(|&m| if m > threshold { 0.0 } else { 1.0 })
            .collect();
        let ones = mask.iter().filter(|&&m| m == 1.0).count();
        (mask, ones)
    };
    let (spatial, s_ones) = mask_of(&spatial_mean);
    if s_ones == 0 {
        return Err(Error::AllDropped("spatial mask"));
    }
    let (temporal, t_ones) = mask_of(&temporal_mean);
    if t_ones == 0 {
        return Err(Error::AllDropped("temporal mask"));
    }
    Ok(DropMasks {
        spatial,
        temporal,
        spatial_scale: joints as f64 / s_ones as f64,
        temporal_scale: frames as f64 / t_ones as f64,
    })
}

/// Apply the masked drop: zero the dropped joints, rescale, zero the dropped
/// frames, rescale.
pub fn drop(x: &[f64], attn: &AttentionMap, keep_margin: f64) -> Result<Vec<f64>> {
    if x.len() != attn.dims.numel() {
        return Err(Error::ShapeMismatch {
            op: "drop",
            lhs: vec![attn.dims.channels, attn.dims.frames, attn.dims.joints],
            rhs: vec![x.len()],
        });
    }
    let masks = drop_masks(attn, keep_margin)?;
    let FeatDims { frames, joints, .. } = attn.dims;
    let mut out = x.to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        let t = (i / joints) % frames;
        let j = i % joints;
        *v = *v * masks.spatial[j] * masks.spatial_scale * masks.temporal[t] * masks.temporal_scale;
    }
    Ok(out)
}

/// Tape version used in training: energy and masks are computed from the
/// current values and treated as constants in the backward pass, so the
/// gradient is the same mask-and-scale applied to the upstream gradient.
/// Fails with `AllDropped` before touching the tape; callers may fall back
/// to the identity.
pub fn drop_on_tape(
    tape: &mut Tape,
    fmap: TensorRef,
    lambda: f64,
    keep_margin: f64,
) -> Result<TensorRef> {
    let shape = tape.shape(fmap).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(
            "drop_on_tape",
            format!("expected [C,T,V] feature map, got {shape:?}"),
        ));
    }
    let dims = FeatDims {
        channels: shape[0],
        frames: shape[1],
        joints: shape[2],
    };
    let e = energy(tape.data(fmap), dims, lambda)?;
    let attn = attention(&e, dims, lambda);
    let masks = drop_masks(&attn, keep_margin)?;
    let mut full = vec![0.0f64; dims.numel()];
    for (i, v) in full.iter_mut().enumerate() {
        let t = (i / dims.joints) % dims.frames;
        let j = i % dims.joints;
        *v = masks.spatial[j] * masks.temporal[t];
    }
    let masked = tape.mask_mul(fmap, &full)?;
    Ok(tape.mul_scalar(masked, masks.spatial_scale * masks.temporal_scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::seed_rng;
    use rand::Rng;

    fn dims(c: usize, t: usize, v: usize) -> FeatDims {
        FeatDims {
            channels: c,
            frames: t,
            joints: v,
        }
    }

    #[test]
    fn constant_channel_has_energy_two() {
        let d = dims(1, 2, 3);
        let x = vec![0.7; 6];
        let e = energy(&x, d, 1e-4).unwrap();
        for &v in &e {
            assert_eq!(v, 2.0);
        }
    }

    #[test]
    fn alternating_channel_energy_value() {
        // channel [1,-1,1,-1], lambda 1e-4: mean 0, var 1
        // e = 4(1+lambda) / (1 + 2 + 2 lambda) = 1.33338 within 1e-3 of 1.3334
        let d = dims(1, 2, 2);
        let x = vec![1.0, -1.0, 1.0, -1.0];
        let e = energy(&x, d, 1e-4).unwrap();
        for &v in &e {
            assert!((v - 1.3334).abs() < 1e-3, "{v}");
            let exact = 4.0 * (1.0 + 1e-4) / (3.0 + 2e-4);
            assert!((v - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_neuron_hits_two_regardless_of_variance() {
        let d = dims(1, 1, 5);
        let x = vec![2.0, -3.0, 7.0, 0.0, 4.0];
        let mean = x.iter().sum::<f64>() / 5.0; // 2.0
        assert_eq!(mean, 2.0);
        let e = energy(&x, d, 0.5).unwrap();
        assert_eq!(e[0], 2.0);
        assert!(e[1] < 2.0);
    }

    #[test]
    fn energy_requires_positive_lambda() {
        assert!(energy(&[1.0], dims(1, 1, 1), 0.0).is_err());
        assert!(energy(&[1.0], dims(1, 1, 1), -1e-4).is_err());
    }

    #[test]
    fn energy_bounds_on_random_maps() {
        let mut rng = seed_rng(12);
        for _ in 0..100 {
            let d = dims(3, 4, 5);
            let x: Vec<f64> = (0..d.numel()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let e = energy(&x, d, 1e-4).unwrap();
            for &v in &e {
                assert!(v > 0.0 && v <= 2.0, "energy {v} out of (0,2]");
            }
        }
    }

    #[test]
    fn attention_of_energy_two_and_monotonicity() {
        let d = dims(1, 1, 2);
        let a = attention(&[2.0, 0.5], d, 1e-4);
        assert!((a.values[0] - sigmoid(0.5)).abs() < 1e-12);
        assert!((a.values[0] - 0.6225).abs() < 1e-4);
        // lower energy -> higher attention
        assert!(a.values[1] > a.values[0]);
        // e -> 0+ drives attention toward 1
        let tiny = attention(&[1e-9], dims(1, 1, 1), 1e-4);
        assert!(tiny.values[0] > 0.999999);
    }

    #[test]
    fn uniform_attention_with_margin_one_is_identity() {
        let d = dims(2, 3, 4);
        let x = vec![1.25; d.numel()];
        let e = energy(&x, d, 1e-4).unwrap();
        let a = attention(&e, d, 1e-4);
        let y = drop(&x, &a, 1.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn threshold_rule_hand_example() {
        // Spatial means [0.75, 0.75, 0.75, 1.5] (the 1:1:1:2 pattern),
        // keep_margin 0.7: threshold 1.05 drops only the last joint, rescale
        // 4/3. Temporal means [1.25, 0.625]: threshold 0.875 drops frame 0.
        let d = dims(1, 2, 4);
        let attn = AttentionMap {
            values: vec![1.0, 1.0, 1.0, 2.0, 0.5, 0.5, 0.5, 1.0],
            dims: d,
            lambda: 1e-4,
        };
        let masks = drop_masks(&attn, 0.7).unwrap();
        assert_eq!(masks.spatial, vec![1.0, 1.0, 1.0, 0.0]);
        assert!((masks.spatial_scale - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(masks.temporal, vec![0.0, 1.0]);
        assert_eq!(masks.temporal_scale, 2.0);
    }

    #[test]
    fn kept_sum_scales_by_rescale_factor() {
        let mut rng = seed_rng(13);
        let d = dims(2, 4, 5);
        let x: Vec<f64> = (0..d.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = energy(&x, d, 1e-4).unwrap();
        let a = attention(&e, d, 1e-4);
        let masks = drop_masks(&a, 0.999).unwrap();
        let y = drop(&x, &a, 0.999).unwrap();
        // Dropped entries are exactly zero; survivors are a positive multiple.
        let factor = masks.spatial_scale * masks.temporal_scale;
        for (i, (&xi, &yi)) in x.iter().zip(y.iter()).enumerate() {
            let t = (i / d.joints) % d.frames;
            let j = i % d.joints;
            if masks.spatial[j] == 0.0 || masks.temporal[t] == 0.0 {
                assert_eq!(yi, 0.0);
            } else {
                assert!((yi - xi * factor).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_dropped_mask_is_rejected() {
        // Force every spatial mean above threshold with margin near zero is
        // impossible since the max always exceeds it; use a tiny margin so
        // every positive mean strictly exceeds margin * max.
        let d = dims(1, 1, 3);
        let attn = AttentionMap {
            values: vec![1.0, 1.0, 1.0],
            dims: d,
            lambda: 1e-4,
        };
        match drop_masks(&attn, 0.5) {
            Err(Error::AllDropped(which)) => assert!(which.contains("spatial")),
            other => panic!("expected AllDropped, got {other:?}"),
        }
    }

    #[test]
    fn drop_gradient_is_mask_and_scale() {
        let mut rng = seed_rng(14);
        let d = dims(2, 3, 4);
        let x: Vec<f64> = (0..d.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check(
            |tape, xt| {
                let dropped = drop_on_tape(tape, xt, 1e-4, 0.98)?;
                // weighted sum so the gradient is not uniform
                let w: Vec<f64> = (0..d.numel()).map(|i| (i as f64 * 0.37).sin()).collect();
                let weighted = tape.mask_mul(dropped, &w)?;
                tape.sum_all(weighted)
            },
            &x,
            &[d.channels, d.frames, d.joints],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn tape_drop_matches_plain_drop() {
        let mut rng = seed_rng(15);
        let d = dims(3, 4, 5);
        let x: Vec<f64> = (0..d.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = energy(&x, d, 1e-4).unwrap();
        let a = attention(&e, d, 1e-4);
        let plain = drop(&x, &a, 0.98).unwrap();
        let mut tape = Tape::new();
        let xt = tape
            .leaf(x.clone(), vec![d.channels, d.frames, d.joints], false)
            .unwrap();
        let dt = drop_on_tape(&mut tape, xt, 1e-4, 0.98).unwrap();
        for (p, q) in plain.iter().zip(tape.data(dt).iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
