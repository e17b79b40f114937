//! Skeleton-sequence augmentations: deterministic transform cores plus a
//! seeded parameter sampler, composed into the normal pipeline (shear, crop)
//! and the extreme pipeline (all eight augmentations).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, Purpose};
use crate::skeleton::{SkeletonGraph, SkeletonSequence};

/// Shear amplitude: factors sampled from [-SHEAR_BETA, SHEAR_BETA].
pub const SHEAR_BETA: f64 = 0.5;
/// Crop padding ratio: pad length is T / CROP_GAMMA on each side.
pub const CROP_GAMMA: usize = 6;
/// Gaussian noise variance.
pub const NOISE_VARIANCE: f64 = 0.01;
/// Blur kernel window length (relative positions -7..=7).
pub const BLUR_WINDOW: usize = 15;
/// Large-angle bound for the main rotation axis.
pub const ROTATE_MAIN_MAX: f64 = std::f64::consts::PI / 6.0;
/// Small-angle bound for the remaining rotation axes.
pub const ROTATE_MINOR_MAX: f64 = std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentKind {
    Shear,
    Crop,
    SpatialFlip,
    TemporalFlip,
    Rotate,
    AxisMask,
    GaussianNoise,
    GaussianBlur,
}

/// Fully sampled parameters for one pipeline application. A pure function of
/// the RNG state that produced them; applying a pipeline is then a pure
/// function of (sequence, params).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub shear_factors: [f64; 6],
    pub crop_start: usize,
    pub flip_spatial: bool,
    pub flip_temporal: bool,
    pub rotate_axis: Axis,
    /// Angles (x, y, z); the sampled main axis carries the large angle.
    pub rotate_angles: [f64; 3],
    pub mask_axis: Option<Axis>,
    pub noise_apply: bool,
    pub noise_seed: u64,
    pub blur_apply: bool,
    pub blur_sigma: f64,
}

impl AugmentParams {
    /// Parameters under which every augmentation is the identity map.
    /// `frames` is needed because the identity crop start is the pad length.
    pub fn identity(frames: usize) -> Self {
        AugmentParams {
            shear_factors: [0.0; 6],
            crop_start: frames / CROP_GAMMA,
            flip_spatial: false,
            flip_temporal: false,
            rotate_axis: Axis::X,
            rotate_angles: [0.0; 3],
            mask_axis: None,
            noise_apply: false,
            noise_seed: 0,
            blur_apply: false,
            blur_sigma: 0.1,
        }
    }
}

/// An ordered augmentation composition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pipeline {
    pub kinds: Vec<AugmentKind>,
}

impl Pipeline {
    /// Normal pipeline: shear then crop.
    pub fn normal() -> Self {
        Pipeline {
            kinds: vec![AugmentKind::Shear, AugmentKind::Crop],
        }
    }

    /// Extreme pipeline: spatial-linear maps first, destructive ops last.
    pub fn extreme() -> Self {
        Pipeline {
            kinds: vec![
                AugmentKind::Shear,
                AugmentKind::Rotate,
                AugmentKind::SpatialFlip,
                AugmentKind::AxisMask,
                AugmentKind::Crop,
                AugmentKind::TemporalFlip,
                AugmentKind::GaussianNoise,
                AugmentKind::GaussianBlur,
            ],
        }
    }
}

// ── Transform cores ─────────────────────────────────────────────────────

/// Left-multiply every coordinate triple by the shear matrix with unit
/// diagonal and off-diagonal factors (a12, a13, a21, a23, a31, a32).
pub fn shear(x: &SkeletonSequence, factors: &[f64; 6]) -> Result<SkeletonSequence> {
    if x.channels != 3 {
        return Err(Error::invalid(
            "shear",
            format!("expected 3 coordinate channels, got {}", x.channels),
        ));
    }
    let a = [
        [1.0, factors[0], factors[1]],
        [factors[2], 1.0, factors[3]],
        [factors[4], factors[5], 1.0],
    ];
    Ok(apply_point_matrix(x, &a))
}

fn apply_point_matrix(x: &SkeletonSequence, a: &[[f64; 3]; 3]) -> SkeletonSequence {
    let mut out = x.clone();
    for t in 0..x.frames {
        for v in 0..x.joints {
            for p in 0..x.persons {
                let pt = [x.get(0, t, v, p), x.get(1, t, v, p), x.get(2, t, v, p)];
                for (row, arow) in a.iter().enumerate() {
                    let val = arow[0] * pt[0] + arow[1] * pt[1] + arow[2] * pt[2];
                    out.set(row, t, v, p, val);
                }
            }
        }
    }
    out
}

/// Symmetric-pad `T/gamma` frames on each side by edge replication, then take
/// `T` consecutive frames starting at `start` in the padded sequence.
pub fn crop(x: &SkeletonSequence, start: usize) -> Result<SkeletonSequence> {
    let pad = x.frames / CROP_GAMMA;
    if start > 2 * pad {
        return Err(Error::invalid(
            "crop",
            format!("start {} out of range 0..={}", start, 2 * pad),
        ));
    }
    let mut out = x.clone();
    for t_out in 0..x.frames {
        // Index into the padded sequence, clamped to the source range.
        let padded = t_out + start;
        let t_src = padded.saturating_sub(pad).min(x.frames - 1);
        for c in 0..x.channels {
            for v in 0..x.joints {
                for p in 0..x.persons {
                    out.set(c, t_out, v, p, x.get(c, t_src, v, p));
                }
            }
        }
    }
    Ok(out)
}

/// Swap the data of every left/right joint pair; center-line joints are
/// untouched. Identity when `apply` is false.
pub fn spatial_flip(x: &SkeletonSequence, g: &SkeletonGraph, apply: bool) -> Result<SkeletonSequence> {
    if x.joints != g.num_joints {
        return Err(Error::invalid(
            "spatial_flip",
            format!("sequence has {} joints, graph has {}", x.joints, g.num_joints),
        ));
    }
    if !apply {
        return Ok(x.clone());
    }
    for &(l, r) in &g.left_right_pairs {
        if l >= x.joints || r >= x.joints {
            return Err(Error::invalid(
                "spatial_flip",
                format!("pair ({l},{r}) out of range"),
            ));
        }
    }
    let mut out = x.clone();
    for &(l, r) in &g.left_right_pairs {
        for c in 0..x.channels {
            for t in 0..x.frames {
                for p in 0..x.persons {
                    out.set(c, t, l, p, x.get(c, t, r, p));
                    out.set(c, t, r, p, x.get(c, t, l, p));
                }
            }
        }
    }
    Ok(out)
}

/// Reverse frame order when `apply` is set.
pub fn temporal_flip(x: &SkeletonSequence, apply: bool) -> SkeletonSequence {
    if !apply {
        return x.clone();
    }
    let mut out = x.clone();
    for c in 0..x.channels {
        for t in 0..x.frames {
            let t_rev = x.frames - 1 - t;
            for v in 0..x.joints {
                for p in 0..x.persons {
                    out.set(c, t, v, p, x.get(c, t_rev, v, p));
                }
            }
        }
    }
    out
}

fn rotation_matrix(axis: Axis, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    match axis {
        Axis::X => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        Axis::Y => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        Axis::Z => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0f64; 3]; 3];
    for (i, orow) in out.iter_mut().enumerate() {
        for (j, ov) in orow.iter_mut().enumerate() {
            for (k, bv) in b.iter().enumerate() {
                *ov += a[i][k] * bv[j];
            }
        }
    }
    out
}

/// Rotate all coordinates by R = R_x(ax) * R_y(ay) * R_z(az). `main_axis`
/// identifies which angle may carry the large bound.
pub fn rotate(x: &SkeletonSequence, main_axis: Axis, angles: &[f64; 3]) -> Result<SkeletonSequence> {
    if x.channels != 3 {
        return Err(Error::invalid(
            "rotate",
            format!("expected 3 coordinate channels, got {}", x.channels),
        ));
    }
    for (i, &ang) in angles.iter().enumerate() {
        let bound = if i == main_axis.index() {
            ROTATE_MAIN_MAX
        } else {
            ROTATE_MINOR_MAX
        };
        if !(0.0..=bound + 1e-12).contains(&ang) {
            return Err(Error::invalid(
                "rotate",
                format!("angle {ang} for axis {i} outside [0, {bound}]"),
            ));
        }
    }
    let r = mat3_mul(
        &rotation_matrix(Axis::X, angles[0]),
        &mat3_mul(
            &rotation_matrix(Axis::Y, angles[1]),
            &rotation_matrix(Axis::Z, angles[2]),
        ),
    );
    Ok(apply_point_matrix(x, &r))
}

/// Zero one coordinate channel; identity when no axis is selected.
pub fn axis_mask(x: &SkeletonSequence, axis: Option<Axis>) -> SkeletonSequence {
    let Some(axis) = axis else {
        return x.clone();
    };
    let mut out = x.clone();
    let c = axis.index();
    for t in 0..x.frames {
        for v in 0..x.joints {
            for p in 0..x.persons {
                out.set(c, t, v, p, 0.0);
            }
        }
    }
    out
}

/// Add i.i.d. zero-mean Gaussian noise with variance 0.01, deterministic for
/// a fixed seed.
pub fn gaussian_noise(x: &SkeletonSequence, seed: u64) -> SkeletonSequence {
    let mut rng = derive_rng(seed, Purpose::NoiseCore, 0, 0);
    let normal = Normal::new(0.0, NOISE_VARIANCE.sqrt()).unwrap();
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    out
}

/// Unnormalized blur kernel values exp(-t^2 / 2 sigma^2) for t in -7..=7.
pub fn blur_kernel(sigma: f64) -> [f64; BLUR_WINDOW] {
    let mut k = [0.0f64; BLUR_WINDOW];
    let half = (BLUR_WINDOW / 2) as isize;
    for (i, kv) in k.iter_mut().enumerate() {
        let t = i as isize - half;
        *kv = (-((t * t) as f64) / (2.0 * sigma * sigma)).exp();
    }
    k
}

/// Temporal convolution per (c, v, p) with the unit-sum Gaussian kernel and
/// edge-replication padding.
pub fn gaussian_blur(x: &SkeletonSequence, sigma: f64) -> Result<SkeletonSequence> {
    if !(0.1..=2.0).contains(&sigma) {
        return Err(Error::invalid(
            "gaussian_blur",
            format!("sigma {sigma} outside [0.1, 2]"),
        ));
    }
    let mut kernel = blur_kernel(sigma);
    let sum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    let half = (BLUR_WINDOW / 2) as isize;
    let mut out = x.clone();
    for c in 0..x.channels {
        for v in 0..x.joints {
            for p in 0..x.persons {
                for t in 0..x.frames {
                    let mut acc = 0.0;
                    for (i, &kv) in kernel.iter().enumerate() {
                        let ti = (t as isize + i as isize - half)
                            .clamp(0, x.frames as isize - 1) as usize;
                        acc += kv * x.get(c, ti, v, p);
                    }
                    out.set(c, t, v, p, acc);
                }
            }
        }
    }
    Ok(out)
}

// ── Sampling and composition ────────────────────────────────────────────

/// Draw a full parameter set from the RNG. Every field is sampled in a fixed
/// canonical order regardless of the pipeline, so the draw sequence is stable.
pub fn sample_params(frames: usize, rng: &mut ChaCha8Rng) -> AugmentParams {
    let mut shear_factors = [0.0f64; 6];
    for f in shear_factors.iter_mut() {
        *f = rng.gen_range(-SHEAR_BETA..=SHEAR_BETA);
    }
    let pad = frames / CROP_GAMMA;
    let crop_start = rng.gen_range(0..=2 * pad);
    let flip_spatial = rng.gen_bool(0.5);
    let flip_temporal = rng.gen_bool(0.5);
    let rotate_axis = match rng.gen_range(0..3u8) {
        0 => Axis::X,
        1 => Axis::Y,
        _ => Axis::Z,
    };
    let mut rotate_angles = [0.0f64; 3];
    for (i, a) in rotate_angles.iter_mut().enumerate() {
        let bound = if i == rotate_axis.index() {
            ROTATE_MAIN_MAX
        } else {
            ROTATE_MINOR_MAX
        };
        *a = rng.gen_range(0.0..=bound);
    }
    let mask_axis = if rng.gen_bool(0.5) {
        Some(match rng.gen_range(0..3u8) {
            0 => Axis::X,
            1 => Axis::Y,
            _ => Axis::Z,
        })
    } else {
        None
    };
    let noise_seed: u64 = rng.gen();
    let blur_apply = rng.gen_bool(0.5);
    let blur_sigma = rng.gen_range(0.1..=2.0);
    AugmentParams {
        shear_factors,
        crop_start,
        flip_spatial,
        flip_temporal,
        rotate_axis,
        rotate_angles,
        mask_axis,
        noise_apply: true,
        noise_seed,
        blur_apply,
        blur_sigma,
    }
}

/// Apply the pipeline's augmentations in order using the supplied params.
/// Pure function of (x, params).
pub fn apply_pipeline(
    x: &SkeletonSequence,
    pipeline: &Pipeline,
    params: &AugmentParams,
    graph: &SkeletonGraph,
) -> Result<SkeletonSequence> {
    let mut cur = x.clone();
    for kind in &pipeline.kinds {
        cur = match kind {
            AugmentKind::Shear => shear(&cur, &params.shear_factors)?,
            AugmentKind::Crop => crop(&cur, params.crop_start)?,
            AugmentKind::SpatialFlip => spatial_flip(&cur, graph, params.flip_spatial)?,
            AugmentKind::TemporalFlip => temporal_flip(&cur, params.flip_temporal),
            AugmentKind::Rotate => rotate(&cur, params.rotate_axis, &params.rotate_angles)?,
            AugmentKind::AxisMask => axis_mask(&cur, params.mask_axis),
            AugmentKind::GaussianNoise => {
                if params.noise_apply {
                    gaussian_noise(&cur, params.noise_seed)
                } else {
                    cur
                }
            }
            AugmentKind::GaussianBlur => {
                if params.blur_apply {
                    gaussian_blur(&cur, params.blur_sigma)?
                } else {
                    cur
                }
            }
        };
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;
    use crate::skeleton::make_tree_graph;

    fn random_sequence(t: usize, v: usize, seed: u64) -> SkeletonSequence {
        let mut rng = seed_rng(seed);
        let mut seq = SkeletonSequence::zeros(3, t, v, 1);
        for val in seq.data.iter_mut() {
            *val = rng.gen_range(-1.0..1.0);
        }
        seq
    }

    fn assert_seq_close(a: &SkeletonSequence, b: &SkeletonSequence, tol: f64) {
        assert_eq!(a.data.len(), b.data.len());
        for (i, (x, y)) in a.data.iter().zip(b.data.iter()).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn shear_zero_factors_is_identity() {
        let x = random_sequence(8, 5, 1);
        let y = shear(&x, &[0.0; 6]).unwrap();
        assert_eq!(x.data, y.data);
    }

    #[test]
    fn shear_unit_a12_moves_y_into_x() {
        let mut x = SkeletonSequence::zeros(3, 1, 1, 1);
        x.set(1, 0, 0, 0, 1.0); // point (0, 1, 0)
        let y = shear(&x, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(y.get(0, 0, 0, 0), 1.0);
        assert_eq!(y.get(1, 0, 0, 0), 1.0);
        assert_eq!(y.get(2, 0, 0, 0), 0.0);
    }

    #[test]
    fn shear_is_linear() {
        let a = random_sequence(4, 3, 2);
        let b = random_sequence(4, 3, 3);
        let factors = [0.3, -0.2, 0.1, 0.4, -0.5, 0.25];
        let mut sum = a.clone();
        for (s, bv) in sum.data.iter_mut().zip(b.data.iter()) {
            *s += bv;
        }
        let lhs = shear(&sum, &factors).unwrap();
        let sa = shear(&a, &factors).unwrap();
        let sb = shear(&b, &factors).unwrap();
        let mut rhs = sa.clone();
        for (r, v) in rhs.data.iter_mut().zip(sb.data.iter()) {
            *r += v;
        }
        assert_seq_close(&lhs, &rhs, 1e-12);
    }

    #[test]
    fn crop_ranges_follow_padding_ratio() {
        // T=60, gamma=6: pad 10 each side, valid starts 0..=20.
        let x = random_sequence(60, 2, 4);
        assert!(crop(&x, 20).is_ok());
        assert!(crop(&x, 21).is_err());
    }

    #[test]
    fn crop_centered_start_recovers_input() {
        let x = random_sequence(32, 5, 5);
        let y = crop(&x, 32 / CROP_GAMMA).unwrap();
        assert_eq!(x.data, y.data);
    }

    #[test]
    fn crop_constant_sequence_unchanged_for_every_start() {
        let mut x = SkeletonSequence::zeros(3, 12, 2, 1);
        for val in x.data.iter_mut() {
            *val = 0.7;
        }
        for start in 0..=2 * (12 / CROP_GAMMA) {
            let y = crop(&x, start).unwrap();
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn crop_shifts_frames_with_edge_replication() {
        let mut x = SkeletonSequence::zeros(3, 6, 1, 1);
        for t in 0..6 {
            x.set(0, t, 0, 0, t as f64);
        }
        // pad = 1; start 0 takes padded frames [x0 x0 x1 x2 x3 x4]
        let y = crop(&x, 0).unwrap();
        let got: Vec<f64> = (0..6).map(|t| y.get(0, t, 0, 0)).collect();
        assert_eq!(got, vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn spatial_flip_is_involution() {
        let g = make_tree_graph(9);
        let x = random_sequence(6, 9, 6);
        let once = spatial_flip(&x, &g, true).unwrap();
        let twice = spatial_flip(&once, &g, true).unwrap();
        assert_eq!(x.data, twice.data);
        let noop = spatial_flip(&x, &g, false).unwrap();
        assert_eq!(x.data, noop.data);
    }

    #[test]
    fn spatial_flip_swaps_pairs() {
        let g = SkeletonGraph {
            num_joints: 3,
            edges: vec![(0, 1), (0, 2)],
            center: 0,
            left_right_pairs: vec![(1, 2)],
        };
        let mut x = SkeletonSequence::zeros(3, 1, 3, 1);
        x.set(0, 0, 0, 0, 10.0);
        x.set(0, 0, 1, 0, 20.0);
        x.set(0, 0, 2, 0, 30.0);
        let y = spatial_flip(&x, &g, true).unwrap();
        assert_eq!(y.get(0, 0, 0, 0), 10.0);
        assert_eq!(y.get(0, 0, 1, 0), 30.0);
        assert_eq!(y.get(0, 0, 2, 0), 20.0);
    }

    #[test]
    fn temporal_flip_involution_and_two_frames() {
        let x = random_sequence(7, 4, 8);
        let twice = temporal_flip(&temporal_flip(&x, true), true);
        assert_eq!(x.data, twice.data);
        assert_eq!(temporal_flip(&x, false).data, x.data);

        let mut two = SkeletonSequence::zeros(1, 2, 1, 1);
        two.set(0, 0, 0, 0, 1.0);
        two.set(0, 1, 0, 0, 2.0);
        let f = temporal_flip(&two, true);
        assert_eq!(f.get(0, 0, 0, 0), 2.0);
        assert_eq!(f.get(0, 1, 0, 0), 1.0);
    }

    #[test]
    fn rotate_zero_angles_is_identity() {
        let x = random_sequence(5, 3, 9);
        let y = rotate(&x, Axis::Y, &[0.0; 3]).unwrap();
        assert_seq_close(&x, &y, 0.0);
    }

    #[test]
    fn rotate_about_z_by_thirty_degrees() {
        let mut x = SkeletonSequence::zeros(3, 1, 1, 1);
        x.set(0, 0, 0, 0, 1.0); // point (1, 0, 0)
        let angle = std::f64::consts::PI / 6.0;
        let y = rotate(&x, Axis::Z, &[0.0, 0.0, angle]).unwrap();
        assert!((y.get(0, 0, 0, 0) - angle.cos()).abs() < 1e-12); // 0.8660
        assert!((y.get(1, 0, 0, 0) - 0.5).abs() < 1e-12);
        assert!(y.get(2, 0, 0, 0).abs() < 1e-12);
    }

    #[test]
    fn rotate_preserves_point_norms() {
        let x = random_sequence(4, 5, 10);
        let y = rotate(&x, Axis::X, &[0.4, 0.01, 0.012]).unwrap();
        for t in 0..4 {
            for v in 0..5 {
                let n_in: f64 = (0..3).map(|c| x.get(c, t, v, 0).powi(2)).sum::<f64>().sqrt();
                let n_out: f64 = (0..3).map(|c| y.get(c, t, v, 0).powi(2)).sum::<f64>().sqrt();
                assert!((n_in - n_out).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rotate_rejects_out_of_range_angles() {
        let x = random_sequence(2, 2, 11);
        assert!(rotate(&x, Axis::X, &[1.0, 0.0, 0.0]).is_err()); // > pi/6
        assert!(rotate(&x, Axis::X, &[0.1, 0.1, 0.0]).is_err()); // minor > pi/180
    }

    #[test]
    fn axis_mask_zeroes_selected_channel() {
        let mut x = SkeletonSequence::zeros(3, 1, 1, 1);
        x.set(0, 0, 0, 0, 1.0);
        x.set(1, 0, 0, 0, 2.0);
        x.set(2, 0, 0, 0, 3.0);
        let y = axis_mask(&x, Some(Axis::Y));
        assert_eq!(
            (y.get(0, 0, 0, 0), y.get(1, 0, 0, 0), y.get(2, 0, 0, 0)),
            (1.0, 0.0, 3.0)
        );
        assert_eq!(axis_mask(&x, None).data, x.data);
        let yy = axis_mask(&y, Some(Axis::Y));
        assert_eq!(y.data, yy.data);
    }

    #[test]
    fn gaussian_noise_is_seed_deterministic() {
        let x = random_sequence(4, 4, 12);
        let a = gaussian_noise(&x, 99);
        let b = gaussian_noise(&x, 99);
        assert_eq!(a.data, b.data);
        let c = gaussian_noise(&x, 100);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn gaussian_noise_moments() {
        // 1e5 draws: sample variance in [0.0095, 0.0105], mean within 2e-3.
        let x = SkeletonSequence::zeros(1, 100, 100, 10);
        let y = gaussian_noise(&x, 5);
        let n = y.data.len() as f64;
        let mean: f64 = y.data.iter().sum::<f64>() / n;
        let var: f64 = y.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 2e-3, "mean {mean}");
        assert!((0.0095..=0.0105).contains(&var), "var {var}");
    }

    #[test]
    fn blur_kernel_center_is_one_before_normalization() {
        let k = blur_kernel(0.7);
        assert_eq!(k[BLUR_WINDOW / 2], 1.0);
    }

    #[test]
    fn blur_with_tiny_sigma_is_identity() {
        let x = random_sequence(20, 4, 13);
        let y = gaussian_blur(&x, 0.1).unwrap();
        assert_seq_close(&x, &y, 1e-9);
    }

    #[test]
    fn blur_leaves_constant_sequences_unchanged() {
        let mut x = SkeletonSequence::zeros(3, 25, 2, 1);
        for val in x.data.iter_mut() {
            *val = -1.3;
        }
        let y = gaussian_blur(&x, 1.7).unwrap();
        assert_seq_close(&x, &y, 1e-12);
    }

    #[test]
    fn blur_rejects_sigma_out_of_range() {
        let x = random_sequence(20, 2, 14);
        assert!(gaussian_blur(&x, 0.05).is_err());
        assert!(gaussian_blur(&x, 2.5).is_err());
    }

    #[test]
    fn sampled_params_stay_in_documented_ranges() {
        let mut rng = seed_rng(17);
        let mut spatial_flips = 0usize;
        let mut temporal_flips = 0usize;
        let draws = 10_000usize;
        for _ in 0..draws {
            let p = sample_params(32, &mut rng);
            for f in p.shear_factors {
                assert!((-SHEAR_BETA..=SHEAR_BETA).contains(&f));
            }
            assert!(p.crop_start <= 2 * (32 / CROP_GAMMA));
            for (i, a) in p.rotate_angles.iter().enumerate() {
                let bound = if i == p.rotate_axis.index() {
                    ROTATE_MAIN_MAX
                } else {
                    ROTATE_MINOR_MAX
                };
                assert!((0.0..=bound).contains(a));
            }
            assert!((0.1..=2.0).contains(&p.blur_sigma));
            spatial_flips += p.flip_spatial as usize;
            temporal_flips += p.flip_temporal as usize;
        }
        let sf = spatial_flips as f64 / draws as f64;
        let tf = temporal_flips as f64 / draws as f64;
        assert!((0.48..=0.52).contains(&sf), "spatial flip rate {sf}");
        assert!((0.48..=0.52).contains(&tf), "temporal flip rate {tf}");
    }

    #[test]
    fn same_rng_state_gives_same_params() {
        let p1 = sample_params(32, &mut seed_rng(3));
        let p2 = sample_params(32, &mut seed_rng(3));
        assert_eq!(p1, p2);
    }

    #[test]
    fn identity_params_make_both_pipelines_identity() {
        let g = make_tree_graph(9);
        let x = random_sequence(32, 9, 15);
        let id = AugmentParams::identity(32);
        let y1 = apply_pipeline(&x, &Pipeline::normal(), &id, &g).unwrap();
        let y2 = apply_pipeline(&x, &Pipeline::extreme(), &id, &g).unwrap();
        assert_eq!(x.data, y1.data);
        assert_eq!(x.data, y2.data);
    }

    #[test]
    fn pipelines_are_deterministic_and_shape_preserving() {
        let g = make_tree_graph(9);
        let x = random_sequence(32, 9, 16);
        let p = sample_params(32, &mut seed_rng(8));
        let y1 = apply_pipeline(&x, &Pipeline::extreme(), &p, &g).unwrap();
        let y2 = apply_pipeline(&x, &Pipeline::extreme(), &p, &g).unwrap();
        assert_eq!(y1.data, y2.data);
        assert_eq!(
            (y1.channels, y1.frames, y1.joints, y1.persons),
            (x.channels, x.frames, x.joints, x.persons)
        );
    }
}
