//! Skeleton sequence data model: on-disk SKL1 format, skeleton graphs,
//! joint/bone/motion stream derivation, dataset manifests and a synthetic
//! labeled generator for desk-scale experiments.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, Purpose};

const SKL_MAGIC: &[u8; 4] = b"SKL1";

/// A skeleton sequence: dense `[C,T,V,P]` array (coordinate channels x
/// frames x joints x persons) with an optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
    pub persons: usize,
    /// Flat values, c-major then t, v, p.
    pub data: Vec<f64>,
    pub label: Option<usize>,
}

impl SkeletonSequence {
    pub fn zeros(channels: usize, frames: usize, joints: usize, persons: usize) -> Self {
        SkeletonSequence {
            channels,
            frames,
            joints,
            persons,
            data: vec![0.0; channels * frames * joints * persons],
            label: None,
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, t: usize, v: usize, p: usize) -> usize {
        ((c * self.frames + t) * self.joints + v) * self.persons + p
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, v: usize, p: usize) -> f64 {
        self.data[self.idx(c, t, v, p)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, v: usize, p: usize, val: f64) {
        let i = self.idx(c, t, v, p);
        self.data[i] = val;
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Contiguous `[C,T,V]` slice for one person slot.
    pub fn person_slice(&self, p: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.channels * self.frames * self.joints);
        for c in 0..self.channels {
            for t in 0..self.frames {
                for v in 0..self.joints {
                    out.push(self.get(c, t, v, p));
                }
            }
        }
        out
    }
}

/// Tree-structured skeleton graph with a torso center and left/right
/// symmetric joint pairs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SkeletonGraph {
    pub num_joints: usize,
    /// (parent, child) joint-index pairs forming a tree rooted at `center`.
    pub edges: Vec<(usize, usize)>,
    pub center: usize,
    pub left_right_pairs: Vec<(usize, usize)>,
}

impl SkeletonGraph {
    pub fn validate(&self) -> Result<()> {
        let v = self.num_joints;
        if self.center >= v {
            return Err(Error::InvalidGraph(format!(
                "center {} out of range for {} joints",
                self.center, v
            )));
        }
        if self.edges.len() != v.saturating_sub(1) {
            return Err(Error::InvalidGraph(format!(
                "expected {} edges for a tree over {} joints, found {}",
                v - 1,
                v,
                self.edges.len()
            )));
        }
        let mut parent_of = vec![None; v];
        for &(p, c) in &self.edges {
            if p >= v || c >= v {
                return Err(Error::InvalidGraph(format!("edge ({p},{c}) out of range")));
            }
            if c == self.center {
                return Err(Error::InvalidGraph("center cannot be a child".into()));
            }
            if parent_of[c].is_some() {
                return Err(Error::InvalidGraph(format!("joint {c} has two parents")));
            }
            parent_of[c] = Some(p);
        }
        // Reachability from the center along parent links.
        let mut children = vec![Vec::new(); v];
        for &(p, c) in &self.edges {
            children[p].push(c);
        }
        let mut seen = vec![false; v];
        let mut stack = vec![self.center];
        seen[self.center] = true;
        while let Some(j) = stack.pop() {
            for &c in &children[j] {
                if !seen[c] {
                    seen[c] = true;
                    stack.push(c);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidGraph("not all joints reachable from center".into()));
        }
        let mut used = vec![false; v];
        for &(l, r) in &self.left_right_pairs {
            if l >= v || r >= v {
                return Err(Error::InvalidGraph(format!("pair ({l},{r}) out of range")));
            }
            if l == self.center || r == self.center || l == r {
                return Err(Error::InvalidGraph(format!("invalid pair ({l},{r})")));
            }
            if used[l] || used[r] {
                return Err(Error::InvalidGraph(format!("pair ({l},{r}) reuses a joint")));
            }
            used[l] = true;
            used[r] = true;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let g: SkeletonGraph = serde_json::from_str(&text)?;
        g.validate()?;
        Ok(g)
    }
}

/// Three-branch tree over `num_joints` joints: center joint 0, two mirrored
/// chains (paired left/right) and one center-line chain.
pub fn make_tree_graph(num_joints: usize) -> SkeletonGraph {
    assert!(num_joints >= 3, "need at least 3 joints");
    let n = num_joints - 1;
    let len_lr = (n + 1) / 3;
    let len_mid = n - 2 * len_lr;
    let left: Vec<usize> = (1..=len_lr).collect();
    let right: Vec<usize> = (len_lr + 1..=2 * len_lr).collect();
    let mid: Vec<usize> = (2 * len_lr + 1..=2 * len_lr + len_mid).collect();
    let mut edges = Vec::new();
    for chain in [&left, &right, &mid] {
        let mut prev = 0usize;
        for &j in chain.iter() {
            edges.push((prev, j));
            prev = j;
        }
    }
    let left_right_pairs = left.iter().copied().zip(right.iter().copied()).collect();
    SkeletonGraph {
        num_joints,
        edges,
        center: 0,
        left_right_pairs,
    }
}

// ── SKL1 on-disk format ─────────────────────────────────────────────────

/// Write a sequence: magic "SKL1", four LE u32 dims C,T,V,P, then C*T*V*P
/// LE f32 values in c-major index order.
pub fn save_sequence(seq: &SkeletonSequence, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + seq.numel() * 4);
    buf.extend_from_slice(SKL_MAGIC);
    for d in [seq.channels, seq.frames, seq.joints, seq.persons] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &seq.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_sequence(path: &Path) -> Result<SkeletonSequence> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 4 || &bytes[0..4] != SKL_MAGIC {
        let found = bytes
            .get(0..4)
            .map(|b| String::from_utf8_lossy(b).into_owned())
            .unwrap_or_default();
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: "SKL1".into(),
            found,
        });
    }
    if bytes.len() < 20 {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            expected: 20,
            found: bytes.len(),
        });
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 4 + i * 4;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let [c, t, v, p] = dims;
    let count = c * t * v * p;
    let expected = 20 + count * 4;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            expected,
            found: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = 20 + i * 4;
        let val = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
        if !val.is_finite() {
            return Err(Error::NonFinite {
                context: path.display().to_string(),
                index: i,
            });
        }
        data.push(val);
    }
    Ok(SkeletonSequence {
        channels: c,
        frames: t,
        joints: v,
        persons: p,
        data,
        label: None,
    })
}

// ── Streams ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    #[default]
    Joint,
    Bone,
    Motion,
}

impl FromStr for Stream {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "joint" => Ok(Stream::Joint),
            "bone" => Ok(Stream::Bone),
            "motion" => Ok(Stream::Motion),
            other => Err(format!("unknown stream '{other}' (expected joint|bone|motion)")),
        }
    }
}

impl std::fmt::Display for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stream::Joint => write!(f, "joint"),
            Stream::Bone => write!(f, "bone"),
            Stream::Motion => write!(f, "motion"),
        }
    }
}

/// Bone stream: child minus parent over every tree edge, zero at the center
/// joint. Applied per person slot.
pub fn to_bone_stream(x: &SkeletonSequence, g: &SkeletonGraph) -> Result<SkeletonSequence> {
    if x.joints != g.num_joints {
        return Err(Error::invalid(
            "to_bone_stream",
            format!("sequence has {} joints, graph has {}", x.joints, g.num_joints),
        ));
    }
    let mut out = SkeletonSequence::zeros(x.channels, x.frames, x.joints, x.persons);
    out.label = x.label;
    for &(parent, child) in &g.edges {
        for c in 0..x.channels {
            for t in 0..x.frames {
                for p in 0..x.persons {
                    let val = x.get(c, t, child, p) - x.get(c, t, parent, p);
                    out.set(c, t, child, p, val);
                }
            }
        }
    }
    Ok(out)
}

/// Motion stream: backward temporal difference with a zero first frame.
pub fn to_motion_stream(x: &SkeletonSequence) -> SkeletonSequence {
    let mut out = SkeletonSequence::zeros(x.channels, x.frames, x.joints, x.persons);
    out.label = x.label;
    for c in 0..x.channels {
        for t in 1..x.frames {
            for v in 0..x.joints {
                for p in 0..x.persons {
                    let val = x.get(c, t, v, p) - x.get(c, t - 1, v, p);
                    out.set(c, t, v, p, val);
                }
            }
        }
    }
    out
}

pub fn apply_stream(x: &SkeletonSequence, stream: Stream, g: &SkeletonGraph) -> Result<SkeletonSequence> {
    match stream {
        Stream::Joint => Ok(x.clone()),
        Stream::Bone => to_bone_stream(x, g),
        Stream::Motion => Ok(to_motion_stream(x)),
    }
}

// ── Manifest ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.label >= self.num_classes {
                return Err(Error::InvalidManifest(format!(
                    "label {} out of range for {} classes ({})",
                    e.label, self.num_classes, e.path
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Load every sequence named by a manifest, attaching labels. Relative entry
/// paths resolve against the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<SkeletonSequence>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let p = base.join(&e.path);
        let mut seq = load_sequence(&p)?;
        seq.label = Some(e.label);
        out.push(seq);
    }
    Ok(out)
}

// ── Synthetic generator ─────────────────────────────────────────────────

/// Per-sample nuisance shear amplitude in the synthetic generator. Samples
/// are observed under random shears so that raw pooled statistics mix across
/// classes; the normal augmentation pipeline exposes the same family of
/// transforms during pretraining.
pub const SYNTH_NUISANCE_SHEAR: f64 = 0.7;

/// Carrier frequency (cycles per sequence) shared by every class. Classes
/// differ in their per-joint phase patterns, not in spectral content, so
/// coarse energy statistics overlap across classes.
pub const SYNTH_CARRIER_FREQ: f64 = 2.0;

/// Per-sample global amplitude jitter range.
pub const SYNTH_SCALE_JITTER: (f64, f64) = (0.7, 1.3);

/// Per-sample, per-joint-axis relative amplitude jitter. Scatters the
/// direction of pooled energy statistics within a class.
pub const SYNTH_AMP_JITTER: f64 = 0.25;

/// Per-sample nuisance rotation bound (radians) about a random axis.
pub const SYNTH_NUISANCE_ROT: f64 = std::f64::consts::PI / 6.0;

/// Rest pose for the three-branch tree: each chain extends along its own
/// direction from the center.
fn rest_pose(g: &SkeletonGraph) -> Vec<[f64; 3]> {
    let dirs = [
        [0.30, 0.05, 0.10],
        [-0.30, 0.05, 0.10],
        [0.0, 0.35, -0.05],
    ];
    let mut depth = vec![0usize; g.num_joints];
    let mut branch = vec![0usize; g.num_joints];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); g.num_joints];
    for &(p, c) in &g.edges {
        children[p].push(c);
    }
    let mut pose = vec![[0.0f64; 3]; g.num_joints];
    let mut stack: Vec<usize> = vec![g.center];
    let mut branch_counter = 0usize;
    while let Some(j) = stack.pop() {
        for &c in &children[j] {
            if j == g.center {
                branch[c] = branch_counter % 3;
                branch_counter += 1;
            } else {
                branch[c] = branch[j];
            }
            depth[c] = depth[j] + 1;
            let d = dirs[branch[c]];
            for (axis, dv) in d.iter().enumerate() {
                pose[c][axis] = dv * depth[c] as f64;
            }
            stack.push(c);
        }
    }
    pose
}

/// Generate a labeled synthetic dataset of sinusoidal per-class motifs and
/// write it as SKL1 files plus a JSON manifest (and the graph used).
///
/// Every class moves every joint at the same carrier frequency with the same
/// amplitude pattern; what distinguishes classes is the per-joint phase
/// pattern (the coordination of the motion). Samples vary by a global time
/// shift, an amplitude scale, a random shear and additive noise, so coarse
/// pooled statistics mix across classes while the trajectories themselves
/// stay nearest-neighbor separable. Deterministic for a fixed seed.
#[allow(clippy::too_many_arguments)]
pub fn generate_synthetic(
    out_dir: &Path,
    classes: usize,
    per_class: usize,
    frames: usize,
    joints: usize,
    persons: usize,
    seed: u64,
    file_prefix: &str,
) -> Result<DatasetManifest> {
    if classes < 2 {
        return Err(Error::invalid("generate_synthetic", "need at least 2 classes"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let graph = make_tree_graph(joints);
    let pose = rest_pose(&graph);
    // Amplitude basis shared by all classes; phases are the class motif.
    let mut basis_rng = derive_rng(seed, Purpose::Synthetic, u64::MAX, u64::MAX);
    let mut amp = vec![[0.0f64; 3]; joints];
    for j in 0..joints {
        for axis in 0..3 {
            amp[j][axis] = basis_rng.gen_range(0.1..0.35);
        }
    }
    let mut entries = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let mut class_rng = derive_rng(seed, Purpose::Synthetic, class as u64, u64::MAX);
        let mut phase = vec![[0.0f64; 3]; joints];
        for j in 0..joints {
            for axis in 0..3 {
                phase[j][axis] = class_rng.gen_range(0.0..std::f64::consts::TAU);
            }
        }
        for s in 0..per_class {
            let mut rng = derive_rng(seed, Purpose::Synthetic, class as u64, s as u64);
            let noise = Normal::new(0.0, 0.02).unwrap();
            let mut seq = SkeletonSequence::zeros(3, frames, joints, persons);
            seq.label = Some(class);
            for p in 0..persons {
                let time_shift: f64 = rng.gen_range(-0.3..0.3);
                let scale: f64 = rng.gen_range(SYNTH_SCALE_JITTER.0..SYNTH_SCALE_JITTER.1);
                let sn = SYNTH_NUISANCE_SHEAR;
                let mut view = [[0.0f64; 3]; 3];
                for (r, row) in view.iter_mut().enumerate() {
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = if r == c { 1.0 } else { rng.gen_range(-sn..sn) };
                    }
                }
                // Compose a random small rotation into the viewing transform.
                let rot_angle: f64 = rng.gen_range(-SYNTH_NUISANCE_ROT..SYNTH_NUISANCE_ROT);
                let rot_axis: usize = rng.gen_range(0..3);
                let (si, co) = rot_angle.sin_cos();
                let rot = match rot_axis {
                    0 => [[1.0, 0.0, 0.0], [0.0, co, -si], [0.0, si, co]],
                    1 => [[co, 0.0, si], [0.0, 1.0, 0.0], [-si, 0.0, co]],
                    _ => [[co, -si, 0.0], [si, co, 0.0], [0.0, 0.0, 1.0]],
                };
                let mut combined = [[0.0f64; 3]; 3];
                for (r, crow) in combined.iter_mut().enumerate() {
                    for (c, v) in crow.iter_mut().enumerate() {
                        for k in 0..3 {
                            *v += view[r][k] * rot[k][c];
                        }
                    }
                }
                let view = combined;
                let mut amp_jitter = vec![[0.0f64; 3]; joints];
                for aj in amp_jitter.iter_mut() {
                    for v in aj.iter_mut() {
                        *v = 1.0 + rng.gen_range(-SYNTH_AMP_JITTER..SYNTH_AMP_JITTER);
                    }
                }
                for t in 0..frames {
                    let angle =
                        std::f64::consts::TAU * SYNTH_CARRIER_FREQ * t as f64 / frames as f64;
                    for j in 0..joints {
                        let mut point = [0.0f64; 3];
                        for (axis, pv) in point.iter_mut().enumerate() {
                            let wave = (angle + phase[j][axis] + time_shift).sin()
                                * amp[j][axis]
                                * amp_jitter[j][axis]
                                * scale;
                            *pv = pose[j][axis] + wave + noise.sample(&mut rng);
                        }
                        for (axis, row) in view.iter().enumerate() {
                            let val = row[0] * point[0] + row[1] * point[1] + row[2] * point[2];
                            seq.set(axis, t, j, p, val);
                        }
                    }
                }
            }
            let name = format!("{file_prefix}{:04}.skl", class * per_class + s);
            save_sequence(&seq, &out_dir.join(&name))?;
            entries.push(ManifestEntry {
                path: name,
                label: class,
            });
        }
    }
    let manifest = DatasetManifest {
        num_classes: classes,
        entries,
    };
    graph.save(&out_dir.join("graph.json"))?;
    Ok(manifest)
}

/// Convenience path helpers used by the CLI and tests.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn random_sequence(c: usize, t: usize, v: usize, p: usize, seed: u64) -> SkeletonSequence {
        let mut rng = derive_rng(seed, Purpose::Synthetic, 0, 0);
        let mut seq = SkeletonSequence::zeros(c, t, v, p);
        for val in seq.data.iter_mut() {
            *val = rng.gen_range(-1.0f64..1.0) as f32 as f64;
        }
        seq
    }

    #[test]
    fn skl1_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let seq = random_sequence(3, 8, 5, 1, 42);
        let p1 = dir.path().join("a.skl");
        let p2 = dir.path().join("b.skl");
        save_sequence(&seq, &p1).unwrap();
        let loaded = load_sequence(&p1).unwrap();
        save_sequence(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.data, seq.data);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.skl");
        fs::write(&p, b"XXXX\x01\x00\x00\x00").unwrap();
        match load_sequence(&p) {
            Err(Error::BadMagic { found, .. }) => assert_eq!(found, "XXXX"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempdir().unwrap();
        let seq = random_sequence(3, 8, 5, 1, 7);
        let p = dir.path().join("t.skl");
        save_sequence(&seq, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 40]).unwrap();
        match load_sequence(&p) {
            Err(Error::Truncated { expected, found, .. }) => {
                assert_eq!(expected, found + 40);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_payload_is_detected() {
        let dir = tempdir().unwrap();
        let mut seq = random_sequence(1, 2, 2, 1, 7);
        seq.data[3] = f64::NAN;
        let p = dir.path().join("n.skl");
        save_sequence(&seq, &p).unwrap();
        match load_sequence(&p) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 3),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn bone_stream_simple_edge() {
        let g = SkeletonGraph {
            num_joints: 2,
            edges: vec![(0, 1)],
            center: 0,
            left_right_pairs: vec![],
        };
        let mut x = SkeletonSequence::zeros(3, 1, 2, 1);
        x.set(0, 0, 1, 0, 1.0);
        x.set(1, 0, 1, 0, 2.0);
        x.set(2, 0, 1, 0, 3.0);
        let bone = to_bone_stream(&x, &g).unwrap();
        assert_eq!(bone.get(0, 0, 1, 0), 1.0);
        assert_eq!(bone.get(1, 0, 1, 0), 2.0);
        assert_eq!(bone.get(2, 0, 1, 0), 3.0);
        assert_eq!(bone.get(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn bone_stream_chain_pairwise_differences() {
        // chain 0 -> 1 -> 2 with x positions 0, 1, 3 -> bones [0, 1, 2]
        let g = SkeletonGraph {
            num_joints: 3,
            edges: vec![(0, 1), (1, 2)],
            center: 0,
            left_right_pairs: vec![],
        };
        let mut x = SkeletonSequence::zeros(3, 1, 3, 1);
        x.set(0, 0, 1, 0, 1.0);
        x.set(0, 0, 2, 0, 3.0);
        let bone = to_bone_stream(&x, &g).unwrap();
        assert_eq!(bone.get(0, 0, 0, 0), 0.0);
        assert_eq!(bone.get(0, 0, 1, 0), 1.0);
        assert_eq!(bone.get(0, 0, 2, 0), 2.0);
    }

    #[test]
    fn bone_stream_constant_sequence_is_zero() {
        let g = make_tree_graph(9);
        let mut x = SkeletonSequence::zeros(3, 4, 9, 1);
        for val in x.data.iter_mut() {
            *val = 2.5;
        }
        let bone = to_bone_stream(&x, &g).unwrap();
        assert!(bone.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bone_stream_translation_invariant() {
        let g = make_tree_graph(9);
        let x = random_sequence(3, 4, 9, 1, 3);
        let mut shifted = x.clone();
        for c in 0..3 {
            for t in 0..4 {
                for v in 0..9 {
                    let val = shifted.get(c, t, v, 0) + 5.0;
                    shifted.set(c, t, v, 0, val);
                }
            }
        }
        let b1 = to_bone_stream(&x, &g).unwrap();
        let b2 = to_bone_stream(&shifted, &g).unwrap();
        for (a, b) in b1.data.iter().zip(b2.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bone_stream_joint_count_mismatch() {
        let g = make_tree_graph(9);
        let x = SkeletonSequence::zeros(3, 2, 5, 1);
        assert!(to_bone_stream(&x, &g).is_err());
    }

    #[test]
    fn motion_stream_of_linear_ramp() {
        let mut x = SkeletonSequence::zeros(1, 5, 1, 1);
        for t in 0..5 {
            x.set(0, t, 0, 0, 2.0 * t as f64);
        }
        let m = to_motion_stream(&x);
        assert_eq!(m.get(0, 0, 0, 0), 0.0);
        for t in 1..5 {
            assert_eq!(m.get(0, t, 0, 0), 2.0);
        }
    }

    #[test]
    fn motion_stream_static_and_single_frame() {
        let mut x = SkeletonSequence::zeros(2, 3, 2, 1);
        for val in x.data.iter_mut() {
            *val = 1.5;
        }
        assert!(to_motion_stream(&x).data.iter().all(|&v| v == 0.0));
        let single = SkeletonSequence::zeros(2, 1, 2, 1);
        assert!(to_motion_stream(&single).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tree_graph_is_valid() {
        let g = make_tree_graph(9);
        g.validate().unwrap();
        assert_eq!(g.edges.len(), 8);
        assert_eq!(g.left_right_pairs.len(), 3);
        let g25 = make_tree_graph(25);
        g25.validate().unwrap();
    }

    #[test]
    fn graph_validation_rejects_cycles_and_bad_pairs() {
        let mut g = make_tree_graph(5);
        g.edges[0] = (1, 1);
        assert!(g.validate().is_err());
        let mut g2 = make_tree_graph(5);
        g2.left_right_pairs = vec![(0, 1)];
        assert!(g2.validate().is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let m1 = generate_synthetic(d1.path(), 4, 8, 16, 9, 1, 7, "seq_").unwrap();
        let m2 = generate_synthetic(d2.path(), 4, 8, 16, 9, 1, 7, "seq_").unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.entries.len(), 32);
        for class in 0..4 {
            assert_eq!(m1.entries.iter().filter(|e| e.label == class).count(), 8);
        }
        for e in &m1.entries {
            let b1 = fs::read(d1.path().join(&e.path)).unwrap();
            let b2 = fs::read(d2.path().join(&e.path)).unwrap();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn synthetic_classes_are_nearest_neighbor_separable() {
        // Brute-force leave-one-out 1-NN on flattened raw sequences.
        let dir = tempdir().unwrap();
        let m = generate_synthetic(dir.path(), 4, 16, 32, 9, 1, 11, "seq_").unwrap();
        m.save(&dir.path().join("manifest.json")).unwrap();
        let seqs = load_dataset(&dir.path().join("manifest.json")).unwrap();
        let n = seqs.len();
        let mut correct = 0usize;
        for i in 0..n {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d: f64 = seqs[i]
                    .data
                    .iter()
                    .zip(seqs[j].data.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if seqs[best].label == seqs[i].label {
                correct += 1;
            }
        }
        let acc = correct as f64 / n as f64;
        assert!(acc > 0.9, "loo 1-nn accuracy {acc}");
    }

    #[test]
    fn manifest_rejects_out_of_range_labels() {
        let m = DatasetManifest {
            num_classes: 2,
            entries: vec![ManifestEntry {
                path: "x.skl".into(),
                label: 2,
            }],
        };
        assert!(m.validate().is_err());
    }
}
