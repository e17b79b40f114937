//! Memory bank, conditional distributions over positives and negatives, and
//! the contrastive losses: InfoNCE, dual distributional divergence, and
//! nearest-neighbor mining.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorRef};

/// What to do when a pushed embedding is not unit norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormPolicy {
    #[default]
    Renormalize,
    Reject,
}

/// Fixed-capacity FIFO queue of unit-norm embeddings, oldest first.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    items: Vec<Vec<f64>>,
    policy: NormPolicy,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        MemoryBank {
            capacity,
            dim,
            items: Vec::new(),
            policy: NormPolicy::Renormalize,
        }
    }

    pub fn with_policy(capacity: usize, dim: usize, policy: NormPolicy) -> Self {
        MemoryBank {
            capacity,
            dim,
            items: Vec::new(),
            policy,
        }
    }

    /// Fill to capacity with seeded random unit vectors.
    pub fn random_init(capacity: usize, dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut bank = MemoryBank::new(capacity, dim);
        for _ in 0..capacity {
            let mut v: Vec<f64> = (0..dim)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in v.iter_mut() {
                *x /= n;
            }
            bank.items.push(v);
        }
        bank
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[Vec<f64>] {
        &self.items
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.items[i]
    }

    /// Append a batch, evicting oldest entries past capacity. Non-unit
    /// vectors are renormalized or rejected per policy.
    pub fn enqueue(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        for v in batch {
            if v.len() != self.dim {
                return Err(Error::ShapeMismatch {
                    op: "enqueue",
                    lhs: vec![self.dim],
                    rhs: vec![v.len()],
                });
            }
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !n.is_finite() || n == 0.0 {
                return Err(Error::invalid("enqueue", "zero or non-finite embedding norm"));
            }
            let stored = if (n - 1.0).abs() > 1e-5 {
                match self.policy {
                    NormPolicy::Renormalize => v.iter().map(|x| x / n).collect(),
                    NormPolicy::Reject => {
                        return Err(Error::invalid(
                            "enqueue",
                            format!("embedding norm {n} not within 1e-5 of 1"),
                        ))
                    }
                }
            } else {
                v.clone()
            };
            self.items.push(stored);
        }
        if self.items.len() > self.capacity {
            let excess = self.items.len() - self.capacity;
            self.items.drain(0..excess);
        }
        Ok(())
    }

    /// Insert without normalization checks; used when restoring saved state.
    pub fn push_exact(&mut self, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "push_exact",
                lhs: vec![self.dim],
                rhs: vec![v.len()],
            });
        }
        self.items.push(v);
        if self.items.len() > self.capacity {
            self.items.remove(0);
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn check_query(op: &'static str, q: &[f64], z: &[f64], bank: &MemoryBank, tau: f64) -> Result<()> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if tau <= 0.0 {
        return Err(Error::invalid(op, format!("temperature {tau} must be > 0")));
    }
    if q.len() != z.len() || q.len() != bank.dim() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![q.len()],
            rhs: vec![z.len().max(bank.dim())],
        });
    }
    Ok(())
}

/// Similarity logits [q.z/tau, q.m_1/tau, ..., q.m_M/tau].
fn bank_logits(q: &[f64], z: &[f64], bank: &MemoryBank, tau: f64) -> Vec<f64> {
    let mut logits = Vec::with_capacity(bank.len() + 1);
    logits.push(dot(q, z) / tau);
    for m in bank.items() {
        logits.push(dot(q, m) / tau);
    }
    logits
}

fn softmax_stable(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// Conditional distribution of a query over the positive and the bank:
/// entry 0 is p(z|q), entries 1..=M are p(m_i|q).
pub fn conditional_distribution(
    q: &[f64],
    z: &[f64],
    bank: &MemoryBank,
    tau: f64,
) -> Result<Vec<f64>> {
    check_query("conditional_distribution", q, z, bank, tau)?;
    Ok(softmax_stable(&bank_logits(q, z, bank, tau)))
}

/// InfoNCE: negative log-likelihood of the positive under the conditional
/// distribution.
pub fn info_nce(q: &[f64], z: &[f64], bank: &MemoryBank, tau: f64) -> Result<f64> {
    let dist = conditional_distribution(q, z, bank, tau)?;
    Ok(-dist[0].ln())
}

/// Average cross-entropy from a fixed target distribution to the two
/// extreme-view distributions: (L_d1 + L_d2) / 2 with
/// L_d = -sum_j p_hat[j] * log p[j]. Terms with p_hat[j] = 0 contribute 0.
pub fn d3m_loss(p_hat: &[f64], p_tilde: &[f64], p_drop: &[f64]) -> Result<f64> {
    if p_hat.len() != p_tilde.len() || p_hat.len() != p_drop.len() {
        return Err(Error::ShapeMismatch {
            op: "d3m_loss",
            lhs: vec![p_hat.len()],
            rhs: vec![p_tilde.len().max(p_drop.len())],
        });
    }
    let ce = |p: &[f64]| -> f64 {
        p_hat
            .iter()
            .zip(p.iter())
            .filter(|(h, _)| **h != 0.0)
            .map(|(h, v)| -h * v.ln())
            .sum()
    };
    Ok(0.5 * (ce(p_tilde) + ce(p_drop)))
}

/// Indices of the k largest similarities q.m_i, ties broken by lower index.
/// Returns min(k, bank size) indices in ascending index order.
pub fn mine_neighbors(q: &[f64], bank: &MemoryBank, k: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = bank
        .items()
        .iter()
        .enumerate()
        .map(|(i, m)| (i, dot(q, m)))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut picked: Vec<usize> = ranked.iter().take(k).map(|(i, _)| *i).collect();
    picked.sort_unstable();
    picked
}

/// Union of index sets, deduplicated and sorted.
pub fn union_indices(sets: &[&[usize]]) -> Vec<usize> {
    let mut all: Vec<usize> = sets.iter().flat_map(|s| s.iter().copied()).collect();
    all.sort_unstable();
    all.dedup();
    all
}

fn validate_n_plus(n_plus: &[usize], bank_len: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; bank_len];
    for &i in n_plus {
        if i >= bank_len {
            return Err(Error::invalid(
                "nnm_loss",
                format!("neighbor index {i} out of bank range {bank_len}"),
            ));
        }
        mask[i] = true;
    }
    Ok(mask)
}

/// Nearest-neighbor mining loss: the mined bank entries join the positive
/// in the numerator while the denominator stays the full pool.
pub fn nnm_loss(q: &[f64], z: &[f64], bank: &MemoryBank, tau: f64, n_plus: &[usize]) -> Result<f64> {
    check_query("nnm_loss", q, z, bank, tau)?;
    let plus = validate_n_plus(n_plus, bank.len())?;
    let logits = bank_logits(q, z, bank, tau);
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut num = (logits[0] - mx).exp();
    let mut den = num;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        let e = (l - mx).exp();
        den += e;
        if plus[i - 1] {
            num += e;
        }
    }
    Ok(den.ln() - num.ln())
}

// ── Tape builders (training path) ───────────────────────────────────────

/// Similarity logits of a tape query against constant positive and bank,
/// shaped `[M+1, 1]`.
pub fn bank_logits_on_tape(
    tape: &mut Tape,
    q: TensorRef,
    z: &[f64],
    bank: &MemoryBank,
    tau: f64,
) -> Result<TensorRef> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if tau <= 0.0 {
        return Err(Error::invalid(
            "bank_logits_on_tape",
            format!("temperature {tau} must be > 0"),
        ));
    }
    let d = tape.shape(q)[0];
    if z.len() != d || bank.dim() != d {
        return Err(Error::ShapeMismatch {
            op: "bank_logits_on_tape",
            lhs: vec![d],
            rhs: vec![z.len().max(bank.dim())],
        });
    }
    let rows = bank.len() + 1;
    let mut keys = Vec::with_capacity(rows * d);
    keys.extend_from_slice(z);
    for m in bank.items() {
        keys.extend_from_slice(m);
    }
    let keys_t = tape.constant(keys, vec![rows, d])?;
    let q_col = tape.reshape(q, &[d, 1])?;
    let sims = tape.matmul(keys_t, q_col)?;
    Ok(tape.mul_scalar(sims, 1.0 / tau))
}

/// Conditional distribution of a tape query, shaped `[M+1, 1]`.
pub fn distribution_on_tape(
    tape: &mut Tape,
    q: TensorRef,
    z: &[f64],
    bank: &MemoryBank,
    tau: f64,
) -> Result<TensorRef> {
    let logits = bank_logits_on_tape(tape, q, z, bank, tau)?;
    tape.softmax(logits, 0)
}

/// InfoNCE on the tape; gradient flows to the query only.
pub fn info_nce_on_tape(
    tape: &mut Tape,
    q: TensorRef,
    z: &[f64],
    bank: &MemoryBank,
    tau: f64,
) -> Result<TensorRef> {
    let dist = distribution_on_tape(tape, q, z, bank, tau)?;
    let lg = tape.log(dist);
    let mut pick = vec![0.0f64; bank.len() + 1];
    pick[0] = 1.0;
    let picked = tape.mask_mul(lg, &pick)?;
    let s = tape.sum_all(picked)?;
    Ok(tape.neg(s))
}

/// Cross-entropy from a constant target distribution to a tape distribution.
pub fn cross_entropy_const_target(
    tape: &mut Tape,
    target: &[f64],
    dist: TensorRef,
) -> Result<TensorRef> {
    if tape.data(dist).len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_const_target",
            lhs: vec![target.len()],
            rhs: tape.shape(dist).to_vec(),
        });
    }
    let lg = tape.log(dist);
    let weighted = tape.mask_mul(lg, target)?;
    let s = tape.sum_all(weighted)?;
    Ok(tape.neg(s))
}

/// Nearest-neighbor mining loss on the tape.
pub fn nnm_on_tape(
    tape: &mut Tape,
    q: TensorRef,
    z: &[f64],
    bank: &MemoryBank,
    tau: f64,
    n_plus: &[usize],
) -> Result<TensorRef> {
    let plus = validate_n_plus(n_plus, bank.len())?;
    let logits = bank_logits_on_tape(tape, q, z, bank, tau)?;
    let mx = tape
        .data(logits)
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(logits, -mx);
    let e = tape.exp(shifted);
    let den = tape.sum_all(e)?;
    let mut mask = vec![0.0f64; bank.len() + 1];
    mask[0] = 1.0;
    for (i, &p) in plus.iter().enumerate() {
        if p {
            mask[i + 1] = 1.0;
        }
    }
    let masked = tape.mask_mul(e, &mask)?;
    let num = tape.sum_all(masked)?;
    let log_den = tape.log(den);
    let log_num = tape.log(num);
    tape.sub(log_den, log_num)
}
