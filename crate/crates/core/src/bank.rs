//! Online perspective prototypes.
//!
//! The bank clusters incoming descriptors by nearest prototype and keeps
//! each prototype at the exact running mean of its members. Counts give the
//! mixture weights, and a Welford accumulator gives each slot an isotropic
//! spread (mean squared distance to its prototype). Together they define a
//! Gaussian-mixture affinity used to synthesise pseudo perspectives.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::kernels::dot;
use crate::numerics::{Graph, Rng, Tensor, Var};

/// Lower bound on every slot variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const SNAPSHOT_MAGIC: &[u8; 8] = b"PVBANK\0\0";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    dim: usize,
    capacity: usize,
    prototypes: Vec<f64>,
    counts: Vec<u64>,
    /// Welford sum of squared deviations per slot.
    m2: Vec<f64>,
    variances: Vec<f64>,
    weights: Vec<f64>,
    total: u64,
}

/// How a pseudo perspective is derived from a descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    /// `p * (alpha + (1 - alpha) G(p))`.
    Scalar,
    /// `alpha p + (1 - alpha) sum_n r_n(p) P_n` with mixture responsibilities `r_n`.
    Responsibility,
}

/// Which per-component kernel enters the mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Affinity {
    /// `exp(-|p - P_n|^2 / 2 S_n)`, peak value 1.
    Kernel,
    /// Normalised isotropic Gaussian density; underflows for long descriptors.
    Density,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoConfig {
    pub alpha: f64,
    pub mode: PseudoMode,
    pub affinity: Affinity,
    /// Pull toward a weight-sampled prototype before modulation; 0 disables.
    pub stochastic_step: f64,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            mode: PseudoMode::Scalar,
            affinity: Affinity::Kernel,
            stochastic_step: 0.0,
        }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) && self.alpha != 1.0 {
            return Err(config_err!("pseudo alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.stochastic_step) {
            return Err(config_err!("stochastic step must be in [0, 1], got {}", self.stochastic_step));
        }
        Ok(())
    }
}

impl PrototypeBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(config_err!("bank needs positive capacity and dim, got {capacity} x {dim}"));
        }
        Ok(Self {
            dim,
            capacity,
            prototypes: vec![0.0; capacity * dim],
            counts: vec![0; capacity],
            m2: vec![0.0; capacity],
            variances: vec![VARIANCE_FLOOR; capacity],
            weights: vec![0.0; capacity],
            total: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of slots holding at least one descriptor.
    pub fn initialized(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn is_slot_initialized(&self, n: usize) -> bool {
        self.counts[n] > 0
    }

    pub fn total_observations(&self) -> u64 {
        self.total
    }

    pub fn prototype(&self, n: usize) -> &[f64] {
        &self.prototypes[n * self.dim..(n + 1) * self.dim]
    }

    pub fn count(&self, n: usize) -> u64 {
        self.counts[n]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Variance used by slot `n`'s kernel.
    pub fn variance(&self, n: usize) -> f64 {
        self.variances[n]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of the nearest initialized prototype (lowest index on ties).
    pub fn nearest(&self, p: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for n in 0..self.capacity {
            if self.counts[n] == 0 {
                continue;
            }
            let d = sq_dist(p, self.prototype(n));
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((n, d));
            }
        }
        best.map(|(n, _)| n)
    }

    /// Assigns `p` to a slot and updates that slot's running statistics.
    /// The first `capacity` descriptors seed the slots in arrival order.
    pub fn observe(&mut self, p: &[f64]) -> Result<usize> {
        if p.len() != self.dim {
            return Err(shape_err!("descriptor of length {} for bank of dim {}", p.len(), self.dim));
        }
        if let Some(i) = p.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite descriptor entry {i}")));
        }
        let n = if (self.total as usize) < self.capacity {
            let n = self.total as usize;
            self.prototypes[n * self.dim..(n + 1) * self.dim].copy_from_slice(p);
            self.counts[n] = 1;
            self.m2[n] = 0.0;
            n
        } else {
            let n = self.nearest(p).expect("bank is full");
            self.counts[n] += 1;
            let c = self.counts[n] as f64;
            let proto = &mut self.prototypes[n * self.dim..(n + 1) * self.dim];
            let mut m2 = 0.0;
            for (pm, &x) in proto.iter_mut().zip(p) {
                let before = x - *pm;
                *pm += before / c;
                m2 += before * (x - *pm);
            }
            self.m2[n] += m2;
            n
        };
        self.total += 1;
        self.refresh();
        Ok(n)
    }

    /// Recomputes weights and effective variances from counts and M2.
    fn refresh(&mut self) {
        let total = self.total as f64;
        let (spread_m2, spread_c) = (0..self.capacity)
            .filter(|&n| self.counts[n] > 1)
            .fold((0.0, 0.0), |(m, c), n| (m + self.m2[n], c + self.counts[n] as f64));
        let pooled = if spread_c > 0.0 { spread_m2 / spread_c } else { 0.0 };
        let global = pooled.max(VARIANCE_FLOOR);
        for n in 0..self.capacity {
            let c = self.counts[n];
            self.weights[n] = if total > 0.0 { c as f64 / total } else { 0.0 };
            self.variances[n] = if c > 1 && self.m2[n] > 0.0 {
                (self.m2[n] / c as f64).max(VARIANCE_FLOOR)
            } else {
                global
            };
        }
    }

    fn require_initialized(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::State("prototype bank has no initialized slot".into()));
        }
        Ok(())
    }

    fn check_dim(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim {
            return Err(shape_err!("descriptor of length {} for bank of dim {}", p.len(), self.dim));
        }
        Ok(())
    }

    /// Log of each slot's weighted component value at `p`
    /// (`-inf` for empty slots).
    fn log_terms(&self, p: &[f64], affinity: Affinity) -> Vec<f64> {
        (0..self.capacity)
            .map(|n| {
                if self.counts[n] == 0 {
                    return f64::NEG_INFINITY;
                }
                let s = self.variances[n];
                let mut l = self.weights[n].ln() - sq_dist(p, self.prototype(n)) / (2.0 * s);
                if affinity == Affinity::Density {
                    l -= 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * s).ln();
                }
                l
            })
            .collect()
    }

    /// `G(p) = sum_n pi_n exp(-|p - P_n|^2 / (2 S_n))`, in `(0, 1]` up to underflow.
    pub fn mixture_affinity(&self, p: &[f64]) -> Result<f64> {
        self.affinity(p, Affinity::Kernel)
    }

    pub fn affinity(&self, p: &[f64], kind: Affinity) -> Result<f64> {
        self.require_initialized()?;
        self.check_dim(p)?;
        Ok(log_sum_exp(&self.log_terms(p, kind)).exp())
    }

    /// Mixture log-density in log space (normalised components).
    pub fn log_density(&self, p: &[f64]) -> Result<f64> {
        self.require_initialized()?;
        self.check_dim(p)?;
        Ok(log_sum_exp(&self.log_terms(p, Affinity::Density)))
    }

    /// Affinity and its gradient with respect to `p`.
    pub fn affinity_with_grad(&self, p: &[f64], kind: Affinity) -> Result<(f64, Vec<f64>)> {
        self.require_initialized()?;
        self.check_dim(p)?;
        let terms = self.log_terms(p, kind);
        let lse = log_sum_exp(&terms);
        let g = lse.exp();
        let mut grad = vec![0.0; self.dim];
        for n in 0..self.capacity {
            let t = terms[n].exp();
            if t == 0.0 {
                continue;
            }
            let s = self.variances[n];
            for (gd, (&x, &c)) in grad.iter_mut().zip(p.iter().zip(self.prototype(n))) {
                *gd -= t * (x - c) / s;
            }
        }
        Ok((g, grad))
    }

    /// Mixture responsibilities at `p` and the responsibility-weighted prototype.
    pub fn responsibilities(&self, p: &[f64], kind: Affinity) -> Result<(Vec<f64>, Vec<f64>)> {
        self.require_initialized()?;
        self.check_dim(p)?;
        let terms = self.log_terms(p, kind);
        let lse = log_sum_exp(&terms);
        let r: Vec<f64> = terms.iter().map(|t| (t - lse).exp()).collect();
        let mut mix = vec![0.0; self.dim];
        for (n, &rn) in r.iter().enumerate() {
            if rn == 0.0 {
                continue;
            }
            for (m, c) in mix.iter_mut().zip(self.prototype(n)) {
                *m += rn * c;
            }
        }
        Ok((r, mix))
    }

    /// Pseudo perspective for descriptor `p`. `rng` is only consulted when
    /// the stochastic pull is enabled.
    pub fn generate_pseudo(&self, p: &[f64], cfg: &PseudoConfig, rng: Option<&mut Rng>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![p.len()], p.to_vec())?);
        let out = self.pseudo_graph(&mut g, v, cfg, rng)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Differentiable pseudo-perspective generation. The bank itself is a
    /// constant of the tape; gradients flow to `v` only.
    pub fn pseudo_graph(&self, g: &mut Graph, v: Var, cfg: &PseudoConfig, rng: Option<&mut Rng>) -> Result<Var> {
        self.require_initialized()?;
        let shape = g.value(v).shape().to_vec();
        self.check_dim(g.value(v).data())?;
        let mut v = v;
        if cfg.stochastic_step > 0.0 {
            if let Some(rng) = rng {
                let s = rng.categorical(&self.weights);
                let eta = cfg.stochastic_step;
                let target = Tensor::from_parts(shape.clone(), self.prototype(s).iter().map(|c| eta * c).collect());
                let shrunk = g.scale(v, 1.0 - eta);
                let t = g.constant(target);
                v = g.add(shrunk, t)?;
            }
        }
        let alpha = cfg.alpha;
        let p = g.value(v).data().to_vec();
        match cfg.mode {
            PseudoMode::Scalar => {
                let f = self.modulation_graph(g, v, cfg)?;
                g.scale_by(v, f)
            }
            PseudoMode::Responsibility => {
                let (r, mix) = self.responsibilities(&p, cfg.affinity)?;
                let out = Tensor::from_parts(
                    shape,
                    p.iter().zip(&mix).map(|(x, m)| alpha * x + (1.0 - alpha) * m).collect(),
                );
                let protos = Rc::new(self.prototypes.clone());
                let vars = self.variances.clone();
                let dim = self.dim;
                Ok(g.custom(&[v], out, move |gr, pv, _| {
                    let u = gr.data();
                    let x = pv[0].data();
                    let mu = dot(&mix, u);
                    let mut d: Vec<f64> = u.iter().map(|ui| alpha * ui).collect();
                    for (n, &rn) in r.iter().enumerate() {
                        if rn == 0.0 {
                            continue;
                        }
                        let proto = &protos[n * dim..(n + 1) * dim];
                        let coef = (1.0 - alpha) * rn * (dot(proto, u) - mu) / vars[n];
                        for (dk, (&xk, &ck)) in d.iter_mut().zip(x.iter().zip(proto)) {
                            *dk -= coef * (xk - ck);
                        }
                    }
                    vec![Tensor::from_parts(pv[0].shape().to_vec(), d)]
                }))
            }
        }
    }

    /// Scalar node `alpha + (1 - alpha) G(v)`, differentiable in `v`.
    pub fn modulation_graph(&self, g: &mut Graph, v: Var, cfg: &PseudoConfig) -> Result<Var> {
        let alpha = cfg.alpha;
        let (aff, grad) = self.affinity_with_grad(g.value(v).data(), cfg.affinity)?;
        let factor = alpha + (1.0 - alpha) * aff;
        if !factor.is_finite() {
            return Err(Error::Numeric(format!("mixture affinity is not finite ({aff})")));
        }
        Ok(g.custom(&[v], Tensor::scalar(factor), move |gr, pv, _| {
            let s = (1.0 - alpha) * gr.item();
            vec![Tensor::from_parts(pv[0].shape().to_vec(), grad.iter().map(|d| s * d).collect())]
        }))
    }

    /// Versioned little-endian snapshot: magic, version, N, dim, then
    /// prototypes, variances, weights (f64), counts (u64) and the Welford
    /// accumulators (f64).
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.capacity * (self.dim + 4) * 8);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.capacity as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in self.prototypes.iter().chain(&self.variances).chain(&self.weights) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for v in &self.m2 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != SNAPSHOT_MAGIC {
            return Err(r.error_at(0, "bad bank snapshot magic"));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(r.error_at(8, &format!("unsupported bank snapshot version {version}")));
        }
        let capacity = r.u64()? as usize;
        let dim = r.u64()? as usize;
        if capacity == 0 || dim == 0 {
            return Err(r.error_at(12, "bank snapshot with zero capacity or dim"));
        }
        let need = capacity
            .checked_mul(dim)
            .and_then(|pd| pd.checked_add(4 * capacity))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| r.error_at(12, "bank snapshot dimensions overflow"))?;
        if r.remaining() < need {
            return Err(r.error_at(bytes.len(), &format!("truncated bank snapshot: need {need} more bytes, have {}", r.remaining())));
        }
        let prototypes = r.f64s(capacity * dim)?;
        let variances = r.f64s(capacity)?;
        let weights = r.f64s(capacity)?;
        let counts = (0..capacity).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let m2 = r.f64s(capacity)?;
        if r.remaining() != 0 {
            return Err(r.error_at(r.offset(), "trailing bytes after bank snapshot"));
        }
        let total = counts.iter().sum();
        Ok(Self {
            dim,
            capacity,
            prototypes,
            counts,
            m2,
            variances,
            weights,
            total,
        })
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn error_at(&self, offset: usize, msg: &str) -> Error {
        Error::Parse {
            offset,
            message: msg.to_string(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error_at(self.pos, &format!("unexpected end of data: wanted {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}
