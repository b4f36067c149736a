//! Probabilistic core: activation entities, spatial compatibilities and the layer likelihood.
//!
//! Every channel of a layer is explained by a mixture over its pattern nodes plus a
//! noise component with flat score `tau`; all mixture weights are uniform. A node with
//! parents scores a position by the geometric mean of one isotropic Gaussian per parent,
//! each centered where that parent predicts the node to be. That product collapses to a
//! single Gaussian times a position-independent factor, which is what [`NodeCompat`]
//! stores so that densities can be evaluated in log space in O(1).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::UnitPosition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub position: UnitPosition,
    /// Number of activation entities at this position, `beta * max(f, 0)`.
    pub weight: f64,
    pub channel: usize,
}

pub fn entity_weight(raw_response: f64, channel_max: f64, beta: f64) -> Result<f64> {
    if !(channel_max > 0.0) {
        return Err(Error::config(format!(
            "channel maximum must be positive, got {channel_max}"
        )));
    }
    Ok(beta * (raw_response / channel_max).max(0.0))
}

/// Log density of an isotropic 2-D normal. Caller guarantees `variance > 0`.
pub fn log_gauss2d(p: UnitPosition, mean: UnitPosition, variance: f64) -> f64 {
    -(p - mean).norm_sq() / (2.0 * variance) - (2.0 * PI * variance).ln()
}

pub fn gauss2d(p: UnitPosition, mean: UnitPosition, variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::domain(format!("variance must be positive, got {variance}")));
    }
    Ok(log_gauss2d(p, mean, variance).exp())
}

/// What one upper-layer parent says about a node in the current image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParentTerm {
    /// Inferred position of the parent in this image.
    pub inferred: UnitPosition,
    /// Parent's prior position.
    pub prior: UnitPosition,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParentEvidence {
    terms: Vec<ParentTerm>,
}

impl ParentEvidence {
    pub fn new(terms: Vec<ParentTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::domain("parent evidence must be nonempty"));
        }
        if let Some(t) = terms.iter().find(|t| !(t.sigma2 > 0.0)) {
            return Err(Error::domain(format!("parent variance must be positive, got {}", t.sigma2)));
        }
        Ok(ParentEvidence { terms })
    }

    pub fn terms(&self) -> &[ParentTerm] {
        &self.terms
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapsedGaussian {
    pub mean: UnitPosition,
    pub variance: f64,
}

/// Collapses the geometric mean of the parent-conditioned Gaussians into one Gaussian:
/// the mean shifts by the precision-weighted parent displacement and the variance is the
/// harmonic mean of the parent variances.
pub fn collapse_parents(mu: UnitPosition, evidence: &ParentEvidence) -> CollapsedGaussian {
    let mut acc = ParentAccumulator::default();
    for t in evidence.terms() {
        acc.add(t);
    }
    let model = acc.model(mu);
    CollapsedGaussian {
        mean: model.mean,
        variance: model.variance,
    }
}

/// Running sums over parent terms, enough to build the collapsed model and its offset.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ParentAccumulator {
    count: usize,
    precision: f64,
    weighted_shift: UnitPosition,
    weighted_shift_sq: f64,
    log_norm: f64,
}

impl ParentAccumulator {
    pub fn add(&mut self, t: &ParentTerm) {
        let w = 1.0 / t.sigma2;
        let shift = t.inferred - t.prior;
        self.count += 1;
        self.precision += w;
        self.weighted_shift = self.weighted_shift + shift * w;
        self.weighted_shift_sq += w * shift.norm_sq();
        self.log_norm += (2.0 * PI * t.sigma2).ln();
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Log-space model of `prod_i N(p | mu - prior_i + inferred_i, sigma2_i)^(1/n)`.
    ///
    /// Panics if no term was added.
    pub fn model(&self, mu: UnitPosition) -> NodeCompat {
        assert!(self.count > 0, "collapsed model needs at least one parent");
        let n = self.count as f64;
        let delta = self.weighted_shift * (1.0 / self.precision);
        let spread = (self.weighted_shift_sq - self.precision * delta.norm_sq()).max(0.0);
        NodeCompat {
            mean: mu + delta,
            variance: n / self.precision,
            log_offset: -spread / (2.0 * n) - self.log_norm / n,
        }
    }
}

/// Compatibility of one node with positions in one image, in collapsed log form:
/// `log compat(p) = log_offset - |p - mean|^2 / (2 variance)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeCompat {
    pub mean: UnitPosition,
    pub variance: f64,
    pub log_offset: f64,
}

impl NodeCompat {
    /// A plain Gaussian; used for dummy-parented nodes and the all-parents-silent fallback.
    pub fn gaussian(mean: UnitPosition, variance: f64) -> Self {
        NodeCompat {
            mean,
            variance,
            log_offset: -(2.0 * PI * variance).ln(),
        }
    }

    pub fn from_parents(mu: UnitPosition, evidence: &ParentEvidence) -> Self {
        let mut acc = ParentAccumulator::default();
        for t in evidence.terms() {
            acc.add(t);
        }
        acc.model(mu)
    }

    pub fn log_at(&self, p: UnitPosition) -> f64 {
        self.log_offset - (p - self.mean).norm_sq() / (2.0 * self.variance)
    }

    pub fn at(&self, p: UnitPosition) -> f64 {
        self.log_at(p).exp()
    }

    /// Shift from the node's prior position to the model mean.
    pub fn shift(&self, mu: UnitPosition) -> UnitPosition {
        self.mean - mu
    }
}

/// Compatibility of a real node with position `p`, evaluated literally as the product
/// `prod N(p | mu - prior + inferred, sigma2)^(1/|E|)`; with no evidence the node is
/// dummy-parented and scores `N(p | mu, sigma2_node)`.
pub fn node_compat(
    p: UnitPosition,
    mu: UnitPosition,
    sigma2_node: f64,
    evidence: Option<&ParentEvidence>,
) -> f64 {
    match evidence {
        None => log_gauss2d(p, mu, sigma2_node).exp(),
        Some(ev) => {
            let n = ev.terms().len() as f64;
            let log: f64 = ev
                .terms()
                .iter()
                .map(|t| log_gauss2d(p, mu - t.prior + t.inferred, t.sigma2))
                .sum();
            (log / n).exp()
        }
    }
}

/// Score of the noise component; constant over the plane.
pub fn noise_compat(tau: f64) -> f64 {
    tau
}

/// Responsibilities over `nodes ∪ {noise}` given log compatibilities of the nodes.
/// The last entry belongs to the noise component. Uniform prior weights cancel.
pub fn posterior(log_compats: &[f64], tau: f64) -> Vec<f64> {
    let log_tau = tau.ln();
    let max = log_compats
        .iter()
        .copied()
        .fold(log_tau, f64::max);
    let n = log_compats.len() + 1;
    if !max.is_finite() {
        log::warn!("all compatibilities vanish; falling back to a uniform posterior");
        return vec![1.0 / n as f64; n];
    }
    let mut q: Vec<f64> = log_compats
        .iter()
        .chain(std::iter::once(&log_tau))
        .map(|l| (l - max).exp())
        .collect();
    let z: f64 = q.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        log::warn!("degenerate posterior normalizer; falling back to uniform");
        return vec![1.0 / n as f64; n];
    }
    for v in &mut q {
        *v /= z;
    }
    q
}

/// `log sum_{V in nodes ∪ noise} P(V) compat(p, V)` with `P(V) = 1 / (N + 1)`.
pub fn log_mixture_density(p: UnitPosition, models: &[NodeCompat], tau: f64) -> f64 {
    let log_tau = tau.ln();
    let mut max = log_tau;
    let logs: Vec<f64> = models.iter().map(|m| m.log_at(p)).collect();
    for &l in &logs {
        max = max.max(l);
    }
    let s: f64 = logs.iter().map(|l| (l - max).exp()).sum::<f64>() + (log_tau - max).exp();
    max + s.ln() - ((models.len() + 1) as f64).ln()
}

/// One image's view of a layer: its entities and the per-filter node models.
#[derive(Debug, Clone, Copy)]
pub struct ImageMixture<'a> {
    pub entities: &'a [Entity],
    /// `models[d]` holds the compatibility models of the nodes of filter `d`.
    pub models: &'a [Vec<NodeCompat>],
}

impl ImageMixture<'_> {
    pub fn log_likelihood(&self, tau: f64) -> f64 {
        self.entities
            .iter()
            .filter(|e| e.weight > 0.0)
            .map(|e| e.weight * log_mixture_density(e.position, &self.models[e.channel], tau))
            .sum()
    }
}

/// `sum_images sum_entities F(x) log sum_V P(V) compat(p_x, V)`, summed in the given image order.
pub fn layer_log_likelihood<'a>(images: impl IntoIterator<Item = ImageMixture<'a>>, tau: f64) -> f64 {
    images.into_iter().map(|im| im.log_likelihood(tau)).sum()
}
