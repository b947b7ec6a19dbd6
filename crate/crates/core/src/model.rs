//! Samples, parameters and exponential tilts.
//!
//! Every group `j` other than the reference is modelled as an exponential
//! tilt of the reference density `g`:
//!
//! ```text
//! g_j(t) / g(t) = exp(alpha_j + beta_j' t)
//! ```
//!
//! Observations are `L`-vectors ordered as covariates followed by the
//! response. Non-reference groups are indexed `0..q` in the order they appear
//! in the [`SampleSet`], skipping the reference.

use serde::{Deserialize, Serialize};

use crate::error::{DrmError, Result};

/// Largest exponent whose `exp` is finite.
pub const MAX_EXPONENT: f64 = 709.782_712_893_384;

/// One `L`-dimensional observation `(x_1, ..., x_{L-1}, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(Vec<f64>);

impl Observation {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(DrmError::InvalidInput("observation has no coordinates".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DrmError::InvalidInput(format!(
                "non-finite value at coordinate {pos}"
            )));
        }
        Ok(Observation(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn covariates(&self) -> &[f64] {
        &self.0[..self.0.len() - 1]
    }

    pub fn response(&self) -> f64 {
        self.0[self.0.len() - 1]
    }
}

/// A labelled sample from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub label: String,
    pub observations: Vec<Observation>,
}

impl Group {
    pub fn new(label: impl Into<String>, observations: Vec<Observation>) -> Self {
        Group {
            label: label.into(),
            observations,
        }
    }

    /// Builds a group from raw rows, validating each one.
    pub fn from_rows(label: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let observations = rows
            .into_iter()
            .map(Observation::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(Group::new(label, observations))
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// The `m = q + 1` samples with a designated reference group.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    groups: Vec<Group>,
    reference: usize,
    dim: usize,
}

impl SampleSet {
    pub fn new(groups: Vec<Group>, reference: usize) -> Result<Self> {
        if groups.len() < 2 {
            return Err(DrmError::InvalidInput(format!(
                "need at least 2 groups, found {}",
                groups.len()
            )));
        }
        if reference >= groups.len() {
            return Err(DrmError::GroupOutOfRange {
                index: reference,
                groups: groups.len(),
            });
        }
        if let Some(g) = groups.iter().find(|g| g.is_empty()) {
            return Err(DrmError::InvalidInput(format!("group '{}' is empty", g.label)));
        }
        let dim = groups[0].observations[0].dim();
        for g in &groups {
            for obs in &g.observations {
                if obs.dim() != dim {
                    return Err(DrmError::DimensionMismatch {
                        expected: dim,
                        found: obs.dim(),
                    });
                }
            }
        }
        Ok(SampleSet {
            groups,
            reference,
            dim,
        })
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    /// Model dimension `L`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of tilted groups `q = m - 1`.
    pub fn q(&self) -> usize {
        self.groups.len() - 1
    }

    /// Combined size `n`.
    pub fn total(&self) -> usize {
        self.groups.iter().map(Group::len).sum()
    }

    /// Sample-set indices of the non-reference groups, in tilt order.
    pub fn tilted_groups(&self) -> Vec<usize> {
        (0..self.groups.len()).filter(|&g| g != self.reference).collect()
    }

    /// `rho_j = n_j / n_m` for each tilted group.
    pub fn rho(&self) -> Vec<f64> {
        let n_ref = self.groups[self.reference].len() as f64;
        self.tilted_groups()
            .into_iter()
            .map(|g| self.groups[g].len() as f64 / n_ref)
            .collect()
    }

    /// Stacks all observations into the combined vector: tilted groups in
    /// order, reference last.
    pub fn combined(&self) -> CombinedData {
        let mut order = self.tilted_groups();
        order.push(self.reference);
        let mut values = Vec::with_capacity(self.total() * self.dim);
        let mut group_of = Vec::with_capacity(self.total());
        for g in order {
            for obs in &self.groups[g].observations {
                values.extend_from_slice(obs.values());
                group_of.push(g);
            }
        }
        CombinedData {
            dim: self.dim,
            values,
            group_of,
        }
    }
}

/// Combined data `t_1, ..., t_n` stored row-major, with the sample-set
/// group each row came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedData {
    pub dim: usize,
    pub values: Vec<f64>,
    pub group_of: Vec<usize>,
}

impl CombinedData {
    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    /// Rows belonging to sample-set group `g`.
    pub fn indices_of(&self, g: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.group_of[i] == g).collect()
    }

    /// Per-coordinate pooled mean and (population) standard deviation.
    pub fn pooled_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.dim];
        for p in self.points() {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.dim];
        for p in self.points() {
            for ((s, v), m) in var.iter_mut().zip(p).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd = var.into_iter().map(|s| (s / n).sqrt()).collect();
        (mean, sd)
    }
}

/// Tilt parameters `(alpha_1..alpha_q, beta_1..beta_q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn zeros(q: usize, dim: usize) -> Self {
        ModelParams {
            alpha: vec![0.0; q],
            beta: vec![vec![0.0; dim]; q],
        }
    }

    pub fn new(alpha: Vec<f64>, beta: Vec<Vec<f64>>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(DrmError::DimensionMismatch {
                expected: alpha.len(),
                found: beta.len(),
            });
        }
        if let Some(first) = beta.first() {
            if let Some(b) = beta.iter().find(|b| b.len() != first.len()) {
                return Err(DrmError::DimensionMismatch {
                    expected: first.len(),
                    found: b.len(),
                });
            }
        }
        Ok(ModelParams { alpha, beta })
    }

    pub fn q(&self) -> usize {
        self.alpha.len()
    }

    pub fn dim(&self) -> usize {
        self.beta.first().map_or(0, Vec::len)
    }

    /// Flattened `theta = (alpha_1..alpha_q, beta_1', ..., beta_q')'`, length `q(1+L)`.
    pub fn theta(&self) -> Vec<f64> {
        let mut theta = self.alpha.clone();
        for b in &self.beta {
            theta.extend_from_slice(b);
        }
        theta
    }

    pub fn from_theta(q: usize, dim: usize, theta: &[f64]) -> Result<Self> {
        if theta.len() != q * (1 + dim) {
            return Err(DrmError::DimensionMismatch {
                expected: q * (1 + dim),
                found: theta.len(),
            });
        }
        let alpha = theta[..q].to_vec();
        let beta = theta[q..].chunks_exact(dim).map(<[f64]>::to_vec).collect();
        Ok(ModelParams { alpha, beta })
    }

    /// Position of `alpha_j` in `theta`.
    pub fn alpha_index(j: usize) -> usize {
        j
    }

    /// Position of `beta_{j,l}` in `theta`.
    pub fn beta_index(q: usize, dim: usize, j: usize, l: usize) -> usize {
        q + j * dim + l
    }

    /// Exponent `alpha_j + beta_j' t`.
    pub fn exponent(&self, j: usize, t: &[f64]) -> f64 {
        self.alpha[j] + self.beta[j].iter().zip(t).map(|(b, x)| b * x).sum::<f64>()
    }
}

/// The `n x q` matrix `w_j(t_i)` together with the group ratios `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltWeights {
    q: usize,
    /// Row-major `log w_j(t_i)`.
    log_w: Vec<f64>,
    pub rho: Vec<f64>,
}

impl TiltWeights {
    pub fn n(&self) -> usize {
        if self.q == 0 {
            0
        } else {
            self.log_w.len() / self.q
        }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn w(&self, i: usize, j: usize) -> f64 {
        self.log_w[i * self.q + j].exp()
    }

    pub fn log_w(&self, i: usize, j: usize) -> f64 {
        self.log_w[i * self.q + j]
    }

    /// `log(1 + sum_k rho_k w_k(t_i))`, evaluated stably.
    pub fn log_denominator(&self, i: usize) -> f64 {
        let row = &self.log_w[i * self.q..(i + 1) * self.q];
        let terms = row.iter().zip(&self.rho).map(|(lw, r)| lw + r.ln());
        log1p_sum_exp(terms)
    }
}

/// `log(1 + sum exp(x_k))`.
pub(crate) fn log1p_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(0.0_f64, f64::max);
    let s = (-max).exp() + xs.map(|x| (x - max).exp()).sum::<f64>();
    max + s.ln()
}

/// Evaluates `w_j(t_i) = exp(alpha_j + beta_j' t_i)` over the combined data.
pub fn tilt_weights(params: &ModelParams, data: &SampleSet) -> Result<TiltWeights> {
    if params.q() != data.q() {
        return Err(DrmError::DimensionMismatch {
            expected: data.q(),
            found: params.q(),
        });
    }
    tilts_on(params, &data.combined(), data.rho())
}

pub(crate) fn tilts_on(
    params: &ModelParams,
    combined: &CombinedData,
    rho: Vec<f64>,
) -> Result<TiltWeights> {
    if params.dim() != combined.dim {
        return Err(DrmError::DimensionMismatch {
            expected: combined.dim,
            found: params.dim(),
        });
    }
    let q = params.q();
    let mut log_w = Vec::with_capacity(combined.len() * q);
    for (i, t) in combined.points().enumerate() {
        for j in 0..q {
            let e = params.exponent(j, t);
            if !e.is_finite() || e > MAX_EXPONENT {
                return Err(DrmError::NumericOverflow { index: i, exponent: e });
            }
            log_w.push(e);
        }
    }
    Ok(TiltWeights { q, log_w, rho })
}
