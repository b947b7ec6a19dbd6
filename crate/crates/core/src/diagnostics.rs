//! Goodness-of-fit measures comparing the semiparametric distribution
//! estimates with the empirical distribution of each group.
//!
//! * `r2_alpha_k = 1 - exp(-(x / (n_i - x))^k)`, where `x` counts the group's
//!   sample points at which the estimated CDF lies inside a `1 - alpha`
//!   confidence band around the empirical CDF. Tables usually write this as
//!   `R^2_{100 alpha, k}`, so `R^2_{10,2}` is `alpha = 0.10, k = 2`.
//! * `r2_1`: explained-over-total sum of squares of a regression.
//! * `r2_2`: squared correlation between responses and predictions.
//! * `r2_3 = exp(-sqrt(n) max |G_emp - G_hat|)` plus the median and
//!   mean-square variants.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{DrmError, Result};
use crate::estimation::{tilted_cdf, FittedModel, StepCdf};
use crate::model::Observation;
use crate::regression::{
    nadaraya_watson, ols_fit, score_predictions, ErrorScores, PredictOptions, Predictor,
};

/// Fraction of `sample` componentwise `<= t`.
pub fn empirical_cdf(sample: &[Observation], t: &[f64]) -> Result<f64> {
    let first = sample
        .first()
        .ok_or_else(|| DrmError::InvalidInput("empty sample".into()))?;
    if first.dim() != t.len() {
        return Err(DrmError::DimensionMismatch {
            expected: first.dim(),
            found: t.len(),
        });
    }
    let count = sample
        .iter()
        .filter(|o| o.values().iter().zip(t).all(|(a, b)| a <= b))
        .count();
    Ok(count as f64 / sample.len() as f64)
}

/// Confidence band around the empirical CDF used by [`r2_alpha_k`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    /// `G ± z_{1-alpha/2} sqrt(G (1 - G) / n_i)`.
    #[default]
    PointwiseBinomial,
    /// `G ± sqrt(ln(2 / alpha) / (2 n_i))`.
    Dkw,
}

impl Band {
    pub fn half_width(self, g: f64, n: usize, alpha: f64) -> f64 {
        let n = n as f64;
        match self {
            Band::PointwiseBinomial => normal_quantile(1.0 - alpha / 2.0) * (g * (1.0 - g) / n).sqrt(),
            Band::Dkw => dkw_half_width(n as usize, alpha),
        }
    }
}

/// Half-width of the DKW band at confidence `1 - alpha`.
pub fn dkw_half_width(n: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt()
}

pub(crate) fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// `1 - exp(-(x / (n - x))^k)`, equal to 1 when `x = n`.
pub fn r2_alpha_k_value(x: usize, n: usize, k: f64) -> f64 {
    if x >= n {
        1.0
    } else {
        let r = x as f64 / (n - x) as f64;
        1.0 - (-r.powf(k)).exp()
    }
}

/// Estimated and empirical CDF of one group at a set of evaluation points.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfComparison {
    pub empirical: Vec<f64>,
    pub semiparametric: Vec<f64>,
}

impl CdfComparison {
    pub fn gaps(&self) -> Vec<f64> {
        self.empirical
            .iter()
            .zip(&self.semiparametric)
            .map(|(a, b)| (a - b).abs())
            .collect()
    }

    pub fn max_gap(&self) -> f64 {
        self.gaps().into_iter().fold(0.0, f64::max)
    }
}

/// Evaluates both CDFs of sample-set group `g` at `points` (defaults to the
/// group's own sample).
pub fn compare_cdfs(
    model: &FittedModel,
    g: usize,
    sample: &[Observation],
    points: Option<&[Vec<f64>]>,
) -> Result<CdfComparison> {
    let est: StepCdf = tilted_cdf(model, g)?;
    let own: Vec<Vec<f64>>;
    let pts: &[Vec<f64>] = match points {
        Some(p) => p,
        None => {
            own = sample.iter().map(|o| o.values().to_vec()).collect();
            &own
        }
    };
    let empirical = pts
        .iter()
        .map(|t| empirical_cdf(sample, t))
        .collect::<Result<Vec<_>>>()?;
    let semiparametric = pts.iter().map(|t| est.eval(t)).collect();
    Ok(CdfComparison {
        empirical,
        semiparametric,
    })
}

/// `r2_alpha_k` with the count `x` it was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaK {
    pub value: f64,
    pub x_count: usize,
    pub n: usize,
}

pub fn r2_alpha_k(
    model: &FittedModel,
    g: usize,
    sample: &[Observation],
    alpha: f64,
    k: f64,
    band: Band,
) -> Result<AlphaK> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DrmError::InvalidInput(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if !(k > 0.0) {
        return Err(DrmError::InvalidInput(format!("k must be positive, got {k}")));
    }
    let cmp = compare_cdfs(model, g, sample, None)?;
    Ok(alpha_k_from(&cmp, sample.len(), alpha, k, band))
}

fn alpha_k_from(cmp: &CdfComparison, n: usize, alpha: f64, k: f64, band: Band) -> AlphaK {
    let x_count = cmp
        .empirical
        .iter()
        .zip(&cmp.semiparametric)
        .filter(|(e, s)| (*s - *e).abs() <= band.half_width(**e, n, alpha))
        .count();
    AlphaK {
        value: r2_alpha_k_value(x_count, n, k),
        x_count,
        n,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `sum (yhat - ybar)^2 / sum (y - ybar)^2`, capped at 1.
pub fn r2_1(truth: &[f64], preds: &[f64]) -> Result<f64> {
    check_pair(truth, preds)?;
    let ybar = mean(truth);
    let total: f64 = truth.iter().map(|y| (y - ybar).powi(2)).sum();
    if total == 0.0 {
        return Err(DrmError::DegenerateInput("responses have zero variance".into()));
    }
    let explained: f64 = preds.iter().map(|p| (p - ybar).powi(2)).sum();
    Ok((explained / total).min(1.0))
}

/// Squared Pearson correlation of responses and predictions.
pub fn r2_2(truth: &[f64], preds: &[f64]) -> Result<f64> {
    check_pair(truth, preds)?;
    let (my, mp) = (mean(truth), mean(preds));
    let syy: f64 = truth.iter().map(|y| (y - my).powi(2)).sum();
    let spp: f64 = preds.iter().map(|p| (p - mp).powi(2)).sum();
    if syy == 0.0 || spp == 0.0 {
        return Err(DrmError::DegenerateInput(
            "correlation undefined for constant input".into(),
        ));
    }
    let syp: f64 = truth.iter().zip(preds).map(|(y, p)| (y - my) * (p - mp)).sum();
    Ok((syp * syp / (syy * spp)).clamp(0.0, 1.0))
}

fn check_pair(truth: &[f64], preds: &[f64]) -> Result<()> {
    if truth.len() != preds.len() {
        return Err(DrmError::DimensionMismatch {
            expected: truth.len(),
            found: preds.len(),
        });
    }
    if truth.is_empty() {
        return Err(DrmError::InvalidInput("empty input".into()));
    }
    Ok(())
}

/// Functional of the CDF gaps used by [`r2_3`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapVariant {
    /// `exp(-sqrt(n) max |gap|)`.
    #[default]
    Max,
    /// `exp(-sqrt(n) median |gap|)`.
    Median,
    /// `exp(-mean |gap|^2)`.
    MeanSquare,
}

/// Which sample size enters the `sqrt(n)` factor of [`r2_3`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapSize {
    /// Combined size `n`.
    #[default]
    Combined,
    /// The group's own size `n_i`.
    Group,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

fn r2_3_from(gaps: &[f64], n: usize, variant: GapVariant) -> f64 {
    let root_n = (n as f64).sqrt();
    match variant {
        GapVariant::Max => (-root_n * gaps.iter().copied().fold(0.0, f64::max)).exp(),
        GapVariant::Median => (-root_n * median(gaps.to_vec())).exp(),
        GapVariant::MeanSquare => {
            (-gaps.iter().map(|g| g * g).sum::<f64>() / gaps.len() as f64).exp()
        }
    }
}

pub fn r2_3(
    model: &FittedModel,
    g: usize,
    sample: &[Observation],
    variant: GapVariant,
    size: GapSize,
) -> Result<f64> {
    let cmp = compare_cdfs(model, g, sample, None)?;
    let n = match size {
        GapSize::Combined => model.n(),
        GapSize::Group => sample.len(),
    };
    Ok(r2_3_from(&cmp.gaps(), n, variant))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GofOptions {
    pub alpha: f64,
    pub k: f64,
    pub band: Band,
    pub gap_size: GapSize,
    /// Semiparametric regression settings; the bandwidth is also used, per
    /// standardized covariate, for Nadaraya-Watson.
    #[serde(skip)]
    pub predict: PredictOptions,
    /// Skip the regression-based measures (`r2_1`, `r2_2`, errors, residuals).
    pub distribution_only: bool,
}

impl Default for GofOptions {
    fn default() -> Self {
        GofOptions {
            alpha: 0.10,
            k: 2.0,
            band: Band::PointwiseBinomial,
            gap_size: GapSize::Combined,
            predict: PredictOptions::default(),
            distribution_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    #[serde(flatten)]
    pub scores: ErrorScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupGof {
    pub group: String,
    pub n: usize,
    pub r2_alpha_k: f64,
    pub x_count: usize,
    pub r2_3: f64,
    pub r2_3_median: f64,
    pub r2_3_meansq: f64,
    pub max_abs_gap: f64,
    pub r2_1: Option<f64>,
    pub r2_2: Option<f64>,
    /// `y - yhat` of the semiparametric regression.
    pub residuals: Vec<f64>,
    pub scores: Vec<MethodScore>,
}

impl GroupGof {
    pub fn score(&self, method: &str) -> Option<ErrorScores> {
        self.scores.iter().find(|s| s.method == method).map(|s| s.scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotPair {
    pub group: usize,
    pub point_index: usize,
    pub empirical: f64,
    pub semiparametric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    pub alpha: f64,
    pub k: f64,
    pub band: Band,
    pub gap_size: GapSize,
    pub bandwidth: f64,
    pub groups: Vec<GroupGof>,
    pub plot_pairs: Vec<PlotPair>,
}

/// Observations of each sample-set group of the fitted model.
pub fn model_samples(model: &FittedModel) -> Vec<Vec<Observation>> {
    (0..model.group_count())
        .map(|g| {
            model
                .combined
                .indices_of(g)
                .into_iter()
                .map(|i| Observation::new(model.combined.point(i).to_vec()).expect("validated data"))
                .collect()
        })
        .collect()
}

/// Computes every measure for every group. `samples[g]` is the data used as
/// the empirical side for sample-set group `g`; pass [`model_samples`] for
/// in-sample diagnostics.
pub fn gof_report(
    model: &FittedModel,
    samples: &[Vec<Observation>],
    opts: &GofOptions,
) -> Result<GofReport> {
    if samples.len() != model.group_count() {
        return Err(DrmError::DimensionMismatch {
            expected: model.group_count(),
            found: samples.len(),
        });
    }
    let mut groups = Vec::with_capacity(samples.len());
    let mut plot_pairs = Vec::new();
    for (g, sample) in samples.iter().enumerate() {
        if sample.is_empty() {
            return Err(DrmError::InvalidInput(format!(
                "no observations for group '{}'",
                model.groups[g].label
            )));
        }
        let cmp = compare_cdfs(model, g, sample, None)?;
        let ak = alpha_k_from(&cmp, sample.len(), opts.alpha, opts.k, opts.band);
        let gaps = cmp.gaps();
        let n_gap = match opts.gap_size {
            GapSize::Combined => model.n(),
            GapSize::Group => sample.len(),
        };
        plot_pairs.extend(cmp.empirical.iter().zip(&cmp.semiparametric).enumerate().map(
            |(k, (e, s))| PlotPair {
                group: g,
                point_index: k,
                empirical: *e,
                semiparametric: *s,
            },
        ));

        let mut entry = GroupGof {
            group: model.groups[g].label.clone(),
            n: sample.len(),
            r2_alpha_k: ak.value,
            x_count: ak.x_count,
            r2_3: r2_3_from(&gaps, n_gap, GapVariant::Max),
            r2_3_median: r2_3_from(&gaps, n_gap, GapVariant::Median),
            r2_3_meansq: r2_3_from(&gaps, n_gap, GapVariant::MeanSquare),
            max_abs_gap: cmp.max_gap(),
            r2_1: None,
            r2_2: None,
            residuals: Vec::new(),
            scores: Vec::new(),
        };
        if !opts.distribution_only {
            fill_regression(model, g, sample, opts, &mut entry)?;
        }
        groups.push(entry);
    }
    Ok(GofReport {
        alpha: opts.alpha,
        k: opts.k,
        band: opts.band,
        gap_size: opts.gap_size,
        bandwidth: opts.predict.bandwidth,
        groups,
        plot_pairs,
    })
}

fn fill_regression(
    model: &FittedModel,
    g: usize,
    sample: &[Observation],
    opts: &GofOptions,
    entry: &mut GroupGof,
) -> Result<()> {
    let truth: Vec<f64> = sample.iter().map(Observation::response).collect();
    let queries: Vec<Vec<f64>> = sample.iter().map(|o| o.covariates().to_vec()).collect();
    let predictor = Predictor::new(model, g, opts.predict)?;
    let drm = predictor
        .predict_many(&queries)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let ols = ols_fit(sample)?;
    let ols_pred: Vec<f64> = queries.iter().map(|x| ols.predict(x)).collect();

    let dim = model.dim();
    let nw_h: Vec<f64> = model.scale[..dim - 1]
        .iter()
        .map(|s| opts.predict.bandwidth * s)
        .collect();
    let nw = queries
        .iter()
        .map(|x| nadaraya_watson(sample, x, &nw_h, opts.predict.kernel))
        .collect::<Result<Vec<_>>>()?;

    entry.r2_1 = r2_1(&truth, &drm).ok();
    entry.r2_2 = r2_2(&truth, &drm).ok();
    entry.residuals = truth.iter().zip(&drm).map(|(y, p)| y - p).collect();
    entry.scores = vec![
        MethodScore {
            method: "drm".into(),
            scores: score_predictions(&truth, &drm)?,
        },
        MethodScore {
            method: "ols".into(),
            scores: score_predictions(&truth, &ols_pred)?,
        },
        MethodScore {
            method: "nw".into(),
            scores: score_predictions(&truth, &nw)?,
        },
    ];
    Ok(())
}
