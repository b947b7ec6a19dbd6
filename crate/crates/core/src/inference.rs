//! Large-sample covariance of the tilt estimates and Wald tests.
//!
//! All integrals against the reference distribution are plug-in sums over the
//! combined data weighted by the fitted jumps `p_i`. Writing `D = 1 + sum_k
//! rho_k w_k`, `c = 1 / (1 + sum_k rho_k)` and `phi = (1, t')'`:
//!
//! * `S` is the limit of `-(1/n)` times the Hessian of the profile
//!   log-likelihood;
//! * `V` is the variance of `(1/sqrt(n))` times the score, built from
//!   `A0(j,r) = int w_j w_r / D dG`, `A1(j,r) = int w_j w_r t / D dG`,
//!   `A2(j,j') = int w_j w_j' t t' / D dG` and `E_j = int t w_j dG`, where the
//!   index `r` also runs over the reference (`w = 1`, `rho = 1`).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{DrmError, Result};
use crate::estimation::{condition_estimate, param_index, FittedModel};

/// Which product of `S` and `V` to use as the limiting covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceForm {
    /// `S^-1 V S^-1`.
    Sandwich,
    /// `S^-1 V S`.
    AsPrinted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticCovariance {
    pub s: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// `S^-1 V S^-1`.
    pub sigma: DMatrix<f64>,
    /// `S^-1 V S`, kept for comparison.
    pub sigma_as_printed: DMatrix<f64>,
    pub n: usize,
}

impl AsymptoticCovariance {
    pub fn matrix(&self, form: CovarianceForm) -> &DMatrix<f64> {
        match form {
            CovarianceForm::Sandwich => &self.sigma,
            CovarianceForm::AsPrinted => &self.sigma_as_printed,
        }
    }

    /// `sqrt(diag(Sigma) / n)`; NaN where the diagonal is negative.
    pub fn standard_errors(&self, form: CovarianceForm) -> Vec<f64> {
        let m = self.matrix(form);
        (0..m.nrows())
            .map(|k| (m[(k, k)] / self.n as f64).sqrt())
            .collect()
    }
}

/// Per-point quantities shared by the S and V estimates.
struct PlugIn {
    q: usize,
    dim: usize,
    c: f64,
    rho: Vec<f64>,
    /// `(p_i, w_i (length q), D_i, t_i)` per combined point.
    rows: Vec<(f64, Vec<f64>, f64, Vec<f64>)>,
}

impl PlugIn {
    fn new(model: &FittedModel) -> Result<Self> {
        let tilts = model.tilts()?;
        let q = model.q();
        let rows = (0..model.n())
            .map(|i| {
                let w = (0..q).map(|j| tilts.w(i, j)).collect();
                let d = tilts.log_denominator(i).exp();
                (model.p_hat[i], w, d, model.combined.point(i).to_vec())
            })
            .collect();
        Ok(PlugIn {
            q,
            dim: model.dim(),
            c: 1.0 / (1.0 + model.rho.iter().sum::<f64>()),
            rho: model.rho.clone(),
            rows,
        })
    }

    fn n_params(&self) -> usize {
        self.q * (1 + self.dim)
    }

    /// Tilt `r` at a point, with `r = q` the reference.
    fn w(w: &[f64], r: usize) -> f64 {
        if r == w.len() {
            1.0
        } else {
            w[r]
        }
    }

    fn rho_ext(&self, r: usize) -> f64 {
        if r == self.q {
            1.0
        } else {
            self.rho[r]
        }
    }

    /// `int f(t) dG(t)` as `sum_i p_i f(t_i)`.
    fn integrate(&self, f: impl Fn(&[f64], f64, &[f64]) -> f64) -> f64 {
        self.rows.iter().map(|(p, w, d, t)| p * f(w, *d, t)).sum()
    }

    fn a0(&self, j: usize, r: usize) -> f64 {
        self.integrate(|w, d, _| Self::w(w, j) * Self::w(w, r) / d)
    }

    fn a1(&self, j: usize, r: usize, l: usize) -> f64 {
        self.integrate(|w, d, t| Self::w(w, j) * Self::w(w, r) * t[l] / d)
    }

    fn a2(&self, j: usize, jp: usize, l: usize, lp: usize) -> f64 {
        self.integrate(|w, d, t| w[j] * w[jp] * t[l] * t[lp] / d)
    }

    fn e(&self, j: usize, l: usize) -> f64 {
        self.integrate(|w, _, t| t[l] * w[j])
    }

    fn m2(&self, j: usize, l: usize, lp: usize) -> f64 {
        self.integrate(|w, _, t| w[j] * t[l] * t[lp])
    }
}

/// Plug-in estimate of the limiting negative scaled Hessian `S`.
pub fn estimate_s(model: &FittedModel) -> Result<DMatrix<f64>> {
    let pi = PlugIn::new(model)?;
    let (q, dim) = (pi.q, pi.dim);
    let np = pi.n_params();
    let mut s = DMatrix::zeros(np, np);
    for j in 0..q {
        for jp in j..q {
            for a in 0..=dim {
                for b in 0..=dim {
                    let phi = |t: &[f64], k: usize| if k == 0 { 1.0 } else { t[k - 1] };
                    let val = if j == jp {
                        // rho_j c int w_j phi_a phi_b [1 + sum_{k != j} rho_k w_k] / D dG
                        pi.rho[j]
                            * pi.c
                            * pi.integrate(|w, d, t| {
                                let others: f64 = (0..q)
                                    .filter(|&k| k != j)
                                    .map(|k| pi.rho[k] * w[k])
                                    .sum();
                                w[j] * phi(t, a) * phi(t, b) * (1.0 + others) / d
                            })
                    } else {
                        -pi.rho[j]
                            * pi.rho[jp]
                            * pi.c
                            * pi.integrate(|w, d, t| w[j] * w[jp] * phi(t, a) * phi(t, b) / d)
                    };
                    let r = param_index(q, dim, j, a);
                    let c = param_index(q, dim, jp, b);
                    s[(r, c)] = val;
                    s[(c, r)] = val;
                }
            }
        }
    }
    Ok(s)
}

/// Plug-in estimate of `V = Var[(1/sqrt(n)) score]`.
pub fn estimate_v(model: &FittedModel) -> Result<DMatrix<f64>> {
    let pi = PlugIn::new(model)?;
    let (q, dim) = (pi.q, pi.dim);
    let np = pi.n_params();
    let c = pi.c;
    let m = q + 1;
    let n = model.n() as f64;

    let a0: Vec<Vec<f64>> = (0..q).map(|j| (0..m).map(|r| pi.a0(j, r)).collect()).collect();
    let a1: Vec<Vec<Vec<f64>>> = (0..q)
        .map(|j| (0..m).map(|r| (0..dim).map(|l| pi.a1(j, r, l)).collect()).collect())
        .collect();
    let e: Vec<Vec<f64>> = (0..q).map(|j| (0..dim).map(|l| pi.e(j, l)).collect()).collect();

    let mut v = DMatrix::zeros(np, np);
    for j in 0..q {
        for jp in 0..q {
            let k = pi.rho[j] * pi.rho[jp] * c;
            let sum_r = |f: &dyn Fn(usize) -> f64| (0..m).map(|r| pi.rho_ext(r) * f(r)).sum::<f64>();

            // alpha_j, alpha_j'
            let aa = k * (a0[j][jp] - sum_r(&|r| a0[j][r] * a0[jp][r]));
            v[(param_index(q, dim, j, 0), param_index(q, dim, jp, 0))] = aa;

            // alpha_j, beta_j'
            for l in 0..dim {
                let ab = k * (a0[j][jp] * e[jp][l] - sum_r(&|r| a0[j][r] * a1[jp][r][l]));
                let r_ = param_index(q, dim, j, 0);
                let c_ = param_index(q, dim, jp, l + 1);
                v[(r_, c_)] = ab;
                v[(c_, r_)] = ab;
            }

            // beta_j, beta_j'
            for l in 0..dim {
                for lp in 0..dim {
                    let mut bb = k
                        * (-pi.a2(j, jp, l, lp)
                            + e[j][l] * a1[j][jp][lp]
                            + a1[j][jp][l] * e[jp][lp]
                            - sum_r(&|r| a1[j][r][l] * a1[jp][r][lp]));
                    if j == jp {
                        // within-sample covariance of group j, (n_j / n) Cov_j(t)
                        let n_j = model.groups[model.group_of_tilt(j)].size as f64;
                        bb += n_j / n * (pi.m2(j, l, lp) - e[j][l] * e[j][lp]);
                    }
                    v[(param_index(q, dim, j, l + 1), param_index(q, dim, jp, lp + 1))] = bb;
                }
            }
        }
    }
    // Symmetrize against rounding in the separately accumulated halves.
    let vt = v.transpose();
    Ok((v + vt) * 0.5)
}

fn invert(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let cond = condition_estimate(m);
    if !cond.is_finite() || cond > 1e14 {
        return Err(DrmError::Singular {
            context: context.into(),
            condition: cond,
        });
    }
    m.clone().try_inverse().ok_or_else(|| DrmError::Singular {
        context: context.into(),
        condition: cond,
    })
}

/// Computes `S`, `V` and both covariance forms at the fitted parameters.
pub fn asymptotic_covariance(model: &FittedModel) -> Result<AsymptoticCovariance> {
    let s = estimate_s(model)?;
    let v = estimate_v(model)?;
    let s_inv = invert(&s, "S matrix")?;
    let sigma = &s_inv * &v * &s_inv;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let sigma_as_printed = &s_inv * &v * &s;
    Ok(AsymptoticCovariance {
        s,
        v,
        sigma,
        sigma_as_printed,
        n: model.n(),
    })
}

/// Which coefficients a Wald test restricts to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaldTarget {
    /// `beta_g = 0` for one non-reference sample-set group.
    Group(usize),
    /// All `beta_j = 0` (equidistribution).
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(dof as f64)
        .map(|d| d.sf(x))
        .unwrap_or(f64::NAN)
}

/// Wald test of `beta = 0` on the chosen block using `Sigma / n`.
pub fn wald_test(
    model: &FittedModel,
    cov: &AsymptoticCovariance,
    target: WaldTarget,
    form: CovarianceForm,
) -> Result<WaldResult> {
    let (q, dim) = (model.q(), model.dim());
    let tilts: Vec<usize> = match target {
        WaldTarget::Joint => (0..q).collect(),
        WaldTarget::Group(g) => {
            model.check_group(g)?;
            match model.tilt_index(g) {
                Some(j) => vec![j],
                None => {
                    return Err(DrmError::InvalidInput(
                        "the reference group has no tilt to test".into(),
                    ))
                }
            }
        }
    };
    let idx: Vec<usize> = tilts
        .iter()
        .flat_map(|&j| (1..=dim).map(move |a| param_index(q, dim, j, a)))
        .collect();
    let theta = model.params.theta();
    let sigma = cov.matrix(form);
    let n = cov.n as f64;
    let block = DMatrix::from_fn(idx.len(), idx.len(), |r, c| sigma[(idx[r], idx[c])] / n);
    let est = nalgebra::DVector::from_iterator(idx.len(), idx.iter().map(|&k| theta[k]));
    let dof = idx.len();
    if est.iter().all(|v| *v == 0.0) {
        return Ok(WaldResult {
            statistic: 0.0,
            dof,
            p_value: 1.0,
        });
    }
    let inv = invert(&block, "Wald covariance block")?;
    let statistic = (est.transpose() * inv * &est)[(0, 0)];
    Ok(WaldResult {
        statistic,
        dof,
        p_value: chi_square_sf(statistic, dof),
    })
}

/// One per-group Wald test in a serialized summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWald {
    pub group: String,
    #[serde(flatten)]
    pub result: WaldResult,
}

/// Standard errors, Wald tests and constraint residuals attached to a saved fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceSummary {
    pub covariance_form: CovarianceForm,
    pub se: Vec<f64>,
    pub wald_per_group: Vec<GroupWald>,
    pub wald_joint: WaldResult,
    pub constraint_residuals: Vec<f64>,
}

pub fn summarize(model: &FittedModel, form: CovarianceForm) -> Result<InferenceSummary> {
    let cov = asymptotic_covariance(model)?;
    let wald_per_group = (0..model.q())
        .map(|j| {
            let g = model.group_of_tilt(j);
            Ok(GroupWald {
                group: model.groups[g].label.clone(),
                result: wald_test(model, &cov, WaldTarget::Group(g), form)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InferenceSummary {
        covariance_form: form,
        se: cov.standard_errors(form),
        wald_per_group,
        wald_joint: wald_test(model, &cov, WaldTarget::Joint, form)?,
        constraint_residuals: model.constraint_residuals(),
    })
}
