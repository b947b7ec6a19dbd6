//! Samplers and a replicated study runner.
//!
//! Each replication `r` and group `g` draw from their own ChaCha8 stream
//! `(seed, stream = r * 256 + g)`, so results do not depend on thread count
//! or on the order in which replications run.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::diagnostics::{gof_report, model_samples, Band, GapSize, GofOptions};
use crate::error::{DrmError, Result};
use crate::estimation::{fit, FitOptions};
use crate::model::{Group, Observation, SampleSet};
use crate::regression::{CandidateSet, Kernel};

const MAX_GROUPS_PER_REPLICATION: u64 = 256;

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(DrmError::InvalidInput(format!("{what} must be square")));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(DrmError::InvalidInput(format!("{what} must be symmetric")));
    }
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| DrmError::InvalidInput(format!("{what} is not positive definite")))
}

fn check_mean(mu: &[f64], m: &DMatrix<f64>) -> Result<()> {
    if mu.len() != m.nrows() {
        return Err(DrmError::DimensionMismatch {
            expected: m.nrows(),
            found: mu.len(),
        });
    }
    Ok(())
}

fn standard_normal_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn to_observation(v: DVector<f64>) -> Result<Observation> {
    Observation::new(v.iter().copied().collect())
}

/// `n` draws from `N(mu, sigma)` as `mu + L z` with `L L' = sigma`.
pub fn sample_mvn<R: Rng + ?Sized>(
    mu: &[f64],
    sigma: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Observation>> {
    check_mean(mu, sigma)?;
    let l = cholesky(sigma, "covariance")?;
    let mu = DVector::from_column_slice(mu);
    (0..n)
        .map(|_| to_observation(&mu + &l * standard_normal_vector(rng, mu.len())))
        .collect()
}

/// `n` draws from the multivariate Cauchy (t with one degree of freedom)
/// with location `mu` and scale matrix `v`: `mu + L z / |u|`.
pub fn sample_mvcauchy<R: Rng + ?Sized>(
    mu: &[f64],
    v: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Observation>> {
    check_mean(mu, v)?;
    let l = cholesky(v, "scale matrix")?;
    let mu = DVector::from_column_slice(mu);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let z = standard_normal_vector(rng, mu.len());
        let u: f64 = rng.sample(StandardNormal);
        let x = &mu + &l * z / u.abs();
        if x.iter().all(|c| c.is_finite()) {
            out.push(to_observation(x)?);
        }
    }
    Ok(out)
}

fn cross(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// `n` uniform draws on the triangle with the given vertices.
pub fn sample_triangle<R: Rng + ?Sized>(
    v1: [f64; 2],
    v2: [f64; 2],
    v3: [f64; 2],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Observation>> {
    let area2 = cross(v1, v2, v3);
    let span = [v1, v2, v3]
        .iter()
        .flat_map(|v| v.iter().map(|c| c.abs()))
        .fold(1.0_f64, f64::max);
    if !area2.is_finite() || area2.abs() <= 1e-12 * span * span {
        return Err(DrmError::DegenerateInput("triangle vertices are collinear".into()));
    }
    (0..n)
        .map(|_| {
            let s = rng.random::<f64>().sqrt();
            let r2 = rng.random::<f64>();
            let (a, b, c) = (1.0 - s, s * (1.0 - r2), s * r2);
            Observation::new(vec![
                a * v1[0] + b * v2[0] + c * v3[0],
                a * v1[1] + b * v2[1] + c * v3[1],
            ])
        })
        .collect()
}

/// Generating distribution of one group.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Mvn { mu: Vec<f64>, sigma: DMatrix<f64> },
    MvCauchy { mu: Vec<f64>, v: DMatrix<f64> },
    TriangleUniform { vertices: [[f64; 2]; 3] },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Mvn { .. } => "mvn",
            Family::MvCauchy { .. } => "mvcauchy",
            Family::TriangleUniform { .. } => "triangle_uniform",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Family::Mvn { mu, .. } | Family::MvCauchy { mu, .. } => mu.len(),
            Family::TriangleUniform { .. } => 2,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Observation>> {
        match self {
            Family::Mvn { mu, sigma } => sample_mvn(mu, sigma, n, rng),
            Family::MvCauchy { mu, v } => sample_mvcauchy(mu, v, n, rng),
            Family::TriangleUniform { vertices: [a, b, c] } => sample_triangle(*a, *b, *c, n, rng),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Family::Mvn { mu, sigma } => {
                check_mean(mu, sigma)?;
                cholesky(sigma, "covariance").map(|_| ())
            }
            Family::MvCauchy { mu, v } => {
                check_mean(mu, v)?;
                cholesky(v, "scale matrix").map(|_| ())
            }
            Family::TriangleUniform { vertices: [a, b, c] } => {
                sample_triangle(*a, *b, *c, 0, &mut ChaCha8Rng::seed_from_u64(0)).map(|_| ())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub label: String,
    pub family: Family,
    pub size: usize,
}

/// A replicated two-or-more-group study design.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub groups: Vec<GroupSpec>,
    pub reference: usize,
    pub replications: usize,
    pub seed: u64,
    /// Coordinates kept from each generated point (response last); all when
    /// `None`.
    pub columns: Option<Vec<usize>>,
    pub gof: GofOptions,
    pub fit: FitOptions,
}

fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows.len(), rows[0].len(), &rows.concat())
}

fn two_group(name: &str, case: Family, n1: usize, control: Family, n2: usize) -> Scenario {
    Scenario {
        name: name.into(),
        groups: vec![
            GroupSpec {
                label: "case".into(),
                family: case,
                size: n1,
            },
            GroupSpec {
                label: "control".into(),
                family: control,
                size: n2,
            },
        ],
        reference: 1,
        replications: 1,
        seed: 0,
        columns: None,
        gof: GofOptions::default(),
        fit: FitOptions::default(),
    }
}

impl Scenario {
    /// Names accepted by [`Scenario::preset`].
    pub const PRESETS: [&'static str; 6] = ["run1", "run2", "run3", "run4", "tgct3d", "tgct2d"];

    /// Built-in designs. `run1`..`run4` are the bivariate case/control designs
    /// (the control group is the reference); `tgct3d` is a synthetic
    /// (age, height, weight) Gaussian design and `tgct2d` its (height, weight)
    /// projection.
    pub fn preset(name: &str) -> Result<Scenario> {
        let std_cauchy = Family::MvCauchy {
            mu: vec![0.0, 0.0],
            v: DMatrix::identity(2, 2),
        };
        let s = match name {
            "run1" => {
                let sigma = mat(&[&[4.0, 2.0], &[2.0, 3.0]]);
                two_group(
                    name,
                    Family::Mvn {
                        mu: vec![0.0, 0.0],
                        sigma: sigma.clone(),
                    },
                    40,
                    Family::Mvn {
                        mu: vec![0.0, 0.0],
                        sigma,
                    },
                    30,
                )
            }
            "run2" => {
                let sigma = mat(&[&[3.0, 1.0], &[1.0, 2.0]]);
                two_group(
                    name,
                    Family::Mvn {
                        mu: vec![0.0, 0.0],
                        sigma: sigma.clone(),
                    },
                    200,
                    Family::Mvn {
                        mu: vec![1.0, 1.0],
                        sigma,
                    },
                    200,
                )
            }
            "run3" => two_group(
                name,
                std_cauchy,
                200,
                Family::MvCauchy {
                    mu: vec![1.0, 1.0],
                    v: mat(&[&[5.0, 5.0], &[5.0, 10.0]]),
                },
                200,
            ),
            "run4" => two_group(
                name,
                std_cauchy,
                200,
                Family::TriangleUniform {
                    vertices: [[0.0, 0.0], [6.0, 0.0], [-3.0, 4.0]],
                },
                200,
            ),
            "tgct3d" | "tgct2d" => {
                let sigma = tgct_covariance();
                let mut s = two_group(
                    name,
                    Family::Mvn {
                        mu: vec![29.0, 179.5, 79.0],
                        sigma: sigma.clone(),
                    },
                    300,
                    Family::Mvn {
                        mu: vec![30.0, 178.0, 78.0],
                        sigma,
                    },
                    300,
                );
                if name == "tgct2d" {
                    s.columns = Some(vec![1, 2]);
                }
                s
            }
            other => {
                return Err(DrmError::InvalidInput(format!(
                    "unknown preset '{other}' (expected one of {})",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        match &self.columns {
            Some(c) => c.len(),
            None => self.groups.first().map_or(0, |g| g.family.dim()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.len() < 2 {
            return Err(DrmError::InvalidInput("a scenario needs at least two groups".into()));
        }
        if self.groups.len() as u64 > MAX_GROUPS_PER_REPLICATION {
            return Err(DrmError::InvalidInput("too many groups".into()));
        }
        if self.reference >= self.groups.len() {
            return Err(DrmError::GroupOutOfRange {
                index: self.reference,
                groups: self.groups.len(),
            });
        }
        if self.replications == 0 {
            return Err(DrmError::InvalidInput("replications must be at least 1".into()));
        }
        let d = self.groups[0].family.dim();
        for g in &self.groups {
            if g.size == 0 {
                return Err(DrmError::InvalidInput(format!("group '{}' has size 0", g.label)));
            }
            if g.family.dim() != d {
                return Err(DrmError::DimensionMismatch {
                    expected: d,
                    found: g.family.dim(),
                });
            }
            g.family.validate()?;
        }
        if let Some(cols) = &self.columns {
            if cols.is_empty() || cols.iter().any(|&c| c >= d) {
                return Err(DrmError::InvalidInput(format!(
                    "columns must be nonempty indices below {d}"
                )));
            }
        }
        Ok(())
    }

    /// Random stream of group `g` in replication `r`.
    pub fn rng(&self, r: usize, g: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(r as u64 * MAX_GROUPS_PER_REPLICATION + g as u64);
        rng
    }

    /// Data of replication `r`.
    pub fn generate(&self, r: usize) -> Result<SampleSet> {
        let groups = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, spec)| {
                let obs = spec.family.sample(spec.size, &mut self.rng(r, g))?;
                let obs = match &self.columns {
                    Some(cols) => obs
                        .into_iter()
                        .map(|o| Observation::new(cols.iter().map(|&c| o.values()[c]).collect()))
                        .collect::<Result<Vec<_>>>()?,
                    None => obs,
                };
                Ok(Group::new(spec.label.clone(), obs))
            })
            .collect::<Result<Vec<_>>>()?;
        SampleSet::new(groups, self.reference)
    }

    /// Parses the `key = value` scenario format; see the crate README.
    pub fn parse(text: &str) -> Result<Scenario> {
        parse_scenario(text)
    }
}

/// Weight depends on age and height; cases are slightly younger and taller.
fn tgct_covariance() -> DMatrix<f64> {
    // age sd 8, height sd 7 (correlation 0.1), weight = 0.8 age + 0.6 height + e, sd(e) = 6
    let (va, vh, cah) = (64.0, 49.0, 0.1 * 8.0 * 7.0);
    let (ba, bh, ve) = (0.8, 0.6, 36.0);
    let caw = ba * va + bh * cah;
    let chw = ba * cah + bh * vh;
    let vw = ba * ba * va + bh * bh * vh + 2.0 * ba * bh * cah + ve;
    mat(&[&[va, cah, caw], &[cah, vh, chw], &[caw, chw, vw]])
}

fn parse_err(line: usize, msg: impl std::fmt::Display) -> DrmError {
    DrmError::Parse(format!("line {line}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| parse_err(line, format!("invalid value '{v}' for {key}")))
}

fn parse_vec(line: usize, key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| {
            let x: f64 = parse_num(line, key, s.trim())?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(parse_err(line, format!("non-finite value in {key}")))
            }
        })
        .collect()
}

fn parse_matrix(line: usize, key: &str, v: &str) -> Result<DMatrix<f64>> {
    let rows = v
        .split(';')
        .map(|r| parse_vec(line, key, r))
        .collect::<Result<Vec<_>>>()?;
    let c = rows[0].len();
    if rows.iter().any(|r| r.len() != c) {
        return Err(parse_err(line, format!("ragged matrix for {key}")));
    }
    Ok(DMatrix::from_row_slice(rows.len(), c, &rows.concat()))
}

#[derive(Default)]
struct RawGroup {
    family: Option<(usize, String)>,
    size: Option<usize>,
    fields: HashMap<String, (usize, String)>,
}

fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut entries = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_err(line, "expected key = value"))?;
        entries.push((line, key.trim().to_string(), value.trim().to_string()));
    }

    let mut scenario = match entries.iter().find(|(_, k, _)| k == "preset") {
        Some((line, _, v)) => Scenario::preset(v).map_err(|e| parse_err(*line, e))?,
        None => Scenario {
            name: "scenario".into(),
            groups: Vec::new(),
            reference: 0,
            replications: 1,
            seed: 0,
            columns: None,
            gof: GofOptions::default(),
            fit: FitOptions::default(),
        },
    };
    let mut order: Vec<String> = scenario.groups.iter().map(|g| g.label.clone()).collect();
    let mut raw_groups: HashMap<String, RawGroup> = HashMap::new();
    let mut reference: Option<(usize, String)> = scenario
        .groups
        .get(scenario.reference)
        .map(|g| (0, g.label.clone()));

    for (line, key, value) in &entries {
        let (line, v) = (*line, value.as_str());
        match key.as_str() {
            "preset" => {}
            "name" => scenario.name = v.to_string(),
            "seed" => scenario.seed = parse_num(line, key, v)?,
            "replications" => scenario.replications = parse_num(line, key, v)?,
            "reference" => reference = Some((line, v.to_string())),
            "bandwidth" => scenario.gof.predict.bandwidth = parse_num(line, key, v)?,
            "alpha" => scenario.gof.alpha = parse_num(line, key, v)?,
            "k" => scenario.gof.k = parse_num(line, key, v)?,
            "band" => {
                scenario.gof.band = match v {
                    "pointwise" => Band::PointwiseBinomial,
                    "dkw" => Band::Dkw,
                    _ => return Err(parse_err(line, format!("unknown band '{v}'"))),
                }
            }
            "gap_size" => {
                scenario.gof.gap_size = match v {
                    "combined" => GapSize::Combined,
                    "group" => GapSize::Group,
                    _ => return Err(parse_err(line, format!("unknown gap_size '{v}'"))),
                }
            }
            "kernel" => {
                scenario.gof.predict.kernel = match v {
                    "gaussian" => Kernel::Gaussian,
                    "epanechnikov" => Kernel::Epanechnikov,
                    _ => return Err(parse_err(line, format!("unknown kernel '{v}'"))),
                }
            }
            "candidates" => {
                scenario.gof.predict.candidates = match v {
                    "combined" => CandidateSet::Combined,
                    "group" => CandidateSet::Group,
                    _ => return Err(parse_err(line, format!("unknown candidate set '{v}'"))),
                }
            }
            "columns" => {
                scenario.columns = Some(
                    v.split(',')
                        .map(|s| parse_num(line, key, s.trim()))
                        .collect::<Result<Vec<usize>>>()?,
                )
            }
            "max_iter" => scenario.fit.max_iter = parse_num(line, key, v)?,
            "tol" => scenario.fit.tol = parse_num(line, key, v)?,
            "standardize" => {
                scenario.fit.standardize = match v {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => return Err(parse_err(line, format!("invalid value '{v}' for standardize"))),
                }
            }
            k if k.starts_with("group.") => {
                let rest = &k["group.".len()..];
                let (label, field) = rest
                    .rsplit_once('.')
                    .ok_or_else(|| parse_err(line, "expected group.<label>.<field>"))?;
                if label.is_empty() {
                    return Err(parse_err(line, "empty group label"));
                }
                if !order.iter().any(|l| l == label) {
                    order.push(label.to_string());
                }
                let entry = raw_groups.entry(label.to_string()).or_default();
                match field {
                    "family" => entry.family = Some((line, v.to_string())),
                    "size" => entry.size = Some(parse_num(line, key, v)?),
                    "mu" | "sigma" | "v" | "vertices" => {
                        entry.fields.insert(field.to_string(), (line, v.to_string()));
                    }
                    _ => return Err(parse_err(line, format!("unknown group field '{field}'"))),
                }
            }
            _ => return Err(parse_err(line, format!("unknown key '{key}'"))),
        }
    }

    let mut groups = Vec::with_capacity(order.len());
    for label in &order {
        let existing = scenario.groups.iter().find(|g| &g.label == label).cloned();
        let raw = raw_groups.remove(label).unwrap_or_default();
        let family = match (&raw.family, &existing) {
            (Some((line, name)), _) => build_family(*line, label, name, &raw.fields)?,
            (None, Some(g)) if raw.fields.is_empty() => g.family.clone(),
            (None, Some(g)) => build_family(0, label, g.family.name(), &raw.fields)?,
            (None, None) => {
                return Err(DrmError::Parse(format!("group '{label}' has no family")))
            }
        };
        let size = raw
            .size
            .or(existing.as_ref().map(|g| g.size))
            .ok_or_else(|| DrmError::Parse(format!("group '{label}' has no size")))?;
        groups.push(GroupSpec {
            label: label.clone(),
            family,
            size,
        });
    }
    scenario.groups = groups;
    scenario.reference = match reference {
        Some((line, label)) => order
            .iter()
            .position(|l| *l == label)
            .ok_or_else(|| parse_err(line, format!("reference group '{label}' not defined")))?,
        None => order.len().saturating_sub(1),
    };
    scenario.validate()?;
    Ok(scenario)
}

fn build_family(
    line: usize,
    label: &str,
    name: &str,
    fields: &HashMap<String, (usize, String)>,
) -> Result<Family> {
    let get = |f: &str| {
        fields
            .get(f)
            .ok_or_else(|| parse_err(line, format!("group '{label}' ({name}) needs '{f}'")))
    };
    match name {
        "mvn" | "mvcauchy" => {
            let (l, mu) = get("mu")?;
            let mu = parse_vec(*l, "mu", mu)?;
            let key = if name == "mvn" { "sigma" } else { "v" };
            let (l, m) = get(key)?;
            let m = parse_matrix(*l, key, m)?;
            Ok(if name == "mvn" {
                Family::Mvn { mu, sigma: m }
            } else {
                Family::MvCauchy { mu, v: m }
            })
        }
        "triangle_uniform" => {
            let (l, v) = get("vertices")?;
            let m = parse_matrix(*l, "vertices", v)?;
            if m.nrows() != 3 || m.ncols() != 2 {
                return Err(parse_err(*l, "vertices must be three 2D points"));
            }
            Ok(Family::TriangleUniform {
                vertices: [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]], [m[(2, 0)], m[(2, 1)]]],
            })
        }
        other => Err(parse_err(
            line,
            format!("unknown family '{other}' (expected mvn, mvcauchy or triangle_uniform)"),
        )),
    }
}

/// Measures of one group in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRow {
    pub group: String,
    pub r2_alpha_k: f64,
    pub r2_1: Option<f64>,
    pub r2_2: Option<f64>,
    pub r2_3: f64,
    pub r2_3_median: f64,
    pub r2_3_meansq: f64,
    pub mse_drm: f64,
    pub mse_ols: f64,
    pub mse_nw: f64,
    pub mae_drm: f64,
    pub mae_ols: f64,
    pub mae_nw: f64,
}

impl GroupRow {
    pub const METRICS: [&'static str; 12] = [
        "r2_alpha_k",
        "r2_1",
        "r2_2",
        "r2_3",
        "r2_3_median",
        "r2_3_meansq",
        "mse_drm",
        "mse_ols",
        "mse_nw",
        "mae_drm",
        "mae_ols",
        "mae_nw",
    ];

    pub fn metrics(&self) -> [f64; 12] {
        [
            self.r2_alpha_k,
            self.r2_1.unwrap_or(f64::NAN),
            self.r2_2.unwrap_or(f64::NAN),
            self.r2_3,
            self.r2_3_median,
            self.r2_3_meansq,
            self.mse_drm,
            self.mse_ols,
            self.mse_nw,
            self.mae_drm,
            self.mae_ols,
            self.mae_nw,
        ]
    }
}

/// Outcome of one replication: per-group rows, or the failure message.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: usize,
    pub outcome: std::result::Result<Vec<GroupRow>, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub group: String,
    pub statistic: &'static str,
    pub values: [f64; 12],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyTable {
    pub scenario: String,
    pub replications: Vec<Replication>,
    pub summary: Vec<SummaryRow>,
}

impl StudyTable {
    pub fn failures(&self) -> usize {
        self.replications.iter().filter(|r| r.outcome.is_err()).count()
    }

    /// Successful rows of one group.
    pub fn rows(&self, group: &str) -> Vec<&GroupRow> {
        self.replications
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok())
            .flat_map(|rows| rows.iter().filter(|row| row.group == group))
            .collect()
    }

    pub fn summary_value(&self, group: &str, statistic: &str, metric: &str) -> Option<f64> {
        let m = GroupRow::METRICS.iter().position(|x| *x == metric)?;
        self.summary
            .iter()
            .find(|s| s.group == group && s.statistic == statistic)
            .map(|s| s.values[m])
    }

    /// Per-replication rows followed by `mean` and `median` rows per group.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,replication,group,status");
        for m in GroupRow::METRICS {
            out.push(',');
            out.push_str(m);
        }
        out.push('\n');
        let na = |x: f64| if x.is_nan() { "NA".to_string() } else { format!("{x}") };
        for rep in &self.replications {
            match &rep.outcome {
                Ok(rows) => {
                    for row in rows {
                        let _ = write!(out, "replication,{},{},ok", rep.index, row.group);
                        for x in row.metrics() {
                            let _ = write!(out, ",{}", na(x));
                        }
                        out.push('\n');
                    }
                }
                Err(msg) => {
                    let _ = write!(out, "replication,{},,failed: {}", rep.index, msg.replace([',', '\n'], ";"));
                    out.push_str(&",NA".repeat(GroupRow::METRICS.len()));
                    out.push('\n');
                }
            }
        }
        for s in &self.summary {
            let _ = write!(out, "{},,{},ok", s.statistic, s.group);
            for x in s.values {
                let _ = write!(out, ",{}", na(x));
            }
            out.push('\n');
        }
        out
    }
}

fn run_replication(scenario: &Scenario, r: usize) -> Result<Vec<GroupRow>> {
    let data = scenario.generate(r)?;
    let model = fit(&data, &scenario.fit)?;
    model.require_converged()?;
    let report = gof_report(&model, &model_samples(&model), &scenario.gof)?;
    Ok(report
        .groups
        .iter()
        .map(|g| {
            let s = |m: &str| g.score(m).unwrap_or(crate::regression::ErrorScores {
                mse: f64::NAN,
                mae: f64::NAN,
            });
            GroupRow {
                group: g.group.clone(),
                r2_alpha_k: g.r2_alpha_k,
                r2_1: g.r2_1,
                r2_2: g.r2_2,
                r2_3: g.r2_3,
                r2_3_median: g.r2_3_median,
                r2_3_meansq: g.r2_3_meansq,
                mse_drm: s("drm").mse,
                mse_ols: s("ols").mse,
                mse_nw: s("nw").mse,
                mae_drm: s("drm").mae,
                mae_ols: s("ols").mae,
                mae_nw: s("nw").mae,
            }
        })
        .collect())
}

fn mean_median(mut v: Vec<f64>) -> (f64, f64) {
    v.retain(|x| !x.is_nan());
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let m = v.len();
    let median = if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    };
    (mean, median)
}

/// Runs every replication (in parallel on the current rayon pool) and
/// aggregates the successful ones. A failed replication is recorded with its
/// error message and does not abort the study.
pub fn run_study(scenario: &Scenario) -> Result<StudyTable> {
    scenario.validate()?;
    let replications: Vec<Replication> = (0..scenario.replications)
        .into_par_iter()
        .map(|r| Replication {
            index: r,
            outcome: run_replication(scenario, r).map_err(|e| e.to_string()),
        })
        .collect();

    let mut table = StudyTable {
        scenario: scenario.name.clone(),
        replications,
        summary: Vec::new(),
    };
    for spec in &scenario.groups {
        let rows = table.rows(&spec.label);
        let mut means = [f64::NAN; 12];
        let mut medians = [f64::NAN; 12];
        for m in 0..GroupRow::METRICS.len() {
            let (a, b) = mean_median(rows.iter().map(|r| r.metrics()[m]).collect());
            means[m] = a;
            medians[m] = b;
        }
        table.summary.push(SummaryRow {
            group: spec.label.clone(),
            statistic: "mean",
            values: means,
        });
        table.summary.push(SummaryRow {
            group: spec.label.clone(),
            statistic: "median",
            values: medians,
        });
    }
    Ok(table)
}
