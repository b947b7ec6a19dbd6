mod data;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use densratio::diagnostics::{gof_report, Band, GapSize, GapVariant, GofOptions};
use densratio::inference::{summarize, CovarianceForm, InferenceSummary};
use densratio::regression::{
    nadaraya_watson, ols_fit, CandidateSet, Kernel, PredictOptions, Predictor,
};
use densratio::simulation::{run_study, Scenario};
use densratio::{fit, persist, DrmError, FitOptions, FittedModel, ModelParams, Observation, Result, SampleSet};

/// Semiparametric density ratio models for multiple samples.
#[derive(Parser)]
#[command(name = "densratio", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    Sandwich,
    AsPrinted,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Method {
    Drm,
    Nw,
    Ols,
}

#[derive(Clone, Copy, ValueEnum)]
enum CandidateArg {
    Combined,
    Group,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Gaussian,
    Epanechnikov,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Max,
    Median,
    Meansq,
}

#[derive(Clone, Copy, ValueEnum)]
enum BandArg {
    Pointwise,
    Dkw,
}

#[derive(Clone, Copy, ValueEnum)]
enum GapSizeArg {
    Combined,
    Group,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model and write it with standard errors and Wald tests.
    Fit {
        data: PathBuf,
        /// Label of the reference group (default: last group in the file).
        #[arg(long)]
        reference: Option<String>,
        #[arg(long, value_enum, default_value = "on")]
        standardize: OnOff,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        #[arg(long, value_enum, default_value = "sandwich")]
        covariance: FormArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the response of one group at query covariates.
    Predict {
        model: PathBuf,
        queries: PathBuf,
        #[arg(long)]
        group: String,
        #[arg(long, default_value_t = 0.3)]
        bandwidth: f64,
        #[arg(long, value_enum, default_value = "drm")]
        method: Method,
        #[arg(long, value_enum, default_value = "combined")]
        candidate_set: CandidateArg,
        #[arg(long, value_enum, default_value = "gaussian")]
        kernel: KernelArg,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Goodness-of-fit report for a saved model against a data file.
    Gof {
        model: PathBuf,
        data: PathBuf,
        #[arg(long, default_value_t = 0.10)]
        alpha: f64,
        #[arg(long, default_value_t = 2.0)]
        k: f64,
        /// CDF-gap measure shown in the summary table.
        #[arg(long, value_enum, default_value = "max")]
        variant: VariantArg,
        #[arg(long, value_enum, default_value = "pointwise")]
        band: BandArg,
        #[arg(long, value_enum, default_value = "combined")]
        gap_size: GapSizeArg,
        #[arg(long, default_value_t = 0.3)]
        bandwidth: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
    /// Run a replicated simulation study.
    Simulate {
        /// Scenario file (key = value); omit when using --preset.
        scenario: Option<PathBuf>,
        #[arg(long, conflicts_with = "scenario")]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replications: Option<usize>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Error(DrmError),
    Partial(String),
}

impl From<DrmError> for Failure {
    fn from(e: DrmError) -> Self {
        Failure::Error(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let text: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("error[usage]: {}", text.join(" ").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            let (tag, code) = if e.is_numerical() { ("numerical", 3) } else { ("input", 2) };
            eprintln!("error[{tag}]: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
        Err(Failure::Partial(msg)) => {
            eprintln!("error[partial]: {msg}");
            ExitCode::from(4)
        }
    }
}

fn run(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Fit {
            data,
            reference,
            standardize,
            tol,
            max_iter,
            covariance,
            out,
        } => {
            let opts = FitOptions {
                tol,
                max_iter,
                standardize: matches!(standardize, OnOff::On),
                ..FitOptions::default()
            };
            let form = match covariance {
                FormArg::Sandwich => CovarianceForm::Sandwich,
                FormArg::AsPrinted => CovarianceForm::AsPrinted,
            };
            cmd_fit(&data, reference.as_deref(), &opts, form, &out)?
        }
        Command::Predict {
            model,
            queries,
            group,
            bandwidth,
            method,
            candidate_set,
            kernel,
            out,
        } => {
            let opts = PredictOptions {
                bandwidth,
                kernel: kernel_of(kernel),
                candidates: match candidate_set {
                    CandidateArg::Combined => CandidateSet::Combined,
                    CandidateArg::Group => CandidateSet::Group,
                },
            };
            cmd_predict(&model, &queries, &group, method, opts, out.as_deref())?
        }
        Command::Gof {
            model,
            data,
            alpha,
            k,
            variant,
            band,
            gap_size,
            bandwidth,
            out,
            plot_data,
        } => {
            let opts = GofOptions {
                alpha,
                k,
                band: match band {
                    BandArg::Pointwise => Band::PointwiseBinomial,
                    BandArg::Dkw => Band::Dkw,
                },
                gap_size: match gap_size {
                    GapSizeArg::Combined => GapSize::Combined,
                    GapSizeArg::Group => GapSize::Group,
                },
                predict: PredictOptions {
                    bandwidth,
                    ..PredictOptions::default()
                },
                distribution_only: false,
            };
            let variant = match variant {
                VariantArg::Max => GapVariant::Max,
                VariantArg::Median => GapVariant::Median,
                VariantArg::Meansq => GapVariant::MeanSquare,
            };
            cmd_gof(&model, &data, &opts, variant, &out, plot_data.as_deref())?
        }
        Command::Simulate {
            scenario,
            preset,
            seed,
            replications,
            threads,
            out,
        } => cmd_simulate(scenario.as_deref(), preset.as_deref(), seed, replications, threads, &out)?,
    }
    Ok(())
}

fn kernel_of(k: KernelArg) -> Kernel {
    match k {
        KernelArg::Gaussian => Kernel::Gaussian,
        KernelArg::Epanechnikov => Kernel::Epanechnikov,
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| DrmError::InvalidInput(format!("cannot read {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<(FittedModel, Option<InferenceSummary>)> {
    persist::from_json(&read_text(path)?)
}

fn group_of(model: &FittedModel, label: &str) -> Result<usize> {
    model.group_index(label).ok_or_else(|| {
        let known: Vec<&str> = model.groups.iter().map(|g| g.label.as_str()).collect();
        DrmError::InvalidInput(format!("unknown group '{label}' (model has {})", known.join(", ")))
    })
}

fn cmd_fit(
    path: &Path,
    reference: Option<&str>,
    opts: &FitOptions,
    form: CovarianceForm,
    out: &Path,
) -> Result<()> {
    let file = data::read_data(path)?;
    let labels: Vec<String> = file.group_labels().into_iter().map(String::from).collect();
    let reference = match reference {
        Some(r) => labels.iter().position(|l| l == r).ok_or_else(|| {
            DrmError::InvalidInput(format!("reference group '{r}' not found in {}", path.display()))
        })?,
        None => labels.len() - 1,
    };
    let sample = SampleSet::new(file.into_groups(), reference)?;
    let model = fit(&sample, opts)?;
    model.require_converged()?;
    let inference = summarize(&model, form)?;
    data::write_text(out, &persist::to_json(&model, Some(inference.clone()))?)?;
    print_fit_summary(&model, &inference);
    Ok(())
}

fn print_fit_summary(model: &FittedModel, inf: &InferenceSummary) {
    let (q, dim) = (model.q(), model.dim());
    println!(
        "converged in {} iterations, log-likelihood {:.6}, max |score| {:.3e}",
        model.iterations, model.log_lik, model.grad_norm
    );
    println!("reference group: {}", model.groups[model.reference].label);
    println!("{:<16} {:<10} {:>14} {:>12}", "group", "parameter", "estimate", "std.err");
    for j in 0..q {
        let label = &model.groups[model.group_of_tilt(j)].label;
        let a = ModelParams::alpha_index(j);
        println!("{:<16} {:<10} {:>14.6} {:>12.6}", label, "alpha", model.params.alpha[j], inf.se[a]);
        for l in 0..dim {
            let b = ModelParams::beta_index(q, dim, j, l);
            println!(
                "{:<16} {:<10} {:>14.6} {:>12.6}",
                label,
                format!("beta[{}]", l + 1),
                model.params.beta[j][l],
                inf.se[b]
            );
        }
    }
    println!("{:<16} {:>12} {:>6} {:>12}", "wald test", "statistic", "df", "p-value");
    for w in &inf.wald_per_group {
        println!(
            "{:<16} {:>12.4} {:>6} {:>12.4e}",
            w.group, w.result.statistic, w.result.dof, w.result.p_value
        );
    }
    println!(
        "{:<16} {:>12.4} {:>6} {:>12.4e}",
        "joint", inf.wald_joint.statistic, inf.wald_joint.dof, inf.wald_joint.p_value
    );
    let worst = inf
        .constraint_residuals
        .iter()
        .fold(0.0_f64, |m, r| m.max(r.abs()));
    println!("max constraint residual: {worst:.3e}");
}

fn group_sample(model: &FittedModel, g: usize) -> Vec<Observation> {
    model
        .combined
        .indices_of(g)
        .into_iter()
        .map(|i| Observation::new(model.combined.point(i).to_vec()).expect("stored points are finite"))
        .collect()
}

fn cmd_predict(
    model_path: &Path,
    queries_path: &Path,
    group: &str,
    method: Method,
    opts: PredictOptions,
    out: Option<&Path>,
) -> Result<()> {
    let (model, _) = load_model(model_path)?;
    let g = group_of(&model, group)?;
    let (header, queries) = data::read_queries(queries_path)?;
    let expected = model.dim() - 1;
    if header.len() != expected {
        return Err(DrmError::InvalidInput(format!(
            "{}: expected {expected} covariate columns, found {}",
            queries_path.display(),
            header.len()
        )));
    }
    if !(opts.bandwidth > 0.0 && opts.bandwidth.is_finite()) {
        return Err(DrmError::InvalidInput("bandwidth must be positive".into()));
    }
    let preds: Vec<Result<f64>> = match method {
        Method::Drm => Predictor::new(&model, g, opts)?.predict_many(&queries),
        Method::Nw => {
            let sample = group_sample(&model, g);
            let h: Vec<f64> = model.scale[..expected].iter().map(|s| opts.bandwidth * s).collect();
            queries
                .iter()
                .map(|x| nadaraya_watson(&sample, x, &h, opts.kernel))
                .collect()
        }
        Method::Ols => {
            let ols = ols_fit(&group_sample(&model, g))?;
            queries.iter().map(|x| Ok(ols.predict(x))).collect()
        }
    };
    let method_name = match method {
        Method::Drm => "drm",
        Method::Nw => "nw",
        Method::Ols => "ols",
    };
    let mut missing = 0;
    let mut rows = Vec::with_capacity(queries.len());
    for (x, p) in queries.iter().zip(preds) {
        let value = match p {
            Ok(v) => v.to_string(),
            Err(DrmError::NoEffectiveSupport) => {
                missing += 1;
                "NA".to_string()
            }
            Err(e) => return Err(e),
        };
        let mut row: Vec<String> = x.iter().map(f64::to_string).collect();
        row.extend([group.to_string(), method_name.to_string(), value]);
        rows.push(row);
    }
    let mut cols = header;
    cols.extend(["group", "method", "prediction"].map(String::from));
    let text = data::to_csv(&cols, &rows)?;
    match out {
        Some(p) => data::write_text(p, &text)?,
        None => print!("{text}"),
    }
    if missing > 0 {
        eprintln!("warning: {missing} queries have no effective support (written as NA)");
    }
    Ok(())
}

fn cmd_gof(
    model_path: &Path,
    data_path: &Path,
    opts: &GofOptions,
    variant: GapVariant,
    out: &Path,
    plot_data: Option<&Path>,
) -> Result<()> {
    let (model, _) = load_model(model_path)?;
    let file = data::read_data(data_path)?;
    if file.numeric_columns.len() != model.dim() {
        return Err(DrmError::InvalidInput(format!(
            "{}: expected {} numeric columns, found {}",
            data_path.display(),
            model.dim(),
            file.numeric_columns.len()
        )));
    }
    let mut samples: Vec<Option<Vec<Observation>>> = vec![None; model.group_count()];
    for (label, obs) in file.groups {
        samples[group_of(&model, &label)?] = Some(obs);
    }
    let samples = samples
        .into_iter()
        .enumerate()
        .map(|(g, s)| {
            s.ok_or_else(|| {
                DrmError::InvalidInput(format!(
                    "{}: no rows for group '{}'",
                    data_path.display(),
                    model.groups[g].label
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = gof_report(&model, &samples, opts)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| DrmError::InvalidInput(format!("cannot serialize report: {e}")))?;
    data::write_text(out, &json)?;
    if let Some(p) = plot_data {
        let rows: Vec<Vec<String>> = report
            .plot_pairs
            .iter()
            .map(|pp| {
                vec![
                    model.groups[pp.group].label.clone(),
                    pp.point_index.to_string(),
                    pp.empirical.to_string(),
                    pp.semiparametric.to_string(),
                ]
            })
            .collect();
        let header = ["group", "point_index", "empirical", "semiparametric"].map(String::from);
        data::write_text(p, &data::to_csv(&header, &rows)?)?;
    }

    let gap_name = match variant {
        GapVariant::Max => "r2_3",
        GapVariant::Median => "r2_3_median",
        GapVariant::MeanSquare => "r2_3_meansq",
    };
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    println!(
        "{:<16} {:>6} {:>10} {:>8} {:>8} {:>12} {:>10} {:>10} {:>10}",
        "group", "n", "r2_alpha_k", "r2_1", "r2_2", gap_name, "mse_drm", "mse_ols", "mse_nw"
    );
    for g in &report.groups {
        let gap = match variant {
            GapVariant::Max => g.r2_3,
            GapVariant::Median => g.r2_3_median,
            GapVariant::MeanSquare => g.r2_3_meansq,
        };
        let mse = |m: &str| fmt(g.score(m).map(|s| s.mse));
        println!(
            "{:<16} {:>6} {:>10.4} {:>8} {:>8} {:>12.4} {:>10} {:>10} {:>10}",
            g.group,
            g.n,
            g.r2_alpha_k,
            fmt(g.r2_1),
            fmt(g.r2_2),
            gap,
            mse("drm"),
            mse("ols"),
            mse("nw")
        );
    }
    Ok(())
}

fn cmd_simulate(
    scenario_path: Option<&Path>,
    preset: Option<&str>,
    seed: Option<u64>,
    replications: Option<usize>,
    threads: Option<usize>,
    out: &Path,
) -> std::result::Result<(), Failure> {
    let mut scenario = match (scenario_path, preset) {
        (Some(p), None) => Scenario::parse(&read_text(p)?)
            .map_err(|e| DrmError::Parse(format!("{}: {e}", p.display())))?,
        (None, Some(name)) => Scenario::preset(name)?,
        _ => {
            return Err(DrmError::InvalidInput("give a scenario file or --preset".into()).into())
        }
    };
    if let Some(s) = seed {
        scenario.seed = s;
    }
    if let Some(r) = replications {
        scenario.replications = r;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(DrmError::InvalidInput("--threads must be at least 1".into()).into());
        }
        pool = pool.num_threads(t);
    }
    let pool = pool
        .build()
        .map_err(|e| DrmError::InvalidInput(format!("thread pool: {e}")))?;
    let table = pool.install(|| run_study(&scenario))?;
    data::write_text(out, &table.to_csv())?;
    println!(
        "scenario {}: {} replications, {} failed",
        table.scenario,
        table.replications.len(),
        table.failures()
    );
    for s in table.summary.iter().filter(|s| s.statistic == "median") {
        println!(
            "{:<12} median r2_alpha_k {:.4}  r2_3 {:.4}  mse drm {:.4}  ols {:.4}",
            s.group, s.values[0], s.values[3], s.values[6], s.values[7]
        );
    }
    if table.failures() > 0 {
        return Err(Failure::Partial(format!(
            "{} of {} replications failed",
            table.failures(),
            table.replications.len()
        )));
    }
    Ok(())
}
