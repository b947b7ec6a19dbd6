use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use densratio::regression::{PredictOptions, Predictor};
use densratio::simulation::Scenario;
use densratio::{fit, persist, FitOptions, Group, SampleSet};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_densratio"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn data_csv(data: &SampleSet, columns: &[&str]) -> String {
    let mut s = format!("group,{}\n", columns.join(","));
    for g in data.groups() {
        for o in &g.observations {
            let cells: Vec<String> = o.values().iter().map(f64::to_string).collect();
            s += &format!("{},{}\n", g.label, cells.join(","));
        }
    }
    s
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fit_file(dir: &TempDir, data: &Path, reference: &str) -> PathBuf {
    let out = dir.path().join("model.json");
    let o = run(&["fit", path_str(data), "--reference", reference, "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn prediction_column(text: &str) -> Vec<String> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let h = rdr.headers().unwrap().clone();
    let k = h.iter().position(|c| c == "prediction").unwrap();
    rdr.records().map(|r| r.unwrap()[k].to_string()).collect()
}

const TOY: &str = "group,x,y\na,0.1,1.0\na,0.8,0.4\na,1.5,2.2\nb,0.3,0.9\nb,1.1,1.6\nb,2.0,0.1\nb,0.6,1.2\n";

#[test]
fn toy_fit_writes_one_parameter_block() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "toy.csv", TOY);
    let v = read_json(&fit_file(&dir, &data, "b"));
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["alpha"].as_array().unwrap().len(), 1);
    assert_eq!(v["beta"][0].as_array().unwrap().len(), 2);
    assert_eq!(v["dimension"], 2);
    assert!(v["inference"]["se"].as_array().unwrap().len() == 3);
    assert_eq!(v["groups"][1]["label"], "b");
}

#[test]
fn identical_groups_report_no_difference() {
    let dir = TempDir::new().unwrap();
    let rows = "1.0,2.0\n0.5,0.7\n2.2,1.9\n1.4,0.2\n0.3,1.1\n";
    let text = format!(
        "group,x,y\n{}{}",
        rows.lines().map(|l| format!("a,{l}\n")).collect::<String>(),
        rows.lines().map(|l| format!("b,{l}\n")).collect::<String>()
    );
    let data = write(&dir, "same.csv", &text);
    let v = read_json(&fit_file(&dir, &data, "b"));
    for p in v["alpha"].as_array().unwrap().iter().chain(v["beta"][0].as_array().unwrap()) {
        assert!(p.as_f64().unwrap().abs() < 1e-8);
    }
    assert!((v["inference"]["wald_joint"]["p_value"].as_f64().unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn generated_gaussian_data_recovers_the_analytic_tilt() {
    let dir = TempDir::new().unwrap();
    let mut s = Scenario::preset("run2").unwrap();
    s.groups[0].size = 2000;
    s.groups[1].size = 2000;
    s.seed = 31;
    let data = write(&dir, "run2.csv", &data_csv(&s.generate(0).unwrap(), &["x", "y"]));
    let v = read_json(&fit_file(&dir, &data, "control"));
    let a = v["alpha"][0].as_f64().unwrap();
    let b: Vec<f64> = v["beta"][0].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((a - 0.3).abs() < 0.15, "alpha {a}");
    assert!((b[0] + 0.2).abs() < 0.1 && (b[1] + 0.4).abs() < 0.1, "beta {b:?}");
}

#[test]
fn predictions_round_trip_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let mut s = Scenario::preset("run1").unwrap();
    s.seed = 8;
    let sample = s.generate(0).unwrap();
    let data = write(&dir, "run1.csv", &data_csv(&sample, &["x", "y"]));
    let model = fit_file(&dir, &data, "control");
    let queries = write(&dir, "q.csv", "x\n-3\n-1.25\n0\n0.5\n2.75\n");
    let o = run(&["predict", path_str(&model), path_str(&queries), "--group", "case"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cli: Vec<f64> = prediction_column(&String::from_utf8(o.stdout).unwrap())
        .iter()
        .map(|p| p.parse().unwrap())
        .collect();

    // same parse path: reload the sample from the CSV text the binary read
    let reread = SampleSet::new(
        sample
            .groups()
            .iter()
            .map(|g| {
                let rows = g.observations.iter().map(|o| {
                    o.values().iter().map(|v| v.to_string().parse::<f64>().unwrap()).collect()
                });
                Group::from_rows(g.label.clone(), rows.collect()).unwrap()
            })
            .collect(),
        1,
    )
    .unwrap();
    let m = fit(&reread, &FitOptions::default()).unwrap();
    let p = Predictor::new(&m, 0, PredictOptions::default()).unwrap();
    for (x, c) in [-3.0, -1.25, 0.0, 0.5, 2.75].iter().zip(&cli) {
        assert_eq!(p.predict_value(&[*x]).unwrap().to_bits(), c.to_bits());
    }

    let (loaded, _) = persist::from_json(&std::fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(loaded, m);
}

#[test]
fn hand_evaluated_conditional_mean() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "toy.csv", TOY);
    let model = fit_file(&dir, &data, "b");
    let queries = write(&dir, "q.csv", "x\n0.7\n");
    let o = run(&["predict", path_str(&model), path_str(&queries), "--group", "a", "--bandwidth", "0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got: f64 = prediction_column(&String::from_utf8(o.stdout).unwrap())[0].parse().unwrap();

    // Direct evaluation from the stored quantities.
    let v = read_json(&model);
    let f = |x: &serde_json::Value| x.as_f64().unwrap();
    let alpha = f(&v["alpha"][0]);
    let beta: Vec<f64> = v["beta"][0].as_array().unwrap().iter().map(f).collect();
    let scale: Vec<f64> = v["scale"].as_array().unwrap().iter().map(f).collect();
    let pts: Vec<Vec<f64>> = v["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p.as_array().unwrap().iter().map(f).collect())
        .collect();
    let p_hat: Vec<f64> = v["p_hat"].as_array().unwrap().iter().map(f).collect();
    let (hx, hy) = (0.5 * scale[0], 0.5 * scale[1]);
    let k = |u: f64| (-0.5 * u * u).exp();
    let weight = |y: f64| -> f64 {
        pts.iter()
            .zip(&p_hat)
            .map(|(t, p)| {
                p * (alpha + beta[0] * t[0] + beta[1] * t[1]).exp() * k((t[0] - 0.7) / hx) * k((t[1] - y) / hy)
            })
            .sum()
    };
    let ys: Vec<f64> = pts.iter().map(|t| t[1]).collect();
    let total: f64 = ys.iter().map(|y| weight(*y)).sum();
    let expected: f64 = ys.iter().map(|y| y * weight(*y)).sum::<f64>() / total;
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn ols_method_matches_normal_equations() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "toy.csv", TOY);
    let model = fit_file(&dir, &data, "b");
    let queries = write(&dir, "q.csv", "x\n0\n1\n");
    let o = run(&["predict", path_str(&model), path_str(&queries), "--group", "a", "--method", "ols"]);
    assert!(o.status.success());
    let preds: Vec<f64> = prediction_column(&String::from_utf8(o.stdout).unwrap())
        .iter()
        .map(|p| p.parse().unwrap())
        .collect();
    // group a: x = (0.1, 0.8, 1.5), y = (1.0, 0.4, 2.2)
    let (xm, ym) = (0.8, 3.6 / 3.0);
    let sxy = (0.1 - xm) * (1.0 - ym) + 0.0 + (1.5 - xm) * (2.2 - ym);
    let sxx = 0.49 + 0.0 + 0.49;
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    assert!((preds[0] - intercept).abs() < 1e-10);
    assert!((preds[1] - intercept - slope).abs() < 1e-10);
}

#[test]
fn constant_column_is_rejected() {
    let dir = TempDir::new().unwrap();
    let text = "group,x,y\na,0.1,5\na,0.9,5\na,1.6,5\na,0.4,5\nb,0.2,5\nb,1.3,5\nb,2.1,5\nb,0.7,5\n";
    let data = write(&dir, "c.csv", text);
    let o = run(&["fit", path_str(&data), "--out", path_str(&dir.path().join("m.json"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[input]:"));
}

#[test]
fn constant_response_gives_constant_predictions() {
    // A constant column cannot be fitted, so fit on varying data and make
    // the stored responses constant afterwards.
    let dir = TempDir::new().unwrap();
    let data = write(
        &dir,
        "c3.csv",
        "group,x,z\na,0.1,5.2\na,0.9,4.1\na,1.6,6.0\na,0.4,5.5\nb,0.2,4.8\nb,1.3,5.1\nb,2.1,4.4\nb,0.7,5.9\n",
    );
    let model = fit_file(&dir, &data, "b");
    let mut v = read_json(&model);
    for p in v["points"].as_array_mut().unwrap() {
        p[1] = serde_json::json!(5.0);
    }
    std::fs::write(&model, v.to_string()).unwrap();
    let queries = write(&dir, "q.csv", "x\n-1\n0.5\n3\n");
    let o = run(&["predict", path_str(&model), path_str(&queries), "--group", "a"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for p in prediction_column(&String::from_utf8(o.stdout).unwrap()) {
        assert_eq!(p.parse::<f64>().unwrap(), 5.0);
    }
}

#[test]
fn queries_without_support_are_flagged() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "toy.csv", TOY);
    let model = fit_file(&dir, &data, "b");
    let queries = write(&dir, "q.csv", "x\n0.5\n1e6\n");
    let out = dir.path().join("p.csv");
    let o = run(&["predict", path_str(&model), path_str(&queries), "--group", "a", "--out", path_str(&out)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("x,group,method,prediction\n"));
    let col = prediction_column(&text);
    assert!(col[0].parse::<f64>().is_ok());
    assert_eq!(col[1], "NA");
}

#[test]
fn gof_writes_report_and_diagonal_plot_data_for_identical_groups() {
    let dir = TempDir::new().unwrap();
    let rows = ["1.0,2.0", "0.5,0.7", "2.2,1.9", "1.4,0.2", "0.3,1.1", "1.9,1.3"];
    let mut text = String::from("group,x,y\n");
    for g in ["a", "b"] {
        for r in rows {
            text += &format!("{g},{r}\n");
        }
    }
    let data = write(&dir, "same.csv", &text);
    let model = fit_file(&dir, &data, "b");
    let report = dir.path().join("r.json");
    let plots = dir.path().join("p.csv");
    let o = run(&[
        "gof",
        path_str(&model),
        path_str(&data),
        "--out",
        path_str(&report),
        "--plot-data",
        path_str(&plots),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&report);
    assert_eq!(r["groups"].as_array().unwrap().len(), 2);
    assert_eq!(r["groups"][0]["r2_alpha_k"], 1.0);
    let mut rdr = csv::Reader::from_path(&plots).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["group", "point_index", "empirical", "semiparametric"]
    );
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let (e, s): (f64, f64) = (rec[2].parse().unwrap(), rec[3].parse().unwrap());
        assert!((e - s).abs() <= 1.0 / 6.0 + 1e-12);
    }
}

#[test]
fn input_errors_exit_2_with_line_numbers() {
    let dir = TempDir::new().unwrap();
    let bad = write(&dir, "bad.csv", "group,x,y\na,1,2\nb,1,\n");
    let o = run(&["fit", path_str(&bad), "--out", path_str(&dir.path().join("m.json"))]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.starts_with("error[input]:") && e.contains(":3:"), "{e}");
    assert_eq!(e.trim_end().lines().count(), 1);

    let one = write(&dir, "one.csv", "group,x,y\na,1,2\na,2,3\n");
    let o = run(&["fit", path_str(&one), "--out", path_str(&dir.path().join("m.json"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["fit"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]:"));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);
}

#[test]
fn separated_groups_exit_3() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "sep.csv", "group,x,y\na,5,1\na,6,2\na,7,1.5\nb,0,1\nb,1,2.5\nb,2,0.5\n");
    let o = run(&["fit", path_str(&data), "--out", path_str(&dir.path().join("m.json"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[numerical]:"));
}

#[test]
fn failed_replications_exit_4_and_still_write_the_table() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "sep.cfg",
        "seed = 1\nreplications = 2\n\
         group.a.family = triangle_uniform\ngroup.a.size = 30\ngroup.a.vertices = 0,0; 1,0; 0,1\n\
         group.b.family = triangle_uniform\ngroup.b.size = 30\ngroup.b.vertices = 10,10; 11,10; 10,11\n",
    );
    let out = dir.path().join("s.csv");
    let o = run(&["simulate", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[partial]:"));
    assert!(std::fs::read_to_string(&out).unwrap().contains("failed"));
}

#[test]
fn simulate_accepts_presets_and_scenario_files() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let cfg = write(&dir, "run1.cfg", "preset = run1\nreplications = 2\n");
    let o = run(&["simulate", "--preset", "run1", "--replications", "2", "--seed", "3", "--out", path_str(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["simulate", path_str(&cfg), "--seed", "3", "--out", path_str(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
