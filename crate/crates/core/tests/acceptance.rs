//! Acceptance criteria. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line in `cargo test` output; the
//! process exits non-zero if any criterion fails.
//!
//! Criteria 1 and 8-11 need the full corpus pipeline (generate, train all
//! twelve models, run the experiment grid). Set `SEMCLONE_ACCEPTANCE_DIR` to
//! keep its outputs in a fixed directory; models already present there are
//! reused.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Normal, StandardNormal};

use semclone_core::conditioning::{condition, ConditionSettings, ConditionSpec};
use semclone_core::detector::{detect_pair, pool, DetectorConfig, Pooling};
use semclone_core::evaluation::{
    balanced_accuracy, precision, recall, round2, CellVerdicts, ConfusionCounts, ExperimentReport,
    ExperimentResult, GridSpec,
};
use semclone_core::flow::{nll_and_grads, train};
use semclone_core::pipeline::{self, RunConfig};
use semclone_core::traces::{AbstractType, DimSource, Dimension, PrepareConfig, Prepared, Preprocessing};
use semclone_core::{seed, FlowArch, FlowModel, TrainConfig, TraceDataset};

const SEED: u64 = 2024;

type Check = Result<(bool, String), String>;

struct Line {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn run(id: u8, name: &'static str, f: impl FnOnce() -> Check) -> Line {
    let t = Instant::now();
    let (pass, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let line = Line {
        id,
        name,
        pass,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    };
    print_line(&line);
    line
}

fn print_line(l: &Line) {
    println!(
        "criterion {:>2} {} {:<24} {} ({:.1}s)",
        l.id,
        if l.pass { "PASS" } else { "FAIL" },
        l.name,
        l.detail,
        l.seconds
    );
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn float_dataset(id: &str, rows: Array2<f64>) -> TraceDataset {
    let columns = (0..rows.ncols())
        .map(|j| {
            let source = if j == 0 {
                DimSource::Parameter
            } else {
                DimSource::ReturnValue
            };
            Dimension::new(&format!("x{}", j + 1), source, AbstractType::Float)
        })
        .collect();
    TraceDataset {
        executable_id: id.into(),
        columns,
        rows,
    }
}

fn trapezoid_2d(m: &FlowModel, half: f64, n: usize) -> Result<f64, String> {
    let h = 2.0 * half / (n - 1) as f64;
    let node = |i: usize| -half + i as f64 * h;
    let weight = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    let mut total = 0.0;
    for i in 0..n {
        let grid = Array2::from_shape_fn((n, 2), |(j, c)| if c == 0 { node(i) } else { node(j) });
        let ll = m.log_likelihood(grid.view()).map_err(err)?;
        for (j, v) in ll.iter().enumerate() {
            total += weight(i) * weight(j) * v.exp();
        }
    }
    Ok(total * h * h)
}

fn bijectivity(models: &[FlowModel]) -> Check {
    let mut worst = 0.0f64;
    let mut worst_id = String::new();
    for m in models {
        let z = m.prior.sample(1024, &mut seed::rng_for(SEED, &["bijectivity", &m.executable_id]));
        let x = m.inverse(z.view()).map_err(err)?;
        let (back, _) = m.forward(x.view()).map_err(err)?;
        let e = (&back - &z).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if e >= worst {
            worst = e;
            worst_id = m.executable_id.clone();
        }
    }
    Ok((
        worst <= 1e-5 && models.len() == 12,
        format!(
            "max |f(g(z)) - z| = {worst:.2e} over 1024 draws x {} models (worst {worst_id}), tol 1e-5",
            models.len()
        ),
    ))
}

fn normalization() -> Check {
    let mut rng = seed::rng(12);
    let mut rows = Array2::zeros((2000, 2));
    for mut row in rows.rows_mut() {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        row[0] = a;
        row[1] = 0.5 * a * a + 0.5 * b;
    }
    let prepared =
        Prepared::from_dataset(&float_dataset("banana", rows), &PrepareConfig::default(), 1).map_err(err)?;
    let cfg = TrainConfig {
        max_epochs: 40,
        ..TrainConfig::default()
    };
    let m = train(&prepared, &cfg, 5).map_err(err)?;
    let integral = trapezoid_2d(&m, 6.0, 241)?;
    Ok((
        (0.98..=1.02).contains(&integral),
        format!("trapezoid integral over [-6, 6]^2 = {integral:.4}, want [0.98, 1.02]"),
    ))
}

fn gradient_check() -> Check {
    let arch = FlowArch {
        coupling_layers: 2,
        hidden_units: 8,
        ..FlowArch::default()
    };
    let mut rng = seed::rng(21);
    let mut m = FlowModel::init("grad", Preprocessing::identity(2), &arch, &mut rng).map_err(err)?;
    let w = Normal::new(0.0, 0.3).unwrap();
    for block in m.param_slices_mut() {
        for v in block {
            *v = rng.sample(w);
        }
    }
    let x = Array2::from_shape_simple_fn((16, 2), || rng.random_range(-2.0..2.0));
    let (_, grads) = nll_and_grads(&m, x.view());
    let analytic: Vec<f64> = grads.param_slices().into_iter().flatten().copied().collect();
    let h = 1e-4;
    let blocks: Vec<usize> = m.param_slices().iter().map(|b| b.len()).collect();
    let (mut k, mut worst) = (0, 0.0f64);
    for (bi, len) in blocks.into_iter().enumerate() {
        for i in 0..len {
            let orig = m.param_slices()[bi][i];
            m.param_slices_mut()[bi][i] = orig + h;
            let up = m.mean_nll(x.view());
            m.param_slices_mut()[bi][i] = orig - h;
            let down = m.mean_nll(x.view());
            m.param_slices_mut()[bi][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[k] - numeric).abs() / scale);
            k += 1;
        }
    }
    Ok((
        worst <= 1e-3 && k == m.n_params(),
        format!("max relative error {worst:.2e} over {k} parameters, tol 1e-3"),
    ))
}

fn gaussian_recovery() -> Check {
    let mut rng = seed::rng(7);
    let data = Array2::from_shape_simple_fn((10_000, 2), || rng.sample(StandardNormal));
    let n_valid = 1000;
    let prepared = Prepared::from_standardized(
        "gauss",
        Preprocessing::identity(2).columns.into_iter().map(|c| c.dim).collect(),
        data.slice(s![n_valid.., ..]).to_owned(),
        data.slice(s![..n_valid, ..]).to_owned(),
    );
    let m = train(&prepared, &TrainConfig::default(), 1).map_err(err)?;
    let entropy = 1.0 + (2.0 * PI).ln();
    let nll = m.training.best_valid_nll;
    Ok((
        (nll - entropy).abs() <= 0.1,
        format!(
            "validation NLL {nll:.4} vs entropy {entropy:.4} after {} epochs, tol 0.1",
            m.training.epochs_run
        ),
    ))
}

fn conditioning_oracle() -> Check {
    let mut rng = seed::rng(21);
    let eps = Normal::new(0.0, 0.01).unwrap();
    let mut rows = Array2::zeros((3000, 2));
    for mut row in rows.rows_mut() {
        let x1: f64 = rng.sample(StandardNormal);
        row[0] = x1;
        row[1] = 2.0 * x1 + rng.sample(eps);
    }
    let prepared =
        Prepared::from_dataset(&float_dataset("line", rows), &PrepareConfig::default(), 3).map_err(err)?;
    let cfg = TrainConfig {
        max_epochs: 60,
        ..TrainConfig::default()
    };
    let m = train(&prepared, &cfg, 8).map_err(err)?;
    let i1 = m.preprocessing.column_index("x1").ok_or("no x1")?;
    let i2 = m.preprocessing.column_index("x2").ok_or("no x2")?;
    let target = m.preprocessing.columns[i2].encode(4.0);
    let spec = ConditionSpec::new(
        vec![i2],
        Array2::from_elem((200, 1), target),
        ConditionSettings::default(),
        m.dim(),
    )
    .map_err(err)?;
    let out = condition(&m, &spec, 9).map_err(err)?;
    let raw = m.decode(out.data.view());
    let x1 = raw.column(i1).mean().unwrap_or(f64::NAN);
    Ok((
        out.converged && (x1 - 2.0).abs() <= 0.1,
        format!(
            "x2 = 4 imputes mean x1 = {x1:.4} over 200 particles (converged {}), want 2 +/- 0.1",
            out.converged
        ),
    ))
}

fn decision_arithmetic() -> Check {
    let ln = f64::ln;
    // (lambda_ab, lambda_ba, pooling, alpha, pooled, threshold, clone)
    let cases = [
        (0.0, 0.0, Pooling::Soft, 0.01, 0.0, ln(0.01), true),
        (-10.0, 0.0, Pooling::Hard, 0.01, -10.0, ln(0.005), false),
        (-10.0, 0.0, Pooling::Soft, 0.01, -5.0, ln(0.01), false),
        (-4.0, -5.0, Pooling::Soft, 0.01, -4.5, ln(0.01), true),
        (-4.0, -5.0, Pooling::Hard, 0.01, -5.0, ln(0.005), true),
        (-4.0, -5.5, Pooling::Hard, 0.01, -5.5, ln(0.005), false),
        (-6.0, -6.5, Pooling::Soft, 0.001, -6.25, ln(0.001), true),
        (-7.0, -7.5, Pooling::Hard, 0.001, -7.5, ln(0.0005), true),
        (-7.0, -7.7, Pooling::Hard, 0.001, -7.7, ln(0.0005), false),
        (-1.0, f64::NEG_INFINITY, Pooling::Soft, 0.01, f64::NEG_INFINITY, ln(0.01), false),
    ];
    let mut bad = Vec::new();
    for (i, &(a, b, p, alpha, want_pooled, want_c, want_clone)) in cases.iter().enumerate() {
        let (pooled, c, clone) = pool(a, b, p, alpha);
        if pooled != want_pooled || c != want_c || clone != want_clone {
            bad.push(format!("case {i}: got ({pooled}, {c}, {clone})"));
        }
    }
    // at the critical value the null is not rejected
    let at = ln(0.01);
    if pool(at, at, Pooling::Soft, 0.01).2 {
        bad.push("lambda equal to ln(alpha) accepted".into());
    }
    Ok((
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} hand-computed cases exact", cases.len() + 1)
        } else {
            bad.join("; ")
        },
    ))
}

fn table_metrics() -> Check {
    let c = |tp, fp, tn, fn_| ConfusionCounts { tp, fp, tn, fn_ };
    // row, counts, printed precision, printed recall, formula balanced accuracy
    let rows = [
        (1, c(22, 0, 14, 0), 1.00, 1.00, 1.0),
        (2, c(18, 0, 10, 8), 1.00, 0.69, (18.0 / 26.0 + 1.0) / 2.0),
        (7, c(8, 0, 26, 2), 1.00, 0.80, (0.8 + 1.0) / 2.0),
        (10, c(16, 2, 10, 8), 0.89, 0.67, (16.0 / 24.0 + 10.0 / 12.0) / 2.0),
    ];
    let mut bad = Vec::new();
    for (row, counts, p, r, ba) in rows {
        let got_p = precision(&counts).map(round2);
        let got_r = recall(&counts).map(round2);
        let got_ba = balanced_accuracy(&counts);
        if got_p != Some(p) || got_r != Some(r) || got_ba.map_or(true, |v| (v - ba).abs() > 1e-12) {
            bad.push(format!("row {row}: {got_p:?} {got_r:?} {got_ba:?}"));
        }
    }
    Ok((
        bad.is_empty(),
        if bad.is_empty() {
            "rows 1, 2, 7, 10 reproduce printed precision and recall at 2 decimals".into()
        } else {
            bad.join("; ")
        },
    ))
}

struct Corpus {
    cfg: RunConfig,
    models: Vec<FlowModel>,
    report: ExperimentReport,
    _tmp: Option<tempfile::TempDir>,
}

fn corpus_run() -> Result<Corpus, String> {
    let (out, tmp) = match std::env::var_os("SEMCLONE_ACCEPTANCE_DIR") {
        Some(d) => (PathBuf::from(d), None),
        None => {
            let t = tempfile::tempdir().map_err(err)?;
            (t.path().to_path_buf(), Some(t))
        }
    };
    let cfg = RunConfig {
        out,
        seed: SEED,
        ..RunConfig::default()
    };
    let eff = cfg.effective();
    let t = Instant::now();
    let have_models = pipeline::load_models(&eff).is_ok();
    if !have_models {
        pipeline::cmd_generate(&cfg).map_err(err)?;
        let summary = pipeline::cmd_train(&cfg).map_err(err)?;
        if let Some(f) = summary.failed.first() {
            return Err(format!("training {} failed: {}", f.executable, f.error));
        }
        println!("corpus: generated and trained in {:.0}s", t.elapsed().as_secs_f64());
    }
    let models = pipeline::load_models(&eff).map_err(err)?;
    let t = Instant::now();
    let report = pipeline::cmd_evaluate_with(&cfg, &|m| println!("grid: {m}")).map_err(err)?;
    println!("corpus: experiment grid in {:.0}s", t.elapsed().as_secs_f64());
    Ok(Corpus {
        cfg: eff,
        models,
        report,
        _tmp: tmp,
    })
}

fn replicate_seeds(c: &Corpus) -> Vec<u64> {
    (0..c.report.grid.seeds)
        .map(|i| GridSpec::seed(c.cfg.detector.seed, i))
        .collect()
}

fn self_pairs(c: &Corpus) -> Check {
    let mut misses = Vec::new();
    let seeds = replicate_seeds(c);
    for &s in &seeds {
        let cfg = DetectorConfig {
            pooling: Pooling::Soft,
            alpha: 0.01,
            particles: 100,
            seed: s,
            ..c.cfg.detector.clone()
        };
        for m in &c.models {
            let v = detect_pair(m, m, &cfg).map_err(err)?;
            if !v.is_some_and(|v| v.is_clone()) {
                misses.push(format!("{} (seed {s})", m.executable_id));
            }
        }
    }
    let total = c.models.len() * seeds.len();
    Ok((
        misses.is_empty() && c.models.len() == 12,
        if misses.is_empty() {
            format!("{total}/{total} self-pairs accepted at (soft, 0.01, 100)")
        } else {
            format!("rejected: {}", misses.join(", "))
        },
    ))
}

fn cell_verdicts<'a>(
    c: &'a Corpus,
    pooling: Pooling,
    alpha: f64,
    particles: usize,
) -> impl Iterator<Item = &'a CellVerdicts> {
    c.report
        .verdicts
        .iter()
        .filter(move |v| v.pooling == pooling && v.alpha == alpha && v.particles == particles)
}

fn class_separation(c: &Corpus) -> Check {
    let pairs = [
        ("Factorial_iter", "Factorial_rec", true),
        ("Fibonacci_iter", "Fibonacci_rec", true),
        ("Factorial_iter", "Fibonacci_iter", false),
        ("Factorial_iter", "Fibonacci_rec", false),
        ("Factorial_rec", "Fibonacci_iter", false),
        ("Factorial_rec", "Fibonacci_rec", false),
    ];
    let cells: Vec<_> = cell_verdicts(c, Pooling::Soft, 0.01, 100).collect();
    let mut parts = Vec::new();
    let mut pass = cells.len() == 3;
    for (a, b, want) in pairs {
        let hits = cells
            .iter()
            .filter(|cell| {
                cell.verdicts.iter().any(|v| {
                    let same = (v.exec_a == a && v.exec_b == b) || (v.exec_a == b && v.exec_b == a);
                    same && v.is_clone == want
                })
            })
            .count();
        pass &= hits >= 2;
        parts.push(format!("{a}~{b} {}{hits}/{}", if want { "+" } else { "-" }, cells.len()));
    }
    Ok((pass, format!("{} (need 2 of 3 each)", parts.join(", "))))
}

fn grid_levels(c: &Corpus) -> Check {
    let med = &c.report.medians;
    if med.len() != 12 {
        return Ok((false, format!("{} median cells, want 12", med.len())));
    }
    let mean = |f: fn(&ExperimentResult) -> f64| {
        med.iter().map(f).sum::<f64>() / med.len() as f64
    };
    let min = |f: fn(&ExperimentResult) -> f64| {
        med.iter().map(f).fold(f64::INFINITY, f64::min)
    };
    // NaN compares false, so undefined metrics fail
    let p_min = min(|r| r.precision);
    let p_avg = mean(|r| r.precision);
    let ba_min = min(|r| r.balanced_accuracy);
    let ba_avg = mean(|r| r.balanced_accuracy);
    let defined = med.iter().all(|r| !r.precision.is_nan() && !r.balanced_accuracy.is_nan());
    let pass = defined && p_min >= 0.90 && p_avg >= 0.95 && ba_min >= 0.75 && ba_avg >= 0.85;
    Ok((
        pass,
        format!(
            "precision min {p_min:.3} avg {p_avg:.3} (>= 0.90, 0.95); balanced accuracy min {ba_min:.3} avg {ba_avg:.3} (>= 0.75, 0.85)"
        ),
    ))
}

fn fp_control(c: &Corpus) -> Check {
    let runs: Vec<_> = c.report.runs.iter().filter(|r| r.alpha == 0.01).collect();
    let rate = |r: &ExperimentResult| {
        r.counts.fp as f64 / (r.counts.fp + r.counts.tn).max(1) as f64
    };
    let worst = runs.iter().copied().max_by(|a, b| rate(a).total_cmp(&rate(b)));
    let pass = !runs.is_empty() && runs.iter().all(|r| rate(r) <= 0.10);
    Ok((
        pass,
        match worst {
            Some(w) => format!(
                "worst FP {}/{} negatives over {} alpha=0.01 runs, limit 10%",
                w.counts.fp,
                w.counts.fp + w.counts.tn,
                runs.len()
            ),
            None => "no alpha=0.01 runs".into(),
        },
    ))
}

fn main() {
    // libtest-style filters: run nothing when asked for a specific other test
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }

    let mut lines = Vec::new();
    lines.push(run(2, "density normalization", normalization));
    lines.push(run(3, "gradient check", gradient_check));
    lines.push(run(4, "gaussian recovery", gaussian_recovery));
    lines.push(run(5, "conditioning oracle", conditioning_oracle));
    lines.push(run(6, "decision arithmetic", decision_arithmetic));
    lines.push(run(7, "metric formulas", table_metrics));

    let t = Instant::now();
    match corpus_run() {
        Ok(c) => {
            lines.push(run(1, "flow bijectivity", || bijectivity(&c.models)));
            lines.push(run(8, "self-pair sanity", || self_pairs(&c)));
            lines.push(run(9, "class separation", || class_separation(&c)));
            lines.push(run(10, "grid metrics", || grid_levels(&c)));
            lines.push(run(11, "false-positive control", || fp_control(&c)));
        }
        Err(e) => {
            let secs = t.elapsed().as_secs_f64();
            for (id, name) in [
                (1, "flow bijectivity"),
                (8, "self-pair sanity"),
                (9, "class separation"),
                (10, "grid metrics"),
                (11, "false-positive control"),
            ] {
                let l = Line {
                    id,
                    name,
                    pass: false,
                    detail: format!("corpus pipeline failed: {e}"),
                    seconds: secs,
                };
                print_line(&l);
                lines.push(l);
            }
        }
    }

    lines.sort_by_key(|l| l.id);
    println!("\nacceptance summary");
    for l in &lines {
        print_line(l);
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
