//! Acceptance suite: one line per criterion.
//!
//! Run with `cargo test -p infusion --test acceptance`. Criteria listed in
//! `KNOWN_FAILURES` are reported but do not fail the process unless
//! `ACCEPTANCE_STRICT=1` is set.

#[path = "../../core/tests/support/mod.rs"]
mod support;
mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use infusion::checkpoint::Checkpoint;
use infusion::commands;
use infusion::config::RunConfig;
use infusion::data::{Split, MNIST_FILES};
use infusion_core::evaluation::{elbo_samples, is_estimate, lower_bound_estimate, parzen_log_density};
use infusion_core::infusion::{infusion_log_density, infusion_step, run_infusion_chain};
use infusion_core::linear_gaussian::LinearGaussianKernel;
use infusion_core::math::normal_cdf;
use infusion_core::model::{run_clamped_chain, run_model_chain};
use infusion_core::rng::{self, standard_normal, uniform};
use infusion_core::{FactorialGaussian, InfusionSchedule, Mode, Objective, OperatorConfig, Tensor, TransitionOperator};
use rand::Rng;
use support::{check_instance, linear_gaussian_marginal, random_instance, GradReport};

const KNOWN_FAILURES: [usize; 1] = [6];

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Outcome {
    Outcome { status: if ok { Status::Pass } else { Status::Fail }, detail }
}

fn within(t: Instant, limit: Duration) -> bool {
    t.elapsed() < limit
}

fn ln_normal(x: f64, m: f64, v: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (x - m) * (x - m) / (2.0 * v)
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut r = rng::stream(1001, &[]);
    let mut rep = GradReport::default();
    for _ in 0..100 {
        let inst = random_instance(&mut r);
        for objective in [Objective::Denoising, Objective::LowerBound] {
            rep.merge(check_instance(&inst, objective, Mode::Train, 1e-4));
        }
    }
    let ok = rep.failures == 0 && rep.kinks * 100 <= rep.checked && within(t, Duration::from_secs(120));
    verdict(
        ok,
        format!(
            "100 configs, {} coords, {} failures, {} kinks skipped, worst rel err {:.2e}, {:.1}s",
            rep.checked,
            rep.failures,
            rep.kinks,
            rep.worst,
            t.elapsed().as_secs_f64()
        ),
    )
}

fn jensen() -> Outcome {
    let t = Instant::now();
    let mut r = rng::stream(1002, &[]);
    let mut violations = 0;
    let mut unequal = 0;
    for i in 0..10_000 {
        let k = r.random_range(1..=64);
        let scale = [1e-9, 1.0, 1e3][i % 3];
        let c = r.random_range(-1e3..1e3);
        let ell: Vec<f64> = (0..k).map(|_| c + scale * standard_normal(&mut r)).collect();
        if is_estimate(&ell).unwrap() < lower_bound_estimate(&ell).unwrap() {
            violations += 1;
        }
        let same = vec![c; k];
        if is_estimate(&same).unwrap() != lower_bound_estimate(&same).unwrap() {
            unequal += 1;
        }
    }
    let ok = violations == 0 && unequal == 0 && within(t, Duration::from_secs(5));
    verdict(ok, format!("10000 vectors, {} violations, {} unequal constant vectors, {:.2}s", violations, unequal, t.elapsed().as_secs_f64()))
}

fn analytic_chain() -> Outcome {
    let t = Instant::now();
    let (m0, v0, a, b, s) = (0.2, 0.5, 0.8, 0.1, 0.3);
    let prior = FactorialGaussian::new(vec![m0], vec![v0]).unwrap();
    let k = LinearGaussianKernel::new(1, 2, a, b, s).unwrap();
    let sched = InfusionSchedule::new(0.1, 0.3, 0.3).unwrap();
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for (j, x) in [0.4, -0.5, 1.3].into_iter().enumerate() {
        let exact = linear_gaussian_marginal(m0, v0, a, b, s, 2, x);
        let ell = elbo_samples(&k, &prior, &sched, &[x], 10_000, &mut rng::stream(1003, &[j as u64]), Mode::Eval).unwrap();
        let is = is_estimate(&ell).unwrap();
        let lb = lower_bound_estimate(&ell).unwrap();
        worst = worst.max((is - exact).abs());
        ok &= (is - exact).abs() < 0.05 && lb <= exact;
    }
    ok &= within(t, Duration::from_secs(60));
    verdict(ok, format!("max |IS - exact| {:.4} nats over 3 points, LB below exact: {}", worst, ok))
}

fn mixture_density() -> Outcome {
    let out = FactorialGaussian::new(vec![0.2], vec![0.04]).unwrap();
    let mut worst: f64 = 0.0;
    for alpha in [0.0, 0.3, 1.0] {
        let (lo, hi, n) = (-4.0, 5.0, 400_000);
        let h = (hi - lo) / n as f64;
        let f = |v: f64| infusion_log_density(&[v], &out, &[0.6], alpha, 0.03).exp();
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        worst = worst.max((s * h / 3.0 - 1.0).abs());
    }
    let (n, alpha, sd) = (100_000, 0.3, 0.03);
    let mut r = rng::stream(1004, &[]);
    let mut z: Vec<f64> = (0..n).map(|_| infusion_step(&mut r, &out, &[0.6], alpha, sd)[0]).collect();
    z.sort_by(f64::total_cmp);
    let cdf = |v: f64| (1.0 - alpha) * normal_cdf((v - 0.2) / 0.2) + alpha * normal_cdf((v - 0.6) / sd);
    let ks = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    let critical = 1.628 / (n as f64).sqrt();
    verdict(worst < 1e-6 && ks < critical, format!("max |integral - 1| {:.2e}; KS {:.5} vs 1% critical {:.5}", worst, ks, critical))
}

fn convergence() -> Outcome {
    let d = 100;
    let cfg = OperatorConfig { hidden_sizes: vec![16, 16], ..OperatorConfig::new(d, 15) };
    let op = TransitionOperator::new(cfg, &mut rng::stream(1005, &[])).unwrap();
    let prior = FactorialGaussian::new(vec![0.5; d], vec![0.1; d]).unwrap();
    let sched = InfusionSchedule::new(0.0, 0.1, 0.03).unwrap();
    let mut r = rng::stream(1006, &[]);
    let xs = Tensor::matrix(100, d, (0..100 * d).map(|_| uniform(&mut r)).collect()).unwrap();
    let trace = run_infusion_chain(&mut r, &prior, &op, &sched, &xs, 15, Mode::Eval).unwrap();
    let bound = 3.0 * 0.03 * (d as f64).sqrt();
    let hits = (0..100)
        .filter(|&i| {
            let z = trace.last_state().row(i);
            z.iter().zip(xs.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= bound
        })
        .count();
    verdict(hits >= 99, format!("{}/100 final states within {:.3} of the target", hits, bound))
}

fn toy_run(dir: &Path, sets: &[&str]) -> RunConfig {
    let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    RunConfig::preset("toy2d").unwrap().resolve(None, &sets).unwrap().resolve(None, &[format!("output.dir={:?}", dir.display().to_string())]).unwrap()
}

fn toy_learning(tmp: &Path) -> Outcome {
    let t = Instant::now();
    let run = toy_run(&tmp.join("toy"), &[]);
    let init = RunConfig { train: infusion::config::TrainSection { epochs: 0, ..run.train.clone() }, ..run.clone() };
    commands::train(&init, &tmp.join("toy_init")).unwrap();
    let summary = commands::train(&run, &tmp.join("toy")).unwrap();
    let mut eval = run.clone();
    eval.eval.split = "valid".to_string();
    let untrained = Checkpoint::load(&tmp.join("toy_init/checkpoint.bin")).unwrap();
    let trained = Checkpoint::load(&tmp.join("toy/checkpoint.bin")).unwrap();
    let lb0 = commands::eval(&untrained, &eval, &tmp.join("toy_init/eval")).unwrap().lower_bound.mean;
    let lb1 = commands::eval(&trained, &eval, &tmp.join("toy/eval")).unwrap().lower_bound.mean;
    let op = trained.operator().unwrap();
    let samples = run_model_chain(&mut rng::stream(run.seed, &[rng::tag::SAMPLE]), &trained.prior, &op, 1000, run.train.steps, Mode::Eval).unwrap();
    let radius = 3.0 * run.data.toy_std;
    let near: Vec<usize> = run
        .data
        .toy_centers
        .iter()
        .map(|c| samples.last_state().rows_iter().filter(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() <= radius).count())
        .collect();
    let gain = lb1 - lb0;
    let ok = gain >= 2.0 && near.iter().all(|&c| c >= 250) && within(t, Duration::from_secs(300));
    verdict(
        ok,
        format!(
            "valid LB {:.3} -> {:.3} (gain {:.3}, need 2), best epoch {:?}; samples near modes {:?}/1000 (need 250 each); {:.0}s",
            lb0,
            lb1,
            gain,
            summary.best_epoch,
            near,
            t.elapsed().as_secs_f64()
        ),
    )
}

fn schedule_trend(tmp: &Path) -> Outcome {
    let t = Instant::now();
    let mut votes = Vec::new();
    for rep in 0..3u64 {
        let dir = tmp.join(format!("trend_{}", rep));
        let seed = format!("seed={}", 7 + rep);
        let run = toy_run(
            &dir,
            &[
                seed.as_str(),
                "data.toy_n=800",
                "model.hidden_sizes=[32, 32]",
                "train.epochs=30",
                "sweep.steps=[2, 10]",
                "sweep.alpha0=[0.0]",
                "sweep.omega=[0.01, 0.05, 0.1, 0.3]",
            ],
        );
        let rows = commands::sweep(&run, &dir).unwrap();
        let best = |steps: usize| {
            rows.iter()
                .filter(|r| r.steps == steps)
                .max_by(|a, b| a.best_valid_lower_bound.unwrap().total_cmp(&b.best_valid_lower_bound.unwrap()))
                .map(|r| r.omega)
                .unwrap()
        };
        votes.push((best(2), best(10)));
    }
    let agree = votes.iter().filter(|(w2, w10)| w10 <= w2).count();
    verdict(agree >= 2, format!("best omega (T=2, T=10) per repetition {:?}; {}/3 agree; {:.0}s", votes, agree, t.elapsed().as_secs_f64()))
}

fn parzen() -> Outcome {
    let (sigma0, sigma, n, d) = (0.3, 0.17, 10_000, 2);
    let mut r = rng::stream(1008, &[]);
    let samples = Tensor::matrix(n, d, (0..n * d).map(|_| sigma0 * standard_normal(&mut r)).collect()).unwrap();
    let est = parzen_log_density(&samples, &[0.0, 0.0], sigma).unwrap();
    let exact = d as f64 * ln_normal(0.0, 0.0, sigma0 * sigma0 + sigma * sigma);
    let kernels: Vec<f64> = samples
        .rows_iter()
        .map(|s| (d as f64 * ln_normal(0.0, 0.0, sigma * sigma) - s.iter().map(|x| x * x).sum::<f64>() / (2.0 * sigma * sigma)).exp())
        .collect();
    let mean = kernels.iter().sum::<f64>() / n as f64;
    let sd = (kernels.iter().map(|k| (k - mean) * (k - mean)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    let se = sd / (n as f64).sqrt() / mean;
    let err = (est - exact).abs();
    verdict(err < 3.0 * se, format!("|estimate - exact| {:.5} vs 3 SE {:.5}", err, 3.0 * se))
}

fn inpainting() -> Outcome {
    let d = 16;
    let cfg = OperatorConfig { hidden_sizes: vec![16, 16], ..OperatorConfig::new(d, 5) };
    let op = TransitionOperator::new(cfg, &mut rng::stream(1009, &[])).unwrap();
    let prior = FactorialGaussian::new(vec![0.5; d], vec![0.1; d]).unwrap();
    let observed: Vec<f64> = (0..d).map(|i| i as f64 / d as f64).collect();
    let mask: Vec<bool> = (0..d).map(|i| i % 3 == 0).collect();
    let trace = run_clamped_chain(&mut rng::stream(1010, &[]), &prior, &op, &observed, &mask, 20, 5, Mode::Eval).unwrap();
    let clamped = trace.states.iter().all(|s| s.rows_iter().all(|row| (0..d).filter(|&j| mask[j]).all(|j| row[j].to_bits() == observed[j].to_bits())));
    let free: Vec<usize> = (0..d).filter(|&j| !mask[j]).collect();
    let varying = free
        .iter()
        .filter(|&&j| {
            let first = trace.last_state().row(0)[j];
            trace.last_state().rows_iter().any(|r| r[j] != first)
        })
        .count();
    let ok = clamped && varying * 10 >= free.len() * 9;
    verdict(ok, format!("masked dims bit-equal on every step: {}; {}/{} free dims vary over 20 restarts", clamped, varying, free.len()))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn cli_session(cwd: &Path, out: &str, preset: &str, extra: &[&str]) {
    let mut args = vec!["train", "--preset", preset, "--out", out, "--seed", "5", "--epochs", "2"];
    args.extend_from_slice(extra);
    common::run_ok(cwd, &args);
    let ckpt = format!("{}/checkpoint.bin", out);
    common::run_ok(cwd, &["sample", "--checkpoint", &ckpt]);
    common::run_ok(cwd, &["eval", "--checkpoint", &ckpt, "--k", "5", "--parzen", "--parzen-samples", "200"]);
    common::run_ok(cwd, &["inpaint", "--checkpoint", &ckpt]);
}

fn reproducibility(tmp: &Path) -> Outcome {
    let cwd = tmp.join("repro");
    let mnist = cwd.join("fake_mnist");
    common::fake_mnist(&mnist, 300, 60);
    let mnist_dir = format!("data.mnist_dir={:?}", mnist.display().to_string());
    let sessions: [(&str, Vec<&str>); 2] = [
        ("toy2d", vec![]),
        ("mnist-small", vec!["--set", mnist_dir.as_str(), "--hidden", "32,32", "--set", "data.train_limit=200", "--set", "data.valid_limit=40"]),
    ];
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for (preset, extra) in &sessions {
        let (a, b) = (format!("{}_a", preset), format!("{}_b", preset));
        cli_session(&cwd, &a, preset, extra);
        cli_session(&cwd, &b, preset, extra);
        let (fa, fb) = (files_under(&cwd.join(&a)), files_under(&cwd.join(&b)));
        if fa != fb {
            mismatched.push(format!("{}: file sets differ", preset));
            continue;
        }
        for f in fa {
            let ext = f.extension().and_then(|e| e.to_str()).unwrap_or("");
            if !matches!(ext, "csv" | "bin" | "pgm") {
                continue;
            }
            compared += 1;
            if common::read(&cwd.join(&a).join(&f)) != common::read(&cwd.join(&b).join(&f)) {
                mismatched.push(format!("{}/{}", preset, f.display()));
            }
        }
    }
    verdict(mismatched.is_empty() && compared > 0, format!("{} CSV/checkpoint/PGM files compared across toy2d and mnist-small, mismatches {:?}", compared, mismatched))
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("INFUSION_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    MNIST_FILES.iter().all(|f| dir.join(f).is_file()).then_some(dir)
}

fn mnist_small(tmp: &Path) -> Outcome {
    let Some(dir) = mnist_dir() else {
        return Outcome { status: Status::Skip, detail: "MNIST IDX files not found; set INFUSION_MNIST_DIR".to_string() };
    };
    let t = Instant::now();
    let sets = vec![format!("data.mnist_dir={:?}", dir.display().to_string()), format!("output.dir={:?}", tmp.join("mnist").display().to_string())];
    let run = RunConfig::preset("mnist-small").unwrap().resolve(None, &sets).unwrap();
    let summary = commands::train(&run, &tmp.join("mnist")).unwrap();
    let first = summary.history[0].valid_lower_bound;
    let best = summary.best_valid_lower_bound.unwrap();
    let ckpt = Checkpoint::load(&tmp.join("mnist/checkpoint.bin")).unwrap();
    commands::sample(&ckpt, &run, &tmp.join("mnist/s1")).unwrap();
    commands::sample(&ckpt, &run, &tmp.join("mnist/s2")).unwrap();
    let same = common::read(&tmp.join("mnist/s1/samples.pgm")) == common::read(&tmp.join("mnist/s2/samples.pgm"));
    let ok = summary.best_epoch.unwrap() > 1 && best - first >= 20.0 && same && within(t, Duration::from_secs(1800));
    verdict(
        ok,
        format!(
            "valid LB epoch 1 {:.2}, best {:.2} at epoch {:?}; sample grid deterministic: {}; {:.0}s; train rows {}",
            first,
            best,
            summary.best_epoch,
            same,
            t.elapsed().as_secs_f64(),
            commands::load_dataset(&run).map(|d| d.count(Split::Train)).unwrap_or(0)
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "gradient correctness", Box::new(gradients)),
        (2, "importance estimate dominates lower bound", Box::new(jensen)),
        (3, "analytic linear-Gaussian chain", Box::new(analytic_chain)),
        (4, "infusion mixture density", Box::new(mixture_density)),
        (5, "infusion convergence", Box::new(convergence)),
        (6, "toy-data learning", Box::new(|| toy_learning(p))),
        (7, "schedule trend", Box::new(|| schedule_trend(p))),
        (8, "Parzen convolution oracle", Box::new(parzen)),
        (9, "inpainting contract", Box::new(inpainting)),
        (10, "CLI reproducibility", Box::new(|| reproducibility(p))),
        (11, "mnist-small behaviour", Box::new(|| mnist_small(p))),
    ];
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut unexpected = 0;
    for (id, name, check) in criteria {
        let o = check();
        let label = match o.status {
            Status::Pass => "PASS",
            Status::Skip => "SKIP",
            Status::Fail if KNOWN_FAILURES.contains(&id) && !strict => "FAIL (known)",
            Status::Fail => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!("criterion {:>2} {:<44} {}: {}", id, name, label, o.detail);
    }
    if unexpected > 0 {
        std::process::exit(1);
    }
}
