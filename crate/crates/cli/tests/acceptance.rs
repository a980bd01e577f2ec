//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use uqbench::metrics::{auce, auce_raw, ause, ece, kl_gaussian, SparsificationAggregate};
use uqbench::models::GaussianPrediction;
use uqbench::predictive::{collapse_gaussian_mixture, PredictiveCategorical, PredictiveGaussian};
use uqbench::rng::rng_from_seed;
use uqbench::samplers::{
    extraction_schedule, hmc_run, sg_mcmc_trajectory, FnPotential, FullBatch, HmcConfig, InferenceMethod,
    SgMcmcConfig, SgMcmcKind,
};
use uqbench_cli::gradcheck::{run_gradcheck, GradcheckOptions};
use uqbench_cli::runner::RunSummary;
use uqbench_cli::{run_experiment, ExperimentConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<String, String> {
    let took = start.elapsed();
    let text = format!("{:.1}s of {}s", took.as_secs_f64(), budget.as_secs());
    if took <= budget {
        Ok(text)
    } else {
        Err(format!("runtime {text}"))
    }
}

// ---------------------------------------------------------------- 1

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let report = run_gradcheck(&GradcheckOptions::default()).map_err(|e| e.to_string())?;
    let time = within_budget(start, Duration::from_secs(10))?;
    check(
        report.passed() && report.results.iter().all(|r| r.instances == 100),
        format!("worst relative error {:.2e} over 2 x 100 instances, {time}", report.worst()),
    )
}

// ---------------------------------------------------------------- 2

/// Mean and batch-means standard error of `f` over a chain.
fn batch_means(xs: &[f64], f: impl Fn(f64) -> f64) -> (f64, f64) {
    let batches = 50;
    let len = xs.len() / batches;
    let means: Vec<f64> = xs
        .chunks_exact(len)
        .map(|c| c.iter().map(|&x| f(x)).sum::<f64>() / len as f64)
        .collect();
    let mean = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

fn hmc_matches(name: &str, mean: f64, var: f64, samples: &[f64]) -> Outcome {
    let (m, se_m) = batch_means(samples, |x| x);
    let (v, se_v) = batch_means(samples, |x| (x - mean).powi(2));
    let detail = format!("{name}: mean {m:.4} (want {mean:.4}, se {se_m:.4}), var {v:.4} (want {var:.4}, se {se_v:.4})");
    check((m - mean).abs() <= 3.0 * se_m && (v - var).abs() <= 3.0 * se_v, detail)
}

fn sampler_correctness() -> Outcome {
    let start = Instant::now();
    let config = HmcConfig {
        num_samples: 5000,
        ..HmcConfig::default()
    };
    let normal = FnPotential::new(1, |t: &[f64]| (0.5 * t[0] * t[0], vec![t[0]]));
    let (s, _) = hmc_run(&normal, &[0.0], &config, &mut rng_from_seed(1)).map_err(|e| e.to_string())?;
    let xs: Vec<f64> = s.iter().map(|p| p[0]).collect();
    let a = hmc_matches("hmc N(0,1)", 0.0, 1.0, &xs);

    // y_i ~ N(theta, 1), theta ~ N(0, 1): posterior N(sum y / (n + 1), 1 / (n + 1)).
    let mut rng = rng_from_seed(2);
    let ys: Vec<f64> = (0..20).map(|_| 1.5 + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    let n = ys.len() as f64;
    let post_mean = ys.iter().sum::<f64>() / (n + 1.0);
    let post_var = 1.0 / (n + 1.0);
    let conj = FnPotential::new(1, |t: &[f64]| {
        let u = ys.iter().map(|y| 0.5 * (y - t[0]).powi(2)).sum::<f64>() + 0.5 * t[0] * t[0];
        let g = ys.iter().map(|y| t[0] - y).sum::<f64>() + t[0];
        (u, vec![g])
    });
    let (s, _) = hmc_run(&conj, &[0.0], &config, &mut rng_from_seed(3)).map_err(|e| e.to_string())?;
    let xs: Vec<f64> = s.iter().map(|p| p[0]).collect();
    let b = hmc_matches("hmc conjugate", post_mean, post_var, &xs);

    let mut sg = Vec::new();
    for (kind, alpha0) in [(SgMcmcKind::Sgld, 0.05), (SgMcmcKind::Sghmc, 0.01)] {
        let cfg = SgMcmcConfig {
            alpha0,
            total_steps: 1_000_000,
            num_samples: 5000,
            ..SgMcmcConfig::default()
        };
        let schedule = extraction_schedule(cfg.total_steps, cfg.num_samples).map_err(|e| e.to_string())?;
        let mut target = FullBatch(FnPotential::new(1, |t: &[f64]| (0.5 * t[0] * t[0], vec![t[0]])));
        let s = sg_mcmc_trajectory(kind, &mut target, &[0.0], &cfg, &schedule, &mut rng_from_seed(4))
            .map_err(|e| e.to_string())?;
        let xs: Vec<f64> = s.iter().map(|p| p[0]).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        sg.push(check((0.7..=1.3).contains(&v), format!("{kind:?} variance {v:.3}")));
    }
    let time = within_budget(start, Duration::from_secs(120));
    let parts = [a, b, sg.remove(0), sg.remove(0), time];
    let ok = parts.iter().all(Result::is_ok);
    let detail = parts.into_iter().map(|p| p.unwrap_or_else(|e| e)).collect::<Vec<_>>().join("; ");
    check(ok, detail)
}

// ---------------------------------------------------------------- 3

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let whole = (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b));
    let left = (m - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + m)) + f(m));
    let right = (b - m) / 6.0 * (f(m) + 4.0 * f(0.5 * (m + b)) + f(b));
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        left + right + (left + right - whole) / 15.0
    } else {
        simpson(f, a, m, tol / 2.0, depth - 1) + simpson(f, m, b, tol / 2.0, depth - 1)
    }
}

fn kl_quadrature(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    let lp = |x: f64, m: f64, v: f64| -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (x - m).powi(2) / (2.0 * v);
    let f = |x: f64| {
        let a = lp(x, m1, v1);
        a.exp() * (a - lp(x, m2, v2))
    };
    let s = v1.sqrt();
    simpson(&f, m1 - 14.0 * s, m1 + 14.0 * s, 1e-12, 40)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Re-sorting oracle: at each removal count, the expected pooled loss of
/// the survivors over every removal order consistent with `keys`.
fn oracle_curve(losses: &[f64], keys: &[f64], perms: &[Vec<usize>]) -> Vec<f64> {
    let n = losses.len();
    let orders: Vec<&Vec<usize>> = perms
        .iter()
        .filter(|p| p.windows(2).all(|w| keys[w[0]] >= keys[w[1]]))
        .collect();
    (0..=n)
        .map(|r| {
            if r == n {
                return 0.0;
            }
            orders
                .iter()
                .map(|o| o[r..].iter().map(|&i| losses[i]).sum::<f64>() / (n - r) as f64)
                .sum::<f64>()
                / orders.len() as f64
        })
        .collect()
}

fn oracle_ause(errors: &[f64], unc: &[f64], agg: SparsificationAggregate, perms: &[Vec<usize>]) -> f64 {
    let n = errors.len();
    let (losses, finish): (Vec<f64>, fn(f64) -> f64) = match agg {
        SparsificationAggregate::Rmse => (errors.iter().map(|e| e * e).collect(), f64::sqrt),
        SparsificationAggregate::BrierMean => (errors.to_vec(), |v| v),
    };
    let u = oracle_curve(&losses, unc, perms);
    let o = oracle_curve(&losses, &losses, perms);
    let base = finish(u[0]);
    if base == 0.0 {
        return 0.0;
    }
    let d: Vec<f64> = u.iter().zip(&o).map(|(a, b)| (finish(*a) - finish(*b)) / base).collect();
    (0..n).map(|i| 0.5 * (d[i] + d[i + 1]) / n as f64).sum()
}

fn metric_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from_seed(30);
    let mut worst_kl: f64 = 0.0;
    for _ in 0..20 {
        let (m1, v1, m2, v2) = (
            rng.random_range(-4.0..4.0),
            rng.random_range(0.05..5.0),
            rng.random_range(-4.0..4.0),
            rng.random_range(0.05..5.0),
        );
        let kl = kl_gaussian((m1, v1), (m2, v2)).map_err(|e| e.to_string())?;
        worst_kl = worst_kl.max((kl - kl_quadrature(m1, v1, m2, v2)).abs());
    }

    let mut worst_ause: f64 = 0.0;
    let mut cases = 0;
    for n in 2..=8 {
        let perms = permutations(n);
        for trial in 0..12 {
            let errors: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let briers: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
            // Odd trials draw uncertainties from a small set to force ties.
            let unc: Vec<f64> = (0..n)
                .map(|_| if trial % 2 == 1 { rng.random_range(0..3) as f64 } else { rng.random_range(0.0..1.0) })
                .collect();
            for (agg, e) in [(SparsificationAggregate::Rmse, &errors), (SparsificationAggregate::BrierMean, &briers)] {
                let (got, _) = ause(e, &unc, agg, n).map_err(|e| e.to_string())?;
                worst_ause = worst_ause.max((got - oracle_ause(e, &unc, agg, &perms)).abs());
                cases += 1;
            }
        }
    }

    let n = 100_000;
    let mut preds = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let mu: f64 = Distribution::<f64>::sample(&StandardNormal, &mut rng);
        let sigma: f64 = rng.random_range(0.3..3.0);
        ys.push(mu + sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng));
        preds.push(PredictiveGaussian::new(mu, sigma * sigma).map_err(|e| e.to_string())?);
    }
    let (calibrated, _) = auce(&preds, &ys).map_err(|e| e.to_string())?;
    let zero_sigma: Vec<(f64, f64, f64)> = (0..1000).map(|i| (0.0, 0.0, 1.0 + i as f64)).collect();
    let (degenerate, _) = auce_raw(&zero_sigma).map_err(|e| e.to_string())?;

    let certain = PredictiveCategorical::new(vec![1.0, 0.0]).map_err(|e| e.to_string())?;
    let labels_right = vec![0; 50];
    let labels_wrong = vec![1; 50];
    let fixture = vec![certain; 50];
    let (ece_right, _) = ece(&fixture, &labels_right, 10).map_err(|e| e.to_string())?;
    let (ece_wrong, _) = ece(&fixture, &labels_wrong, 10).map_err(|e| e.to_string())?;

    let time = within_budget(start, Duration::from_secs(60))?;
    check(
        worst_kl < 1e-6
            && worst_ause <= 1e-12
            && calibrated < 0.01
            && (degenerate - 0.5).abs() <= 0.01
            && ece_right == 0.0
            && ece_wrong == 1.0,
        format!(
            "KL vs quadrature {worst_kl:.1e}, AUSE vs oracle {worst_ause:.1e} ({cases} cases), AUCE calibrated {calibrated:.4}, degenerate {degenerate:.4}, ECE {ece_right} / {ece_wrong}, {time}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn mixture_collapse() -> Outcome {
    let start = Instant::now();
    let comp = GaussianPrediction {
        mu: 0.7,
        log_sigma2: (2.5f64).ln(),
    };
    let same = collapse_gaussian_mixture(&vec![comp; 16]).map_err(|e| e.to_string())?;
    let identical = (same.mu_hat() - comp.mu).abs() <= 1e-12 && (same.sigma2_hat() - comp.sigma2()).abs() <= 1e-12;

    let mut rng = rng_from_seed(40);
    let draws = 1_000_000;
    let mut failures = 0;
    let mut worst_z: f64 = 0.0;
    for _ in 0..20 {
        let m = rng.random_range(1..10);
        let comps: Vec<GaussianPrediction> = (0..m)
            .map(|_| GaussianPrediction {
                mu: rng.random_range(-3.0..3.0),
                log_sigma2: rng.random_range(-2.0..1.5),
            })
            .collect();
        let collapsed = collapse_gaussian_mixture(&comps).map_err(|e| e.to_string())?;
        let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..draws {
            let c = &comps[rng.random_range(0..m)];
            let z: f64 = Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let x = c.mu + c.sigma2().sqrt() * z;
            s1 += x;
            s2 += x * x;
            s3 += x * x * x;
            s4 += x * x * x * x;
        }
        let nf = draws as f64;
        let mean = s1 / nf;
        let var = s2 / nf - mean * mean;
        let m4 = s4 / nf - 4.0 * mean * s3 / nf + 6.0 * mean * mean * s2 / nf - 3.0 * mean.powi(4);
        let se_mean = (var / nf).sqrt();
        let se_var = ((m4 - var * var) / nf).sqrt();
        let z_mean = (collapsed.mu_hat() - mean).abs() / se_mean;
        let z_var = (collapsed.sigma2_hat() - var).abs() / se_var;
        worst_z = worst_z.max(z_mean).max(z_var);
        if z_mean > 3.0 || z_var > 3.0 {
            failures += 1;
        }
    }
    let time = within_budget(start, Duration::from_secs(30))?;
    check(
        identical && failures == 0,
        format!("identical components preserved: {identical}; worst deviation {worst_z:.2} SE over 20 mixtures, {time}"),
    )
}

// ---------------------------------------------------------------- 5-8

const M_VALUES: [usize; 4] = [8, 16, 32, 64];

fn desk_config(task: &str, methods: &[&str]) -> ExperimentConfig {
    let methods: Vec<String> = methods.iter().map(|m| format!(r#"{{"method": "{m}"}}"#)).collect();
    ExperimentConfig::from_json(&format!(
        r#"{{"schema_version": 1, "task": "{task}", "seed": 0, "m_values": [8, 16, 32, 64],
            "scale_factor": 64, "curves": "none", "methods": [{}]}}"#,
        methods.join(", ")
    ))
    .expect("desk config is valid")
}

fn mean_std(s: &RunSummary, method: InferenceMethod, m: usize) -> (f64, f64) {
    let st = s.stats(method, m).expect("reported cell");
    (st.mean, st.std)
}

/// Ordering at every M plus the non-increasing trend of both methods, where
/// a step up is tolerated if it is within the larger of the two standard
/// deviations.
fn ordering_and_trend(s: &RunSummary) -> (bool, String) {
    let mut ok = true;
    let mut cells = Vec::new();
    for &m in &M_VALUES {
        let (e, _) = mean_std(s, InferenceMethod::Ensembling, m);
        let (d, _) = mean_std(s, InferenceMethod::McDropout, m);
        ok &= e < d;
        cells.push(format!("M={m}: ens {e:.4} vs mcd {d:.4}"));
    }
    for method in [InferenceMethod::Ensembling, InferenceMethod::McDropout] {
        for w in M_VALUES.windows(2) {
            let (a, sa) = mean_std(s, method, w[0]);
            let (b, sb) = mean_std(s, method, w[1]);
            if b > a + sa.max(sb) {
                ok = false;
                cells.push(format!("{method} rises {a:.4} -> {b:.4} from M={} to M={}", w[0], w[1]));
            }
        }
    }
    (ok, cells.join(", "))
}

fn regression_trend(s: &RunSummary, took: Duration) -> Outcome {
    let (ok, detail) = ordering_and_trend(s);
    let fast = took <= Duration::from_secs(30 * 60);
    check(ok && fast, format!("{detail}; {:.0}s", took.as_secs_f64()))
}

fn classification_trend(dir: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = desk_config("toy-classification", &["ensembling", "mc-dropout"]);
    let s = run_experiment(&cfg, dir).map_err(|e| e.to_string())?;
    let (ok, detail) = ordering_and_trend(&s);
    let took = start.elapsed();
    check(ok && took <= Duration::from_secs(30 * 60), format!("{detail}; {:.0}s", took.as_secs_f64()))
}

fn sg_mcmc_placement(s: &RunSummary, took: Duration) -> Outcome {
    let (e, _) = mean_std(s, InferenceMethod::Ensembling, 64);
    let (l, _) = mean_std(s, InferenceMethod::Sgld, 64);
    let (h, _) = mean_std(s, InferenceMethod::Sghmc, 64);
    check(
        e <= l && e <= h && took <= Duration::from_secs(20 * 60),
        format!("M=64: ens {e:.4}, sgld {l:.4}, sghmc {h:.4}; {:.0}s", took.as_secs_f64()),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_json(
        r#"{"schema_version": 1, "task": "toy-regression", "seed": 7, "m_values": [1, 2, 4],
            "grid_resolution": 200, "train_size": 200,
            "reference": {"hmc": {"num_samples": 200, "warmup_steps": 200, "leapfrog_steps": 20},
                          "map_init": {"epochs": 20}},
            "methods": [
              {"method": "ensembling", "pool_size": 8, "train": {"epochs": 20}},
              {"method": "mc-dropout", "repeats": 2, "train": {"epochs": 20}},
              {"method": "sgld", "repeats": 2, "epochs": 2048},
              {"method": "sghmc", "repeats": 2, "epochs": 2048}
            ]}"#,
    )
    .map_err(|e| e.to_string())?;
    let a = dir.join("a");
    let b = dir.join("b");
    run_experiment(&cfg, &a).map_err(|e| e.to_string())?;
    run_experiment(&cfg, &b).map_err(|e| e.to_string())?;
    let ra = std::fs::read(a.join("report.csv")).map_err(|e| e.to_string())?;
    let rb = std::fs::read(b.join("report.csv")).map_err(|e| e.to_string())?;
    let time = within_budget(start, Duration::from_secs(120))?;
    check(ra == rb && !ra.is_empty(), format!("report.csv {} bytes, identical: {}, {time}", ra.len(), ra == rb))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("criterion {n} PASS {name}: {d}"),
            Err(d) => println!("criterion {n} FAIL {name}: {d}"),
        }
        results.push((n, name, outcome));
    };

    report(1, "gradient exactness", gradient_exactness());
    report(2, "sampler correctness", sampler_correctness());
    report(3, "metric closed forms", metric_suite());
    report(4, "mixture collapse", mixture_collapse());

    let start = Instant::now();
    let regression = run_experiment(
        &desk_config("toy-regression", &["ensembling", "mc-dropout", "sgld", "sghmc"]),
        &tmp.path().join("regression"),
    );
    let took = start.elapsed();
    match &regression {
        Ok(s) => {
            report(5, "regression trend", regression_trend(s, took));
        }
        Err(e) => report(5, "regression trend", Err(e.to_string())),
    }
    report(6, "classification trend", classification_trend(&tmp.path().join("classification")));
    match &regression {
        Ok(s) => report(7, "sg-mcmc placement", sg_mcmc_placement(s, took)),
        Err(e) => report(7, "sg-mcmc placement", Err(e.to_string())),
    }
    report(8, "end-to-end determinism", determinism(&tmp.path().join("determinism")));

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
