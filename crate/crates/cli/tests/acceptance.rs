//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one line per criterion; exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use serde_json::Value;

use uqsuite::aggregate::{evaluate_tree, LogicNode, Verdict};
use uqsuite::datasel::{self, PointScorer, SearchConfig, SearchObjective, ToyQuadratic};
use uqsuite::estimators::{self, Estimator, UncertaintyPrediction};
use uqsuite::metrics::{self, ScoreKind};
use uqsuite::nn::{self, Activation, Head, LossKind, Mlp, ModelSpec, OptimizerKind, TrainConfig};
use uqsuite::odd::{Domain, OddSpec, Scenario, SemanticDimension, Violation};
use uqsuite::report::strip_timing;
use uqsuite::rng::stream;
use uqsuite::synthdata::{self, Dataset, Generator, SemanticValue};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo")
}

fn uqsuite(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_uqsuite"))
        .args(args)
        .output()
        .expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn canonical_train(n: usize, seed: u64) -> Dataset {
    synthdata::generate(&Generator::canonical(), n, seed).unwrap()
}

fn id_grid(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64]).collect()
}

fn gaussian_spec(widths: Vec<usize>, dropout: f64) -> ModelSpec {
    ModelSpec {
        widths,
        activation: Activation::Tanh,
        dropout,
        head: Head::Gaussian,
        sigma_floor: 1e-3,
    }
}

fn adam(epochs: usize, loss: LossKind, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.005,
        epochs,
        batch_size: 64,
        seed,
        loss,
        optimizer: OptimizerKind::Adam,
    }
}

// 1. Analytic gradients agree with central differences.
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut r = stream(seed, &[1]);
        let x = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        let y = r.random_range(-1.0..1.0);
        let point = Mlp::new(
            &ModelSpec {
                widths: vec![2, 8, 8, 1],
                activation: Activation::Tanh,
                dropout: 0.0,
                head: Head::Point,
                sigma_floor: 1e-3,
            },
            seed,
        )
        .unwrap();
        let gauss = Mlp::new(&gaussian_spec(vec![2, 8, 8, 1], 0.0), seed).unwrap();
        worst = worst
            .max(nn::grad_check(&point, &x, y, LossKind::Mse).unwrap())
            .max(nn::grad_check(&gauss, &x, y, LossKind::GaussianNll).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-4, format!("relative error {worst:e}"))?;
    ensure(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(format!("max relative error {worst:.2e} in {secs:.2}s"))
}

// 2. Metrics against closed forms and independent oracles.
fn metric_oracles() -> Outcome {
    // Frozen from 0.5 ln(2 pi s^2) + (y - m)^2 / (2 s^2).
    let cases = [
        (0.0, 1.0, 0.0, 0.9189385332046727),
        (1.0, 2.0, 3.0, 2.112085713764618),
        (-0.5, 0.1, 0.5, 48.61635344021062),
        (2.0, 0.5, 1.25, 1.3507913526447275),
    ];
    for (m, s, y, want) in cases {
        let got = metrics::point_score(ScoreKind::Nll, &UncertaintyPrediction::new(m, s), y).unwrap();
        ensure((got - want).abs() < 1e-6, format!("nll({m}, {s}, {y}) = {got}, want {want}"))?;
    }

    let mut r = stream(2, &[2]);
    for i in 0..100 {
        let n = r.random_range(1..200);
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let alpha = [0.0, 0.5, 0.9, 0.95, 0.99][i % 5];
        // Oracle: repeated extraction of the current maximum.
        let k = ((1.0 - alpha) * n as f64 - 1e-9).ceil().clamp(1.0, n as f64) as usize;
        let mut pool = v.clone();
        let mut sum = 0.0;
        for _ in 0..k {
            let (j, _) = pool
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, x)| if *x > best.1 { (j, *x) } else { best });
            sum += pool.swap_remove(j);
        }
        let want = sum / k as f64;
        let got = metrics::etl(&v, alpha).unwrap();
        ensure(got == want, format!("etl vector {i}: {got} != {want}"))?;
    }

    let g = Generator::canonical();
    let data = synthdata::generate(&g, 50_000, 7).unwrap();
    let oracle = Estimator::oracle(g.clone(), 1.0).unwrap();
    let preds = oracle.predict_dataset(&data, 0).unwrap();
    let ece = metrics::ece_regression(&preds, &data.targets(), 9).unwrap();
    ensure(ece < 0.02, format!("oracle ece {ece}"))?;

    let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let sigmas: Vec<Option<f64>> = preds.iter().map(|p| Some(p.sigma)).collect();
    let w = metrics::local_wasserstein(&preds, &means, &sigmas).unwrap();
    ensure(w == 0.0, format!("identical wasserstein {w}"))?;
    Ok(format!("4 nll cases, 100 etl vectors exact, oracle ece {ece:.4}, wasserstein 0"))
}

fn truth_at(points: &[Vec<f64>]) -> (Vec<f64>, Vec<Option<f64>>) {
    let g = Generator::canonical();
    (
        points.iter().map(|x| g.mean_at(x)).collect(),
        points.iter().map(|x| Some(g.sigma_at(x))).collect(),
    )
}

fn predict_all(est: &Estimator, points: &[Vec<f64>]) -> Vec<UncertaintyPrediction> {
    points.iter().map(|x| est.predict(x, 0).unwrap()).collect()
}

// 3. A Gaussian head recovers heteroscedastic noise.
fn heteroscedastic_recovery() -> Outcome {
    let start = Instant::now();
    let train = canonical_train(4096, 31);
    let init = Mlp::new(&gaussian_spec(vec![1, 32, 32, 1], 0.0), 5).unwrap();
    let model = nn::train(&init, &train, &adam(400, LossKind::GaussianNll, 5)).unwrap().model;
    let est = Estimator::parametric(model).unwrap();

    // Homoscedastic baseline: MSE fit plus the constant sigma MLE.
    let point_spec = ModelSpec {
        head: Head::Point,
        ..gaussian_spec(vec![1, 32, 32, 1], 0.0)
    };
    let init = Mlp::new(&point_spec, 5).unwrap();
    let mse = nn::train(&init, &train, &adam(400, LossKind::Mse, 5)).unwrap().model;
    let resid2: f64 = train
        .rows
        .iter()
        .map(|r| (r.y - mse.forward(&r.x, nn::Mode::Deterministic).unwrap().values[0]).powi(2))
        .sum::<f64>()
        / train.len() as f64;
    let baseline = Estimator::bypass(mse, resid2.sqrt()).unwrap();

    let grid = id_grid(-3.0, 3.0, 301);
    let (mu, sd) = truth_at(&grid);
    let preds = predict_all(&est, &grid);
    let rel = preds
        .iter()
        .zip(&sd)
        .map(|(p, s)| (p.sigma - s.unwrap()).abs() / s.unwrap())
        .sum::<f64>()
        / grid.len() as f64;
    let w = metrics::local_wasserstein(&preds, &mu, &sd).unwrap();
    let w0 = metrics::local_wasserstein(&predict_all(&baseline, &grid), &mu, &sd).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "mean relative sigma error {:.1}%, wasserstein {w:.3} vs baseline {w0:.3} ({:.0}% lower) in {secs:.1}s",
        100.0 * rel,
        100.0 * (1.0 - w / w0)
    );
    ensure(rel < 0.25, detail.clone())?;
    ensure(w <= 0.5 * w0, detail.clone())?;
    ensure(secs <= 120.0, detail.clone())?;
    Ok(detail)
}

fn mean_epistemic(est: &Estimator, points: &[Vec<f64>]) -> f64 {
    predict_all(est, points).iter().map(|p| p.epistemic.unwrap()).sum::<f64>() / points.len() as f64
}

// 4. Epistemic uncertainty grows away from the training data.
fn epistemic_growth() -> Outcome {
    let train = canonical_train(2048, 41);
    // ReLU members extrapolate linearly with diverging slopes; tanh members
    // saturate to near-identical plateaus outside the data.
    let relu = |widths, dropout| ModelSpec {
        activation: Activation::Relu,
        ..gaussian_spec(widths, dropout)
    };
    let spec = relu(vec![1, 32, 32, 1], 0.0);
    let members = estimators::train_members(&spec, &train, &adam(300, LossKind::GaussianNll, 9), 5).unwrap();
    let ensemble = Estimator::ensemble(members).unwrap();

    let drop_spec = relu(vec![1, 64, 64, 1], 0.1);
    let init = Mlp::new(&drop_spec, 13).unwrap();
    let net = nn::train(&init, &train, &adam(300, LossKind::GaussianNll, 13)).unwrap().model;
    let dropout = Estimator::mc_dropout(net, None, 50).unwrap();

    let id = id_grid(-3.0, 3.0, 121);
    let ood = id_grid(5.0, 7.0, 41);
    let mut detail = Vec::new();
    for (name, est) in [("ensemble", &ensemble), ("mc_dropout", &dropout)] {
        let (a, b) = (mean_epistemic(est, &id), mean_epistemic(est, &ood));
        detail.push(format!("{name} ood/id {:.1}x", b / a));
        ensure(b >= 2.0 * a, format!("{name}: ood {b:.4} < 2 x id {a:.4}"))?;
    }

    let grid: Vec<f64> = (0..8).map(f64::from).collect();
    let cells = datasel::sweep(&Generator::canonical(), "shift", &grid, 200, 3).unwrap();
    let means: Vec<f64> = cells
        .iter()
        .map(|c| {
            let pts: Vec<Vec<f64>> = c.rows.iter().map(|r| r.x.clone()).collect();
            mean_epistemic(&ensemble, &pts)
        })
        .collect();
    let rising = means.windows(2).filter(|w| w[1] > w[0]).count();
    ensure(rising == 7, format!("sweep cell means {means:.4?} rise in {rising} of 7 steps"))?;
    detail.push(format!("sweep rises in {rising}/7 steps"));
    Ok(detail.join(", "))
}

// 5. Variance scaling undoes a halved sigma.
fn scaling() -> Outcome {
    let g = Generator::canonical();
    let halved = Estimator::oracle(g.clone(), 0.5).unwrap();
    let calib = synthdata::generate(&g, 5000, 51).unwrap();
    let held = synthdata::generate(&g, 5000, 52).unwrap();
    let fitted = estimators::fit_scale(&halved, &calib, 0).unwrap();
    let Estimator::Scaled { scale, .. } = &fitted else {
        return Err("fit_scale did not return a scaled estimator".into());
    };
    let s = *scale;

    // Grid oracle: minimise the calibration NLL over candidate scales.
    let preds = halved.predict_dataset(&calib, 0).unwrap();
    let nll_at = |c: f64| -> f64 {
        preds
            .iter()
            .zip(&calib.rows)
            .map(|(p, r)| {
                let sd = c * p.sigma;
                sd.ln() + (r.y - p.mean).powi(2) / (2.0 * sd * sd)
            })
            .sum::<f64>()
    };
    let step = 1e-4;
    let best = (0..=30_000)
        .map(|i| 1.0 + i as f64 * step)
        .min_by(|a, b| nll_at(*a).total_cmp(&nll_at(*b)))
        .unwrap();
    ensure((1.8..=2.2).contains(&s), format!("scale {s}"))?;
    ensure((s - best).abs() <= step, format!("scale {s} vs grid {best}"))?;
    let before = metrics::nll_mean(&halved.predict_dataset(&held, 0).unwrap(), &held.targets()).unwrap();
    let after = metrics::nll_mean(&fitted.predict_dataset(&held, 0).unwrap(), &held.targets()).unwrap();
    ensure(after < before, format!("held-out nll {before} -> {after}"))?;
    Ok(format!("s = {s:.4} (grid {best:.4}), held-out nll {before:.3} -> {after:.3}"))
}

// 6. Search beats random sampling and finds the analytic optimum.
fn search_effectiveness() -> Outcome {
    let toy = ToyQuadratic {
        center: vec![2.0],
        peak: 1.0,
    };
    let bounds = [[-5.0, 5.0]];
    // Grid oracle for the maximiser.
    let grid_best = (0..=100_000)
        .map(|i| -5.0 + 10.0 * i as f64 / 100_000.0)
        .max_by(|a, b| toy.score(&[*a]).unwrap().total_cmp(&toy.score(&[*b]).unwrap()))
        .unwrap();
    let mut detail = Vec::new();
    for seed in [1u64, 2, 3] {
        let cfg = SearchConfig {
            objective: SearchObjective::ToyQuadratic {
                center: vec![2.0],
                peak: 1.0,
            },
            bounds: Some(bounds.to_vec()),
            generator: None,
            restarts: 10,
            steps: 200,
            initial_step: 1.0,
            shrink: 0.5,
            min_step_fraction: 1e-7,
            seed,
        };
        let hits = datasel::search(&toy, &bounds, &cfg).unwrap();
        let top = &hits[0];
        let mut r = stream(seed, &[6]);
        let random_best = (0..10_000)
            .map(|_| toy.score(&[r.random_range(-5.0..=5.0)]).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        ensure(top.score >= random_best, format!("seed {seed}: {} < random {random_best}", top.score))?;
        ensure((top.x[0] - grid_best).abs() <= 0.05, format!("seed {seed}: x {:?} vs grid {grid_best}", top.x))?;
        detail.push(format!("seed {seed} x={:.5}", top.x[0]));
    }
    Ok(detail.join(", "))
}

fn stripped(path: &Path) -> String {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    strip_timing(&mut v);
    serde_json::to_string_pretty(&v).unwrap()
}

// 7. Reports reproduce byte for byte.
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = demo_dir().join("suite.json");
    let mut reports = Vec::new();
    for i in 0..2 {
        let p = dir.path().join(format!("report{i}.json"));
        let (code, out) = uqsuite(&["run", "--config", config.to_str().unwrap(), "--report", p.to_str().unwrap()]);
        ensure(code == 0, format!("run {i} exited {code}: {out}"))?;
        reports.push(stripped(&p));
    }
    ensure(reports[0] == reports[1], "reports differ after stripping timing")?;
    Ok(format!("two runs identical ({} bytes)", reports[0].len()))
}

fn random_tree(r: &mut impl Rng, ids: &mut Vec<String>, budget: usize, depth: usize) -> LogicNode {
    if budget == 1 || depth == 0 || r.random_bool(0.3) {
        let id = format!("t{}", ids.len());
        ids.push(id.clone());
        return LogicNode::Leaf(id);
    }
    let n = r.random_range(2..=budget.min(4));
    let mut children = Vec::new();
    let mut left = budget;
    for i in 0..n {
        let share = if i + 1 == n { left - (n - 1 - i) } else { 1.max(left / (n - i)) };
        let share = share.min(left - (n - 1 - i)).max(1);
        left -= share;
        children.push(random_tree(r, ids, share, depth - 1));
    }
    match r.random_range(0..4) {
        0 => LogicNode::And(children),
        1 => LogicNode::Or(children),
        2 => LogicNode::KOfN {
            k: r.random_range(1..=children.len()),
            children,
        },
        _ => LogicNode::Weighted {
            weights: (0..children.len()).map(|_| r.random_range(1..=5) as f64).collect(),
            threshold: r.random_range(1..=10) as f64 / 10.0,
            children,
        },
    }
}

/// Two-valued reference semantics.
fn truth(node: &LogicNode, val: &BTreeMap<String, bool>) -> bool {
    match node {
        LogicNode::Leaf(id) => val[id],
        LogicNode::And(c) => c.iter().all(|n| truth(n, val)),
        LogicNode::Or(c) => c.iter().any(|n| truth(n, val)),
        LogicNode::KOfN { k, children } => children.iter().filter(|n| truth(n, val)).count() >= *k,
        LogicNode::Weighted {
            weights,
            threshold,
            children,
        } => {
            let total: f64 = weights.iter().sum();
            let on: f64 = children.iter().zip(weights).filter(|(n, _)| truth(n, val)).map(|(_, w)| w).sum();
            on / total >= *threshold
        }
    }
}

// 8. Tree evaluation matches truth tables and Kleene semantics.
fn aggregation_equivalence() -> Outcome {
    let mut r = stream(8, &[8]);
    let mut assignments = 0usize;
    let mut kleene = 0usize;
    for t in 0..200 {
        let mut ids = Vec::new();
        let budget = r.random_range(1..=12);
        let tree = random_tree(&mut r, &mut ids, budget, 4);
        let n = ids.len();
        ensure(n <= 12, "tree too large")?;
        for mask in 0u32..(1 << n) {
            let val: BTreeMap<String, bool> = ids.iter().enumerate().map(|(i, id)| (id.clone(), mask >> i & 1 == 1)).collect();
            let verdicts = val
                .iter()
                .map(|(k, v)| (k.clone(), if *v { Verdict::Pass } else { Verdict::Fail }))
                .collect();
            let got = evaluate_tree(&tree, &verdicts).unwrap().verdict;
            let want = if truth(&tree, &val) { Verdict::Pass } else { Verdict::Fail };
            ensure(got == want, format!("tree {t} mask {mask:b}: {got} vs {want}"))?;
            assignments += 1;
        }
        // Assignments with errored leaves: decided only when every completion agrees.
        for _ in 0..20 {
            let states: Vec<u8> = (0..n).map(|_| r.random_range(0..3)).collect();
            let unknown: Vec<usize> = (0..n).filter(|i| states[*i] == 2).collect();
            let verdicts = ids
                .iter()
                .zip(&states)
                .map(|(id, s)| (id.clone(), [Verdict::Fail, Verdict::Pass, Verdict::Inconclusive][*s as usize]))
                .collect();
            let got = evaluate_tree(&tree, &verdicts).unwrap().verdict;
            let mut seen = [false; 2];
            for fill in 0u32..(1 << unknown.len()) {
                let mut val = BTreeMap::new();
                for (i, id) in ids.iter().enumerate() {
                    val.insert(id.clone(), states[i] == 1);
                }
                for (j, i) in unknown.iter().enumerate() {
                    val.insert(ids[*i].clone(), fill >> j & 1 == 1);
                }
                seen[truth(&tree, &val) as usize] = true;
            }
            let want = match seen {
                [false, true] => Verdict::Pass,
                [true, false] => Verdict::Fail,
                _ => Verdict::Inconclusive,
            };
            ensure(got == want, format!("tree {t} states {states:?}: {got} vs {want}"))?;
            kleene += 1;
        }
    }
    Ok(format!("{assignments} two-valued and {kleene} three-valued assignments agree"))
}

fn num(v: f64) -> SemanticValue {
    SemanticValue::Number(v)
}

fn scenario(name: &str, values: Vec<(&str, SemanticValue)>) -> Scenario {
    Scenario {
        name: name.into(),
        values: values.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    }
}

// 9. Planted ODD inconsistencies are found.
fn odd_consistency() -> Outcome {
    let mut r = stream(9, &[9]);
    let mut planted = 0;
    let mut found = 0;
    for i in 0..50 {
        let dims: Vec<(String, f64, f64)> = (0..r.random_range(1..=3))
            .map(|d| {
                let lo = r.random_range(-10.0..0.0);
                (format!("d{d}"), lo, lo + r.random_range(1.0..10.0))
            })
            .collect();
        let centre = |shift: Option<(usize, f64)>| -> Vec<(&str, SemanticValue)> {
            dims.iter()
                .enumerate()
                .map(|(j, (n, lo, hi))| {
                    let mut v = (lo + hi) / 2.0;
                    if let Some((k, to)) = shift {
                        if k == j {
                            v = to;
                        }
                    }
                    (n.as_str(), num(v))
                })
                .collect()
        };
        let k = r.random_range(0..dims.len());
        let (_, lo, hi) = dims[k].clone();
        let mut spec = OddSpec {
            dimensions: dims
                .iter()
                .map(|(n, lo, hi)| SemanticDimension {
                    name: n.clone(),
                    domain: Domain::Continuous { min: *lo, max: *hi },
                })
                .collect(),
            epsilon: 0.05,
            performance: [(dims[k].0.clone(), Domain::Continuous { min: lo + 0.25 * (hi - lo), max: hi - 0.25 * (hi - lo) })].into(),
            in_domain: vec![scenario("id_ok", centre(None))],
            out_of_domain: vec![scenario("ood_ok", centre(Some((k, hi + (hi - lo)))))],
            borderline: Vec::new(),
        };
        ensure(spec.check_consistency().is_empty(), format!("spec {i} not consistent before planting"))?;
        let kind = i % 3;
        match kind {
            0 => spec.out_of_domain.push(scenario("planted", centre(None))),
            1 => spec.in_domain.push(scenario("planted", centre(Some((k, lo - 0.5 * (hi - lo)))))),
            _ => {
                spec.performance.insert(dims[k].0.clone(), Domain::Continuous { min: lo, max: hi + 1.0 });
            }
        }
        planted += 1;
        let v = spec.check_consistency();
        let hit = v.iter().any(|v| match (kind, v) {
            (0, Violation::Scenario { set, name, .. }) => set == "out_of_domain" && name == "planted",
            (1, Violation::Scenario { set, name, .. }) => set == "in_domain" && name == "planted",
            (2, Violation::PerformanceRange { dimension, .. }) => *dimension == dims[k].0,
            _ => false,
        });
        found += hit as usize;
        ensure(v.len() == 1, format!("spec {i}: expected one violation, got {v:?}"))?;
    }
    ensure(found == planted, format!("recall {found}/{planted}"))?;

    // One semantic axis, performance core inside a wider uncertainty domain,
    // in-domain crosses inside and out-of-domain crosses outside.
    let fig = OddSpec {
        dimensions: vec![SemanticDimension {
            name: "x".into(),
            domain: Domain::Continuous { min: 0.0, max: 10.0 },
        }],
        epsilon: 0.05,
        performance: [("x".to_string(), Domain::Continuous { min: 3.0, max: 7.0 })].into(),
        in_domain: [2.0, 4.5, 5.0, 6.0, 8.5].iter().map(|x| scenario("gray", vec![("x", num(*x))])).collect(),
        out_of_domain: [-3.0, -1.0, 11.0, 13.5].iter().map(|x| scenario("red", vec![("x", num(*x))])).collect(),
        borderline: Vec::new(),
    };
    let v = fig.check_consistency();
    ensure(v.is_empty(), format!("consistent spec reported {v:?}"))?;
    Ok(format!("recall {found}/{planted}, consistent spec clean"))
}

// 10. The shipped demo covers every level and strategy and honours exit codes.
fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let demo = demo_dir();
    let report = dir.path().join("healthy.json");
    let (code, out) = uqsuite(&[
        "run",
        "--config",
        demo.join("suite.json").to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    ensure(code == 0, format!("healthy run exited {code}: {out}"))?;
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let levels: std::collections::BTreeSet<&str> =
        r["results"].as_array().unwrap().iter().map(|t| t["level"].as_str().unwrap()).collect();
    ensure(levels.len() == 4, format!("levels {levels:?}"))?;
    let config: Value = serde_json::from_str(&std::fs::read_to_string(demo.join("suite.json")).unwrap()).unwrap();
    let kinds: std::collections::BTreeSet<&str> =
        config["data"].as_object().unwrap().values().map(|d| d["kind"].as_str().unwrap()).collect();
    for k in ["quantile_slice", "semantic_sweep", "curated", "search_generated"] {
        ensure(kinds.contains(k), format!("demo lacks a {k} dataset"))?;
    }
    ensure(r["criteria"].as_array().map_or(false, |c| !c.is_empty()), "no criterion verdicts")?;
    ensure(r["overall"] == "pass", format!("overall {}", r["overall"]))?;

    let (fault, out) = uqsuite(&[
        "run",
        "--config",
        demo.join("faulty_suite.json").to_str().unwrap(),
        "--report",
        dir.path().join("fault.json").to_str().unwrap(),
        "--fail-fast",
    ]);
    ensure(fault == 1, format!("planted fault exited {fault}: {out}"))?;
    let (invalid, out) = uqsuite(&[
        "run",
        "--config",
        demo.join("invalid_suite.json").to_str().unwrap(),
        "--report",
        dir.path().join("invalid.json").to_str().unwrap(),
    ]);
    ensure(invalid == 3, format!("invalid config exited {invalid}: {out}"))?;
    Ok(format!("levels {levels:?}, exit codes 0/{fault}/{invalid}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("metric oracles", metric_oracles),
        ("heteroscedastic recovery", heteroscedastic_recovery),
        ("epistemic OOD growth", epistemic_growth),
        ("scaling", scaling),
        ("search effectiveness", search_effectiveness),
        ("determinism", determinism),
        ("aggregation equivalence", aggregation_equivalence),
        ("ODD consistency", odd_consistency),
        ("end-to-end", end_to_end),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {:>2} {name}: PASS ({d}) [{secs:.1}s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({d}) [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
