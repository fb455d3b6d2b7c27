//! Acceptance run: one PASS/FAIL line per criterion on stdout, nonzero exit
//! if any criterion fails. Optional arguments filter criteria by name.

use std::panic::{AssertUnwindSafe, catch_unwind};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uavgnn::baselines::{AoConfig, GridConfig, Instance, alternating_optimization, grid_oracle, objective};
use uavgnn::experiment::{
    Axis, GradcheckConfig, Scheme, SchemeContext, SweepSpec, dataset_pair, gradcheck, run_scheme, sweep,
};
use uavgnn::gnn::{ModelConfig, forward};
use uavgnn::graph::{InitDeployment, build_graph, normalize_gain};
use uavgnn::physics::ground_gain;
use uavgnn::scenario::generate;
use uavgnn::training::{EvalReport, TrainConfig, TrainHistory, decide, loss_and_grad, prepare, train};
use uavgnn::{Architecture, Dataset, GenConfig, GnnParams};

// pinned tolerances and budgets
const GRAPH_REL_TOL: f64 = 1e-12;
const GRAPH_TIME: Duration = Duration::from_secs(1);
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_MIN_PARAMS: usize = 1000;
const GRAD_MIN_SCENARIOS: usize = 5;
const GRAD_TIME: Duration = Duration::from_secs(60);
const LOSS_REL_TOL: f64 = 1e-9;
const LOSS_CASES: usize = 100;
const RANGE_CASES: usize = 10_000;
const CONV_WINDOW: usize = 20;
const CONV_CV: f64 = 0.01;
const CONV_BY_ITER: usize = 300;
const CONV_TIME: Duration = Duration::from_secs(600);
const ORDER_MARGIN: f64 = 1.05;
const M_VALUES: [usize; 3] = [10, 20, 30];
const M_RATIO: f64 = 0.5;
const N_VALUES: [usize; 3] = [1, 2, 4];
const ORACLE_CASES: usize = 20;
const ORACLE_FRACTION: f64 = 0.95;
const ORACLE_TIME: Duration = Duration::from_secs(120);
const EQUIV_CASES: usize = 50;
const EQUIV_TOL: f64 = 1e-9;
const QOS_FRACTION: f64 = 0.9;

// reduced budget for the per-value retraining in the sweeps
const SWEEP_ITERS: usize = 150;
const SWEEP_TRAIN: usize = 200;
const SWEEP_TEST: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Trained {
    test: Dataset,
    params: GnnParams,
    history: TrainHistory,
    report: EvalReport,
    alpha: f64,
    elapsed: Duration,
}

/// The default-configuration model shared by the criteria that need one.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let (tr, te) = dataset_pair(&GenConfig::default(), 500, 200).expect("default datasets");
        let cfg = TrainConfig::default();
        let start = Instant::now();
        let (params, history) = train(&tr, &te, Architecture::default(), &cfg).expect("default training");
        let elapsed = start.elapsed();
        let report = uavgnn::training::evaluate(&params, &te, cfg.alpha).expect("evaluation");
        Trained {
            test: te,
            params,
            history,
            report,
            alpha: cfg.alpha,
            elapsed,
        }
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn graph_structure() -> Outcome {
    let start = Instant::now();
    let g = GenConfig::default();
    let ds = generate(&g, 1).expect("scenario");
    let s = &ds.items[0];
    let c = &s.constants;
    let init = InitDeployment::default_for(s, g.n_uav, g.area_half);
    let graph = build_graph(s, &init, g.area_half).expect("graph");
    let n = graph.n_nodes();
    let green = g.n_uav * g.n_du;
    let mut green_green = 0usize;
    let mut beta_bad = 0usize;
    let mut worst = 0.0f64;
    let gain = |a: [f64; 2], b: [f64; 2]| {
        let d = (a[0] - b[0]).hypot(a[1] - b[1]);
        normalize_gain(ground_gain(d, c).expect("positive distance"))
    };
    for i in 0..n {
        for j in 0..n {
            let a = graph.adj_at(i, j);
            if i < green && j < green {
                green_green += usize::from(a != 0.0);
            } else if i < green {
                beta_bad += usize::from(a != normalize_gain(c.beta0));
            } else {
                let m = i - green;
                let want = if j < green {
                    gain(s.dt_xy[m], s.du_xy[j % g.n_du])
                } else if j == i {
                    0.0
                } else {
                    gain(s.dt_xy[m], s.dr_xy[j - green])
                };
                if want == 0.0 {
                    worst = worst.max(a.abs());
                } else {
                    worst = worst.max(rel(a, want));
                }
            }
        }
    }
    let t = start.elapsed();
    outcome(
        n == 22 && green_green == 0 && beta_bad == 0 && worst <= GRAPH_REL_TOL && t < GRAPH_TIME,
        format!(
            "nodes {n}, green-green edges {green_green}, bad green->yellow entries {beta_bad}, \
             worst yellow-row rel err {worst:.2e} (tol {GRAPH_REL_TOL:e}), {:.3}s",
            t.as_secs_f64()
        ),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    let r = gradcheck(&GenConfig::default(), &Architecture::default(), 10.0, &cfg).expect("gradcheck");
    let t = start.elapsed();
    let scenarios = r.per_scenario.len();
    outcome(
        r.checked >= GRAD_MIN_PARAMS
            && scenarios >= GRAD_MIN_SCENARIOS
            && r.max_rel_err < GRAD_REL_TOL
            && t < GRAD_TIME,
        format!(
            "{} params over {scenarios} scenarios ({} kink points excluded), max rel err {:.2e} (tol {GRAD_REL_TOL:e}), {:.1}s",
            r.checked,
            r.excluded,
            r.max_rel_err,
            t.as_secs_f64()
        ),
    )
}

fn loss_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let ds = generate(
        &GenConfig {
            seed: 31,
            ..GenConfig::default()
        },
        LOSS_CASES,
    )
    .expect("scenarios");
    let preps = prepare(&ds).expect("prepare");
    let ah = ds.meta.area_half;
    let mut worst = 0.0f64;
    for prep in &preps {
        let params = GnnParams::init(Architecture::default(), rng.random());
        let alpha = rng.random_range(0.0..50.0);
        let (traced, _) = loss_and_grad(prep, &params, ah, alpha).expect("traced loss");
        let plain = prep.physics.penalized_loss(&decide(prep, &params, ah), alpha);
        worst = worst.max(rel(traced, plain));
    }
    outcome(
        worst <= LOSS_REL_TOL,
        format!("{LOSS_CASES} cases, worst rel diff {worst:.2e} (tol {LOSS_REL_TOL:e})"),
    )
}

fn output_ranges() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let g = GenConfig {
        seed: 41,
        ..GenConfig::default()
    };
    let ds = generate(&g, RANGE_CASES).expect("scenarios");
    let mc = ModelConfig {
        n_uav: g.n_uav,
        area_half: g.area_half,
    };
    let c = &g.constants;
    let (mut powers, mut bad_powers, mut positions, mut bad_positions) = (0usize, 0usize, 0usize, 0usize);
    for s in &ds.items {
        let mut params = GnnParams::init(Architecture::default(), rng.random());
        let spread = rng.random_range(0.0..0.5);
        for v in &mut params.values {
            *v += rng.random_range(-spread..=spread);
        }
        let d = forward(s, &params, &mc).expect("forward");
        for &p in &d.p_uav {
            powers += 1;
            bad_powers += usize::from(!(p > 0.0 && p <= c.p_max_uav_w));
        }
        for &p in &d.p_d2d {
            powers += 1;
            bad_powers += usize::from(!(p > 0.0 && p <= c.p_max_d2d_w));
        }
        for xy in &d.uav_xy {
            positions += 1;
            bad_positions += usize::from(!xy.iter().all(|v| v.abs() <= g.area_half));
        }
    }
    outcome(
        bad_powers == 0 && bad_positions == 0,
        format!(
            "{RANGE_CASES} settings: {}/{powers} powers in (0, cap], {}/{positions} positions inside the area",
            powers - bad_powers,
            positions - bad_positions
        ),
    )
}

fn convergence() -> Outcome {
    let t = trained();
    let upto: Vec<f64> = t
        .history
        .rows
        .iter()
        .filter(|r| r.iter <= CONV_BY_ITER)
        .map(|r| r.train_loss)
        .collect();
    let cv = |w: &[f64]| {
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        var.sqrt() / mean.abs()
    };
    let at = (upto.len() >= CONV_WINDOW).then(|| cv(&upto[upto.len() - CONV_WINDOW..]));
    let rows = &t.history.rows;
    let first_stable = (CONV_WINDOW..=rows.len())
        .find(|&end| {
            cv(&rows[end - CONV_WINDOW..end]
                .iter()
                .map(|r| r.train_loss)
                .collect::<Vec<_>>())
                < CONV_CV
        })
        .map(|end| rows[end - 1].iter);
    let cv_text = at.map_or("n/a".into(), |v| format!("{v:.4}"));
    let stable_text = first_stable.map_or("never".into(), |i| format!("iteration {i}"));
    outcome(
        at.is_some_and(|v| v < CONV_CV) && t.elapsed < CONV_TIME,
        format!(
            "cv of last {CONV_WINDOW} records at iteration {CONV_BY_ITER}: {cv_text} (tol {CONV_CV}); \
             first stable window ends at {stable_text}; training {:.0}s",
            t.elapsed.as_secs_f64()
        ),
    )
}

fn scheme_ordering() -> Outcome {
    let t = trained();
    let ao = AoConfig::default();
    let grid = GridConfig::default();
    let ctx = SchemeContext {
        params: Some(&t.params),
        ao: &ao,
        grid: &grid,
        alpha: t.alpha,
        seed: GenConfig::default().seed,
    };
    let mean = |scheme| run_scheme(scheme, &t.test, &ctx).expect("scheme run").1.mean_sum_rate;
    let (random, fixed) = (mean(Scheme::Random), mean(Scheme::FixedPower));
    let gnn = t.report.mean_sum_rate;
    outcome(
        gnn >= ORDER_MARGIN * random && gnn >= ORDER_MARGIN * fixed,
        format!(
            "gnn {gnn:.3}, random {random:.3} (x{:.3}), fixed_power {fixed:.3} (x{:.3}); need x{ORDER_MARGIN} over each",
            gnn / random,
            gnn / fixed
        ),
    )
}

fn sweep_means(axis: Axis, values: &[usize]) -> Vec<f64> {
    let train = TrainConfig {
        iters: SWEEP_ITERS,
        eval_every: SWEEP_ITERS,
        ..TrainConfig::default()
    };
    let spec = SweepSpec {
        axis,
        values,
        generator: &GenConfig::default(),
        train: &train,
        ao: &AoConfig::default(),
        grid: &GridConfig::default(),
        arch: &Architecture::default(),
        n_train: SWEEP_TRAIN,
        n_test: SWEEP_TEST,
        baselines: &[],
    };
    sweep(&spec, |_| {})
        .expect("sweep")
        .iter()
        .map(|p| p.report(Scheme::Gnn).expect("gnn report").mean_sum_rate)
        .collect()
}

fn m_trend() -> Outcome {
    let r = sweep_means(Axis::M, &M_VALUES);
    let decreasing = r.windows(2).all(|w| w[1] < w[0]);
    let ratio = r[2] / r[0];
    // only the strict decrease gates; the ratio target is reported
    outcome(
        decreasing,
        format!(
            "M {M_VALUES:?} -> sum rate [{:.3}, {:.3}, {:.3}], strictly decreasing {decreasing}; \
             M=30/M=10 ratio {ratio:.3} (target <= {M_RATIO}, {})",
            r[0],
            r[1],
            r[2],
            if ratio <= M_RATIO { "met" } else { "not met" }
        ),
    )
}

fn n_trend() -> Outcome {
    let r = sweep_means(Axis::N, &N_VALUES);
    let increasing = r.windows(2).all(|w| w[1] > w[0]);
    outcome(
        increasing,
        format!(
            "N {N_VALUES:?} -> sum rate [{:.3}, {:.3}, {:.3}], strictly increasing {increasing}",
            r[0], r[1], r[2]
        ),
    )
}

fn oracle_agreement() -> Outcome {
    let start = Instant::now();
    let g = GenConfig {
        seed: 51,
        n_uav: 1,
        n_du: 1,
        n_d2d: 1,
        ..GenConfig::default()
    };
    let ds = generate(&g, ORACLE_CASES).expect("tiny scenarios");
    let ao = AoConfig::default();
    let grid = GridConfig {
        pos_resolution: 21,
        power_levels: 8,
    };
    let mut worst = f64::INFINITY;
    let mut below = 0usize;
    for s in &ds.items {
        let inst = Instance {
            scenario: s,
            n_uav: 1,
            area_half: g.area_half,
            alpha: 10.0,
        };
        let fa = objective(&inst, &alternating_optimization(inst, &ao).expect("ao")).expect("objective");
        let fo = objective(&inst, &grid_oracle(inst, &grid).expect("oracle")).expect("objective");
        // objectives may be negative, so compare against a band below the oracle
        let floor = fo - (1.0 - ORACLE_FRACTION) * fo.abs();
        below += usize::from(fa < floor);
        worst = worst.min(1.0 - (fo - fa) / fo.abs());
    }
    let t = start.elapsed();
    outcome(
        below == 0 && t < ORACLE_TIME,
        format!(
            "{ORACLE_CASES} instances, {below} below {ORACLE_FRACTION} of the oracle, worst fraction {worst:.4}, {:.1}s",
            t.as_secs_f64()
        ),
    )
}

fn equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let g = GenConfig {
        seed: 61,
        ..GenConfig::default()
    };
    let ds = generate(&g, EQUIV_CASES).expect("scenarios");
    let mc = ModelConfig {
        n_uav: g.n_uav,
        area_half: g.area_half,
    };
    let mut worst = 0.0f64;
    for s in &ds.items {
        let params = GnnParams::init(Architecture::default(), rng.random());
        let mut perm: Vec<usize> = (0..s.n_d2d()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let a = forward(s, &params, &mc).expect("forward");
        let b = forward(&s.permute_d2d(&perm), &params, &mc).expect("forward");
        let pa = a.permute_d2d(&perm);
        let diffs = a
            .uav_xy
            .iter()
            .zip(&b.uav_xy)
            .flat_map(|(x, y)| [x[0] - y[0], x[1] - y[1]])
            .chain(a.p_uav.iter().zip(&b.p_uav).map(|(x, y)| x - y))
            .chain(pa.p_d2d.iter().zip(&b.p_d2d).map(|(x, y)| x - y));
        for d in diffs {
            worst = worst.max(d.abs());
        }
    }
    outcome(
        worst <= EQUIV_TOL,
        format!("{EQUIV_CASES} scenarios, max output deviation {worst:.2e} (tol {EQUIV_TOL:e})"),
    )
}

fn qos() -> Outcome {
    let t = trained();
    let frac = t.report.qos_satisfied;
    let r_min = t.test.meta.constants.r_min;
    outcome(
        frac >= QOS_FRACTION,
        format!(
            "{:.1}% of test scenarios meet every D2D rate >= {r_min} (need {:.0}%), alpha {}, mean violations {:.3}",
            100.0 * frac,
            100.0 * QOS_FRACTION,
            t.alpha,
            t.report.mean_violations
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("graph_structure", graph_structure),
        ("gradient_check", gradient_check),
        ("loss_consistency", loss_consistency),
        ("output_ranges", output_ranges),
        ("convergence", convergence),
        ("scheme_ordering", scheme_ordering),
        ("m_trend", m_trend),
        ("n_trend", n_trend),
        ("oracle_agreement", oracle_agreement),
        ("equivariance", equivariance),
        ("qos", qos),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in &criteria {
            println!("{name}: test");
        }
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let label = format!("{:>2} {name}", i + 1);
        match catch_unwind(AssertUnwindSafe(run)) {
            Ok(o) => {
                println!("{} {label}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
                if !o.pass {
                    failed.push(label);
                }
            }
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| e.downcast_ref::<&str>().copied())
                    .unwrap_or("panic");
                println!("FAIL {label}: aborted: {msg}");
                failed.push(label);
            }
        }
    }
    if !failed.is_empty() {
        println!("{} criteria failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
}
