//! Shared experiment plumbing: scheme dispatch, metrics CSV, dataset pairs,
//! parameter sweeps and gradient checks.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{FdReport, finite_diff_check};
use crate::baselines::{
    AoConfig, BaselineError, GRID_CAP, GridConfig, Instance, alternating_optimization, fixed_power, grid_oracle,
    grid_size, random_deployment,
};
use crate::gnn::{Architecture, GnnError, GnnParams, ModelConfig, forward_graph};
use crate::physics::{Decisions, PhysicsError, Scenario};
use crate::scenario::{Dataset, DatasetError, GenConfig, generate};
use crate::training::{
    EvalReport, TrainConfig, TrainError, TrainHistory, evaluate_with, loss_and_grad, model_config, prepare, train,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("scheme `gnn` needs trained parameters")]
    MissingParams,
    #[error("sweep values must be strictly ascending and non-empty")]
    SweepValues,
    #[error("sweep value {0} is not a valid count for this axis")]
    SweepValue(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Gnn,
    Random,
    FixedPower,
    Ao,
    Oracle,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Gnn,
        Scheme::Random,
        Scheme::FixedPower,
        Scheme::Ao,
        Scheme::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Gnn => "gnn",
            Scheme::Random => "random",
            Scheme::FixedPower => "fixed_power",
            Scheme::Ao => "ao",
            Scheme::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown scheme `{s}` (expected gnn, random, fixed_power, ao or oracle)"))
    }
}

/// Everything a scheme may need besides the dataset.
#[derive(Debug, Clone, Copy)]
pub struct SchemeContext<'a> {
    pub params: Option<&'a GnnParams>,
    pub ao: &'a AoConfig,
    pub grid: &'a GridConfig,
    pub alpha: f64,
    /// Base seed of the random deployment; scenario `i` uses `seed + i`.
    pub seed: u64,
}

fn instance<'a>(s: &'a Scenario, mc: &ModelConfig, alpha: f64) -> Instance<'a> {
    Instance {
        scenario: s,
        n_uav: mc.n_uav,
        area_half: mc.area_half,
        alpha,
    }
}

/// Decisions of `scheme` on every scenario of `ds` and their metrics.
pub fn run_scheme(
    scheme: Scheme,
    ds: &Dataset,
    ctx: &SchemeContext<'_>,
) -> Result<(Vec<Decisions>, EvalReport), ExperimentError> {
    let mc = model_config(ds);
    if scheme == Scheme::Oracle
        && let Some(s) = ds.items.first()
    {
        // every scenario of a dataset has the same size
        let combos = grid_size(&instance(s, &mc, ctx.alpha), ctx.grid);
        if combos > GRID_CAP {
            return Err(BaselineError::TooLarge { combos, cap: GRID_CAP }.into());
        }
    }
    if scheme == Scheme::Gnn && ctx.params.is_none() {
        return Err(ExperimentError::MissingParams);
    }
    let out = match scheme {
        Scheme::Gnn => {
            let p = ctx.params.expect("checked above");
            evaluate_with::<ExperimentError, _>(ds, ctx.alpha, |_, s| Ok(crate::gnn::forward(s, p, &mc)?))?
        }
        Scheme::Random => evaluate_with::<ExperimentError, _>(ds, ctx.alpha, |i, s| {
            Ok(random_deployment(
                instance(s, &mc, ctx.alpha),
                ctx.seed.wrapping_add(i as u64),
                ctx.ao,
            )?)
        })?,
        Scheme::FixedPower => evaluate_with::<ExperimentError, _>(ds, ctx.alpha, |_, s| {
            Ok(fixed_power(instance(s, &mc, ctx.alpha), ctx.ao)?)
        })?,
        Scheme::Ao => evaluate_with::<ExperimentError, _>(ds, ctx.alpha, |_, s| {
            Ok(alternating_optimization(instance(s, &mc, ctx.alpha), ctx.ao)?)
        })?,
        Scheme::Oracle => evaluate_with::<ExperimentError, _>(ds, ctx.alpha, |_, s| {
            Ok(grid_oracle(instance(s, &mc, ctx.alpha), ctx.grid)?)
        })?,
    };
    Ok(out)
}

pub const METRICS_HEADER: &str = "scheme,id,du_sum_rate,min_d2d_rate,violations,penalized_loss";

/// One row per scenario followed by a `mean` row, under `#` provenance
/// lines. Scenario ids are dataset positions, so files of different
/// schemes on the same dataset pair up row by row.
pub fn write_metrics_csv<W: Write>(
    mut w: W,
    scheme: Scheme,
    report: &EvalReport,
    provenance: &[String],
) -> std::io::Result<()> {
    for line in provenance {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "{METRICS_HEADER}")?;
    for (i, m) in report.per_scenario.iter().enumerate() {
        writeln!(
            w,
            "{scheme},{i},{:?},{:?},{},{:?}",
            m.du_sum_rate, m.min_d2d_rate, m.violations, m.penalized_loss
        )?;
    }
    writeln!(
        w,
        "{scheme},mean,{:?},{:?},{:?},{:?}",
        report.mean_sum_rate, report.mean_min_d2d_rate, report.mean_violations, report.mean_loss
    )
}

/// Seed offset separating a test set from its training set.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

/// Training and test sets drawn from the same generator with disjoint
/// seeds.
pub fn dataset_pair(
    generator: &GenConfig,
    n_train: usize,
    n_test: usize,
) -> Result<(Dataset, Dataset), ExperimentError> {
    let train = generate(generator, n_train)?;
    let test = generate(
        &GenConfig {
            seed: generator.seed.wrapping_add(TEST_SEED_OFFSET),
            ..generator.clone()
        },
        n_test,
    )?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Number of D2D pairs.
    M,
    /// Number of UAVs.
    N,
}

impl FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "M" | "m" => Ok(Axis::M),
            "N" | "n" => Ok(Axis::N),
            _ => Err(format!("unknown sweep axis `{s}` (expected M or N)")),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::M => "M",
            Axis::N => "N",
        })
    }
}

/// Inputs of one sweep.
#[derive(Debug, Clone)]
pub struct SweepSpec<'a> {
    pub axis: Axis,
    pub values: &'a [usize],
    pub generator: &'a GenConfig,
    pub train: &'a TrainConfig,
    pub ao: &'a AoConfig,
    pub grid: &'a GridConfig,
    pub arch: &'a Architecture,
    pub n_train: usize,
    pub n_test: usize,
    /// Schemes evaluated at every point besides the network.
    pub baselines: &'a [Scheme],
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: usize,
    pub generator: GenConfig,
    pub history: TrainHistory,
    /// Scheme and its report, the network first.
    pub reports: Vec<(Scheme, EvalReport)>,
}

impl SweepPoint {
    pub fn report(&self, scheme: Scheme) -> Option<&EvalReport> {
        self.reports.iter().find(|(s, _)| *s == scheme).map(|(_, r)| r)
    }
}

/// Generator config of one sweep point. Each point gets its own seed so
/// points are reproducible independently of each other.
pub fn sweep_gen(base: &GenConfig, axis: Axis, value: usize) -> GenConfig {
    let mut g = base.clone();
    match axis {
        Axis::M => g.n_d2d = value,
        Axis::N => g.n_uav = value,
    }
    g.seed = base.seed.wrapping_add(7919 * value as u64);
    g
}

/// Regenerates data, trains a fresh network and evaluates every scheme at
/// each value, in ascending order. `observe` sees each finished point.
pub fn sweep<F>(spec: &SweepSpec<'_>, mut observe: F) -> Result<Vec<SweepPoint>, ExperimentError>
where
    F: FnMut(&SweepPoint),
{
    if spec.values.is_empty() || spec.values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ExperimentError::SweepValues);
    }
    let mut out = Vec::with_capacity(spec.values.len());
    for &value in spec.values {
        if spec.axis == Axis::N && value == 0 {
            return Err(ExperimentError::SweepValue(value));
        }
        let generator = sweep_gen(spec.generator, spec.axis, value);
        let (tr, te) = dataset_pair(&generator, spec.n_train, spec.n_test)?;
        let (params, history) = train(&tr, &te, spec.arch.clone(), spec.train)?;
        let ctx = SchemeContext {
            params: Some(&params),
            ao: spec.ao,
            grid: spec.grid,
            alpha: spec.train.alpha,
            seed: generator.seed,
        };
        let mut reports = Vec::new();
        for &scheme in std::iter::once(&Scheme::Gnn).chain(spec.baselines) {
            let (_, r) = run_scheme(scheme, &te, &ctx)?;
            reports.push((scheme, r));
        }
        let point = SweepPoint {
            value,
            generator,
            history,
            reports,
        };
        observe(&point);
        out.push(point);
    }
    Ok(out)
}

/// Wide CSV: one row per sweep value with mean sum rate and QoS fraction
/// of every scheme, plus the config hash of the point.
pub fn write_sweep_csv<W: Write>(
    mut w: W,
    axis: Axis,
    points: &[SweepPoint],
    hashes: &[String],
    provenance: &[String],
) -> std::io::Result<()> {
    for line in provenance {
        writeln!(w, "# {line}")?;
    }
    let schemes: Vec<Scheme> = points
        .first()
        .map(|p| p.reports.iter().map(|(s, _)| *s).collect())
        .unwrap_or_default();
    write!(w, "axis,value,n_uav,n_du,n_d2d")?;
    for s in &schemes {
        write!(w, ",{s}_sum_rate,{s}_sum_rate_std,{s}_qos_satisfied")?;
    }
    writeln!(w, ",config_hash")?;
    for (p, h) in points.iter().zip(hashes) {
        write!(
            w,
            "{axis},{},{},{},{}",
            p.value, p.generator.n_uav, p.generator.n_du, p.generator.n_d2d
        )?;
        for (_, r) in &p.reports {
            write!(w, ",{:?},{:?},{:?}", r.mean_sum_rate, r.std_sum_rate, r.qos_satisfied)?;
        }
        writeln!(w, ",{h}")?;
    }
    Ok(())
}

/// Gradient-check settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub scenarios: usize,
    /// Parameters compared per scenario.
    pub params_per_scenario: usize,
    pub eps: f64,
    /// Largest acceptable relative error.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            scenarios: 5,
            params_per_scenario: 200,
            eps: 1e-4,
            threshold: 1e-4,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub per_scenario: Vec<FdReport>,
    pub max_rel_err: f64,
    /// Coordinates compared, summed over scenarios.
    pub checked: usize,
    pub excluded: usize,
    /// Parameter blocks with their number of compared coordinates.
    pub blocks: Vec<(String, usize)>,
}

/// Autodiff gradient of the penalized loss through the whole network
/// against central differences, on random scenarios and random parameters.
pub fn gradcheck(
    generator: &GenConfig,
    arch: &Architecture,
    alpha: f64,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport, ExperimentError> {
    let ds = generate(
        &GenConfig {
            seed: cfg.seed,
            ..generator.clone()
        },
        cfg.scenarios,
    )?;
    let preps = prepare(&ds)?;
    let ah = ds.meta.area_half;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = crate::gnn::Layout::new(arch);
    let mut block_counts = vec![0usize; layout.blocks().len()];
    let mut per_scenario = Vec::new();
    for prep in &preps {
        let mut params = GnnParams::init(arch.clone(), rng.random());
        // nonzero biases so bias gradients are exercised away from zero
        for v in &mut params.values {
            *v += rng.random_range(-0.05..0.05);
        }
        let (_, grad) = loss_and_grad(prep, &params, ah, alpha)?;
        let k = cfg.params_per_scenario.min(params.len());
        let mut coords = sample(&mut rng, params.len(), k).into_vec();
        coords.sort_unstable();
        let c = &prep.physics.scenario.constants;
        let f = |x: &[f64]| {
            prep.physics
                .penalized_loss(&forward_graph(&params.layout, &prep.graph, x, c, ah), alpha)
        };
        let rep = finite_diff_check(f, &params.values, &grad, cfg.eps, &coords);
        for &i in &rep.checked {
            let name = &layout.block_of(i).name;
            let b = layout.blocks().iter().position(|b| &b.name == name).expect("own block");
            block_counts[b] += 1;
        }
        per_scenario.push(rep);
    }
    Ok(GradcheckReport {
        max_rel_err: per_scenario.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
        checked: per_scenario.iter().map(|r| r.checked.len()).sum(),
        excluded: per_scenario.iter().map(|r| r.excluded.len()).sum(),
        blocks: layout
            .blocks()
            .iter()
            .zip(block_counts)
            .map(|(b, n)| (b.name.clone(), n))
            .collect(),
        per_scenario,
    })
}
