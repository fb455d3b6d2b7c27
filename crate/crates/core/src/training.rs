//! Unsupervised training with Adam and dataset-level evaluation.
//!
//! The training loss of a scenario is the penalized loss of the decisions
//! the network emits, computed by [`Physics::penalized_loss`] on traced
//! values; a batch loss is the mean over its scenarios.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Trace};
use crate::gnn::{Architecture, GnnError, GnnParams, Layout, ModelConfig, forward_graph, scenario_graph};
use crate::graph::InterferenceGraph;
use crate::physics::{Decisions, Physics, PhysicsError, Scenario, ScenarioMetrics};
use crate::scenario::Dataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },
    #[error("training diverged at iteration {iter}: loss {loss} vs initial {initial}")]
    Diverged { iter: usize, loss: f64, initial: f64 },
    #[error("datasets disagree: {0}")]
    DatasetMismatch(String),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Weight of the QoS penalty.
    pub alpha: f64,
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            alpha: 10.0,
            iters: 500,
            batch: 16,
            seed: 1,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, reason: &str| {
            Err(TrainError::Config {
                field,
                reason: reason.into(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps_adam > 0.0) {
            return bad("eps_adam", "must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be non-negative");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1");
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when a gradient
/// entry is non-finite.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
    layout: Option<&Layout>,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let block = layout.map_or_else(|| format!("index {i}"), |l| l.block_of(i).name.clone());
        return Err(TrainError::NonFiniteGradient { block });
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps_adam);
    }
    Ok(())
}

/// A scenario with its graph and ground channels precomputed.
pub struct Prepared<'a> {
    pub physics: Physics<'a>,
    pub graph: InterferenceGraph,
}

pub fn prepare<'a>(ds: &'a Dataset) -> Result<Vec<Prepared<'a>>, TrainError> {
    let cfg = model_config(ds);
    ds.items
        .iter()
        .map(|s| {
            Ok(Prepared {
                physics: Physics::new(s)?,
                graph: scenario_graph(s, &cfg)?,
            })
        })
        .collect()
}

pub fn model_config(ds: &Dataset) -> ModelConfig {
    ModelConfig {
        n_uav: ds.meta.n_uav,
        area_half: ds.meta.area_half,
    }
}

/// Penalized loss of one scenario and its gradient with respect to every
/// parameter.
pub fn loss_and_grad(
    prep: &Prepared<'_>,
    params: &GnnParams,
    area_half: f64,
    alpha: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    let trace = Trace::new();
    let vars = trace.leaves(&params.values);
    let c = &prep.physics.scenario.constants;
    let d = forward_graph(&params.layout, &prep.graph, &vars, c, area_half);
    let loss = prep.physics.penalized_loss(&d, alpha);
    let grads = trace.backward(loss)?;
    Ok((loss.val(), grads.wrt_all(&vars)))
}

/// Plain-number decisions for a prepared scenario.
pub fn decide(prep: &Prepared<'_>, params: &GnnParams, area_half: f64) -> Decisions {
    forward_graph(
        &params.layout,
        &prep.graph,
        &params.values,
        &prep.physics.scenario.constants,
        area_half,
    )
}

/// Mean loss and gradient over `batch`, accumulated in batch order.
pub fn batch_loss_and_grad(
    preps: &[Prepared<'_>],
    batch: &[usize],
    params: &GnnParams,
    area_half: f64,
    alpha: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|&i| loss_and_grad(&preps[i], params, area_half, alpha))
        .collect::<Result<_, _>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (l, g) in parts {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    for g in &mut grad {
        *g *= scale;
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub iter: usize,
    /// Mean penalized loss over the whole training set.
    pub train_loss: f64,
    pub test_sum_rate: f64,
    /// Mean number of QoS violations per test scenario.
    pub violations: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "iter,train_loss,test_sum_rate,violations,seconds";

    /// CSV with `#`-prefixed provenance lines before the header.
    pub fn write_csv<W: Write>(&self, mut w: W, provenance: &[String]) -> std::io::Result<()> {
        for line in provenance {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:?},{:?},{:?},{:.3}",
                r.iter, r.train_loss, r.test_sum_rate, r.violations, r.seconds
            )?;
        }
        Ok(())
    }
}

/// Aggregate metrics of one set of decisions over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_scenario: Vec<ScenarioMetrics>,
    pub mean_sum_rate: f64,
    pub std_sum_rate: f64,
    pub mean_violations: f64,
    /// Fraction of scenarios with every D2D rate at or above `R_min`.
    pub qos_satisfied: f64,
    pub mean_min_d2d_rate: f64,
    pub mean_loss: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    if n == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(per_scenario: Vec<ScenarioMetrics>) -> EvalReport {
    let (mean_sum_rate, std_sum_rate) = mean_std(per_scenario.iter().map(|m| m.du_sum_rate));
    let (mean_violations, _) = mean_std(per_scenario.iter().map(|m| m.violations as f64));
    let (qos_satisfied, _) = mean_std(per_scenario.iter().map(|m| (m.violations == 0) as u8 as f64));
    // scenarios without D2D pairs have no minimum rate
    let (mean_min_d2d_rate, _) = mean_std(per_scenario.iter().map(|m| m.min_d2d_rate).filter(|r| !r.is_nan()));
    let (mean_loss, _) = mean_std(per_scenario.iter().map(|m| m.penalized_loss));
    EvalReport {
        per_scenario,
        mean_sum_rate,
        std_sum_rate,
        mean_violations,
        qos_satisfied,
        mean_min_d2d_rate,
        mean_loss,
    }
}

/// Metrics of the decisions produced by `decide` on every scenario.
pub fn evaluate_with<E, F>(ds: &Dataset, alpha: f64, decide: F) -> Result<(Vec<Decisions>, EvalReport), E>
where
    E: From<PhysicsError> + Send,
    F: Fn(usize, &Scenario) -> Result<Decisions, E> + Sync,
{
    let out: Vec<(Decisions, ScenarioMetrics)> = ds
        .items
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let d = decide(i, s)?;
            let m = Physics::new(s)?.metrics(&d, alpha);
            Ok((d, m))
        })
        .collect::<Result<_, E>>()?;
    let (decisions, metrics): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok((decisions, summarize(metrics)))
}

/// Metrics of the network's decisions on `ds`.
pub fn evaluate(params: &GnnParams, ds: &Dataset, alpha: f64) -> Result<EvalReport, TrainError> {
    let cfg = model_config(ds);
    let (_, report) = evaluate_with::<TrainError, _>(ds, alpha, |_, s| Ok(crate::gnn::forward(s, params, &cfg)?))?;
    Ok(report)
}

fn evaluate_prepared(preps: &[Prepared<'_>], params: &GnnParams, area_half: f64, alpha: f64) -> EvalReport {
    let metrics: Vec<ScenarioMetrics> = preps
        .par_iter()
        .map(|p| p.physics.metrics(&decide(p, params, area_half), alpha))
        .collect();
    summarize(metrics)
}

/// Fails when the loss is non-finite or has grown by more than ten times
/// the magnitude of its initial value (floored at 1, since the loss is
/// usually negative).
pub fn divergence_guard(iter: usize, loss: f64, initial: f64) -> Result<(), TrainError> {
    if !loss.is_finite() || loss - initial > 10.0 * initial.abs().max(1.0) {
        return Err(TrainError::Diverged { iter, loss, initial });
    }
    Ok(())
}

fn check_compatible(a: &Dataset, b: &Dataset) -> Result<(), TrainError> {
    let (x, y) = (&a.meta, &b.meta);
    if (x.n_uav, x.n_du, x.n_d2d) != (y.n_uav, y.n_du, y.n_d2d) {
        return Err(TrainError::DatasetMismatch(format!(
            "counts N,K,M = {},{},{} vs {},{},{}",
            x.n_uav, x.n_du, x.n_d2d, y.n_uav, y.n_du, y.n_d2d
        )));
    }
    if x.constants != y.constants {
        return Err(TrainError::DatasetMismatch("physical constants differ".into()));
    }
    if x.area_half != y.area_half {
        return Err(TrainError::DatasetMismatch("deployment areas differ".into()));
    }
    Ok(())
}

/// Trains a freshly initialised network.
pub fn train(
    train_ds: &Dataset,
    test_ds: &Dataset,
    arch: Architecture,
    cfg: &TrainConfig,
) -> Result<(GnnParams, TrainHistory), TrainError> {
    let init = GnnParams::init(arch, cfg.seed);
    train_from(init, train_ds, test_ds, cfg, |_| {})
}

/// Trains starting from `params`, calling `observe` on every history row.
pub fn train_from<F>(
    mut params: GnnParams,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<(GnnParams, TrainHistory), TrainError>
where
    F: FnMut(&HistoryRow),
{
    cfg.validate()?;
    check_compatible(train_ds, test_ds)?;
    let area_half = train_ds.meta.area_half;
    let train_p = prepare(train_ds)?;
    let test_p = prepare(test_ds)?;
    let start = Instant::now();
    let mut history = TrainHistory::default();
    let mut state = AdamState::new(params.len());
    // the sampler stream is independent of the initialisation stream
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c_4000_0001);
    let mut order: Vec<usize> = (0..train_p.len()).collect();
    let mut cursor = order.len();
    let mut initial_loss = None;

    let mut record = |iter: usize, params: &GnnParams, history: &mut TrainHistory| -> Result<(), TrainError> {
        let tr = evaluate_prepared(&train_p, params, area_half, cfg.alpha);
        let te = evaluate_prepared(&test_p, params, area_half, cfg.alpha);
        let row = HistoryRow {
            iter,
            train_loss: tr.mean_loss,
            test_sum_rate: te.mean_sum_rate,
            violations: te.mean_violations,
            seconds: start.elapsed().as_secs_f64(),
        };
        let initial = *initial_loss.get_or_insert(row.train_loss);
        divergence_guard(iter, row.train_loss, initial)?;
        observe(&row);
        history.rows.push(row);
        Ok(())
    };

    if train_p.is_empty() {
        return Ok((params, history));
    }
    record(0, &params, &mut history)?;
    let mut batch = Vec::with_capacity(cfg.batch);
    for iter in 1..=cfg.iters {
        batch.clear();
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (_, grad) = batch_loss_and_grad(&train_p, &batch, &params, area_half, cfg.alpha)?;
        adam_step(&mut params.values, &grad, &mut state, cfg, Some(&params.layout))?;
        if iter % cfg.eval_every == 0 || iter == cfg.iters {
            record(iter, &params, &mut history)?;
        }
    }
    Ok((params, history))
}
