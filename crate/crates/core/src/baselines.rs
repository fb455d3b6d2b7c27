//! Comparison schemes: alternating optimisation, random deployment, fixed
//! power, and an exhaustive grid search for tiny instances.
//!
//! Every scheme maximises the same objective the network is trained on,
//! `-penalized_loss`, with the same α and `R_min`.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Trace, Var};
use crate::graph::InitDeployment;
use crate::physics::{Decisions, Physics, PhysicsError, Scenario};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid baseline config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("grid search needs {combos:.3e} evaluations, above the cap of {cap:.0e}")]
    TooLarge { combos: f64, cap: f64 },
    #[error("objective became non-finite ({value}) at outer iteration {outer}")]
    NonFinite { outer: usize, value: f64 },
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Largest number of grid points [`grid_oracle`] will enumerate.
pub const GRID_CAP: f64 = 1e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AoConfig {
    pub outer_iters: usize,
    /// Gradient steps per block and outer iteration.
    pub inner_steps: usize,
    /// Initial length of a position step (m).
    pub step_size_pos: f64,
    /// Initial length of a power-logit step.
    pub step_size_logit: f64,
    /// Stop once an outer iteration improves the objective by less.
    pub tolerance: f64,
    /// Extra seeded random starting deployments tried besides the two
    /// structured ones; the best end point is kept.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AoConfig {
    fn default() -> Self {
        Self {
            outer_iters: 20,
            inner_steps: 10,
            step_size_pos: 4.0,
            step_size_logit: 1.0,
            tolerance: 1e-6,
            restarts: 4,
            seed: 7,
        }
    }
}

impl AoConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let bad = |field, reason: &str| {
            Err(BaselineError::Config {
                field,
                reason: reason.into(),
            })
        };
        if self.outer_iters == 0 {
            return bad("outer_iters", "must be positive");
        }
        if self.inner_steps == 0 {
            return bad("inner_steps", "must be positive");
        }
        if !(self.step_size_pos > 0.0 && self.step_size_pos.is_finite()) {
            return bad("step_size_pos", "must be positive");
        }
        if !(self.step_size_logit > 0.0 && self.step_size_logit.is_finite()) {
            return bad("step_size_logit", "must be positive");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Grid points per axis for each UAV.
    pub pos_resolution: usize,
    /// Power grid size per transmitter; level `l` is `cap·l/L`.
    pub power_levels: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            pos_resolution: 21,
            power_levels: 8,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.pos_resolution < 2 {
            return Err(BaselineError::Config {
                field: "pos_resolution",
                reason: "must be at least 2".into(),
            });
        }
        if self.power_levels < 2 {
            return Err(BaselineError::Config {
                field: "power_levels",
                reason: "must be at least 2".into(),
            });
        }
        Ok(())
    }
}

/// A scenario with the deployment context the baselines need.
#[derive(Debug, Clone, Copy)]
pub struct Instance<'a> {
    pub scenario: &'a Scenario,
    pub n_uav: usize,
    pub area_half: f64,
    /// QoS penalty weight of the shared objective.
    pub alpha: f64,
}

/// Result of an AO run.
#[derive(Debug, Clone, PartialEq)]
pub struct AoOutcome {
    pub decisions: Decisions,
    /// Objective after initialisation and after every outer iteration.
    pub objective: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Position,
    Power,
}

struct Ao<'a> {
    physics: Physics<'a>,
    inst: Instance<'a>,
    cfg: &'a AoConfig,
    pos: Vec<[f64; 2]>,
    // p_uav logits then p_d2d logits
    logits: Vec<f64>,
    fixed_caps: bool,
}

/// Logit used for "at the cap" starting points; σ(6) ≈ 0.9975.
const START_LOGIT: f64 = 6.0;

impl<'a> Ao<'a> {
    fn new(inst: Instance<'a>, cfg: &'a AoConfig, pos: Vec<[f64; 2]>, fixed_caps: bool) -> Result<Self, BaselineError> {
        cfg.validate()?;
        let physics = Physics::new(inst.scenario)?;
        let ah = inst.area_half;
        let pos = pos
            .into_iter()
            .map(|[x, y]| [x.clamp(-ah, ah), y.clamp(-ah, ah)])
            .collect();
        Ok(Self {
            physics,
            inst,
            cfg,
            pos,
            logits: vec![START_LOGIT; inst.n_uav + inst.scenario.n_d2d()],
            fixed_caps,
        })
    }

    fn decisions<S: Scalar>(&self, pos: &[[S; 2]], logits: &[S]) -> Decisions<S> {
        let c = &self.inst.scenario.constants;
        let n = self.inst.n_uav;
        if self.fixed_caps {
            return Decisions {
                uav_xy: pos.to_vec(),
                p_uav: vec![S::cst(c.p_max_uav_w); n],
                p_d2d: vec![S::cst(c.p_max_d2d_w); self.inst.scenario.n_d2d()],
            };
        }
        Decisions {
            uav_xy: pos.to_vec(),
            p_uav: logits[..n].iter().map(|&l| l.sigmoid() * c.p_max_uav_w).collect(),
            p_d2d: logits[n..].iter().map(|&l| l.sigmoid() * c.p_max_d2d_w).collect(),
        }
    }

    fn objective(&self, pos: &[[f64; 2]], logits: &[f64]) -> f64 {
        -self
            .physics
            .penalized_loss(&self.decisions(pos, logits), self.inst.alpha)
    }

    fn current(&self) -> f64 {
        self.objective(&self.pos, &self.logits)
    }

    /// Gradient of the objective with respect to one block, flattened.
    fn gradient(&self, block: Block) -> Result<Vec<f64>, BaselineError> {
        let t = Trace::new();
        let (pos, logits): (Vec<[Var<'_>; 2]>, Vec<Var<'_>>) = match block {
            Block::Position => (
                self.pos.iter().map(|&[x, y]| [t.leaf(x), t.leaf(y)]).collect(),
                self.logits.iter().map(|&l| Var::constant(l)).collect(),
            ),
            Block::Power => (
                self.pos
                    .iter()
                    .map(|&[x, y]| [Var::constant(x), Var::constant(y)])
                    .collect(),
                t.leaves(&self.logits),
            ),
        };
        let obj = -self
            .physics
            .penalized_loss(&self.decisions(&pos, &logits), self.inst.alpha);
        let g = t.backward(obj)?;
        Ok(match block {
            Block::Position => pos.iter().flat_map(|p| [g.wrt(p[0]), g.wrt(p[1])]).collect(),
            Block::Power => g.wrt_all(&logits),
        })
    }

    /// Normalised gradient steps on one block with backtracking; a step is
    /// kept only if it raises the objective.
    fn ascend(&mut self, block: Block, mut f: f64) -> Result<f64, BaselineError> {
        let ah = self.inst.area_half;
        let mut step = match block {
            Block::Position => self.cfg.step_size_pos,
            Block::Power => self.cfg.step_size_logit,
        };
        let min_step = step * 1e-4;
        for _ in 0..self.cfg.inner_steps {
            let g = self.gradient(block)?;
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                break;
            }
            let mut accepted = false;
            while step >= min_step {
                let scale = step / norm;
                let (pos, logits) = match block {
                    Block::Position => {
                        let pos: Vec<[f64; 2]> = self
                            .pos
                            .iter()
                            .enumerate()
                            .map(|(n, &[x, y])| {
                                [
                                    (x + scale * g[2 * n]).clamp(-ah, ah),
                                    (y + scale * g[2 * n + 1]).clamp(-ah, ah),
                                ]
                            })
                            .collect();
                        (pos, self.logits.clone())
                    }
                    Block::Power => {
                        let logits = self.logits.iter().zip(&g).map(|(l, d)| l + scale * d).collect();
                        (self.pos.clone(), logits)
                    }
                };
                let cand = self.objective(&pos, &logits);
                if cand > f {
                    self.pos = pos;
                    self.logits = logits;
                    f = cand;
                    accepted = true;
                    step *= 1.5;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(f)
    }

    fn run(mut self, blocks: &[Block]) -> Result<AoOutcome, BaselineError> {
        let mut f = self.current();
        if !f.is_finite() {
            return Err(BaselineError::NonFinite { outer: 0, value: f });
        }
        let mut trace = vec![f];
        for outer in 1..=self.cfg.outer_iters {
            let before = f;
            for &b in blocks {
                f = self.ascend(b, f)?;
            }
            if !f.is_finite() {
                return Err(BaselineError::NonFinite { outer, value: f });
            }
            trace.push(f);
            if f - before < self.cfg.tolerance {
                break;
            }
        }
        let decisions = self.decisions(&self.pos, &self.logits);
        Ok(AoOutcome {
            decisions,
            objective: trace,
        })
    }
}

/// Starting deployments: the circle around the DU centroid, one UAV above
/// each DU (cycling when N > K), then `cfg.restarts` uniform draws.
fn starts(inst: &Instance<'_>, cfg: &AoConfig) -> Vec<Vec<[f64; 2]>> {
    let s = inst.scenario;
    let mut out = vec![InitDeployment::default_for(s, inst.n_uav, inst.area_half).uav_xy];
    if s.n_du() > 0 {
        out.push((0..inst.n_uav).map(|n| s.du_xy[n % s.n_du()]).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ah = inst.area_half;
    for _ in 0..cfg.restarts {
        out.push(
            (0..inst.n_uav)
                .map(|_| [rng.random_range(-ah..=ah), rng.random_range(-ah..=ah)])
                .collect(),
        );
    }
    out
}

fn best_of(inst: Instance<'_>, cfg: &AoConfig, fixed_caps: bool, blocks: &[Block]) -> Result<AoOutcome, BaselineError> {
    let mut best: Option<AoOutcome> = None;
    for pos in starts(&inst, cfg) {
        let out = Ao::new(inst, cfg, pos, fixed_caps)?.run(blocks)?;
        let f = *out.objective.last().expect("trace starts non-empty");
        if best
            .as_ref()
            .is_none_or(|b| f > *b.objective.last().expect("non-empty"))
        {
            best = Some(out);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Joint optimisation alternating between the position block and the
/// power block, run from every starting deployment; returns the best run.
pub fn alternating_optimization_trace(inst: Instance<'_>, cfg: &AoConfig) -> Result<AoOutcome, BaselineError> {
    best_of(inst, cfg, false, &[Block::Position, Block::Power])
}

pub fn alternating_optimization(inst: Instance<'_>, cfg: &AoConfig) -> Result<Decisions, BaselineError> {
    Ok(alternating_optimization_trace(inst, cfg)?.decisions)
}

/// Uniformly random UAV positions; powers then optimised with the
/// positions frozen.
pub fn random_deployment(inst: Instance<'_>, seed: u64, cfg: &AoConfig) -> Result<Decisions, BaselineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ah = inst.area_half;
    let pos = (0..inst.n_uav)
        .map(|_| [rng.random_range(-ah..=ah), rng.random_range(-ah..=ah)])
        .collect();
    Ok(Ao::new(inst, cfg, pos, false)?.run(&[Block::Power])?.decisions)
}

/// Every transmitter at its cap; UAV positions optimised.
pub fn fixed_power(inst: Instance<'_>, cfg: &AoConfig) -> Result<Decisions, BaselineError> {
    Ok(best_of(inst, cfg, true, &[Block::Position])?.decisions)
}

/// Number of points [`grid_oracle`] would evaluate.
pub fn grid_size(inst: &Instance<'_>, cfg: &GridConfig) -> f64 {
    let pos = (cfg.pos_resolution as f64).powi(2 * inst.n_uav as i32);
    let pw = (cfg.power_levels as f64).powi((inst.n_uav + inst.scenario.n_d2d()) as i32);
    pos * pw
}

/// Exhaustive argmax of the objective over a position and power grid.
/// Ties keep the first point in enumeration order.
pub fn grid_oracle(inst: Instance<'_>, cfg: &GridConfig) -> Result<Decisions, BaselineError> {
    cfg.validate()?;
    let combos = grid_size(&inst, cfg);
    if combos > GRID_CAP {
        return Err(BaselineError::TooLarge { combos, cap: GRID_CAP });
    }
    let physics = Physics::new(inst.scenario)?;
    let c = &inst.scenario.constants;
    let (n, m) = (inst.n_uav, inst.scenario.n_d2d());
    let res = cfg.pos_resolution;
    let levels = cfg.power_levels;
    let coord = |i: usize| -inst.area_half + 2.0 * inst.area_half * i as f64 / (res - 1) as f64;
    let level = |l: usize| (l + 1) as f64 / levels as f64;

    // mixed-radix counters over 2N position indices and N + M power indices
    let radices: Vec<usize> = std::iter::repeat_n(res, 2 * n)
        .chain(std::iter::repeat_n(levels, n + m))
        .collect();
    let mut digits = vec![0usize; radices.len()];
    let mut d = Decisions {
        uav_xy: vec![[0.0; 2]; n],
        p_uav: vec![0.0; n],
        p_d2d: vec![0.0; m],
    };
    let mut best: Option<(f64, Decisions)> = None;
    loop {
        for u in 0..n {
            d.uav_xy[u] = [coord(digits[2 * u]), coord(digits[2 * u + 1])];
            d.p_uav[u] = c.p_max_uav_w * level(digits[2 * n + u]);
        }
        for k in 0..m {
            d.p_d2d[k] = c.p_max_d2d_w * level(digits[3 * n + k]);
        }
        let f = -physics.penalized_loss(&d, inst.alpha);
        if best.as_ref().is_none_or(|(b, _)| f > *b) {
            best = Some((f, d.clone()));
        }
        // increment, last digit fastest
        let mut i = digits.len();
        loop {
            if i == 0 {
                return Ok(best.expect("grid is non-empty").1);
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < radices[i] {
                break;
            }
            digits[i] = 0;
        }
    }
}

/// `-penalized_loss` of `d`.
pub fn objective(inst: &Instance<'_>, d: &Decisions) -> Result<f64, BaselineError> {
    Ok(-Physics::new(inst.scenario)?.penalized_loss(d, inst.alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::PhysConstants;
    use crate::scenario::{GenConfig, generate};

    fn tiny(seed: u64, m: usize) -> Scenario {
        let cfg = GenConfig {
            seed,
            n_uav: 1,
            n_du: 1,
            n_d2d: m,
            ..GenConfig::default()
        };
        generate(&cfg, 1).unwrap().items.remove(0)
    }

    fn inst(s: &Scenario, n_uav: usize) -> Instance<'_> {
        Instance {
            scenario: s,
            n_uav,
            area_half: 50.0,
            alpha: 10.0,
        }
    }

    fn table_scenario(seed: u64) -> Scenario {
        generate(
            &GenConfig {
                seed,
                ..GenConfig::default()
            },
            1,
        )
        .unwrap()
        .items
        .remove(0)
    }

    #[test]
    fn ao_objective_is_monotone() {
        for seed in 0..5 {
            let s = table_scenario(seed);
            let out = alternating_optimization_trace(inst(&s, 4), &AoConfig::default()).unwrap();
            for w in out.objective.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{:?}", out.objective);
            }
            let f = objective(&inst(&s, 4), &out.decisions).unwrap();
            assert_eq!(f, *out.objective.last().unwrap());
            out.decisions.validate(&s.constants).unwrap();
        }
    }

    #[test]
    fn ao_single_du_ends_above_it() {
        let s = tiny(3, 0);
        let out = alternating_optimization(inst(&s, 1), &AoConfig::default()).unwrap();
        let du = s.du_xy[0];
        let grid_step = 100.0 / 20.0;
        let off = ((out.uav_xy[0][0] - du[0]).powi(2) + (out.uav_xy[0][1] - du[1]).powi(2)).sqrt();
        assert!(off < grid_step, "offset {off}");
        assert!(out.p_uav[0] > 0.99 * s.constants.p_max_uav_w);
    }

    #[test]
    fn oracle_single_du_picks_nearest_point_at_full_power() {
        let s = tiny(4, 0);
        let cfg = GridConfig::default();
        let d = grid_oracle(inst(&s, 1), &cfg).unwrap();
        let du = s.du_xy[0];
        let nearest = |v: f64| ((v + 50.0) / 5.0).round() * 5.0 - 50.0;
        assert_eq!(d.uav_xy[0], [nearest(du[0]), nearest(du[1])]);
        assert_eq!(d.p_uav[0], s.constants.p_max_uav_w);
    }

    #[test]
    fn finer_grid_never_worse() {
        for seed in 0..4 {
            let s = tiny(seed, 1);
            let i = inst(&s, 1);
            let coarse = grid_oracle(
                i,
                &GridConfig {
                    pos_resolution: 5,
                    power_levels: 2,
                },
            )
            .unwrap();
            let fine = grid_oracle(
                i,
                &GridConfig {
                    pos_resolution: 9,
                    power_levels: 4,
                },
            )
            .unwrap();
            assert!(objective(&i, &fine).unwrap() >= objective(&i, &coarse).unwrap());
        }
    }

    #[test]
    fn oracle_is_argmax_of_grid() {
        let s = tiny(7, 1);
        let i = inst(&s, 1);
        let cfg = GridConfig {
            pos_resolution: 3,
            power_levels: 2,
        };
        let best = objective(&i, &grid_oracle(i, &cfg).unwrap()).unwrap();
        let c = &s.constants;
        for x in [-50.0, 0.0, 50.0] {
            for y in [-50.0, 0.0, 50.0] {
                for pu in [0.5, 1.0] {
                    for pd in [0.5, 1.0] {
                        let d = Decisions {
                            uav_xy: vec![[x, y]],
                            p_uav: vec![pu * c.p_max_uav_w],
                            p_d2d: vec![pd * c.p_max_d2d_w],
                        };
                        assert!(objective(&i, &d).unwrap() <= best);
                    }
                }
            }
        }
    }

    #[test]
    fn oracle_guard_rejects_large_grids() {
        let s = table_scenario(1);
        let err = grid_oracle(inst(&s, 4), &GridConfig::default()).unwrap_err();
        assert!(matches!(err, BaselineError::TooLarge { .. }));
        assert!(grid_size(&inst(&s, 4), &GridConfig::default()) > GRID_CAP);
    }

    #[test]
    fn fixed_power_uses_caps_and_helps_on_average() {
        let c = PhysConstants::default();
        let (mut opt, mut rnd) = (0.0, 0.0);
        for seed in 0..6 {
            let s = table_scenario(seed);
            let i = inst(&s, 4);
            let d = fixed_power(i, &AoConfig::default()).unwrap();
            assert!(d.p_uav.iter().all(|&p| p == c.p_max_uav_w));
            assert!(d.p_d2d.iter().all(|&p| p == c.p_max_d2d_w));
            opt += objective(&i, &d).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = Decisions {
                uav_xy: (0..4)
                    .map(|_| [rng.random_range(-50.0..=50.0), rng.random_range(-50.0..=50.0)])
                    .collect(),
                ..d
            };
            rnd += objective(&i, &r).unwrap();
        }
        assert!(opt >= rnd);
    }

    #[test]
    fn random_deployment_is_seeded_and_in_area() {
        let s = table_scenario(2);
        let i = inst(&s, 4);
        let a = random_deployment(i, 9, &AoConfig::default()).unwrap();
        assert_eq!(a, random_deployment(i, 9, &AoConfig::default()).unwrap());
        assert_ne!(a.uav_xy, random_deployment(i, 10, &AoConfig::default()).unwrap().uav_xy);
        for p in &a.uav_xy {
            assert!(p[0].abs() <= 50.0 && p[1].abs() <= 50.0);
        }
        a.validate(&s.constants).unwrap();
    }

    #[test]
    fn bad_configs_rejected() {
        let s = tiny(1, 1);
        let cfg = AoConfig {
            inner_steps: 0,
            ..AoConfig::default()
        };
        assert!(matches!(
            alternating_optimization(inst(&s, 1), &cfg),
            Err(BaselineError::Config {
                field: "inner_steps",
                ..
            })
        ));
        let g = GridConfig {
            pos_resolution: 1,
            power_levels: 8,
        };
        assert!(matches!(
            grid_oracle(inst(&s, 1), &g),
            Err(BaselineError::Config { .. })
        ));
    }
}
