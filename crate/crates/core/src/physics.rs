//! Channel, SINR, rate and loss model of the UAV/D2D downlink.
//!
//! All quantities are in linear units (W, power ratios, metres). Every
//! function that depends on the decision variables is generic over
//! [`Scalar`] so the same code runs on plain `f64` and on traced values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub type Point = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("constant `{field}` = {value} is invalid: {reason}")]
    InvalidConstant {
        field: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("ground link distance must be positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("{0}")]
    Shape(String),
    #[error("non-finite coordinate in {0}")]
    NonFinite(&'static str),
    #[error("power {value} of {who} outside (0, {cap}]")]
    PowerOutOfRange { who: String, value: f64, cap: f64 },
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

pub fn linear_to_db(v: f64) -> f64 {
    10.0 * v.log10()
}

/// Physical constants of one deployment, in linear units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysConstants {
    /// LoS channel power gain at 1 m.
    pub beta0: f64,
    /// Common UAV altitude (m).
    pub altitude_m: f64,
    pub wavelength_m: f64,
    /// Outdoor reference distance of the ground path-loss model (m).
    pub ref_distance_m: f64,
    pub path_loss_exp: f64,
    pub noise_w: f64,
    pub p_max_uav_w: f64,
    pub p_max_d2d_w: f64,
    /// Minimum D2D rate (bit/s/Hz).
    pub r_min: f64,
}

impl Default for PhysConstants {
    fn default() -> Self {
        Self {
            beta0: db_to_linear(-30.0),
            altitude_m: 10.0,
            wavelength_m: 0.125,
            ref_distance_m: 1.0,
            path_loss_exp: 3.0,
            noise_w: dbm_to_watts(-60.0),
            p_max_uav_w: dbm_to_watts(30.0),
            p_max_d2d_w: dbm_to_watts(10.0),
            r_min: 0.2,
        }
    }
}

impl PhysConstants {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let fields = [
            ("beta0", self.beta0),
            ("altitude_m", self.altitude_m),
            ("wavelength_m", self.wavelength_m),
            ("ref_distance_m", self.ref_distance_m),
            ("path_loss_exp", self.path_loss_exp),
            ("noise_w", self.noise_w),
            ("p_max_uav_w", self.p_max_uav_w),
            ("p_max_d2d_w", self.p_max_d2d_w),
            ("r_min", self.r_min),
        ];
        for (field, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(PhysicsError::InvalidConstant {
                    field,
                    value,
                    reason: "must be finite and strictly positive",
                });
            }
        }
        if self.path_loss_exp < 2.0 {
            return Err(PhysicsError::InvalidConstant {
                field: "path_loss_exp",
                value: self.path_loss_exp,
                reason: "must be at least 2",
            });
        }
        Ok(())
    }

    /// `(λ / 4π d1)²`, the ground gain at the reference distance.
    pub fn ground_ref_gain(&self) -> f64 {
        let r = self.wavelength_m / (4.0 * std::f64::consts::PI * self.ref_distance_m);
        r * r
    }
}

/// LoS air-to-ground gain `β0 / (Δx² + Δy² + H²)`.
pub fn los_gain<S: Scalar>(uav: [S; 2], ground: Point, c: &PhysConstants) -> S {
    let dx = uav[0] - ground[0];
    let dy = uav[1] - ground[1];
    let d2 = dx * dx + dy * dy + c.altitude_m * c.altitude_m;
    S::cst(c.beta0) / d2
}

/// Ground-to-ground gain `(λ / 4π d1)² (d1 / d)^γ`.
pub fn ground_gain(d: f64, c: &PhysConstants) -> Result<f64, PhysicsError> {
    if !(d > 0.0) {
        return Err(PhysicsError::NonPositiveDistance(d));
    }
    Ok(c.ground_ref_gain() * (c.ref_distance_m / d).powf(c.path_loss_exp))
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Multiplicative power-fading factors on the ground links.
///
/// Absent by default, in which case every ground link follows the
/// deterministic path-loss law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkFading {
    /// DT m → DR m.
    pub direct: Vec<f64>,
    /// DT m → DU k, indexed `[m][k]`.
    pub to_du: Vec<Vec<f64>>,
    /// DT i → DR m, indexed `[i][m]`.
    pub cross: Vec<Vec<f64>>,
}

/// Ground truth of one problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub du_xy: Vec<Point>,
    pub dt_xy: Vec<Point>,
    pub dr_xy: Vec<Point>,
    pub constants: PhysConstants,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fading: Option<LinkFading>,
}

impl Scenario {
    pub fn n_du(&self) -> usize {
        self.du_xy.len()
    }

    pub fn n_d2d(&self) -> usize {
        self.dt_xy.len()
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        self.constants.validate()?;
        if self.du_xy.is_empty() {
            return Err(PhysicsError::Shape("scenario needs at least one DU".into()));
        }
        if self.dt_xy.len() != self.dr_xy.len() {
            return Err(PhysicsError::Shape(format!(
                "{} DTs but {} DRs",
                self.dt_xy.len(),
                self.dr_xy.len()
            )));
        }
        for (name, pts) in [("du_xy", &self.du_xy), ("dt_xy", &self.dt_xy), ("dr_xy", &self.dr_xy)] {
            if pts.iter().flatten().any(|v| !v.is_finite()) {
                return Err(PhysicsError::NonFinite(name));
            }
        }
        for (t, r) in self.dt_xy.iter().zip(&self.dr_xy) {
            let d = dist(*t, *r);
            if !(d > 0.0) {
                return Err(PhysicsError::NonPositiveDistance(d));
            }
        }
        if let Some(f) = &self.fading {
            let m = self.n_d2d();
            let k = self.n_du();
            if f.direct.len() != m
                || f.to_du.len() != m
                || f.to_du.iter().any(|r| r.len() != k)
                || f.cross.len() != m
                || f.cross.iter().any(|r| r.len() != m)
            {
                return Err(PhysicsError::Shape("fading factors do not match counts".into()));
            }
        }
        Ok(())
    }

    /// Gains of every ground link; these do not depend on the decisions.
    pub fn ground_channels(&self) -> Result<GroundChannels, PhysicsError> {
        let c = &self.constants;
        let m = self.n_d2d();
        let k = self.n_du();
        let mut direct = Vec::with_capacity(m);
        let mut to_du = Vec::with_capacity(m);
        let mut cross = Vec::with_capacity(m);
        for i in 0..m {
            direct.push(ground_gain(dist(self.dt_xy[i], self.dr_xy[i]), c)?);
            let mut row = Vec::with_capacity(k);
            for du in &self.du_xy {
                row.push(ground_gain(dist(self.dt_xy[i], *du), c)?);
            }
            to_du.push(row);
            let mut row = Vec::with_capacity(m);
            for j in 0..m {
                row.push(ground_gain(dist(self.dt_xy[i], self.dr_xy[j]), c)?);
            }
            cross.push(row);
        }
        if let Some(f) = &self.fading {
            for i in 0..m {
                direct[i] *= f.direct[i];
                for j in 0..k {
                    to_du[i][j] *= f.to_du[i][j];
                }
                for j in 0..m {
                    cross[i][j] *= f.cross[i][j];
                }
            }
        }
        Ok(GroundChannels { direct, to_du, cross })
    }

    /// Applies the same permutation to the D2D pairs: new pair `i` is old
    /// pair `perm[i]`.
    pub fn permute_d2d(&self, perm: &[usize]) -> Scenario {
        let pick = |v: &Vec<Point>| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Scenario {
            du_xy: self.du_xy.clone(),
            dt_xy: pick(&self.dt_xy),
            dr_xy: pick(&self.dr_xy),
            constants: self.constants,
            fading: self.fading.as_ref().map(|f| LinkFading {
                direct: perm.iter().map(|&i| f.direct[i]).collect(),
                to_du: perm.iter().map(|&i| f.to_du[i].clone()).collect(),
                cross: perm
                    .iter()
                    .map(|&i| perm.iter().map(|&j| f.cross[i][j]).collect())
                    .collect(),
            }),
        }
    }
}

/// Decision-independent ground gains of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundChannels {
    /// `g_m`: DT m → DR m.
    pub direct: Vec<f64>,
    /// `g^u_{m,k}`: DT m → DU k.
    pub to_du: Vec<Vec<f64>>,
    /// `g^d_{i,m}`: DT i → DR m (diagonal equals `direct`).
    pub cross: Vec<Vec<f64>>,
}

/// UAV horizontal positions and all transmit powers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decisions<S = f64> {
    pub uav_xy: Vec<[S; 2]>,
    pub p_uav: Vec<S>,
    pub p_d2d: Vec<S>,
}

impl<S: Scalar> Decisions<S> {
    pub fn n_uav(&self) -> usize {
        self.uav_xy.len()
    }

    pub fn values(&self) -> Decisions<f64> {
        Decisions {
            uav_xy: self.uav_xy.iter().map(|p| [p[0].value(), p[1].value()]).collect(),
            p_uav: self.p_uav.iter().map(|p| p.value()).collect(),
            p_d2d: self.p_d2d.iter().map(|p| p.value()).collect(),
        }
    }
}

impl Decisions<f64> {
    /// Checks power caps and finiteness.
    pub fn validate(&self, c: &PhysConstants) -> Result<(), PhysicsError> {
        if self.p_uav.len() != self.uav_xy.len() {
            return Err(PhysicsError::Shape("one power per UAV required".into()));
        }
        if self.uav_xy.iter().flatten().any(|v| !v.is_finite()) {
            return Err(PhysicsError::NonFinite("uav_xy"));
        }
        for (n, &p) in self.p_uav.iter().enumerate() {
            if !(p > 0.0 && p <= c.p_max_uav_w) {
                return Err(PhysicsError::PowerOutOfRange {
                    who: format!("UAV {n}"),
                    value: p,
                    cap: c.p_max_uav_w,
                });
            }
        }
        for (m, &p) in self.p_d2d.iter().enumerate() {
            if !(p > 0.0 && p <= c.p_max_d2d_w) {
                return Err(PhysicsError::PowerOutOfRange {
                    who: format!("DT {m}"),
                    value: p,
                    cap: c.p_max_d2d_w,
                });
            }
        }
        Ok(())
    }

    pub fn permute_d2d(&self, perm: &[usize]) -> Decisions<f64> {
        Decisions {
            uav_xy: self.uav_xy.clone(),
            p_uav: self.p_uav.clone(),
            p_d2d: perm.iter().map(|&i| self.p_d2d[i]).collect(),
        }
    }
}

/// Rate and loss evaluation bound to one scenario.
#[derive(Debug, Clone)]
pub struct Physics<'a> {
    pub scenario: &'a Scenario,
    pub ground: GroundChannels,
}

impl<'a> Physics<'a> {
    pub fn new(scenario: &'a Scenario) -> Result<Self, PhysicsError> {
        scenario.validate()?;
        Ok(Self {
            scenario,
            ground: scenario.ground_channels()?,
        })
    }

    fn check_dims<S: Scalar>(&self, d: &Decisions<S>) {
        assert_eq!(d.p_uav.len(), d.uav_xy.len(), "one power per UAV");
        assert_eq!(d.p_d2d.len(), self.scenario.n_d2d(), "one power per DT");
    }

    /// SINR of DU `k`; the UAV sum is taken over per-UAV ratios.
    pub fn du_sinr<S: Scalar>(&self, k: usize, d: &Decisions<S>) -> S {
        self.check_dims(d);
        let s = self.scenario;
        let c = &s.constants;
        let interference: Vec<S> = d.p_d2d.iter().zip(&self.ground.to_du).map(|(&p, g)| p * g[k]).collect();
        let denom = S::sum(&interference) + c.noise_w;
        let terms: Vec<S> = d
            .uav_xy
            .iter()
            .zip(&d.p_uav)
            .map(|(&xy, &p)| p * los_gain(xy, s.du_xy[k], c) / denom)
            .collect();
        S::sum(&terms)
    }

    /// SINR of DR `m`.
    pub fn dr_sinr<S: Scalar>(&self, m: usize, d: &Decisions<S>) -> S {
        self.check_dims(d);
        let s = self.scenario;
        let c = &s.constants;
        let mut interference: Vec<S> = Vec::with_capacity(s.n_d2d() + d.n_uav());
        for (i, &p) in d.p_d2d.iter().enumerate() {
            if i != m {
                interference.push(p * self.ground.cross[i][m]);
            }
        }
        for (&xy, &p) in d.uav_xy.iter().zip(&d.p_uav) {
            interference.push(p * los_gain(xy, s.dr_xy[m], c));
        }
        let denom = S::sum(&interference) + c.noise_w;
        d.p_d2d[m] * self.ground.direct[m] / denom
    }

    pub fn du_rates<S: Scalar>(&self, d: &Decisions<S>) -> Vec<S> {
        (0..self.scenario.n_du())
            .map(|k| self.du_sinr(k, d).log2_1p())
            .collect()
    }

    pub fn d2d_rates<S: Scalar>(&self, d: &Decisions<S>) -> Vec<S> {
        (0..self.scenario.n_d2d())
            .map(|m| self.dr_sinr(m, d).log2_1p())
            .collect()
    }

    pub fn du_sum_rate<S: Scalar>(&self, d: &Decisions<S>) -> S {
        S::sum(&self.du_rates(d))
    }

    /// `Σ_m max(0, R_min − r_m)`.
    pub fn qos_shortfall<S: Scalar>(&self, d: &Decisions<S>) -> S {
        let r_min = self.scenario.constants.r_min;
        let gaps: Vec<S> = self
            .d2d_rates(d)
            .into_iter()
            .map(|r| (S::cst(r_min) - r).max0())
            .collect();
        S::sum(&gaps)
    }

    /// `−Σ_k log2(1 + SINR_k) + α Σ_m max(0, R_min − log2(1 + SINR_m))`.
    pub fn penalized_loss<S: Scalar>(&self, d: &Decisions<S>, alpha: f64) -> S {
        -self.du_sum_rate(d) + self.qos_shortfall(d) * alpha
    }

    /// Plain-number metrics of one set of decisions.
    pub fn metrics(&self, d: &Decisions<f64>, alpha: f64) -> ScenarioMetrics {
        let d2d_rates = self.d2d_rates(d);
        let r_min = self.scenario.constants.r_min;
        let violations = d2d_rates.iter().filter(|&&r| r < r_min).count();
        let min_d2d_rate = d2d_rates.iter().copied().fold(f64::INFINITY, f64::min);
        ScenarioMetrics {
            du_sum_rate: self.du_sum_rate(d),
            min_d2d_rate: if d2d_rates.is_empty() { f64::NAN } else { min_d2d_rate },
            violations,
            penalized_loss: self.penalized_loss(d, alpha),
            d2d_rates,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioMetrics {
    pub du_sum_rate: f64,
    pub d2d_rates: Vec<f64>,
    /// D2D links with rate below `R_min`.
    pub violations: usize,
    /// NaN when there are no D2D pairs.
    pub min_d2d_rate: f64,
    pub penalized_loss: f64,
}
