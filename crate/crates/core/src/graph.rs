//! Relational graph of a scenario.
//!
//! Vertices are links. Every (UAV n, DU k) downlink is a *green* vertex and
//! every D2D pair is a *yellow* vertex, so a scenario with N UAVs, K DUs
//! and M pairs yields NK + M vertices. Ids are zero-based: green `(n, k)`
//! is `n·K + k` and yellow `m` is `N·K + m`.
//!
//! The adjacency matrix is read row-wise: row `i` lists the edges vertex
//! `i` aggregates over.
//!
//! | row `i`  | column `j` | entry                    |
//! |----------|------------|--------------------------|
//! | green    | green      | 0 (no edge)              |
//! | green    | yellow     | β0                       |
//! | yellow m | green (·,k)| g^u of DT m → DU k       |
//! | yellow m | yellow m'  | g^d of DT m → DR m' (m ≠ m') |
//!
//! Gains are stored normalized as dB/100, coordinates as a fraction of the
//! area half-width and powers as a fraction of their cap.

use thiserror::Error;

use crate::physics::{GroundChannels, PhysicsError, Point, Scenario, linear_to_db, los_gain};

/// Vertex feature width: power, gain, x, y.
pub const NODE_FEATURES: usize = 4;
/// Edge feature width.
pub const EDGE_FEATURES: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

pub fn green_index(n: usize, k: usize, n_du: usize) -> usize {
    n * n_du + k
}

pub fn yellow_index(m: usize, n_uav: usize, n_du: usize) -> usize {
    n_uav * n_du + m
}

/// Inverse of [`green_index`].
pub fn green_of(id: usize, n_du: usize) -> (usize, usize) {
    (id / n_du, id % n_du)
}

/// Gain → feature: dB / 100.
pub fn normalize_gain(g: f64) -> f64 {
    linear_to_db(g) / 100.0
}

/// Reference UAV deployment the graph features are evaluated at.
#[derive(Debug, Clone, PartialEq)]
pub struct InitDeployment {
    pub uav_xy: Vec<Point>,
    pub p_uav0: Vec<f64>,
    pub p_d2d0: Vec<f64>,
}

impl InitDeployment {
    /// UAVs evenly spaced on a circle of radius `area_half / 4` around the
    /// DU centroid, every transmitter at its cap.
    pub fn default_for(s: &Scenario, n_uav: usize, area_half: f64) -> Self {
        let k = s.n_du() as f64;
        let cx = s.du_xy.iter().map(|p| p[0]).sum::<f64>() / k;
        let cy = s.du_xy.iter().map(|p| p[1]).sum::<f64>() / k;
        let r = area_half / 4.0;
        let uav_xy = (0..n_uav)
            .map(|n| {
                let a = std::f64::consts::TAU * n as f64 / n_uav as f64;
                [cx + r * a.cos(), cy + r * a.sin()]
            })
            .collect();
        Self {
            uav_xy,
            p_uav0: vec![s.constants.p_max_uav_w; n_uav],
            p_d2d0: vec![s.constants.p_max_d2d_w; s.n_d2d()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceGraph {
    pub n_uav: usize,
    pub n_du: usize,
    pub n_d2d: usize,
    pub node_feat: Vec<[f64; NODE_FEATURES]>,
    /// Row-major `n_nodes × n_nodes`.
    pub adj: Vec<f64>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl InterferenceGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_feat.len()
    }

    /// Number of green vertices, `N·K`.
    pub fn green_count(&self) -> usize {
        self.n_uav * self.n_du
    }

    pub fn is_green(&self, i: usize) -> bool {
        i < self.green_count()
    }

    pub fn adj_at(&self, i: usize, j: usize) -> f64 {
        self.adj[i * self.n_nodes() + j]
    }

    /// Nonzero entries of row `i` as `(j, edge feature)`, ascending `j`.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }
}

/// Builds the graph of `s` with UAV-dependent features taken at `init`.
pub fn build_graph(s: &Scenario, init: &InitDeployment, area_half: f64) -> Result<InterferenceGraph, GraphError> {
    s.validate()?;
    let ground = s.ground_channels()?;
    build_graph_with(s, &ground, init, area_half)
}

pub(crate) fn build_graph_with(
    s: &Scenario,
    ground: &GroundChannels,
    init: &InitDeployment,
    area_half: f64,
) -> Result<InterferenceGraph, GraphError> {
    let n_uav = init.uav_xy.len();
    let n_du = s.n_du();
    let n_d2d = s.n_d2d();
    if n_uav == 0 {
        return Err(GraphError::Dimension("at least one UAV required".into()));
    }
    if init.p_uav0.len() != n_uav {
        return Err(GraphError::Dimension(format!(
            "{} UAV positions but {} UAV powers",
            n_uav,
            init.p_uav0.len()
        )));
    }
    if init.p_d2d0.len() != n_d2d {
        return Err(GraphError::Dimension(format!(
            "{} D2D pairs but {} initial DT powers",
            n_d2d,
            init.p_d2d0.len()
        )));
    }
    if !(area_half > 0.0) {
        return Err(GraphError::Dimension(format!("area half-width {area_half}")));
    }
    let c = &s.constants;
    let green = n_uav * n_du;
    let n = green + n_d2d;

    let mut node_feat = Vec::with_capacity(n);
    for (uav, &p) in init.uav_xy.iter().zip(&init.p_uav0) {
        for du in &s.du_xy {
            let h: f64 = los_gain(*uav, *du, c);
            node_feat.push([
                p / c.p_max_uav_w,
                normalize_gain(h),
                du[0] / area_half,
                du[1] / area_half,
            ]);
        }
    }
    for m in 0..n_d2d {
        let dr = s.dr_xy[m];
        node_feat.push([
            init.p_d2d0[m] / c.p_max_d2d_w,
            normalize_gain(ground.direct[m]),
            dr[0] / area_half,
            dr[1] / area_half,
        ]);
    }

    let mut adj = vec![0.0; n * n];
    let beta0 = normalize_gain(c.beta0);
    for i in 0..green {
        for j in green..n {
            adj[i * n + j] = beta0;
        }
    }
    for mi in 0..n_d2d {
        let i = green + mi;
        for j in 0..green {
            let k = j % n_du;
            adj[i * n + j] = normalize_gain(ground.to_du[mi][k]);
        }
        for mj in 0..n_d2d {
            if mj != mi {
                adj[i * n + green + mj] = normalize_gain(ground.cross[mi][mj]);
            }
        }
    }

    let neighbors = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| is_edge(i, j, green))
                .map(|j| (j, adj[i * n + j]))
                .collect()
        })
        .collect();

    Ok(InterferenceGraph {
        n_uav,
        n_du,
        n_d2d,
        node_feat,
        adj,
        neighbors,
    })
}

fn is_edge(i: usize, j: usize, green: usize) -> bool {
    if i < green { j >= green } else { j != i }
}
