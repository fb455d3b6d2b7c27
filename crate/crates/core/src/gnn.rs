//! Message-passing network mapping a scenario graph to decisions.
//!
//! Each layer updates every vertex `i` as
//!
//! ```text
//! m_i      = Σ_{j ∈ N_i} MLP1([x_j, A_ij])
//! x_i'     = ReLU(MLP2([x_i, m_i]))
//! ```
//!
//! where both MLPs have one ReLU hidden layer as wide as their output.
//! MLP1's output layer is affine, so the sum over neighbours is taken on its
//! hidden activations and the output layer applied once per vertex; the
//! neighbour-dependent half of its first layer is likewise computed once per
//! vertex instead of once per edge.
//!
//! The readout applies a shared head to every green vertex and averages the
//! K heads belonging to each UAV: two position logits squashed by `tanh`
//! into the deployment square and one power logit squashed by `sigmoid`
//! into `(0, P_max^u)`. Yellow vertices emit one power logit each.
//!
//! All parameters live in a single flat vector; [`Layout`] names the blocks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{GraphError, InitDeployment, InterferenceGraph, NODE_FEATURES, build_graph_with};
use crate::physics::{Decisions, PhysConstants, PhysicsError, Scenario};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &str = "uavgnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Embedding widths of the message-passing layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub widths: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: NODE_FEATURES,
            widths: vec![32, 64, 32],
        }
    }
}

/// A named rectangular slice of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

impl Dense {
    fn row<'a, S>(&self, p: &'a [S], r: usize) -> &'a [S] {
        &p[self.w + r * self.cols..self.w + (r + 1) * self.cols]
    }

    fn apply<S: Scalar>(&self, p: &[S], x: &[S]) -> Vec<S> {
        (0..self.rows)
            .map(|r| S::dot(self.row(p, r), x, p[self.b + r]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerIdx {
    in_dim: usize,
    width: usize,
    msg_hidden: Dense,
    msg_out: Dense,
    upd_hidden: Dense,
    upd_out: Dense,
}

/// Positions of all parameter blocks in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    layers: Vec<LayerIdx>,
    green_head: Dense,
    yellow_head: Dense,
    blocks: Vec<Block>,
    len: usize,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut dense = |name: String, rows: usize, cols: usize| {
            let w = offset;
            blocks.push(Block {
                name: format!("{name}.weight"),
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
            let b = offset;
            blocks.push(Block {
                name: format!("{name}.bias"),
                rows,
                cols: 1,
                offset,
            });
            offset += rows;
            Dense { w, b, rows, cols }
        };
        let mut layers = Vec::new();
        let mut in_dim = arch.input_dim;
        for (l, &width) in arch.widths.iter().enumerate() {
            let msg_hidden = dense(format!("layer{}.msg.hidden", l + 1), width, in_dim + 1);
            let msg_out = dense(format!("layer{}.msg.out", l + 1), width, width);
            let upd_hidden = dense(format!("layer{}.update.hidden", l + 1), width, in_dim + width);
            let upd_out = dense(format!("layer{}.update.out", l + 1), width, width);
            layers.push(LayerIdx {
                in_dim,
                width,
                msg_hidden,
                msg_out,
                upd_hidden,
                upd_out,
            });
            in_dim = width;
        }
        let green_head = dense("head.green".into(), 3, in_dim);
        let yellow_head = dense("head.yellow".into(), 1, in_dim);
        Self {
            layers,
            green_head,
            yellow_head,
            blocks,
            len: offset,
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Block containing flat index `i`.
    pub fn block_of(&self, i: usize) -> &Block {
        self.blocks
            .iter()
            .find(|b| b.range().contains(&i))
            .expect("index within layout")
    }
}

/// Weights and biases of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub arch: Architecture,
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl GnnParams {
    pub fn zeros(arch: Architecture) -> Self {
        let layout = Layout::new(&arch);
        let values = vec![0.0; layout.len()];
        Self { arch, layout, values }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut p = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &p.layout.blocks {
            if b.name.ends_with(".weight") {
                let bound = (6.0 / (b.rows + b.cols) as f64).sqrt();
                for v in &mut p.values[b.range()] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.values[b.range()])
    }

    pub fn save(&self, path: &Path, config: Option<&str>) -> Result<(), GnnError> {
        fs::write(path, self.to_text(config)).map_err(|source| GnnError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path, expect: &Architecture) -> Result<Self, GnnError> {
        let text = fs::read_to_string(path).map_err(|source| GnnError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text, expect)
    }

    /// Text checkpoint.
    ///
    /// ```text
    /// uavgnn-checkpoint 1
    /// tool_version 0.1.0
    /// architecture 4 32,64,32
    /// config {...}                  (optional, one line)
    /// block <name> <rows> <cols>
    /// <cols values>                 (repeated rows times)
    /// ...
    /// end
    /// ```
    pub fn to_text(&self, config: Option<&str>) -> String {
        let mut out = String::new();
        let widths: Vec<String> = self.arch.widths.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(out, "tool_version {}", crate::VERSION);
        let _ = writeln!(out, "architecture {} {}", self.arch.input_dim, widths.join(","));
        if let Some(c) = config {
            let _ = writeln!(out, "config {}", c.replace('\n', " "));
        }
        for b in &self.layout.blocks {
            let _ = writeln!(out, "block {} {} {}", b.name, b.rows, b.cols);
            for r in 0..b.rows {
                let row: Vec<String> = self.values[b.offset + r * b.cols..b.offset + (r + 1) * b.cols]
                    .iter()
                    .map(|v| format!("{v:?}"))
                    .collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str, expect: &Architecture) -> Result<Self, GnnError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, message: String| GnnError::Checkpoint { line, message };
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")))
        };

        let (ln, magic) = next("header")?;
        if magic != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(err(ln, format!("not a {CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} file")));
        }
        let (ln, tv) = next("tool_version")?;
        if !tv.starts_with("tool_version ") {
            return Err(err(ln, "missing tool_version".into()));
        }
        let (ln, arch_line) = next("architecture")?;
        let arch = parse_arch(arch_line).ok_or_else(|| err(ln, format!("bad architecture line `{arch_line}`")))?;
        if &arch != expect {
            return Err(err(
                ln,
                format!("architecture {arch:?} does not match expected {expect:?}"),
            ));
        }
        let mut params = GnnParams::zeros(arch);
        let mut line = next("block")?;
        if line.1.starts_with("config ") {
            line = next("block")?;
        }
        for b in params.layout.blocks.clone() {
            let (ln, head) = line;
            let want = format!("block {} {} {}", b.name, b.rows, b.cols);
            if head != want {
                return Err(err(ln, format!("expected `{want}`, found `{head}`")));
            }
            for r in 0..b.rows {
                let (ln, row) = next("matrix row")?;
                let vals: Result<Vec<f64>, _> = row.split_whitespace().map(str::parse).collect();
                let vals = vals.map_err(|e| err(ln, format!("{}: {e}", b.name)))?;
                if vals.len() != b.cols {
                    return Err(err(
                        ln,
                        format!("{}: row has {} values, shape says {}", b.name, vals.len(), b.cols),
                    ));
                }
                let start = b.offset + r * b.cols;
                params.values[start..start + b.cols].copy_from_slice(&vals);
            }
            line = next("block or end")?;
        }
        if line.1 != "end" {
            return Err(err(line.0, format!("expected `end`, found `{}`", line.1)));
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(err(0, "non-finite parameter".into()));
        }
        Ok(params)
    }
}

fn parse_arch(line: &str) -> Option<Architecture> {
    let mut it = line.split_whitespace();
    if it.next()? != "architecture" {
        return None;
    }
    let input_dim = it.next()?.parse().ok()?;
    let widths = it
        .next()?
        .split(',')
        .map(|w| w.parse().ok())
        .collect::<Option<Vec<usize>>>()?;
    if it.next().is_some() || widths.is_empty() {
        return None;
    }
    Some(Architecture { input_dim, widths })
}

/// What the readout needs to know about the deployment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub n_uav: usize,
    /// Half-width of the deployment square, centred on the origin (m).
    pub area_half: f64,
}

/// One message-passing round.
pub fn layer_forward<S: Scalar>(
    layout: &Layout,
    l: usize,
    graph: &InterferenceGraph,
    emb: &[Vec<S>],
    p: &[S],
) -> Vec<Vec<S>> {
    let li = &layout.layers[l];
    let n = graph.n_nodes();
    assert_eq!(emb.len(), n);
    let zero = S::cst(0.0);

    // neighbour half of MLP1's first layer, W_x · x_j
    let proj: Vec<Vec<S>> = emb
        .iter()
        .map(|x| {
            debug_assert_eq!(x.len(), li.in_dim);
            (0..li.width)
                .map(|h| S::dot(&li.msg_hidden.row(p, h)[..li.in_dim], x, zero))
                .collect()
        })
        .collect();

    let one = S::cst(1.0);
    let mut next = Vec::with_capacity(n);
    let mut terms = Vec::new();
    for i in 0..n {
        let nb = graph.neighbors(i);
        let mut hidden_sum = Vec::with_capacity(li.width);
        for h in 0..li.width {
            let edge_w = li.msg_hidden.row(p, h)[li.in_dim];
            let bias = p[li.msg_hidden.b + h];
            terms.clear();
            for &(j, a) in nb {
                terms.push(S::dot(&[edge_w, bias], &[S::cst(a), one], proj[j][h]).max0());
            }
            hidden_sum.push(S::sum(&terms));
        }
        let deg = nb.len() as f64;
        let msg: Vec<S> = (0..li.width)
            .map(|r| S::dot(li.msg_out.row(p, r), &hidden_sum, p[li.msg_out.b + r] * deg))
            .collect();

        let mut input = emb[i].clone();
        input.extend_from_slice(&msg);
        let hidden: Vec<S> = li.upd_hidden.apply(p, &input).into_iter().map(S::max0).collect();
        let out: Vec<S> = li.upd_out.apply(p, &hidden).into_iter().map(S::max0).collect();
        next.push(out);
    }
    next
}

/// Layer-0 embeddings: the graph's node features.
pub fn input_embeddings<S: Scalar>(graph: &InterferenceGraph) -> Vec<Vec<S>> {
    graph
        .node_feat
        .iter()
        .map(|f| f.iter().map(|&v| S::cst(v)).collect())
        .collect()
}

/// Maps final embeddings to positions and powers.
pub fn readout<S: Scalar>(
    layout: &Layout,
    graph: &InterferenceGraph,
    emb: &[Vec<S>],
    p: &[S],
    c: &PhysConstants,
    area_half: f64,
) -> Decisions<S> {
    let k = graph.n_du;
    let inv_k = 1.0 / k as f64;
    let mut uav_xy = Vec::with_capacity(graph.n_uav);
    let mut p_uav = Vec::with_capacity(graph.n_uav);
    for n in 0..graph.n_uav {
        let heads: Vec<Vec<S>> = (0..k).map(|kk| layout.green_head.apply(p, &emb[n * k + kk])).collect();
        let avg = |c: usize| {
            let col: Vec<S> = heads.iter().map(|h| h[c]).collect();
            S::sum(&col) * inv_k
        };
        uav_xy.push([avg(0).tanh() * area_half, avg(1).tanh() * area_half]);
        p_uav.push(avg(2).sigmoid() * c.p_max_uav_w);
    }
    let green = graph.green_count();
    let p_d2d = (0..graph.n_d2d)
        .map(|m| layout.yellow_head.apply(p, &emb[green + m])[0].sigmoid() * c.p_max_d2d_w)
        .collect();
    Decisions { uav_xy, p_uav, p_d2d }
}

/// Full pass on a prebuilt graph with parameters of any scalar type.
pub fn forward_graph<S: Scalar>(
    layout: &Layout,
    graph: &InterferenceGraph,
    p: &[S],
    c: &PhysConstants,
    area_half: f64,
) -> Decisions<S> {
    assert_eq!(p.len(), layout.len(), "parameter vector length");
    let mut emb = input_embeddings::<S>(graph);
    for l in 0..layout.n_layers() {
        emb = layer_forward(layout, l, graph, &emb, p);
    }
    readout(layout, graph, &emb, p, c, area_half)
}

/// The graph a scenario is mapped to before the forward pass.
pub fn scenario_graph(s: &Scenario, cfg: &ModelConfig) -> Result<InterferenceGraph, GnnError> {
    s.validate()?;
    let ground = s.ground_channels()?;
    let init = InitDeployment::default_for(s, cfg.n_uav, cfg.area_half);
    Ok(build_graph_with(s, &ground, &init, cfg.area_half)?)
}

/// Scenario → decisions with plain numbers.
pub fn forward(s: &Scenario, params: &GnnParams, cfg: &ModelConfig) -> Result<Decisions, GnnError> {
    let g = scenario_graph(s, cfg)?;
    Ok(forward_graph(
        &params.layout,
        &g,
        &params.values,
        &s.constants,
        cfg.area_half,
    ))
}
