//! Graph-structured discrete-time state-space models.
//!
//! A network is a set of subsystems on an undirected graph. Each subsystem
//! maps its state, incoming interconnection signals `s_i`, disturbance `d_i`
//! and control input `u_i` to the successor state, outgoing interconnection
//! signals `o_i`, performance output `z_i` and measurement `y_i`. Channels
//! between node pairs have a declared width; the interconnection equates
//! `o_ij` with `s_ji` pairwise, which globally reads `o = Δ s` for an
//! involutive permutation `Δ`.
//!
//! This module owns the canonical orderings: within a node, channel blocks
//! are stacked by ascending neighbor index; in a closed loop, each neighbor's
//! plant channel block precedes its controller channel block. All other
//! modules rely on these layouts.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::mat;

/// Errors from model construction and interconnection elimination.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("topology: {0}")]
    Topology(String),
    #[error("node {node}: block {block} is {got_rows}x{got_cols}, expected {want_rows}x{want_cols}")]
    BlockShape {
        node: usize,
        block: &'static str,
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("node {node}: interconnection width {got} does not match topology total {want}")]
    ChannelMismatch { node: usize, got: usize, want: usize },
    #[error("node {node}: D^yu must be zero, max |entry| = {max_abs:e}")]
    NonzeroDyu { node: usize, max_abs: f64 },
    #[error("interconnection operator numerically singular (rcond = {rcond:e})")]
    SingularInterconnection { rcond: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Undirected interconnection graph: `L` nodes plus a channel width per
/// unordered node pair. Absent pairs have width zero and are not edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    node_count: usize,
    // Keyed by (min, max); only positive widths stored.
    widths: BTreeMap<(usize, usize), usize>,
}

impl Topology {
    /// Builds a topology from `(i, j, n_ij)` entries (0-based node indices).
    ///
    /// # Errors
    /// Rejects self-loops, out-of-range indices, and conflicting duplicate
    /// entries. Zero-width entries are accepted and ignored.
    pub fn new(node_count: usize, widths: &[(usize, usize, usize)]) -> Result<Self, ModelError> {
        if node_count == 0 {
            return Err(ModelError::Topology("node count must be positive".into()));
        }
        let mut map = BTreeMap::new();
        for &(i, j, w) in widths {
            if i == j {
                return Err(ModelError::Topology(format!("self-connection on node {i}")));
            }
            if i >= node_count || j >= node_count {
                return Err(ModelError::Topology(format!(
                    "pair ({i},{j}) out of range for {node_count} nodes"
                )));
            }
            if w == 0 {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if let Some(&prev) = map.get(&key) {
                if prev != w {
                    return Err(ModelError::Topology(format!(
                        "conflicting widths {prev} and {w} for pair ({},{})",
                        key.0, key.1
                    )));
                }
            }
            map.insert(key, w);
        }
        Ok(Self { node_count, widths: map })
    }

    /// Number of nodes `L`.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Channel width `n_ij` (= `n_ji`); 0 when the pair is not connected.
    pub fn width(&self, i: usize, j: usize) -> usize {
        if i == j {
            return 0;
        }
        *self.widths.get(&(i.min(j), i.max(j))).unwrap_or(&0)
    }

    /// Neighbors of `node` in ascending order.
    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        (0..self.node_count).filter(|&j| self.width(node, j) > 0).collect()
    }

    /// Total incoming/outgoing channel width of a node, `n_i = Σ_j n_ij`.
    pub fn node_channel_width(&self, node: usize) -> usize {
        (0..self.node_count).map(|j| self.width(node, j)).sum()
    }

    /// Unordered connected pairs as `(i, j)` with `i > j` — the orientation
    /// in which the off-diagonal multiplier blocks are stored.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.widths.keys().map(|&(lo, hi)| (hi, lo)).collect()
    }

    /// Total channel dimension `n = Σ_i n_i = 2 Σ_{i<j} n_ij`.
    pub fn total_channel_width(&self) -> usize {
        (0..self.node_count).map(|i| self.node_channel_width(i)).sum()
    }
}

/// Per-neighbor slot inside a node's stacked channel vector: the neighbor's
/// index, the block offset within `[0, n_i)`, and the block width.
pub type ChannelSlot = (usize, usize, usize);

/// Canonical layout of node `i`'s channel vector: neighbors ascending,
/// zero-width pairs skipped, offsets partitioning `[0, n_i)`.
pub fn canonical_channel_layout(topology: &Topology, node: usize) -> Vec<ChannelSlot> {
    assert!(node < topology.node_count(), "node index out of range");
    let mut out = Vec::new();
    let mut offset = 0;
    for j in 0..topology.node_count() {
        let w = topology.width(node, j);
        if w > 0 {
            out.push((j, offset, w));
            offset += w;
        }
    }
    out
}

/// One subsystem's realization: the sixteen state-space blocks mapping
/// `(x_i, s_i, d_i, u_i)` to `(x_i⁺, o_i, z_i, y_i)`.
///
/// Dimensions are implied by block shapes: `k` states, `n` interconnection
/// channels, `f` disturbances, `q` performance outputs, `m` control inputs,
/// `p` measurements. Any of them may be zero. `d_yu` must be zero (standard
/// loop-shift normalization; enforced by [`NetworkModel::new`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemRealization {
    pub a_tt: DMatrix<f64>,
    pub a_ts: DMatrix<f64>,
    pub a_st: DMatrix<f64>,
    pub a_ss: DMatrix<f64>,
    pub b_td: DMatrix<f64>,
    pub b_sd: DMatrix<f64>,
    pub b_tu: DMatrix<f64>,
    pub b_su: DMatrix<f64>,
    pub c_zt: DMatrix<f64>,
    pub c_zs: DMatrix<f64>,
    pub c_yt: DMatrix<f64>,
    pub c_ys: DMatrix<f64>,
    pub d_zd: DMatrix<f64>,
    pub d_zu: DMatrix<f64>,
    pub d_yd: DMatrix<f64>,
    pub d_yu: DMatrix<f64>,
}

impl SubsystemRealization {
    /// All-zero realization with the given dimensions.
    pub fn zeros(k: usize, n: usize, f: usize, q: usize, m: usize, p: usize) -> Self {
        Self {
            a_tt: DMatrix::zeros(k, k),
            a_ts: DMatrix::zeros(k, n),
            a_st: DMatrix::zeros(n, k),
            a_ss: DMatrix::zeros(n, n),
            b_td: DMatrix::zeros(k, f),
            b_sd: DMatrix::zeros(n, f),
            b_tu: DMatrix::zeros(k, m),
            b_su: DMatrix::zeros(n, m),
            c_zt: DMatrix::zeros(q, k),
            c_zs: DMatrix::zeros(q, n),
            c_yt: DMatrix::zeros(p, k),
            c_ys: DMatrix::zeros(p, n),
            d_zd: DMatrix::zeros(q, f),
            d_zu: DMatrix::zeros(q, m),
            d_yd: DMatrix::zeros(p, f),
            d_yu: DMatrix::zeros(p, m),
        }
    }

    /// State dimension `k`.
    pub fn k(&self) -> usize {
        self.a_tt.nrows()
    }
    /// Total interconnection width `n`.
    pub fn n(&self) -> usize {
        self.a_ss.nrows()
    }
    /// Disturbance width `f`.
    pub fn f(&self) -> usize {
        self.b_td.ncols()
    }
    /// Performance output width `q`.
    pub fn q(&self) -> usize {
        self.c_zt.nrows()
    }
    /// Control input width.
    pub fn u_width(&self) -> usize {
        self.b_tu.ncols()
    }
    /// Measurement width.
    pub fn y_width(&self) -> usize {
        self.c_yt.nrows()
    }

    /// Checks all sixteen block shapes against the implied dimensions.
    pub fn validate(&self, node: usize) -> Result<(), ModelError> {
        let (k, n, f, q, m, p) =
            (self.k(), self.n(), self.f(), self.q(), self.u_width(), self.y_width());
        let checks: [(&'static str, &DMatrix<f64>, usize, usize); 16] = [
            ("A^TT", &self.a_tt, k, k),
            ("A^TS", &self.a_ts, k, n),
            ("A^ST", &self.a_st, n, k),
            ("A^SS", &self.a_ss, n, n),
            ("B^Td", &self.b_td, k, f),
            ("B^Sd", &self.b_sd, n, f),
            ("B^Tu", &self.b_tu, k, m),
            ("B^Su", &self.b_su, n, m),
            ("C^zT", &self.c_zt, q, k),
            ("C^zS", &self.c_zs, q, n),
            ("C^yT", &self.c_yt, p, k),
            ("C^yS", &self.c_ys, p, n),
            ("D^zd", &self.d_zd, q, f),
            ("D^zu", &self.d_zu, q, m),
            ("D^yd", &self.d_yd, p, f),
            ("D^yu", &self.d_yu, p, m),
        ];
        for (name, m_, wr, wc) in checks {
            if m_.nrows() != wr || m_.ncols() != wc {
                return Err(ModelError::BlockShape {
                    node,
                    block: name,
                    got_rows: m_.nrows(),
                    got_cols: m_.ncols(),
                    want_rows: wr,
                    want_cols: wc,
                });
            }
        }
        Ok(())
    }
}

/// A topology plus one subsystem per node, with all cross-checks passed.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    topology: Topology,
    nodes: Vec<SubsystemRealization>,
}

impl NetworkModel {
    /// Validates block shapes, per-node channel totals against the topology,
    /// and the `D^yu = 0` normalization.
    pub fn new(topology: Topology, nodes: Vec<SubsystemRealization>) -> Result<Self, ModelError> {
        if nodes.len() != topology.node_count() {
            return Err(ModelError::Dimension(format!(
                "{} nodes supplied for a {}-node topology",
                nodes.len(),
                topology.node_count()
            )));
        }
        for (i, node) in nodes.iter().enumerate() {
            node.validate(i)?;
            let want = topology.node_channel_width(i);
            if node.n() != want {
                return Err(ModelError::ChannelMismatch { node: i, got: node.n(), want });
            }
            let dyu = mat::max_abs(&node.d_yu);
            if dyu != 0.0 {
                return Err(ModelError::NonzeroDyu { node: i, max_abs: dyu });
            }
        }
        Ok(Self { topology, nodes })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn nodes(&self) -> &[SubsystemRealization] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &SubsystemRealization {
        &self.nodes[i]
    }

    /// Offset of each node's channel block in the global channel vector,
    /// plus the total width as a final entry.
    pub fn channel_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.nodes.len() + 1);
        let mut acc = 0;
        for i in 0..self.nodes.len() {
            offs.push(acc);
            acc += self.topology.node_channel_width(i);
        }
        offs.push(acc);
        offs
    }

    /// Offset of each node's state block in the global state vector, plus the
    /// total as a final entry.
    pub fn state_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.nodes.len() + 1);
        let mut acc = 0;
        for n in &self.nodes {
            offs.push(acc);
            acc += n.k();
        }
        offs.push(acc);
        offs
    }
}

/// The interconnection permutation `Δ` (`o = Δ s`): for every connected pair,
/// the rows of `o_ij` select the block of `s_ji` and vice versa. Symmetric and
/// involutive by construction.
pub fn build_delta(topology: &Topology) -> DMatrix<f64> {
    let map = delta_index_map(topology);
    let n = map.len();
    let mut delta = DMatrix::zeros(n, n);
    for (row, &col) in map.iter().enumerate() {
        delta[(row, col)] = 1.0;
    }
    delta
}

/// Index form of `Δ`: entry `r` holds the global channel index `c` such that
/// `o[r] = s[c]`, i.e. the position of the mirrored channel `(j,i)` slot for
/// the `(i,j)` slot at `r`.
pub fn delta_index_map(topology: &Topology) -> Vec<usize> {
    let node_offsets: Vec<usize> = {
        let mut offs = Vec::with_capacity(topology.node_count() + 1);
        let mut acc = 0;
        for i in 0..topology.node_count() {
            offs.push(acc);
            acc += topology.node_channel_width(i);
        }
        offs.push(acc);
        offs
    };
    let mut map = vec![0usize; node_offsets[topology.node_count()]];
    for i in 0..topology.node_count() {
        for (j, off_ij, w) in canonical_channel_layout(topology, i) {
            // Locate the (j, i) slot inside node j's layout.
            let (_, off_ji, _) = canonical_channel_layout(topology, j)
                .into_iter()
                .find(|&(nb, _, _)| nb == i)
                .expect("mirrored channel present by symmetry");
            for t in 0..w {
                map[node_offsets[i] + off_ij + t] = node_offsets[j] + off_ji + t;
            }
        }
    }
    map
}

/// Flat state-space system `(A, B, C, D)` with per-node offset bookkeeping.
#[derive(Debug, Clone)]
pub struct FlatStateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Per-node state offsets (final entry = total state dimension).
    pub state_offsets: Vec<usize>,
    /// Per-node input offsets (final entry = total input width).
    pub input_offsets: Vec<usize>,
    /// Per-node output offsets (final entry = total output width).
    pub output_offsets: Vec<usize>,
}

impl FlatStateSpace {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }
}

/// Flattened plant with all four port groups kept: inputs `(d, u)` and
/// outputs `(z, y)`. Produced by [`flatten_plant`]; the disturbance-to-
/// performance channel of [`assemble_interconnected`] is its `(d → z)` part.
#[derive(Debug, Clone)]
pub struct FlatPlant {
    pub a: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub c_z: DMatrix<f64>,
    pub c_y: DMatrix<f64>,
    pub d_zd: DMatrix<f64>,
    pub d_zu: DMatrix<f64>,
    pub d_yd: DMatrix<f64>,
    /// Flat feedthrough u → y. Zero per node, but interconnection elimination
    /// can create one (`C^yS (Δ − A^SS)^{-1} B^Su`); centralized synthesis
    /// requires it to vanish.
    pub d_yu: DMatrix<f64>,
    pub state_offsets: Vec<usize>,
}

/// Well-posedness: the interconnection constraints have a unique solution iff
/// `Δ − A^SS` is nonsingular. Returns the verdict together with the
/// reciprocal condition estimate of `Δ − A^SS` (1.0 for channel-free models).
pub fn well_posed(model: &NetworkModel) -> (bool, f64) {
    let delta = build_delta(model.topology());
    let a_ss: Vec<&DMatrix<f64>> = model.nodes().iter().map(|n| &n.a_ss).collect();
    let op = delta - mat::block_diag(&a_ss);
    let rc = mat::rcond(&op);
    (rc >= RCOND_WELL_POSED, rc)
}

/// Reciprocal-condition threshold below which `Δ − A^SS` is treated as
/// singular (ill-posed interconnection).
pub const RCOND_WELL_POSED: f64 = 1e-12;

/// Eliminates the interconnection variables of the full four-port plant.
///
/// # Errors
/// [`ModelError::SingularInterconnection`] when `Δ − A^SS` has reciprocal
/// condition below [`RCOND_WELL_POSED`].
pub fn flatten_plant(model: &NetworkModel) -> Result<FlatPlant, ModelError> {
    let nodes = model.nodes();
    let collect = |f: fn(&SubsystemRealization) -> &DMatrix<f64>| -> Vec<&DMatrix<f64>> {
        nodes.iter().map(f).collect()
    };
    let a_tt = mat::block_diag(&collect(|n| &n.a_tt));
    let a_ts = mat::block_diag(&collect(|n| &n.a_ts));
    let a_st = mat::block_diag(&collect(|n| &n.a_st));
    let a_ss = mat::block_diag(&collect(|n| &n.a_ss));
    let b_td = mat::block_diag(&collect(|n| &n.b_td));
    let b_sd = mat::block_diag(&collect(|n| &n.b_sd));
    let b_tu = mat::block_diag(&collect(|n| &n.b_tu));
    let b_su = mat::block_diag(&collect(|n| &n.b_su));
    let c_zt = mat::block_diag(&collect(|n| &n.c_zt));
    let c_zs = mat::block_diag(&collect(|n| &n.c_zs));
    let c_yt = mat::block_diag(&collect(|n| &n.c_yt));
    let c_ys = mat::block_diag(&collect(|n| &n.c_ys));
    let d_zd = mat::block_diag(&collect(|n| &n.d_zd));
    let d_zu = mat::block_diag(&collect(|n| &n.d_zu));
    let d_yd = mat::block_diag(&collect(|n| &n.d_yd));

    let delta = build_delta(model.topology());
    let op = &delta - &a_ss;
    let rc = mat::rcond(&op);
    if rc < RCOND_WELL_POSED {
        return Err(ModelError::SingularInterconnection { rcond: rc });
    }

    // s = (Δ − A^SS)^{-1} (A^ST x + B^Sd d + B^Su u); substitute everywhere.
    let rhs = mat::hstack(&[&a_st, &b_sd, &b_su]);
    let g = if op.nrows() == 0 {
        DMatrix::zeros(0, rhs.ncols())
    } else {
        op.lu()
            .solve(&rhs)
            .ok_or(ModelError::SingularInterconnection { rcond: rc })?
    };
    let (k, f, m) = (a_tt.nrows(), b_td.ncols(), b_tu.ncols());
    let g_x = g.columns(0, k).into_owned();
    let g_d = g.columns(k, f).into_owned();
    let g_u = g.columns(k + f, m).into_owned();

    Ok(FlatPlant {
        a: &a_tt + &a_ts * &g_x,
        b_d: &b_td + &a_ts * &g_d,
        b_u: &b_tu + &a_ts * &g_u,
        c_z: &c_zt + &c_zs * &g_x,
        c_y: &c_yt + &c_ys * &g_x,
        d_zd: &d_zd + &c_zs * &g_d,
        d_zu: &d_zu + &c_zs * &g_u,
        d_yd: &d_yd + &c_ys * &g_d,
        d_yu: &c_ys * &g_u,
        state_offsets: model.state_offsets(),
    })
}

/// Eliminates the interconnection variables and returns the disturbance-to-
/// performance channel `(A_I, B_I, C_I, D_I)`.
///
/// # Errors
/// [`ModelError::SingularInterconnection`] as in [`flatten_plant`].
pub fn assemble_interconnected(model: &NetworkModel) -> Result<FlatStateSpace, ModelError> {
    let flat = flatten_plant(model)?;
    let input_offsets = {
        let mut offs = Vec::with_capacity(model.nodes().len() + 1);
        let mut acc = 0;
        for n in model.nodes() {
            offs.push(acc);
            acc += n.f();
        }
        offs.push(acc);
        offs
    };
    let output_offsets = {
        let mut offs = Vec::with_capacity(model.nodes().len() + 1);
        let mut acc = 0;
        for n in model.nodes() {
            offs.push(acc);
            acc += n.q();
        }
        offs.push(acc);
        offs
    };
    Ok(FlatStateSpace {
        a: flat.a,
        b: flat.b_d,
        c: flat.c_z,
        d: flat.d_zd,
        state_offsets: flat.state_offsets,
        input_offsets,
        output_offsets,
    })
}

/// The factors of the affine controller-to-closed-loop map
/// `Γ_i = U_iᵀ Θ_i V_i + W_i`, in the blocked channel frame
/// (plant channels first, controller channels second).
#[derive(Debug, Clone)]
pub struct UvwFactors {
    /// `U_iᵀ`, rows `(x⁺, ξ⁺, o, o^C, z)`, columns matching Θ's rows `(ξ⁺, o^C, u)`.
    pub ut: DMatrix<f64>,
    /// `V_i`, rows matching Θ's columns `(ξ, s^C, y)`, columns `(x, ξ, s, s^C, d)`.
    pub v: DMatrix<f64>,
    /// Open-loop part `W_i` with zero controller rows/columns.
    pub w: DMatrix<f64>,
}

impl UvwFactors {
    /// Rows of Γ (= rows of `W`).
    pub fn gamma_rows(&self) -> usize {
        self.w.nrows()
    }
    /// Columns of Γ.
    pub fn gamma_cols(&self) -> usize {
        self.w.ncols()
    }
    /// Θ's dimensions `(k + n^C + u, k + n^C + y)`.
    pub fn theta_dims(&self) -> (usize, usize) {
        (self.ut.ncols(), self.v.nrows())
    }
}

/// Builds `(U_iᵀ, V_i, W_i)` for a node with total controller channel width
/// `n_c`. The closed-loop signal orders are `(x, ξ, s, s^C, d)` on the input
/// side and `(x⁺, ξ⁺, o, o^C, z)` on the output side.
pub fn build_uvw(plant: &SubsystemRealization, n_c: usize) -> UvwFactors {
    let (k, n, f, q) = (plant.k(), plant.n(), plant.f(), plant.q());
    let (m, p) = (plant.u_width(), plant.y_width());
    let i_k = DMatrix::identity(k, k);
    let i_nc = DMatrix::identity(n_c, n_c);
    let z = DMatrix::<f64>::zeros;

    let ut = mat::block_matrix(&[
        &[&z(k, k), &z(k, n_c), &plant.b_tu],
        &[&i_k, &z(k, n_c), &z(k, m)],
        &[&z(n, k), &z(n, n_c), &plant.b_su],
        &[&z(n_c, k), &i_nc, &z(n_c, m)],
        &[&z(q, k), &z(q, n_c), &plant.d_zu],
    ]);
    let v = mat::block_matrix(&[
        &[&z(k, k), &i_k, &z(k, n), &z(k, n_c), &z(k, f)],
        &[&z(n_c, k), &z(n_c, k), &z(n_c, n), &i_nc, &z(n_c, f)],
        &[&plant.c_yt, &z(p, k), &plant.c_ys, &z(p, n_c), &plant.d_yd],
    ]);
    let w = mat::block_matrix(&[
        &[&plant.a_tt, &z(k, k), &plant.a_ts, &z(k, n_c), &plant.b_td],
        &[&z(k, k), &z(k, k), &z(k, n), &z(k, n_c), &z(k, f)],
        &[&plant.a_st, &z(n, k), &plant.a_ss, &z(n, n_c), &plant.b_sd],
        &[&z(n_c, k), &z(n_c, k), &z(n_c, n), &z(n_c, n_c), &z(n_c, f)],
        &[&plant.c_zt, &z(q, k), &plant.c_zs, &z(q, n_c), &plant.d_zd],
    ]);
    UvwFactors { ut, v, w }
}

/// Map from blocked channel positions `(all plant blocks, then all controller
/// blocks)` to interleaved positions `(plant block, controller block, per
/// neighbor ascending)`. Entry `b` holds the interleaved index of blocked
/// index `b`.
pub fn interleave_map(plant_widths: &[usize], ctrl_widths: &[usize]) -> Vec<usize> {
    assert_eq!(plant_widths.len(), ctrl_widths.len(), "per-neighbor width lists must align");
    let n_plant: usize = plant_widths.iter().sum();
    let total = n_plant + ctrl_widths.iter().sum::<usize>();
    let mut map = vec![0usize; total];
    let mut blocked_p = 0; // cursor in plant part
    let mut blocked_c = n_plant; // cursor in controller part
    let mut inter = 0; // cursor in interleaved order
    for (&pw, &cw) in plant_widths.iter().zip(ctrl_widths) {
        for _ in 0..pw {
            map[blocked_p] = inter;
            blocked_p += 1;
            inter += 1;
        }
        for _ in 0..cw {
            map[blocked_c] = inter;
            blocked_c += 1;
            inter += 1;
        }
    }
    map
}

/// One node's closed loop: the matrix `Γ_i` mapping `(x, ξ, s^K, d)` to
/// `(x⁺, ξ⁺, o^K, z)` with channels stored in interleaved order, plus the
/// parameter Θ it came from.
#[derive(Debug, Clone)]
pub struct ClosedLoopLocal {
    gamma: DMatrix<f64>,
    theta: DMatrix<f64>,
    k: usize,
    f: usize,
    q: usize,
    plant_widths: Vec<usize>,
    ctrl_widths: Vec<usize>,
}

impl ClosedLoopLocal {
    /// Closed-loop state dimension `2k` (plant state stacked on controller state).
    pub fn state_dim(&self) -> usize {
        2 * self.k
    }

    /// Total interleaved channel width `n + n^C`.
    pub fn channel_dim(&self) -> usize {
        self.plant_widths.iter().sum::<usize>() + self.ctrl_widths.iter().sum::<usize>()
    }

    /// Interleaved per-neighbor channel widths `n_ij + n_ij^C`.
    pub fn channel_widths(&self) -> Vec<usize> {
        self.plant_widths.iter().zip(&self.ctrl_widths).map(|(&a, &b)| a + b).collect()
    }

    pub fn plant_widths(&self) -> &[usize] {
        &self.plant_widths
    }

    pub fn ctrl_widths(&self) -> &[usize] {
        &self.ctrl_widths
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    /// Repackages the closed-loop node as a plain subsystem (no `u`/`y`
    /// ports), so network-level analysis applies unchanged.
    pub fn to_subsystem(&self) -> SubsystemRealization {
        let (kk, nn) = (self.state_dim(), self.channel_dim());
        let (f, q) = (self.f, self.q);
        let g = &self.gamma;
        SubsystemRealization {
            a_tt: g.view((0, 0), (kk, kk)).into_owned(),
            a_ts: g.view((0, kk), (kk, nn)).into_owned(),
            a_st: g.view((kk, 0), (nn, kk)).into_owned(),
            a_ss: g.view((kk, kk), (nn, nn)).into_owned(),
            b_td: g.view((0, kk + nn), (kk, f)).into_owned(),
            b_sd: g.view((kk, kk + nn), (nn, f)).into_owned(),
            c_zt: g.view((kk + nn, 0), (q, kk)).into_owned(),
            c_zs: g.view((kk + nn, kk), (q, nn)).into_owned(),
            d_zd: g.view((kk + nn, kk + nn), (q, f)).into_owned(),
            ..SubsystemRealization::zeros(kk, nn, f, q, 0, 0)
        }
    }

    /// Verifies `Γ_i = U_iᵀ Θ_i V_i + W_i` exactly (the stored Γ is the
    /// blocked product permuted by the channel interleaving, so equality is
    /// bit-for-bit).
    pub fn theta_consistent(&self, plant: &SubsystemRealization) -> bool {
        let n_c: usize = self.ctrl_widths.iter().sum();
        let uvw = build_uvw(plant, n_c);
        let blocked = &uvw.ut * &self.theta * &uvw.v + &uvw.w;
        interleave_gamma(&blocked, plant, &self.plant_widths, &self.ctrl_widths) == self.gamma
    }
}

/// Permutes a blocked-frame Γ (channels ordered plant-then-controller) into
/// the interleaved channel order on both rows and columns.
fn interleave_gamma(
    blocked: &DMatrix<f64>,
    plant: &SubsystemRealization,
    plant_widths: &[usize],
    ctrl_widths: &[usize],
) -> DMatrix<f64> {
    let (k, f, q) = (plant.k(), plant.f(), plant.q());
    let map = interleave_map(plant_widths, ctrl_widths);
    let nk = map.len();
    let rows = blocked.nrows();
    let cols = blocked.ncols();
    // Row order: (x⁺ 2k | channels nk | z q); column order: (x 2k | channels nk | d f).
    debug_assert_eq!(rows, 2 * k + nk + q);
    debug_assert_eq!(cols, 2 * k + nk + f);
    let row_perm: Vec<usize> = (0..rows)
        .map(|r| {
            if r < 2 * k || r >= 2 * k + nk {
                r
            } else {
                2 * k + map[r - 2 * k]
            }
        })
        .collect();
    let col_perm: Vec<usize> = (0..cols)
        .map(|c| {
            if c < 2 * k || c >= 2 * k + nk {
                c
            } else {
                2 * k + map[c - 2 * k]
            }
        })
        .collect();
    let mut out = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            out[(row_perm[r], col_perm[c])] = blocked[(r, c)];
        }
    }
    out
}

/// Closes the loop around one node: forms `Γ_i = U_iᵀ Θ_i V_i + W_i` and
/// stores it with channels interleaved (plant block before controller block,
/// per neighbor ascending).
///
/// `plant_widths`/`ctrl_widths` list per-neighbor channel widths in canonical
/// (ascending-neighbor) order; their sums must match the plant's `n` and the
/// controller width implied by Θ.
///
/// # Errors
/// [`ModelError::Dimension`] on any size mismatch.
pub fn close_local(
    plant: &SubsystemRealization,
    plant_widths: &[usize],
    ctrl_widths: &[usize],
    theta: &DMatrix<f64>,
) -> Result<ClosedLoopLocal, ModelError> {
    if plant_widths.len() != ctrl_widths.len() {
        return Err(ModelError::Dimension(
            "per-neighbor plant/controller width lists must have equal length".into(),
        ));
    }
    if plant_widths.iter().sum::<usize>() != plant.n() {
        return Err(ModelError::Dimension(format!(
            "plant widths sum to {} but the node has n = {}",
            plant_widths.iter().sum::<usize>(),
            plant.n()
        )));
    }
    let n_c: usize = ctrl_widths.iter().sum();
    let uvw = build_uvw(plant, n_c);
    let (tr, tc) = uvw.theta_dims();
    if theta.nrows() != tr || theta.ncols() != tc {
        return Err(ModelError::Dimension(format!(
            "Θ is {}x{}, expected {}x{}",
            theta.nrows(),
            theta.ncols(),
            tr,
            tc
        )));
    }
    let blocked = &uvw.ut * theta * &uvw.v + &uvw.w;
    let gamma = interleave_gamma(&blocked, plant, plant_widths, ctrl_widths);
    Ok(ClosedLoopLocal {
        gamma,
        theta: theta.clone(),
        k: plant.k(),
        f: plant.f(),
        q: plant.q(),
        plant_widths: plant_widths.to_vec(),
        ctrl_widths: ctrl_widths.to_vec(),
    })
}

/// Assembles the closed-loop network (every node closed with its own Θ) as a
/// [`NetworkModel`] over the widened channels `n_ij + n_ij^C`.
///
/// `ctrl_widths(i, j)` must give the controller channel width for the pair —
/// symmetric, and zero wherever the plant pair width is zero.
pub fn closed_loop_network(
    model: &NetworkModel,
    locals: &[ClosedLoopLocal],
) -> Result<NetworkModel, ModelError> {
    if locals.len() != model.nodes().len() {
        return Err(ModelError::Dimension("one ClosedLoopLocal required per node".into()));
    }
    let topo = model.topology();
    let mut widths = Vec::new();
    for (hi, lo) in topo.pairs() {
        let layout = canonical_channel_layout(topo, hi);
        let slot = layout.iter().position(|&(j, _, _)| j == lo).expect("pair present");
        let w_cl = locals[hi].plant_widths()[slot] + locals[hi].ctrl_widths()[slot];
        widths.push((hi, lo, w_cl));
    }
    let cl_topo = Topology::new(topo.node_count(), &widths)?;
    let nodes = locals.iter().map(ClosedLoopLocal::to_subsystem).collect();
    NetworkModel::new(cl_topo, nodes)
}
