//! Controller synthesis from per-node matrix inequalities.
//!
//! Synthesis runs in three steps, mirroring how the certificates are
//! structured:
//!
//! 1. **Existence.** A semidefinite program over per-node storage pairs
//!    `(X_i, Y_i)`, per-node disturbance weights `(α_i, β_i)`, and per-channel
//!    multiplier families decides whether a structured controller achieving
//!    the level γ exists. The conditions couple neighbors only through the
//!    channel families, so the program's per-node blocks have constant size
//!    regardless of the network.
//! 2. **Completion.** The storage pairs are completed to closed-loop storage
//!    matrices `X_i^K`, and (in the distributed case) the channel families
//!    are completed to multipliers over the widened plant + controller
//!    channels by an indefinite low-rank factorization.
//! 3. **Reconstruction.** Each node's controller parameter `Θ_i` is solved
//!    from a quadratic matrix inequality whose middle matrix is assembled
//!    from the completed certificate; the loop is closed locally and the
//!    whole construction is re-verified independently.
//!
//! Decentralized synthesis fixes the channel multipliers a priori (skipping
//! their completion) and yields controllers with no mutual communication;
//! centralized synthesis collapses the network to one node first.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::analysis::{
    self, assemble_z_blocks, AnalysisCertificate, AnalysisError, ClosedLoopReport, MultiplierSet,
    ZBlocks,
};
use crate::mat;
use crate::netmodel::{
    self, canonical_channel_layout, close_local, ClosedLoopLocal, ModelError, NetworkModel,
    SubsystemRealization, Topology, UvwFactors,
};
use crate::sdp::{
    AffineMatrixExpr, ConicBackend, SdpError, SdpProblem, SdpSolution, SolveOptions, VarId,
};

/// Errors from the synthesis pipeline.
#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error("model violates a synthesis hypothesis: {0}")]
    HypothesisViolated(String),
    #[error("existence program infeasible at γ = {gamma} (worst margin {worst_margin:e})")]
    Infeasible { gamma: f64, worst_margin: f64 },
    #[error("node {node}: I − X_iY_i is nearly singular (σ_min = {sigma_min:e}); storage completion is ill-conditioned")]
    NearSingularCompletion { node: usize, sigma_min: f64 },
    #[error("node {node}: storage completion postcondition failed (relative error {error:e})")]
    CompletionPostcondition { node: usize, error: f64 },
    #[error("pair ({},{}): dual channel family is numerically singular (rcond = {rcond:e})", pair.0, pair.1)]
    SingularY { pair: (usize, usize), rcond: f64 },
    #[error("pair ({},{}): X − Y⁻¹ has inertia ({}, {}, {}), expected ({}, 0, {})", pair.0, pair.1, got.0, got.1, got.2, want.0, want.1)]
    InertiaMismatch { pair: (usize, usize), got: (usize, usize, usize), want: (usize, usize) },
    #[error("node {node}: fixed channel weights are singular; cannot form the dual weights")]
    SingularZ { node: usize },
    #[error("node {node}: reconstruction middle matrix is numerically singular (rcond = {rcond:e})")]
    SingularPi { node: usize, rcond: f64 },
    #[error("node {node}: {which} projection of the reconstruction inequality fails (margin {margin:e})")]
    EliminationPreconditionFailed { node: usize, which: &'static str, margin: f64 },
    #[error("node {node}: no controller parameter satisfies the reconstruction inequality (best λ_max = {lambda_max:e})")]
    ReconstructionFailed { node: usize, lambda_max: f64 },
}

/// Choice of channel multiplier structure for the existence program.
#[derive(Debug, Clone)]
pub enum MultiplierStructure {
    /// Families are decision variables (distributed synthesis; controllers
    /// communicate over the plant graph with channel widths `3·n_ij`).
    Free,
    /// Families are fixed a priori (decentralized synthesis; controllers are
    /// purely local). The dual weights are the per-node inverses of the
    /// induced channel weights.
    Fixed(MultiplierSet),
}

/// Variable handles of a built existence program.
#[derive(Debug, Clone)]
pub struct ExistenceHandles {
    pub x: Vec<VarId>,
    pub y: Vec<VarId>,
    pub alpha: Vec<VarId>,
    pub beta: Vec<VarId>,
    /// `X11` families per ordered pair (empty in fixed-multiplier mode).
    pub x11: BTreeMap<(usize, usize), VarId>,
    /// `X12` families per unordered pair `(i, j)`, `i > j`.
    pub x12: BTreeMap<(usize, usize), VarId>,
    pub y11: BTreeMap<(usize, usize), VarId>,
    pub y12: BTreeMap<(usize, usize), VarId>,
}

/// Numeric outcome of the existence step.
#[derive(Debug, Clone)]
pub struct ExistenceCertificate {
    pub gamma: f64,
    pub x: Vec<DMatrix<f64>>,
    pub y: Vec<DMatrix<f64>>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Primal channel families (the fixed ones in decentralized mode).
    pub x_mult: MultiplierSet,
    /// Dual channel families (in decentralized mode these are implied by the
    /// fixed primal families and not stored; `None`).
    pub y_mult: Option<MultiplierSet>,
}

/// A synthesized node controller: the parameter `Θ_i` with its partition
/// widths. Rows are `(ξ⁺, o^C, u)`, columns `(ξ, s^C, y)`.
#[derive(Debug, Clone)]
pub struct ControllerRealization {
    pub theta: DMatrix<f64>,
    pub k: usize,
    pub n_c: usize,
    pub m: usize,
    pub p: usize,
}

impl ControllerRealization {
    pub fn new(theta: DMatrix<f64>, k: usize, n_c: usize, m: usize, p: usize) -> Self {
        assert_eq!(theta.nrows(), k + n_c + m, "Θ rows");
        assert_eq!(theta.ncols(), k + n_c + p, "Θ cols");
        Self { theta, k, n_c, m, p }
    }

    pub fn a_tt_c(&self) -> DMatrix<f64> {
        self.theta.view((0, 0), (self.k, self.k)).into_owned()
    }
    pub fn a_ts_c(&self) -> DMatrix<f64> {
        self.theta.view((0, self.k), (self.k, self.n_c)).into_owned()
    }
    pub fn b_t_c(&self) -> DMatrix<f64> {
        self.theta.view((0, self.k + self.n_c), (self.k, self.p)).into_owned()
    }
    pub fn a_st_c(&self) -> DMatrix<f64> {
        self.theta.view((self.k, 0), (self.n_c, self.k)).into_owned()
    }
    pub fn a_ss_c(&self) -> DMatrix<f64> {
        self.theta.view((self.k, self.k), (self.n_c, self.n_c)).into_owned()
    }
    pub fn b_s_c(&self) -> DMatrix<f64> {
        self.theta.view((self.k, self.k + self.n_c), (self.n_c, self.p)).into_owned()
    }
    pub fn c_t_c(&self) -> DMatrix<f64> {
        self.theta.view((self.k + self.n_c, 0), (self.m, self.k)).into_owned()
    }
    pub fn c_s_c(&self) -> DMatrix<f64> {
        self.theta.view((self.k + self.n_c, self.k), (self.m, self.n_c)).into_owned()
    }
    pub fn d_c(&self) -> DMatrix<f64> {
        self.theta
            .view((self.k + self.n_c, self.k + self.n_c), (self.m, self.p))
            .into_owned()
    }
}

/// Everything produced by a successful synthesis run.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    /// The network the controllers attach to (for centralized synthesis this
    /// is the flattened single-node network).
    pub model: NetworkModel,
    pub gamma: f64,
    pub existence: ExistenceCertificate,
    pub controllers: Vec<ControllerRealization>,
    pub locals: Vec<ClosedLoopLocal>,
    /// Per-node disturbance weights recovered from `(α_i, β_i)`.
    pub rho: Vec<f64>,
    /// Certificate for the closed-loop network (widened channels).
    pub closed_certificate: AnalysisCertificate,
    /// Independent re-verification of the closed loop.
    pub report: ClosedLoopReport,
}

/// Target performance level.
#[derive(Debug, Clone, Copy)]
pub enum GammaSpec {
    Fixed(f64),
    /// Bisect the smallest feasible level inside `[lo, hi]` to relative gap
    /// `rel_tol`, then synthesize at that level.
    Bisect { lo: f64, hi: f64, rel_tol: f64 },
}

/// Synthesis knobs.
#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub sdp: SolveOptions,
    /// Extra definiteness margin δ for `[X, I; I, Y] ⪰ δI` on the retry after
    /// a near-singular storage completion.
    pub completion_retry_margin: f64,
    /// Seed for the randomized repair draws inside the Θ solver.
    pub theta_seed: u64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            sdp: SolveOptions::default(),
            completion_retry_margin: 1e-6,
            theta_seed: 0,
        }
    }
}

/// Fixed channel multipliers used by decentralized synthesis when the caller
/// does not supply any: `X11 = 0` and `X12 = ½I` per channel. These induce
/// the neutral supply `σ_ij = o_ijᵀ s_ij` (power-flow pairing), whose weights
/// are always invertible.
pub fn decentralized_default_multipliers(topology: &Topology) -> MultiplierSet {
    let mut x11 = BTreeMap::new();
    let mut x12 = BTreeMap::new();
    for (hi, lo) in topology.pairs() {
        let w = topology.width(hi, lo);
        x11.insert((hi, lo), DMatrix::zeros(w, w));
        x11.insert((lo, hi), DMatrix::zeros(w, w));
        x12.insert((hi, lo), DMatrix::identity(w, w) * 0.5);
    }
    MultiplierSet::new(topology, x11, x12).expect("default multipliers are well-formed")
}

/// Per-node disturbance weight for the closed loop: the smallest ρ with
/// `ρ ≥ α` (primal side) and `ρ ≥ 1/β` (dual side).
pub fn recover_rho(alpha: f64, beta: f64) -> f64 {
    if alpha * beta >= 1.0 {
        alpha
    } else {
        1.0 / beta
    }
}

fn check_hypotheses(model: &NetworkModel) -> Result<(), SynthesisError> {
    for (i, node) in model.nodes().iter().enumerate() {
        if mat::max_abs(&node.b_sd) != 0.0 {
            return Err(SynthesisError::HypothesisViolated(format!(
                "node {i}: disturbances must not feed through to outgoing channels (B^Sd ≠ 0)"
            )));
        }
        if mat::max_abs(&node.d_yd) != 0.0 {
            return Err(SynthesisError::HypothesisViolated(format!(
                "node {i}: disturbances must not feed through to measurements (D^yd ≠ 0)"
            )));
        }
    }
    Ok(())
}

/// Row offsets of the six slots `(x, x⁺, o, s, z, d)` in the stacked
/// certificate factors for a node.
struct SlotOffsets {
    x: usize,
    x_next: usize,
    o: usize,
    s: usize,
    z: usize,
    d: usize,
    total: usize,
}

fn slot_offsets(k: usize, n: usize, q: usize, f: usize) -> SlotOffsets {
    SlotOffsets {
        x: 0,
        x_next: k,
        o: 2 * k,
        s: 2 * k + n,
        z: 2 * k + 2 * n,
        d: 2 * k + 2 * n + q,
        total: 2 * k + 2 * n + q + f,
    }
}

/// Adds the congruenced certificate form `Fᵀ · diag(−P, P, channel weights,
/// I_q, −scale·I_f) · F` to `expr`, with `P` (storage), the channel families,
/// and the scale all decision variables — or the channel weights a fixed
/// matrix in decentralized mode.
#[allow(clippy::too_many_arguments)]
fn add_certificate_form(
    expr: &mut AffineMatrixExpr,
    f_outer: &DMatrix<f64>,
    node: usize,
    topology: &Topology,
    k: usize,
    q: usize,
    f_dist: usize,
    storage: VarId,
    scale: VarId,
    fam11: Option<&BTreeMap<(usize, usize), VarId>>,
    fam12: Option<&BTreeMap<(usize, usize), VarId>>,
    fixed_pair: Option<&DMatrix<f64>>,
) {
    let n = topology.node_channel_width(node);
    let off = slot_offsets(k, n, q, f_dist);
    assert_eq!(f_outer.nrows(), off.total, "outer factor rows");
    let rows = |start: usize, len: usize| f_outer.view((start, 0), (len, f_outer.ncols())).into_owned();

    // Storage: −P on the x rows, +P on the x⁺ rows.
    expr.add_congruence(storage, &rows(off.x, k), -1.0);
    expr.add_congruence(storage, &rows(off.x_next, k), 1.0);

    // Channel weights on the stacked (o, s) rows.
    match (fam11, fam12, fixed_pair) {
        (Some(f11), Some(f12), None) => {
            for (j, local, w) in canonical_channel_layout(topology, node) {
                let f_o = rows(off.o + local, w);
                let f_s = rows(off.s + local, w);
                // Z11 slot: −V11_{node,j} on o rows.
                expr.add_congruence(f11[&(node, j)], &f_o, -1.0);
                // Z22 slot: +V11_{j,node} on s rows.
                expr.add_congruence(f11[&(j, node)], &f_s, 1.0);
                // Z12 slot: −V12_{node,j} between o and s rows, where the
                // stored family is keyed (max, min) and mirrored by
                // V12_{j,i} = −V12_{i,j}ᵀ.
                if node > j {
                    expr.add_sym_pair(f12[&(node, j)], -f_o.transpose(), f_s);
                } else {
                    expr.add_sym_pair(f12[&(j, node)], f_s.transpose(), f_o);
                }
            }
        }
        (None, None, Some(pair)) => {
            let f_os = rows(off.o, 2 * n);
            expr.add_constant(&mat::symmetrize(&(f_os.transpose() * pair * &f_os)));
        }
        _ => unreachable!("exactly one channel weight source"),
    }

    // Performance rows: +I_q.
    let f_z = rows(off.z, q);
    expr.add_constant(&(f_z.transpose() * &f_z));
    // Disturbance rows: −scale·I_f.
    let f_d = rows(off.d, f_dist);
    expr.add_scalar_gain(scale, -(f_d.transpose() * &f_d));
}

/// Builds the existence program for a level γ. `xy_margin` strengthens the
/// storage coupling to `[X, I; I, Y] ⪰ xy_margin·I` (used on completion
/// retries).
pub fn build_existence_problem(
    model: &NetworkModel,
    gamma: f64,
    structure: &MultiplierStructure,
    xy_margin: f64,
) -> Result<(SdpProblem, ExistenceHandles), SynthesisError> {
    check_hypotheses(model)?;
    let topo = model.topology();
    let l = model.nodes().len();
    let mut p = SdpProblem::new();

    let mut handles = ExistenceHandles {
        x: Vec::with_capacity(l),
        y: Vec::with_capacity(l),
        alpha: Vec::with_capacity(l),
        beta: Vec::with_capacity(l),
        x11: BTreeMap::new(),
        x12: BTreeMap::new(),
        y11: BTreeMap::new(),
        y12: BTreeMap::new(),
    };
    for (i, node) in model.nodes().iter().enumerate() {
        let k = node.k();
        handles.x.push(p.add_symmetric(format!("X_{i}"), k));
        handles.y.push(p.add_symmetric(format!("Y_{i}"), k));
        handles.alpha.push(p.add_scalar(format!("alpha_{i}")));
        handles.beta.push(p.add_scalar(format!("beta_{i}")));
    }
    let free = matches!(structure, MultiplierStructure::Free);
    if free {
        for (hi, lo) in topo.pairs() {
            let w = topo.width(hi, lo);
            for (i, j) in [(hi, lo), (lo, hi)] {
                handles.x11.insert((i, j), p.add_symmetric(format!("X11_{i}_{j}"), w));
                handles.y11.insert((i, j), p.add_symmetric(format!("Y11_{i}_{j}"), w));
            }
            handles.x12.insert((hi, lo), p.add_rectangular(format!("X12_{hi}_{lo}"), w, w));
            handles.y12.insert((hi, lo), p.add_rectangular(format!("Y12_{hi}_{lo}"), w, w));
        }
    }

    // Fixed-multiplier mode: per-node channel weights and their inverses.
    let fixed_pairs: Option<Vec<(DMatrix<f64>, DMatrix<f64>)>> = match structure {
        MultiplierStructure::Free => None,
        MultiplierStructure::Fixed(ms) => {
            let mut v = Vec::with_capacity(l);
            for i in 0..l {
                let zb = assemble_z_blocks(ms, topo, i);
                let zpair = zb.pair();
                let wpair = if zpair.nrows() == 0 {
                    zpair.clone()
                } else {
                    if mat::rcond(&zpair) < 1e-12 {
                        return Err(SynthesisError::SingularZ { node: i });
                    }
                    mat::symmetrize(
                        &zpair.clone().try_inverse().ok_or(SynthesisError::SingularZ { node: i })?,
                    )
                };
                v.push((zpair, wpair));
            }
            Some(v)
        }
    };

    let mut trace = AffineMatrixExpr::zeros(1);
    let mut trace_const = gamma * gamma;

    for (i, node) in model.nodes().iter().enumerate() {
        let (k, f, q) = (node.k(), node.f(), node.q());

        // Storage coupling [X, I; I, Y] ≻ 0 (optionally ⪰ margin·I).
        let mut xy = AffineMatrixExpr::zeros(2 * k);
        let mut c = DMatrix::zeros(2 * k, 2 * k);
        c.view_mut((0, k), (k, k)).copy_from(&DMatrix::identity(k, k));
        c.view_mut((k, 0), (k, k)).copy_from(&DMatrix::identity(k, k));
        if xy_margin > 0.0 {
            c -= DMatrix::identity(2 * k, 2 * k) * xy_margin;
        }
        xy.add_constant(&c);
        let sel_x = mat::hstack(&[&DMatrix::identity(k, k), &DMatrix::zeros(k, k)]);
        let sel_y = mat::hstack(&[&DMatrix::zeros(k, k), &DMatrix::identity(k, k)]);
        xy.add_congruence(handles.x[i], &sel_x, 1.0);
        xy.add_congruence(handles.y[i], &sel_y, 1.0);
        p.add_posdef(format!("storage coupling node {i}"), xy);

        // Primal condition: kernel of the measurement map, congruenced onto
        // the T-side certificate factor.
        let meas = mat::hstack(&[&node.c_yt, &node.c_ys, &node.d_yd]);
        let psi = mat::null_space(&meas);
        let f_outer = analysis::build_ti(node) * &psi;
        let mut ex = AffineMatrixExpr::zeros(f_outer.ncols());
        add_certificate_form(
            &mut ex,
            &f_outer,
            i,
            topo,
            k,
            q,
            f,
            handles.x[i],
            handles.alpha[i],
            free.then_some(&handles.x11),
            free.then_some(&handles.x12),
            fixed_pairs.as_ref().map(|v| &v[i].0),
        );
        p.add_negdef(format!("primal condition node {i}"), ex);

        // Dual condition: kernel of the control map, congruenced onto the
        // S-side factor.
        let ctrl = mat::hstack(&[
            &node.b_tu.transpose(),
            &node.b_su.transpose(),
            &node.d_zu.transpose(),
        ]);
        let phi = mat::null_space(&ctrl);
        let g_outer = analysis::build_si(node) * &phi;
        let mut ey = AffineMatrixExpr::zeros(g_outer.ncols());
        add_certificate_form(
            &mut ey,
            &g_outer,
            i,
            topo,
            k,
            q,
            f,
            handles.y[i],
            handles.beta[i],
            free.then_some(&handles.y11),
            free.then_some(&handles.y12),
            fixed_pairs.as_ref().map(|v| &v[i].1),
        );
        p.add_posdef(format!("dual condition node {i}"), ey);

        // Positive disturbance weights.
        for (name, var) in [("alpha", handles.alpha[i]), ("beta", handles.beta[i])] {
            let mut pos = AffineMatrixExpr::zeros(1);
            pos.add_constant(&DMatrix::from_element(1, 1, -1e-6));
            pos.add_scalar_gain(var, DMatrix::from_element(1, 1, 1.0));
            p.add_nonneg(format!("{name}_{i} positive"), pos);
        }

        // Trace condition contributions.
        trace.add_trace_quad(handles.x[i], &node.b_td, -1.0);
        trace_const -= (node.d_zd.transpose() * &node.d_zd).trace();

        // Gentle regularization keeps the interior point bounded without
        // pushing X·Y toward the completion boundary.
        p.add_trace_objective(handles.x[i], 1e-6);
        p.add_trace_objective(handles.y[i], 1e-6);
    }
    trace.add_constant(&DMatrix::from_element(1, 1, trace_const));
    p.add_nonneg("performance trace", trace);

    Ok((p, handles))
}

/// Solves the existence program at a fixed level.
pub fn solve_existence(
    model: &NetworkModel,
    gamma: f64,
    structure: &MultiplierStructure,
    xy_margin: f64,
    backend: &dyn ConicBackend,
    opts: &SolveOptions,
) -> Result<ExistenceCertificate, SynthesisError> {
    let (problem, handles) = build_existence_problem(model, gamma, structure, xy_margin)?;
    let sol = problem.solve(backend, opts)?;
    if !sol.verified {
        return Err(SynthesisError::Infeasible { gamma, worst_margin: sol.worst_margin() });
    }
    Ok(extract_certificate(model, gamma, structure, &handles, &sol))
}

fn extract_certificate(
    model: &NetworkModel,
    gamma: f64,
    structure: &MultiplierStructure,
    handles: &ExistenceHandles,
    sol: &SdpSolution,
) -> ExistenceCertificate {
    let topo = model.topology();
    let sym = |m: &DMatrix<f64>| mat::symmetrize(m);
    let x: Vec<_> = handles.x.iter().map(|&v| sym(sol.value(v))).collect();
    let y: Vec<_> = handles.y.iter().map(|&v| sym(sol.value(v))).collect();
    let alpha: Vec<_> = handles.alpha.iter().map(|&v| sol.scalar(v)).collect();
    let beta: Vec<_> = handles.beta.iter().map(|&v| sol.scalar(v)).collect();
    let (x_mult, y_mult) = match structure {
        MultiplierStructure::Fixed(ms) => (ms.clone(), None),
        MultiplierStructure::Free => {
            let collect = |f11: &BTreeMap<(usize, usize), VarId>,
                           f12: &BTreeMap<(usize, usize), VarId>| {
                let mut m11 = BTreeMap::new();
                let mut m12 = BTreeMap::new();
                for (&key, &var) in f11 {
                    m11.insert(key, sym(sol.value(var)));
                }
                for (&key, &var) in f12 {
                    m12.insert(key, sol.value(var).clone());
                }
                MultiplierSet::new(topo, m11, m12).expect("families match the topology")
            };
            (
                collect(&handles.x11, &handles.x12),
                Some(collect(&handles.y11, &handles.y12)),
            )
        }
    };
    ExistenceCertificate { gamma, x, y, alpha, beta, x_mult, y_mult }
}

/// Handles into the analysis program's variables.
#[derive(Debug, Clone)]
pub struct AnalysisHandles {
    pub x: Vec<VarId>,
    pub rho: Vec<VarId>,
    pub x11: BTreeMap<(usize, usize), VarId>,
    pub x12: BTreeMap<(usize, usize), VarId>,
}

/// Builds the network-analysis program at level γ: one certificate inequality
/// per node over `(X_i, ρ_i)` and the free channel families, `X_i ≻ 0`,
/// `ρ_i > 0`, and the global trace row. A verified solution certifies
/// well-posedness, stability, and `‖·‖ < γ` for the open network.
///
/// # Errors
/// [`SynthesisError::HypothesisViolated`] if some `B^Sd ≠ 0`.
pub fn build_analysis_problem(
    model: &NetworkModel,
    gamma: f64,
) -> Result<(SdpProblem, AnalysisHandles), SynthesisError> {
    for (i, node) in model.nodes().iter().enumerate() {
        if mat::max_abs(&node.b_sd) != 0.0 {
            return Err(SynthesisError::HypothesisViolated(format!(
                "node {i}: disturbances must not feed through to outgoing channels (B^Sd ≠ 0)"
            )));
        }
    }
    let topo = model.topology();
    let l = model.nodes().len();
    let mut p = SdpProblem::new();
    let mut handles = AnalysisHandles {
        x: Vec::with_capacity(l),
        rho: Vec::with_capacity(l),
        x11: BTreeMap::new(),
        x12: BTreeMap::new(),
    };
    for (i, node) in model.nodes().iter().enumerate() {
        handles.x.push(p.add_symmetric(format!("X_{i}"), node.k()));
        handles.rho.push(p.add_scalar(format!("rho_{i}")));
    }
    for (hi, lo) in topo.pairs() {
        let w = topo.width(hi, lo);
        for (i, j) in [(hi, lo), (lo, hi)] {
            handles.x11.insert((i, j), p.add_symmetric(format!("X11_{i}_{j}"), w));
        }
        handles.x12.insert((hi, lo), p.add_rectangular(format!("X12_{hi}_{lo}"), w, w));
    }

    let mut trace = AffineMatrixExpr::zeros(1);
    let mut trace_const = gamma * gamma;
    for (i, node) in model.nodes().iter().enumerate() {
        let (k, f, q) = (node.k(), node.f(), node.q());

        let mut pos = AffineMatrixExpr::zeros(k);
        pos.add_congruence(handles.x[i], &DMatrix::identity(k, k), 1.0);
        p.add_posdef(format!("storage positive node {i}"), pos);

        let mut rho_pos = AffineMatrixExpr::zeros(1);
        rho_pos.add_constant(&DMatrix::from_element(1, 1, -1e-6));
        rho_pos.add_scalar_gain(handles.rho[i], DMatrix::from_element(1, 1, 1.0));
        p.add_nonneg(format!("rho_{i} positive"), rho_pos);

        let f_outer = analysis::build_ti(node);
        let mut cert = AffineMatrixExpr::zeros(f_outer.ncols());
        add_certificate_form(
            &mut cert,
            &f_outer,
            i,
            topo,
            k,
            q,
            f,
            handles.x[i],
            handles.rho[i],
            Some(&handles.x11),
            Some(&handles.x12),
            None,
        );
        p.add_negdef(format!("certificate node {i}"), cert);

        trace.add_trace_quad(handles.x[i], &node.b_td, -1.0);
        trace_const -= (node.d_zd.transpose() * &node.d_zd).trace();
        p.add_trace_objective(handles.x[i], 1e-6);
    }
    trace.add_constant(&DMatrix::from_element(1, 1, trace_const));
    p.add_nonneg("performance trace", trace);
    Ok((p, handles))
}

/// Searches for an analysis certificate at level γ by SDP and re-verifies it
/// independently before returning it.
///
/// # Errors
/// [`SynthesisError::Infeasible`] when no verified certificate is found.
pub fn find_certificate(
    model: &NetworkModel,
    gamma: f64,
    backend: &dyn ConicBackend,
    opts: &SolveOptions,
) -> Result<AnalysisCertificate, SynthesisError> {
    let (problem, handles) = build_analysis_problem(model, gamma)?;
    let sol = problem.solve(backend, opts)?;
    if !sol.verified {
        return Err(SynthesisError::Infeasible { gamma, worst_margin: sol.worst_margin() });
    }
    let mut m11 = BTreeMap::new();
    let mut m12 = BTreeMap::new();
    for (&key, &var) in &handles.x11 {
        m11.insert(key, mat::symmetrize(sol.value(var)));
    }
    for (&key, &var) in &handles.x12 {
        m12.insert(key, sol.value(var).clone());
    }
    let cert = AnalysisCertificate {
        gamma,
        x: handles.x.iter().map(|&v| mat::symmetrize(sol.value(v))).collect(),
        rho: handles.rho.iter().map(|&v| sol.scalar(v)).collect(),
        multipliers: MultiplierSet::new(model.topology(), m11, m12)
            .expect("families match the topology"),
    };
    let residuals = analysis::analysis_residuals(model, &cert)?;
    if !residuals.strict {
        return Err(SynthesisError::Infeasible { gamma, worst_margin: sol.worst_margin() });
    }
    Ok(cert)
}

/// Finds the smallest level `γ ∈ [lo, hi]` admitting an analysis certificate,
/// to relative gap `rel_tol`, and returns that level with its certificate.
///
/// # Errors
/// [`SynthesisError::Infeasible`] when even `hi` admits no certificate.
pub fn min_analysis_gamma(
    model: &NetworkModel,
    lo: f64,
    hi: f64,
    rel_tol: f64,
    backend: &dyn ConicBackend,
    opts: &SolveOptions,
) -> Result<(f64, AnalysisCertificate), SynthesisError> {
    build_analysis_problem(model, hi)?; // surface hypothesis violations once
    let build = |g: f64| {
        build_analysis_problem(model, g).expect("hypotheses already checked").0
    };
    let (gamma, _) = match crate::sdp::bisect_gamma(&build, lo, hi, rel_tol, backend, opts) {
        Ok(r) => r,
        Err(SdpError::InfeasibleAtHi { gamma }) => {
            return Err(SynthesisError::Infeasible { gamma, worst_margin: f64::NEG_INFINITY })
        }
        Err(e) => return Err(e.into()),
    };
    let cert = find_certificate(model, gamma, backend, opts)?;
    Ok((gamma, cert))
}

/// Dimensions `(primal, dual)` of the two projected existence conditions per
/// node — the sizes of the matrix inequalities a node actually solves, which
/// depend only on local block dimensions, never on the network size.
pub fn existence_condition_dims(model: &NetworkModel) -> Vec<(usize, usize)> {
    model
        .nodes()
        .iter()
        .map(|node| {
            let meas = mat::hstack(&[&node.c_yt, &node.c_ys, &node.d_yd]);
            let ctrl = mat::hstack(&[
                &node.b_tu.transpose(),
                &node.b_su.transpose(),
                &node.d_zu.transpose(),
            ]);
            (mat::null_space(&meas).ncols(), mat::null_space(&ctrl).ncols())
        })
        .collect()
}

/// Completes a storage pair `(X, Y)` with `[X, I; I, Y] ≻ 0` to the
/// closed-loop storage
/// `X^K = [X, M; Mᵀ, −MᵀYN⁻ᵀ]` where `M Nᵀ = I − XY`.
///
/// Uses `N = I` when `I − XY` is well-conditioned and a balanced SVD split
/// otherwise. Verifies `X^K ≻ 0`, symmetry, and the inverse-block identity
/// `X^K [Y; Nᵀ] = [I; 0]` to relative 1e-8.
pub fn reconstruct_xk(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    node: usize,
) -> Result<DMatrix<f64>, SynthesisError> {
    let k = x.nrows();
    if k == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let ixy = DMatrix::identity(k, k) - x * y;
    let svd = ixy.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin < 1e-10 * smax.max(1.0) {
        return Err(SynthesisError::NearSingularCompletion { node, sigma_min: smin });
    }
    let (m, n) = if smax / smin < 1e6 {
        (ixy.clone(), DMatrix::identity(k, k))
    } else {
        // Balanced split M = UΣ^{1/2}, N = VΣ^{1/2} (so M Nᵀ = UΣVᵀ = I−XY).
        let u = svd.u.as_ref().expect("SVD with U");
        let vt = svd.v_t.as_ref().expect("SVD with Vᵀ");
        let shalf = DMatrix::from_diagonal(&svd.singular_values.map(f64::sqrt));
        (u * &shalf, vt.transpose() * &shalf)
    };
    let n_inv_t = n
        .transpose()
        .try_inverse()
        .ok_or(SynthesisError::NearSingularCompletion { node, sigma_min: smin })?;
    let x22 = mat::symmetrize(&(-(m.transpose() * y * n_inv_t)));
    let xk = mat::block_matrix(&[&[x, &m], &[&m.transpose(), &x22]]);
    let xk = mat::symmetrize(&xk);

    // Postconditions: X^K ≻ 0 and its inverse has Y as leading block.
    let scale = mat::spectral_norm(&xk).max(1.0);
    let probe = &xk * mat::vstack(&[y, &n.transpose()])
        - mat::vstack(&[&DMatrix::identity(k, k), &DMatrix::zeros(k, k)]);
    let err = mat::max_abs(&probe) / scale;
    if err > 1e-8 {
        return Err(SynthesisError::CompletionPostcondition { node, error: err });
    }
    if mat::lambda_min(&xk) <= 0.0 {
        return Err(SynthesisError::CompletionPostcondition {
            node,
            error: mat::lambda_min(&xk),
        });
    }
    Ok(xk)
}

/// The per-pair channel-family matrices `[V11_ij, V12_ij; V12ᵀ, −V11_ji]`
/// over the stacked pair channel `(o_ij, s_ij)`.
fn pair_matrix(ms: &MultiplierSet, hi: usize, lo: usize) -> DMatrix<f64> {
    ms.channel_multiplier(hi, lo)
}

/// Completes the channel families to closed-loop multipliers over the
/// widened channels `n_ij + 3·n_ij` (distributed synthesis, step 2).
///
/// Per pair, the indefinite difference `X^P − (Y^P)⁻¹` is factored through
/// its eigendecomposition into a rank-split extension block; the controller
/// channel corner is normalized to `diag(I, −I)`. The construction makes the
/// widened pair multiplier's inverse carry `Y^P` in its plant corner, which
/// is what the reconstruction inequalities require.
pub fn extend_multipliers(
    topology: &Topology,
    x_mult: &MultiplierSet,
    y_mult: &MultiplierSet,
) -> Result<MultiplierSet, SynthesisError> {
    let mut x11 = BTreeMap::new();
    let mut x12 = BTreeMap::new();
    let mut widths = Vec::new();
    for (hi, lo) in topology.pairs() {
        let n = topology.width(hi, lo);
        widths.push((hi, lo, 4 * n));
        let xp = mat::symmetrize(&pair_matrix(x_mult, hi, lo));
        let yp = mat::symmetrize(&pair_matrix(y_mult, hi, lo));
        let rc = mat::rcond(&yp);
        if rc < 1e-12 {
            return Err(SynthesisError::SingularY { pair: (hi, lo), rcond: rc });
        }
        let yp_inv = yp.clone().try_inverse().ok_or(SynthesisError::SingularY {
            pair: (hi, lo),
            rcond: rc,
        })?;
        let diff = mat::symmetrize(&(&xp - &yp_inv));

        // Descending eigendecomposition with zero-clamping.
        let eig = nalgebra::SymmetricEigen::new(diff.clone());
        let mut order: Vec<usize> = (0..2 * n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).expect("finite eigenvalues")
        });
        let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-300);
        let thr = 1e-9 * scale;
        let mut lambda = Vec::with_capacity(2 * n);
        let mut vecs = DMatrix::zeros(2 * n, 2 * n);
        for (pos, &idx) in order.iter().enumerate() {
            let mut l = eig.eigenvalues[idx];
            if l.abs() < thr {
                l = if pos < n { thr } else { -thr };
            }
            lambda.push(l);
            vecs.set_column(pos, &eig.eigenvectors.column(idx));
        }
        let neg = lambda.iter().filter(|&&l| l < 0.0).count();
        let pos = lambda.iter().filter(|&&l| l > 0.0).count();
        if pos != n || neg != n {
            return Err(SynthesisError::InertiaMismatch {
                pair: (hi, lo),
                got: (neg, 2 * n - neg - pos, pos),
                want: (n, n),
            });
        }

        // V̄ = V·|Λ|^{1/2}; the extension tripling gives the rank-3n corner.
        let vbar = &vecs
            * DMatrix::from_diagonal(&DVector::from_iterator(
                2 * n,
                lambda.iter().map(|l| l.abs().sqrt()),
            ));
        let vp = vbar.columns(0, n).into_owned();
        let vm = vbar.columns(n, n).into_owned();
        let s3 = 1.0 / 3.0f64.sqrt();
        let m12 = mat::hstack(&[&vp, &vp, &vp, &vm, &vm, &vm]) * s3;

        // Self-check: M12 · diag(I, −I)⁻¹ · M12ᵀ reproduces the clamped
        // difference (and hence X^P − (Y^P)⁻¹ up to the clamp threshold).
        let m22_sign = {
            let mut d = DMatrix::identity(6 * n, 6 * n);
            d.view_mut((3 * n, 3 * n), (3 * n, 3 * n))
                .copy_from(&(-DMatrix::<f64>::identity(3 * n, 3 * n)));
            d
        };
        let reproduced = &m12 * &m22_sign * m12.transpose();
        let split_err = mat::max_abs(&(&reproduced - &diff)) / scale.max(1.0);
        if split_err > 1e-9 + 2.0 * thr / scale.max(1.0) {
            return Err(SynthesisError::InertiaMismatch {
                pair: (hi, lo),
                got: (neg, 0, pos),
                want: (n, n),
            });
        }

        // Widened ordered-pair blocks. Plant corners keep the existing
        // families; extension strips come from M12; controller corners are
        // the normalized diag(I, −I) split.
        let x11_pc_hi = m12.view((0, 0), (n, 3 * n)).into_owned();
        let x12_pc = m12.view((0, 3 * n), (n, 3 * n)).into_owned();
        let x12_cp = m12.view((n, 0), (n, 3 * n)).transpose();
        let x11_pc_lo = -m12.view((n, 3 * n), (n, 3 * n)).into_owned();
        let i3 = DMatrix::identity(3 * n, 3 * n);

        let x11_hi = mat::block_matrix(&[
            &[x_mult.x11(hi, lo), &x11_pc_hi],
            &[&x11_pc_hi.transpose(), &i3],
        ]);
        let x11_lo = mat::block_matrix(&[
            &[x_mult.x11(lo, hi), &x11_pc_lo],
            &[&x11_pc_lo.transpose(), &i3],
        ]);
        let x12_w = mat::block_matrix(&[
            &[&x_mult.x12(hi, lo), &x12_pc],
            &[&x12_cp, &DMatrix::zeros(3 * n, 3 * n)],
        ]);
        x11.insert((hi, lo), x11_hi);
        x11.insert((lo, hi), x11_lo);
        x12.insert((hi, lo), x12_w);
    }
    let widened = Topology::new(topology.node_count(), &widths)?;
    MultiplierSet::new(&widened, x11, x12).map_err(Into::into)
}

/// Permutes a channel-indexed matrix from the interleaved closed-loop order
/// (plant and controller sub-blocks alternating per neighbor) into the
/// blocked order (all plant channels, then all controller channels).
fn channel_to_blocked(m: &DMatrix<f64>, map: &[usize]) -> DMatrix<f64> {
    let d = map.len();
    assert_eq!((m.nrows(), m.ncols()), (d, d));
    DMatrix::from_fn(d, d, |r, c| m[(map[r], map[c])])
}

/// Assembles the reconstruction middle matrix `P_i` in the blocked
/// closed-loop frame. Row/column order: inputs `(x^K, s^K, d)` then outputs
/// `(x^K⁺, o^K, z)`:
///
/// ```text
///     ⎡ −X^K  0     0   │ 0     0     0 ⎤
///     ⎢ 0     Z22   0   │ 0     Z12ᵀ  0 ⎥
///     ⎢ 0     0    −ρI  │ 0     0     0 ⎥
///     ⎢ 0     0     0   │ X^K   0     0 ⎥
///     ⎢ 0     Z12   0   │ 0     Z11   0 ⎥
///     ⎣ 0     0     0   │ 0     0     I ⎦
/// ```
pub fn assemble_pi(
    x_k: &DMatrix<f64>,
    z_blocked: &ZBlocks,
    rho: f64,
    f: usize,
    q: usize,
) -> DMatrix<f64> {
    let kk = x_k.nrows();
    let nk = z_blocked.z11.nrows();
    let dim = 2 * (kk + nk) + f + q;
    let mut p = DMatrix::zeros(dim, dim);
    let (o_x, o_s, o_d) = (0, kk, kk + nk);
    let (o_xn, o_o, o_z) = (kk + nk + f, 2 * kk + nk + f, 2 * (kk + nk) + f);
    p.view_mut((o_x, o_x), (kk, kk)).copy_from(&(-x_k));
    p.view_mut((o_s, o_s), (nk, nk)).copy_from(&z_blocked.z22);
    p.view_mut((o_s, o_o), (nk, nk)).copy_from(&z_blocked.z12.transpose());
    p.view_mut((o_o, o_s), (nk, nk)).copy_from(&z_blocked.z12);
    for t in 0..f {
        p[(o_d + t, o_d + t)] = -rho;
    }
    p.view_mut((o_xn, o_xn), (kk, kk)).copy_from(x_k);
    p.view_mut((o_o, o_o), (nk, nk)).copy_from(&z_blocked.z11);
    for t in 0..q {
        p[(o_z + t, o_z + t)] = 1.0;
    }
    p
}

/// Value of the reconstruction inequality at a parameter:
/// `F(Θ) = [I; UᵀΘV + W]ᵀ P [I; UᵀΘV + W]` (must be ≺ 0).
pub fn qmi_value(p: &DMatrix<f64>, uvw: &UvwFactors, theta: &DMatrix<f64>) -> DMatrix<f64> {
    let gamma = &uvw.ut * theta * &uvw.v + &uvw.w;
    let c = gamma.ncols();
    let stacked = mat::vstack(&[&DMatrix::identity(c, c), &gamma]);
    mat::symmetrize(&(stacked.transpose() * p * stacked))
}

/// Full orthogonal factorization `m = P [Σ_r, 0; 0, 0] Qᵀ` with square
/// orthonormal `P`, `Q` and the positive singular values `Σ_r`.
fn full_orth(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>, usize) {
    let (rows, cols) = (m.nrows(), m.ncols());
    if rows == 0 || cols == 0 || mat::max_abs(m) == 0.0 {
        return (DMatrix::identity(rows, rows), Vec::new(), DMatrix::identity(cols, cols), 0);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let r = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
    let u_r = svd.u.as_ref().expect("U").columns(0, r).into_owned();
    let v_r = svd.v_t.as_ref().expect("Vt").transpose().columns(0, r).into_owned();
    let p = if r == rows { u_r.clone() } else { mat::hstack(&[&u_r, &mat::null_space(&u_r.transpose())]) };
    let q = if r == cols { v_r.clone() } else { mat::hstack(&[&v_r, &mat::null_space(&v_r.transpose())]) };
    let sig = svd.singular_values.iter().take(r).copied().collect();
    (p, sig, q, r)
}

/// Solves the reconstruction inequality `F(Θ) ≺ 0` for one node.
///
/// After reducing Θ to its effective coordinates (the ranks of `Uᵀ` and `V`),
/// the fixed rows of the transformed loop map are folded into the middle
/// matrix, leaving the classic problem of spanning a maximal negative
/// subspace with a partial graph: the fixed directions are checked to be
/// negative (first projection), their `P`-orthogonal complement must split
/// with the right inertia (second projection), and a basis of its negative
/// part completes the graph. Degenerate completions are repaired by rotating
/// the negative basis within the complement; a damped eigenvalue descent is
/// the last resort.
pub fn solve_theta_qmi(
    p: &DMatrix<f64>,
    uvw: &UvwFactors,
    node: usize,
    seed: u64,
) -> Result<DMatrix<f64>, SynthesisError> {
    let (theta_rows, theta_cols) = uvw.theta_dims();
    let c = uvw.w.ncols();
    let rw = uvw.w.nrows();
    assert_eq!(p.nrows(), c + rw, "middle matrix matches the loop dimensions");

    let finish = |theta: DMatrix<f64>| -> Result<DMatrix<f64>, SynthesisError> {
        let lmax = mat::lambda_max(&qmi_value(p, uvw, &theta));
        if lmax < 0.0 {
            Ok(theta)
        } else {
            Err(SynthesisError::ReconstructionFailed { node, lambda_max: lmax })
        }
    };

    let (pu, sig_u, qu, ru) = full_orth(&uvw.ut);
    let (pv, sig_v, qv, rv) = full_orth(&uvw.v);
    if ru == 0 || rv == 0 {
        // Θ cannot influence the loop: only Θ = 0 to check.
        return finish(DMatrix::zeros(theta_rows, theta_cols));
    }

    // Transformed data: Ĝ = P_uᵀ(UᵀΘV + W)Q_v = Ŵ + [X̃, 0; 0, 0].
    let p_hat = {
        let t = mat::block_diag(&[&qv, &pu]);
        mat::symmetrize(&(t.transpose() * p * &t))
    };
    let w_hat = pu.transpose() * &uvw.w * &qv;

    // Fold the fixed rows (beyond the first ru) into the middle matrix.
    let w2 = w_hat.view((ru, 0), (rw - ru, c)).into_owned();
    let fold = mat::block_matrix(&[
        &[&DMatrix::identity(c, c), &DMatrix::zeros(c, ru)],
        &[&DMatrix::zeros(ru, c), &DMatrix::identity(ru, ru)],
        &[&w2, &DMatrix::zeros(rw - ru, ru)],
    ]);
    let p_tilde = mat::symmetrize(&(fold.transpose() * &p_hat * &fold));
    let rc = mat::rcond(&p_tilde);
    if rc < 1e-12 {
        return Err(SynthesisError::SingularPi { node, rcond: rc });
    }
    let w1 = w_hat.view((0, 0), (ru, c)).into_owned();

    // Fixed graph directions: inputs touching only the non-reducible
    // coordinates. They must already be negative for any Θ.
    let b2 = mat::block_matrix(&[
        &[&DMatrix::zeros(rv, c - rv)],
        &[&DMatrix::identity(c - rv, c - rv)],
        &[&w1.columns(rv, c - rv).into_owned()],
    ]);
    if c > rv {
        let fixed_neg = mat::symmetrize(&(b2.transpose() * &p_tilde * &b2));
        let margin = mat::lambda_max(&fixed_neg);
        if margin >= 0.0 {
            return Err(SynthesisError::EliminationPreconditionFailed {
                node,
                which: "output",
                margin,
            });
        }
    }

    // P-orthogonal complement of the fixed directions and its inertia.
    let q_c = if c > rv {
        mat::null_space(&(b2.transpose() * &p_tilde))
    } else {
        DMatrix::identity(c + ru, c + ru)
    };
    let p_c = mat::symmetrize(&(q_c.transpose() * &p_tilde * &q_c));
    if q_c.ncols() != ru + rv {
        return Err(SynthesisError::EliminationPreconditionFailed {
            node,
            which: "input",
            margin: f64::NAN,
        });
    }
    let eig = nalgebra::SymmetricEigen::new(p_c.clone());
    let mut idx: Vec<usize> = (0..ru + rv).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).expect("finite"));
    let evals: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    // The complement must split into exactly rv strictly negative and ru
    // strictly positive directions.
    let neg = evals.iter().filter(|&&l| l < 0.0).count();
    if neg != rv || evals[rv] <= 0.0 {
        // Report the eigenvalue closest to breaking the split.
        let margin = if neg < rv { evals[neg.min(ru + rv - 1)] } else { evals[rv] };
        return Err(SynthesisError::EliminationPreconditionFailed {
            node,
            which: "input",
            margin,
        });
    }
    let mut g_neg = DMatrix::zeros(ru + rv, rv);
    let mut g_pos = DMatrix::zeros(ru + rv, ru);
    for t in 0..rv {
        g_neg.set_column(t, &eig.eigenvectors.column(idx[t]));
    }
    for t in 0..ru {
        g_pos.set_column(t, &eig.eigenvectors.column(idx[rv + t]));
    }
    let d_neg: Vec<f64> = evals[..rv].iter().map(|l| l.abs()).collect();
    let d_pos: Vec<f64> = evals[rv..].to_vec();

    // Graph completion: span(fixed ∪ chosen-negative) must project
    // invertibly onto the input coordinates.
    let try_mix = |mix: Option<&DMatrix<f64>>| -> Option<(DMatrix<f64>, f64)> {
        let cols = match mix {
            None => q_c.clone() * &g_neg,
            Some(k) => {
                // Contraction in the scaled metric keeps the span negative.
                let scale_k = DMatrix::from_fn(ru, rv, |r, cc| {
                    k[(r, cc)] / d_pos[r].sqrt() * d_neg[cc].sqrt()
                });
                q_c.clone() * (&g_neg + &g_pos * scale_k)
            }
        };
        let y = mat::hstack(&[&b2, &cols]);
        let yx = y.view((0, 0), (c, c)).into_owned();
        let rc = mat::rcond(&yx);
        if rc < 1e-12 {
            return None;
        }
        let h_full = y.view((c, 0), (ru, c)).into_owned()
            * yx.try_inverse()?;
        Some((h_full, rc))
    };

    let mut best: Option<(DMatrix<f64>, f64)> = try_mix(None);
    if best.as_ref().map(|(_, rc)| *rc < 1e-8).unwrap_or(true) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(node as u64));
        for t in [0.3, 0.5, 0.7, 0.9] {
            for _ in 0..3 {
                let raw = DMatrix::from_fn(ru, rv, |_, _| rng.sample::<f64, _>(StandardNormal));
                let norm = mat::spectral_norm(&raw).max(1e-12);
                let k = raw * (t / norm);
                if let Some(candidate) = try_mix(Some(&k)) {
                    if best.as_ref().map(|(_, rc)| candidate.1 > *rc).unwrap_or(true) {
                        best = Some(candidate);
                    }
                }
            }
        }
    }

    let theta_from_xtilde = |xt: &DMatrix<f64>| -> DMatrix<f64> {
        let mut t11 = xt.clone();
        for r in 0..ru {
            for cc in 0..rv {
                t11[(r, cc)] /= sig_u[r] * sig_v[cc];
            }
        }
        let mut t = DMatrix::zeros(theta_rows, theta_cols);
        t.view_mut((0, 0), (ru, rv)).copy_from(&t11);
        &qu * t * pv.transpose()
    };

    if let Some((h_full, _)) = best {
        let xt = h_full.columns(0, rv).into_owned() - w1.columns(0, rv).into_owned();
        let theta = theta_from_xtilde(&xt);
        match finish(theta.clone()) {
            Ok(t) => return Ok(t),
            Err(_) => {
                // Fall through to descent from this starting point.
                if let Ok(t) = descend(p, uvw, theta, node) {
                    return Ok(t);
                }
            }
        }
    }
    // Last resort: descend from zero.
    descend(p, uvw, DMatrix::zeros(theta_rows, theta_cols), node)
}

/// Damped eigenvalue descent on `λ_max(F(Θ))` (backtracking line search along
/// the top-eigenvector gradient).
fn descend(
    p: &DMatrix<f64>,
    uvw: &UvwFactors,
    mut theta: DMatrix<f64>,
    node: usize,
) -> Result<DMatrix<f64>, SynthesisError> {
    let c = uvw.w.ncols();
    let phi = |th: &DMatrix<f64>| mat::lambda_max(&qmi_value(p, uvw, th));
    let mut current = phi(&theta);
    for _ in 0..300 {
        if current < 0.0 {
            return Ok(theta);
        }
        let f = qmi_value(p, uvw, &theta);
        let eig = nalgebra::SymmetricEigen::new(f);
        let (mut top, mut top_val) = (0, f64::NEG_INFINITY);
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            if l > top_val {
                top_val = l;
                top = i;
            }
        }
        let v = eig.eigenvectors.column(top).into_owned();
        let gamma = &uvw.ut * &theta * &uvw.v + &uvw.w;
        let stacked = mat::vstack(&[&DMatrix::identity(c, c), &gamma]);
        let pg = p * &stacked * &v; // ∈ R^{c+rw}
        let w_part = pg.rows(c, uvw.w.nrows()).into_owned();
        let grad = uvw.ut.transpose() * w_part * (&uvw.v * &v).transpose() * 2.0;
        let gnorm = mat::max_abs(&grad).max(1e-12);
        let mut step = 1.0 / gnorm;
        let mut improved = false;
        for _ in 0..40 {
            let cand = &theta - &grad * step;
            let val = phi(&cand);
            if val < current - 1e-14 {
                theta = cand;
                current = val;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if current < 0.0 {
        Ok(theta)
    } else {
        Err(SynthesisError::ReconstructionFailed { node, lambda_max: current })
    }
}

/// Runs completion and reconstruction from an existence certificate, closing
/// the loop and re-verifying it independently.
pub fn complete_synthesis(
    model: &NetworkModel,
    existence: &ExistenceCertificate,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, SynthesisError> {
    let topo = model.topology();
    let l = model.nodes().len();

    // Step 1: storage completions and disturbance weights.
    let mut x_k = Vec::with_capacity(l);
    for i in 0..l {
        x_k.push(reconstruct_xk(&existence.x[i], &existence.y[i], i)?);
    }
    let rho: Vec<f64> = (0..l).map(|i| recover_rho(existence.alpha[i], existence.beta[i])).collect();

    // Step 2: channel multiplier completion (identity when families are
    // fixed: no controller channels are added).
    let distributed = existence.y_mult.is_some();
    let closed_ms = match &existence.y_mult {
        Some(y_mult) => extend_multipliers(topo, &existence.x_mult, y_mult)?,
        None => existence.x_mult.clone(),
    };
    let ctrl_width = |w: usize| if distributed { 3 * w } else { 0 };

    // Closed-loop topology (for assembling the blocked channel weights).
    let widened = {
        let widths: Vec<(usize, usize, usize)> = topo
            .pairs()
            .into_iter()
            .map(|(hi, lo)| (hi, lo, topo.width(hi, lo) + ctrl_width(topo.width(hi, lo))))
            .collect();
        Topology::new(topo.node_count(), &widths)?
    };

    // Step 3: per-node reconstruction.
    let mut controllers = Vec::with_capacity(l);
    let mut locals = Vec::with_capacity(l);
    for (i, node) in model.nodes().iter().enumerate() {
        let layout = canonical_channel_layout(topo, i);
        let plant_widths: Vec<usize> = layout.iter().map(|&(_, _, w)| w).collect();
        let ctrl_widths: Vec<usize> = plant_widths.iter().map(|&w| ctrl_width(w)).collect();
        let n_c: usize = ctrl_widths.iter().sum();
        let uvw = netmodel::build_uvw(node, n_c);

        let z_inter = assemble_z_blocks(&closed_ms, &widened, i);
        let map = netmodel::interleave_map(&plant_widths, &ctrl_widths);
        let z_blocked = ZBlocks {
            z11: channel_to_blocked(&z_inter.z11, &map),
            z12: channel_to_blocked(&z_inter.z12, &map),
            z22: channel_to_blocked(&z_inter.z22, &map),
        };
        let pi = assemble_pi(&x_k[i], &z_blocked, rho[i], node.f(), node.q());
        let theta = solve_theta_qmi(&pi, &uvw, i, opts.theta_seed)?;
        let local = close_local(node, &plant_widths, &ctrl_widths, &theta)?;
        controllers.push(ControllerRealization::new(
            theta,
            node.k(),
            n_c,
            node.u_width(),
            node.y_width(),
        ));
        locals.push(local);
    }

    let closed_certificate = AnalysisCertificate {
        gamma: existence.gamma,
        x: x_k,
        rho: rho.clone(),
        multipliers: closed_ms,
    };
    let report = analysis::verify_closed_loop(model, &locals, &closed_certificate)?;
    Ok(SynthesisResult {
        model: model.clone(),
        gamma: existence.gamma,
        existence: existence.clone(),
        controllers,
        locals,
        rho,
        closed_certificate,
        report,
    })
}

fn synthesize_core(
    model: &NetworkModel,
    gamma: GammaSpec,
    structure: MultiplierStructure,
    backend: &dyn ConicBackend,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, SynthesisError> {
    check_hypotheses(model)?;
    // Surface structural errors (fixed-weight singularity, hypothesis
    // violations) before entering any solve loop.
    build_existence_problem(model, 1.0, &structure, 0.0)?;
    let existence = match gamma {
        GammaSpec::Fixed(g) => solve_existence(model, g, &structure, 0.0, backend, &opts.sdp)?,
        GammaSpec::Bisect { lo, hi, rel_tol } => {
            // Bisect on the existence program alone; reconstruct at the end.
            let build = |g: f64| {
                build_existence_problem(model, g, &structure, 0.0)
                    .map(|(p, _)| p)
                    .expect("structure validated above")
            };
            let (g_star, _) = crate::sdp::bisect_gamma(&build, lo, hi, rel_tol, backend, &opts.sdp)?;
            solve_existence(model, g_star, &structure, 0.0, backend, &opts.sdp)?
        }
    };
    match complete_synthesis(model, &existence, opts) {
        Ok(result) => Ok(result),
        Err(SynthesisError::NearSingularCompletion { .. }) => {
            // Push the storage coupling away from the completion boundary
            // and retry once.
            let retried = solve_existence(
                model,
                existence.gamma,
                &structure,
                opts.completion_retry_margin,
                backend,
                &opts.sdp,
            )?;
            complete_synthesis(model, &retried, opts)
        }
        Err(e) => Err(e),
    }
}

/// Synthesizes distributed controllers: one dynamic controller per node,
/// communicating with neighbor controllers over channels of width `3·n_ij`.
pub fn synthesize_distributed(
    model: &NetworkModel,
    gamma: GammaSpec,
    backend: &dyn ConicBackend,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, SynthesisError> {
    synthesize_core(model, gamma, MultiplierStructure::Free, backend, opts)
}

/// Synthesizes decentralized controllers: one local dynamic controller per
/// node, no controller communication. `multipliers` fixes the channel
/// families a priori (`None` = the neutral default `X11 = 0, X12 = ½I`).
pub fn synthesize_decentralized(
    model: &NetworkModel,
    gamma: GammaSpec,
    multipliers: Option<MultiplierSet>,
    backend: &dyn ConicBackend,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, SynthesisError> {
    let ms = multipliers.unwrap_or_else(|| decentralized_default_multipliers(model.topology()));
    synthesize_core(model, gamma, MultiplierStructure::Fixed(ms), backend, opts)
}

/// Collapses the network to a single node (eliminating the interconnection
/// exactly) and synthesizes one centralized controller for it.
///
/// # Errors
/// [`SynthesisError::HypothesisViolated`] when the eliminated interconnection
/// couples `u` to `y` directly (a nonzero flat feedthrough `u → y`).
pub fn synthesize_centralized(
    model: &NetworkModel,
    gamma: GammaSpec,
    backend: &dyn ConicBackend,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, SynthesisError> {
    let flat_model = flatten_to_single_node(model)?;
    synthesize_core(&flat_model, gamma, MultiplierStructure::Free, backend, opts)
}

/// The flattened single-node network used by centralized synthesis.
pub fn flatten_to_single_node(model: &NetworkModel) -> Result<NetworkModel, SynthesisError> {
    check_hypotheses(model)?;
    let flat = netmodel::flatten_plant(model)?;
    let dyu = mat::max_abs(&flat.d_yu);
    if dyu > 1e-12 * (1.0 + mat::spectral_norm(&flat.b_u)) {
        return Err(SynthesisError::HypothesisViolated(format!(
            "interconnection elimination produces a direct u → y feedthrough (max |entry| = {dyu:e}); \
             centralized synthesis requires none"
        )));
    }
    let k = flat.a.nrows();
    let (f, q, m, p) = (flat.b_d.ncols(), flat.c_z.nrows(), flat.b_u.ncols(), flat.c_y.nrows());
    let node = SubsystemRealization {
        a_tt: flat.a,
        b_td: flat.b_d,
        b_tu: flat.b_u,
        c_zt: flat.c_z,
        c_yt: flat.c_y,
        d_zd: flat.d_zd,
        d_zu: flat.d_zu,
        d_yd: flat.d_yd,
        a_ts: DMatrix::zeros(k, 0),
        a_st: DMatrix::zeros(0, k),
        a_ss: DMatrix::zeros(0, 0),
        b_sd: DMatrix::zeros(0, f),
        b_su: DMatrix::zeros(0, m),
        c_zs: DMatrix::zeros(q, 0),
        c_ys: DMatrix::zeros(p, 0),
        d_yu: DMatrix::zeros(p, m),
    };
    let topo = Topology::new(1, &[])?;
    NetworkModel::new(topo, vec![node]).map_err(Into::into)
}
