//! Certificate-based analysis of interconnected systems.
//!
//! Stability and an H2 performance bound for the whole network are certified
//! from one matrix inequality per node. The inequalities are coupled only
//! through *interconnection multipliers*: one indefinite quadratic supply
//! rate per channel, shaped so that the supplies exchanged across every edge
//! cancel exactly. Summing the per-node dissipation inequalities therefore
//! yields a global Lyapunov/H2 certificate without ever forming the global
//! system.
//!
//! The module also provides the independent ground truths used to audit
//! certificates and synthesized controllers: exact H2 norms via Lyapunov
//! equations (with a frequency-grid cross-check), closed-loop re-verification
//! from scratch, and time-domain dissipation checks along simulated
//! trajectories.

use std::collections::BTreeMap;

use nalgebra::{Complex, DMatrix, DVector};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::mat;
use crate::netmodel::{
    self, canonical_channel_layout, ClosedLoopLocal, FlatStateSpace, ModelError, NetworkModel,
    SubsystemRealization, Topology,
};

/// Errors from certificate checking and norm computation.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("system is not stable (spectral radius = {spectral_radius})")]
    Unstable { spectral_radius: f64 },
    #[error("Lyapunov solve residual {residual:e} exceeds tolerance {tolerance:e}")]
    LyapunovResidual { residual: f64, tolerance: f64 },
    #[error("model violates a structural hypothesis: {0}")]
    HypothesisViolated(String),
    #[error("invalid certificate: {0}")]
    Invalid(String),
}

/// Relative residual tolerance for the Schur-based Lyapunov solver.
pub const DLYAP_RESIDUAL_TOL: f64 = 1e-10;

/// Scale factor for strictness margins: a matrix inequality counts as strict
/// when its extreme eigenvalue clears zero by `1e-8 * (1 + ‖·‖₂)`.
pub fn strictness_margin(m: &DMatrix<f64>) -> f64 {
    1e-8 * (1.0 + mat::spectral_norm(m))
}

/// Schur stability of the flattened system: spectral radius of `A` below 1.
pub fn is_stable(flat: &FlatStateSpace) -> bool {
    mat::spectral_radius(&flat.a) < 1.0
}

/// Solves the discrete Lyapunov equation `AᵀXA − X + W = 0` (W symmetric)
/// by real Schur reduction and blockwise back-substitution.
///
/// # Errors
/// [`AnalysisError::LyapunovResidual`] when the reconstructed residual
/// exceeds `1e-10` relative to the data scale (e.g. for `A` with reciprocal
/// eigenvalue pairs, where the equation is singular).
pub fn dlyap(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>, AnalysisError> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "A must be square");
    assert_eq!((w.nrows(), w.ncols()), (n, n), "W must match A");
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 0)
        .ok_or_else(|| AnalysisError::Invalid("Schur iteration failed to converge".into()))?;
    let (u, t) = schur.unpack();
    let v = u.transpose() * w * &u;

    // Diagonal block structure of the quasi-triangular factor.
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        let two = i + 1 < n
            && t[(i + 1, i)].abs() > 1e-13 * (t[(i, i)].abs() + t[(i + 1, i + 1)].abs() + 1.0);
        let sz = if two { 2 } else { 1 };
        blocks.push((i, sz));
        i += sz;
    }

    // Solve TᵀYT − Y = −V block by block: for blocks I ≤ J, every term of
    // Σ_{K≤I, L≤J} T_KIᵀ Y_KL T_LJ except the (I,J) one involves already
    // computed blocks, so a single small Sylvester-type solve finishes Y_IJ.
    let mut y = DMatrix::zeros(n, n);
    for (bj, &(j0, sj)) in blocks.iter().enumerate() {
        for &(i0, si) in blocks.iter().take(bj + 1) {
            let end_i = i0 + si;
            let end_j = j0 + sj;
            let t_col_i = t.view((0, i0), (end_i, si));
            let t_col_j = t.view((0, j0), (end_j, sj));
            let partial =
                t_col_i.transpose() * y.view((0, 0), (end_i, end_j)) * t_col_j;
            let rhs = -v.view((i0, j0), (si, sj)) - partial;
            let t_ii = t.view((i0, i0), (si, si)).into_owned();
            let t_jj = t.view((j0, j0), (sj, sj)).into_owned();
            // vec(T_IIᵀ Y_IJ T_JJ) = (T_JJᵀ ⊗ T_IIᵀ) vec(Y_IJ).
            let op = t_jj.transpose().kronecker(&t_ii.transpose())
                - DMatrix::identity(si * sj, si * sj);
            let sol = op
                .lu()
                .solve(&DVector::from_column_slice(rhs.as_slice()))
                .ok_or_else(|| AnalysisError::LyapunovResidual {
                    residual: f64::INFINITY,
                    tolerance: DLYAP_RESIDUAL_TOL,
                })?;
            let y_ij = DMatrix::from_column_slice(si, sj, sol.as_slice());
            y.view_mut((i0, j0), (si, sj)).copy_from(&y_ij);
            if i0 != j0 {
                y.view_mut((j0, i0), (sj, si)).copy_from(&y_ij.transpose());
            }
        }
    }

    let x = mat::symmetrize(&(&u * y * u.transpose()));
    let residual = (a.transpose() * &x * a - &x + w).norm();
    let scale = w.norm().max(x.norm()).max(1.0);
    if residual > DLYAP_RESIDUAL_TOL * scale {
        return Err(AnalysisError::LyapunovResidual {
            residual: residual / scale,
            tolerance: DLYAP_RESIDUAL_TOL,
        });
    }
    Ok(x)
}

/// H2 norm of a stable flattened system via the observability Gramian:
/// `‖G‖₂² = tr(Bᵀ Q B + Dᵀ D)` with `Aᵀ Q A − Q + Cᵀ C = 0`.
///
/// # Errors
/// [`AnalysisError::Unstable`] when the spectral radius is ≥ 1.
pub fn h2_norm_lyapunov(flat: &FlatStateSpace) -> Result<f64, AnalysisError> {
    let radius = mat::spectral_radius(&flat.a);
    if radius >= 1.0 {
        return Err(AnalysisError::Unstable { spectral_radius: radius });
    }
    let q = dlyap(&flat.a, &(flat.c.transpose() * &flat.c))?;
    let sq = (flat.b.transpose() * q * &flat.b + flat.d.transpose() * &flat.d).trace();
    Ok(sq.max(0.0).sqrt())
}

/// H2 norm by numerical quadrature of `‖H(e^{iθ})‖_F²` over the unit circle,
/// refining a power-of-two grid until two successive estimates agree to 1e-9
/// relative. Slower and less exact than [`h2_norm_lyapunov`] but derived from
/// the transfer function alone — an independent cross-check.
pub fn h2_norm_freqgrid(flat: &FlatStateSpace) -> Result<f64, AnalysisError> {
    let radius = mat::spectral_radius(&flat.a);
    if radius >= 1.0 {
        return Err(AnalysisError::Unstable { spectral_radius: radius });
    }
    if flat.state_dim() == 0 {
        return Ok(flat.d.norm());
    }
    let cplx = |m: &DMatrix<f64>| m.map(|x| Complex::new(x, 0.0));
    let (a, b, c, d) = (cplx(&flat.a), cplx(&flat.b), cplx(&flat.c), cplx(&flat.d));
    let n = flat.state_dim();
    let eye = DMatrix::<Complex<f64>>::identity(n, n);

    let mean_square = |points: usize| -> f64 {
        let mut acc = 0.0;
        for k in 0..points {
            let theta = 2.0 * std::f64::consts::PI * (k as f64) / (points as f64);
            let z = Complex::from_polar(1.0, theta);
            let lhs = &eye * z - &a;
            let x = lhs.lu().solve(&b).expect("z I − A nonsingular on the unit circle");
            let h = &c * x + &d;
            acc += h.norm().powi(2);
        }
        acc / points as f64
    };

    let mut points = 1024;
    let mut prev = mean_square(points);
    loop {
        points *= 2;
        let cur = mean_square(points);
        if (cur - prev).abs() <= 1e-9 * (1.0 + cur.abs()) || points >= (1 << 17) {
            return Ok(cur.max(0.0).sqrt());
        }
        prev = cur;
    }
}

/// Interconnection multipliers for a topology.
///
/// Each unordered channel `{i, j}` carries the indefinite supply matrix
/// `X_ij = [X11_ij, X12_ij; X12_ijᵀ, −X11_ji]` acting on `(o_ij, s_ij)`, with
/// the mirrored channel's supply built from the same families so that
/// `σ_ij + σ_ji ≡ 0` along any interconnection-consistent trajectory. The
/// storage is one symmetric `X11` block per *ordered* pair and one square
/// `X12` block per unordered pair (kept for `i > j`; the mirror orientation
/// is `X12_ji = −X12_ijᵀ`).
#[derive(Debug, Clone)]
pub struct MultiplierSet {
    x11: BTreeMap<(usize, usize), DMatrix<f64>>,
    x12: BTreeMap<(usize, usize), DMatrix<f64>>,
}

impl MultiplierSet {
    /// Builds and validates a multiplier set: `x11` must hold a symmetric
    /// `n_ij × n_ij` block for every ordered connected pair, `x12` a square
    /// block for every unordered pair keyed `(i, j)` with `i > j`.
    pub fn new(
        topology: &Topology,
        x11: BTreeMap<(usize, usize), DMatrix<f64>>,
        x12: BTreeMap<(usize, usize), DMatrix<f64>>,
    ) -> Result<Self, AnalysisError> {
        for (hi, lo) in topology.pairs() {
            let w = topology.width(hi, lo);
            for key in [(hi, lo), (lo, hi)] {
                let m = x11.get(&key).ok_or_else(|| {
                    AnalysisError::Invalid(format!("missing X11 block for pair {key:?}"))
                })?;
                if m.nrows() != w || m.ncols() != w {
                    return Err(AnalysisError::Invalid(format!(
                        "X11 block {key:?} is {}x{}, expected {w}x{w}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                let asym = mat::max_abs(&(m - m.transpose()));
                if asym > 1e-9 * (1.0 + mat::max_abs(m)) {
                    return Err(AnalysisError::Invalid(format!(
                        "X11 block {key:?} is not symmetric (asymmetry {asym:e})"
                    )));
                }
            }
            let m = x12.get(&(hi, lo)).ok_or_else(|| {
                AnalysisError::Invalid(format!("missing X12 block for pair ({hi},{lo})"))
            })?;
            if m.nrows() != w || m.ncols() != w {
                return Err(AnalysisError::Invalid(format!(
                    "X12 block ({hi},{lo}) is {}x{}, expected {w}x{w}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        let n_pairs = topology.pairs().len();
        if x11.len() != 2 * n_pairs || x12.len() != n_pairs {
            return Err(AnalysisError::Invalid(
                "multiplier blocks present for unconnected pairs".into(),
            ));
        }
        Ok(Self { x11, x12 })
    }

    /// All-zero multipliers for a topology.
    pub fn zeros(topology: &Topology) -> Self {
        let mut x11 = BTreeMap::new();
        let mut x12 = BTreeMap::new();
        for (hi, lo) in topology.pairs() {
            let w = topology.width(hi, lo);
            x11.insert((hi, lo), DMatrix::zeros(w, w));
            x11.insert((lo, hi), DMatrix::zeros(w, w));
            x12.insert((hi, lo), DMatrix::zeros(w, w));
        }
        Self { x11, x12 }
    }

    /// The symmetric block `X11_ij` for an ordered pair.
    pub fn x11(&self, i: usize, j: usize) -> &DMatrix<f64> {
        self.x11.get(&(i, j)).expect("ordered pair present in multiplier set")
    }

    /// The block `X12_ij` for an ordered pair; for `i < j` this is the mirror
    /// `−X12_jiᵀ` (materialized on the fly).
    pub fn x12(&self, i: usize, j: usize) -> DMatrix<f64> {
        if i > j {
            self.x12.get(&(i, j)).expect("pair present in multiplier set").clone()
        } else {
            -self.x12.get(&(j, i)).expect("pair present in multiplier set").transpose()
        }
    }

    /// Iterates the stored blocks: `(i, j, X11_ij)` over ordered pairs.
    pub fn x11_blocks(&self) -> impl Iterator<Item = (usize, usize, &DMatrix<f64>)> {
        self.x11.iter().map(|(&(i, j), m)| (i, j, m))
    }

    /// Iterates the stored blocks: `(i, j, X12_ij)` with `i > j`.
    pub fn x12_blocks(&self) -> impl Iterator<Item = (usize, usize, &DMatrix<f64>)> {
        self.x12.iter().map(|(&(i, j), m)| (i, j, m))
    }

    /// The full channel multiplier `X_ij = [X11_ij, X12_ij; X12_ijᵀ, −X11_ji]`.
    pub fn channel_multiplier(&self, i: usize, j: usize) -> DMatrix<f64> {
        let x11 = self.x11(i, j);
        let x12 = self.x12(i, j);
        let neg = -self.x11(j, i);
        mat::block_matrix(&[&[x11, &x12], &[&x12.transpose(), &neg]])
    }
}

/// The three channel-weight blocks a node contributes to its certificate
/// middle matrix, acting on the stacked `(o_i, s_i)` rows.
#[derive(Debug, Clone)]
pub struct ZBlocks {
    pub z11: DMatrix<f64>,
    pub z12: DMatrix<f64>,
    pub z22: DMatrix<f64>,
}

impl ZBlocks {
    /// The assembled `(o, s)` weight `[Z11, Z12; Z12ᵀ, Z22]`.
    pub fn pair(&self) -> DMatrix<f64> {
        mat::block_matrix(&[&[&self.z11, &self.z12], &[&self.z12.transpose(), &self.z22]])
    }
}

/// Assembles node `i`'s channel weights from the multiplier set, following
/// the canonical channel layout: block-diagonally over neighbors `j`,
/// `Z11 = −X11_ij` (outgoing), `Z22 = +X11_ji` (incoming), `Z12 = −X12_ij`.
/// These are the negated supply terms, so that the certificate inequality
/// reads `ΔV_i − σ_i + ‖z_i‖² − ρ_i‖d_i‖² < 0` along trajectories.
pub fn assemble_z_blocks(ms: &MultiplierSet, topology: &Topology, node: usize) -> ZBlocks {
    let layout = canonical_channel_layout(topology, node);
    let z11: Vec<DMatrix<f64>> = layout.iter().map(|&(j, _, _)| -ms.x11(node, j)).collect();
    let z22: Vec<DMatrix<f64>> = layout.iter().map(|&(j, _, _)| ms.x11(j, node).clone()).collect();
    let z12: Vec<DMatrix<f64>> = layout.iter().map(|&(j, _, _)| -ms.x12(node, j)).collect();
    ZBlocks {
        z11: mat::block_diag(&z11.iter().collect::<Vec<_>>()),
        z12: mat::block_diag(&z12.iter().collect::<Vec<_>>()),
        z22: mat::block_diag(&z22.iter().collect::<Vec<_>>()),
    }
}

/// Channel weights of a closed-loop node: identical assembly, applied to the
/// widened (plant + controller channel) multiplier set.
pub fn closed_loop_scales(ms: &MultiplierSet, topology: &Topology, node: usize) -> ZBlocks {
    assemble_z_blocks(ms, topology, node)
}

/// Outer factor of node `i`'s certificate inequality. Maps the free signals
/// `(x_i, s_i, d_i)` to the stacked rows `(x, x⁺, o, s, z, d)`:
///
/// ```text
///        ⎡ I      0      0   ⎤   x
///        ⎢ A^TT   A^TS   B^Td⎥   x⁺
/// T_i =  ⎢ A^ST   A^SS   B^Sd⎥   o
///        ⎢ 0      I      0   ⎥   s
///        ⎢ C^zT   C^zS   D^zd⎥   z
///        ⎣ 0      0      I   ⎦   d
/// ```
pub fn build_ti(node: &SubsystemRealization) -> DMatrix<f64> {
    let (k, n, f) = (node.k(), node.n(), node.f());
    let i_k = DMatrix::identity(k, k);
    let i_n = DMatrix::identity(n, n);
    let i_f = DMatrix::identity(f, f);
    let z = DMatrix::<f64>::zeros;
    mat::block_matrix(&[
        &[&i_k, &z(k, n), &z(k, f)],
        &[&node.a_tt, &node.a_ts, &node.b_td],
        &[&node.a_st, &node.a_ss, &node.b_sd],
        &[&z(n, k), &i_n, &z(n, f)],
        &[&node.c_zt, &node.c_zs, &node.d_zd],
        &[&z(f, k), &z(f, n), &i_f],
    ])
}

/// Outer factor of the dual certificate inequality, over the same row slots
/// `(x, x⁺, o, s, z, d)` but with the transposed-system columns `(x⁺, o, z)`:
///
/// ```text
///        ⎡ (A^TT)ᵀ  (A^ST)ᵀ  (C^zT)ᵀ⎤   x
///        ⎢ −I        0        0     ⎥   x⁺
/// S_i =  ⎢  0       −I        0     ⎥   o
///        ⎢ (A^TS)ᵀ  (A^SS)ᵀ  (C^zS)ᵀ⎥   s
///        ⎢  0        0       −I     ⎥   z
///        ⎣ (B^Td)ᵀ  (B^Sd)ᵀ  (D^zd)ᵀ⎦   d
/// ```
///
/// With the inverse middle matrix (see [`dual_middle`]) this is the exact
/// dual of the `T_i` inequality — negative definiteness of one is equivalent
/// to positive definiteness of the other.
pub fn build_si(node: &SubsystemRealization) -> DMatrix<f64> {
    let (k, n, q) = (node.k(), node.n(), node.q());
    let i_k = DMatrix::identity(k, k);
    let i_n = DMatrix::identity(n, n);
    let i_q = DMatrix::identity(q, q);
    let z = DMatrix::<f64>::zeros;
    mat::block_matrix(&[
        &[&node.a_tt.transpose(), &node.a_st.transpose(), &node.c_zt.transpose()],
        &[&(-&i_k), &z(k, n), &z(k, q)],
        &[&z(n, k), &(-&i_n), &z(n, q)],
        &[&node.a_ts.transpose(), &node.a_ss.transpose(), &node.c_zs.transpose()],
        &[&z(q, k), &z(q, n), &(-&i_q)],
        &[&node.b_td.transpose(), &node.b_sd.transpose(), &node.d_zd.transpose()],
    ])
}

/// Middle matrix of a certificate inequality over the row slots
/// `(x, x⁺, (o, s), z, d)`: `diag(−P, P, Zpair, I_q, −scale·I_f)`.
///
/// Primal use: `P = X_i`, `Zpair` from [`assemble_z_blocks`], `scale = ρ_i`.
/// Dual use: `P = Y_i = X_i⁻¹`, `Zpair` the dual channel weights,
/// `scale = β_i = ρ_i⁻¹`.
pub fn certificate_middle(
    storage: &DMatrix<f64>,
    zpair: &DMatrix<f64>,
    scale: f64,
    q: usize,
    f: usize,
) -> DMatrix<f64> {
    let neg = -storage;
    let i_q = DMatrix::identity(q, q);
    let d_block = DMatrix::from_diagonal_element(f, f, -scale);
    mat::block_diag(&[&neg, storage, zpair, &i_q, &d_block])
}

/// Dual middle matrix for the same node: inverts each weight of the primal
/// middle in place — `X → X⁻¹`, `Zpair → Zpair⁻¹`, `ρ → ρ⁻¹` — preserving
/// the slot structure.
///
/// # Errors
/// [`AnalysisError::Invalid`] when a weight is singular.
pub fn dual_middle(
    x: &DMatrix<f64>,
    zpair: &DMatrix<f64>,
    rho: f64,
    q: usize,
    f: usize,
) -> Result<DMatrix<f64>, AnalysisError> {
    let y = x
        .clone()
        .try_inverse()
        .ok_or_else(|| AnalysisError::Invalid("storage matrix X is singular".into()))?;
    let wpair = if zpair.nrows() == 0 {
        zpair.clone()
    } else {
        zpair
            .clone()
            .try_inverse()
            .ok_or_else(|| AnalysisError::Invalid("channel weight matrix is singular".into()))?
    };
    Ok(certificate_middle(&y, &mat::symmetrize(&wpair), 1.0 / rho, q, f))
}

/// A full network certificate: performance level, one storage matrix and one
/// disturbance weight per node, and the interconnection multipliers.
#[derive(Debug, Clone)]
pub struct AnalysisCertificate {
    pub gamma: f64,
    pub x: Vec<DMatrix<f64>>,
    pub rho: Vec<f64>,
    pub multipliers: MultiplierSet,
}

/// Outcome of checking a certificate against a model.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// Symmetrized per-node certificate matrices `R_i = T_iᵀ M_i T_i`.
    pub residuals: Vec<DMatrix<f64>>,
    /// Largest eigenvalue of each `R_i` (all must be negative).
    pub lambda_max: Vec<f64>,
    /// The accumulated trace `Σ_i tr((B^Td)ᵀ X_i B^Td + (D^zd)ᵀ D^zd)`.
    pub trace_value: f64,
    /// `γ² − trace_value` (must be positive).
    pub trace_slack: f64,
    /// All inequalities hold strictly.
    pub strict: bool,
}

fn validate_certificate(
    model: &NetworkModel,
    cert: &AnalysisCertificate,
) -> Result<(), AnalysisError> {
    let l = model.nodes().len();
    if cert.x.len() != l || cert.rho.len() != l {
        return Err(AnalysisError::Invalid(format!(
            "certificate covers {} storage / {} weight entries for {l} nodes",
            cert.x.len(),
            cert.rho.len()
        )));
    }
    for (i, (x, node)) in cert.x.iter().zip(model.nodes()).enumerate() {
        let k = node.k();
        if x.nrows() != k || x.ncols() != k {
            return Err(AnalysisError::Invalid(format!(
                "storage matrix {i} is {}x{}, expected {k}x{k}",
                x.nrows(),
                x.ncols()
            )));
        }
        if cert.rho[i] <= 0.0 {
            return Err(AnalysisError::Invalid(format!(
                "disturbance weight {i} must be positive, got {}",
                cert.rho[i]
            )));
        }
    }
    if !(cert.gamma > 0.0) {
        return Err(AnalysisError::Invalid(format!(
            "performance level must be positive, got {}",
            cert.gamma
        )));
    }
    Ok(())
}

/// Evaluates a certificate on a model: per-node inequality residuals and the
/// trace condition.
///
/// # Errors
/// [`AnalysisError::HypothesisViolated`] unless every `B^Sd` vanishes (the
/// trace condition accounts only for the direct disturbance path into the
/// state), [`AnalysisError::Invalid`] on malformed certificates.
pub fn analysis_residuals(
    model: &NetworkModel,
    cert: &AnalysisCertificate,
) -> Result<ResidualReport, AnalysisError> {
    validate_certificate(model, cert)?;
    let topo = model.topology();
    let mut residuals = Vec::with_capacity(model.nodes().len());
    let mut lambda_max = Vec::with_capacity(model.nodes().len());
    let mut trace_value = 0.0;
    for (i, node) in model.nodes().iter().enumerate() {
        if mat::max_abs(&node.b_sd) != 0.0 {
            return Err(AnalysisError::HypothesisViolated(format!(
                "node {i} has a disturbance feedthrough into its outgoing channels (B^Sd ≠ 0)"
            )));
        }
        let zb = assemble_z_blocks(&cert.multipliers, topo, i);
        let middle = certificate_middle(&cert.x[i], &zb.pair(), cert.rho[i], node.q(), node.f());
        let t = build_ti(node);
        let r = mat::symmetrize(&(t.transpose() * middle * &t));
        lambda_max.push(mat::lambda_max(&r));
        residuals.push(r);
        trace_value += (node.b_td.transpose() * &cert.x[i] * &node.b_td
            + node.d_zd.transpose() * &node.d_zd)
            .trace();
    }
    let trace_slack = cert.gamma * cert.gamma - trace_value;
    let strict = lambda_max.iter().all(|&l| l < 0.0) && trace_slack > 0.0;
    Ok(ResidualReport { residuals, lambda_max, trace_value, trace_slack, strict })
}

/// Supply absorbed by node `i` across all its channels at one time step:
/// `σ_i = Σ_j [o_ij; s_ij]ᵀ X_ij [o_ij; s_ij]`, with `o_i`/`s_i` sliced from
/// the global outgoing/incoming channel vectors.
pub fn node_supply(
    ms: &MultiplierSet,
    topology: &Topology,
    channel_offsets: &[usize],
    o_global: &DVector<f64>,
    s_global: &DVector<f64>,
    node: usize,
) -> f64 {
    let mut sigma = 0.0;
    for (j, off, w) in canonical_channel_layout(topology, node) {
        let base = channel_offsets[node] + off;
        let o_ij = o_global.rows(base, w);
        let s_ij = s_global.rows(base, w);
        let x11 = ms.x11(node, j);
        let x12 = ms.x12(node, j);
        let x11_mirror = ms.x11(j, node);
        sigma += (o_ij.transpose() * x11 * o_ij)[(0, 0)]
            + 2.0 * (o_ij.transpose() * &x12 * s_ij)[(0, 0)]
            - (s_ij.transpose() * x11_mirror * s_ij)[(0, 0)];
    }
    sigma
}

/// Result of simulating a certified network and monitoring its dissipation
/// inequalities step by step.
#[derive(Debug, Clone)]
pub struct DissipationReport {
    /// Steps simulated with random disturbances.
    pub steps: usize,
    /// Largest normalized violation of any node's per-step dissipation
    /// inequality `ΔV_i ≤ σ_i + ρ_i‖d_i‖² − ‖z_i‖²` (negative = satisfied
    /// with margin everywhere).
    pub max_dissipation_violation: f64,
    /// Largest per-step absolute value of the total exchanged supply
    /// `Σ_i σ_i` (zero in exact arithmetic, for any multipliers).
    pub max_neutrality_abs: f64,
    /// Under zero disturbance, the total storage `Σ_i x_iᵀX_ix_i` decreased
    /// strictly at every step until it reached the noise floor.
    pub monotone_zero_input: bool,
}

/// Simulates the network for `horizon` steps from a random initial state with
/// unit-normal disturbances (deterministic in `seed`) and evaluates, at every
/// step: each node's dissipation inequality under the certificate, and the
/// neutrality of the total exchanged supply. A second zero-disturbance pass
/// checks strict decrease of the total storage.
///
/// # Errors
/// [`ModelError::SingularInterconnection`] for ill-posed models, or
/// [`AnalysisError::Invalid`] on malformed certificates.
pub fn trajectory_dissipation_check(
    model: &NetworkModel,
    cert: &AnalysisCertificate,
    horizon: usize,
    seed: u64,
) -> Result<DissipationReport, AnalysisError> {
    validate_certificate(model, cert)?;
    let topo = model.topology();
    let nodes = model.nodes();
    let state_offsets = model.state_offsets();
    let channel_offsets = model.channel_offsets();
    let k_total = state_offsets[nodes.len()];
    let n_total = channel_offsets[nodes.len()];
    let f_offsets: Vec<usize> = {
        let mut offs = vec![0];
        for node in nodes {
            offs.push(offs.last().unwrap() + node.f());
        }
        offs
    };
    let f_total = *f_offsets.last().unwrap();

    let collect = |f: fn(&SubsystemRealization) -> &DMatrix<f64>| -> DMatrix<f64> {
        mat::block_diag(&nodes.iter().map(f).collect::<Vec<_>>())
    };
    let a_tt = collect(|n| &n.a_tt);
    let a_ts = collect(|n| &n.a_ts);
    let a_st = collect(|n| &n.a_st);
    let a_ss = collect(|n| &n.a_ss);
    let b_td = collect(|n| &n.b_td);
    let b_sd = collect(|n| &n.b_sd);
    let c_zt = collect(|n| &n.c_zt);
    let c_zs = collect(|n| &n.c_zs);
    let d_zd = collect(|n| &n.d_zd);
    let delta = netmodel::build_delta(topo);
    let op = &delta - &a_ss;
    let rc = mat::rcond(&op);
    if rc < netmodel::RCOND_WELL_POSED {
        return Err(ModelError::SingularInterconnection { rcond: rc }.into());
    }
    let op_lu = op.lu();
    let solve_s = |x: &DVector<f64>, d: &DVector<f64>| -> DVector<f64> {
        if n_total == 0 {
            return DVector::zeros(0);
        }
        let rhs = &a_st * x + &b_sd * d;
        op_lu.solve(&rhs).expect("well-posedness checked above")
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |len: usize, rng: &mut ChaCha8Rng| {
        DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
    };

    // Noisy pass: per-step dissipation and neutrality.
    let mut x = draw(k_total, &mut rng);
    let mut max_violation = f64::NEG_INFINITY;
    let mut max_neutrality = 0.0f64;
    for _ in 0..horizon {
        let d = draw(f_total, &mut rng);
        let s = solve_s(&x, &d);
        let o = if n_total == 0 { DVector::zeros(0) } else { &a_st * &x + &a_ss * &s + &b_sd * &d };
        let x_next = &a_tt * &x + &a_ts * &s + &b_td * &d;
        let z = &c_zt * &x + &c_zs * &s + &d_zd * &d;

        let mut sigma_total = 0.0;
        for i in 0..nodes.len() {
            let sigma =
                node_supply(&cert.multipliers, topo, &channel_offsets, &o, &s, i);
            sigma_total += sigma;
            let xi = x.rows(state_offsets[i], nodes[i].k());
            let xi_next = x_next.rows(state_offsets[i], nodes[i].k());
            let si = s.rows(channel_offsets[i], nodes[i].n());
            let di = d.rows(f_offsets[i], nodes[i].f());
            let zi = z.rows(
                nodes.iter().take(i).map(|n| n.q()).sum::<usize>(),
                nodes[i].q(),
            );
            let v_now = (xi.transpose() * &cert.x[i] * xi)[(0, 0)];
            let v_next = (xi_next.transpose() * &cert.x[i] * xi_next)[(0, 0)];
            let lhs = v_next - v_now + zi.norm_squared() - cert.rho[i] * di.norm_squared() - sigma;
            let signal_scale = 1.0 + xi.norm_squared() + si.norm_squared() + di.norm_squared();
            max_violation = max_violation.max(lhs / signal_scale);
        }
        max_neutrality = max_neutrality.max(sigma_total.abs());
        x = x_next;
    }

    // Zero-disturbance pass: total storage strictly decreasing.
    let mut x = draw(k_total, &mut rng);
    let d0 = DVector::zeros(f_total);
    let mut monotone = true;
    let total_storage = |x: &DVector<f64>| -> f64 {
        (0..nodes.len())
            .map(|i| {
                let xi = x.rows(state_offsets[i], nodes[i].k());
                (xi.transpose() * &cert.x[i] * xi)[(0, 0)]
            })
            .sum()
    };
    let mut v = total_storage(&x);
    for _ in 0..horizon {
        if v < 1e-250 {
            break;
        }
        let s = solve_s(&x, &d0);
        x = &a_tt * &x + &a_ts * &s + &b_td * &d0;
        let v_next = total_storage(&x);
        if !(v_next < v) {
            monotone = false;
            break;
        }
        v = v_next;
    }

    Ok(DissipationReport {
        steps: horizon,
        max_dissipation_violation: max_violation,
        max_neutrality_abs: max_neutrality,
        monotone_zero_input: monotone,
    })
}

/// Everything re-checked about a synthesized closed loop, from scratch.
#[derive(Debug, Clone)]
pub struct ClosedLoopReport {
    /// The closed-loop interconnection is well posed.
    pub well_posed: bool,
    /// Reciprocal condition of the closed-loop interconnection operator.
    pub rcond: f64,
    /// Certificate residual evaluation on the closed-loop network.
    pub residuals: ResidualReport,
    /// Spectral radius of the flattened closed loop.
    pub spectral_radius: f64,
    /// Exact H2 norm of the flattened closed loop (Lyapunov route).
    pub h2_norm: f64,
    /// `h2_norm ≤ γ`.
    pub h2_within_gamma: bool,
    /// Every node's Γ equals `U_iᵀ Θ_i V_i + W_i` exactly.
    pub theta_consistent: bool,
    /// All of the above hold.
    pub ok: bool,
}

/// Independently verifies a synthesized controller set: rebuilds the
/// closed-loop network from `(plant, Θ)` pairs, checks well-posedness,
/// re-evaluates the certificate inequalities, and compares the exact
/// flattened H2 norm against the certified level.
///
/// `cert` is a certificate *for the closed-loop network*: storage matrices of
/// size `2k_i`, multipliers over the widened channels.
pub fn verify_closed_loop(
    model: &NetworkModel,
    locals: &[ClosedLoopLocal],
    cert: &AnalysisCertificate,
) -> Result<ClosedLoopReport, AnalysisError> {
    let closed = netmodel::closed_loop_network(model, locals)?;
    let (wp, rcond) = netmodel::well_posed(&closed);
    let residuals = analysis_residuals(&closed, cert)?;
    let theta_consistent = locals
        .iter()
        .zip(model.nodes())
        .all(|(local, plant)| local.theta_consistent(plant));

    let (spectral_radius, h2_norm) = if wp {
        let flat = netmodel::assemble_interconnected(&closed)?;
        let radius = mat::spectral_radius(&flat.a);
        let h2 = if radius < 1.0 { h2_norm_lyapunov(&flat)? } else { f64::INFINITY };
        (radius, h2)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let h2_within_gamma = h2_norm <= cert.gamma;
    let ok = wp
        && residuals.strict
        && spectral_radius < 1.0
        && h2_within_gamma
        && theta_consistent;
    Ok(ClosedLoopReport {
        well_posed: wp,
        rcond,
        residuals,
        spectral_radius,
        h2_norm,
        h2_within_gamma,
        theta_consistent,
        ok,
    })
}
