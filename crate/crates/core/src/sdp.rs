//! Semidefinite programming layer: affine matrix expressions over structured
//! variables, lowering to a conic solver, and independent re-verification of
//! returned solutions.
//!
//! Variables are symmetric matrices, rectangular matrices, or scalars; each
//! contributes a contiguous block of scalar decision coordinates. Constraints
//! are symmetric affine matrix expressions required to be negative definite,
//! positive definite, or (for 1×1 expressions) nonnegative. Lowering probes
//! each expression once per scalar coordinate to extract the coefficient
//! columns, emits the cone program in svec form (upper triangle,
//! column-major, off-diagonal entries scaled by √2), and shifts every strict
//! inequality by a small data-scaled margin so the solver targets interior
//! points.
//!
//! Solutions are never trusted as returned: the solver's matrices are
//! reconstructed and every constraint's eigenvalue margin is re-checked in
//! exact problem terms. A solution counts as feasible only if every margin
//! clears zero, whatever the solver's status string said.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::mat;

/// Errors from modeling, lowering, or the conic backend.
#[derive(Debug, Error)]
pub enum SdpError {
    #[error("conic backend failed: {0}")]
    Backend(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bisection bracket invalid: problem infeasible at the upper level {gamma}")]
    InfeasibleAtHi { gamma: f64 },
}

/// Handle to one decision variable inside an [`SdpProblem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Structure of a decision variable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VarKind {
    /// Symmetric `d × d`; `d(d+1)/2` scalar coordinates (upper triangle,
    /// column-major).
    Symmetric(usize),
    /// Dense `r × c`; `r·c` scalar coordinates (column-major).
    Rectangular(usize, usize),
    /// A single scalar (1 × 1 matrix).
    Scalar,
}

impl VarKind {
    fn num_scalars(&self) -> usize {
        match *self {
            VarKind::Symmetric(d) => d * (d + 1) / 2,
            VarKind::Rectangular(r, c) => r * c,
            VarKind::Scalar => 1,
        }
    }

    fn shape(&self) -> (usize, usize) {
        match *self {
            VarKind::Symmetric(d) => (d, d),
            VarKind::Rectangular(r, c) => (r, c),
            VarKind::Scalar => (1, 1),
        }
    }

    /// The nonzero entries `(row, col, value)` of the matrix with the `t`-th
    /// scalar coordinate set to one and the rest zero (for symmetric kinds
    /// this sets both mirrored entries). At most two entries, so callers can
    /// expand `L · probe · R` as rank-one updates instead of dense products.
    fn unit_probe_entries(&self, t: usize) -> [Option<(usize, usize, f64)>; 2] {
        match *self {
            VarKind::Symmetric(_) => {
                let (i, j) = sym_unpack(t);
                if i == j {
                    [Some((i, j, 1.0)), None]
                } else {
                    [Some((i, j, 1.0)), Some((j, i, 1.0))]
                }
            }
            VarKind::Rectangular(rows, _) => [Some((t % rows, t / rows, 1.0)), None],
            VarKind::Scalar => [Some((0, 0, 1.0)), None],
        }
    }

    /// Reconstructs the variable's matrix from its scalar coordinates.
    fn materialize(&self, scalars: &[f64]) -> DMatrix<f64> {
        let (r, c) = self.shape();
        let mut m = DMatrix::zeros(r, c);
        match *self {
            VarKind::Symmetric(_) => {
                for (t, &v) in scalars.iter().enumerate() {
                    let (i, j) = sym_unpack(t);
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            VarKind::Rectangular(rows, _) => {
                for (t, &v) in scalars.iter().enumerate() {
                    m[(t % rows, t / rows)] = v;
                }
            }
            VarKind::Scalar => m[(0, 0)] = scalars[0],
        }
        m
    }
}

/// Inverse of the symmetric upper-triangle column-major packing: scalar index
/// `t` ↦ `(i, j)` with `i ≤ j`.
fn sym_unpack(t: usize) -> (usize, usize) {
    let mut j = 0;
    let mut base = 0;
    while base + j + 1 <= t {
        base += j + 1;
        j += 1;
    }
    (t - base, j)
}

#[derive(Debug, Clone)]
enum Term {
    /// `L · V · R + Rᵀ · Vᵀ · Lᵀ` — a symmetric placement of variable `V`.
    SymPair { var: VarId, left: DMatrix<f64>, right: DMatrix<f64> },
    /// `v · G` for a scalar variable `v` and fixed symmetric gain `G`.
    ScalarGain { var: VarId, gain: DMatrix<f64> },
}

/// A symmetric matrix-valued affine function of the decision variables.
#[derive(Debug, Clone)]
pub struct AffineMatrixExpr {
    dim: usize,
    constant: DMatrix<f64>,
    terms: Vec<Term>,
}

impl AffineMatrixExpr {
    /// Zero expression of the given (square, symmetric) dimension.
    pub fn zeros(dim: usize) -> Self {
        Self { dim, constant: DMatrix::zeros(dim, dim), terms: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds a fixed symmetric matrix.
    pub fn add_constant(&mut self, c: &DMatrix<f64>) {
        assert_eq!((c.nrows(), c.ncols()), (self.dim, self.dim), "constant shape");
        self.constant += c;
    }

    /// Adds `L·V·R + Rᵀ·Vᵀ·Lᵀ`. The symmetric pair keeps the expression
    /// symmetric for any variable kind and covers transposed placements
    /// (place `Vᵀ` by swapping the roles of `L` and `Rᵀ`).
    pub fn add_sym_pair(&mut self, var: VarId, left: DMatrix<f64>, right: DMatrix<f64>) {
        assert_eq!(left.nrows(), self.dim, "left factor rows");
        assert_eq!(right.ncols(), self.dim, "right factor cols");
        self.terms.push(Term::SymPair { var, left, right });
    }

    /// Adds `coeff · Fᵀ V F` for a *symmetric* variable `V` (encoded as the
    /// symmetric pair with halved factors).
    pub fn add_congruence(&mut self, var: VarId, f: &DMatrix<f64>, coeff: f64) {
        self.add_sym_pair(var, f.transpose() * coeff, f * 0.5);
    }

    /// Adds `coeff · Σ_col b_colᵀ V b_col` — i.e. `coeff · tr(Bᵀ V B)` — to
    /// a 1×1 expression, for a symmetric variable `V`.
    pub fn add_trace_quad(&mut self, var: VarId, b: &DMatrix<f64>, coeff: f64) {
        assert_eq!(self.dim, 1, "trace terms only make sense in scalar expressions");
        let (rows, cols) = (b.nrows(), b.ncols());
        for col in 0..cols {
            let bc = DMatrix::from_column_slice(rows, 1, b.column(col).as_slice());
            self.add_sym_pair(var, bc.transpose() * (coeff * 0.5), bc);
        }
    }

    /// Adds `v · G` for a scalar variable `v`.
    pub fn add_scalar_gain(&mut self, var: VarId, gain: DMatrix<f64>) {
        assert_eq!((gain.nrows(), gain.ncols()), (self.dim, self.dim), "gain shape");
        self.terms.push(Term::ScalarGain { var, gain });
    }

    /// Evaluates the expression at a full variable assignment.
    pub fn evaluate(&self, values: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut acc = self.constant.clone();
        for term in &self.terms {
            match term {
                Term::SymPair { var, left, right } => {
                    let v = &values[var.0];
                    let lvr = left * v * right;
                    acc += &lvr + lvr.transpose();
                }
                Term::ScalarGain { var, gain } => {
                    acc += gain * values[var.0][(0, 0)];
                }
            }
        }
        acc
    }

    /// Visits the per-scalar coefficient matrices `G_t` (global scalar index
    /// → matrix) one at a time, in ascending index order. Each column is
    /// assembled from rank-one probe updates and handed to `visit` by
    /// reference, so the peak footprint stays at a single `dim × dim` scratch
    /// matrix regardless of how many scalar coordinates the expression
    /// touches — materializing them all is quadratic in problem size and
    /// dominates memory on large flattened instances.
    fn for_each_coefficient_column(
        &self,
        vars: &[VarInfo],
        offsets: &[usize],
        mut visit: impl FnMut(usize, &DMatrix<f64>),
    ) {
        // Group terms by variable so each coordinate is visited exactly once
        // even when several terms place the same variable.
        let mut by_var: BTreeMap<usize, Vec<&Term>> = BTreeMap::new();
        for term in &self.terms {
            let var = match term {
                Term::SymPair { var, .. } => var.0,
                Term::ScalarGain { var, .. } => var.0,
            };
            by_var.entry(var).or_default().push(term);
        }
        let mut half = DMatrix::zeros(self.dim, self.dim);
        let mut col = DMatrix::zeros(self.dim, self.dim);
        for (var, terms) in by_var {
            for t in 0..vars[var].kind.num_scalars() {
                half.fill(0.0);
                col.fill(0.0);
                for term in &terms {
                    match term {
                        Term::SymPair { left, right, .. } => {
                            // left · probe · right = Σ v · left[:, i] · right[j, :]
                            for entry in vars[var].kind.unit_probe_entries(t) {
                                let Some((i, j, v)) = entry else { continue };
                                half.ger(v, &left.column(i), &right.row(j).transpose(), 1.0);
                            }
                        }
                        Term::ScalarGain { gain, .. } => {
                            if t == 0 {
                                col += gain;
                            }
                        }
                    }
                }
                col += &half;
                col += half.transpose();
                visit(offsets[var] + t, &col);
            }
        }
    }
}

/// Required sign of a constraint expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintSense {
    /// Expression ≺ 0 (strict, enforced as `expr ⪯ −εI`).
    NegativeDefinite,
    /// Expression ≻ 0 (strict, enforced as `expr ⪰ εI`).
    PositiveDefinite,
    /// 1×1 expression ≥ 0 (enforced as `expr ≥ ε`).
    Nonnegative,
}

#[derive(Debug, Clone)]
struct VarInfo {
    name: String,
    kind: VarKind,
}

#[derive(Debug, Clone)]
struct Constraint {
    label: String,
    sense: ConstraintSense,
    expr: AffineMatrixExpr,
}

/// A matrix-inequality feasibility/optimization problem under construction.
#[derive(Debug, Clone, Default)]
pub struct SdpProblem {
    vars: Vec<VarInfo>,
    constraints: Vec<Constraint>,
    /// Linear objective coefficients per global scalar coordinate (lazily
    /// sized; missing tail = zeros).
    objective: Vec<f64>,
}

impl SdpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_symmetric(&mut self, name: impl Into<String>, dim: usize) -> VarId {
        self.push_var(name.into(), VarKind::Symmetric(dim))
    }

    pub fn add_rectangular(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> VarId {
        self.push_var(name.into(), VarKind::Rectangular(rows, cols))
    }

    pub fn add_scalar(&mut self, name: impl Into<String>) -> VarId {
        self.push_var(name.into(), VarKind::Scalar)
    }

    fn push_var(&mut self, name: String, kind: VarKind) -> VarId {
        self.vars.push(VarInfo { name, kind });
        VarId(self.vars.len() - 1)
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    /// Total scalar decision coordinates.
    pub fn num_scalars(&self) -> usize {
        self.vars.iter().map(|v| v.kind.num_scalars()).sum()
    }

    pub fn var_name(&self, var: VarId) -> &str {
        &self.vars[var.0].name
    }

    pub fn var_kind(&self, var: VarId) -> &VarKind {
        &self.vars[var.0].kind
    }

    fn scalar_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.vars.len());
        let mut acc = 0;
        for v in &self.vars {
            offs.push(acc);
            acc += v.kind.num_scalars();
        }
        offs
    }

    /// Requires `expr ≺ 0`.
    pub fn add_negdef(&mut self, label: impl Into<String>, expr: AffineMatrixExpr) {
        self.constraints.push(Constraint {
            label: label.into(),
            sense: ConstraintSense::NegativeDefinite,
            expr,
        });
    }

    /// Requires `expr ≻ 0`.
    pub fn add_posdef(&mut self, label: impl Into<String>, expr: AffineMatrixExpr) {
        self.constraints.push(Constraint {
            label: label.into(),
            sense: ConstraintSense::PositiveDefinite,
            expr,
        });
    }

    /// Requires the 1×1 `expr ≥ 0`.
    pub fn add_nonneg(&mut self, label: impl Into<String>, expr: AffineMatrixExpr) {
        assert_eq!(expr.dim(), 1, "nonnegativity applies to scalar expressions");
        self.constraints.push(Constraint {
            label: label.into(),
            sense: ConstraintSense::Nonnegative,
            expr,
        });
    }

    /// Adds `weight · tr(Cᵀ V)` to the minimization objective.
    pub fn add_linear_objective(&mut self, var: VarId, c: &DMatrix<f64>, weight: f64) {
        let offsets = self.scalar_offsets();
        let kind = self.vars[var.0].kind.clone();
        let (r, cc) = kind.shape();
        assert_eq!((c.nrows(), c.ncols()), (r, cc), "objective gain shape");
        let need = self.num_scalars();
        if self.objective.len() < need {
            self.objective.resize(need, 0.0);
        }
        for t in 0..kind.num_scalars() {
            // tr(Cᵀ · probe) = Σ C[(i, j)] over the probe's nonzero entries.
            for entry in kind.unit_probe_entries(t) {
                let Some((i, j, v)) = entry else { continue };
                self.objective[offsets[var.0] + t] += weight * v * c[(i, j)];
            }
        }
    }

    /// Adds `weight · tr(V)` to the minimization objective (a common
    /// regularizer keeping storage variables small and well-scaled).
    pub fn add_trace_objective(&mut self, var: VarId, weight: f64) {
        let (r, c) = self.vars[var.0].kind.shape();
        assert_eq!(r, c, "trace objective needs a square variable");
        self.add_linear_objective(var, &DMatrix::identity(r, r), weight);
    }

    /// Lowers to a cone program: one PSD-triangle cone per matrix constraint
    /// and one nonnegative cone gathering the scalar constraints. Returns the
    /// program together with the strictness shift applied to each constraint.
    pub fn lower(&self, opts: &SolveOptions) -> LoweredProgram {
        let offsets = self.scalar_offsets();
        let n = self.num_scalars();
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let mut triplets = Vec::new();
        let mut eps = Vec::with_capacity(self.constraints.len());
        let mut skipped = vec![false; self.constraints.len()];

        // Scalar constraints first, gathered into one nonnegative cone.
        let mut row = 0;
        let scalar_ids: Vec<usize> = self
            .constraints
            .iter()
            .enumerate()
            .filter(|(_, c)| c.sense == ConstraintSense::Nonnegative)
            .map(|(i, _)| i)
            .collect();
        for &ci in &scalar_ids {
            let cons = &self.constraints[ci];
            let e = opts.eps_scale * (1.0 + cons.expr.constant[(0, 0)].abs());
            eps.push((ci, e));
            // expr(x) − ε ≥ 0  ⇒  s = (c − ε) + Σ g_t x_t, so A[:,t] = −g_t.
            b.push(cons.expr.constant[(0, 0)] - e);
            cons.expr.for_each_coefficient_column(&self.vars, &offsets, |t, g| {
                triplets.push((row, t, -g[(0, 0)]));
            });
            row += 1;
        }
        if !scalar_ids.is_empty() {
            cones.push(ConeSpec::Nonnegative(scalar_ids.len()));
        }

        for (ci, cons) in self.constraints.iter().enumerate() {
            if cons.sense == ConstraintSense::Nonnegative {
                continue;
            }
            let d = cons.expr.dim();
            if d == 0 {
                skipped[ci] = true;
                eps.push((ci, 0.0));
                continue;
            }
            let e = opts.eps_scale * (1.0 + mat::spectral_norm(&cons.expr.constant));
            eps.push((ci, e));
            let shifted = match cons.sense {
                // expr + εI ⪯ 0 ⇒ s = svec(−C − εI) − svec(Σ G_t x_t).
                ConstraintSense::NegativeDefinite => {
                    -(&cons.expr.constant) - DMatrix::identity(d, d) * e
                }
                // expr − εI ⪰ 0 ⇒ s = svec(C − εI) + svec(Σ G_t x_t).
                ConstraintSense::PositiveDefinite => {
                    &cons.expr.constant - DMatrix::identity(d, d) * e
                }
                ConstraintSense::Nonnegative => unreachable!(),
            };
            let sign = match cons.sense {
                ConstraintSense::NegativeDefinite => 1.0,
                _ => -1.0,
            };
            b.extend_from_slice(&svec(&shifted));
            cons.expr.for_each_coefficient_column(&self.vars, &offsets, |t, g| {
                for (local, v) in svec(g).into_iter().enumerate() {
                    if v != 0.0 {
                        triplets.push((row + local, t, sign * v));
                    }
                }
            });
            row += d * (d + 1) / 2;
            cones.push(ConeSpec::PsdTriangle(d));
        }

        let mut objective = self.objective.clone();
        objective.resize(n, 0.0);
        eps.sort_by_key(|&(ci, _)| ci);
        LoweredProgram {
            program: ConeProgram { num_scalars: n, objective, a_triplets: triplets, b, cones },
            eps: eps.into_iter().map(|(_, e)| e).collect(),
            skipped,
        }
    }

    /// Solves the problem with the given backend and re-verifies the returned
    /// point constraint by constraint.
    pub fn solve(
        &self,
        backend: &dyn ConicBackend,
        opts: &SolveOptions,
    ) -> Result<SdpSolution, SdpError> {
        let lowered = self.lower(opts);
        let scalars = if lowered.program.num_scalars == 0 || lowered.program.b.is_empty() {
            // Nothing for a solver to decide; evaluate the constants.
            vec![0.0; lowered.program.num_scalars]
        } else {
            let conic = backend.solve(&lowered.program, opts)?;
            match conic.status {
                ConicStatus::PrimalInfeasible => {
                    return Ok(SdpSolution {
                        status: SolveStatus::Infeasible,
                        values: Vec::new(),
                        objective: f64::NAN,
                        margins: Vec::new(),
                        verified: false,
                        solver_status: format!("{:?}", conic.status),
                    });
                }
                _ => conic.x,
            }
        };

        let offsets = self.scalar_offsets();
        let values: Vec<DMatrix<f64>> = self
            .vars
            .iter()
            .zip(&offsets)
            .map(|(v, &off)| v.kind.materialize(&scalars[off..off + v.kind.num_scalars()]))
            .collect();

        let mut margins = Vec::with_capacity(self.constraints.len());
        let mut verified = true;
        for (ci, cons) in self.constraints.iter().enumerate() {
            let margin = if lowered.skipped[ci] {
                f64::INFINITY
            } else {
                let val = cons.expr.evaluate(&values);
                match cons.sense {
                    ConstraintSense::NegativeDefinite => -mat::lambda_max(&mat::symmetrize(&val)),
                    ConstraintSense::PositiveDefinite => mat::lambda_min(&mat::symmetrize(&val)),
                    ConstraintSense::Nonnegative => val[(0, 0)],
                }
            };
            if !(margin > 0.0) {
                verified = false;
            }
            margins.push(ConstraintMargin {
                label: cons.label.clone(),
                margin,
                eps: lowered.eps[ci],
            });
        }
        let objective: f64 = lowered
            .program
            .objective
            .iter()
            .zip(&scalars)
            .map(|(q, x)| q * x)
            .sum();
        Ok(SdpSolution {
            status: if verified { SolveStatus::Feasible } else { SolveStatus::Indeterminate },
            values,
            objective,
            margins,
            verified,
            solver_status: String::new(),
        })
    }
}

/// svec: upper triangle, column-major, off-diagonal × √2 (isometric with the
/// Frobenius inner product; the PSD-triangle cone convention).
pub fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    let rt2 = std::f64::consts::SQRT_2;
    for j in 0..d {
        for i in 0..=j {
            out.push(if i == j { m[(i, j)] } else { 0.5 * (m[(i, j)] + m[(j, i)]) * rt2 });
        }
    }
    out
}

/// Cone types of the lowered program, in row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeSpec {
    Zero(usize),
    Nonnegative(usize),
    /// Symmetric `d × d` slack in svec form (`d(d+1)/2` rows).
    PsdTriangle(usize),
}

/// A fully lowered conic program `min qᵀx s.t. Ax + s = b, s ∈ K`.
#[derive(Debug, Clone)]
pub struct ConeProgram {
    pub num_scalars: usize,
    pub objective: Vec<f64>,
    /// `(row, col, value)` entries of `A`.
    pub a_triplets: Vec<(usize, usize, f64)>,
    pub b: Vec<f64>,
    pub cones: Vec<ConeSpec>,
}

impl ConeProgram {
    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    /// Plain-text dump (one triplet per line) for external inspection.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "vars {}", self.num_scalars).unwrap();
        writeln!(s, "rows {}", self.num_rows()).unwrap();
        for cone in &self.cones {
            match cone {
                ConeSpec::Zero(n) => writeln!(s, "cone zero {n}").unwrap(),
                ConeSpec::Nonnegative(n) => writeln!(s, "cone nonneg {n}").unwrap(),
                ConeSpec::PsdTriangle(d) => writeln!(s, "cone psd {d}").unwrap(),
            }
        }
        for (i, q) in self.objective.iter().enumerate() {
            if *q != 0.0 {
                writeln!(s, "q {i} {q:.17e}").unwrap();
            }
        }
        for (i, v) in self.b.iter().enumerate() {
            if *v != 0.0 {
                writeln!(s, "b {i} {v:.17e}").unwrap();
            }
        }
        for &(r, c, v) in &self.a_triplets {
            writeln!(s, "A {r} {c} {v:.17e}").unwrap();
        }
        s
    }
}

/// A lowered program plus the per-constraint strictness shifts that were
/// baked into it.
#[derive(Debug, Clone)]
pub struct LoweredProgram {
    pub program: ConeProgram,
    /// Strictness shift per constraint (problem order).
    pub eps: Vec<f64>,
    /// Constraints skipped because their dimension is zero.
    pub skipped: Vec<bool>,
}

/// Solver knobs.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Strictness shift scale: each constraint is tightened by
    /// `eps_scale · (1 + ‖constant‖₂)`.
    pub eps_scale: f64,
    pub verbose: bool,
    pub max_iter: Option<u32>,
    pub time_limit: Option<Duration>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { eps_scale: 1e-7, verbose: false, max_iter: None, time_limit: None }
    }
}

/// Status as reported by the conic backend (before re-verification).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConicStatus {
    Optimal,
    AlmostOptimal,
    PrimalInfeasible,
    DualInfeasible,
    Inconclusive(String),
}

/// Raw output of a conic solve.
#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: ConicStatus,
    pub x: Vec<f64>,
    pub objective: f64,
}

/// Abstract interior-point backend for the lowered cone programs.
pub trait ConicBackend {
    fn solve(&self, program: &ConeProgram, opts: &SolveOptions) -> Result<ConicSolution, SdpError>;
}

/// Final verdict for an [`SdpProblem::solve`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// A point was produced and every constraint re-verified strictly.
    Feasible,
    /// The backend certified primal infeasibility.
    Infeasible,
    /// No verified point (solver struggled or margins failed re-check).
    Indeterminate,
}

/// Margin of one constraint at the returned point: distance past the required
/// sign (positive = strictly satisfied).
#[derive(Debug, Clone)]
pub struct ConstraintMargin {
    pub label: String,
    pub margin: f64,
    pub eps: f64,
}

/// A solved and re-verified problem.
#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SolveStatus,
    /// Reconstructed variable values (problem order); empty on infeasibility.
    pub values: Vec<DMatrix<f64>>,
    pub objective: f64,
    pub margins: Vec<ConstraintMargin>,
    /// Every constraint margin cleared zero on re-check.
    pub verified: bool,
    pub solver_status: String,
}

impl SdpSolution {
    pub fn value(&self, var: VarId) -> &DMatrix<f64> {
        &self.values[var.0]
    }

    pub fn scalar(&self, var: VarId) -> f64 {
        self.values[var.0][(0, 0)]
    }

    /// Smallest constraint margin (∞ when there are no constraints).
    pub fn worst_margin(&self) -> f64 {
        self.margins.iter().map(|m| m.margin).fold(f64::INFINITY, f64::min)
    }
}

/// Clarabel interior-point backend.
#[derive(Debug, Clone, Default)]
pub struct ClarabelBackend;

impl ConicBackend for ClarabelBackend {
    fn solve(&self, program: &ConeProgram, opts: &SolveOptions) -> Result<ConicSolution, SdpError> {
        use clarabel::algebra::CscMatrix;
        use clarabel::solver::{
            DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
        };

        let m = program.num_rows();
        let n = program.num_scalars;
        // Triplets → CSC (column-major, rows sorted, duplicates summed).
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in &program.a_triplets {
            if r >= m || c >= n {
                return Err(SdpError::Shape(format!(
                    "triplet ({r},{c}) outside {m}x{n} program"
                )));
            }
            cols[c].push((r, v));
        }
        let mut colptr = Vec::with_capacity(n + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        colptr.push(0);
        for col in &mut cols {
            col.sort_by_key(|&(r, _)| r);
            let mut last: Option<usize> = None;
            for &(r, v) in col.iter() {
                if last == Some(r) {
                    *nzval.last_mut().unwrap() += v;
                } else {
                    rowval.push(r);
                    nzval.push(v);
                    last = Some(r);
                }
            }
            colptr.push(rowval.len());
        }
        let a = CscMatrix::new(m, n, colptr, rowval, nzval);
        let p = CscMatrix::<f64>::zeros((n, n));

        let cones: Vec<SupportedConeT<f64>> = program
            .cones
            .iter()
            .map(|c| match *c {
                ConeSpec::Zero(k) => SupportedConeT::ZeroConeT(k),
                ConeSpec::Nonnegative(k) => SupportedConeT::NonnegativeConeT(k),
                ConeSpec::PsdTriangle(d) => SupportedConeT::PSDTriangleConeT(d),
            })
            .collect();

        let mut builder = DefaultSettingsBuilder::default();
        builder.verbose(opts.verbose);
        if let Some(iters) = opts.max_iter {
            builder.max_iter(iters);
        }
        if let Some(limit) = opts.time_limit {
            builder.time_limit(limit.as_secs_f64());
        }
        let settings = builder.build().map_err(|e| SdpError::Backend(e.to_string()))?;
        let mut solver = DefaultSolver::new(&p, &program.objective, &a, &program.b, &cones, settings)
            .map_err(|e| SdpError::Backend(format!("{e:?}")))?;
        solver.solve();

        let status = match solver.solution.status {
            SolverStatus::Solved => ConicStatus::Optimal,
            SolverStatus::AlmostSolved => ConicStatus::AlmostOptimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                ConicStatus::PrimalInfeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                ConicStatus::DualInfeasible
            }
            other => ConicStatus::Inconclusive(format!("{other:?}")),
        };
        Ok(ConicSolution {
            status,
            x: solver.solution.x.clone(),
            objective: solver.solution.obj_val,
        })
    }
}

/// Finds the smallest level `γ ∈ [lo, hi]` whose problem is feasible, to a
/// relative gap `rel_tol`, by bisection. `build` must be monotone: feasible
/// at some `γ` implies feasible at every larger level.
///
/// Returns the final feasible level together with its verified solution.
/// If the problem is already feasible at `lo`, returns `lo` immediately.
///
/// # Errors
/// [`SdpError::InfeasibleAtHi`] when even `hi` is infeasible (no bracket).
pub fn bisect_gamma(
    build: &dyn Fn(f64) -> SdpProblem,
    lo: f64,
    hi: f64,
    rel_tol: f64,
    backend: &dyn ConicBackend,
    opts: &SolveOptions,
) -> Result<(f64, SdpSolution), SdpError> {
    assert!(lo > 0.0 && hi > lo, "need 0 < lo < hi");
    let sol_hi = build(hi).solve(backend, opts)?;
    if !sol_hi.verified {
        return Err(SdpError::InfeasibleAtHi { gamma: hi });
    }
    let sol_lo = build(lo).solve(backend, opts)?;
    if sol_lo.verified {
        return Ok((lo, sol_lo));
    }
    let mut lo = lo;
    let mut hi = hi;
    let mut best = sol_hi;
    while (hi - lo) > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        let sol = build(mid).solve(backend, opts)?;
        if sol.verified {
            hi = mid;
            best = sol;
        } else {
            lo = mid;
        }
    }
    Ok((hi, best))
}
