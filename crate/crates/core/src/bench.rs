//! Benchmark models and experiments: a coupled-oscillator network generator,
//! closed-loop time-domain simulation, and a scaling study that times the
//! existence-program solves of the different synthesis modes over growing
//! cycle networks.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::mat;
use crate::netmodel::{
    assemble_interconnected, build_delta, closed_loop_network, canonical_channel_layout,
    ClosedLoopLocal, ModelError, NetworkModel, SubsystemRealization, Topology,
};
use crate::sdp::{ConicBackend, SolveOptions, SolveStatus};
use crate::synthesis::{
    build_existence_problem, decentralized_default_multipliers, flatten_to_single_node,
    MultiplierStructure,
};

// ---------------------------------------------------------------------------
// Oscillator-network generator
// ---------------------------------------------------------------------------

/// Physical parameters of a network of damped rotational oscillators coupled
/// by elastic links, discretized with a first-order (forward-Euler) hold.
#[derive(Debug, Clone)]
pub struct OscillatorParams {
    /// Per-node inertia `m_i > 0`.
    pub mass: Vec<f64>,
    /// Per-node damping `b_i ≥ 0`.
    pub damping: Vec<f64>,
    /// Per-edge stiffness `k_ij = k_ji > 0`, keyed `(max(i,j), min(i,j))`.
    pub stiffness: BTreeMap<(usize, usize), f64>,
    /// Sampling time `T > 0` (seconds).
    pub dt: f64,
}

impl OscillatorParams {
    fn stiffness_between(&self, i: usize, j: usize) -> f64 {
        self.stiffness[&(i.max(j), i.min(j))]
    }
}

/// Builds the oscillator network on `topology` (every edge must have channel
/// width 1: the broadcast signal is the angle `θ_j`).
///
/// Per node, with `κ_i = Σ_j k_ij` and state `x_i = (θ_i, θ̇_i)`:
///
/// ```text
/// A^TT = [1, T; −κ_i T / m_i, 1 − b_i T / m_i],   A^TS columns [0; k_ij T / m_i],
/// A^ST rows [1, 0],  A^SS = 0,  B^Td = B^Tu = [0; T / m_i],  B^Sd = B^Su = 0,
/// C^zT = I₂,  C^yT = [1, 0],  all remaining C/D blocks zero.
/// ```
///
/// # Panics
/// On invalid parameters (non-positive masses, negative damping, missing or
/// non-positive stiffness, non-positive `dt`, or an edge of width ≠ 1).
pub fn gen_oscillator(topology: &Topology, params: &OscillatorParams) -> NetworkModel {
    let l = topology.node_count();
    assert_eq!(params.mass.len(), l, "one mass per node");
    assert_eq!(params.damping.len(), l, "one damping coefficient per node");
    assert!(params.dt > 0.0, "sampling time must be positive");
    assert!(params.mass.iter().all(|&m| m > 0.0), "masses must be positive");
    assert!(params.damping.iter().all(|&b| b >= 0.0), "damping must be nonnegative");
    for (hi, lo) in topology.pairs() {
        assert_eq!(topology.width(hi, lo), 1, "oscillator links broadcast one scalar");
        let k = params.stiffness.get(&(hi, lo));
        assert!(k.is_some_and(|&k| k > 0.0), "stiffness for pair ({hi}, {lo}) must be positive");
    }

    let t = params.dt;
    let nodes = (0..l)
        .map(|i| {
            let neighbors = canonical_channel_layout(topology, i);
            let deg = neighbors.len();
            let (m_i, b_i) = (params.mass[i], params.damping[i]);
            let kappa: f64 =
                neighbors.iter().map(|&(j, _, _)| params.stiffness_between(i, j)).sum();

            let mut node = SubsystemRealization::zeros(2, deg, 1, 2, 1, 1);
            node.a_tt = DMatrix::from_row_slice(
                2,
                2,
                &[1.0, t, -kappa * t / m_i, 1.0 - b_i * t / m_i],
            );
            for (slot, &(j, _, _)) in neighbors.iter().enumerate() {
                node.a_ts[(1, slot)] = params.stiffness_between(i, j) * t / m_i;
                node.a_st[(slot, 0)] = 1.0;
            }
            node.b_td[(1, 0)] = t / m_i;
            node.b_tu[(1, 0)] = t / m_i;
            node.c_zt = DMatrix::identity(2, 2);
            node.c_yt[(0, 0)] = 1.0;
            node
        })
        .collect();
    NetworkModel::new(topology.clone(), nodes).expect("generated blocks are consistent")
}

/// Ring of `l` nodes with width-1 links (a single edge for `l = 2`, no edges
/// for `l = 1`).
pub fn cycle_topology(l: usize) -> Topology {
    assert!(l >= 1, "need at least one node");
    let edges: Vec<(usize, usize, usize)> = match l {
        1 => vec![],
        2 => vec![(0, 1, 1)],
        _ => (0..l).map(|i| (i, (i + 1) % l, 1)).collect(),
    };
    Topology::new(l, &edges).expect("ring edges are valid")
}

/// The three-oscillator triangle with the reference parameter set
/// `m = (3, 1, 2)`, `b = (2, 1, 4)`, unit stiffness, `T = 0.1`.
pub fn reference_triangle() -> NetworkModel {
    let topo = Topology::new(3, &[(0, 1, 1), (0, 2, 1), (1, 2, 1)]).unwrap();
    let params = OscillatorParams {
        mass: vec![3.0, 1.0, 2.0],
        damping: vec![2.0, 1.0, 4.0],
        stiffness: topo.pairs().into_iter().map(|p| (p, 1.0)).collect(),
        dt: 0.1,
    };
    gen_oscillator(&topo, &params)
}

/// Cycle oscillator network with parameters drawn uniformly — masses from
/// `U(1, 2)`, damping from `U(2, 3)`, stiffness from `U(1, 2)` — using the
/// recorded seed; `T = 0.1`.
pub fn random_cycle_oscillator(l: usize, seed: u64) -> NetworkModel {
    let topo = cycle_topology(l);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = OscillatorParams {
        mass: (0..l).map(|_| rng.random_range(1.0..2.0)).collect(),
        damping: (0..l).map(|_| rng.random_range(2.0..3.0)).collect(),
        stiffness: topo.pairs().into_iter().map(|p| (p, rng.random_range(1.0..2.0))).collect(),
        dt: 0.1,
    };
    gen_oscillator(&topo, &params)
}

// ---------------------------------------------------------------------------
// Closed-loop simulation
// ---------------------------------------------------------------------------

/// Disturbance model for a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisturbanceSpec {
    /// `d ≡ 0`.
    Zero,
    /// Independent standard-normal sequences, one per disturbance coordinate.
    WhiteUnit,
}

/// Time series of a closed-loop run. Each matrix holds one time step per row;
/// columns are stacked across nodes, with per-node offsets recorded so the
/// series can be sliced per node (entry `L` of each offset list is the total).
#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub seed: u64,
    /// Effective horizon (extended beyond the request when needed so the tail
    /// window excludes the transient).
    pub horizon: usize,
    /// First step of the tail window (the last 50% of the horizon).
    pub tail_start: usize,
    /// Empirical mean of `‖z‖²` over the tail window.
    pub tail_mean_z2: f64,
    /// Plant states.
    pub x: DMatrix<f64>,
    /// Controller states.
    pub xi: DMatrix<f64>,
    /// Control inputs.
    pub u: DMatrix<f64>,
    /// Performance outputs.
    pub z: DMatrix<f64>,
    /// Disturbances.
    pub d: DMatrix<f64>,
    pub state_offsets: Vec<usize>,
    pub control_offsets: Vec<usize>,
    pub output_offsets: Vec<usize>,
    pub input_offsets: Vec<usize>,
}

impl SimulationResult {
    /// Renders the run as comma-separated time series: one row per step,
    /// columns `step`, then `x`, `ξ`, `u`, `z`, `d` grouped per node with
    /// 1-based names like `x2_1` (node 2, first coordinate).
    pub fn to_csv(&self) -> String {
        let name = |prefix: &str, offs: &Vec<usize>| -> Vec<String> {
            let mut names = Vec::with_capacity(*offs.last().unwrap_or(&0));
            for node in 0..offs.len().saturating_sub(1) {
                for idx in 0..offs[node + 1] - offs[node] {
                    names.push(format!("{prefix}{}_{}", node + 1, idx + 1));
                }
            }
            names
        };
        let mut header = vec!["step".to_string()];
        header.extend(name("x", &self.state_offsets));
        header.extend(name("xi", &self.state_offsets));
        header.extend(name("u", &self.control_offsets));
        header.extend(name("z", &self.output_offsets));
        header.extend(name("d", &self.input_offsets));
        let mut out = header.join(",");
        out.push('\n');
        for t in 0..self.horizon {
            let mut row = vec![t.to_string()];
            for series in [&self.x, &self.xi, &self.u, &self.z, &self.d] {
                row.extend((0..series.ncols()).map(|c| series[(t, c)].to_string()));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Iterates the flattened closed loop for at least `horizon` steps and
/// records per-node trajectories, recovering the internal control signals
/// from the interconnection solve at every step.
///
/// The horizon is extended to at least ten times the slowest closed-loop time
/// constant (from the spectral radius) so the tail window — the last 50% of
/// the run, over which `E‖z‖²` is averaged — excludes the transient.
///
/// # Errors
/// [`ModelError::SingularInterconnection`] if the closed loop is ill-posed,
/// [`ModelError::Dimension`] on mismatched initial conditions.
pub fn simulate_closed_loop(
    model: &NetworkModel,
    locals: &[ClosedLoopLocal],
    x0: &DVector<f64>,
    xi0: &DVector<f64>,
    disturbance: DisturbanceSpec,
    horizon: usize,
    seed: u64,
) -> Result<SimulationResult, ModelError> {
    let closed = closed_loop_network(model, locals)?;
    let flat = assemble_interconnected(&closed)?;

    let state_offsets = model.state_offsets();
    let k_total = *state_offsets.last().unwrap();
    if x0.len() != k_total || xi0.len() != k_total {
        return Err(ModelError::Dimension(format!(
            "initial conditions must stack {k_total} plant and {k_total} controller states; \
             got {} and {}",
            x0.len(),
            xi0.len()
        )));
    }

    // Interconnection solve for the internal signals: s = Δ o with
    // o = A^ST x + A^SS s + B^Sd d, i.e. (I − Δ A^SS) s = Δ (A^ST x + B^Sd d).
    let cl_nodes = closed.nodes();
    let a_st_k = mat::block_diag(&cl_nodes.iter().map(|n| &n.a_st).collect::<Vec<_>>());
    let a_ss_k = mat::block_diag(&cl_nodes.iter().map(|n| &n.a_ss).collect::<Vec<_>>());
    let b_sd_k = mat::block_diag(&cl_nodes.iter().map(|n| &n.b_sd).collect::<Vec<_>>());
    let delta = build_delta(closed.topology());
    let nk = delta.nrows();
    let channel_op = (DMatrix::identity(nk, nk) - &delta * &a_ss_k).lu();

    // Column offsets of each signal group.
    let control_offsets = offsets(model.nodes().iter().map(SubsystemRealization::u_width));
    let input_offsets = flat.input_offsets.clone();
    let output_offsets = flat.output_offsets.clone();
    let cl_state_offsets = closed.state_offsets();
    let cl_channel_offsets = closed.channel_offsets();

    // Horizon floor: ten e-folding times of the slowest mode.
    let rho = mat::spectral_radius(&flat.a);
    let h = if rho > 0.0 && rho < 1.0 {
        horizon.max((-10.0 / rho.ln()).ceil() as usize)
    } else {
        horizon
    };

    let (f_total, q_total, m_total) =
        (*input_offsets.last().unwrap(), *output_offsets.last().unwrap(), *control_offsets.last().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = DVector::zeros(2 * k_total);
    for i in 0..model.nodes().len() {
        let k = model.node(i).k();
        let (po, co) = (state_offsets[i], cl_state_offsets[i]);
        state.rows_mut(co, k).copy_from(&x0.rows(po, k));
        state.rows_mut(co + k, k).copy_from(&xi0.rows(po, k));
    }

    let mut res = SimulationResult {
        seed,
        horizon: h,
        tail_start: h / 2,
        tail_mean_z2: 0.0,
        x: DMatrix::zeros(h, k_total),
        xi: DMatrix::zeros(h, k_total),
        u: DMatrix::zeros(h, m_total),
        z: DMatrix::zeros(h, q_total),
        d: DMatrix::zeros(h, f_total),
        state_offsets: state_offsets.clone(),
        control_offsets: control_offsets.clone(),
        output_offsets,
        input_offsets: input_offsets.clone(),
    };

    let mut tail_sum = 0.0;
    for t in 0..h {
        let d_t: DVector<f64> = match disturbance {
            DisturbanceSpec::Zero => DVector::zeros(f_total),
            DisturbanceSpec::WhiteUnit => {
                DVector::from_fn(f_total, |_, _| rng.sample::<f64, _>(StandardNormal))
            }
        };

        // Internal channel signals at this step.
        let s_k = if nk == 0 {
            DVector::zeros(0)
        } else {
            let rhs = &delta * (&a_st_k * &state + &b_sd_k * &d_t);
            channel_op
                .solve(&rhs)
                .ok_or(ModelError::SingularInterconnection { rcond: 0.0 })?
        };

        let z_t = &flat.c * &state + &flat.d * &d_t;

        for (i, node) in model.nodes().iter().enumerate() {
            let (k, p) = (node.k(), node.y_width());
            let x_i = state.rows(cl_state_offsets[i], k).into_owned();
            let xi_i = state.rows(cl_state_offsets[i] + k, k).into_owned();
            res.x.view_mut((t, state_offsets[i]), (1, k)).copy_from(&x_i.transpose());
            res.xi.view_mut((t, state_offsets[i]), (1, k)).copy_from(&xi_i.transpose());

            // Split the node's interleaved channel slice into plant and
            // controller parts (per neighbor: plant block, then controller).
            let local = &locals[i];
            let (pw, cw) = (local.plant_widths(), local.ctrl_widths());
            let n_plant: usize = pw.iter().sum();
            let n_ctrl: usize = cw.iter().sum();
            let mut s_plant = DVector::zeros(n_plant);
            let mut s_ctrl = DVector::zeros(n_ctrl);
            let mut cursor = cl_channel_offsets[i];
            let (mut at_p, mut at_c) = (0, 0);
            for (&wp, &wc) in pw.iter().zip(cw) {
                s_plant.rows_mut(at_p, wp).copy_from(&s_k.rows(cursor, wp));
                s_ctrl.rows_mut(at_c, wc).copy_from(&s_k.rows(cursor + wp, wc));
                cursor += wp + wc;
                at_p += wp;
                at_c += wc;
            }

            let d_i = d_t.rows(input_offsets[i], node.f()).into_owned();
            let y_i = &node.c_yt * &x_i + &node.c_ys * &s_plant + &node.d_yd * &d_i;
            let mut v = DVector::zeros(k + n_ctrl + p);
            v.rows_mut(0, k).copy_from(&xi_i);
            v.rows_mut(k, n_ctrl).copy_from(&s_ctrl);
            v.rows_mut(k + n_ctrl, p).copy_from(&y_i);
            let u_i = (local.theta() * v).rows(k + n_ctrl, node.u_width()).into_owned();
            res.u
                .view_mut((t, control_offsets[i]), (1, node.u_width()))
                .copy_from(&u_i.transpose());
        }

        res.z.row_mut(t).copy_from(&z_t.transpose());
        res.d.row_mut(t).copy_from(&d_t.transpose());
        if t >= res.tail_start {
            tail_sum += z_t.norm_squared();
        }

        state = &flat.a * &state + &flat.b * &d_t;
    }
    let tail_len = h - res.tail_start;
    res.tail_mean_z2 = if tail_len > 0 { tail_sum / tail_len as f64 } else { 0.0 };
    Ok(res)
}

fn offsets(widths: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut offs = vec![0];
    let mut acc = 0;
    for w in widths {
        acc += w;
        offs.push(acc);
    }
    offs
}

// ---------------------------------------------------------------------------
// Scaling benchmark
// ---------------------------------------------------------------------------

/// Synthesis mode benchmarked by [`bench_scaling`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Distributed,
    Decentralized,
    Central,
}

impl BenchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::Distributed => "distributed",
            BenchMode::Decentralized => "decentralized",
            BenchMode::Central => "central",
        }
    }
}

/// How centralized rows are executed.
#[derive(Debug, Clone)]
pub enum CentralExecution {
    /// Solve in this process with the solver's own time limit as the budget.
    /// The row times exactly the existence-program solve.
    InProcess,
    /// Run `<exe> synth --mode central …` as a child process, killed at the
    /// budget. The row times the whole child run (an upper bound on the solve
    /// time; a killed row is a lower-bound marker). This isolates very large
    /// solves and mirrors abandoning a run that exceeds its budget.
    Child { exe: PathBuf },
}

/// Outcome of one benchmark row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchStatus {
    /// Solved and every margin re-verified.
    Ok,
    /// The solver certified infeasibility.
    Infeasible,
    /// Abandoned at the time budget.
    Budget,
    /// Any other failure.
    Error,
}

impl BenchStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchStatus::Ok => "ok",
            BenchStatus::Infeasible => "infeasible",
            BenchStatus::Budget => "budget",
            BenchStatus::Error => "error",
        }
    }
}

/// One benchmark measurement.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub l: usize,
    pub mode: &'static str,
    /// Seed the network was generated from (replay with
    /// [`random_cycle_oscillator`]).
    pub seed: u64,
    pub status: BenchStatus,
    pub wall_ms: u128,
    /// The level the row ran at, when it solved.
    pub achieved_gamma: Option<f64>,
    pub verified: bool,
}

/// Scaling-study configuration.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Network sizes, ascending.
    pub sizes: Vec<usize>,
    /// Performance level every row runs at.
    pub gamma: f64,
    pub modes: Vec<BenchMode>,
    /// Per-row time budget.
    pub time_budget: Duration,
    /// Base seed; row `L` uses `seed + L`.
    pub seed: u64,
    pub central: CentralExecution,
    pub sdp: SolveOptions,
    /// Run rows concurrently (opt-in, for non-timing runs only: parallel rows
    /// contend for cores and their wall times are not comparable).
    pub parallel: bool,
}

impl BenchConfig {
    pub fn new(sizes: Vec<usize>, gamma: f64, modes: Vec<BenchMode>, budget: Duration) -> Self {
        Self {
            sizes,
            gamma,
            modes,
            time_budget: budget,
            seed: 7,
            central: CentralExecution::InProcess,
            sdp: SolveOptions::default(),
            parallel: false,
        }
    }
}

/// Runs the scaling study: for every size, generates a seeded cycle
/// oscillator network and times the existence-program solve of every
/// requested mode at the configured level. Failures never abort the study —
/// each row records its own status.
pub fn bench_scaling(config: &BenchConfig, backend: &(dyn ConicBackend + Sync)) -> Vec<BenchRow> {
    assert!(config.sizes.windows(2).all(|w| w[0] <= w[1]), "sizes must be ascending");
    let tasks: Vec<(usize, BenchMode)> = config
        .sizes
        .iter()
        .flat_map(|&l| config.modes.iter().map(move |&m| (l, m)))
        .collect();
    let run = |&(l, mode): &(usize, BenchMode)| -> BenchRow {
        let seed = config.seed + l as u64;
        let model = random_cycle_oscillator(l, seed);
        one_row(&model, l, mode, seed, config, backend)
    };
    if config.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = tasks.iter().map(|t| scope.spawn(move || run(t))).collect();
            handles.into_iter().map(|h| h.join().expect("benchmark row panicked")).collect()
        })
    } else {
        tasks.iter().map(run).collect()
    }
}

fn one_row(
    model: &NetworkModel,
    l: usize,
    mode: BenchMode,
    seed: u64,
    config: &BenchConfig,
    backend: &dyn ConicBackend,
) -> BenchRow {
    let mut row = BenchRow {
        l,
        mode: mode.as_str(),
        seed,
        status: BenchStatus::Error,
        wall_ms: 0,
        achieved_gamma: None,
        verified: false,
    };
    match mode {
        BenchMode::Distributed => {
            time_existence(model, MultiplierStructure::Free, config, backend, &mut row);
        }
        BenchMode::Decentralized => {
            let fixed = decentralized_default_multipliers(model.topology());
            time_existence(model, MultiplierStructure::Fixed(fixed), config, backend, &mut row);
        }
        BenchMode::Central => match &config.central {
            CentralExecution::InProcess => match flatten_to_single_node(model) {
                Ok(single) => {
                    time_existence(&single, MultiplierStructure::Free, config, backend, &mut row);
                }
                Err(_) => row.status = BenchStatus::Error,
            },
            CentralExecution::Child { exe } => run_central_child(exe, model, config, &mut row),
        },
    }
    row
}

/// Times exactly the existence-program solve (assembly excluded) under the
/// configured budget.
fn time_existence(
    model: &NetworkModel,
    structure: MultiplierStructure,
    config: &BenchConfig,
    backend: &dyn ConicBackend,
    row: &mut BenchRow,
) {
    let Ok((problem, _)) = build_existence_problem(model, config.gamma, &structure, 0.0) else {
        row.status = BenchStatus::Error;
        return;
    };
    let mut opts = config.sdp.clone();
    opts.time_limit = Some(config.time_budget);
    let start = Instant::now();
    let outcome = problem.solve(backend, &opts);
    let elapsed = start.elapsed();
    row.wall_ms = elapsed.as_millis();
    match outcome {
        Ok(sol) if sol.verified => {
            row.status = BenchStatus::Ok;
            row.achieved_gamma = Some(config.gamma);
            row.verified = true;
        }
        Ok(sol) if sol.status == SolveStatus::Infeasible => row.status = BenchStatus::Infeasible,
        _ if elapsed >= config.time_budget => row.status = BenchStatus::Budget,
        _ => row.status = BenchStatus::Error,
    }
}

/// Runs the centralized synthesis as a child process, killing it when the
/// budget elapses.
fn run_central_child(
    exe: &PathBuf,
    model: &NetworkModel,
    config: &BenchConfig,
    row: &mut BenchRow,
) {
    let dir = std::env::temp_dir().join(format!(
        "h2net-bench-{}-{}-{}",
        std::process::id(),
        row.l,
        row.seed
    ));
    let cleanup = |d: &std::path::Path| {
        let _ = std::fs::remove_dir_all(d);
    };
    if std::fs::create_dir_all(&dir).is_err() {
        row.status = BenchStatus::Error;
        return;
    }
    let model_path = dir.join("model.json");
    if crate::io::save_model(&model_path, model).is_err() {
        row.status = BenchStatus::Error;
        cleanup(&dir);
        return;
    }
    let out_dir = dir.join("out");
    let spawned = std::process::Command::new(exe)
        .arg("synth")
        .arg("--model")
        .arg(&model_path)
        .arg("--mode")
        .arg("central")
        .arg("--gamma")
        .arg(config.gamma.to_string())
        .arg("--out")
        .arg(&out_dir)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .spawn();
    let Ok(mut child) = spawned else {
        row.status = BenchStatus::Error;
        cleanup(&dir);
        return;
    };
    let start = Instant::now();
    let code = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status.code(),
            Ok(None) if start.elapsed() >= config.time_budget => {
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(20)),
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                break Some(-1);
            }
        }
    };
    row.wall_ms = start.elapsed().as_millis();
    match code {
        Some(0) => {
            row.status = BenchStatus::Ok;
            row.achieved_gamma = Some(config.gamma);
            row.verified = true;
        }
        Some(1) => row.status = BenchStatus::Infeasible,
        Some(_) => row.status = BenchStatus::Error,
        None => {
            row.status = BenchStatus::Budget;
            row.wall_ms = config.time_budget.as_millis();
        }
    }
    cleanup(&dir);
}

/// Renders benchmark rows as CSV with a header line.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("L,mode,seed,status,wall_ms,achieved_gamma,verified\n");
    for r in rows {
        let gamma = r.achieved_gamma.map(|g| g.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.l,
            r.mode,
            r.seed,
            r.status.as_str(),
            r.wall_ms,
            gamma,
            r.verified
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis;
    use crate::netmodel::well_posed;
    use crate::sdp::ClarabelBackend;
    use crate::synthesis::{synthesize_distributed, GammaSpec, SynthesisOptions, SynthesisResult};
    use approx::assert_abs_diff_eq;

    #[test]
    fn reference_triangle_matches_the_discretization() {
        let model = reference_triangle();
        // Node 1: m = 3, b = 2, κ = k_12 + k_13 = 2.
        let want = DMatrix::from_row_slice(
            2,
            2,
            &[1.0, 0.1, -2.0 * 0.1 / 3.0, 1.0 - 0.2 / 3.0],
        );
        assert_abs_diff_eq!(model.node(0).a_tt, want, epsilon = 1e-15);
        // Broadcast: each neighbor receives θ; each incoming θ_j is scaled by
        // k_ij T / m_i on the velocity row.
        assert_eq!(model.node(0).a_st, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]));
        assert_abs_diff_eq!(
            model.node(0).a_ts,
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.1 / 3.0, 0.1 / 3.0]),
            epsilon = 1e-15
        );
        assert_eq!(model.node(0).a_ss, DMatrix::zeros(2, 2));
        assert_eq!(model.node(0).c_zt, DMatrix::identity(2, 2));
        assert_abs_diff_eq!(model.node(1).b_td[(1, 0)], 0.1, epsilon = 1e-15);
        // Disturbance and control enter identically.
        assert_eq!(model.node(2).b_td, model.node(2).b_tu);
        for node in model.nodes() {
            assert_eq!(mat::max_abs(&node.b_sd), 0.0);
            assert_eq!(mat::max_abs(&node.b_su), 0.0);
            assert_eq!(mat::max_abs(&node.d_yd), 0.0);
        }
    }

    #[test]
    fn isolated_oscillator_has_no_channels() {
        let topo = cycle_topology(1);
        let params = OscillatorParams {
            mass: vec![2.0],
            damping: vec![0.5],
            stiffness: BTreeMap::new(),
            dt: 0.1,
        };
        let model = gen_oscillator(&topo, &params);
        let node = model.node(0);
        assert_abs_diff_eq!(
            node.a_tt,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0 - 0.5 * 0.1 / 2.0]),
            epsilon = 1e-15
        );
        assert_eq!(node.n(), 0);
        assert_eq!(node.a_ts.shape(), (2, 0));
        assert_eq!(node.a_st.shape(), (0, 2));
    }

    #[test]
    fn generated_cycles_are_well_posed() {
        for l in [2usize, 3, 8, 17] {
            let model = random_cycle_oscillator(l, 41 + l as u64);
            let (wp, rc) = well_posed(&model);
            assert!(wp, "cycle L={l} should be well posed (rcond {rc})");
            for node in model.nodes() {
                assert_eq!(mat::max_abs(&node.b_sd), 0.0);
                assert_eq!(mat::max_abs(&node.a_ss), 0.0);
                assert!(node.a_tt[(1, 0)] < 0.0, "restoring torque pulls back");
            }
            // Same seed, same network.
            let again = random_cycle_oscillator(l, 41 + l as u64);
            assert_eq!(model.node(l - 1).a_tt, again.node(l - 1).a_tt);
        }
    }

    #[test]
    fn variable_count_grows_linearly_on_cycles() {
        // Per node: two 2×2 symmetric storages (3 scalars each) plus α and β.
        // Per edge: four scalar X11/Y11 blocks and two scalar X12/Y12 blocks.
        // A cycle has L edges, so 8L + 6L = 14L scalars in total.
        for l in [3usize, 5, 12] {
            let model = random_cycle_oscillator(l, 3);
            let (p, _) =
                build_existence_problem(&model, 10.0, &MultiplierStructure::Free, 0.0).unwrap();
            assert_eq!(p.num_scalars(), 14 * l);
        }
    }

    #[test]
    fn zero_state_zero_noise_stays_at_rest() {
        let model = reference_triangle();
        // Close every node with a zero controller of matching dimensions.
        let locals: Vec<ClosedLoopLocal> = (0..3)
            .map(|i| {
                let node = model.node(i);
                let theta = DMatrix::zeros(node.k() + node.u_width(), node.k() + node.y_width());
                crate::netmodel::close_local(node, &[1, 1], &[0, 0], &theta).unwrap()
            })
            .collect();
        let zeros = DVector::zeros(6);
        let sim = simulate_closed_loop(
            &model,
            &locals,
            &zeros,
            &zeros,
            DisturbanceSpec::Zero,
            40,
            3,
        )
        .unwrap();
        assert_eq!(sim.horizon, 40, "marginally stable loop keeps the requested horizon");
        for series in [&sim.x, &sim.xi, &sim.u, &sim.z, &sim.d] {
            assert_eq!(mat::max_abs(series), 0.0);
        }
        assert_eq!(sim.tail_mean_z2, 0.0);
    }

    fn synthesized_triangle() -> SynthesisResult {
        synthesize_distributed(
            &reference_triangle(),
            GammaSpec::Fixed(1.0),
            &ClarabelBackend,
            &SynthesisOptions::default(),
        )
        .expect("triangle is solvable at γ = 1")
    }

    #[test]
    fn zero_disturbance_trajectories_decay() {
        let result = synthesized_triangle();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let sim = simulate_closed_loop(
            &result.model,
            &result.locals,
            &x0,
            &DVector::zeros(6),
            DisturbanceSpec::Zero,
            100,
            0,
        )
        .unwrap();
        assert!(sim.horizon >= 100);
        let step_norm = |t: usize| sim.x.row(t).norm() + sim.xi.row(t).norm();
        let start = step_norm(0);
        let end = step_norm(sim.horizon - 1);
        assert!(start >= 1e-2, "random start is nonzero");
        assert!(
            end <= 1e-2 * start,
            "states should decay over ten time constants: start {start}, end {end}"
        );
        // Disturbance series is identically zero; control is active.
        assert_eq!(mat::max_abs(&sim.d), 0.0);
        assert!(mat::max_abs(&sim.u) > 0.0);
    }

    #[test]
    fn recovered_controls_reproduce_the_performance_output() {
        // Recompute z per node from the plant blocks, the recovered channel
        // signals, and the recovered controls; it must match the series the
        // flattened closed loop produced.
        let result = synthesized_triangle();
        let model = &result.model;
        let sim = simulate_closed_loop(
            model,
            &result.locals,
            &DVector::from_element(6, 0.3),
            &DVector::zeros(6),
            DisturbanceSpec::WhiteUnit,
            60,
            9,
        )
        .unwrap();

        // Independent channel recovery on the plant side: the plant channels
        // of the closed loop satisfy s = Δ_plant o with o = A^ST x + A^SS s
        // (oscillators have no B^Sd and the controller does not enter o).
        let delta_p = build_delta(model.topology());
        let a_st_p = mat::block_diag(&model.nodes().iter().map(|n| &n.a_st).collect::<Vec<_>>());
        let a_ss_p = mat::block_diag(&model.nodes().iter().map(|n| &n.a_ss).collect::<Vec<_>>());
        let np = delta_p.nrows();
        let op = (DMatrix::identity(np, np) - &delta_p * &a_ss_p).lu();
        let ch_off = model.channel_offsets();

        for t in [0usize, 1, 7, 30, 59] {
            let x_t = sim.x.row(t).transpose();
            let s_plant = op.solve(&(&delta_p * (&a_st_p * &x_t))).unwrap();
            for (i, node) in model.nodes().iter().enumerate() {
                let x_i = x_t.rows(model.state_offsets()[i], node.k()).into_owned();
                let s_i = s_plant.rows(ch_off[i], node.n()).into_owned();
                let d_i = sim.d.row(t).transpose().rows(sim.input_offsets[i], node.f()).into_owned();
                let u_i =
                    sim.u.row(t).transpose().rows(sim.control_offsets[i], node.u_width()).into_owned();
                let z_i = &node.c_zt * &x_i + &node.c_zs * &s_i + &node.d_zd * &d_i + &node.d_zu * &u_i;
                let z_rec = sim.z.row(t).transpose().rows(sim.output_offsets[i], node.q()).into_owned();
                assert_abs_diff_eq!(z_i, z_rec, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn white_noise_tail_tracks_the_h2_norm() {
        let result = synthesized_triangle();
        let h2 = result.report.h2_norm;
        let sim = simulate_closed_loop(
            &result.model,
            &result.locals,
            &DVector::zeros(6),
            &DVector::zeros(6),
            DisturbanceSpec::WhiteUnit,
            20_000,
            17,
        )
        .unwrap();
        let ratio = sim.tail_mean_z2 / (h2 * h2);
        assert!(
            (0.5..2.0).contains(&ratio),
            "single-seed tail mean {} vs H2² {} (ratio {ratio})",
            sim.tail_mean_z2,
            h2 * h2
        );
    }

    #[test]
    fn simulation_csv_has_matching_header_and_rows() {
        let result = synthesized_triangle();
        let sim = simulate_closed_loop(
            &result.model,
            &result.locals,
            &DVector::zeros(6),
            &DVector::zeros(6),
            DisturbanceSpec::WhiteUnit,
            5,
            1,
        )
        .unwrap();
        let csv = sim.to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        // step + x(6) + xi(6) + u(3) + z(6) + d(3).
        assert_eq!(header.split(',').count(), 1 + 6 + 6 + 3 + 6 + 3);
        assert!(header.starts_with("step,x1_1,x1_2,x2_1"));
        assert!(header.contains("xi3_2"));
        assert!(header.ends_with("d3_1"));
        assert_eq!(lines.count(), sim.horizon);
    }

    #[test]
    fn mismatched_initial_conditions_are_rejected() {
        let result = synthesized_triangle();
        let err = simulate_closed_loop(
            &result.model,
            &result.locals,
            &DVector::zeros(5),
            &DVector::zeros(6),
            DisturbanceSpec::Zero,
            10,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::Dimension(_)));
    }

    #[test]
    fn scaling_rows_record_outcomes_honestly() {
        let config = BenchConfig::new(
            vec![3],
            10.0,
            vec![BenchMode::Distributed, BenchMode::Decentralized],
            Duration::from_secs(120),
        );
        let rows = bench_scaling(&config, &ClarabelBackend);
        assert_eq!(rows.len(), 2);
        let dist = &rows[0];
        assert_eq!((dist.l, dist.mode), (3, "distributed"));
        assert_eq!(dist.status, BenchStatus::Ok);
        assert!(dist.verified && dist.achieved_gamma == Some(10.0));
        assert!(dist.wall_ms > 0);
        // Angle-broadcast oscillators admit no certificate with the default
        // fixed multipliers; the row must say so rather than fail.
        let dec = &rows[1];
        assert_eq!(dec.mode, "decentralized");
        assert_eq!(dec.status, BenchStatus::Infeasible);
        assert!(!dec.verified);

        let csv = bench_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "L,mode,seed,status,wall_ms,achieved_gamma,verified");
        assert!(lines.next().unwrap().starts_with("3,distributed,10,ok,"));
        assert!(lines.next().unwrap().contains(",decentralized,10,infeasible,"));
    }

    #[test]
    fn neutral_supply_sums_to_zero_on_generated_networks() {
        // The interconnection supply with the default pairing multipliers
        // telescopes to zero along any trajectory of any generated network.
        let model = random_cycle_oscillator(6, 99);
        let ms = decentralized_default_multipliers(model.topology());
        let flat = assemble_interconnected(&model).unwrap();
        let delta = build_delta(model.topology());
        let a_st = mat::block_diag(&model.nodes().iter().map(|n| &n.a_st).collect::<Vec<_>>());
        let ch_off = model.channel_offsets();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = DVector::from_fn(flat.state_dim(), |_, _| rng.random_range(-1.0..1.0));
        for _ in 0..25 {
            let o = &a_st * &x; // A^SS = 0 for oscillators
            let s = &delta * &o;
            let total: f64 = (0..model.nodes().len())
                .map(|i| analysis::node_supply(&ms, model.topology(), &ch_off, &o, &s, i))
                .sum();
            assert_abs_diff_eq!(total, 0.0, epsilon = 1e-9);
            let d = DVector::from_fn(flat.input_dim(), |_, _| rng.random_range(-1.0..1.0));
            x = &flat.a * &x + &flat.b * &d;
        }
    }
}
