use clarabel::algebra::*;
use clarabel::solver::*;

fn main() {
    // min x  s.t.  [x 1; 1 x] >= 0  -> x* = 1
    let p = CscMatrix::<f64>::zeros((1, 1));
    let q = vec![1.0];
    // s = b - A x in PSD triangle cone, svec upper col-major with sqrt(2) off-diag
    let a = CscMatrix::new(3, 1, vec![0, 3], vec![0, 1, 2], vec![-1.0, 0.0, -1.0]);
    let b = vec![0.0, 2.0_f64.sqrt(), 0.0];
    let cones = [PSDTriangleConeT(2)];
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .build()
        .unwrap();
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings).unwrap();
    solver.solve();
    println!("status={:?} x={:?}", solver.solution.status, solver.solution.x);
}
