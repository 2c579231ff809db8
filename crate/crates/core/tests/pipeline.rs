//! Library-surface integration: the search → check → synthesize → verify
//! pipeline, and the file formats, exercised through the public API only.

use h2net::analysis::{
    analysis_residuals, h2_norm_freqgrid, h2_norm_lyapunov, trajectory_dissipation_check,
};
use h2net::bench::{reference_triangle, simulate_closed_loop, DisturbanceSpec};
use h2net::io;
use h2net::netmodel::{
    assemble_interconnected, closed_loop_network, NetworkModel, SubsystemRealization, Topology,
};
use h2net::sdp::{ClarabelBackend, SolveOptions};
use h2net::synthesis::{find_certificate, synthesize_distributed, GammaSpec, SynthesisOptions};
use nalgebra::{DMatrix, DVector};

/// Two identical scalar subsystems exchanging one channel; open loop.
fn chain_model() -> NetworkModel {
    let topo = Topology::new(2, &[(1, 0, 1)]).unwrap();
    let node = || SubsystemRealization {
        a_tt: DMatrix::from_element(1, 1, 0.5),
        a_ts: DMatrix::from_element(1, 1, 0.1),
        a_st: DMatrix::from_element(1, 1, 1.0),
        b_td: DMatrix::from_element(1, 1, 1.0),
        c_zt: DMatrix::from_element(1, 1, 1.0),
        ..SubsystemRealization::zeros(1, 1, 1, 1, 0, 0)
    };
    NetworkModel::new(topo, vec![node(), node()]).unwrap()
}

#[test]
fn searched_certificate_verifies_and_dissipates() {
    let model = chain_model();
    let cert = find_certificate(&model, 1.8, &ClarabelBackend, &SolveOptions::default())
        .expect("level 1.8 is certifiable for the chain");

    let rr = analysis_residuals(&model, &cert).unwrap();
    assert!(rr.strict, "solver-found certificate must check out strictly");
    assert!(rr.lambda_max.iter().all(|&l| l < 0.0));
    assert!(rr.trace_slack >= 0.0);

    // The algebraic checks again, on simulated trajectories.
    let rep = trajectory_dissipation_check(&model, &cert, 500, 9).unwrap();
    assert_eq!(rep.steps, 500);
    assert!(rep.max_dissipation_violation <= 1e-9, "violation {}", rep.max_dissipation_violation);
    assert!(rep.monotone_zero_input);
}

#[test]
fn distributed_triangle_pipeline_end_to_end() {
    let model = reference_triangle();
    let result = synthesize_distributed(
        &model,
        GammaSpec::Fixed(1.0),
        &ClarabelBackend,
        &SynthesisOptions::default(),
    )
    .expect("the reference triangle admits distributed controllers at level 1");
    assert!(result.report.ok);
    assert!(result.report.h2_within_gamma);
    assert!(result.report.theta_consistent);

    // Judge the closed loop from its assembled realization alone.
    let closed = closed_loop_network(&result.model, &result.locals).unwrap();
    let flat = assemble_interconnected(&closed).unwrap();
    let lyap = h2_norm_lyapunov(&flat).unwrap();
    let grid = h2_norm_freqgrid(&flat).unwrap();
    assert!(lyap < 1.0, "flat H2 {lyap} must beat the level");
    assert!((lyap - grid).abs() <= 1e-6 * lyap, "routes disagree: {lyap} vs {grid}");

    // And drive it: disturbed trajectories stay bounded with a nonzero output.
    let k_total = *result.model.state_offsets().last().unwrap();
    let sim = simulate_closed_loop(
        &result.model,
        &result.locals,
        &DVector::zeros(k_total),
        &DVector::zeros(k_total),
        DisturbanceSpec::WhiteUnit,
        500,
        1,
    )
    .unwrap();
    assert!(sim.tail_mean_z2.is_finite() && sim.tail_mean_z2 > 0.0);
}

#[test]
fn model_certificate_and_controller_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();

    // Models reload with every block bit-exact.
    let model = chain_model();
    let model_path = dir.path().join("chain.json");
    io::save_model(&model_path, &model).unwrap();
    let loaded = io::load_model(&model_path).unwrap();
    assert_eq!(loaded.topology(), model.topology());
    assert_eq!(loaded.nodes(), model.nodes());

    // Certificates carry solver output (full-precision floats) losslessly.
    let cert = find_certificate(&model, 1.8, &ClarabelBackend, &SolveOptions::default()).unwrap();
    let cert_path = dir.path().join("cert.json");
    io::save_certificate(&cert_path, &cert).unwrap();
    let cert2 = io::load_certificate(&cert_path, model.topology()).unwrap();
    assert_eq!(cert2.gamma, cert.gamma);
    assert_eq!(cert2.x, cert.x);
    assert_eq!(cert2.rho, cert.rho);
    for (hi, lo) in model.topology().pairs() {
        assert_eq!(cert2.multipliers.x11(hi, lo), cert.multipliers.x11(hi, lo));
        assert_eq!(cert2.multipliers.x11(lo, hi), cert.multipliers.x11(lo, hi));
        assert_eq!(cert2.multipliers.x12(hi, lo), cert.multipliers.x12(hi, lo));
    }

    // Controllers reattach from disk to the same closed loop, bit for bit.
    let tri = reference_triangle();
    let result = synthesize_distributed(
        &tri,
        GammaSpec::Fixed(1.0),
        &ClarabelBackend,
        &SynthesisOptions::default(),
    )
    .unwrap();
    let ctrl_path = dir.path().join("controllers.json");
    io::save_controllers(&ctrl_path, &result.locals).unwrap();
    let entries = io::load_controllers(&ctrl_path).unwrap();
    let locals = io::close_with_entries(&result.model, &entries).unwrap();
    let original = assemble_interconnected(&closed_loop_network(&result.model, &result.locals).unwrap()).unwrap();
    let reloaded = assemble_interconnected(&closed_loop_network(&result.model, &locals).unwrap()).unwrap();
    assert_eq!(reloaded.a, original.a);
    assert_eq!(reloaded.b, original.b);
    assert_eq!(reloaded.c, original.c);
    assert_eq!(reloaded.d, original.d);
}
