use mevsindy::ghb::{assemble_problem, frequency_normalize, CandidateLibrary, LibrarySpec};
use mevsindy::model::{fixtures, simulate};
use mevsindy::pipeline::{identify_model, PipelineConfig};
use mevsindy::signal::{decompose_with, detect_harmonics, estimate_fundamental, DecomposeOptions, ForcingConfig, TimeSeries};
use mevsindy::sparse::{identify, prune_and_refit, RegressionConfig};

fn table1(beta: f64, omega: f64) -> TimeSeries {
    simulate(&fixtures::table1(), &ForcingConfig::cosine(beta, omega).unwrap(), &[0.0, 0.0], 1000.0, 0.01).unwrap()
}

fn orders01() -> PipelineConfig {
    PipelineConfig { orders: Some(vec![0, 1]), ..Default::default() }
}

fn rel_rmse(a: &[f64], b: &[f64]) -> f64 {
    let e: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (e / b.iter().map(|y| y * y).sum::<f64>()).sqrt()
}

#[test]
fn table1_structure_and_contributions() {
    let (model, report) = identify_model(&[table1(0.5, 1.999)], &orders01()).unwrap();
    let ch = &report.channels[0];
    let mut s = ch.support.clone();
    s.sort();
    assert_eq!(s, ["cos", "v1^1", "x1^1", "x1^2", "x1^3"]);
    assert!((model.omega_sq[0] - 4.0).abs() < 4e-3);
    assert!((ch.identified_forcing - 0.5).abs() < 5e-3);
    let score = |n: &str| ch.contributions.iter().find(|c| c.0 == n).unwrap().1;
    // forcing and linear terms dominate; the cubic clears the cutoff
    assert_eq!(score("cos"), 1.0);
    assert!(score("v1^1") > score("x1^3") && score("x1^3") > 0.05);
    assert!(ch.residual < 0.1);
}

#[test]
fn strong_drive_detects_second_harmonic() {
    let ts = table1(1.0, 1.999);
    let w = estimate_fundamental(&ts, 0).unwrap();
    assert!((w - 1.999).abs() < 2.0 * std::f64::consts::PI / 1000.0);
    assert_eq!(detect_harmonics(&ts, 0, w, 0.01).unwrap(), vec![0, 1, 2]);
}

#[test]
fn identified_model_reproduces_training_trajectory() {
    let ts = table1(0.5, 1.999);
    let (model, _) = identify_model(std::slice::from_ref(&ts), &orders01()).unwrap();
    let again = simulate(&model, ts.forcing.as_ref().unwrap(), &[0.0, 0.0], 1000.0, 0.01).unwrap();
    let e = rel_rmse(&again.x[0], &ts.x[0]);
    assert!(e < 5e-2, "{e}");
}

#[test]
fn reference_frequency_shift_on_fixed_support() {
    let ts = table1(0.5, 1.999);
    let opts = DecomposeOptions { min_cycles: 20.0, ..Default::default() };
    let d = decompose_with(&ts, 0, &[0, 1], &opts).unwrap();
    let lib = CandidateLibrary::build(&LibrarySpec::default(), 1, 0).unwrap();
    let p = assemble_problem(&ts, &d, &lib, 5).unwrap();
    let k = p.linear_index().unwrap();
    let base = identify(&frequency_normalize(&p, 2.0).unwrap(), &RegressionConfig::default()).unwrap();
    // refit on the same support against a shifted reference: no pruning
    let keep = RegressionConfig { contribution_cutoff: 1e-12, ..Default::default() };
    for wbar in [1.98, 2.03] {
        let q = frequency_normalize(&p, wbar).unwrap();
        let fit = prune_and_refit(&q, &base.values, &keep).unwrap();
        assert_eq!(fit.support, base.support);
        let dx = fit.values[k] - base.values[k];
        assert!((dx - (4.0 - wbar * wbar)).abs() < 1e-6, "{dx}");
        assert!((wbar * wbar + fit.values[k] - (4.0 + base.values[k])).abs() < 1e-6);
    }
}

#[test]
fn two_point_merge_is_consistent() {
    let cfg = orders01();
    let a = table1(0.5, 1.95);
    let b = table1(0.5, 2.05);
    let (_, ra) = identify_model(std::slice::from_ref(&a), &cfg).unwrap();
    let (_, rb) = identify_model(std::slice::from_ref(&b), &cfg).unwrap();
    let (m, r) = identify_model(&[a, b], &cfg).unwrap();
    let worse = ra.channels[0].residual.max(rb.channels[0].residual);
    assert!(r.channels[0].residual <= 2.0 * worse, "{} vs {worse}", r.channels[0].residual);
    assert!((m.omega_sq[0] - ra.channels[0].omega_sq).abs() / m.omega_sq[0] < 1e-2);
    assert!((m.omega_sq[0] - rb.channels[0].omega_sq).abs() / m.omega_sq[0] < 1e-2);
    assert_eq!(r.trajectories, 2);
}

#[test]
fn beam_two_point_merge() {
    let truth = fixtures::beam();
    let run = |w: f64| simulate(&truth, &ForcingConfig::cosine(0.25, w).unwrap(), &[0.0; 6], 3000.0, 0.1).unwrap();
    let cfg = PipelineConfig::default();
    let (m, r) = identify_model(&[run(0.545), run(0.551)], &cfg).unwrap();
    assert!(r.channels[0].residual <= cfg.regression.residual_tolerance);
    assert!((m.omega_sq[0] - 0.2998).abs() / 0.2998 < 1e-2, "{}", m.omega_sq[0]);
}

#[test]
fn merge_requires_shared_forcing_amplitude() {
    let err = identify_model(&[table1(0.5, 1.95), table1(0.25, 2.05)], &orders01()).unwrap_err();
    assert_eq!(err.code(), "INCOMPATIBLE_PROBLEMS");
}
