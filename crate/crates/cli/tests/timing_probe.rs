use axial_cli::config::RunConfig;
use axial_cli::pipeline::desk_trial;

#[test]
#[ignore]
fn time_one_desk_trial() {
    let t0 = std::time::Instant::now();
    let cfg = RunConfig::default();
    let out = desk_trial(&cfg).unwrap();
    println!(
        "desk trial: {:.1}s auc={:.4}",
        t0.elapsed().as_secs_f64(),
        out.auc_significant
    );
    for op in &out.operating_points {
        println!(
            "  target {:.3}: tau={} coverage={:.3} csmr={:?} reported={}",
            op.target_coverage, op.tau, op.realized_coverage, op.csmr, op.n_reported
        );
    }
}
