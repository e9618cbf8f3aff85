// temporary benchmark: full desk-scale study aggregate
fn main() {
    env_logger::init();
    let cfg = nonstat_gp::sim::SimConfig::default();
    let t0 = std::time::Instant::now();
    let report = nonstat_gp::sim::run_study(&cfg).unwrap();
    println!("study took {:?}", t0.elapsed());
    for row in report.ns.rows() {
        println!("NS {}: ll={:.1} crps={:.1} rmse={:.3} cov={:.3}", row.stratum, row.log_loss, row.crps, row.rmse, row.coverage95);
    }
    for row in report.s.rows() {
        println!("S  {}: ll={:.1} crps={:.1} rmse={:.3} cov={:.3}", row.stratum, row.log_loss, row.crps, row.rmse, row.coverage95);
    }
    println!("coef recovery: {:?}", report.coef_recovery);
    for r in &report.replicates {
        println!("rep {}: NS rmse={:.3} S rmse={:.3} NS ll={:.1} S ll={:.1} NS crps={:.1} S crps={:.1}",
            r.index, r.ns_scores.overall().rmse, r.s_scores.overall().rmse,
            r.ns_scores.overall().log_loss, r.s_scores.overall().log_loss,
            r.ns_scores.overall().crps, r.s_scores.overall().crps);
        println!("  coef: {:?}", r.ns_coef_mean);
    }
}
