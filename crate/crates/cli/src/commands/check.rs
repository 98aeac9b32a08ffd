//! `check-jacobians`: finite-difference certification of every analytic
//! Jacobian block, with a CSV report of max relative errors.

use crate::manifest::ManifestBuilder;
use std::path::Path;
use surfel_track_core::diagnostics::run_jacobian_checks;

pub fn run(trials: usize, seed: u64, out: &Path) -> Result<u8, String> {
    if trials == 0 {
        return Err("--trials must be at least 1".into());
    }
    let mut manifest = ManifestBuilder::new("check-jacobians");
    manifest.seed(seed);
    manifest.set("trials", trials);

    let report = run_jacobian_checks(seed, trials);
    for block in &report.blocks {
        println!(
            "{:<26} max rel err {:>12.3e}  (tol {:.0e})  {}",
            block.name,
            block.max_rel_err,
            block.tol,
            if block.pass() { "PASS" } else { "FAIL" }
        );
    }

    std::fs::create_dir_all(out).map_err(|e| format!("creating {}: {e}", out.display()))?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(|e| e.to_string())?;
    std::fs::write(out.join("jacobian_report.csv"), csv)
        .map_err(|e| format!("writing jacobian_report.csv: {e}"))?;
    manifest.set("all_pass", report.all_pass());
    manifest.write(out)?;

    Ok(if report.all_pass() { 0 } else { 4 })
}
