//! `ambiguity`: numerical demonstrations of the two gauge freedoms.

use crate::manifest::ManifestBuilder;
use std::path::Path;
use surfel_track_core::diagnostics::{floating_map_report, growing_map_report};

pub fn run(which: &str, seed: u64, out: &Path) -> Result<u8, String> {
    let mut manifest = ManifestBuilder::new("ambiguity");
    manifest.seed(seed);
    manifest.set("which", which);
    std::fs::create_dir_all(out).map_err(|e| format!("creating {}: {e}", out.display()))?;

    let pass = match which {
        "growing" => {
            let report = growing_map_report(seed);
            println!(
                "max reprojection displacement under mu in {{0.5, 2, 10}}: {:.3e} px",
                report.max_reprojection_px
            );
            println!(
                "free-deformation Hessian sigma_min/sigma_max: {:.3e}",
                report.general_ratio
            );
            println!(
                "near-null direction vs analytic scale direction: cosine {:.6}",
                report.null_cosine
            );
            let improvement = report.isometry_ratio / report.general_ratio;
            if improvement.is_finite() {
                println!(
                    "hard-isometry sigma_min/sigma_max: {:.3e} ({improvement:.1e}x better conditioned)",
                    report.isometry_ratio
                );
            } else {
                println!(
                    "hard-isometry sigma_min/sigma_max: {:.3e} (free ratio underflowed; improvement unbounded)",
                    report.isometry_ratio
                );
            }
            let text = format!(
                "max_reprojection_px,{:.6e}\ngeneral_ratio,{:.6e}\nnull_cosine,{:.6}\nisometry_ratio,{:.6e}\n",
                report.max_reprojection_px,
                report.general_ratio,
                report.null_cosine,
                report.isometry_ratio
            );
            std::fs::write(out.join("ambiguity_growing.csv"), text)
                .map_err(|e| e.to_string())?;
            report.pass()
        }
        "floating" => {
            let report = floating_map_report(seed);
            let sv = &report.singular_values_free;
            println!("joint Hessian spectrum with omega_E = 0 ({} values):", sv.len());
            let head: Vec<String> = sv.iter().take(4).map(|s| format!("{s:.3e}")).collect();
            let tail: Vec<String> = sv
                .iter()
                .skip(sv.len().saturating_sub(8))
                .map(|s| format!("{s:.3e}"))
                .collect();
            println!("  head: {}", head.join(", "));
            println!("  tail: {}", tail.join(", "));
            println!(
                "near-null directions (sigma < 1e-8 sigma_max): {}",
                report.near_null_count_free
            );
            println!(
                "with omega_E = 1: sigma_min/sigma_max = {:.3e} (full rank)",
                report.regularized_ratio
            );
            let mut text = String::from("index,sigma_free\n");
            for (i, s) in sv.iter().enumerate() {
                text.push_str(&format!("{i},{s:.9e}\n"));
            }
            std::fs::write(out.join("ambiguity_floating.csv"), text)
                .map_err(|e| e.to_string())?;
            report.pass()
        }
        other => return Err(format!("unknown ambiguity '{other}' (growing | floating)")),
    };

    manifest.set("pass", pass);
    manifest.write(out)?;
    Ok(if pass { 0 } else { 4 })
}
