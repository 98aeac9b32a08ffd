//! `eval`: per-surfel 3D RMSE, trajectory ATE, inlier statistics, and the
//! ZNCC ROC sweep against RMSE-defined ground-truth labels.

use crate::dataset::{read_gt_surfels, read_results, read_trajectory};
use crate::manifest::ManifestBuilder;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use surfel_track_core::tracker::roc_sweep;
use surfel_track_core::Vec3;

#[derive(Serialize)]
struct Metrics {
    frames_processed: usize,
    mean_scene_depth: f64,
    mean_surfel_rmse: f64,
    per_surfel_rmse: BTreeMap<usize, f64>,
    inlier_ratio: f64,
    ate: Option<f64>,
    rmse_threshold: f64,
    roc_auc: Option<f64>,
    positives: usize,
    negatives: usize,
}

pub fn run(
    results_dir: &Path,
    dataset_dir: &Path,
    out: &Path,
    rmse_threshold: Option<f64>,
) -> Result<u8, String> {
    let results = read_results(&results_dir.join("results.ndjson"))?;
    if results.is_empty() {
        return Err("results.ndjson holds no frames".into());
    }
    let gt_rows = read_gt_surfels(&dataset_dir.join("gt_surfels.csv"))?;
    let gt_traj = read_trajectory(&dataset_dir.join("gt_trajectory.csv")).ok();

    let mut manifest = ManifestBuilder::new("eval");
    manifest.dataset(dataset_dir);
    manifest.set("results", results_dir.display());

    // gt[(id, frame)] -> (position, visible)
    let mut gt = BTreeMap::new();
    let mut depth_sum = 0.0;
    let mut depth_count = 0usize;
    for row in &gt_rows {
        gt.insert((row.id, row.frame), (row.position, row.visible));
        if row.visible {
            depth_sum += row.position.z;
            depth_count += 1;
        }
    }
    if depth_count == 0 {
        return Err("ground truth holds no visible observations".into());
    }
    let mean_depth = depth_sum / depth_count as f64;
    let threshold = rmse_threshold.unwrap_or(0.02 * mean_depth);

    // Per-surfel squared errors over inlier observations, plus pooled
    // (score, label) pairs for the ROC.
    let mut sq_errors: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut inliers = 0usize;
    let mut observations = 0usize;
    for frame in &results {
        for surfel in &frame.surfels {
            let Some((gt_pos, visible)) = gt.get(&(surfel.id, frame.frame)) else {
                continue;
            };
            let est = Vec3::new(surfel.x[0], surfel.x[1], surfel.x[2]);
            let err = (est - gt_pos).norm();
            if *visible {
                observations += 1;
                if surfel.inlier {
                    inliers += 1;
                    let entry = sq_errors.entry(surfel.id).or_insert((0.0, 0));
                    entry.0 += err * err;
                    entry.1 += 1;
                }
                scored.push((surfel.zncc, err < threshold));
            }
        }
    }

    let per_surfel_rmse: BTreeMap<usize, f64> = sq_errors
        .iter()
        .map(|(id, (sq, n))| (*id, (sq / *n as f64).sqrt()))
        .collect();
    let mean_surfel_rmse = if per_surfel_rmse.is_empty() {
        f64::INFINITY
    } else {
        per_surfel_rmse.values().sum::<f64>() / per_surfel_rmse.len() as f64
    };

    let ate = gt_traj.as_ref().map(|traj| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for frame in &results {
            if let Some(row) = traj.iter().find(|r| r.frame == frame.frame) {
                let est_center = frame.pose_struct().center();
                sum += (est_center - row.center()).norm_squared();
                count += 1;
            }
        }
        (sum / count.max(1) as f64).sqrt()
    });

    let (roc, auc) = roc_sweep(&scored);
    let positives = scored.iter().filter(|(_, l)| *l).count();
    let negatives = scored.len() - positives;

    std::fs::create_dir_all(out).map_err(|e| format!("creating {}: {e}", out.display()))?;
    let mut roc_csv = String::from("threshold,tpr,fpr\n");
    for (threshold, tpr, fpr) in &roc {
        roc_csv.push_str(&format!("{threshold:.6},{tpr:.6},{fpr:.6}\n"));
    }
    std::fs::write(out.join("roc.csv"), roc_csv).map_err(|e| format!("writing roc.csv: {e}"))?;

    let metrics = Metrics {
        frames_processed: results.len(),
        mean_scene_depth: mean_depth,
        mean_surfel_rmse,
        per_surfel_rmse,
        inlier_ratio: inliers as f64 / observations.max(1) as f64,
        ate,
        rmse_threshold: threshold,
        roc_auc: auc,
        positives,
        negatives,
    };
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| e.to_string())?;
    std::fs::write(out.join("metrics.json"), &text)
        .map_err(|e| format!("writing metrics.json: {e}"))?;
    manifest.write(out)?;

    println!("frames processed: {}", metrics.frames_processed);
    println!("mean surfel RMSE: {:.4} ({:.2}% of mean depth)",
        metrics.mean_surfel_rmse,
        100.0 * metrics.mean_surfel_rmse / mean_depth
    );
    println!("inlier ratio: {:.3}", metrics.inlier_ratio);
    if let Some(ate) = metrics.ate {
        println!("trajectory ATE: {ate:.4}");
    }
    if let Some(auc) = metrics.roc_auc {
        println!("ZNCC ROC AUC: {auc:.4}");
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use surfel_track_core::tracker::roc_sweep;

    #[test]
    fn perfect_separation_gives_unit_auc() {
        let scored: Vec<(f64, bool)> = (0..10)
            .map(|i| (i as f64 / 10.0, i >= 5))
            .collect();
        let (curve, auc) = roc_sweep(&scored);
        assert_eq!(auc, Some(1.0));
        assert!(!curve.is_empty());
        // Threshold below everything: all positives and negatives accepted.
        assert_eq!(curve[0].1, 1.0);
        assert_eq!(curve[0].2, 1.0);
    }

    #[test]
    fn random_scores_give_half_auc() {
        // Interleaved labels with identical score distribution.
        let scored: Vec<(f64, bool)> = (0..100)
            .map(|i| ((i / 2) as f64, i % 2 == 0))
            .collect();
        let (_, auc) = roc_sweep(&scored);
        assert!((auc.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_labels_yield_no_auc() {
        let scored = vec![(0.5, true), (0.7, true)];
        assert_eq!(roc_sweep(&scored).1, None);
    }
}
