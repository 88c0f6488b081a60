//! Point-cloud reconstruction metrics: accuracy, completeness, overall, and
//! precision/recall/F-score at distance thresholds, with exact
//! nearest-neighbour queries over a uniform grid.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MvsError, Result};
use crate::fusion::{read_ply, PointCloud};
use crate::scene::{ring_cameras, render_view, DomainSpec, SceneSpec, DEPTH_SCALE};

/// Uniform-grid spatial hash over 3D points. Nearest-neighbour queries are
/// exact: cells are visited in growing Chebyshev rings and the search stops
/// only once the ring's distance lower bound exceeds the best match.
pub struct GridIndex {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    points: Vec<[f64; 3]>,
    key_min: [i64; 3],
    key_max: [i64; 3],
}

impl GridIndex {
    pub fn new(points: &[[f64; 3]], cell: f64) -> Result<GridIndex> {
        if points.is_empty() {
            return Err(MvsError::Config("spatial index over empty cloud".into()));
        }
        if !(cell > 0.0) {
            return Err(MvsError::Config(format!("cell size must be > 0, got {cell}")));
        }
        let key = |p: &[f64; 3]| [0, 1, 2].map(|k| (p[k] / cell).floor() as i64);
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut key_min = [i64::MAX; 3];
        let mut key_max = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let k = key(p);
            for a in 0..3 {
                key_min[a] = key_min[a].min(k[a]);
                key_max[a] = key_max[a].max(k[a]);
            }
            cells.entry(k).or_default().push(i);
        }
        Ok(GridIndex {
            cell,
            cells,
            points: points.to_vec(),
            key_min,
            key_max,
        })
    }

    /// Distance from `q` to its nearest indexed point.
    pub fn nearest(&self, q: [f64; 3]) -> f64 {
        let base = [0, 1, 2].map(|k| (q[k] / self.cell).floor() as i64);
        // Beyond this ring every cell is outside the bounding box.
        let r_max = (0..3)
            .map(|a| (base[a] - self.key_min[a]).abs().max((base[a] - self.key_max[a]).abs()))
            .max()
            .unwrap();
        let mut best = f64::INFINITY;
        for r in 0..=r_max {
            if (r - 1).max(0) as f64 * self.cell > best.sqrt() {
                break;
            }
            self.scan_ring(base, r, q, &mut best);
        }
        best.sqrt()
    }

    fn scan_ring(&self, base: [i64; 3], r: i64, q: [f64; 3], best: &mut f64) {
        let mut visit = |k: [i64; 3]| {
            if let Some(ids) = self.cells.get(&k) {
                for &i in ids {
                    let p = self.points[i];
                    let d2 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
                    if d2 < *best {
                        *best = d2;
                    }
                }
            }
        };
        if r == 0 {
            visit(base);
            return;
        }
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) == r {
                        visit([base[0] + dx, base[1] + dy, base[2] + dz]);
                    }
                }
            }
        }
    }
}

fn positions(cloud: &PointCloud) -> Vec<[f64; 3]> {
    cloud.points.iter().map(|p| p.position).collect()
}

fn require_non_empty(cloud: &PointCloud, name: &str) -> Result<()> {
    if cloud.points.is_empty() {
        Err(MvsError::Config(format!("{name} cloud is empty")))
    } else {
        Ok(())
    }
}

/// Mean nearest-neighbour distance from `est` to `gt`, excluding distances
/// above `max_dist` as outliers. Returns the mean and the outlier count.
pub fn accuracy_counted(
    est: &PointCloud,
    gt: &PointCloud,
    max_dist: f64,
) -> Result<(f64, usize)> {
    require_non_empty(est, "estimated")?;
    require_non_empty(gt, "ground-truth")?;
    let index = GridIndex::new(&positions(gt), max_dist.max(1e-12))?;
    let mut sum = 0.0;
    let mut kept = 0usize;
    let mut outliers = 0usize;
    for p in &est.points {
        let d = index.nearest(p.position);
        if d > max_dist {
            outliers += 1;
        } else {
            sum += d;
            kept += 1;
        }
    }
    let mean = if kept == 0 { max_dist } else { sum / kept as f64 };
    Ok((mean, outliers))
}

pub fn accuracy(est: &PointCloud, gt: &PointCloud, max_dist: f64) -> Result<f64> {
    accuracy_counted(est, gt, max_dist).map(|(m, _)| m)
}

/// Mean nearest-neighbour distance from `gt` to `est`: exactly
/// `accuracy(gt, est, max_dist)`.
pub fn completeness(est: &PointCloud, gt: &PointCloud, max_dist: f64) -> Result<f64> {
    accuracy(gt, est, max_dist)
}

/// Percent of est points within `tau` of gt (precision), percent of gt
/// points within `tau` of est (recall), and their harmonic mean.
pub fn precision_recall_f(
    est: &PointCloud,
    gt: &PointCloud,
    tau: f64,
) -> Result<(f64, f64, f64)> {
    if !(tau > 0.0) {
        return Err(MvsError::Config(format!("tau must be > 0, got {tau}")));
    }
    require_non_empty(est, "estimated")?;
    require_non_empty(gt, "ground-truth")?;
    let inlier_pct = |from: &PointCloud, to: &PointCloud| -> Result<f64> {
        let index = GridIndex::new(&positions(to), tau)?;
        let n = from
            .points
            .iter()
            .filter(|p| index.nearest(p.position) < tau)
            .count();
        Ok(100.0 * n as f64 / from.points.len() as f64)
    };
    let p = inlier_pct(est, gt)?;
    let r = inlier_pct(gt, est)?;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdScores {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub completeness: f64,
    /// Mean of accuracy and completeness.
    pub overall: f64,
    pub max_dist: f64,
    pub thresholds: Vec<ThresholdScores>,
    pub est_points: usize,
    pub gt_points: usize,
    pub est_outliers: usize,
    pub gt_outliers: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| MvsError::Format(e.to_string()))
    }

    /// Fixed-column table: acc., comp., overall, then prec./rec./F per
    /// threshold.
    pub fn to_table(&self) -> String {
        let mut head = format!("{:>10} {:>10} {:>10}", "acc.", "comp.", "overall");
        let mut row = format!(
            "{:>10.4} {:>10.4} {:>10.4}",
            self.accuracy, self.completeness, self.overall
        );
        for t in &self.thresholds {
            let _ = write!(
                head,
                " {:>10} {:>10} {:>10}",
                format!("prec@{}", t.tau),
                format!("rec@{}", t.tau),
                format!("F@{}", t.tau)
            );
            let _ = write!(row, " {:>10.2} {:>10.2} {:>10.2}", t.precision, t.recall, t.f_score);
        }
        format!("{head}\n{row}\n")
    }
}

pub fn evaluate_clouds(
    est: &PointCloud,
    gt: &PointCloud,
    max_dist: f64,
    taus: &[f64],
) -> Result<EvalReport> {
    let (acc, est_outliers) = accuracy_counted(est, gt, max_dist)?;
    let (comp, gt_outliers) = accuracy_counted(gt, est, max_dist)?;
    let mut thresholds = Vec::with_capacity(taus.len());
    for &tau in taus {
        let (p, r, f) = precision_recall_f(est, gt, tau)?;
        thresholds.push(ThresholdScores {
            tau,
            precision: p,
            recall: r,
            f_score: f,
        });
    }
    Ok(EvalReport {
        accuracy: acc,
        completeness: comp,
        overall: 0.5 * (acc + comp),
        max_dist,
        thresholds,
        est_points: est.points.len(),
        gt_points: gt.points.len(),
        est_outliers,
        gt_outliers,
    })
}

/// Ground truth for a scene: either a stored cloud or surfaces sampled
/// analytically from the scene description.
pub enum GtSource<'a> {
    Ply(&'a Path),
    Cloud(PointCloud),
    Synthetic {
        scene: &'a SceneSpec,
        domain: &'a DomainSpec,
        views: usize,
    },
}

/// Analytic surface samples: ray-cast depth at double the fused depth-map
/// resolution (4x the point density) from a camera ring, backprojected to 3D.
pub fn sample_scene_points(
    scene: &SceneSpec,
    domain: &DomainSpec,
    views: usize,
    focal: f64,
    width: usize,
    height: usize,
) -> Result<PointCloud> {
    let mut points = Vec::new();
    for cam in ring_cameras(domain, views, 2.0 * focal, 2 * width, 2 * height) {
        let (_, depth) = render_view(scene, &cam, domain)?;
        let small = cam.scaled(DEPTH_SCALE);
        let (h, w) = (depth.shape()[0], depth.shape()[1]);
        let dv = depth.values();
        for y in 0..h {
            for x in 0..w {
                let d = dv[y * w + x];
                if d > 0.0 {
                    let p = small.backproject([x as f64, y as f64], d)?;
                    points.push(crate::fusion::FusedPoint {
                        position: [p[0], p[1], p[2]],
                        color: [0.5; 3],
                        support: 1,
                    });
                }
            }
        }
    }
    Ok(PointCloud { points })
}

pub fn evaluate_scene(
    est_ply: &Path,
    gt: GtSource,
    max_dist: f64,
    taus: &[f64],
    focal: f64,
    width: usize,
    height: usize,
) -> Result<EvalReport> {
    let est = read_ply(est_ply)?;
    let gt_cloud = match gt {
        GtSource::Ply(p) => read_ply(p)?,
        GtSource::Cloud(c) => c,
        GtSource::Synthetic { scene, domain, views } => {
            sample_scene_points(scene, domain, views, focal, width, height)?
        }
    };
    evaluate_clouds(&est, &gt_cloud, max_dist, taus)
}
