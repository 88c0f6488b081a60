//! Depth-map filtering and multi-view consistency fusion into point clouds,
//! plus binary PLY input/output.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::camera::Camera;
use crate::error::{MvsError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPoint {
    pub position: [f64; 3],
    /// RGB in [0,1].
    pub color: [f64; 3],
    /// Number of views that agreed on this point.
    pub support: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<FusedPoint>,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionConfig {
    /// Maximum round-trip reprojection error in depth-map pixels.
    pub pixel_thresh: f64,
    /// Maximum relative depth difference after the round trip.
    pub depth_thresh: f64,
    /// Pixels with probability strictly above this survive filtering.
    pub conf_thresh: f64,
    /// Minimum number of consistent neighbour views to retain a pixel.
    pub min_views: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            pixel_thresh: 1.0,
            depth_thresh: 0.01,
            conf_thresh: 0.8,
            min_views: 2,
        }
    }
}

/// One view entering fusion: depth and probability maps at depth resolution,
/// the color image at the same resolution, and the matching camera.
pub struct FusionView {
    pub depth: Tensor,
    pub prob: Tensor,
    pub image: Tensor,
    pub camera: Camera,
}

/// Zeroes out depth pixels whose probability is not strictly above the
/// threshold.
pub fn confidence_filter(depth: &Tensor, prob: &Tensor, threshold: f64) -> Result<Tensor> {
    if depth.shape() != prob.shape() {
        return Err(MvsError::shape(format!(
            "confidence_filter: depth {:?} vs prob {:?}",
            depth.shape(),
            prob.shape()
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MvsError::Config(format!(
            "confidence threshold must be in [0,1], got {threshold}"
        )));
    }
    let vals: Vec<f64> = depth
        .values()
        .iter()
        .zip(prob.values())
        .map(|(&d, &p)| if p > threshold { d } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(depth.shape(), vals))
}

/// Per-pixel outcome of the two-view consistency round trip.
pub struct ConsistencyResult {
    pub consistent: Vec<bool>,
    /// Depth observed after the round trip (0 where inconsistent).
    pub reproj_depth: Vec<f64>,
    /// Matched source pixel (x, y) where consistent.
    pub src_pixel: Vec<Option<(usize, usize)>>,
}

/// Round-trip consistency: backproject each reference pixel, look up the
/// source depth at the landing pixel, backproject that and reproject into
/// the reference. Consistent when the round trip lands within
/// `pixel_thresh` pixels and `depth_thresh` relative depth difference.
pub fn consistency_check(
    depth_ref: &Tensor,
    cam_ref: &Camera,
    depth_src: &Tensor,
    cam_src: &Camera,
    cfg: &FusionConfig,
) -> Result<ConsistencyResult> {
    let [h, w] = [depth_ref.shape()[0], depth_ref.shape()[1]];
    let [sh, sw] = [depth_src.shape()[0], depth_src.shape()[1]];
    let dr = depth_ref.values();
    let ds = depth_src.values();
    let mut consistent = vec![false; h * w];
    let mut reproj_depth = vec![0.0; h * w];
    let mut src_pixel = vec![None; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = dr[i];
            if d <= 0.0 {
                continue;
            }
            let world = cam_ref.backproject([x as f64, y as f64], d)?;
            let ([qx, qy], dq) = cam_src.project(world);
            if dq <= 0.0 {
                continue;
            }
            let (sx, sy) = (qx.round(), qy.round());
            if sx < 0.0 || sy < 0.0 || sx >= sw as f64 || sy >= sh as f64 {
                continue;
            }
            let (sxi, syi) = (sx as usize, sy as usize);
            let d_src = ds[syi * sw + sxi];
            if d_src <= 0.0 {
                continue;
            }
            let world_back = cam_src.backproject([sx, sy], d_src)?;
            let ([px, py], d_back) = cam_ref.project(world_back);
            if d_back <= 0.0 {
                continue;
            }
            let pix_err = ((px - x as f64).powi(2) + (py - y as f64).powi(2)).sqrt();
            let rel = (d_back - d).abs() / d;
            if pix_err < cfg.pixel_thresh && rel < cfg.depth_thresh {
                consistent[i] = true;
                reproj_depth[i] = d_back;
                src_pixel[i] = Some((sxi, syi));
            }
        }
    }
    Ok(ConsistencyResult {
        consistent,
        reproj_depth,
        src_pixel,
    })
}

/// Fuses confidence-filtered depth maps: each surviving reference pixel
/// collects consistent neighbour views, keeps pixels with at least
/// `min_views` of them, averages the 3D positions over the consistent set,
/// and marks matched source pixels as consumed so each surface point is
/// emitted once. Colors come from the reference image.
pub fn fuse(views: &[FusionView], cfg: &FusionConfig) -> Result<PointCloud> {
    if views.len() < 2 {
        return Err(MvsError::Config("fuse: need at least 2 views".into()));
    }
    let filtered: Vec<Tensor> = views
        .iter()
        .map(|v| confidence_filter(&v.depth, &v.prob, cfg.conf_thresh))
        .collect::<Result<_>>()?;
    let dims: Vec<(usize, usize)> = filtered
        .iter()
        .map(|f| (f.shape()[0], f.shape()[1]))
        .collect();
    let mut consumed: Vec<Vec<bool>> = dims.iter().map(|(h, w)| vec![false; h * w]).collect();

    // Pairwise round trips computed once per ordered pair.
    let mut checks: Vec<Vec<Option<ConsistencyResult>>> = Vec::with_capacity(views.len());
    for i in 0..views.len() {
        let mut row = Vec::with_capacity(views.len());
        for j in 0..views.len() {
            row.push(if i == j {
                None
            } else {
                Some(consistency_check(
                    &filtered[i],
                    &views[i].camera,
                    &filtered[j],
                    &views[j].camera,
                    cfg,
                )?)
            });
        }
        checks.push(row);
    }

    let mut points = Vec::new();
    for i in 0..views.len() {
        let (h, w) = dims[i];
        let dv = filtered[i].values();
        let img = views[i].image.values();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if dv[p] <= 0.0 || consumed[i][p] {
                    continue;
                }
                let mut matches: Vec<(usize, usize, usize)> = Vec::new(); // view, sx, sy
                for (j, check) in checks[i].iter().enumerate() {
                    let Some(c) = check else { continue };
                    if c.consistent[p] {
                        let (sx, sy) = c.src_pixel[p].unwrap();
                        matches.push((j, sx, sy));
                    }
                }
                if matches.len() < cfg.min_views {
                    continue;
                }
                let mut pos = views[i].camera.backproject([x as f64, y as f64], dv[p])?;
                for &(j, sx, sy) in &matches {
                    let (jh, jw) = dims[j];
                    let _ = jh;
                    let dj = filtered[j].values()[sy * jw + sx];
                    pos += views[j].camera.backproject([sx as f64, sy as f64], dj)?;
                    consumed[j][sy * jw + sx] = true;
                }
                pos /= (matches.len() + 1) as f64;
                let hw = h * w;
                points.push(FusedPoint {
                    position: [pos[0], pos[1], pos[2]],
                    color: [img[p], img[hw + p], img[2 * hw + p]],
                    support: matches.len(),
                });
                consumed[i][p] = true;
            }
        }
    }
    Ok(PointCloud { points })
}

/// Binary little-endian PLY: float32 x y z, uint8 red green blue.
pub fn write_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.points.len()
    );
    f.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(cloud.points.len() * 15);
    for pt in &cloud.points {
        for c in pt.position {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
        for c in pt.color {
            buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| MvsError::Format("ply: missing end_header".into()))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| MvsError::Format("ply: non-UTF8 header".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(MvsError::Format("ply: bad magic".into()));
    }
    if lines.next() != Some("format binary_little_endian 1.0") {
        return Err(MvsError::Format("ply: unsupported format".into()));
    }
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .ok_or_else(|| MvsError::Format("ply: missing vertex element".into()))?
        .trim()
        .parse()
        .map_err(|_| MvsError::Format("ply: bad vertex count".into()))?;
    let payload = &bytes[header_end..];
    if payload.len() < count * 15 {
        return Err(MvsError::Format(format!(
            "ply: payload truncated, expected {} bytes, got {}",
            count * 15,
            payload.len()
        )));
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let b = &payload[i * 15..(i + 1) * 15];
        let mut position = [0.0f64; 3];
        for (k, pos) in position.iter_mut().enumerate() {
            *pos = f32::from_le_bytes(b[k * 4..k * 4 + 4].try_into().unwrap()) as f64;
        }
        let color = [
            b[12] as f64 / 255.0,
            b[13] as f64 / 255.0,
            b[14] as f64 / 255.0,
        ];
        points.push(FusedPoint {
            position,
            color,
            support: 1,
        });
    }
    Ok(PointCloud { points })
}
