//! Synthetic multi-domain scene generator: analytic primitives, Lambertian
//! shading, exact z-depth ground truth, and ring-of-cameras datasets.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::Camera;
use crate::error::{MvsError, Result};
use crate::imgio;
use crate::tensor::Tensor;

/// Albedo texture family for a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TextureFamily {
    /// Two-tone squares with the given side length in scene units.
    Checker { size: f64 },
    /// Smooth value noise with the given lattice cell size.
    ValueNoise { cell: f64 },
    /// Sinusoidal stripes with the given period.
    Stripes { period: f64 },
}

/// Rendering conditions shared by every scene of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: String,
    pub texture: TextureFamily,
    /// Direction from surfaces toward the light, normalized at use.
    pub light_dir: [f64; 3],
    pub intensity: f64,
    pub ambient: f64,
    pub noise_sigma: f64,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth_min <= 0.0 || self.depth_max <= self.depth_min {
            return Err(MvsError::Config(format!(
                "domain {}: need 0 < depth_min < depth_max, got [{}, {}]",
                self.id, self.depth_min, self.depth_max
            )));
        }
        if self.intensity <= 0.0 {
            return Err(MvsError::Config(format!(
                "domain {}: light intensity must be positive",
                self.id
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(MvsError::Config(format!(
                "domain {}: noise sigma must be non-negative",
                self.id
            )));
        }
        Ok(())
    }
}

/// Analytic scene primitive. Texture coordinates are surface-local so a
/// moving camera sees a fixed pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        color: [f64; 3],
    },
    /// Finite textured rectangle: `axis_u`/`axis_v` are orthonormal in-plane
    /// axes, the normal is their cross product.
    Rect {
        center: [f64; 3],
        axis_u: [f64; 3],
        axis_v: [f64; 3],
        half_u: f64,
        half_v: f64,
        color: [f64; 3],
    },
    /// Infinite backdrop plane `z = z_plane` with normal facing -z.
    Backdrop { z_plane: f64, color: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

struct Hit {
    depth: f64,
    normal: Vector3<f64>,
    tex_uv: [f64; 2],
    color: [f64; 3],
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Integer lattice hash to [0,1), stable across platforms.
fn lattice_hash(x: i64, y: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x as u64, y as u64] {
        h ^= v.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = h.rotate_left(31).wrapping_mul(0x94d0_49bb_1331_11eb);
    }
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(u: f64, v: f64, seed: u64) -> f64 {
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (smoothstep(u - x0), smoothstep(v - y0));
    let (xi, yi) = (x0 as i64, y0 as i64);
    let n00 = lattice_hash(xi, yi, seed);
    let n10 = lattice_hash(xi + 1, yi, seed);
    let n01 = lattice_hash(xi, yi + 1, seed);
    let n11 = lattice_hash(xi + 1, yi + 1, seed);
    let top = n00 + (n10 - n00) * fx;
    let bot = n01 + (n11 - n01) * fx;
    top + (bot - top) * fy
}

/// Albedo at surface coordinates `(u, v)`: the base color modulated by the
/// domain's texture family.
fn albedo(texture: &TextureFamily, uv: [f64; 2], color: [f64; 3], seed: u64) -> [f64; 3] {
    let m = match texture {
        TextureFamily::Checker { size } => {
            let p = ((uv[0] / size).floor() + (uv[1] / size).floor()) as i64;
            if p.rem_euclid(2) == 0 {
                1.0
            } else {
                0.25
            }
        }
        TextureFamily::ValueNoise { cell } => 0.2 + 0.8 * value_noise(uv[0] / cell, uv[1] / cell, seed),
        TextureFamily::Stripes { period } => 0.3 + 0.7 * (0.5 + 0.5 * (2.0 * PI * uv[0] / period).sin()),
    };
    [color[0] * m, color[1] * m, color[2] * m]
}

fn intersect(prim: &Primitive, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    const EPS: f64 = 1e-9;
    match prim {
        Primitive::Sphere { center, radius, color } => {
            let c = v3(center);
            let oc = origin - c;
            let a = dir.dot(dir);
            let b = 2.0 * dir.dot(&oc);
            let cq = oc.dot(&oc) - radius * radius;
            let disc = b * b - 4.0 * a * cq;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let s = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
                .into_iter()
                .find(|s| *s > EPS)?;
            let point = origin + dir * s;
            let normal = (point - c).normalize();
            // Spherical coordinates scaled by radius so the texture has a
            // metric scale comparable to the planes.
            let tex_uv = [
                normal[1].atan2(normal[0]) * radius,
                normal[2].clamp(-1.0, 1.0).acos() * radius,
            ];
            Some(Hit { depth: s, normal, tex_uv, color: *color })
        }
        Primitive::Rect { center, axis_u, axis_v, half_u, half_v, color } => {
            let (c, au, av) = (v3(center), v3(axis_u), v3(axis_v));
            let normal = au.cross(&av);
            let denom = dir.dot(&normal);
            if denom.abs() < EPS {
                return None;
            }
            let s = (c - origin).dot(&normal) / denom;
            if s <= EPS {
                return None;
            }
            let point = origin + dir * s;
            let local = point - c;
            let (u, v) = (local.dot(&au), local.dot(&av));
            if u.abs() > *half_u || v.abs() > *half_v {
                return None;
            }
            Some(Hit { depth: s, normal, tex_uv: [u, v], color: *color })
        }
        Primitive::Backdrop { z_plane, color } => {
            if dir[2].abs() < EPS {
                return None;
            }
            let s = (z_plane - origin[2]) / dir[2];
            if s <= EPS {
                return None;
            }
            let point = origin + dir * s;
            Some(Hit {
                depth: s,
                normal: Vector3::new(0.0, 0.0, -1.0),
                tex_uv: [point[0], point[1]],
                color: *color,
            })
        }
    }
}

fn nearest_hit(scene: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    scene
        .primitives
        .iter()
        .filter_map(|p| intersect(p, origin, dir))
        .min_by(|a, b| a.depth.total_cmp(&b.depth))
}

/// Distance from the scene origin to the camera ring, and the largest offset
/// foreground content may have from the origin. Both are derived from the
/// domain depth range so every visible depth stays inside it.
fn ring_layout(domain: &DomainSpec) -> (f64, f64) {
    let mid = 0.5 * (domain.depth_min + domain.depth_max);
    let half = 0.5 * (domain.depth_max - domain.depth_min);
    (mid, 0.35 * half)
}

/// Deterministic scene content for `(seed, domain)`: a backdrop plane plus a
/// sphere and a tilted rectangle floating in front of it, placed so the
/// sphere occludes part of the rectangle or backdrop from most views.
pub fn generate_scene(seed: u64, domain: &DomainSpec) -> Result<SceneSpec> {
    domain.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_str(&domain.id));
    let (ring, spread) = ring_layout(domain);
    let half = 0.5 * (domain.depth_max - domain.depth_min);

    // Cameras sit near z = -ring looking at the origin; the backdrop sits a
    // little past the origin so off-axis rays still land inside depth_max.
    let z_plane = 0.15 * half;
    let mut primitives = vec![Primitive::Backdrop {
        z_plane,
        color: rand_color(&mut rng),
    }];

    let sphere_r = spread * rng.gen_range(0.5..0.8);
    let sphere_center = [
        rng.gen_range(-0.5..0.5) * spread,
        rng.gen_range(-0.5..0.5) * spread,
        -rng.gen_range(0.3..0.9) * spread,
    ];
    primitives.push(Primitive::Sphere {
        center: sphere_center,
        radius: sphere_r,
        color: rand_color(&mut rng),
    });

    // Tilted rectangle behind the sphere, partially occluded by it.
    let tilt = rng.gen_range(-0.4..0.4);
    let (cu, su) = (f64::cos(tilt), f64::sin(tilt));
    primitives.push(Primitive::Rect {
        center: [
            sphere_center[0] + rng.gen_range(0.2..0.6) * spread,
            rng.gen_range(-0.3..0.3) * spread,
            0.3 * spread,
        ],
        axis_u: [cu, 0.0, su],
        axis_v: [0.0, 1.0, 0.0],
        half_u: spread * 1.2,
        half_v: spread * 1.2,
        color: rand_color(&mut rng),
    });

    let _ = ring; // layout constant shared with ring_cameras
    Ok(SceneSpec { seed, primitives })
}

fn rand_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.4..1.0),
        rng.gen_range(0.4..1.0),
        rng.gen_range(0.4..1.0),
    ]
}

fn hash_str(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn hash_camera(cam: &Camera) -> u64 {
    hash_str(&cam.to_text(0.0, 0.0))
}

/// Factor between input image resolution and output depth resolution.
pub const DEPTH_SCALE: usize = 4;

/// Renders one view: an RGB image at the camera resolution plus exact
/// z-depth ground truth at 1/4 resolution. Pixels whose ray misses every
/// primitive get depth 0 (invalid) and the ambient level as color. Image
/// noise is an independent per-view stream derived from the scene seed and
/// the camera pose.
pub fn render_view(
    scene: &SceneSpec,
    camera: &Camera,
    domain: &DomainSpec,
) -> Result<(Tensor, Tensor)> {
    camera.validate()?;
    let (h, w) = (camera.height, camera.width);
    let origin = camera.center();
    let k_inv = camera
        .intrinsics
        .try_inverse()
        .ok_or_else(|| MvsError::Numerical("singular intrinsics".into()))?;
    let rt = camera.rotation.transpose();
    let light = v3(&domain.light_dir).normalize();

    let mut img = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            // Direction scaled so the ray parameter equals camera-frame z.
            let dir = rt * (k_inv * Vector3::new(x as f64, y as f64, 1.0));
            let px = match nearest_hit(scene, &origin, &dir) {
                Some(hit) => {
                    let mut n = hit.normal;
                    if n.dot(&dir) > 0.0 {
                        n = -n;
                    }
                    let shade = n.dot(&light).max(0.0) * domain.intensity + domain.ambient;
                    let a = albedo(&domain.texture, hit.tex_uv, hit.color, scene.seed);
                    [a[0] * shade, a[1] * shade, a[2] * shade]
                }
                None => [domain.ambient; 3],
            };
            for c in 0..3 {
                img[c * h * w + y * w + x] = px[c].clamp(0.0, 1.0);
            }
        }
    }

    if domain.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ hash_camera(camera));
        let normal = Normal::new(0.0, domain.noise_sigma)
            .map_err(|e| MvsError::Numerical(e.to_string()))?;
        for v in img.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    let small = camera.scaled(DEPTH_SCALE);
    let (sh, sw) = (small.height, small.width);
    let sk_inv = small
        .intrinsics
        .try_inverse()
        .ok_or_else(|| MvsError::Numerical("singular intrinsics".into()))?;
    let mut depth = vec![0.0f64; sh * sw];
    for y in 0..sh {
        for x in 0..sw {
            let dir = rt * (sk_inv * Vector3::new(x as f64, y as f64, 1.0));
            if let Some(hit) = nearest_hit(scene, &origin, &dir) {
                depth[y * sw + x] = hit.depth;
            }
        }
    }

    Ok((
        Tensor::from_vec(&[3, h, w], img),
        Tensor::from_vec(&[sh, sw], depth),
    ))
}

/// One rendered view with its camera.
#[derive(Clone)]
pub struct View {
    pub image: Tensor,
    pub camera: Camera,
}

/// Reference view, its N neighbours, and optional ground-truth depth at the
/// output resolution (0 marks invalid pixels).
#[derive(Clone)]
pub struct MultiViewSample {
    pub reference: View,
    pub neighbors: Vec<View>,
    pub gt_depth: Option<Tensor>,
    pub domain_id: String,
    pub scene_id: String,
    /// Held-out target domain: usable for fine-tuning and evaluation only.
    pub held_out: bool,
    pub depth_min: f64,
    pub depth_max: f64,
}

#[derive(Default, Clone)]
pub struct DomainIndex {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Train/validation splits plus held-out target-domain samples. Splits are
/// disjoint by scene id.
pub struct SceneDataset {
    pub train: Vec<MultiViewSample>,
    pub val: Vec<MultiViewSample>,
    pub held_out: Vec<MultiViewSample>,
    pub domain_index: BTreeMap<String, DomainIndex>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_domains: Vec<DomainSpec>,
    pub target_domain: DomainSpec,
    pub scenes_per_domain: usize,
    /// How many of `scenes_per_domain` go to the validation split.
    pub val_scenes_per_domain: usize,
    pub views_per_scene: usize,
    pub num_neighbors: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_domains.len() < 2 {
            return Err(MvsError::Config(
                "need at least 2 training domains".into(),
            ));
        }
        for d in self.train_domains.iter().chain([&self.target_domain]) {
            d.validate()?;
        }
        if self.num_neighbors + 1 > self.views_per_scene {
            return Err(MvsError::Config(format!(
                "{} neighbours requested but only {} views per scene",
                self.num_neighbors, self.views_per_scene
            )));
        }
        if self.val_scenes_per_domain >= self.scenes_per_domain {
            return Err(MvsError::Config(
                "validation split must leave at least one training scene".into(),
            ));
        }
        if self.width % DEPTH_SCALE != 0 || self.height % DEPTH_SCALE != 0 {
            return Err(MvsError::Config(format!(
                "image size must be divisible by {DEPTH_SCALE}"
            )));
        }
        Ok(())
    }
}

/// Ring of cameras on a shallow cone around the -z axis, all looking at the
/// scene origin. The cone keeps every view near-frontal so the backdrop
/// stays inside the domain depth range.
pub fn ring_cameras(domain: &DomainSpec, count: usize, focal: f64, width: usize, height: usize) -> Vec<Camera> {
    let (ring, _) = ring_layout(domain);
    let cone = 0.20f64; // radians off the -z axis
    (0..count)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / count as f64;
            let eye = Vector3::new(
                ring * cone.sin() * phi.cos(),
                ring * cone.sin() * phi.sin(),
                -ring * cone.cos(),
            );
            Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), focal, width, height)
        })
        .collect()
}

/// Indices of the `n` cameras whose viewing directions are angularly closest
/// to camera `i`.
pub fn nearest_neighbors(cameras: &[Camera], i: usize, n: usize) -> Vec<usize> {
    let ci = cameras[i].center().normalize();
    let mut others: Vec<(f64, usize)> = cameras
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, c)| (ci.dot(&c.center().normalize()).clamp(-1.0, 1.0).acos(), j))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(n).map(|(_, j)| j).collect()
}

fn scene_samples(
    scene_id: &str,
    seed: u64,
    domain: &DomainSpec,
    cfg: &DatasetConfig,
    held_out: bool,
) -> Result<Vec<MultiViewSample>> {
    let scene = generate_scene(seed, domain)?;
    let cameras = ring_cameras(domain, cfg.views_per_scene, cfg.focal, cfg.width, cfg.height);
    let rendered: Vec<(Tensor, Tensor)> = cameras
        .iter()
        .map(|c| render_view(&scene, c, domain))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(cameras.len());
    for i in 0..cameras.len() {
        let neighbors = nearest_neighbors(&cameras, i, cfg.num_neighbors)
            .into_iter()
            .map(|j| View {
                image: rendered[j].0.clone(),
                camera: cameras[j].clone(),
            })
            .collect();
        out.push(MultiViewSample {
            reference: View {
                image: rendered[i].0.clone(),
                camera: cameras[i].clone(),
            },
            neighbors,
            gt_depth: Some(rendered[i].1.clone()),
            domain_id: domain.id.clone(),
            scene_id: scene_id.to_string(),
            held_out,
            depth_min: domain.depth_min,
            depth_max: domain.depth_max,
        });
    }
    Ok(out)
}

/// Renders every configured scene and splits samples into train/val by scene
/// id, with the target domain kept fully held out. Pure function of the
/// config (including its seed).
pub fn make_dataset(cfg: &DatasetConfig) -> Result<SceneDataset> {
    cfg.validate()?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut held_out = Vec::new();
    let mut domain_index: BTreeMap<String, DomainIndex> = BTreeMap::new();

    for (di, domain) in cfg.train_domains.iter().enumerate() {
        for si in 0..cfg.scenes_per_domain {
            let scene_seed = cfg
                .seed
                .wrapping_add(1_000_003 * di as u64)
                .wrapping_add(si as u64);
            let scene_id = format!("{}_{:03}", domain.id, si);
            let samples = scene_samples(&scene_id, scene_seed, domain, cfg, false)?;
            let is_val = si >= cfg.scenes_per_domain - cfg.val_scenes_per_domain;
            let idx = domain_index.entry(domain.id.clone()).or_default();
            for s in samples {
                if is_val {
                    idx.val.push(val.len());
                    val.push(s);
                } else {
                    idx.train.push(train.len());
                    train.push(s);
                }
            }
        }
    }

    for si in 0..cfg.scenes_per_domain {
        let scene_seed = cfg.seed.wrapping_add(7_000_009).wrapping_add(si as u64);
        let scene_id = format!("{}_{:03}", cfg.target_domain.id, si);
        let samples = scene_samples(&scene_id, scene_seed, &cfg.target_domain, cfg, true)?;
        let idx = domain_index.entry(cfg.target_domain.id.clone()).or_default();
        for s in samples {
            idx.held_out.push(held_out.len());
            held_out.push(s);
        }
    }

    // Deterministic shuffle of the training list only; val and held-out
    // orders stay tied to scene/view order for reproducible reporting.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5ce0_5ce0);
    let mut perm: Vec<usize> = (0..train.len()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let mut inverse = vec![0usize; perm.len()];
    for (new_pos, &old_pos) in perm.iter().enumerate() {
        inverse[old_pos] = new_pos;
    }
    let mut shuffled: Vec<Option<MultiViewSample>> = train.into_iter().map(Some).collect();
    let mut train: Vec<MultiViewSample> = perm
        .iter()
        .map(|&old| shuffled[old].take().unwrap())
        .collect();
    let _ = &mut train;
    for idx in domain_index.values_mut() {
        for t in idx.train.iter_mut() {
            *t = inverse[*t];
        }
    }

    Ok(SceneDataset {
        train,
        val,
        held_out,
        domain_index,
    })
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    scene_id: String,
    domain_id: String,
    split: String,
    reference: usize,
    neighbors: Vec<usize>,
    depth_min: f64,
    depth_max: f64,
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    samples: Vec<SampleMeta>,
    image_format: String,
}

/// Writes the dataset as one directory per scene: `view_XXX.{pfm,ppm}`,
/// `depth_XXX.pfm`, `cam_XXX.txt`, and a `meta.json` listing samples.
pub fn save_dataset(dataset: &SceneDataset, dir: impl AsRef<Path>, use_ppm: bool) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut scenes: BTreeMap<String, Vec<(&MultiViewSample, &str)>> = BTreeMap::new();
    for (list, split) in [
        (&dataset.train, "train"),
        (&dataset.val, "val"),
        (&dataset.held_out, "held_out"),
    ] {
        for s in list {
            scenes.entry(s.scene_id.clone()).or_default().push((s, split));
        }
    }

    for (scene_id, samples) in &scenes {
        let sdir = dir.join(scene_id);
        fs::create_dir_all(&sdir)?;
        // Deduplicate views by camera text; a view can be a reference in one
        // sample and a neighbour in another.
        let mut view_ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut metas = Vec::new();
        for (s, split) in samples {
            let mut ids = Vec::new();
            for view in std::iter::once(&s.reference).chain(&s.neighbors) {
                let key = view.camera.to_text(s.depth_min, s.depth_max);
                let next = view_ids.len();
                let id = *view_ids.entry(key).or_insert(next);
                if id == next {
                    let ext = if use_ppm { "ppm" } else { "pfm" };
                    let img_path = sdir.join(format!("view_{id:03}.{ext}"));
                    if use_ppm {
                        imgio::write_ppm(&img_path, &view.image)?;
                    } else {
                        imgio::write_pfm(&img_path, &view.image)?;
                    }
                    view.camera
                        .save(sdir.join(format!("cam_{id:03}.txt")), s.depth_min, s.depth_max)?;
                }
                ids.push(id);
            }
            if let Some(gt) = &s.gt_depth {
                imgio::write_pfm(sdir.join(format!("depth_{:03}.pfm", ids[0])), gt)?;
            }
            metas.push(SampleMeta {
                scene_id: s.scene_id.clone(),
                domain_id: s.domain_id.clone(),
                split: split.to_string(),
                reference: ids[0],
                neighbors: ids[1..].to_vec(),
                depth_min: s.depth_min,
                depth_max: s.depth_max,
            });
        }
        let meta = SceneMeta {
            samples: metas,
            image_format: if use_ppm { "ppm" } else { "pfm" }.to_string(),
        };
        fs::write(
            sdir.join("meta.json"),
            serde_json::to_string_pretty(&meta).map_err(|e| MvsError::Format(e.to_string()))?,
        )?;
    }
    Ok(())
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<SceneDataset> {
    let dir = dir.as_ref();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut held_out = Vec::new();
    let mut domain_index: BTreeMap<String, DomainIndex> = BTreeMap::new();

    let mut scene_dirs: Vec<_> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    scene_dirs.sort();
    if scene_dirs.is_empty() {
        return Err(MvsError::Format(format!(
            "no scene directories under {}",
            dir.display()
        )));
    }

    for sdir in scene_dirs {
        let meta: SceneMeta = serde_json::from_str(&fs::read_to_string(sdir.join("meta.json"))?)
            .map_err(|e| MvsError::Format(format!("{}: {e}", sdir.display())))?;
        let use_ppm = meta.image_format == "ppm";
        let mut views: BTreeMap<usize, View> = BTreeMap::new();
        let load_view = |id: usize, views: &mut BTreeMap<usize, View>| -> Result<View> {
            if let Some(v) = views.get(&id) {
                return Ok(v.clone());
            }
            let ext = if use_ppm { "ppm" } else { "pfm" };
            let img_path = sdir.join(format!("view_{id:03}.{ext}"));
            let image = if use_ppm {
                imgio::read_ppm(&img_path)?
            } else {
                imgio::read_pfm(&img_path)?
            };
            let (camera, _, _) = Camera::load(sdir.join(format!("cam_{id:03}.txt")))?;
            let [h, w] = [image.shape()[1], image.shape()[2]];
            let view = View {
                image,
                camera: camera.with_size(w, h),
            };
            views.insert(id, view.clone());
            Ok(view)
        };
        for m in meta.samples {
            let reference = load_view(m.reference, &mut views)?;
            let neighbors = m
                .neighbors
                .iter()
                .map(|&id| load_view(id, &mut views))
                .collect::<Result<Vec<_>>>()?;
            let depth_path = sdir.join(format!("depth_{:03}.pfm", m.reference));
            let gt_depth = if depth_path.exists() {
                Some(imgio::read_pfm(&depth_path)?)
            } else {
                None
            };
            let sample = MultiViewSample {
                reference,
                neighbors,
                gt_depth,
                domain_id: m.domain_id.clone(),
                scene_id: m.scene_id.clone(),
                held_out: m.split == "held_out",
                depth_min: m.depth_min,
                depth_max: m.depth_max,
            };
            let idx = domain_index.entry(m.domain_id.clone()).or_default();
            match m.split.as_str() {
                "train" => {
                    idx.train.push(train.len());
                    train.push(sample);
                }
                "val" => {
                    idx.val.push(val.len());
                    val.push(sample);
                }
                "held_out" => {
                    idx.held_out.push(held_out.len());
                    held_out.push(sample);
                }
                other => {
                    return Err(MvsError::Format(format!("unknown split {other:?}")));
                }
            }
        }
    }
    Ok(SceneDataset {
        train,
        val,
        held_out,
        domain_index,
    })
}

/// Ready-made domains for small-scale runs: three training domains with
/// distinct textures and lighting, plus a held-out target domain.
pub fn desk_domains() -> (Vec<DomainSpec>, DomainSpec) {
    let train = vec![
        DomainSpec {
            id: "checker_bright".into(),
            texture: TextureFamily::Checker { size: 0.45 },
            light_dir: [0.3, -0.5, -0.8],
            intensity: 0.8,
            ambient: 0.2,
            noise_sigma: 0.01,
            depth_min: 2.0,
            depth_max: 6.0,
        },
        DomainSpec {
            id: "noise_soft".into(),
            texture: TextureFamily::ValueNoise { cell: 0.6 },
            light_dir: [-0.4, 0.2, -0.9],
            intensity: 0.6,
            ambient: 0.35,
            noise_sigma: 0.01,
            depth_min: 2.0,
            depth_max: 6.0,
        },
        DomainSpec {
            id: "stripes_hard".into(),
            texture: TextureFamily::Stripes { period: 0.5 },
            light_dir: [0.1, 0.6, -0.8],
            intensity: 1.0,
            ambient: 0.1,
            noise_sigma: 0.02,
            depth_min: 2.0,
            depth_max: 6.0,
        },
    ];
    // High-contrast, nearly noise-free target: adaptation progress shows up
    // directly in the photometric loss instead of drowning in a noise floor.
    let target = DomainSpec {
        id: "target_smooth_noise".into(),
        texture: TextureFamily::ValueNoise { cell: 0.8 },
        light_dir: [-0.5, -0.4, -0.75],
        intensity: 1.0,
        ambient: 0.08,
        noise_sigma: 0.002,
        depth_min: 2.0,
        depth_max: 6.0,
    };
    (train, target)
}

/// Desk-scale dataset configuration: 64x80 images, 16x20 depth maps.
pub fn desk_dataset_config(seed: u64) -> DatasetConfig {
    let (train_domains, target_domain) = desk_domains();
    DatasetConfig {
        seed,
        train_domains,
        target_domain,
        scenes_per_domain: 4,
        val_scenes_per_domain: 1,
        views_per_scene: 6,
        num_neighbors: 2,
        width: 80,
        height: 64,
        focal: 110.0,
        }
}
