//! Command-line pipeline: dataset generation, meta-training, fine-tuning,
//! depth prediction, fusion, and evaluation.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 I/O and format errors,
//! 4 numerical errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use mmvs::config::{Preset, RunConfig};
use mmvs::error::{MvsError, Result};
use mmvs::eval::evaluate_clouds;
use mmvs::fusion::{fuse, read_ply, write_ply, FusedPoint, FusionView, PointCloud};
use mmvs::geometry::depth_hypotheses;
use mmvs::imgio::write_pfm;
use mmvs::meta::{fine_tune, meta_train, FineTuneOpts, TrainState};
use mmvs::network::{forward, init_model_params, ArchConfig};
use mmvs::scene::{
    load_dataset, make_dataset, save_dataset, MultiViewSample, SceneDataset, DEPTH_SCALE,
};
use mmvs::tensor::ParamSet;

#[derive(Parser)]
#[command(name = "mmvs", version, about = "Multi-view stereo with meta-learned adaptation")]
struct Cli {
    /// JSON config file; defaults to the chosen preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is given.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Renders the synthetic multi-view dataset to --out.
    GenData,
    /// Meta-trains from scratch, or resumes from --out if a state file exists.
    MetaTrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Self-supervised adaptation of a checkpoint on the held-out domain.
    FineTune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Writes depth/probability/confidence-mask PFMs for one scene.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene id; defaults to the first held-out scene.
        #[arg(long)]
        scene: Option<String>,
    },
    /// Predicts all views of a scene and fuses them into a PLY.
    Fuse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: Option<String>,
    },
    /// Compares an estimated PLY against the scene's ground-truth surface.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        scene: Option<String>,
    },
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_hash: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    started_unix: u64,
    elapsed_secs: f64,
}

fn file_hash(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    hash_into(path, path, &mut hasher)?;
    let d = hasher.finalize();
    Ok(d[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Hashes a file, or every file under a directory in sorted relative-path
/// order (manifests under the directory itself are skipped).
fn hash_into(root: &Path, path: &Path, hasher: &mut Sha256) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> =
            std::fs::read_dir(path)?.map(|e| Ok(e?.path())).collect::<Result<_>>()?;
        entries.sort();
        for e in entries {
            if e.file_name().is_some_and(|n| n == "manifest.json") {
                continue;
            }
            hash_into(root, &e, hasher)?;
        }
    } else {
        hasher.update(path.strip_prefix(root).unwrap_or(path).to_string_lossy().as_bytes());
        hasher.update(std::fs::read(path)?);
    }
    Ok(())
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[&Path],
    started: SystemTime,
    elapsed: f64,
) -> Result<()> {
    let mut hashed = BTreeMap::new();
    for p in inputs {
        if p.exists() {
            hashed.insert(p.display().to_string(), file_hash(p)?);
        }
    }
    let manifest = Manifest {
        command: command.into(),
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        inputs: hashed,
        started_unix: started
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        elapsed_secs: elapsed,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| MvsError::Format(e.to_string()))?,
    )?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(cli.preset.parse::<Preset>()?),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.meta.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// All samples of one scene, searching held-out, then validation, then train
/// splits. Without an id, the first held-out scene is used.
fn scene_samples<'a>(
    dataset: &'a SceneDataset,
    scene: &Option<String>,
) -> Result<(String, Vec<&'a MultiViewSample>)> {
    let all = dataset
        .held_out
        .iter()
        .chain(&dataset.val)
        .chain(&dataset.train);
    let id = match scene {
        Some(s) => s.clone(),
        None => dataset
            .held_out
            .first()
            .map(|s| s.scene_id.clone())
            .ok_or_else(|| MvsError::Config("dataset has no held-out scenes".into()))?,
    };
    let samples: Vec<&MultiViewSample> = all.filter(|s| s.scene_id == id).collect();
    if samples.is_empty() {
        return Err(MvsError::Config(format!("no samples for scene {id:?}")));
    }
    Ok((id, samples))
}

fn check_finite(name: &str, t: &mmvs::tensor::Tensor) -> Result<()> {
    if t.values().iter().any(|v| !v.is_finite()) {
        return Err(MvsError::Numerical(format!("{name} contains NaN/inf")));
    }
    Ok(())
}

fn predict_views(
    params: &ParamSet,
    samples: &[&MultiViewSample],
    num_depths: usize,
) -> Result<Vec<FusionView>> {
    let mut views = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let depths = depth_hypotheses(s.depth_min, s.depth_max, num_depths, false);
        let pred = forward(params, s, &depths)?;
        check_finite("depth", &pred.depth)?;
        check_finite("prob", &pred.prob)?;
        println!(
            "view={i} depth_mean={:.4} prob_mean={:.4}",
            pred.depth.values().iter().sum::<f64>() / pred.depth.values().len() as f64,
            pred.prob.values().iter().sum::<f64>() / pred.prob.values().len() as f64
        );
        views.push(FusionView {
            depth: pred.depth,
            prob: pred.prob,
            image: pred.ref_small,
            camera: s.reference.camera.scaled(DEPTH_SCALE),
        });
    }
    Ok(views)
}

/// Ground-truth cloud from the stored analytic depth maps of the scene.
fn gt_cloud(samples: &[&MultiViewSample]) -> Result<PointCloud> {
    let mut points = Vec::new();
    for s in samples {
        let Some(gt) = &s.gt_depth else { continue };
        let cam = s.reference.camera.scaled(DEPTH_SCALE);
        let (h, w) = (gt.shape()[0], gt.shape()[1]);
        let dv = gt.values();
        for y in 0..h {
            for x in 0..w {
                let d = dv[y * w + x];
                if d > 0.0 {
                    let p = cam.backproject([x as f64, y as f64], d)?;
                    points.push(FusedPoint {
                        position: [p[0], p[1], p[2]],
                        color: [0.5; 3],
                        support: 1,
                    });
                }
            }
        }
    }
    if points.is_empty() {
        return Err(MvsError::Config("scene has no ground-truth depth".into()));
    }
    Ok(PointCloud { points })
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let started = SystemTime::now();
    let timer = Instant::now();
    let out = &cli.out;
    std::fs::create_dir_all(out)?;
    let mut inputs: Vec<&Path> = Vec::new();
    if let Some(c) = &cli.config {
        inputs.push(c);
    }

    let command = match &cli.cmd {
        Cmd::GenData => {
            let dataset = make_dataset(&cfg.dataset_config())?;
            save_dataset(&dataset, out, false)?;
            println!(
                "gen-data train={} val={} held_out={}",
                dataset.train.len(),
                dataset.val.len(),
                dataset.held_out.len()
            );
            "gen-data"
        }
        Cmd::MetaTrain { data } => {
            inputs.push(data);
            let dataset = load_dataset(data)?;
            let meta_cfg = cfg.meta_config();
            let mut state = if out.join("state.json").exists() {
                let s = TrainState::load(out, &meta_cfg)?;
                println!("resume iter={}", s.iter);
                s
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let params =
                    init_model_params(&mut rng, &ArchConfig { channels: cfg.network.channels });
                TrainState::new(params, &meta_cfg)
            };
            let logged = state.loss_log.len();
            meta_train(&mut state, &dataset, &meta_cfg, Some(out))?;
            for (it, name, v) in &state.loss_log[logged..] {
                println!("iter={it} {name}={v:.6}");
            }
            if state.val_history.iter().any(|v| !v.is_finite()) {
                return Err(MvsError::Numerical("validation loss became NaN".into()));
            }
            "meta-train"
        }
        Cmd::FineTune { data, checkpoint } => {
            inputs.push(data);
            inputs.push(checkpoint);
            let dataset = load_dataset(data)?;
            let params = ParamSet::load(checkpoint.join("model.ckpt"))?;
            if dataset.held_out.is_empty() {
                return Err(MvsError::Config("dataset has no held-out samples".into()));
            }
            let samples: Vec<MultiViewSample> = dataset.held_out.clone();
            let opts = FineTuneOpts {
                lr: cfg.fine_tune.lr,
                steps: cfg.fine_tune.steps,
                freeze_tau: cfg.fine_tune.freeze_tau,
                batch_size: cfg.fine_tune.batch_size,
                num_depths: cfg.network.num_depths,
                weights: cfg.meta.weights,
                seed: cfg.seed,
                use_adam: cfg.fine_tune.use_adam,
            };
            let (tuned, losses) = fine_tune(&params, &samples, &opts)?;
            for (i, l) in losses.iter().enumerate() {
                if !l.is_finite() {
                    return Err(MvsError::Numerical(format!("step {i}: loss is NaN")));
                }
                println!("step={i} self_loss={l:.6}");
            }
            tuned.save(out.join("model.ckpt"))?;
            "fine-tune"
        }
        Cmd::Predict { data, checkpoint, scene } => {
            inputs.push(data);
            inputs.push(checkpoint);
            let dataset = load_dataset(data)?;
            let params = ParamSet::load(checkpoint.join("model.ckpt"))?;
            let (id, samples) = scene_samples(&dataset, scene)?;
            println!("predict scene={id} views={}", samples.len());
            for (i, s) in samples.iter().enumerate() {
                let depths =
                    depth_hypotheses(s.depth_min, s.depth_max, cfg.network.num_depths, false);
                let pred = forward(&params, s, &depths)?;
                check_finite("depth", &pred.depth)?;
                write_pfm(out.join(format!("depth_{i:03}.pfm")), &pred.depth)?;
                write_pfm(out.join(format!("prob_{i:03}.pfm")), &pred.prob)?;
                for (j, m) in pred.conf_masks.iter().enumerate() {
                    write_pfm(out.join(format!("mask_{i:03}_{j}.pfm")), m)?;
                }
            }
            "predict"
        }
        Cmd::Fuse { data, checkpoint, scene } => {
            inputs.push(data);
            inputs.push(checkpoint);
            let dataset = load_dataset(data)?;
            let params = ParamSet::load(checkpoint.join("model.ckpt"))?;
            let (id, samples) = scene_samples(&dataset, scene)?;
            let views = predict_views(&params, &samples, cfg.network.num_depths)?;
            let cloud = fuse(&views, &cfg.fusion_config())?;
            println!("fuse scene={id} points={}", cloud.points.len());
            write_ply(&cloud, out.join("cloud.ply"))?;
            "fuse"
        }
        Cmd::Eval { data, est, scene } => {
            inputs.push(data);
            inputs.push(est);
            let dataset = load_dataset(data)?;
            let (id, samples) = scene_samples(&dataset, scene)?;
            let est_cloud = read_ply(est)?;
            let gt = gt_cloud(&samples)?;
            let report = evaluate_clouds(&est_cloud, &gt, cfg.eval.max_dist, &cfg.eval.taus)?;
            println!(
                "eval scene={id} accuracy={:.4} completeness={:.4} overall={:.4}",
                report.accuracy, report.completeness, report.overall
            );
            print!("{}", report.to_table());
            std::fs::write(out.join("report.json"), report.to_json()?)?;
            "eval"
        }
    };

    write_manifest(out, command, &cfg, &inputs, started, timer.elapsed().as_secs_f64())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                MvsError::Config(_) => 2,
                MvsError::Io(_) | MvsError::Format(_) => 3,
                MvsError::Numerical(_) | MvsError::Shape(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}
