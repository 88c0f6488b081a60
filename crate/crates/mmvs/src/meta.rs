//! Meta-training loop: inner-loop self-supervised adaptation, first-order
//! outer supervised updates, the full training driver with checkpointing and
//! plateau early-stopping, and the self-supervised fine-tuning driver.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MvsError, Result};
use crate::losses::{self_loss, sup_loss, LossWeights};
use crate::network::non_tau;
use crate::scene::{MultiViewSample, SceneDataset};
use crate::tensor::{AdamState, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner examples (and gradient steps) per update cycle.
    pub k: usize,
    /// Inner-loop learning rate.
    pub alpha: f64,
    /// Outer-loop learning rate.
    pub beta: f64,
    /// Samples per outer supervised batch.
    pub outer_batch: usize,
    pub max_iters: usize,
    /// Early stop after this many iterations without a new best smoothed
    /// validation loss.
    pub patience: usize,
    /// Window for smoothing the validation loss before plateau detection.
    pub smooth_window: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub num_depths: usize,
    pub weights: LossWeights,
    /// Draw the k inner examples from k distinct domains when possible.
    pub distinct_domains: bool,
    /// Use Adam for the outer update instead of plain SGD.
    pub use_adam: bool,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(MvsError::Config("learning rates must be positive".into()));
        }
        if self.outer_batch == 0 || self.smooth_window == 0 {
            return Err(MvsError::Config("batch and smoothing window must be >= 1".into()));
        }
        self.weights.validate()
    }
}

pub struct TrainState {
    pub params: ParamSet,
    pub iter: usize,
    pub rng: ChaCha8Rng,
    pub adam: Option<AdamState>,
    /// Supervised validation loss per iteration, the early-stop signal.
    pub val_history: Vec<f64>,
    /// (iteration, loss name, value) rows for the CSV log.
    pub loss_log: Vec<(usize, String, f64)>,
}

#[derive(Serialize, Deserialize)]
struct StateSidecar {
    iteration: usize,
    seed: u64,
    rng_word_pos: String,
    adam_step: Option<u64>,
    val_history: Vec<f64>,
    config_hash: String,
}

impl TrainState {
    pub fn new(params: ParamSet, cfg: &MetaConfig) -> TrainState {
        TrainState {
            adam: cfg.use_adam.then(|| AdamState::new(&params)),
            params,
            iter: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            val_history: Vec::new(),
            loss_log: Vec::new(),
        }
    }

    /// Writes checkpoint, optimizer state, JSON sidecar and CSV loss log.
    pub fn save(&self, dir: impl AsRef<Path>, cfg: &MetaConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.params.save(dir.join("model.ckpt"))?;
        if let Some(adam) = &self.adam {
            adam.m.save(dir.join("adam_m.ckpt"))?;
            adam.v.save(dir.join("adam_v.ckpt"))?;
        }
        let sidecar = StateSidecar {
            iteration: self.iter,
            seed: cfg.seed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            adam_step: self.adam.as_ref().map(|a| a.step),
            val_history: self.val_history.clone(),
            config_hash: config_hash(cfg),
        };
        fs::write(
            dir.join("state.json"),
            serde_json::to_string_pretty(&sidecar).map_err(|e| MvsError::Format(e.to_string()))?,
        )?;
        let mut csv = String::from("iteration,loss,value\n");
        for (it, name, v) in &self.loss_log {
            csv.push_str(&format!("{it},{name},{v}\n"));
        }
        fs::write(dir.join("loss_log.csv"), csv)?;
        Ok(())
    }

    /// Restores a state saved by [`TrainState::save`]. Continued training is
    /// bit-identical to the uninterrupted run.
    pub fn load(dir: impl AsRef<Path>, cfg: &MetaConfig) -> Result<TrainState> {
        let dir = dir.as_ref();
        let sidecar: StateSidecar = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)
            .map_err(|e| MvsError::Format(format!("state.json: {e}")))?;
        if sidecar.config_hash != config_hash(cfg) {
            return Err(MvsError::Config(
                "checkpoint was produced by a different configuration".into(),
            ));
        }
        let params = ParamSet::load(dir.join("model.ckpt"))?;
        let adam = match sidecar.adam_step {
            Some(step) => {
                let mut a = AdamState::new(&params);
                a.m = ParamSet::load(dir.join("adam_m.ckpt"))?;
                a.v = ParamSet::load(dir.join("adam_v.ckpt"))?;
                a.step = step;
                Some(a)
            }
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sidecar.seed);
        let pos: u128 = sidecar
            .rng_word_pos
            .parse()
            .map_err(|_| MvsError::Format("bad rng position in sidecar".into()))?;
        rng.set_word_pos(pos);
        let mut loss_log = Vec::new();
        if let Ok(csv) = fs::read_to_string(dir.join("loss_log.csv")) {
            for line in csv.lines().skip(1) {
                let mut parts = line.splitn(3, ',');
                if let (Some(it), Some(name), Some(v)) = (parts.next(), parts.next(), parts.next()) {
                    if let (Ok(it), Ok(v)) = (it.parse(), v.parse()) {
                        loss_log.push((it, name.to_string(), v));
                    }
                }
            }
        }
        Ok(TrainState {
            params,
            iter: sidecar.iteration,
            rng,
            adam,
            val_history: sidecar.val_history,
            loss_log,
        })
    }
}

/// Stable hash of the serialized config, stored in sidecars and manifests.
pub fn config_hash(cfg: &MetaConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_string(cfg).expect("config serializes");
    let d = Sha256::digest(json.as_bytes());
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Inner-loop adaptation: k detached self-supervised gradient steps starting
/// from a clone of `params`, which is never mutated. Returns the adapted
/// parameters and the per-step loss trajectory.
pub fn adapt(
    params: &ParamSet,
    samples: &[&MultiViewSample],
    alpha: f64,
    num_depths: usize,
    weights: &LossWeights,
) -> Result<(ParamSet, Vec<f64>)> {
    let mut theta = params.clone_params();
    let mut trajectory = Vec::with_capacity(samples.len());
    for sample in samples {
        theta.zero_grads();
        let loss = self_loss(&theta, sample, num_depths, weights)?;
        trajectory.push(loss.value());
        loss.backward();
        let grads = theta.grads();
        theta = theta.sgd_step(&grads, alpha)?;
    }
    Ok((theta, trajectory))
}

fn sample_inner<'a>(
    dataset: &'a SceneDataset,
    rng: &mut ChaCha8Rng,
    k: usize,
    distinct_domains: bool,
) -> Result<Vec<&'a MultiViewSample>> {
    if dataset.train.is_empty() {
        return Err(MvsError::Config("meta_step: empty training split".into()));
    }
    let mut picked: Vec<&MultiViewSample> = Vec::with_capacity(k);
    let mut guard = 0;
    while picked.len() < k {
        let s = &dataset.train[rng.gen_range(0..dataset.train.len())];
        guard += 1;
        let clash = picked.iter().any(|p| {
            p.scene_id == s.scene_id || (distinct_domains && p.domain_id == s.domain_id)
        });
        // Fall back to allowing repeats once the pool is clearly exhausted.
        if !clash || guard > 50 * k.max(1) {
            picked.push(s);
        }
    }
    Ok(picked)
}

/// One cycle of Algorithm-style meta-training: adapt a clone on k
/// self-supervised examples, measure the adapted parameters with a
/// supervised validation batch, and apply that gradient to the base
/// parameters (first-order update).
pub fn meta_step(state: &mut TrainState, dataset: &SceneDataset, cfg: &MetaConfig) -> Result<()> {
    if dataset.val.is_empty() {
        return Err(MvsError::Config("meta_step: empty validation split".into()));
    }
    let inner = sample_inner(dataset, &mut state.rng, cfg.k, cfg.distinct_domains)?;
    let (theta_k, trajectory) = adapt(&state.params, &inner, cfg.alpha, cfg.num_depths, &cfg.weights)?;
    for (i, l) in trajectory.iter().enumerate() {
        state.loss_log.push((state.iter, format!("self_inner_{i}"), *l));
    }

    theta_k.zero_grads();
    let mut outer = crate::tensor::Tensor::scalar(0.0);
    for _ in 0..cfg.outer_batch {
        let sample = &dataset.val[state.rng.gen_range(0..dataset.val.len())];
        outer = outer.add(&sup_loss(&theta_k, sample, cfg.num_depths)?)?;
    }
    let outer = outer.scale(1.0 / cfg.outer_batch as f64);
    let outer_value = outer.value();
    outer.backward();
    let grads = theta_k.grads();
    state.params = match &mut state.adam {
        Some(adam) => adam.step(&state.params, &grads, cfg.beta, |_| true)?,
        None => state.params.sgd_step(&grads, cfg.beta)?,
    };
    state.loss_log.push((state.iter, "sup_val".into(), outer_value));
    state.val_history.push(outer_value);
    state.iter += 1;
    Ok(())
}

fn smoothed_tail(history: &[f64], window: usize) -> f64 {
    let n = history.len().min(window);
    history[history.len() - n..].iter().sum::<f64>() / n as f64
}

/// Runs meta_step until the iteration budget or a validation plateau, with
/// periodic checkpoints when `out_dir` is given. Resumable: pass a loaded
/// state to continue a previous run bit-exactly.
pub fn meta_train(
    state: &mut TrainState,
    dataset: &SceneDataset,
    cfg: &MetaConfig,
    out_dir: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    let mut best = f64::INFINITY;
    let mut best_iter = 0usize;
    // Rebuild the plateau tracker from history so resume matches.
    for i in 0..state.val_history.len() {
        let s = smoothed_tail(&state.val_history[..=i], cfg.smooth_window);
        if s < best {
            best = s;
            best_iter = i + 1;
        }
    }
    while state.iter < cfg.max_iters {
        meta_step(state, dataset, cfg)?;
        let s = smoothed_tail(&state.val_history, cfg.smooth_window);
        if s < best {
            best = s;
            best_iter = state.iter;
        }
        if state.iter - best_iter >= cfg.patience {
            break;
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && state.iter % cfg.checkpoint_every == 0 {
                state.save(dir, cfg)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        state.save(dir, cfg)?;
    }
    Ok(())
}

/// Fine-tuning hyperparameters; see [`fine_tune`].
#[derive(Debug, Clone)]
pub struct FineTuneOpts {
    pub lr: f64,
    pub steps: usize,
    /// Keep confidence-mask parameters fixed (the default policy).
    pub freeze_tau: bool,
    pub batch_size: usize,
    pub num_depths: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Adam instead of plain SGD.
    pub use_adam: bool,
}

/// Self-supervised fine-tuning on a new domain: repeated gradient steps on
/// the self-supervised loss over batches drawn from `samples`. With
/// `freeze_tau` the confidence-mask parameters receive no updates. Returns
/// the tuned parameters and the per-step batch losses.
pub fn fine_tune(
    params: &ParamSet,
    samples: &[MultiViewSample],
    opts: &FineTuneOpts,
) -> Result<(ParamSet, Vec<f64>)> {
    if samples.is_empty() {
        return Err(MvsError::Config("fine_tune: no samples".into()));
    }
    if opts.batch_size == 0 {
        return Err(MvsError::Config("fine_tune: batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut theta = params.clone_params();
    let mut adam = opts.use_adam.then(|| AdamState::new(&theta));
    let mut losses = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        theta.zero_grads();
        let mut batch_loss = crate::tensor::Tensor::scalar(0.0);
        for _ in 0..opts.batch_size {
            let s = &samples[rng.gen_range(0..samples.len())];
            batch_loss = batch_loss.add(&self_loss(&theta, s, opts.num_depths, &opts.weights)?)?;
        }
        let batch_loss = batch_loss.scale(1.0 / opts.batch_size as f64);
        losses.push(batch_loss.value());
        batch_loss.backward();
        let grads = theta.grads();
        let keep = |name: &str| !opts.freeze_tau || non_tau(name);
        theta = match &mut adam {
            Some(a) => a.step(&theta, &grads, opts.lr, keep)?,
            None => theta.sgd_step_filtered(&grads, opts.lr, keep)?,
        };
    }
    Ok((theta, losses))
}
