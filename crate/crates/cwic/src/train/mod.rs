//! Rate-distortion training: the objective, the ADAM solver, the
//! learning-rate ladder with patience-based stage stopping, and patch
//! ingestion.
//!
//! The objective over a batch is `sum_x { L_D(c, x) + gamma * L_R(x) }`
//! where `L_D` is the summed squared error of the reconstruction and
//! `L_R = max(sum(p) - r, 0)` penalizes the importance map only above the
//! rate threshold `r`. With the importance map disabled (the ablation
//! baseline) the mask is all ones and `L_R` is identically zero.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::nets::{self, ModelError, ModelParams, NetIds};
use crate::quant::{self, QuantError};
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("no usable patches (empty dataset)")]
    EmptyDataset,
    #[error("bad config: {0}")]
    BadConfig(String),
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Training hyperparameters. `lr_ladder` stages run in order; each stops
/// on its patience trigger or after `max_steps_per_stage`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Wanted compression rate r0 in bits per pixel; the rate threshold
    /// is derived from it per code-map size.
    pub target_bpp: f64,
    pub n: usize,
    pub levels: usize,
    pub batch_size: usize,
    pub max_steps_per_stage: usize,
    pub lr_ladder: Vec<f64>,
    pub seed: u64,
    pub patch_size: usize,
    pub importance_enabled: bool,
    /// Moving-average window (in objective evaluations) for the stopping
    /// rule.
    pub ma_window: usize,
    /// Consecutive non-improving checks that end a stage.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.01,
            target_bpp: 0.5,
            n: 64,
            levels: 16,
            batch_size: 4,
            max_steps_per_stage: 2000,
            lr_ladder: vec![1e-4, 1e-5, 1e-6],
            seed: 0,
            patch_size: 128,
            importance_enabled: true,
            ma_window: 50,
            patience: 3,
        }
    }
}

impl TrainConfig {
    /// Rate threshold for a code map of `h x w` positions:
    /// `r0*h*w` for n=64 and `0.5*r0*h*w` for n=128.
    pub fn rate_threshold(&self, code_h: usize, code_w: usize) -> f64 {
        let hw = (code_h * code_w) as f64;
        if self.n == 128 {
            0.5 * self.target_bpp * hw
        } else {
            self.target_bpp * hw
        }
    }

    /// Key-value text form (the config file format and the effective
    /// config block printed by the CLI).
    pub fn to_kv(&self) -> String {
        let ladder = self
            .lr_ladder
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "gamma = {}\ntarget_bpp = {}\nn = {}\nlevels = {}\nbatch_size = {}\n\
             max_steps_per_stage = {}\nlr_ladder = {}\nseed = {}\npatch_size = {}\n\
             importance_enabled = {}\nma_window = {}\npatience = {}\n",
            self.gamma,
            self.target_bpp,
            self.n,
            self.levels,
            self.batch_size,
            self.max_steps_per_stage,
            ladder,
            self.seed,
            self.patch_size,
            self.importance_enabled,
            self.ma_window,
            self.patience,
        )
    }

    /// Parse the key-value form. Unknown keys are rejected; omitted keys
    /// keep their defaults.
    pub fn from_kv(text: &str) -> Result<TrainConfig, TrainError> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::BadConfig(format!("line {}: missing '='", idx + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| TrainError::BadConfig(format!("line {}: {what}", idx + 1));
            match key {
                "gamma" => cfg.gamma = value.parse().map_err(|_| bad("bad gamma"))?,
                "target_bpp" => {
                    cfg.target_bpp = value.parse().map_err(|_| bad("bad target_bpp"))?
                }
                "n" => cfg.n = value.parse().map_err(|_| bad("bad n"))?,
                "levels" => cfg.levels = value.parse().map_err(|_| bad("bad levels"))?,
                "batch_size" => {
                    cfg.batch_size = value.parse().map_err(|_| bad("bad batch_size"))?
                }
                "max_steps_per_stage" => {
                    cfg.max_steps_per_stage =
                        value.parse().map_err(|_| bad("bad max_steps_per_stage"))?
                }
                "lr_ladder" => {
                    cfg.lr_ladder = value
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad("bad lr_ladder"))?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad("bad seed"))?,
                "patch_size" => {
                    cfg.patch_size = value.parse().map_err(|_| bad("bad patch_size"))?
                }
                "importance_enabled" => {
                    cfg.importance_enabled =
                        value.parse().map_err(|_| bad("bad importance_enabled"))?
                }
                "ma_window" => cfg.ma_window = value.parse().map_err(|_| bad("bad ma_window"))?,
                "patience" => cfg.patience = value.parse().map_err(|_| bad("bad patience"))?,
                other => return Err(TrainError::BadConfig(format!("unknown key \"{other}\""))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.gamma < 0.0 {
            return Err(TrainError::BadConfig("gamma must be >= 0".into()));
        }
        if self.target_bpp < 0.0 {
            return Err(TrainError::BadConfig("target_bpp must be >= 0".into()));
        }
        nets::levels_for(self.n).map_err(|e| TrainError::BadConfig(e.to_string()))?;
        if self.levels != nets::levels_for(self.n).unwrap() {
            return Err(TrainError::BadConfig(format!(
                "levels {} does not pair with n {}",
                self.levels, self.n
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if !self.patch_size.is_multiple_of(8) || self.patch_size == 0 {
            return Err(TrainError::BadConfig(
                "patch_size must be a positive multiple of 8".into(),
            ));
        }
        if self.lr_ladder.is_empty() {
            return Err(TrainError::BadConfig("lr_ladder must not be empty".into()));
        }
        Ok(())
    }
}

/// A set of square training patches, each planar `[3, ps, ps]` in `[0,1]`.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patch_size: usize,
    pub patches: Vec<Vec<f64>>,
}

/// Deterministically crop every PPM under `dir` into non-overlapping
/// `patch_size` tiles; undersized or unreadable images are skipped with a
/// warning on stderr. The tile order is shuffled by `seed`.
pub fn load_patches(dir: &Path, patch_size: usize, seed: u64) -> Result<PatchSet, TrainError> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("ppm"))
                .unwrap_or(false)
        })
        .collect();
    names.sort();
    let mut patches = Vec::new();
    for path in names {
        let image = match container::read_ppm(&path) {
            Ok(img) => img,
            Err(err) => {
                eprintln!("warning: skipping {}: {err}", path.display());
                continue;
            }
        };
        if image.width < patch_size || image.height < patch_size {
            eprintln!(
                "warning: skipping {}: {}x{} smaller than patch size {patch_size}",
                path.display(),
                image.width,
                image.height
            );
            continue;
        }
        let planes = image.to_planes();
        let (w, h) = (image.width, image.height);
        for ty in 0..h / patch_size {
            for tx in 0..w / patch_size {
                let mut patch = vec![0.0; 3 * patch_size * patch_size];
                for c in 0..3 {
                    for y in 0..patch_size {
                        let sy = ty * patch_size + y;
                        let src = (c * h + sy) * w + tx * patch_size;
                        let dst = (c * patch_size + y) * patch_size;
                        patch[dst..dst + patch_size]
                            .copy_from_slice(&planes[src..src + patch_size]);
                    }
                }
                patches.push(patch);
            }
        }
    }
    if patches.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patches.shuffle(&mut rng);
    Ok(PatchSet {
        patch_size,
        patches,
    })
}

/// Distortion loss `sum((xhat - x)^2)` as a tape node.
pub fn distortion_loss(
    tape: &mut Tape,
    xhat: TensorId,
    x: TensorId,
) -> Result<TensorId, TrainError> {
    Ok(tape.sq_error(xhat, x)?)
}

/// Rate loss `max(sum(p) - r, 0)` as a tape node; its gradient is 1 on
/// every element of `p` while the sum exceeds `r`, else 0.
pub fn rate_loss(tape: &mut Tape, p: TensorId, r: f64) -> Result<TensorId, TrainError> {
    let total = tape.sum(p);
    let neg_r = tape.constant(-r);
    let shifted = tape.add(total, neg_r)?;
    Ok(tape.relu(shifted))
}

/// Ids of the per-image objective pieces.
pub struct ImageGraph {
    pub loss: TensorId,
    pub distortion: TensorId,
    pub rate: Option<TensorId>,
    pub importance_map: Option<TensorId>,
}

/// Scalar diagnostics for one patch.
#[derive(Debug, Clone, Copy)]
pub struct ImageStats {
    pub objective: f64,
    pub distortion: f64,
    pub rate_loss: f64,
    pub sum_p: f64,
    /// Total quantized importance, `sum_ij Q(p_ij)`.
    pub sum_q: usize,
}

/// Build encode -> binarize -> mask -> trim -> decode -> loss for one
/// image already on the tape.
pub fn image_objective(
    tape: &mut Tape,
    ids: &NetIds,
    x: TensorId,
    cfg: &TrainConfig,
) -> Result<ImageGraph, TrainError> {
    let shape = tape.shape(x).to_vec();
    let (h, w) = (shape[2], shape[3]);
    let (e, f) = nets::encode(tape, x, ids)?;
    let binary = quant::binarize(tape, e);
    let (code, rate, importance_map) = if cfg.importance_enabled {
        let p = nets::importance(tape, f, ids)?;
        let mask = quant::mask_node(tape, p, cfg.n, cfg.levels)?;
        let code = tape.mul(binary, mask)?;
        let r = cfg.rate_threshold(h / 8, w / 8);
        let rate = rate_loss(tape, p, r)?;
        (code, Some(rate), Some(p))
    } else {
        (binary, None, None)
    };
    let xhat = nets::decode(tape, code, ids, cfg.n)?;
    let distortion = distortion_loss(tape, xhat, x)?;
    let loss = match rate {
        Some(rate) => {
            let gamma = tape.constant(cfg.gamma);
            let weighted = tape.mul(rate, gamma)?;
            tape.add(distortion, weighted)?
        }
        None => distortion,
    };
    Ok(ImageGraph {
        loss,
        distortion,
        rate,
        importance_map,
    })
}

fn stats_of(tape: &Tape, graph: &ImageGraph, cfg: &TrainConfig) -> Result<ImageStats, TrainError> {
    let (sum_p, sum_q) = match graph.importance_map {
        Some(p) => {
            let pd = tape.data(p);
            let mut sq = 0usize;
            for &v in pd {
                sq += quant::quantize_importance(v, cfg.levels)?;
            }
            (pd.iter().sum(), sq)
        }
        None => (0.0, 0),
    };
    Ok(ImageStats {
        objective: tape.data(graph.loss)[0],
        distortion: tape.data(graph.distortion)[0],
        rate_loss: graph.rate.map(|r| tape.data(r)[0]).unwrap_or(0.0),
        sum_p,
        sum_q,
    })
}

/// Per-layer (weight, bias) gradients in canonical layer order.
pub type LayerGrads = Vec<(Vec<f64>, Vec<f64>)>;

fn zero_grads(params: &ModelParams) -> LayerGrads {
    params
        .layers()
        .iter()
        .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
        .collect()
}

fn add_grads(into: &mut LayerGrads, from: &LayerGrads) {
    for (a, b) in into.iter_mut().zip(from) {
        for (x, y) in a.0.iter_mut().zip(&b.0) {
            *x += y;
        }
        for (x, y) in a.1.iter_mut().zip(&b.1) {
            *x += y;
        }
    }
}

fn single_image(
    params: &ModelParams,
    cfg: &TrainConfig,
    patch: &[f64],
    with_grads: bool,
) -> Result<(ImageStats, Option<LayerGrads>), TrainError> {
    let ps = cfg.patch_size;
    assert_eq!(patch.len(), 3 * ps * ps, "patch size mismatch");
    let mut tape = Tape::new();
    let ids = nets::upload(&mut tape, params, with_grads);
    let x = tape.input(&[1, 3, ps, ps], patch.to_vec(), false);
    let graph = image_objective(&mut tape, &ids, x, cfg)?;
    let stats = stats_of(&tape, &graph, cfg)?;
    if !with_grads {
        return Ok((stats, None));
    }
    let store = tape.backward(graph.loss)?;
    let grads: LayerGrads = ids
        .layers
        .iter()
        .zip(params.layers())
        .map(|(ids, layer)| {
            (
                store
                    .grad(ids.w)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; layer.w.len()]),
                store
                    .grad(ids.b)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; layer.b.len()]),
            )
        })
        .collect();
    Ok((stats, Some(grads)))
}

/// Run a batch, sharding images across up to `thread_cap()` worker
/// threads (one tape per image). Results are reduced in image order, so
/// the outcome is independent of scheduling.
fn run_batch(
    params: &ModelParams,
    cfg: &TrainConfig,
    batch: &[&[f64]],
    with_grads: bool,
) -> Result<(Vec<ImageStats>, Option<LayerGrads>), TrainError> {
    let workers = crate::thread_cap().min(batch.len()).max(1);
    let per_image: Vec<Result<(ImageStats, Option<LayerGrads>), TrainError>> = if workers == 1 {
        batch
            .iter()
            .map(|patch| single_image(params, cfg, patch, with_grads))
            .collect()
    } else {
        let chunk = batch.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|patch| single_image(params, cfg, patch, with_grads))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };

    let mut stats = Vec::with_capacity(batch.len());
    let mut total_grads = with_grads.then(|| zero_grads(params));
    for result in per_image {
        let (s, g) = result?;
        stats.push(s);
        if let (Some(total), Some(g)) = (&mut total_grads, g) {
            add_grads(total, &g);
        }
    }
    Ok((stats, total_grads))
}

/// Objective value over a batch (sum of per-image losses), with per-image
/// diagnostics.
pub fn objective(
    batch: &[&[f64]],
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<ImageStats>), TrainError> {
    let (stats, _) = run_batch(params, cfg, batch, false)?;
    Ok((stats.iter().map(|s| s.objective).sum(), stats))
}

/// Objective and accumulated parameter gradients over a batch.
pub fn objective_with_grads(
    batch: &[&[f64]],
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(f64, LayerGrads), TrainError> {
    let (stats, grads) = run_batch(params, cfg, batch, true)?;
    Ok((
        stats.iter().map(|s| s.objective).sum(),
        grads.expect("grads requested"),
    ))
}

/// First/second moment accumulators for every parameter array.
pub struct AdamState {
    m: LayerGrads,
    v: LayerGrads,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> AdamState {
        AdamState {
            m: zero_grads(params),
            v: zero_grads(params),
            t: 0,
        }
    }
}

pub(crate) fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        let next = p[i] - lr * mhat / (vhat.sqrt() + ADAM_EPS);
        // Parameters stay on the f32 grid so model files roundtrip
        // losslessly.
        p[i] = next as f32 as f64;
    }
}

/// One ADAM update over all parameter arrays.
pub fn adam_step(params: &mut ModelParams, grads: &LayerGrads, state: &mut AdamState, lr: f64) {
    state.t += 1;
    let t = state.t;
    for (i, layer) in params.layers_mut().into_iter().enumerate() {
        adam_update(
            Arc::make_mut(&mut layer.w).as_mut_slice(),
            &grads[i].0,
            &mut state.m[i].0,
            &mut state.v[i].0,
            lr,
            t,
        );
        adam_update(
            Arc::make_mut(&mut layer.b).as_mut_slice(),
            &grads[i].1,
            &mut state.m[i].1,
            &mut state.v[i].1,
            lr,
            t,
        );
    }
}

/// Moving-average early-stopping rule: a stage ends after `patience`
/// consecutive checks without improvement of the windowed average.
pub struct PatienceTracker {
    window: usize,
    patience: usize,
    history: VecDeque<f64>,
    best: f64,
    strikes: usize,
}

impl PatienceTracker {
    pub fn new(window: usize, patience: usize) -> PatienceTracker {
        PatienceTracker {
            window: window.max(1),
            patience,
            history: VecDeque::new(),
            best: f64::INFINITY,
            strikes: 0,
        }
    }

    /// Record one objective evaluation; returns true when the stage
    /// should stop. A `patience` of 0 disables the rule.
    pub fn observe(&mut self, value: f64) -> bool {
        if self.patience == 0 {
            return false;
        }
        self.history.push_back(value);
        if self.history.len() > self.window {
            self.history.pop_front();
        }
        let ma: f64 = self.history.iter().sum::<f64>() / self.history.len() as f64;
        if ma < self.best {
            self.best = ma;
            self.strikes = 0;
        } else {
            self.strikes += 1;
        }
        self.strikes >= self.patience
    }
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub lr: f64,
    pub steps: usize,
    pub final_objective: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub stages: Vec<StageReport>,
}

/// Full training run over the learning-rate ladder, starting from
/// `params` (fresh initialization or a pre-trained warm start).
pub fn train(
    cfg: &TrainConfig,
    patches: &PatchSet,
    mut params: ModelParams,
) -> Result<(ModelParams, TrainReport), TrainError> {
    cfg.validate()?;
    if patches.patches.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if patches.patch_size != cfg.patch_size {
        return Err(TrainError::BadConfig(format!(
            "patch set is {} but config wants {}",
            patches.patch_size, cfg.patch_size
        )));
    }
    if params.n != cfg.n {
        return Err(TrainError::BadConfig(format!(
            "model has n={} but config wants n={}",
            params.n, cfg.n
        )));
    }
    params.importance_enabled = cfg.importance_enabled;

    let all: Vec<&[f64]> = patches.patches.iter().map(|p| p.as_slice()).collect();
    let (initial_objective, _) = objective(&all, &params, cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&params);
    let mut stages = Vec::new();
    for &lr in &cfg.lr_ladder {
        let mut tracker = PatienceTracker::new(cfg.ma_window, cfg.patience);
        let mut steps = 0usize;
        let mut last = f64::NAN;
        for _ in 0..cfg.max_steps_per_stage {
            let batch: Vec<&[f64]> = (0..cfg.batch_size)
                .map(|_| all[rng.gen_range(0..all.len())])
                .collect();
            let (value, grads) = objective_with_grads(&batch, &params, cfg)?;
            adam_step(&mut params, &grads, &mut state, lr);
            steps += 1;
            last = value;
            if tracker.observe(value) {
                break;
            }
        }
        stages.push(StageReport {
            lr,
            steps,
            final_objective: last,
        });
    }

    let (final_objective, _) = objective(&all, &params, cfg)?;
    Ok((
        params,
        TrainReport {
            initial_objective,
            final_objective,
            stages,
        },
    ))
}
