//! Learned reconstruction engines.
//!
//! * GIDC: deep-image-prior training of a generator against the measured
//!   buckets through the forward model, with cross-validation early stopping.
//!   The same loop drives the INR baseline (coordinate input instead of the
//!   least-squares image).
//! * Noise2Inverse: image-domain self-supervision across realization splits.
//! * Noise2Ghost: cross-split bucket-domain self-supervision over K splits
//!   and P permutations; the prediction is the average of the per-split
//!   network outputs at the best cross-validation epoch.
//!
//! A fraction of the realizations is held out before any sub-reconstruction
//! is formed; those buckets never appear as training inputs or targets and
//! only score the per-epoch averaged prediction.

use crate::acquisition::{apply_poisson, BucketVector, MaskSet, NoiseModel};
use crate::error::{GhostError, Result};
use crate::image::Image;
use crate::linear::{
    cgls_reconstruct, permuted_splits, sub_reconstruct_all, CglsConfig, PartitionPlan,
};
use crate::models::{
    activation_bytes_estimate, build_model, forward_on_tape, Model, ModelConfig,
};
use crate::rng::Rng64;
use crate::tensor::{AdamState, NodeId, Tape};
use crate::variational::{tv_min_reconstruct, VariationalConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

const STREAM_CV: u64 = 0x4356_5350; // "CVSP"

/// Smoothing constant for the TV term inside training losses.
pub const TRAIN_TV_EPS: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    /// K realization splits (N2G/N2I).
    pub splits: usize,
    /// P permutations (N2G augmentation).
    pub permutations: usize,
    pub cv_fraction: f64,
    pub cv_repeats: usize,
    pub seed: u64,
    pub memory_budget_bytes: usize,
    pub cgls: CglsConfig,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            epochs: 5000,
            lr: 3e-4,
            weight_decay: 1e-2,
            lambda: 0.0,
            splits: 4,
            permutations: 6,
            cv_fraction: 0.1,
            cv_repeats: 3,
            seed,
            memory_budget_bytes: 2 << 30,
            cgls: CglsConfig::default(),
        }
    }

    /// Paper-style defaults: 5000 epochs for CNNs, 7000 for the INR.
    pub fn for_model(config: &ModelConfig, seed: u64) -> Self {
        let mut cfg = TrainConfig::new(seed);
        if matches!(config, ModelConfig::Inr { .. }) {
            cfg.epochs = 7000;
        }
        cfg
    }

    fn validate(&self, needs_splits: bool) -> Result<()> {
        if !(self.cv_fraction > 0.0 && self.cv_fraction < 0.5) {
            return Err(GhostError::invalid(format!(
                "cv_fraction must be in (0, 0.5), got {}",
                self.cv_fraction
            )));
        }
        if self.lambda < 0.0 {
            return Err(GhostError::invalid("lambda must be >= 0"));
        }
        if needs_splits && self.splits < 2 {
            return Err(GhostError::invalid(
                "self-supervised splitting needs at least K = 2",
            ));
        }
        if needs_splits && self.permutations == 0 {
            return Err(GhostError::invalid("permutations must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainTrace {
    pub train_loss: Vec<f64>,
    /// Data-fit part of the training loss (no regularizer).
    pub data_loss: Vec<f64>,
    pub cv_loss: Vec<f64>,
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,data_loss,cv_loss\n");
        for i in 0..self.train_loss.len() {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e}\n",
                i + 1,
                self.train_loss[i],
                self.data_loss[i],
                self.cv_loss[i]
            ));
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportSeeds {
    pub train_seed: u64,
    pub model_seed: u64,
}

/// Reconstruction output plus everything needed to reproduce it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconReport {
    pub method: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub trace: Option<TrainTrace>,
    pub config: serde_json::Value,
    pub seeds: ReportSeeds,
    pub metrics: Option<crate::metrics::MetricBundle>,
}

impl ReconReport {
    pub fn image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.clone(),
        }
    }

    fn from_image(method: &str, image: Image, config: serde_json::Value, seed: u64) -> Self {
        ReconReport {
            method: method.to_string(),
            height: image.height,
            width: image.width,
            pixels: image.pixels,
            trace: None,
            config,
            seeds: ReportSeeds {
                train_seed: seed,
                model_seed: seed,
            },
            metrics: None,
        }
    }
}

// ── cross-validation hold-out ───────────────────────────────────────

pub(crate) struct CvPartition {
    pub train_masks: MaskSet,
    pub train_buckets: BucketVector,
    pub cv_masks: MaskSet,
    pub cv_buckets: Vec<f64>,
}

/// Hold out round(cv_fraction * M) realizations (at least 1), chosen by a
/// seeded shuffle; `repeat` selects independent hold-out sets.
pub(crate) fn cv_partition(
    masks: &MaskSet,
    buckets: &BucketVector,
    cfg: &TrainConfig,
    repeat: u64,
) -> Result<CvPartition> {
    let m = masks.count;
    let cv_count = ((cfg.cv_fraction * m as f64).round() as usize).clamp(1, m - 1);
    let mut idx: Vec<usize> = (0..m).collect();
    let mut rng = Rng64::from_seed_stream(cfg.seed, STREAM_CV + repeat);
    for i in (1..m).rev() {
        let j = rng.below(i + 1);
        idx.swap(i, j);
    }
    let (cv_idx, train_idx) = idx.split_at(cv_count);
    let mut cv_idx = cv_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    cv_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(CvPartition {
        train_masks: masks.subset(&train_idx),
        train_buckets: buckets.subset(&train_idx),
        cv_masks: masks.subset(&cv_idx),
        cv_buckets: cv_idx.iter().map(|&i| buckets.values[i]).collect(),
    })
}

fn bucket_loss(masks: &MaskSet, targets: &[f64], image: &[f64]) -> f64 {
    let n = masks.pixel_count();
    let mut acc = 0.0f64;
    for (m, t) in targets.iter().enumerate() {
        let row = &masks.data[m * n..(m + 1) * n];
        let mut proj = 0.0f64;
        for (w, x) in row.iter().zip(image.iter()) {
            proj += w * x;
        }
        let d = proj - t;
        acc += d * d;
    }
    acc
}

// ── network input / subproblem plumbing ─────────────────────────────

enum NetInput {
    /// Normalized image input; the affine transform is inverted on output.
    Image {
        normalized: Vec<f64>,
        mean: f64,
        std: f64,
    },
    /// Precomputed Fourier features for the INR (constant).
    Features { values: Arc<Vec<f64>>, cols: usize },
}

struct SubProblem {
    input: NetInput,
    /// (projection matrix, rows, targets) pairs for bucket-domain terms.
    bucket_targets: Vec<(Arc<Vec<f64>>, usize, Arc<Vec<f64>>)>,
    /// Image-domain target (Noise2Inverse).
    image_target: Option<Arc<Vec<f64>>>,
    use_tv: bool,
}

fn normalized_input(image: &Image) -> NetInput {
    let mean = image.mean();
    let std = image.std().max(1e-12);
    NetInput::Image {
        normalized: image.pixels.iter().map(|&p| (p - mean) / std).collect(),
        mean,
        std,
    }
}

struct PassOutput {
    total_loss: f64,
    data_loss: f64,
    output: Vec<f64>,
    grads: Option<Vec<Vec<f64>>>,
}

/// One forward (and optionally backward) pass of a subproblem on an f32
/// tape. Inner reductions are 64-bit and ordered, so the result does not
/// depend on the thread count.
fn subproblem_pass(
    model: &Model,
    params: &[Vec<f64>],
    sp: &SubProblem,
    lambda: f64,
    height: usize,
    width: usize,
    need_grad: bool,
) -> Result<PassOutput> {
    let mut tape: Tape<f32> = Tape::new();
    let param_ids: Vec<NodeId> = model
        .params
        .iter()
        .zip(params.iter())
        .map(|(p, v)| tape.leaf_from_f64(&p.shape, v, need_grad))
        .collect();
    let out_image = match &sp.input {
        NetInput::Image {
            normalized,
            mean,
            std,
        } => {
            let input = tape.leaf_from_f64(&[1, height, width], normalized, false);
            let raw = forward_on_tape(model, &mut tape, &param_ids, input)?;
            tape.affine(raw, *std, *mean)
        }
        NetInput::Features { values, cols } => {
            let rows = height * width;
            let input = tape.leaf_from_f64(&[rows, *cols], values, false);
            let raw = forward_on_tape(model, &mut tape, &param_ids, input)?;
            tape.reshape(raw, &[1, height, width])?
        }
    };
    let flat = tape.reshape(out_image, &[height * width])?;

    let mut data_terms: Vec<NodeId> = Vec::new();
    for (matrix, rows, targets) in &sp.bucket_targets {
        let proj = tape.matmul_const(flat, Arc::clone(matrix), *rows, height * width)?;
        let term = tape.sum_sq_diff_const(proj, Arc::clone(targets))?;
        data_terms.push(term);
    }
    if let Some(target) = &sp.image_target {
        let term = tape.sum_sq_diff_const(flat, Arc::clone(target))?;
        data_terms.push(term);
    }
    let mut data_sum = data_terms[0];
    for term in &data_terms[1..] {
        data_sum = tape.add(data_sum, *term)?;
    }
    let data = tape.scale(data_sum, 0.5);
    let total = if sp.use_tv && lambda > 0.0 {
        let tv = tape.tv_loss(out_image, TRAIN_TV_EPS)?;
        let tv_scaled = tape.scale(tv, lambda);
        tape.add(data, tv_scaled)?
    } else {
        data
    };

    let total_loss = tape.scalar(total);
    if !total_loss.is_finite() {
        return Err(GhostError::non_finite("training loss"));
    }
    let grads = if need_grad {
        let g = tape.backward(total);
        Some(
            param_ids
                .iter()
                .map(|id| {
                    g.get(*id)
                        .map(|s| s.to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.values(*id).len()])
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(PassOutput {
        total_loss,
        data_loss: tape.scalar(data),
        output: tape.values_f64(out_image),
        grads,
    })
}

// ── shared training loop ────────────────────────────────────────────

struct TrainOutcome {
    image: Image,
    trace: TrainTrace,
}

fn run_training(
    context: &str,
    model: &mut Model,
    subproblems: &[SubProblem],
    cfg: &TrainConfig,
    cv: &CvPartition,
    height: usize,
    width: usize,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut params = model.param_values();
    let param_lens: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(&param_lens, cfg.lr, cfg.weight_decay);

    let mut trace = TrainTrace {
        train_loss: Vec::with_capacity(cfg.epochs),
        data_loss: Vec::with_capacity(cfg.epochs),
        cv_loss: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        wall_time_s: 0.0,
    };
    let mut best_cv = f64::INFINITY;
    let mut best_params = params.clone();

    for epoch in 0..cfg.epochs {
        let passes: Result<Vec<PassOutput>> = subproblems
            .par_iter()
            .map(|sp| subproblem_pass(model, &params, sp, cfg.lambda, height, width, true))
            .collect();
        let passes = passes.map_err(|e| match e {
            GhostError::NonFinite { context: c } => GhostError::NonFinite {
                context: format!("{context}: {c} at epoch {epoch}"),
            },
            other => other,
        })?;

        // fixed-order accumulation across subproblems
        let mut total = 0.0f64;
        let mut data = 0.0f64;
        let mut grads: Vec<Vec<f64>> = param_lens.iter().map(|&n| vec![0.0; n]).collect();
        let mut prediction = vec![0.0f64; height * width];
        for pass in &passes {
            total += pass.total_loss;
            data += pass.data_loss;
            for (acc, g) in grads.iter_mut().zip(pass.grads.as_ref().unwrap().iter()) {
                for (a, b) in acc.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
            for (p, o) in prediction.iter_mut().zip(pass.output.iter()) {
                *p += o;
            }
        }
        let inv = 1.0 / subproblems.len() as f64;
        prediction.iter_mut().for_each(|p| *p *= inv);

        let cv_loss = bucket_loss(&cv.cv_masks, &cv.cv_buckets, &prediction);
        trace.train_loss.push(total);
        trace.data_loss.push(data);
        trace.cv_loss.push(cv_loss);
        if cv_loss < best_cv {
            best_cv = cv_loss;
            best_params = params.clone();
            trace.best_epoch = epoch;
        }
        adam.step(&mut params, &grads);
    }

    // rebuild the prediction at the best-CV parameters
    model.set_param_values(&best_params);
    let finals: Result<Vec<PassOutput>> = subproblems
        .par_iter()
        .map(|sp| subproblem_pass(model, &best_params, sp, cfg.lambda, height, width, false))
        .collect();
    let finals = finals?;
    let mut prediction = vec![0.0f64; height * width];
    for pass in &finals {
        for (p, o) in prediction.iter_mut().zip(pass.output.iter()) {
            *p += o;
        }
    }
    let inv = 1.0 / subproblems.len() as f64;
    prediction.iter_mut().for_each(|p| *p *= inv);
    trace.wall_time_s = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        image: Image::new(height, width, prediction)?,
        trace,
    })
}

fn config_snapshot(method: &str, model: Option<&ModelConfig>, train: &TrainConfig) -> serde_json::Value {
    serde_json::json!({
        "method": method,
        "model": model,
        "train": train,
    })
}

// ── public engines ──────────────────────────────────────────────────

/// Plain least-squares (pseudo-inverse) reconstruction as a report.
pub fn ls_reconstruct(masks: &MaskSet, buckets: &BucketVector, cgls: &CglsConfig) -> Result<ReconReport> {
    let image = cgls_reconstruct(masks, buckets, cgls)?;
    Ok(ReconReport::from_image(
        "ls",
        image,
        serde_json::json!({"method": "ls", "cgls": cgls}),
        0,
    ))
}

/// TV-regularized variational reconstruction as a report.
pub fn tv_reconstruct(
    masks: &MaskSet,
    buckets: &BucketVector,
    config: &VariationalConfig,
) -> Result<ReconReport> {
    let image = tv_min_reconstruct(masks, buckets, config)?;
    Ok(ReconReport::from_image(
        "tv",
        image,
        serde_json::json!({"method": "tv", "variational": config}),
        0,
    ))
}

/// Deep-image-prior reconstruction (GIDC): trains the generator to fit the
/// measured buckets through the forward model, early-stopped on held-out
/// realizations. INR model configs run the same objective with coordinate
/// input; the report is tagged "inr" in that case.
pub fn gidc_reconstruct(
    masks: &MaskSet,
    buckets: &BucketVector,
    model_config: &ModelConfig,
    train: &TrainConfig,
) -> Result<ReconReport> {
    train.validate(false)?;
    let (height, width) = (masks.height, masks.width);
    let cv = cv_partition(masks, buckets, train, 0)?;
    let mut model = build_model(model_config, train.seed)?;

    let input = if model_config.takes_image_input() {
        let ls = cgls_reconstruct(&cv.train_masks, &cv.train_buckets, &train.cgls)?;
        normalized_input(&ls)
    } else {
        let freqs = &model.constants[0];
        let coords = crate::models::coordinate_grid(height, width);
        let feats = crate::models::fourier_features(&coords, &freqs.values, freqs.shape[0]);
        NetInput::Features {
            cols: 2 * freqs.shape[0],
            values: Arc::new(feats),
        }
    };
    let sp = SubProblem {
        input,
        bucket_targets: vec![(
            Arc::new(cv.train_masks.data.clone()),
            cv.train_masks.count,
            Arc::new(cv.train_buckets.values.clone()),
        )],
        image_target: None,
        use_tv: true,
    };
    let method = if model_config.takes_image_input() {
        "gidc"
    } else {
        "inr"
    };
    let outcome = run_training(method, &mut model, &[sp], train, &cv, height, width)?;
    Ok(ReconReport {
        method: method.into(),
        height,
        width,
        pixels: outcome.image.pixels,
        trace: Some(outcome.trace),
        config: config_snapshot(method, Some(model_config), train),
        seeds: ReportSeeds {
            train_seed: train.seed,
            model_seed: train.seed,
        },
        metrics: None,
    })
}

/// Split indices i != k within permutation p: the cross-split targets for
/// sub-reconstruction (p, k). The (k, i = k) term is never present.
pub fn cross_split_target_indices(plan: &PartitionPlan, k: usize) -> Vec<usize> {
    (0..plan.splits).filter(|&i| i != k).collect()
}

/// Noise2Ghost reconstruction (cross-split bucket-domain self-supervision
/// with permutation augmentation).
pub fn n2g_reconstruct(
    masks: &MaskSet,
    buckets: &BucketVector,
    model_config: &ModelConfig,
    train: &TrainConfig,
) -> Result<ReconReport> {
    train.validate(true)?;
    if !model_config.takes_image_input() {
        return Err(GhostError::invalid(
            "noise2ghost needs an image-to-image model; coordinate INRs cannot take sub-reconstructions as input",
        ));
    }
    let (height, width) = (masks.height, masks.width);
    let estimate = activation_bytes_estimate(model_config, height, width, 4)
        * train.splits
        * train.permutations;
    if estimate > train.memory_budget_bytes {
        return Err(GhostError::MemoryBudget {
            estimate_bytes: estimate,
            budget_bytes: train.memory_budget_bytes,
        });
    }
    let cv = cv_partition(masks, buckets, train, 0)?;
    let (plan, subs) = permuted_splits(
        &cv.train_masks,
        &cv.train_buckets,
        train.splits,
        train.permutations,
        train.seed,
    )?;
    let sub_images = sub_reconstruct_all(&subs, &train.cgls)?;

    // per-(p, i) projection matrices and targets, shared across subproblems
    let k = plan.splits;
    let projections: Vec<(Arc<Vec<f64>>, usize, Arc<Vec<f64>>)> = subs
        .iter()
        .map(|s| {
            (
                Arc::new(s.masks.data.clone()),
                s.masks.count,
                Arc::new(s.buckets.values.clone()),
            )
        })
        .collect();

    let mut subproblems = Vec::with_capacity(subs.len());
    for (idx, image) in sub_images.iter().enumerate() {
        let p = idx / k;
        let split = idx % k;
        let bucket_targets = cross_split_target_indices(&plan, split)
            .into_iter()
            .map(|i| projections[p * k + i].clone())
            .collect();
        subproblems.push(SubProblem {
            input: normalized_input(image),
            bucket_targets,
            image_target: None,
            use_tv: true,
        });
    }

    let mut model = build_model(model_config, train.seed)?;
    let outcome = run_training("n2g", &mut model, &subproblems, train, &cv, height, width)?;
    Ok(ReconReport {
        method: "n2g".into(),
        height,
        width,
        pixels: outcome.image.pixels,
        trace: Some(outcome.trace),
        config: config_snapshot("n2g", Some(model_config), train),
        seeds: ReportSeeds {
            train_seed: train.seed,
            model_seed: train.seed,
        },
        metrics: None,
    })
}

/// Noise2Inverse baseline: each split's reconstruction is trained toward
/// the mean of the other splits' reconstructions, entirely in image space.
pub fn n2i_reconstruct(
    masks: &MaskSet,
    buckets: &BucketVector,
    model_config: &ModelConfig,
    train: &TrainConfig,
) -> Result<ReconReport> {
    train.validate(true)?;
    if !model_config.takes_image_input() {
        return Err(GhostError::invalid(
            "noise2inverse needs an image-to-image model",
        ));
    }
    let (height, width) = (masks.height, masks.width);
    let cv = cv_partition(masks, buckets, train, 0)?;
    let (plan, subs) = permuted_splits(&cv.train_masks, &cv.train_buckets, train.splits, 1, train.seed)?;
    let sub_images = sub_reconstruct_all(&subs, &train.cgls)?;

    let n = height * width;
    let mut subproblems = Vec::with_capacity(plan.splits);
    for split in 0..plan.splits {
        let others = cross_split_target_indices(&plan, split);
        let mut target = vec![0.0; n];
        for &i in &others {
            for (t, v) in target.iter_mut().zip(sub_images[i].pixels.iter()) {
                *t += v;
            }
        }
        let inv = 1.0 / others.len() as f64;
        target.iter_mut().for_each(|t| *t *= inv);
        subproblems.push(SubProblem {
            input: normalized_input(&sub_images[split]),
            bucket_targets: Vec::new(),
            image_target: Some(Arc::new(target)),
            use_tv: false,
        });
    }

    let mut model = build_model(model_config, train.seed)?;
    let outcome = run_training("n2i", &mut model, &subproblems, train, &cv, height, width)?;
    Ok(ReconReport {
        method: "n2i".into(),
        height,
        width,
        pixels: outcome.image.pixels,
        trace: Some(outcome.trace),
        config: config_snapshot("n2i", Some(model_config), train),
        seeds: ReportSeeds {
            train_seed: train.seed,
            model_seed: train.seed,
        },
        metrics: None,
    })
}

// ── lambda cross-validation ─────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ls,
    Tv,
    Gidc,
    N2i,
    N2g,
    Inr,
}

impl std::str::FromStr for Method {
    type Err = GhostError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ls" => Ok(Method::Ls),
            "tv" => Ok(Method::Tv),
            "gidc" => Ok(Method::Gidc),
            "n2i" => Ok(Method::N2i),
            "n2g" => Ok(Method::N2g),
            "inr" => Ok(Method::Inr),
            other => Err(GhostError::invalid(format!("unknown method {other:?}"))),
        }
    }
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ls => "ls",
            Method::Tv => "tv",
            Method::Gidc => "gidc",
            Method::N2i => "n2i",
            Method::N2g => "n2g",
            Method::Inr => "inr",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub lambdas: Vec<f64>,
    pub mean_cv_losses: Vec<f64>,
    pub best_lambda: f64,
}

/// Minimal CV loss of one training run at a given lambda and hold-out set.
fn min_cv_loss_for(
    method: Method,
    masks: &MaskSet,
    buckets: &BucketVector,
    model_config: &ModelConfig,
    train: &TrainConfig,
    tv_iterations: usize,
    repeat: u64,
) -> Result<f64> {
    match method {
        Method::Tv => {
            let cv = cv_partition(masks, buckets, train, repeat)?;
            let image = tv_min_reconstruct(
                &cv.train_masks,
                &cv.train_buckets,
                &VariationalConfig {
                    lambda: train.lambda,
                    iterations: tv_iterations,
                    step_ratio: 1.0,
                },
            )?;
            Ok(bucket_loss(&cv.cv_masks, &cv.cv_buckets, &image.pixels))
        }
        Method::Gidc | Method::Inr | Method::N2g | Method::N2i => {
            // independent hold-out per repeat, folded into the seed
            let mut cfg = train.clone();
            cfg.seed = train.seed.wrapping_add(repeat.wrapping_mul(0x9E37_79B9));
            let report = match method {
                Method::Gidc | Method::Inr => gidc_reconstruct(masks, buckets, model_config, &cfg)?,
                Method::N2g => n2g_reconstruct(masks, buckets, model_config, &cfg)?,
                _ => n2i_reconstruct(masks, buckets, model_config, &cfg)?,
            };
            let trace = report.trace.expect("learned methods always carry a trace");
            Ok(trace
                .cv_loss
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min))
        }
        Method::Ls => Err(GhostError::invalid(
            "least squares has no regularization weight to cross-validate",
        )),
    }
}

/// Grid search over lambda: averages the minimal CV loss over
/// `cv_repeats` independent hold-out sets and returns the argmin
/// (ties broken toward the larger lambda).
pub fn cross_validate_lambda(
    masks: &MaskSet,
    buckets: &BucketVector,
    method: Method,
    grid: &[f64],
    model_config: &ModelConfig,
    train: &TrainConfig,
    tv_iterations: usize,
) -> Result<LambdaSearch> {
    if grid.is_empty() {
        return Err(GhostError::invalid("lambda grid must be non-empty"));
    }
    let mut lambdas = grid.to_vec();
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut mean_cv_losses = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let mut cfg = train.clone();
        cfg.lambda = lambda;
        let mut acc = 0.0;
        for repeat in 0..train.cv_repeats.max(1) {
            let loss = min_cv_loss_for(
                method,
                masks,
                buckets,
                model_config,
                &cfg,
                tv_iterations,
                repeat as u64,
            )?;
            if !loss.is_finite() {
                return Err(GhostError::non_finite(format!(
                    "cv loss at lambda {lambda}"
                )));
            }
            acc += loss;
        }
        mean_cv_losses.push(acc / train.cv_repeats.max(1) as f64);
    }
    let mut best = 0;
    for i in 1..lambdas.len() {
        if mean_cv_losses[i] <= mean_cv_losses[best] {
            best = i; // <= prefers the larger lambda on ties
        }
    }
    Ok(LambdaSearch {
        best_lambda: lambdas[best],
        lambdas,
        mean_cv_losses,
    })
}

// ── noise decomposition probe ───────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecompositionProbe {
    /// Monte-Carlo mean of |W z - y|^2 over fresh noise draws.
    pub empirical_loss: f64,
    /// Standard error of that mean.
    pub empirical_se: f64,
    /// |W z - b|^2 (the supervised reconstruction error).
    pub supervised_loss: f64,
    /// E |eps|^2 = sum(b) / C under the photon model.
    pub noise_variance: f64,
    /// supervised_loss + noise_variance.
    pub predicted_loss: f64,
}

/// Expected noise energy E|eps|^2 of the photon model on clean buckets.
pub fn expected_noise_energy(clean: &[f64], max_photons: f64) -> f64 {
    clean.iter().sum::<f64>() / max_photons
}

/// Monte-Carlo check of the expected-loss decomposition
/// E|W z - y|^2 = |W z - b|^2 + E|eps|^2 for a fixed image z.
pub fn loss_decomposition_probe(
    fixed_output: &Image,
    target_masks: &MaskSet,
    clean_targets: &[f64],
    model: &NoiseModel,
    repeats: usize,
) -> Result<DecompositionProbe> {
    if repeats < 2 {
        return Err(GhostError::invalid("probe needs at least 2 repeats"));
    }
    let clean = BucketVector::clean_only(clean_targets.to_vec());
    let supervised = bucket_loss(target_masks, clean_targets, &fixed_output.pixels);
    let noise_variance = expected_noise_energy(clean_targets, model.max_photons);

    let losses: Result<Vec<f64>> = (0..repeats)
        .into_par_iter()
        .map(|rep| {
            let draw_model = NoiseModel {
                max_photons: model.max_photons,
                seed: model.seed.wrapping_add(rep as u64),
            };
            let noisy = apply_poisson(&clean, &draw_model)?;
            Ok(bucket_loss(target_masks, &noisy.values, &fixed_output.pixels))
        })
        .collect();
    let losses = losses?;
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1.0);
    Ok(DecompositionProbe {
        empirical_loss: mean,
        empirical_se: (var / n).sqrt(),
        supervised_loss: supervised,
        noise_variance,
        predicted_loss: supervised + noise_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{forward_project, generate_masks, generate_phantom, PhantomKind};

    fn tiny_setup(m: usize, size: usize, seed: u64) -> (MaskSet, BucketVector, Image) {
        let masks = generate_masks(m, size, size, seed).unwrap();
        let phantom = generate_phantom(PhantomKind::Disks, size, size, seed + 1).unwrap();
        let buckets = forward_project(&masks, &phantom).unwrap();
        (masks, buckets, phantom)
    }

    #[test]
    fn cv_partition_disjoint_and_sized() {
        let (masks, buckets, _) = tiny_setup(20, 8, 3);
        let cfg = TrainConfig::new(7);
        let cv = cv_partition(&masks, &buckets, &cfg, 0).unwrap();
        assert_eq!(cv.cv_masks.count, 2); // 10% of 20
        assert_eq!(cv.train_masks.count, 18);
    }

    #[test]
    fn zero_epochs_returns_initial_network_output() {
        let (masks, buckets, _) = tiny_setup(24, 8, 5);
        let mut cfg = TrainConfig::new(11);
        cfg.epochs = 0;
        cfg.lambda = 0.0;
        let model_cfg = ModelConfig::Unet {
            features: 4,
            levels: 2,
        };
        let report = gidc_reconstruct(&masks, &buckets, &model_cfg, &cfg).unwrap();
        // reproduce by hand: normalized LS input through the fresh model
        let cv = cv_partition(&masks, &buckets, &cfg, 0).unwrap();
        let ls = cgls_reconstruct(&cv.train_masks, &cv.train_buckets, &cfg.cgls).unwrap();
        let model = build_model(&model_cfg, cfg.seed).unwrap();
        let mean = ls.mean();
        let std = ls.std().max(1e-12);
        let normalized = Image::new(
            8,
            8,
            ls.pixels.iter().map(|&p| (p - mean) / std).collect(),
        )
        .unwrap();
        let raw = model.forward_image(&normalized).unwrap();
        for (a, b) in report.pixels.iter().zip(raw.pixels.iter()) {
            let expected = b * std + mean;
            assert!((a - expected).abs() < 1e-4, "{a} vs {expected}");
        }
    }

    #[test]
    fn cross_split_targets_exclude_self() {
        let (masks, buckets, _) = tiny_setup(16, 8, 9);
        let (plan, _) = permuted_splits(&masks, &buckets, 4, 2, 3).unwrap();
        for k in 0..4 {
            let targets = cross_split_target_indices(&plan, k);
            assert_eq!(targets.len(), 3);
            assert!(!targets.contains(&k));
        }
    }

    #[test]
    fn n2g_rejects_inr_models() {
        let (masks, buckets, _) = tiny_setup(16, 8, 9);
        let cfg = TrainConfig::new(1);
        let err = n2g_reconstruct(&masks, &buckets, &ModelConfig::inr_default(), &cfg);
        assert!(err.is_err());
    }

    #[test]
    fn n2g_memory_budget_enforced() {
        let (masks, buckets, _) = tiny_setup(16, 8, 9);
        let mut cfg = TrainConfig::new(1);
        cfg.memory_budget_bytes = 1024;
        let err = n2g_reconstruct(
            &masks,
            &buckets,
            &ModelConfig::Unet {
                features: 4,
                levels: 2,
            },
            &cfg,
        );
        match err {
            Err(GhostError::MemoryBudget { .. }) => {}
            other => panic!("expected memory budget error, got {other:?}"),
        }
    }

    #[test]
    fn single_point_grid_returns_it() {
        let (masks, buckets, _) = tiny_setup(24, 8, 2);
        let mut cfg = TrainConfig::new(5);
        cfg.cv_repeats = 1;
        let search = cross_validate_lambda(
            &masks,
            &buckets,
            Method::Tv,
            &[3e-3],
            &ModelConfig::unet_default(),
            &cfg,
            120,
        )
        .unwrap();
        assert_eq!(search.best_lambda, 3e-3);
        assert_eq!(search.mean_cv_losses.len(), 1);
    }
}
