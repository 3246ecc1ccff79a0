//! Training loops and experiment drivers: supervised EF regression,
//! contrastive pre-training, fine-tuning/probing, evaluation, the
//! limited-label learning curve and a cost benchmark.
//!
//! Training runs in f32. All randomness flows from the config seed through
//! ChaCha streams keyed on (seed, purpose, patient/epoch/batch), so a rerun
//! with the same config reproduces checkpoints bitwise.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data_model::{load_video, subsample_train, Manifest, Split, VideoTensor};
use crate::error::{Error, Result};
use crate::losses::combined_cl_loss;
use crate::metrics::{evaluate_predictions, EvalReport};
use crate::mmode::{extract_stack, ClipPolicy, MModeStack};
use crate::model::{
    batch_from_stacks, contrastive_batch, forward_contrastive_batch, forward_supervised_batch,
    ModelBundle,
};
use crate::nn::{Adam, BoundParams, ParamStore, Schedule};
use crate::tensor::Graph;

type F = f32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: Option<f64>,
}

/// Config echo plus the per-epoch trace of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config: TrainConfig,
    pub epochs: Vec<EpochStats>,
    /// Epoch whose validation MAE selected the returned parameters.
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub patient_id: String,
    pub true_ef: f64,
    pub pred_ef: f64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent ChaCha stream keyed on (seed, purpose tag, a, b).
fn keyed_rng(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(tag.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Epoch tag for the deterministic evaluation clip draw.
const EVAL_EPOCH: u64 = u64::MAX;

/// Serves per-patient M-mode stacks for an epoch. Full clips are extracted
/// once and cached; short clips are re-drawn from the video every epoch,
/// seeded by (config seed, patient id, epoch).
pub struct StackProvider<'a> {
    manifest: &'a Manifest,
    m: usize,
    policy: ClipPolicy,
    seed: u64,
    /// Full clips are deterministic, so the extracted stacks are cached.
    stack_cache: Option<HashMap<String, MModeStack>>,
    /// Short clips are re-drawn every epoch; keep the decoded videos in
    /// memory so only the extraction is repeated.
    video_cache: HashMap<String, VideoTensor>,
}

impl<'a> StackProvider<'a> {
    pub fn new(manifest: &'a Manifest, m: usize, policy: ClipPolicy, seed: u64) -> Self {
        let stack_cache = match policy {
            ClipPolicy::Full112 => Some(HashMap::new()),
            ClipPolicy::Short32Period2 => None,
        };
        StackProvider { manifest, m, policy, seed, stack_cache, video_cache: HashMap::new() }
    }

    fn load_missing_videos(&mut self, ids: &[String]) -> Result<()> {
        let missing: Vec<String> =
            ids.iter().filter(|id| !self.video_cache.contains_key(*id)).cloned().collect();
        let manifest = self.manifest;
        let fresh: Vec<(String, VideoTensor)> = missing
            .par_iter()
            .map(|id| Ok((id.clone(), load_video(manifest.video_path(id))?)))
            .collect::<Result<_>>()?;
        self.video_cache.extend(fresh);
        Ok(())
    }

    pub fn stacks(&mut self, ids: &[String], epoch: u64) -> Result<Vec<MModeStack>> {
        let (m, policy, seed) = (self.m, self.policy, self.seed);
        if self.stack_cache.is_some() {
            let missing: Vec<String> = {
                let cache = self.stack_cache.as_ref().expect("checked");
                ids.iter().filter(|id| !cache.contains_key(*id)).cloned().collect()
            };
            self.load_missing_videos(&missing)?;
            let videos = &self.video_cache;
            let fresh: Vec<(String, MModeStack)> = missing
                .par_iter()
                .map(|id| {
                    let mut rng = keyed_rng(seed, "clip", fnv1a(id.as_bytes()), 0);
                    Ok((id.clone(), extract_stack(&videos[id], m, policy, &mut rng)?))
                })
                .collect::<Result<_>>()?;
            let cache = self.stack_cache.as_mut().expect("checked");
            cache.extend(fresh);
            // the deterministic stacks are what we serve from now on
            self.video_cache.clear();
            let cache = self.stack_cache.as_ref().expect("checked");
            return Ok(ids.iter().map(|id| cache[id].clone()).collect());
        }
        self.load_missing_videos(ids)?;
        let videos = &self.video_cache;
        ids.par_iter()
            .map(|id| {
                let mut rng = keyed_rng(seed, "clip", fnv1a(id.as_bytes()), epoch);
                extract_stack(&videos[id], m, policy, &mut rng)
            })
            .collect()
    }
}

fn grads_for<Fv: crate::tensor::Scalar>(
    g: &mut Graph<Fv>,
    store: &ParamStore<Fv>,
    binding: &crate::nn::Binding,
) -> Vec<Option<ArrayD<Fv>>> {
    (0..store.len()).map(|i| g.take_grad(binding.var(i))).collect()
}

/// Batched EF predictions for a list of patients, using the deterministic
/// evaluation clip draw.
pub fn predict_ids(
    bundle: &ModelBundle<F>,
    manifest: &Manifest,
    ids: &[String],
    policy: ClipPolicy,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut provider = StackProvider::new(manifest, bundle.arch.fusion.m, policy, seed);
    let mut preds = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch_size.max(1)) {
        let stacks = provider.stacks(chunk, EVAL_EPOCH)?;
        let x = batch_from_stacks::<F>(&stacks, &bundle.arch.fusion)?;
        let mut g = Graph::<F>::new();
        let binding = bundle.params.bind(&mut g);
        let params = BoundParams { store: &bundle.params, binding: &binding };
        let xv = g.leaf(x);
        let y = forward_supervised_batch(&mut g, &params, &bundle.arch, xv)?;
        preds.extend(g.value(y).iter().map(|&v| v as f64));
    }
    Ok(preds)
}

struct SupervisedOutcome {
    history: TrainHistory,
}

/// Shared supervised optimization: regression on the train split with the
/// given epoch budget, best-validation-MAE parameter selection (falling
/// back to the final epoch when the validation split is empty).
fn supervised_loop(
    bundle: &mut ModelBundle<F>,
    manifest: &Manifest,
    cfg: &TrainConfig,
    epochs: usize,
    freeze_encoder: bool,
) -> Result<SupervisedOutcome> {
    let train_ids = manifest.split_ids(Split::Train);
    if train_ids.is_empty() {
        return Err(Error::data("train split is empty"));
    }
    let val_ids = manifest.split_ids(Split::Val);
    let targets: HashMap<String, f64> = manifest
        .records
        .iter()
        .map(|r| (r.patient_id.clone(), r.ef))
        .collect();
    let val_truth: Vec<f64> = val_ids.iter().map(|id| targets[id]).collect();

    let mut provider = StackProvider::new(manifest, cfg.m, cfg.clip, cfg.seed);
    let mut adam = if freeze_encoder {
        Adam::with_frozen_prefix(&bundle.params, cfg.lr_sup, Schedule::Constant, "enc.")
    } else {
        Adam::all_trainable(&bundle.params, cfg.lr_sup, Schedule::Constant)
    };
    bundle.freeze_encoder = freeze_encoder;

    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, ParamStore<F>)> = None;
    for epoch in 0..epochs {
        let mut order = train_ids.clone();
        order.shuffle(&mut keyed_rng(cfg.seed, "order", epoch as u64, 0));
        let mut loss_sum = 0.0;
        let mut n_seen = 0usize;
        for batch in order.chunks(cfg.bsz_sup) {
            let stacks = provider.stacks(batch, epoch as u64)?;
            let x = batch_from_stacks::<F>(&stacks, &bundle.arch.fusion)?;
            let y_true = ArrayD::from_shape_vec(
                IxDyn(&[batch.len(), 1]),
                batch.iter().map(|id| targets[id] as F).collect(),
            )
            .expect("target shape");
            let mut g = Graph::<F>::new();
            let binding = bundle.params.bind(&mut g);
            {
                let params = BoundParams { store: &bundle.params, binding: &binding };
                let xv = g.leaf(x);
                let pred = forward_supervised_batch(&mut g, &params, &bundle.arch, xv)?;
                let loss = g.mse(pred, &y_true)?;
                loss_sum += g.scalar_value(loss) as f64 * batch.len() as f64;
                n_seen += batch.len();
                g.backward(loss);
            }
            let grads = grads_for(&mut g, &bundle.params, &binding);
            adam.step(&mut bundle.params, &grads, epoch)?;
        }
        let train_loss = loss_sum / n_seen as f64;
        let val_mae = if val_ids.is_empty() {
            None
        } else {
            let preds = predict_ids(bundle, manifest, &val_ids, cfg.clip, cfg.seed, cfg.bsz_sup)?;
            Some(crate::metrics::mae(&preds, &val_truth)?)
        };
        if let Some(mae) = val_mae {
            if best.as_ref().map_or(true, |(b, _, _)| mae < *b) {
                best = Some((mae, epoch, bundle.params.clone()));
            }
        }
        log::info!(
            "epoch {epoch}: train mse {train_loss:.6}, val mae {}",
            val_mae.map_or("n/a".into(), |m| format!("{m:.4}"))
        );
        history.push(EpochStats { epoch, train_loss, val_mae });
    }
    let best_epoch = best.as_ref().map(|(_, e, _)| *e);
    if let Some((_, _, params)) = best {
        bundle.params = params;
    }
    Ok(SupervisedOutcome {
        history: TrainHistory { config: cfg.clone(), epochs: history, best_epoch },
    })
}

/// End-to-end supervised EF regression. Honors `label_fraction` by
/// subsampling the train split before training.
pub fn train_supervised(manifest: &Manifest, cfg: &TrainConfig) -> Result<(ModelBundle<F>, TrainHistory)> {
    cfg.validate()?;
    let manifest = subsample_train(manifest, cfg.label_fraction, cfg.seed)?;
    let mut bundle = ModelBundle::init(cfg.arch()?, cfg.seed)?;
    let outcome = supervised_loop(&mut bundle, &manifest, cfg, cfg.epochs_sup, false)?;
    Ok((bundle, outcome.history))
}

/// Contrastive pre-training. EF labels are never read; only patient ids
/// and videos. Uses the combined patient/structure-aware loss with linear
/// learning-rate warm-up.
pub fn pretrain_contrastive(
    manifest: &Manifest,
    cfg: &TrainConfig,
) -> Result<(ModelBundle<F>, TrainHistory)> {
    cfg.validate()?;
    let train_ids = manifest.split_ids(Split::Train);
    if train_ids.len() < 2 {
        return Err(Error::data("contrastive pre-training needs >= 2 train patients"));
    }
    let arch = cfg.pretrain_arch()?;
    let mut bundle = ModelBundle::<F>::init(arch, cfg.seed)?;
    let mut provider = StackProvider::new(manifest, cfg.m, cfg.clip, cfg.seed);
    let schedule = Schedule::LinearWarmup { warmup_epochs: cfg.warmup_epochs };
    let mut adam = Adam::all_trainable(&bundle.params, cfg.lr_cl, schedule);
    let aug = cfg.augment_config();
    aug.validate()?;

    let mut history = Vec::with_capacity(cfg.epochs_cl);
    for epoch in 0..cfg.epochs_cl {
        let mut order = train_ids.clone();
        order.shuffle(&mut keyed_rng(cfg.seed, "cl-order", epoch as u64, 0));
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (bi, batch) in order.chunks(cfg.bsz_cl).enumerate() {
            if batch.len() < 2 {
                log::warn!("skipping contrastive batch with {} patient(s)", batch.len());
                continue;
            }
            let stacks = provider.stacks(batch, epoch as u64)?;
            let mut aug_rng = keyed_rng(cfg.seed, "aug", epoch as u64, bi as u64);
            let x = contrastive_batch::<F>(&stacks, &aug, &mut aug_rng)?;
            let mut g = Graph::<F>::new();
            let binding = bundle.params.bind(&mut g);
            {
                let params = BoundParams { store: &bundle.params, binding: &binding };
                let xv = g.leaf(x);
                let p = forward_contrastive_batch(&mut g, &params, &bundle.arch, xv, cfg.m)?;
                let raw = combined_cl_loss(&mut g, p, cfg.m, cfg.tau as F, cfg.alpha)?;
                // per-patient scale keeps gradient magnitude batch-size free
                let loss = g.scale(raw, 1.0 / batch.len() as F);
                loss_sum += g.scalar_value(loss) as f64;
                n_batches += 1;
                g.backward(loss);
            }
            let grads = grads_for(&mut g, &bundle.params, &binding);
            adam.step(&mut bundle.params, &grads, epoch)?;
        }
        if n_batches == 0 {
            return Err(Error::data("no contrastive batch had >= 2 patients"));
        }
        let train_loss = loss_sum / n_batches as f64;
        log::info!("cl epoch {epoch}: loss {train_loss:.6}");
        history.push(EpochStats { epoch, train_loss, val_mae: None });
    }
    Ok((
        bundle,
        TrainHistory { config: cfg.clone(), epochs: history, best_epoch: None },
    ))
}

/// Supervised fine-tuning (or frozen probing) on top of a pre-trained
/// encoder, using `label_fraction` of the train labels. The encoder
/// weights are copied from `pretrained`; fusion and head start fresh.
pub fn finetune(
    manifest: &Manifest,
    pretrained: &ModelBundle<F>,
    cfg: &TrainConfig,
    freeze: bool,
) -> Result<(ModelBundle<F>, TrainHistory)> {
    cfg.validate()?;
    let arch = cfg.arch()?;
    if arch.encoder != pretrained.arch.encoder {
        return Err(Error::checkpoint(format!(
            "pre-trained encoder {:?} does not match the requested architecture {:?}",
            pretrained.arch.encoder, arch.encoder
        )));
    }
    let mut bundle = ModelBundle::<F>::init(arch, cfg.seed)?;
    for i in 0..bundle.params.len() {
        let name = bundle.params.name(i).to_owned();
        if name.starts_with("enc.") {
            let src = pretrained
                .params
                .get(&name)
                .ok_or_else(|| Error::checkpoint(format!("checkpoint missing '{name}'")))?;
            bundle.params.array_mut(i).assign(src);
        }
    }
    let manifest = subsample_train(manifest, cfg.label_fraction, cfg.seed)?;
    let outcome = supervised_loop(&mut bundle, &manifest, cfg, cfg.epochs_sup, freeze)?;
    Ok((bundle, outcome.history))
}

/// Per-patient EF prediction on a split, with the derived regression and
/// cardiomyopathy-classification metrics.
pub fn evaluate(
    bundle: &ModelBundle<F>,
    manifest: &Manifest,
    split: Split,
    policy: ClipPolicy,
    seed: u64,
) -> Result<(EvalReport, Vec<PredictionRow>)> {
    let ids = manifest.split_ids(split);
    if ids.is_empty() {
        return Err(Error::data(format!("split {split} is empty")));
    }
    let preds = predict_ids(bundle, manifest, &ids, policy, seed, 64)?;
    let truth: Vec<f64> = ids
        .iter()
        .map(|id| manifest.record(id).expect("id from manifest").ef)
        .collect();
    let report = evaluate_predictions(&preds, &truth)?;
    let rows = ids
        .into_iter()
        .zip(truth.iter().zip(preds.iter()))
        .map(|(patient_id, (&true_ef, &pred_ef))| PredictionRow { patient_id, true_ef, pred_ef })
        .collect();
    Ok((report, rows))
}

/// Training method axis of the learning-curve experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    E2E,
    E2EPlus,
    Cl,
    ClPlus,
    ClFreeze,
    ClPlusFreeze,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::E2E,
        Method::E2EPlus,
        Method::Cl,
        Method::ClPlus,
        Method::ClFreeze,
        Method::ClPlusFreeze,
    ];

    pub fn is_contrastive(self) -> bool {
        !matches!(self, Method::E2E | Method::E2EPlus)
    }

    pub fn freeze(self) -> bool {
        matches!(self, Method::ClFreeze | Method::ClPlusFreeze)
    }

    /// The "+" variants train on randomly re-drawn short clips.
    pub fn clip(self) -> ClipPolicy {
        match self {
            Method::E2EPlus | Method::ClPlus | Method::ClPlusFreeze => ClipPolicy::Short32Period2,
            _ => ClipPolicy::Full112,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::E2E => "e2e",
            Method::E2EPlus => "e2e+",
            Method::Cl => "cl",
            Method::ClPlus => "cl+",
            Method::ClFreeze => "cl-freeze",
            Method::ClPlusFreeze => "cl+-freeze",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e2e" => Ok(Method::E2E),
            "e2e+" => Ok(Method::E2EPlus),
            "cl" => Ok(Method::Cl),
            "cl+" => Ok(Method::ClPlus),
            "cl-freeze" => Ok(Method::ClFreeze),
            "cl+-freeze" => Ok(Method::ClPlusFreeze),
            other => Err(Error::argument(format!(
                "unknown method '{other}' (expected e2e|e2e+|cl|cl+|cl-freeze|cl+-freeze)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std, n }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: String,
    pub fraction: f64,
    /// None when every seed's test split was single-class.
    pub auroc: Option<MeanStd>,
    pub mae: MeanStd,
    pub r2: MeanStd,
}

/// Default seed set for aggregated results.
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Limited-label learning curve: one row per (method, label fraction) with
/// mean +/- std over seeds on the test split. Contrastive pre-training is
/// run once per (seed, clip variant) and shared between the frozen and
/// unfrozen fine-tuning of that seed.
pub fn learning_curve(
    manifest: &Manifest,
    fractions: &[f64],
    methods: &[Method],
    seeds: &[u64],
    base_cfg: &TrainConfig,
) -> Result<Vec<CurveRow>> {
    if fractions.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::argument("fractions must lie in (0, 1]"));
    }
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::argument("need at least one method and one seed"));
    }
    // (seed, clip) -> shared pre-trained bundle
    let mut pretrained: HashMap<(u64, ClipPolicy), ModelBundle<F>> = HashMap::new();
    for &seed in seeds {
        for clip in [ClipPolicy::Full112, ClipPolicy::Short32Period2] {
            if methods.iter().any(|m| m.is_contrastive() && m.clip() == clip) {
                let mut cfg = base_cfg.clone();
                cfg.seed = seed;
                cfg.clip = clip;
                let (bundle, _) = pretrain_contrastive(manifest, &cfg)?;
                pretrained.insert((seed, clip), bundle);
            }
        }
    }
    let mut rows = Vec::new();
    for &method in methods {
        for &fraction in fractions {
            let mut aurocs = Vec::new();
            let mut maes = Vec::new();
            let mut r2s = Vec::new();
            for &seed in seeds {
                let mut cfg = base_cfg.clone();
                cfg.seed = seed;
                cfg.clip = method.clip();
                cfg.label_fraction = fraction;
                let bundle = if method.is_contrastive() {
                    let pre = &pretrained[&(seed, method.clip())];
                    finetune(manifest, pre, &cfg, method.freeze())?.0
                } else {
                    train_supervised(manifest, &cfg)?.0
                };
                let (report, _) = evaluate(&bundle, manifest, Split::Test, cfg.clip, seed)?;
                if let Some(a) = report.auroc {
                    aurocs.push(a);
                }
                maes.push(report.mae);
                r2s.push(report.r2);
            }
            rows.push(CurveRow {
                method: method.to_string(),
                fraction,
                auroc: if aurocs.is_empty() { None } else { Some(mean_std(&aurocs)) },
                mae: mean_std(&maes),
                r2: mean_std(&r2s),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub param_count: usize,
    pub params_mio: f64,
    pub batch_size: usize,
    pub train_sec_per_batch: f64,
    pub train_msec_per_sample: f64,
    pub infer_sec_per_batch: f64,
    pub infer_msec_per_sample: f64,
    /// Buffer bytes allocated by one training pass (forward + saved
    /// context), a working-set estimate.
    pub train_working_set_bytes: usize,
}

/// Wall-clock cost of one training step and one inference pass on a real
/// batch. The first repeat warms caches and is discarded; the reported
/// numbers average the remaining `repeats`.
pub fn bench(
    bundle: &ModelBundle<F>,
    manifest: &Manifest,
    cfg: &TrainConfig,
    batch_size: usize,
    repeats: usize,
) -> Result<CostReport> {
    let ids = manifest.split_ids(Split::Train);
    if ids.is_empty() {
        return Err(Error::data("train split is empty"));
    }
    let batch: Vec<String> =
        (0..batch_size).map(|i| ids[i % ids.len()].clone()).collect();
    let mut provider = StackProvider::new(manifest, cfg.m, cfg.clip, cfg.seed);
    let stacks = provider.stacks(&batch, 0)?;
    let x = batch_from_stacks::<F>(&stacks, &bundle.arch.fusion)?;
    let y_true = ArrayD::from_elem(IxDyn(&[batch_size, 1]), 0.5 as F);

    let mut scratch = bundle.clone();
    let mut adam = Adam::all_trainable(&scratch.params, cfg.lr_sup, Schedule::Constant);
    let mut train_times = Vec::new();
    let mut working_set = 0usize;
    for rep in 0..=repeats {
        let start = Instant::now();
        let mut g = Graph::<F>::new();
        let binding = scratch.params.bind(&mut g);
        {
            let params = BoundParams { store: &scratch.params, binding: &binding };
            let xv = g.leaf(x.clone());
            let pred = forward_supervised_batch(&mut g, &params, &scratch.arch, xv)?;
            let loss = g.mse(pred, &y_true)?;
            g.backward(loss);
        }
        let grads = grads_for(&mut g, &scratch.params, &binding);
        adam.step(&mut scratch.params, &grads, 0)?;
        working_set = g.bytes_allocated();
        if rep > 0 {
            train_times.push(start.elapsed().as_secs_f64());
        }
    }

    let mut infer_times = Vec::new();
    for rep in 0..=repeats {
        let start = Instant::now();
        let mut g = Graph::<F>::new();
        let binding = bundle.params.bind(&mut g);
        let params = BoundParams { store: &bundle.params, binding: &binding };
        let xv = g.leaf(x.clone());
        let pred = forward_supervised_batch(&mut g, &params, &bundle.arch, xv)?;
        std::hint::black_box(g.value(pred));
        if rep > 0 {
            infer_times.push(start.elapsed().as_secs_f64());
        }
    }

    let avg = |ts: &[f64]| ts.iter().sum::<f64>() / ts.len() as f64;
    let train_sec = avg(&train_times);
    let infer_sec = avg(&infer_times);
    let param_count = bundle.params.total_params();
    Ok(CostReport {
        param_count,
        params_mio: param_count as f64 / 1e6,
        batch_size,
        train_sec_per_batch: train_sec,
        train_msec_per_sample: 1000.0 * train_sec / batch_size as f64,
        infer_sec_per_batch: infer_sec,
        infer_msec_per_sample: 1000.0 * infer_sec / batch_size as f64,
        train_working_set_bytes: working_set,
    })
}
