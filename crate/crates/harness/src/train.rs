//! Forecaster training: windowed regression toward future features, with
//! cosine learning rate, early stopping on validation error, and an
//! autoregressive fine-tuning pass that backpropagates through chained
//! forecasts.

use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, IouAccum};
use crate::features::{stack, window_frames, FeatureStore};
use f2mf_core::net::{f2mf_loss, f2mf_loss_grads, F2mfNet, NetConfig};
use f2mf_core::norm::NormStats;
use f2mf_core::ops::bn::Mode;
use f2mf_core::ops::loss::mse;
use f2mf_core::optim::{cosine_lr, Adam};
use f2mf_core::param::VisitParams;
use f2mf_core::init::InitRng;
use f2mf_core::Tensor;
use f2mf_world::render::Renderer;
use f2mf_world::seg::predict_labels;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

/// Training schedule and data wiring for one forecaster run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Forecast horizon in frames.
    pub dt: usize,
    /// Frames whose windows provide training samples.
    pub anchors: Vec<usize>,
    /// Frame whose window drives validation.
    pub eval_anchor: usize,
    /// Optional cap on optimizer steps per epoch.
    pub steps_per_epoch: Option<usize>,
    /// Validation sequences scored each epoch.
    pub val_subset: usize,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch: 8,
            lr0: 4e-4,
            lr_min: 1e-7,
            patience: 10,
            seed: 7,
            dt: 3,
            anchors: vec![9, 12],
            eval_anchor: 12,
            steps_per_epoch: None,
            val_subset: 32,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.dt == 0 {
            return Err(HarnessError::Config("dt must be at least 1".into()));
        }
        if self.anchors.is_empty() {
            return Err(HarnessError::Config("no training anchors".into()));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(HarnessError::Config(
                "batch and epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Frames the training windows touch, deduplicated and sorted. These
    /// frames define the normalization statistics.
    pub fn stat_frames(&self) -> Result<Vec<usize>> {
        let mut frames = Vec::new();
        for &a in &self.anchors {
            frames.extend(window_frames(a, self.net.t)?);
        }
        frames.sort_unstable();
        frames.dedup();
        Ok(frames)
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub l_f2mf: f64,
    pub l_f2f: f64,
    pub l_f2m: f64,
    pub val_mse: f64,
    pub val_miou: f64,
}

/// Renders the log in the fixed CSV layout.
pub fn training_csv(log: &[EpochRow]) -> String {
    let mut out = String::from("epoch,lr,L_F2MF,L_F2F,L_F2M,val_mse,val_miou\n");
    for r in log {
        out.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6}\n",
            r.epoch, r.lr, r.l_f2mf, r.l_f2f, r.l_f2m, r.val_mse, r.val_miou
        ));
    }
    out
}

pub struct TrainOutcome {
    pub net: F2mfNet<f32>,
    pub stats: NormStats,
    pub log: Vec<EpochRow>,
    pub best_epoch: usize,
    /// Set when a non-finite loss aborted training. The returned network is
    /// the best snapshot seen before the blowup.
    pub divergence: Option<String>,
}

/// Stacks per-sample windows into one batched window, oldest frame first.
fn batch_windows(
    store: &mut FeatureStore,
    samples: &[(usize, usize)],
    t: usize,
    dt: usize,
    stats: &NormStats,
) -> Result<(Vec<Tensor<f32>>, Tensor<f32>)> {
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for &(idx, anchor) in samples {
        per_sample.push(store.window(idx, anchor, t, stats)?);
        targets.push(store.normalized(idx, anchor + dt, stats)?);
    }
    let mut window = Vec::with_capacity(t);
    for tau in 0..t {
        let refs: Vec<&Tensor<f32>> = per_sample.iter().map(|w| &w[tau]).collect();
        window.push(stack(&refs));
    }
    let target_refs: Vec<&Tensor<f32>> = targets.iter().collect();
    Ok((window, stack(&target_refs)))
}

/// Trains a forecaster from scratch on the given sequences and returns the
/// best-validation snapshot.
pub fn train_forecaster(
    store: &mut FeatureStore,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(HarnessError::Data(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let t = cfg.net.t;
    let stats = store.norm_stats(train_idx, &cfg.stat_frames()?)?;
    let mut init = InitRng::seed_from_u64(cfg.seed);
    let mut net = F2mfNet::new(cfg.net.clone(), &mut init)?;
    let mut adam = Adam::new(cfg.lr0);
    let mut order = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x0bad_5eed);

    let mut samples: Vec<(usize, usize)> = train_idx
        .iter()
        .flat_map(|&idx| cfg.anchors.iter().map(move |&a| (idx, a)))
        .collect();
    let val_sub = &val_idx[..val_idx.len().min(cfg.val_subset)];

    let mut log = Vec::new();
    let mut best_records = None;
    let mut best_epoch = 0;
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    let mut divergence = None;

    'epochs: for epoch in 0..cfg.epochs {
        adam.lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min);
        samples.shuffle(&mut order);
        let take = cfg
            .steps_per_epoch
            .map_or(samples.len(), |s| (s * cfg.batch).min(samples.len()));
        let mut sums = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for chunk in samples[..take].chunks(cfg.batch) {
            let (window, target) = batch_windows(store, chunk, t, cfg.dt, &stats)?;
            let (result, trace) = net.forward(&window, Mode::Train)?;
            let loss = f2mf_loss(&result, &target)?;
            if !loss.total().is_finite() {
                let msg = format!(
                    "non-finite loss {} at epoch {epoch} step {steps}",
                    loss.total()
                );
                if let Some(records) = best_records.take() {
                    net.restore_records(records)?;
                }
                divergence = Some(msg);
                break 'epochs;
            }
            sums.0 += loss.l_f2mf;
            sums.1 += loss.l_f2f;
            sums.2 += loss.l_f2m;
            steps += 1;
            let grads = f2mf_loss_grads(&result, &target);
            net.zero_grads();
            net.backward(&trace, grads)?;
            adam.step(&mut net)?;
        }

        let report = evaluate(store, &mut net, &stats, val_sub, cfg.eval_anchor, cfg.dt)?;
        let row = EpochRow {
            epoch,
            lr: adam.lr,
            l_f2mf: sums.0 / steps.max(1) as f64,
            l_f2f: sums.1 / steps.max(1) as f64,
            l_f2m: sums.2 / steps.max(1) as f64,
            val_mse: report.feature_mse,
            val_miou: report.miou_all,
        };
        log.push(row);

        if report.feature_mse < best_val {
            best_val = report.feature_mse;
            best_epoch = epoch;
            best_records = Some(net.to_records());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    if let Some(records) = best_records {
        net.restore_records(records)?;
    }
    Ok(TrainOutcome {
        net,
        stats,
        log,
        best_epoch,
        divergence,
    })
}

/// Per-step scores of an autoregressive evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ArStepReport {
    /// Rollout step, starting at 1.
    pub step: usize,
    pub miou_all: f64,
    pub miou_moving: f64,
    pub feature_mse: f64,
}

pub fn ar_csv(reports: &[ArStepReport]) -> String {
    let mut out = String::from("step,miou_all,miou_moving,feature_mse\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6e}\n",
            r.step, r.miou_all, r.miou_moving, r.feature_mse
        ));
    }
    out
}

fn check_rollout_room(
    store: &FeatureStore,
    indices: &[usize],
    anchor: usize,
    dt: usize,
    steps: usize,
) -> Result<()> {
    for &idx in indices {
        let length = store.scene(idx).length;
        if anchor + steps * dt > length - 1 {
            return Err(HarnessError::Config(format!(
                "rollout to frame {} exceeds sequence length {length}",
                anchor + steps * dt
            )));
        }
    }
    Ok(())
}

/// Rolls the forecaster out for several steps, feeding each combined
/// forecast back into the window, and scores every step against ground
/// truth.
pub fn evaluate_autoregressive(
    store: &mut FeatureStore,
    net: &mut F2mfNet<f32>,
    stats: &NormStats,
    indices: &[usize],
    anchor: usize,
    dt: usize,
    steps: usize,
) -> Result<Vec<ArStepReport>> {
    if indices.is_empty() || steps == 0 {
        return Err(HarnessError::Data("nothing to evaluate".into()));
    }
    check_rollout_room(store, indices, anchor, dt, steps)?;
    let t = net.cfg().t;

    let mut packets = Vec::new();
    for &idx in indices {
        let window = store.window(idx, anchor, t, stats)?;
        let results = net.autoregressive(&window, steps, Mode::Eval)?;
        for (s, result) in results.into_iter().enumerate() {
            let target = store.normalized(idx, anchor + (s + 1) * dt, stats)?;
            let err = mse(&result.f2mf, &target)? as f64;
            packets.push((idx, s, stats.denormalize(&result.f2mf), err));
        }
    }

    let seg = store.seg();
    let scored: Result<Vec<(usize, IouAccum, f64)>> = packets
        .par_iter()
        .map(|(idx, s, forecast, err)| -> Result<_> {
            let scene = store.scene(*idx);
            let want = Renderer::new(scene).render(anchor + (s + 1) * dt).labels;
            let pred = predict_labels(&seg.form_semantics(forecast)?);
            let mut iou = IouAccum::new(scene.k + 1);
            iou.add(&pred, &want);
            Ok((*s, iou, *err))
        })
        .collect();

    let classes = store.scene(indices[0]).k + 1;
    let mut step_iou: Vec<IouAccum> = (0..steps).map(|_| IouAccum::new(classes)).collect();
    let mut step_mse = vec![0.0f64; steps];
    for (s, iou, err) in scored? {
        step_iou[s].merge(&iou);
        step_mse[s] += err;
    }
    Ok((0..steps)
        .map(|s| ArStepReport {
            step: s + 1,
            miou_all: step_iou[s].mean_over(0..classes),
            miou_moving: step_iou[s].mean_over(1..classes),
            feature_mse: step_mse[s] / indices.len() as f64,
        })
        .collect())
}

fn scale_tensor(x: &mut Tensor<f32>, factor: f32) {
    for v in x.data_mut() {
        *v *= factor;
    }
}

fn add_into(acc: &mut Tensor<f32>, other: &Tensor<f32>) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += *b;
    }
}

pub struct FinetuneOutcome {
    pub log: Vec<EpochRow>,
    pub divergence: Option<String>,
}

/// Continues training an existing forecaster on multi-step rollouts. The
/// loss is the mean of the per-step objectives and gradients flow through
/// the fed-back forecasts into earlier steps.
pub fn finetune_autoregressive(
    store: &mut FeatureStore,
    net: &mut F2mfNet<f32>,
    stats: &NormStats,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    steps: usize,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if steps == 0 {
        return Err(HarnessError::Config("rollout needs at least one step".into()));
    }
    let t = cfg.net.t;
    for &a in &cfg.anchors {
        check_rollout_room(store, train_idx, a, cfg.dt, steps)?;
    }
    check_rollout_room(store, val_idx, cfg.eval_anchor, cfg.dt, steps)?;

    let mut adam = Adam::new(cfg.lr0);
    let mut order = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x00a1_ba2e);
    let mut samples: Vec<(usize, usize)> = train_idx
        .iter()
        .flat_map(|&idx| cfg.anchors.iter().map(move |&a| (idx, a)))
        .collect();
    let val_sub = &val_idx[..val_idx.len().min(cfg.val_subset)];

    let mut log = Vec::new();
    let mut divergence = None;

    'epochs: for epoch in 0..cfg.epochs {
        adam.lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min);
        samples.shuffle(&mut order);
        let take = cfg
            .steps_per_epoch
            .map_or(samples.len(), |s| (s * cfg.batch).min(samples.len()));
        let mut sums = (0.0, 0.0, 0.0);
        let mut opt_steps = 0usize;
        for chunk in samples[..take].chunks(cfg.batch) {
            let (window0, _) = batch_windows(store, chunk, t, cfg.dt, stats)?;
            let mut targets = Vec::with_capacity(steps);
            for s in 1..=steps {
                let shifted: Vec<(usize, usize)> = chunk
                    .iter()
                    .map(|&(idx, a)| (idx, a + (s - 1) * cfg.dt))
                    .collect();
                let mut per = Vec::with_capacity(shifted.len());
                for &(idx, a) in &shifted {
                    per.push(store.normalized(idx, a + cfg.dt, stats)?);
                }
                let refs: Vec<&Tensor<f32>> = per.iter().collect();
                targets.push(stack(&refs));
            }

            // Forward chain, remembering which window slot each forecast
            // occupies later.
            let mut windows = vec![window0];
            let mut sources: Vec<Vec<Option<usize>>> = vec![vec![None; t]];
            let mut results = Vec::with_capacity(steps);
            let mut traces = Vec::with_capacity(steps);
            let mut total = (0.0, 0.0, 0.0);
            for s in 0..steps {
                let (result, trace) = net.forward(&windows[s], Mode::Train)?;
                let loss = f2mf_loss(&result, &targets[s])?;
                total.0 += loss.l_f2mf / steps as f64;
                total.1 += loss.l_f2f / steps as f64;
                total.2 += loss.l_f2m / steps as f64;
                if s + 1 < steps {
                    let mut next: Vec<Tensor<f32>> = windows[s][1..].to_vec();
                    next.push(result.f2mf.clone());
                    windows.push(next);
                    let mut src: Vec<Option<usize>> = sources[s][1..].to_vec();
                    src.push(Some(s));
                    sources.push(src);
                }
                results.push(result);
                traces.push(trace);
            }
            let total_loss = total.0 + total.1 + total.2;
            if !total_loss.is_finite() {
                divergence = Some(format!(
                    "non-finite rollout loss {total_loss} at epoch {epoch} step {opt_steps}"
                ));
                break 'epochs;
            }
            sums.0 += total.0;
            sums.1 += total.1;
            sums.2 += total.2;
            opt_steps += 1;

            // Backward through the chain, newest step first. Window
            // gradients that land on a fed-back forecast accumulate into
            // that step's output gradient.
            net.zero_grads();
            let mut pending: Vec<Option<Tensor<f32>>> = (0..steps).map(|_| None).collect();
            let scale = 1.0 / steps as f32;
            for s in (0..steps).rev() {
                let mut grads = f2mf_loss_grads(&results[s], &targets[s]);
                for g in [&mut grads.f2mf, &mut grads.f2f, &mut grads.f2m]
                    .into_iter()
                    .flatten()
                {
                    scale_tensor(g, scale);
                }
                if let Some(extra) = pending[s].take() {
                    match &mut grads.f2mf {
                        Some(g) => add_into(g, &extra),
                        None => grads.f2mf = Some(extra),
                    }
                }
                let wg = net.backward(&traces[s], grads)?;
                for (j, g) in wg.into_iter().enumerate() {
                    if let Some(src) = sources[s][j] {
                        match &mut pending[src] {
                            Some(acc) => add_into(acc, &g),
                            None => pending[src] = Some(g),
                        }
                    }
                }
            }
            adam.step(net)?;
        }

        let reports =
            evaluate_autoregressive(store, net, stats, val_sub, cfg.eval_anchor, cfg.dt, steps)?;
        let last = reports.last().unwrap();
        log.push(EpochRow {
            epoch,
            lr: adam.lr,
            l_f2mf: sums.0 / opt_steps.max(1) as f64,
            l_f2f: sums.1 / opt_steps.max(1) as f64,
            l_f2m: sums.2 / opt_steps.max(1) as f64,
            val_mse: last.feature_mse,
            val_miou: last.miou_all,
        });
    }
    Ok(FinetuneOutcome { log, divergence })
}
