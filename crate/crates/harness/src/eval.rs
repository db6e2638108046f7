//! Forecast evaluation: semantic mIoU through the frozen decoder, feature
//! MSE, flow endpoint error against generator ground truth, and blend
//! weight statistics.

use crate::error::{HarnessError, Result};
use crate::features::{FeatureStore, window_frames, FEATURE_FACTOR};
use f2mf_core::net::F2mfNet;
use f2mf_core::norm::NormStats;
use f2mf_core::ops::bn::Mode;
use f2mf_core::ops::loss::mse;
use f2mf_core::Tensor;
use f2mf_world::flow::{flow_truth, FlowTruth};
use f2mf_world::render::Renderer;
use f2mf_world::seg::predict_labels;
use rayon::prelude::*;
use std::time::Instant;

pub const BETA_BINS: usize = 10;

/// Per-class intersection and union pixel counts.
#[derive(Clone, Debug)]
pub struct IouAccum {
    pub inter: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouAccum {
    pub fn new(classes: usize) -> Self {
        IouAccum {
            inter: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], want: &[u8]) {
        assert_eq!(pred.len(), want.len());
        for (&p, &t) in pred.iter().zip(want) {
            let (p, t) = (p as usize, t as usize);
            if p == t {
                self.inter[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &IouAccum) {
        for c in 0..self.inter.len() {
            self.inter[c] += other.inter[c];
            self.union[c] += other.union[c];
        }
    }

    /// IoU per class; None where the class appears in neither prediction
    /// nor reference.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    /// Mean IoU over the classes present in `range`.
    pub fn mean_over(&self, range: std::ops::Range<usize>) -> f64 {
        let ious: Vec<f64> = self.per_class()[range].iter().flatten().copied().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

/// Wall-clock seconds per evaluation stage. Reported on stdout only, never
/// written into metric files.
#[derive(Clone, Copy, Debug, Default)]
pub struct StageClock {
    pub features_s: f64,
    pub forecast_s: f64,
    pub metrics_s: f64,
}

/// Metrics of one evaluation pass.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub sequences: usize,
    /// Label pixels scored (image resolution).
    pub pixels: u64,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou_all: f64,
    /// Mean IoU over the sprite classes only.
    pub miou_moving: f64,
    /// Forecast error in normalized feature space.
    pub feature_mse: f64,
    /// Mean endpoint error of regressed flow in feature-grid cells, outside
    /// the novelty mask; absent for models without a motion head.
    pub epe: Option<f64>,
    /// Feature-grid cell counts per motion-share bin; absent without blend
    /// weights.
    pub beta_counts: Option<[u64; BETA_BINS]>,
    pub mean_beta_f2m: Option<f64>,
    pub mean_beta_f2m_novelty: Option<f64>,
    pub clock: StageClock,
}

impl EvalReport {
    /// One CSV row of the metric columns (no wall-clock values).
    pub fn csv_row(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or("na".to_string(), |x| format!("{x:.6}"));
        let per_class: Vec<String> = self
            .per_class_iou
            .iter()
            .map(|v| fmt_opt(*v))
            .collect();
        format!(
            "{:.6},{:.6},{:.6},{},{}",
            self.miou_all,
            self.miou_moving,
            self.feature_mse,
            fmt_opt(self.epe),
            per_class.join(",")
        )
    }

    pub fn csv_header(classes: usize) -> String {
        let per_class: Vec<String> = (0..classes).map(|c| format!("iou_class{c}")).collect();
        format!("miou_all,miou_moving,feature_mse,epe,{}", per_class.join(","))
    }
}

/// Mean squared endpoint error ingredients for one frame pair.
fn epe_sum(flow: &Tensor<f32>, truth: &Tensor<f32>, novelty: &[bool], item: usize) -> (f64, u64) {
    let (_, _, h, w) = flow.dims();
    let dy = flow.plane(item, 0);
    let dx = flow.plane(item, 1);
    let ty = truth.plane(0, 0);
    let tx = truth.plane(0, 1);
    let mut sum = 0.0f64;
    let mut count = 0u64;
    for p in 0..h * w {
        if novelty[p] {
            continue;
        }
        let ey = dy[p] as f64 - ty[p] as f64;
        let ex = dx[p] as f64 - tx[p] as f64;
        sum += (ey * ey + ex * ex).sqrt();
        count += 1;
    }
    (sum, count)
}

/// Motion share of the blend at every cell: 1 minus the content weight.
pub fn motion_share(beta: &Tensor<f32>, has_f2f: bool, item: usize) -> Vec<f64> {
    let (_, c, h, w) = beta.dims();
    if !has_f2f {
        return vec![1.0; h * w];
    }
    beta.plane(item, c - 1)
        .iter()
        .map(|&b| 1.0 - b as f64)
        .collect()
}

struct SeqPacket {
    forecast: Tensor<f32>,
    flows: Vec<Tensor<f32>>,
    beta_f2m: Option<Vec<f64>>,
    feature_mse: f64,
    scene_idx: usize,
}

struct SeqMetrics {
    iou: IouAccum,
    pixels: u64,
    epe_sum: f64,
    epe_count: u64,
    beta_counts: [u64; BETA_BINS],
    beta_sum: f64,
    beta_cells: u64,
    beta_novel_sum: f64,
    beta_novel_cells: u64,
}

/// Evaluates a trained forecaster on the given sequences: forecast features
/// at `anchor + dt`, decode them with the frozen single-frame model, and
/// score against ground truth.
pub fn evaluate(
    store: &mut FeatureStore,
    net: &mut F2mfNet<f32>,
    stats: &NormStats,
    indices: &[usize],
    anchor: usize,
    dt: usize,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(HarnessError::Data("evaluation split is empty".into()));
    }
    let t = net.cfg().t;
    let target = anchor + dt;
    let has_f2f = net.cfg().use_f2f;
    let mut clock = StageClock::default();

    let mut packets = Vec::with_capacity(indices.len());
    for &idx in indices {
        let start = Instant::now();
        let window = store.window(idx, anchor, t, stats)?;
        let truth = store.normalized(idx, target, stats)?;
        clock.features_s += start.elapsed().as_secs_f64();

        let start = Instant::now();
        let result = net.forecast(&window, Mode::Eval)?;
        clock.forecast_s += start.elapsed().as_secs_f64();

        let feature_mse = mse(&result.f2mf, &truth)? as f64;
        let beta_f2m = result
            .blend
            .as_ref()
            .map(|b| motion_share(&b.beta, has_f2f, 0));
        packets.push(SeqPacket {
            forecast: stats.denormalize(&result.f2mf),
            flows: result.flows,
            beta_f2m,
            feature_mse,
            scene_idx: idx,
        });
    }

    let start = Instant::now();
    let report = score_packets(store, &packets, anchor, dt, t)?;
    clock.metrics_s = start.elapsed().as_secs_f64();

    let feature_mse =
        packets.iter().map(|p| p.feature_mse).sum::<f64>() / packets.len() as f64;
    Ok(finish_report(report, indices.len(), feature_mse, clock))
}

/// Decodes and scores forecast packets against ground truth. Pure per
/// sequence, so the work parallelizes; results merge in index order.
fn score_packets(
    store: &FeatureStore,
    packets: &[SeqPacket],
    anchor: usize,
    dt: usize,
    t: usize,
) -> Result<Vec<SeqMetrics>> {
    let seg = store.seg();
    let target = anchor + dt;
    let frames = window_frames(anchor, t)?;
    packets
        .par_iter()
        .map(|packet| -> Result<SeqMetrics> {
            let scene = store.scene(packet.scene_idx);
            let renderer = Renderer::new(scene);
            let rendered_target = renderer.render(target);
            let observed: Vec<(usize, f2mf_world::render::RenderedFrame)> =
                frames.iter().map(|&f| (f, renderer.render(f))).collect();
            let observed_refs: Vec<(usize, &f2mf_world::render::RenderedFrame)> =
                observed.iter().map(|(f, r)| (*f, r)).collect();
            let truth: FlowTruth = flow_truth(
                renderer.tracks(),
                &rendered_target,
                target,
                &observed_refs,
                scene.canvas,
                FEATURE_FACTOR,
            );

            let logits = seg.form_semantics(&packet.forecast)?;
            let pred = predict_labels(&logits);
            let mut iou = IouAccum::new(scene.k + 1);
            iou.add(&pred, &rendered_target.labels);

            let mut m = SeqMetrics {
                iou,
                pixels: rendered_target.labels.len() as u64,
                epe_sum: 0.0,
                epe_count: 0,
                beta_counts: [0; BETA_BINS],
                beta_sum: 0.0,
                beta_cells: 0,
                beta_novel_sum: 0.0,
                beta_novel_cells: 0,
            };
            for (flow, gt) in packet.flows.iter().zip(&truth.flows) {
                let (s, c) = epe_sum(flow, gt, &truth.novelty, 0);
                m.epe_sum += s;
                m.epe_count += c;
            }
            if let Some(beta) = &packet.beta_f2m {
                for (p, &b) in beta.iter().enumerate() {
                    let bin = ((b * BETA_BINS as f64) as usize).min(BETA_BINS - 1);
                    m.beta_counts[bin] += 1;
                    m.beta_sum += b;
                    m.beta_cells += 1;
                    if truth.novelty[p] {
                        m.beta_novel_sum += b;
                        m.beta_novel_cells += 1;
                    }
                }
            }
            Ok(m)
        })
        .collect()
}

fn finish_report(
    per_seq: Vec<SeqMetrics>,
    sequences: usize,
    feature_mse: f64,
    clock: StageClock,
) -> EvalReport {
    let classes = per_seq[0].iou.inter.len();
    let mut iou = IouAccum::new(classes);
    let mut pixels = 0u64;
    let mut epe_sum = 0.0;
    let mut epe_count = 0u64;
    let mut beta_counts = [0u64; BETA_BINS];
    let mut beta_sum = 0.0;
    let mut beta_cells = 0u64;
    let mut beta_novel_sum = 0.0;
    let mut beta_novel_cells = 0u64;
    let mut any_beta = false;
    for m in &per_seq {
        iou.merge(&m.iou);
        pixels += m.pixels;
        epe_sum += m.epe_sum;
        epe_count += m.epe_count;
        if m.beta_cells > 0 {
            any_beta = true;
        }
        for b in 0..BETA_BINS {
            beta_counts[b] += m.beta_counts[b];
        }
        beta_sum += m.beta_sum;
        beta_cells += m.beta_cells;
        beta_novel_sum += m.beta_novel_sum;
        beta_novel_cells += m.beta_novel_cells;
    }
    EvalReport {
        sequences,
        pixels,
        per_class_iou: iou.per_class(),
        miou_all: iou.mean_over(0..classes),
        miou_moving: iou.mean_over(1..classes),
        feature_mse,
        epe: (epe_count > 0).then(|| epe_sum / epe_count as f64),
        beta_counts: any_beta.then_some(beta_counts),
        mean_beta_f2m: (beta_cells > 0).then(|| beta_sum / beta_cells as f64),
        mean_beta_f2m_novelty: (beta_novel_cells > 0)
            .then(|| beta_novel_sum / beta_novel_cells as f64),
        clock,
    }
}

/// Scores the frozen single-frame model's prediction at the anchor frame
/// against the labels at `anchor + dt`: the forecast-free baseline that
/// copies the last observed segmentation forward.
pub fn copy_last_baseline(
    store: &mut FeatureStore,
    indices: &[usize],
    anchor: usize,
    dt: usize,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(HarnessError::Data("evaluation split is empty".into()));
    }
    let target = anchor + dt;
    let mut clock = StageClock::default();
    let mut feature_mse = 0.0f64;
    let mut packets = Vec::with_capacity(indices.len());
    for &idx in indices {
        let start = Instant::now();
        let anchor_features = store.features(idx, anchor)?;
        let target_features = store.features(idx, target)?;
        feature_mse += mse(&anchor_features, &target_features)? as f64;
        clock.features_s += start.elapsed().as_secs_f64();
        packets.push((idx, anchor_features));
    }
    feature_mse /= indices.len() as f64;

    let start = Instant::now();
    let seg = store.seg();
    let per_seq: Result<Vec<SeqMetrics>> = packets
        .par_iter()
        .map(|(idx, features)| -> Result<SeqMetrics> {
            let scene = store.scene(*idx);
            let want = Renderer::new(scene).render(target).labels;
            let pred = predict_labels(&seg.form_semantics(features)?);
            let mut iou = IouAccum::new(scene.k + 1);
            iou.add(&pred, &want);
            Ok(SeqMetrics {
                iou,
                pixels: want.len() as u64,
                epe_sum: 0.0,
                epe_count: 0,
                beta_counts: [0; BETA_BINS],
                beta_sum: 0.0,
                beta_cells: 0,
                beta_novel_sum: 0.0,
                beta_novel_cells: 0,
            })
        })
        .collect();
    let per_seq = per_seq?;
    clock.metrics_s = start.elapsed().as_secs_f64();
    Ok(finish_report(per_seq, indices.len(), feature_mse, clock))
}

/// mIoU between two label maps, for baseline studies that bypass models.
pub fn miou_of_labels(pred: &[u8], want: &[u8], classes: usize) -> f64 {
    let mut iou = IouAccum::new(classes);
    iou.add(pred, want);
    iou.mean_over(0..classes)
}
