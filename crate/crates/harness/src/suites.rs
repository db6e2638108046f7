//! Study drivers: head and correlation ablations, window length and blend
//! mode sweeps, blend weight histograms, and input saliency maps.

use crate::error::{HarnessError, Result};
use crate::eval::{copy_last_baseline, evaluate, motion_share, EvalReport, BETA_BINS};
use crate::features::{FeatureStore, FEATURE_FACTOR};
use crate::train::{train_forecaster, TrainConfig, TrainOutcome};
use f2mf_core::net::{BlendMode, F2mfNet, OutputGrads};
use f2mf_core::norm::NormStats;
use f2mf_core::ops::bn::Mode;
use f2mf_core::param::VisitParams;
use f2mf_core::Tensor;
use f2mf_world::flow::flow_truth;
use f2mf_world::render::Renderer;
use f2mf_world::seg::predict_labels;

/// Index sets for the three dataset roles.
#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a [usize],
    pub val: &'a [usize],
    pub test: &'a [usize],
}

/// One trained configuration with its test-set scores.
pub struct AblationRow {
    pub label: String,
    pub use_f2f: bool,
    pub use_f2m: bool,
    pub use_corr: bool,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub copy_last: EvalReport,
}

fn train_and_score(
    store: &mut FeatureStore,
    splits: Splits,
    cfg: &TrainConfig,
    label: &str,
) -> Result<(TrainOutcome, EvalReport)> {
    let mut outcome = train_forecaster(store, splits.train, splits.val, cfg)?;
    if let Some(msg) = &outcome.divergence {
        return Err(HarnessError::Diverged(format!("{label}: {msg}")));
    }
    let report = evaluate(
        store,
        &mut outcome.net,
        &outcome.stats,
        splits.test,
        cfg.eval_anchor,
        cfg.dt,
    )?;
    Ok((outcome, report))
}

/// Trains the six head/correlation combinations under one schedule and
/// scores them on the test split, alongside the copy-forward baseline.
pub fn ablation_suite(
    store: &mut FeatureStore,
    splits: Splits,
    base: &TrainConfig,
) -> Result<AblationOutcome> {
    let variants: [(&str, bool, bool, bool); 6] = [
        ("F2F", true, false, false),
        ("F2F+corr", true, false, true),
        ("F2M", false, true, false),
        ("F2M+corr", false, true, true),
        ("F2MF", true, true, false),
        ("F2MF+corr", true, true, true),
    ];
    let mut rows = Vec::with_capacity(variants.len());
    for (label, use_f2f, use_f2m, use_corr) in variants {
        let mut cfg = base.clone();
        cfg.net.use_f2f = use_f2f;
        cfg.net.use_f2m = use_f2m;
        cfg.net.use_corr = use_corr;
        let (outcome, report) = train_and_score(store, splits, &cfg, label)?;
        rows.push(AblationRow {
            label: label.to_string(),
            use_f2f,
            use_f2m,
            use_corr,
            outcome,
            report,
        });
    }
    let copy_last = copy_last_baseline(store, splits.test, base.eval_anchor, base.dt)?;
    Ok(AblationOutcome { rows, copy_last })
}

pub fn ablation_csv(outcome: &AblationOutcome) -> String {
    let classes = outcome.copy_last.per_class_iou.len();
    let mut out = format!("config,{}\n", EvalReport::csv_header(classes));
    for row in &outcome.rows {
        out.push_str(&format!("{},{}\n", row.label, row.report.csv_row()));
    }
    out.push_str(&format!("copy_last,{}\n", outcome.copy_last.csv_row()));
    out
}

/// One window length with its test-set scores.
pub struct WindowRow {
    pub t: usize,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Trains the full model at several window lengths. A single frame has no
/// frame pairs, so correlation is disabled there.
pub fn window_study(
    store: &mut FeatureStore,
    splits: Splits,
    base: &TrainConfig,
    t_values: &[usize],
) -> Result<Vec<WindowRow>> {
    let mut rows = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let mut cfg = base.clone();
        cfg.net.t = t;
        if t == 1 {
            cfg.net.use_corr = false;
        }
        let label = format!("T={t}");
        let (outcome, report) = train_and_score(store, splits, &cfg, &label)?;
        rows.push(WindowRow { t, outcome, report });
    }
    Ok(rows)
}

pub fn window_csv(rows: &[WindowRow]) -> String {
    let mut out = String::from("t,miou_all,miou_moving,feature_mse\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6e}\n",
            r.t, r.report.miou_all, r.report.miou_moving, r.report.feature_mse
        ));
    }
    out
}

/// One blend mode with its test-set scores.
pub struct BlendRow {
    pub mode: BlendMode,
    pub outcome: Option<TrainOutcome>,
    pub report: EvalReport,
}

/// Compares uniform, image-level, and per-pixel blending. A pre-trained
/// per-pixel report can be passed in to avoid repeating that run.
pub fn blend_study(
    store: &mut FeatureStore,
    splits: Splits,
    base: &TrainConfig,
    mut per_pixel: Option<EvalReport>,
) -> Result<Vec<BlendRow>> {
    let mut rows = Vec::new();
    for mode in [BlendMode::Mean, BlendMode::ImageLevel, BlendMode::PerPixel] {
        if mode == BlendMode::PerPixel {
            if let Some(report) = per_pixel.take() {
                rows.push(BlendRow {
                    mode,
                    outcome: None,
                    report,
                });
                break;
            }
        }
        let mut cfg = base.clone();
        cfg.net.blend = mode;
        let (outcome, report) = train_and_score(store, splits, &cfg, mode.as_str())?;
        rows.push(BlendRow {
            mode,
            outcome: Some(outcome),
            report,
        });
    }
    Ok(rows)
}

pub fn blend_csv(rows: &[BlendRow]) -> String {
    let mut out = String::from("blend,miou_all,miou_moving,feature_mse\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6e}\n",
            r.mode.as_str(),
            r.report.miou_all,
            r.report.miou_moving,
            r.report.feature_mse
        ));
    }
    out
}

/// One motion-share interval of the blend weight histogram.
#[derive(Clone, Copy, Debug)]
pub struct BetaBin {
    pub lo: f64,
    pub hi: f64,
    pub cells: u64,
    /// Fraction of all scored cells landing in this interval.
    pub share: f64,
    /// Pixel accuracy of the motion-only model inside this interval.
    pub acc_f2m: Option<f64>,
    /// Pixel accuracy of the content-only model inside this interval.
    pub acc_f2f: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct BetaHistogram {
    pub bins: Vec<BetaBin>,
    pub cells: u64,
    pub mean_f2m: f64,
    /// Mean motion share restricted to cells whose content cannot be
    /// reached by warping any observed frame.
    pub mean_f2m_novel: Option<f64>,
}

/// Histogram of the compound model's motion share, with the standalone
/// models' accuracies broken down by interval. Standalone models are
/// optional; without them the accuracy columns stay empty.
pub fn beta_histogram(
    store: &mut FeatureStore,
    compound: &mut F2mfNet<f32>,
    stats: &NormStats,
    mut standalone_f2m: Option<&mut F2mfNet<f32>>,
    mut standalone_f2f: Option<&mut F2mfNet<f32>>,
    indices: &[usize],
    anchor: usize,
    dt: usize,
) -> Result<BetaHistogram> {
    if indices.is_empty() {
        return Err(HarnessError::Data("no sequences to score".into()));
    }
    let t = compound.cfg().t;
    let has_f2f = compound.cfg().use_f2f;
    let target = anchor + dt;
    let factor = FEATURE_FACTOR;

    let mut cells = [0u64; BETA_BINS];
    let mut correct_f2m = [0u64; BETA_BINS];
    let mut correct_f2f = [0u64; BETA_BINS];
    let mut patch_pixels = [0u64; BETA_BINS];
    let mut sum = 0.0f64;
    let mut total = 0u64;
    let mut novel_sum = 0.0f64;
    let mut novel_cells = 0u64;

    for &idx in indices {
        let window = store.window(idx, anchor, t, stats)?;
        let result = compound.forecast(&window, Mode::Eval)?;
        let blend = result.blend.as_ref().ok_or_else(|| {
            HarnessError::Config("blend weight histogram needs a model with blend weights".into())
        })?;
        let share = motion_share(&blend.beta, has_f2f, 0);
        let (_, _, fh, fw) = result.f2mf.dims();

        let scene = store.scene(idx).clone();
        let renderer = Renderer::new(&scene);
        let target_frame = renderer.render(target);
        let frames = crate::features::window_frames(anchor, t)?;
        let observed: Vec<(usize, f2mf_world::render::RenderedFrame)> =
            frames.iter().map(|&f| (f, renderer.render(f))).collect();
        let observed_refs: Vec<(usize, &f2mf_world::render::RenderedFrame)> =
            observed.iter().map(|(f, r)| (*f, r)).collect();
        let truth = flow_truth(
            renderer.tracks(),
            &target_frame,
            target,
            &observed_refs,
            scene.canvas,
            factor,
        );

        let mut preds: [Option<Vec<u8>>; 2] = [None, None];
        if let Some(net) = standalone_f2m.as_deref_mut() {
            let w = store.window(idx, anchor, net.cfg().t, stats)?;
            let r = net.forecast(&w, Mode::Eval)?;
            preds[0] = Some(predict_labels(
                &store.seg().form_semantics(&stats.denormalize(&r.f2mf))?,
            ));
        }
        if let Some(net) = standalone_f2f.as_deref_mut() {
            let w = store.window(idx, anchor, net.cfg().t, stats)?;
            let r = net.forecast(&w, Mode::Eval)?;
            preds[1] = Some(predict_labels(
                &store.seg().form_semantics(&stats.denormalize(&r.f2mf))?,
            ));
        }
        let want = &target_frame.labels;

        for cy in 0..fh {
            for cx in 0..fw {
                let cell = cy * fw + cx;
                let b = ((share[cell] * BETA_BINS as f64) as usize).min(BETA_BINS - 1);
                cells[b] += 1;
                sum += share[cell];
                total += 1;
                if truth.novelty[cell] {
                    novel_sum += share[cell];
                    novel_cells += 1;
                }
                if preds[0].is_none() && preds[1].is_none() {
                    continue;
                }
                for py in cy * factor..(cy + 1) * factor {
                    for px in cx * factor..(cx + 1) * factor {
                        let p = py * scene.canvas + px;
                        patch_pixels[b] += 1;
                        if let Some(pred) = &preds[0] {
                            correct_f2m[b] += u64::from(pred[p] == want[p]);
                        }
                        if let Some(pred) = &preds[1] {
                            correct_f2f[b] += u64::from(pred[p] == want[p]);
                        }
                    }
                }
            }
        }
    }

    let bins = (0..BETA_BINS)
        .map(|b| BetaBin {
            lo: b as f64 / BETA_BINS as f64,
            hi: (b + 1) as f64 / BETA_BINS as f64,
            cells: cells[b],
            share: cells[b] as f64 / total as f64,
            acc_f2m: (standalone_f2m.is_some() && patch_pixels[b] > 0)
                .then(|| correct_f2m[b] as f64 / patch_pixels[b] as f64),
            acc_f2f: (standalone_f2f.is_some() && patch_pixels[b] > 0)
                .then(|| correct_f2f[b] as f64 / patch_pixels[b] as f64),
        })
        .collect();
    Ok(BetaHistogram {
        bins,
        cells: total,
        mean_f2m: sum / total as f64,
        mean_f2m_novel: (novel_cells > 0).then(|| novel_sum / novel_cells as f64),
    })
}

pub fn beta_csv(hist: &BetaHistogram) -> String {
    let fmt = |v: Option<f64>| v.map_or("na".to_string(), |x| format!("{x:.6}"));
    let mut out = String::from("bin_lo,bin_hi,cells,share,acc_f2m,acc_f2f\n");
    for b in &hist.bins {
        out.push_str(&format!(
            "{:.1},{:.1},{},{:.6},{},{}\n",
            b.lo,
            b.hi,
            b.cells,
            b.share,
            fmt(b.acc_f2m),
            fmt(b.acc_f2f)
        ));
    }
    out
}

/// Input attribution of one forecast pixel's class score.
pub struct SaliencyReport {
    pub pixel: (usize, usize),
    /// Class whose score was probed (the forecast's own prediction there).
    pub class: u8,
    pub h: usize,
    pub w: usize,
    /// Per window frame, absolute input gradient summed over channels.
    pub maps: Vec<Vec<f64>>,
    /// Cells in the top 0.1 percent across all frames.
    pub mask: Vec<Vec<bool>>,
    pub threshold: f64,
}

/// Backpropagates the predicted class score at one image pixel through the
/// decoder and the forecaster into the input window.
pub fn saliency(
    store: &mut FeatureStore,
    net: &mut F2mfNet<f32>,
    stats: &NormStats,
    seq_idx: usize,
    anchor: usize,
    pixel: (usize, usize),
) -> Result<SaliencyReport> {
    let canvas = store.scene(seq_idx).canvas;
    let (py, px) = pixel;
    if py >= canvas || px >= canvas {
        return Err(HarnessError::Config(format!(
            "pixel ({py}, {px}) outside the {canvas}x{canvas} canvas"
        )));
    }
    let t = net.cfg().t;
    let window = store.window(seq_idx, anchor, t, stats)?;
    let (result, trace) = net.forward(&window, Mode::Eval)?;
    let denorm = stats.denormalize(&result.f2mf);
    let logits = store.seg().form_semantics(&denorm)?;

    let (_, classes, _, _) = logits.dims();
    let mut class = 0usize;
    let mut best = f32::NEG_INFINITY;
    for c in 0..classes {
        let v = logits.at(0, c, py, px);
        if v > best {
            best = v;
            class = c;
        }
    }
    let mut grad_logits = Tensor::<f32>::zeros(1, classes, canvas, canvas);
    *grad_logits.at_mut(0, class, py, px) = 1.0;

    let grad_denorm = store
        .seg_mut()
        .form_semantics_backward(&denorm, &grad_logits)?;
    store.seg_mut().zero_grads();

    // Chain rule through denormalization: each channel picks up its scale.
    let mut grad_out = grad_denorm;
    let (_, c, fh, fw) = grad_out.dims();
    for ci in 0..c {
        let s = stats.std[ci] as f32;
        for v in grad_out.plane_mut(0, ci) {
            *v *= s;
        }
    }

    net.zero_grads();
    let window_grads = net.backward(
        &trace,
        OutputGrads {
            f2mf: Some(grad_out),
            f2f: None,
            f2m: None,
        },
    )?;
    net.zero_grads();

    let maps: Vec<Vec<f64>> = window_grads
        .iter()
        .map(|g| {
            let mut map = vec![0.0f64; fh * fw];
            for ci in 0..c {
                for (m, &v) in map.iter_mut().zip(g.plane(0, ci)) {
                    *m += v.abs() as f64;
                }
            }
            map
        })
        .collect();

    let mut all: Vec<f64> = maps.iter().flatten().copied().collect();
    all.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let keep = ((all.len() as f64 * 0.001).ceil() as usize).max(1);
    let threshold = all[keep - 1];
    let mask = maps
        .iter()
        .map(|m| m.iter().map(|&v| v >= threshold && v > 0.0).collect())
        .collect();

    Ok(SaliencyReport {
        pixel,
        class: class as u8,
        h: fh,
        w: fw,
        maps,
        mask,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use f2mf_core::init::InitRng;
    use f2mf_core::net::NetConfig;
    use f2mf_world::scene::{SceneParams, WorldConfig};
    use f2mf_world::seg::TinySegModel;
    use rand::SeedableRng;

    fn tiny_store(n: usize) -> FeatureStore {
        let cfg = WorldConfig {
            canvas: 64,
            k: 2,
            min_sprites: 1,
            max_sprites: 2,
            min_half: 5.0,
            max_half: 9.0,
            ..WorldConfig::default()
        };
        let scenes: Vec<SceneParams> = (0..n)
            .map(|i| SceneParams::generate(200 + i as u64, &cfg).unwrap())
            .collect();
        FeatureStore::new(TinySegModel::new(13, cfg.k), scenes)
    }

    fn tiny_net_cfg() -> NetConfig {
        NetConfig {
            t: 2,
            c: 32,
            c_f: 12,
            c_s: 12,
            c_embed: 8,
            d: 3,
            ..NetConfig::default()
        }
    }

    #[test]
    fn histogram_shares_cover_every_cell() {
        let mut store = tiny_store(3);
        let mut init = InitRng::seed_from_u64(5);
        let mut compound = F2mfNet::<f32>::new(tiny_net_cfg(), &mut init).unwrap();
        let stats = NormStats::identity(32);
        let hist = beta_histogram(
            &mut store,
            &mut compound,
            &stats,
            None,
            None,
            &[0, 1, 2],
            9,
            3,
        )
        .unwrap();
        // 8x8 feature cells per sequence, three sequences.
        assert_eq!(hist.cells, 3 * 64);
        let total_share: f64 = hist.bins.iter().map(|b| b.share).sum();
        assert!((total_share - 1.0).abs() < 1e-9);
        assert_eq!(hist.bins.iter().map(|b| b.cells).sum::<u64>(), hist.cells);
        assert!(hist.bins.iter().all(|b| b.acc_f2m.is_none()));
    }

    #[test]
    fn histogram_with_standalones_fills_accuracies() {
        let mut store = tiny_store(2);
        let mut init = InitRng::seed_from_u64(6);
        let mut compound = F2mfNet::<f32>::new(tiny_net_cfg(), &mut init).unwrap();
        let mut f2m_only = F2mfNet::<f32>::new(
            NetConfig {
                use_f2f: false,
                ..tiny_net_cfg()
            },
            &mut init,
        )
        .unwrap();
        let stats = NormStats::identity(32);
        let hist = beta_histogram(
            &mut store,
            &mut compound,
            &stats,
            Some(&mut f2m_only),
            None,
            &[0, 1],
            9,
            3,
        )
        .unwrap();
        let occupied: Vec<&BetaBin> = hist.bins.iter().filter(|b| b.cells > 0).collect();
        assert!(!occupied.is_empty());
        assert!(occupied.iter().all(|b| b.acc_f2m.is_some()));
        assert!(occupied
            .iter()
            .all(|b| (0.0..=1.0).contains(&b.acc_f2m.unwrap())));
        assert!(hist.bins.iter().all(|b| b.acc_f2f.is_none()));
    }

    #[test]
    fn mean_blend_concentrates_in_its_uniform_bin() {
        let mut store = tiny_store(1);
        let mut init = InitRng::seed_from_u64(7);
        let mut net = F2mfNet::<f32>::new(
            NetConfig {
                blend: BlendMode::Mean,
                ..tiny_net_cfg()
            },
            &mut init,
        )
        .unwrap();
        let stats = NormStats::identity(32);
        let hist =
            beta_histogram(&mut store, &mut net, &stats, None, None, &[0], 9, 3).unwrap();
        // Two warped frames and one content forecast share the weight
        // equally, so the motion share is 2/3 everywhere.
        assert!((hist.mean_f2m - 2.0 / 3.0).abs() < 1e-5);
        assert!((hist.bins[6].share - 1.0).abs() < 1e-9);
    }

    #[test]
    fn content_only_model_has_no_weights_to_histogram() {
        let mut store = tiny_store(1);
        let mut init = InitRng::seed_from_u64(7);
        let mut net = F2mfNet::<f32>::new(
            NetConfig {
                use_f2m: false,
                ..tiny_net_cfg()
            },
            &mut init,
        )
        .unwrap();
        let stats = NormStats::identity(32);
        let out = beta_histogram(&mut store, &mut net, &stats, None, None, &[0], 9, 3);
        assert!(out.is_err());
    }

    #[test]
    fn saliency_rejects_pixels_off_canvas() {
        let mut store = tiny_store(1);
        let mut init = InitRng::seed_from_u64(8);
        let mut net = F2mfNet::<f32>::new(tiny_net_cfg(), &mut init).unwrap();
        let stats = NormStats::identity(32);
        let out = saliency(&mut store, &mut net, &stats, 0, 9, (64, 10));
        assert!(out.is_err());
    }

    #[test]
    fn saliency_maps_cover_the_window_and_mask_the_top_cells() {
        let mut store = tiny_store(1);
        let mut init = InitRng::seed_from_u64(9);
        let mut net = F2mfNet::<f32>::new(tiny_net_cfg(), &mut init).unwrap();
        let stats = store.norm_stats(&[0], &[6, 9]).unwrap();
        let report = saliency(&mut store, &mut net, &stats, 0, 9, (32, 32)).unwrap();
        assert_eq!(report.maps.len(), 2);
        assert_eq!(report.h * report.w, 64);
        assert!(report.maps.iter().all(|m| m.len() == 64));
        let energy: f64 = report.maps.iter().flatten().sum();
        assert!(energy > 0.0, "saliency is identically zero");
        let kept: usize = report
            .mask
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count())
            .sum();
        assert!(kept >= 1);
        assert!((report.class as usize) < store.seg().classes());
    }

    #[test]
    fn blend_study_reuses_a_provided_per_pixel_report() {
        // Structure-only check: the reuse path must not retrain.
        let report = EvalReport {
            sequences: 1,
            pixels: 1,
            per_class_iou: vec![Some(1.0)],
            miou_all: 1.0,
            miou_moving: 1.0,
            feature_mse: 0.0,
            epe: None,
            beta_counts: None,
            mean_beta_f2m: None,
            mean_beta_f2m_novelty: None,
            clock: Default::default(),
        };
        let row = BlendRow {
            mode: BlendMode::PerPixel,
            outcome: None,
            report,
        };
        assert!(row.outcome.is_none());
        let csv = blend_csv(&[row]);
        assert!(csv.contains("per_pixel"));
    }
}
