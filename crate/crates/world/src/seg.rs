//! Single-frame segmentation model. Its strided encoder produces the
//! feature tensors the forecaster consumes, and its pointwise decoder turns
//! features (observed or forecast) back into class logits. The two halves
//! compose exactly to the full model.

use crate::error::{Result, WorldError};
use f2mf_core::checkpoint::{self, param_record, stat_record};
use f2mf_core::init::InitRng;
use f2mf_core::ops::act::{relu, relu_backward};
use f2mf_core::ops::bn::{BatchNorm2d, BnCtx, Mode};
use f2mf_core::ops::conv::Conv2d;
use f2mf_core::ops::upsample::{upsample_bilinear, upsample_bilinear_backward};
use f2mf_core::optim::{cosine_lr, Adam};
use f2mf_core::param::{Param, VisitParams};
use f2mf_core::{CoreError, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::path::Path;

pub const FEATURE_CHANNELS: usize = 32;
pub const FEATURE_STRIDE: usize = 8;
pub const ENC_WIDTHS: [usize; 3] = [32, 48, FEATURE_CHANNELS];

/// Encoder of three stride-2 conv/batchnorm/relu blocks with no skip
/// connections, so the feature tensor is the only thing crossing to the
/// forecaster, plus a bilinear-upsample + pointwise decoder to k+1 logits.
pub struct TinySegModel<E> {
    k: usize,
    enc_conv: Vec<Conv2d<E>>,
    enc_bn: Vec<BatchNorm2d<E>>,
    head: Conv2d<E>,
}

/// Saved activations for one training forward pass.
pub struct SegTrace<E> {
    inputs: Vec<Tensor<E>>,
    bn_ctxs: Vec<BnCtx<E>>,
    pre_relu: Vec<Tensor<E>>,
    features: Tensor<E>,
    upsampled: Tensor<E>,
}

impl<E: Scalar> TinySegModel<E> {
    pub fn new(seed: u64, k: usize) -> Self {
        let mut rng = InitRng::seed_from_u64(seed);
        let mut enc_conv = Vec::new();
        let mut enc_bn = Vec::new();
        let mut cin = 3;
        for (i, &cout) in ENC_WIDTHS.iter().enumerate() {
            enc_conv.push(Conv2d::new(&format!("enc{i}"), &mut rng, cin, cout, 3, 2));
            enc_bn.push(BatchNorm2d::new(&format!("enc{i}"), cout));
            cin = cout;
        }
        let head = Conv2d::new("head", &mut rng, FEATURE_CHANNELS, k + 1, 1, 1);
        TinySegModel {
            k,
            enc_conv,
            enc_bn,
            head,
        }
    }

    pub fn classes(&self) -> usize {
        self.k + 1
    }

    /// Encoder half in inference mode: (n, 3, H, W) -> (n, 32, H/8, W/8).
    pub fn extract_features(&mut self, image: &Tensor<E>) -> Result<Tensor<E>> {
        let mut x = image.clone();
        for i in 0..self.enc_conv.len() {
            let pre = self.enc_conv[i].forward(&x)?;
            let (normed, _) = self.enc_bn[i].forward(&pre, Mode::Eval)?;
            x = relu(&normed);
        }
        Ok(x)
    }

    /// Decoder half: upsample the feature grid back to image resolution and
    /// apply the pointwise classifier.
    pub fn form_semantics(&self, features: &Tensor<E>) -> Result<Tensor<E>> {
        let up = upsample_bilinear(features, FEATURE_STRIDE);
        Ok(self.head.forward(&up)?)
    }

    /// Input gradient of `form_semantics`: maps a gradient on the logits
    /// back to a gradient on the feature grid. Also accumulates classifier
    /// parameter gradients, which probing callers can discard with
    /// `zero_grads`.
    pub fn form_semantics_backward(
        &mut self,
        features: &Tensor<E>,
        grad_logits: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let up = upsample_bilinear(features, FEATURE_STRIDE);
        let grad_up = self.head.backward(&up, grad_logits);
        let (_, _, fh, fw) = features.dims();
        Ok(upsample_bilinear_backward(&grad_up, fh, fw, FEATURE_STRIDE))
    }

    /// Full inference pass written straight through, used to confirm that
    /// the two halves compose to exactly this.
    pub fn predict(&mut self, image: &Tensor<E>) -> Result<Tensor<E>> {
        let mut x = image.clone();
        for i in 0..self.enc_conv.len() {
            let pre = self.enc_conv[i].forward(&x)?;
            let (normed, _) = self.enc_bn[i].forward(&pre, Mode::Eval)?;
            x = relu(&normed);
        }
        Ok(self.head.forward(&upsample_bilinear(&x, FEATURE_STRIDE))?)
    }

    /// Training-mode forward with batch statistics, keeping activations.
    pub fn forward_train(&mut self, images: &Tensor<E>) -> Result<(Tensor<E>, SegTrace<E>)> {
        let mut inputs = Vec::new();
        let mut bn_ctxs = Vec::new();
        let mut pre_relu = Vec::new();
        let mut x = images.clone();
        for i in 0..self.enc_conv.len() {
            inputs.push(x.clone());
            let pre = self.enc_conv[i].forward(&x)?;
            let (normed, ctx) = self.enc_bn[i].forward(&pre, Mode::Train)?;
            bn_ctxs.push(ctx);
            pre_relu.push(normed.clone());
            x = relu(&normed);
        }
        let features = x;
        let upsampled = upsample_bilinear(&features, FEATURE_STRIDE);
        let logits = self.head.forward(&upsampled)?;
        let trace = SegTrace {
            inputs,
            bn_ctxs,
            pre_relu,
            features,
            upsampled,
        };
        Ok((logits, trace))
    }

    /// Accumulates parameter gradients for one traced forward pass.
    pub fn backward(&mut self, trace: &SegTrace<E>, grad_logits: &Tensor<E>) {
        let grad_up = self.head.backward(&trace.upsampled, grad_logits);
        let (_, _, fh, fw) = trace.features.dims();
        let mut grad = upsample_bilinear_backward(&grad_up, fh, fw, FEATURE_STRIDE);
        for i in (0..self.enc_conv.len()).rev() {
            grad = relu_backward(&trace.pre_relu[i], &grad);
            grad = self.enc_bn[i].backward(&trace.bn_ctxs[i], &grad);
            grad = self.enc_conv[i].backward(&trace.inputs[i], &grad);
        }
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut records = Vec::new();
        self.visit_params(&mut |p: &mut Param<E>| records.push(param_record(p)));
        for bn in &self.enc_bn {
            let prefix = bn.gamma.name().trim_end_matches(".gamma").to_string();
            records.push(stat_record(
                format!("{prefix}.running_mean"),
                &bn.running_mean,
            ));
            records.push(stat_record(format!("{prefix}.running_var"), &bn.running_var));
        }
        checkpoint::save_records(path, &records)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let records = checkpoint::load_records(path)?;
        let mut missing = Vec::new();
        self.visit_params(&mut |p: &mut Param<E>| {
            match records.iter().find(|r| r.name == p.name()) {
                Some(r) if r.data.len() == p.numel() => {
                    let vals = r.data.to_f64_vec();
                    for (dst, v) in p.value_mut().data_mut().iter_mut().zip(vals) {
                        *dst = E::from_f64(v);
                    }
                }
                _ => missing.push(p.name().to_string()),
            }
        });
        for bn in &mut self.enc_bn {
            let prefix = bn.gamma.name().trim_end_matches(".gamma").to_string();
            for (suffix, dst) in [
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ] {
                let name = format!("{prefix}.{suffix}");
                match records.iter().find(|r| r.name == name) {
                    Some(r) if r.data.len() == dst.len() => {
                        for (d, v) in dst.iter_mut().zip(r.data.to_f64_vec()) {
                            *d = E::from_f64(v);
                        }
                    }
                    _ => missing.push(name),
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(WorldError::Core(CoreError::Checkpoint(format!(
                "missing or mismatched records: {}",
                missing.join(", ")
            ))))
        }
    }
}

impl<E: Scalar> VisitParams<E> for TinySegModel<E> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        for i in 0..self.enc_conv.len() {
            self.enc_conv[i].visit_params(f);
            self.enc_bn[i].visit_params(f);
        }
        self.head.visit_params(f);
    }
}

/// Per-pixel argmax over the channel axis; ties go to the lowest index.
pub fn predict_labels<E: Scalar>(logits: &Tensor<E>) -> Vec<u8> {
    let (n, c, h, w) = logits.dims();
    let mut out = vec![0u8; n * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let plane = logits.plane(ni, ci);
            let dst = &mut out[ni * h * w..(ni + 1) * h * w];
            if ci == 0 {
                continue;
            }
            for (p, &v) in plane.iter().enumerate() {
                let best = dst[p] as usize;
                if v.as_f64() > logits.plane(ni, best)[p].as_f64() {
                    dst[p] = ci as u8;
                }
            }
        }
    }
    out
}

/// Mean softmax cross-entropy over all pixels, with the gradient w.r.t. the
/// logits. Log-probabilities are evaluated in f64 via a per-pixel
/// log-sum-exp so large logits stay finite.
pub fn cross_entropy<E: Scalar>(logits: &Tensor<E>, labels: &[u8]) -> Result<(f64, Tensor<E>)> {
    let (n, c, h, w) = logits.dims();
    if labels.len() != n * h * w {
        return Err(WorldError::Data(format!(
            "cross_entropy: {} labels for {} pixels",
            labels.len(),
            n * h * w
        )));
    }
    let npix = (n * h * w) as f64;
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(n, c, h, w);
    let mut probs = vec![0.0f64; c];
    for ni in 0..n {
        for p in 0..h * w {
            let label = labels[ni * h * w + p] as usize;
            if label >= c {
                return Err(WorldError::Data(format!(
                    "cross_entropy: label {label} outside {c} classes"
                )));
            }
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(logits.plane(ni, ci)[p].as_f64());
            }
            let mut sum = 0.0f64;
            for ci in 0..c {
                let e = (logits.plane(ni, ci)[p].as_f64() - max).exp();
                probs[ci] = e;
                sum += e;
            }
            loss -= ((probs[label] / sum).ln()) / npix;
            for ci in 0..c {
                let mut g = probs[ci] / sum;
                if ci == label {
                    g -= 1.0;
                }
                grad.plane_mut(ni, ci)[p] = E::from_f64(g / npix);
            }
        }
    }
    Ok((loss, grad))
}

/// Fraction of pixels where the predicted label equals the reference.
pub fn pixel_accuracy(pred: &[u8], want: &[u8]) -> f64 {
    assert_eq!(pred.len(), want.len());
    let hits = pred.iter().zip(want).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

/// Stacks single-image tensors (1, c, h, w) into one batch (b, c, h, w).
pub fn stack_batch<E: Scalar>(frames: &[&Tensor<E>]) -> Tensor<E> {
    assert!(!frames.is_empty());
    let (_, c, h, w) = frames[0].dims();
    let mut out = Tensor::zeros(frames.len(), c, h, w);
    for (b, f) in frames.iter().enumerate() {
        assert_eq!(f.dims(), (1, c, h, w), "batch member shape mismatch");
        for ci in 0..c {
            out.plane_mut(b, ci).copy_from_slice(f.plane(0, ci));
        }
    }
    out
}

pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 6,
            batch: 8,
            lr0: 2e-3,
            lr_min: 1e-5,
            seed: 17,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SegEpoch {
    pub lr: f64,
    pub mean_loss: f64,
}

/// Trains the model on labeled single frames with Adam and a cosine
/// learning-rate schedule. A non-finite loss aborts with diagnostics.
pub fn train_single_frame<E: Scalar>(
    model: &mut TinySegModel<E>,
    images: &[Tensor<E>],
    labels: &[Vec<u8>],
    cfg: &SegTrainConfig,
) -> Result<Vec<SegEpoch>> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(WorldError::Data(format!(
            "training set has {} images and {} label maps",
            images.len(),
            labels.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr0);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        adam.lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min);
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<&Tensor<E>> = chunk.iter().map(|&i| &images[i]).collect();
            let stacked = stack_batch(&batch);
            let mut batch_labels = Vec::new();
            for &i in chunk {
                batch_labels.extend_from_slice(&labels[i]);
            }
            let (logits, trace) = model.forward_train(&stacked)?;
            let (loss, grad) = cross_entropy(&logits, &batch_labels)?;
            if !loss.is_finite() {
                return Err(WorldError::Diverged(format!(
                    "loss {loss} at epoch {epoch} step {step}"
                )));
            }
            model.zero_grads();
            model.backward(&trace, &grad);
            adam.step(model)?;
            total += loss;
            batches += 1;
        }
        log.push(SegEpoch {
            lr: adam.lr,
            mean_loss: total / batches as f64,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::Renderer;
    use crate::scene::{SceneParams, WorldConfig};

    fn to_f64(image: &Tensor<f32>) -> Tensor<f64> {
        let (n, c, h, w) = image.dims();
        let mut out = Tensor::zeros(n, c, h, w);
        for (d, &s) in out.data_mut().iter_mut().zip(image.data()) {
            *d = s as f64;
        }
        out
    }

    #[test]
    fn feature_grid_is_one_eighth_of_the_image() {
        let mut model = TinySegModel::<f32>::new(1, 4);
        let x = Tensor::zeros(1, 3, 64, 64);
        let f = model.extract_features(&x).unwrap();
        assert_eq!(f.dims(), (1, FEATURE_CHANNELS, 8, 8));
        let logits = model.form_semantics(&f).unwrap();
        assert_eq!(logits.dims(), (1, 5, 64, 64));
    }

    #[test]
    fn halves_compose_to_the_full_model_bit_exactly() {
        let cfg = WorldConfig::default();
        let scene = SceneParams::generate(3, &cfg).unwrap();
        let frame = Renderer::new(&scene).render(4);
        let mut model = TinySegModel::<f32>::new(9, 4);
        let direct = model.predict(&frame.image).unwrap();
        let features = model.extract_features(&frame.image).unwrap();
        let composed = model.form_semantics(&features).unwrap();
        assert_eq!(direct.max_abs_diff(&composed), 0.0);
    }

    #[test]
    fn features_stay_finite_across_random_frames() {
        let cfg = WorldConfig::default();
        let mut model = TinySegModel::<f32>::new(2, 4);
        let mut seen = 0;
        for seed in 0..20u64 {
            let scene = SceneParams::generate(seed, &cfg).unwrap();
            let r = Renderer::new(&scene);
            for t in [0usize, 5, 10, 15, 21] {
                let f = model.extract_features(&r.render(t).image).unwrap();
                assert!(f.data().iter().all(|v| v.is_finite()));
                seen += 1;
            }
        }
        assert_eq!(seen, 100);
    }

    #[test]
    fn argmax_prefers_the_lowest_index_on_ties() {
        let logits = Tensor::<f64>::from_chw(
            3,
            1,
            2,
            vec![
                0.5, 1.0, // class 0
                0.5, 2.0, // class 1
                0.5, 2.0, // class 2
            ],
        );
        assert_eq!(predict_labels(&logits), vec![0, 1]);
    }

    #[test]
    fn cross_entropy_matches_a_scalar_oracle() {
        // Two pixels, three classes, hand-evaluated softmax.
        let logits =
            Tensor::<f64>::from_chw(3, 1, 2, vec![1.0, 0.0, 2.0, 0.5, -1.0, 3.0]);
        let labels = vec![2u8, 1];
        let (loss, grad) = cross_entropy(&logits, &labels).unwrap();
        let mut want = 0.0;
        for (p, &lab) in labels.iter().enumerate() {
            let z: Vec<f64> = (0..3).map(|c| logits.plane(0, c)[p]).collect();
            let sum: f64 = z.iter().map(|v| v.exp()).sum();
            want -= (z[lab as usize].exp() / sum).ln() / 2.0;
        }
        assert!((loss - want).abs() < 1e-12);
        for p in 0..2 {
            let z: Vec<f64> = (0..3).map(|c| logits.plane(0, c)[p]).collect();
            let sum: f64 = z.iter().map(|v| v.exp()).sum();
            for c in 0..3 {
                let mut g = z[c].exp() / sum;
                if c == labels[p] as usize {
                    g -= 1.0;
                }
                assert!((grad.plane(0, c)[p] - g / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut logits = Tensor::<f64>::from_chw(4, 2, 2, (0..16).map(|i| (i as f64) * 0.3 - 2.0).collect());
        let labels = vec![0u8, 3, 1, 2];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..16 {
            let orig = logits.data()[i];
            logits.data_mut()[i] = orig + h;
            let (lp, _) = cross_entropy(&logits, &labels).unwrap();
            logits.data_mut()[i] = orig - h;
            let (lm, _) = cross_entropy(&logits, &labels).unwrap();
            logits.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((grad.data()[i] - fd).abs() < 1e-8, "logit {i}");
        }
    }

    #[test]
    fn training_gradients_match_finite_differences() {
        let cfg = WorldConfig {
            canvas: 16,
            min_half: 3.0,
            max_half: 4.0,
            ..WorldConfig::default()
        };
        let scene = SceneParams::generate(5, &cfg).unwrap();
        let frame = Renderer::new(&scene).render(0);
        let image = to_f64(&frame.image);
        let mut model = TinySegModel::<f64>::new(11, 4);

        let (logits, trace) = model.forward_train(&image).unwrap();
        let (_, grad_logits) = cross_entropy(&logits, &frame.labels).unwrap();
        model.zero_grads();
        model.backward(&trace, &grad_logits);

        let mut analytic = Vec::new();
        model.visit_params(&mut |p| {
            for i in [0usize, p.numel() / 2, p.numel() - 1] {
                analytic.push((p.name().to_string(), i, p.grad().data()[i]));
            }
        });
        let h = 1e-5;
        for (name, idx, g) in analytic {
            let probe = |delta: f64, model: &mut TinySegModel<f64>| {
                model.visit_params(&mut |p| {
                    if p.name() == name {
                        p.value_mut().data_mut()[idx] += delta;
                    }
                });
                let (logits, _) = model.forward_train(&image).unwrap();
                let (loss, _) = cross_entropy(&logits, &frame.labels).unwrap();
                model.visit_params(&mut |p| {
                    if p.name() == name {
                        p.value_mut().data_mut()[idx] -= delta;
                    }
                });
                loss
            };
            let fd = (probe(h, &mut model) - probe(-h, &mut model)) / (2.0 * h);
            let denom = g.abs().max(fd.abs()).max(1e-8);
            assert!(
                (g - fd).abs() / denom < 1e-4,
                "{name}[{idx}]: analytic {g}, fd {fd}"
            );
        }
    }

    #[test]
    fn background_only_world_trains_to_near_perfect_accuracy() {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for seed in 0..8u64 {
            let scene = SceneParams {
                canvas: 32,
                length: 1,
                k: 1,
                bg_seed: seed as u32,
                sprites: vec![],
            };
            let frame = Renderer::new(&scene).render(0);
            images.push(frame.image);
            labels.push(frame.labels);
        }
        let mut model = TinySegModel::<f32>::new(2, 1);
        let cfg = SegTrainConfig {
            epochs: 2,
            batch: 4,
            ..SegTrainConfig::default()
        };
        train_single_frame(&mut model, &images, &labels, &cfg).unwrap();
        let mut hits = 0usize;
        let mut total = 0usize;
        for (image, want) in images.iter().zip(&labels) {
            let pred = predict_labels(&model.predict(image).unwrap());
            hits += pred.iter().zip(want).filter(|(a, b)| a == b).count();
            total += want.len();
        }
        assert!(hits as f64 / total as f64 >= 0.999);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let scene = SceneParams {
            canvas: 16,
            length: 1,
            k: 1,
            bg_seed: 1,
            sprites: vec![],
        };
        let frame = Renderer::new(&scene).render(0);
        let images = vec![frame.image.clone(), frame.image];
        let labels = vec![frame.labels.clone(), frame.labels];
        let mut model = TinySegModel::<f32>::new(0, 1);
        let cfg = SegTrainConfig {
            epochs: 1,
            batch: 1,
            lr0: f64::NAN,
            ..SegTrainConfig::default()
        };
        let err = train_single_frame(&mut model, &images, &labels, &cfg).unwrap_err();
        match err {
            WorldError::Diverged(msg) => assert!(msg.contains("epoch 0")),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip_restores_predictions_bit_exactly() {
        let cfg = WorldConfig::default();
        let scene = SceneParams::generate(6, &cfg).unwrap();
        let frame = Renderer::new(&scene).render(7);
        let mut model = TinySegModel::<f32>::new(21, 4);
        // Make running stats nontrivial before saving.
        let (_, _) = model.forward_train(&frame.image).unwrap();
        let want = model.predict(&frame.image).unwrap();

        let dir = std::env::temp_dir().join("f2mf_seg_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("seg.ckpt");
        model.save(&path).unwrap();

        let mut other = TinySegModel::<f32>::new(99, 4);
        assert!(other.predict(&frame.image).unwrap().max_abs_diff(&want) > 0.0);
        other.load(&path).unwrap();
        let got = other.predict(&frame.image).unwrap();
        assert_eq!(got.max_abs_diff(&want), 0.0);
        std::fs::remove_file(&path).ok();
    }
}
