//! Lazy feature extraction over a dataset of scenes, with in-memory
//! memoization keyed by (sequence, frame). Sequences are re-rendered from
//! their parameters on first touch, so only the frames an experiment
//! actually visits are ever extracted.

use crate::error::{HarnessError, Result};
use f2mf_core::norm::NormStats;
use f2mf_core::Tensor;
use f2mf_world::render::Renderer;
use f2mf_world::scene::SceneParams;
use f2mf_world::seg::TinySegModel;
use std::collections::HashMap;

/// Offset between consecutive window frames, in sequence steps.
pub const WINDOW_STRIDE: usize = 3;
/// Downsampling factor between the image and the feature grid.
pub const FEATURE_FACTOR: usize = f2mf_world::seg::FEATURE_STRIDE;

/// Window frame indices for a forecast anchored at `anchor`: `t` frames
/// ending at the anchor, oldest first.
pub fn window_frames(anchor: usize, t: usize) -> Result<Vec<usize>> {
    let span = WINDOW_STRIDE * (t - 1);
    if span > anchor {
        return Err(HarnessError::Config(format!(
            "window of {t} frames ending at {anchor} starts before the sequence"
        )));
    }
    Ok((0..t).map(|i| anchor - span + i * WINDOW_STRIDE).collect())
}

/// Frozen single-frame model plus the dataset scenes, with feature and
/// label maps cached per (sequence index, frame).
pub struct FeatureStore {
    seg: TinySegModel<f32>,
    scenes: Vec<SceneParams>,
    features: HashMap<(usize, usize), Tensor<f32>>,
    labels: HashMap<(usize, usize), Vec<u8>>,
}

impl FeatureStore {
    pub fn new(seg: TinySegModel<f32>, scenes: Vec<SceneParams>) -> Self {
        FeatureStore {
            seg,
            scenes,
            features: HashMap::new(),
            labels: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scene(&self, idx: usize) -> &SceneParams {
        &self.scenes[idx]
    }

    pub fn seg(&self) -> &TinySegModel<f32> {
        &self.seg
    }

    pub fn seg_mut(&mut self) -> &mut TinySegModel<f32> {
        &mut self.seg
    }

    pub fn cached_features(&self) -> usize {
        self.features.len()
    }

    /// Encoder features of one frame, extracted on first access.
    pub fn features(&mut self, idx: usize, frame: usize) -> Result<Tensor<f32>> {
        if let Some(f) = self.features.get(&(idx, frame)) {
            return Ok(f.clone());
        }
        let rendered = Renderer::new(&self.scenes[idx]).render(frame);
        let feats = self.seg.extract_features(&rendered.image)?;
        self.labels.insert((idx, frame), rendered.labels);
        self.features.insert((idx, frame), feats.clone());
        Ok(feats)
    }

    /// Ground-truth label map of one frame at image resolution.
    pub fn labels(&mut self, idx: usize, frame: usize) -> Vec<u8> {
        if let Some(l) = self.labels.get(&(idx, frame)) {
            return l.clone();
        }
        let rendered = Renderer::new(&self.scenes[idx]).render(frame);
        self.labels.insert((idx, frame), rendered.labels.clone());
        rendered.labels
    }

    /// Normalized feature window for a forecast anchor, oldest first.
    pub fn window(
        &mut self,
        idx: usize,
        anchor: usize,
        t: usize,
        stats: &NormStats,
    ) -> Result<Vec<Tensor<f32>>> {
        window_frames(anchor, t)?
            .into_iter()
            .map(|f| Ok(stats.normalize(&self.features(idx, f)?)))
            .collect()
    }

    /// Normalized features of a single frame.
    pub fn normalized(&mut self, idx: usize, frame: usize, stats: &NormStats) -> Result<Tensor<f32>> {
        Ok(stats.normalize(&self.features(idx, frame)?))
    }

    /// Per-channel mean and standard deviation over the given sequences and
    /// frames, the dataset-wide statistics training normalizes with.
    pub fn norm_stats(&mut self, indices: &[usize], frames: &[usize]) -> Result<NormStats> {
        if indices.is_empty() || frames.is_empty() {
            return Err(HarnessError::Data(
                "normalization statistics need at least one sequence and frame".into(),
            ));
        }
        let mut all = Vec::with_capacity(indices.len() * frames.len());
        for &idx in indices {
            for &f in frames {
                all.push(self.features(idx, f)?);
            }
        }
        Ok(NormStats::compute(all.iter()))
    }

    /// Pre-extracts the given frames of the given sequences.
    pub fn warm(&mut self, indices: &[usize], frames: &[usize]) -> Result<()> {
        for &idx in indices {
            for &f in frames {
                self.features(idx, f)?;
            }
        }
        Ok(())
    }
}

/// Stacks per-sequence tensors with equal shape into one batch along n.
pub fn stack<E: f2mf_core::Scalar>(tensors: &[&Tensor<E>]) -> Tensor<E> {
    assert!(!tensors.is_empty());
    let (n0, c, h, w) = tensors[0].dims();
    assert_eq!(n0, 1, "stack expects single-item tensors");
    let mut out = Tensor::zeros(tensors.len(), c, h, w);
    for (b, t) in tensors.iter().enumerate() {
        assert_eq!(t.dims(), (1, c, h, w));
        for ci in 0..c {
            out.plane_mut(b, ci).copy_from_slice(t.plane(0, ci));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use f2mf_world::scene::WorldConfig;

    fn small_store(n: usize) -> FeatureStore {
        let cfg = WorldConfig {
            canvas: 64,
            min_half: 5.0,
            max_half: 9.0,
            ..WorldConfig::default()
        };
        let scenes: Vec<SceneParams> = (0..n as u64)
            .map(|s| SceneParams::generate(s, &cfg).unwrap())
            .collect();
        FeatureStore::new(TinySegModel::new(7, cfg.k), scenes)
    }

    #[test]
    fn window_frames_follow_the_stride() {
        assert_eq!(window_frames(12, 4).unwrap(), vec![3, 6, 9, 12]);
        assert_eq!(window_frames(9, 4).unwrap(), vec![0, 3, 6, 9]);
        assert_eq!(window_frames(12, 1).unwrap(), vec![12]);
        assert!(window_frames(6, 4).is_err());
    }

    #[test]
    fn cache_returns_identical_features_without_re_extraction() {
        let mut store = small_store(2);
        let a = store.features(0, 3).unwrap();
        assert_eq!(store.cached_features(), 1);
        let b = store.features(0, 3).unwrap();
        assert_eq!(store.cached_features(), 1);
        assert_eq!(a.max_abs_diff(&b), 0.0);
        store.features(1, 3).unwrap();
        assert_eq!(store.cached_features(), 2);
    }

    #[test]
    fn normalized_windows_have_unit_scale_statistics() {
        let mut store = small_store(6);
        let indices: Vec<usize> = (0..6).collect();
        let stats = store.norm_stats(&indices, &[0, 3, 6, 9]).unwrap();
        let win = store.window(0, 9, 4, &stats).unwrap();
        assert_eq!(win.len(), 4);
        // Pooled over the whole train set the normalized features are
        // zero-mean unit-variance per channel; a single window is just
        // loosely centered.
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for w in &win {
            for &v in w.data() {
                sum += v as f64;
                count += 1;
            }
        }
        assert!((sum / count as f64).abs() < 1.0);
    }

    #[test]
    fn labels_match_a_fresh_render() {
        let mut store = small_store(1);
        let labels = store.labels(0, 5);
        let fresh = Renderer::new(store.scene(0)).render(5);
        assert_eq!(labels, fresh.labels);
    }

    #[test]
    fn stacking_preserves_member_planes() {
        let mut a = Tensor::<f32>::zeros(1, 2, 3, 3);
        a.plane_mut(0, 1).fill(2.0);
        let mut b = Tensor::<f32>::zeros(1, 2, 3, 3);
        b.plane_mut(0, 0).fill(-1.0);
        let s = stack(&[&a, &b]);
        assert_eq!(s.dims(), (2, 2, 3, 3));
        assert_eq!(s.plane(0, 1), a.plane(0, 1));
        assert_eq!(s.plane(1, 0), b.plane(0, 0));
    }
}
