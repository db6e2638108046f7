//! Ground-truth backward flow and novelty masks derived from sprite tracks.
//!
//! The flow convention matches the warp module: the value stored at a future
//! pixel p points to its source, s = p + flow(p), with channel 0 = dy and
//! channel 1 = dx. A future pixel is novel when its true source content is
//! visible in none of the observed frames.

use crate::render::RenderedFrame;
use f2mf_core::Tensor;

/// Backward flow from the target frame to one earlier source frame, at image
/// resolution. Sprite pixels move with their owner's track; background is
/// static, so everything else is zero.
pub fn backward_flow(
    tracks: &[Vec<(i64, i64)>],
    target_ids: &[i16],
    canvas: usize,
    t_target: usize,
    t_source: usize,
) -> Tensor<f32> {
    let mut flow = Tensor::zeros(1, 2, canvas, canvas);
    for (p, &id) in target_ids.iter().enumerate() {
        if id < 0 {
            continue;
        }
        let track = &tracks[id as usize];
        let dy = (track[t_source].0 - track[t_target].0) as f32;
        let dx = (track[t_source].1 - track[t_target].1) as f32;
        flow.plane_mut(0, 0)[p] = dy;
        flow.plane_mut(0, 1)[p] = dx;
    }
    flow
}

/// Marks target pixels with no visible source in any observed frame. A
/// sprite pixel's source in frame w is the same body point shifted by the
/// track; it counts as visible when it lies on the canvas and is the topmost
/// owner there. A background pixel's source is the pixel itself and is
/// visible whenever no sprite covers it.
pub fn novelty_mask(
    tracks: &[Vec<(i64, i64)>],
    target_ids: &[i16],
    t_target: usize,
    observed: &[(usize, &[i16])],
    canvas: usize,
) -> Vec<bool> {
    let mut novel = vec![true; canvas * canvas];
    for (p, &id) in target_ids.iter().enumerate() {
        let y = (p / canvas) as i64;
        let x = (p % canvas) as i64;
        let sourced = observed.iter().any(|&(t_w, ids_w)| {
            let (sy, sx) = if id < 0 {
                (y, x)
            } else {
                let track = &tracks[id as usize];
                (
                    y + track[t_w].0 - track[t_target].0,
                    x + track[t_w].1 - track[t_target].1,
                )
            };
            if sy < 0 || sx < 0 || sy >= canvas as i64 || sx >= canvas as i64 {
                return false;
            }
            ids_w[(sy as usize) * canvas + sx as usize] == id
        });
        novel[p] = !sourced;
    }
    novel
}

/// Average-pools a pixel-resolution flow field by `factor` and rescales the
/// displacements into pooled-grid cells.
pub fn pool_flow(flow: &Tensor<f32>, factor: usize) -> Tensor<f32> {
    let (n, c, h, w) = flow.dims();
    assert!(h % factor == 0 && w % factor == 0, "flow dims not divisible");
    let (ph, pw) = (h / factor, w / factor);
    let mut out = Tensor::zeros(n, c, ph, pw);
    let inv = 1.0 / (factor * factor * factor) as f32;
    for ni in 0..n {
        for ci in 0..c {
            let src = flow.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for py in 0..ph {
                for px in 0..pw {
                    let mut acc = 0.0f32;
                    for iy in 0..factor {
                        for ix in 0..factor {
                            acc += src[(py * factor + iy) * w + px * factor + ix];
                        }
                    }
                    dst[py * pw + px] = acc * inv;
                }
            }
        }
    }
    out
}

/// Pools a novelty mask: the pooled cell is novel if any pixel inside it is.
pub fn pool_novelty(mask: &[bool], canvas: usize, factor: usize) -> Vec<bool> {
    assert!(canvas % factor == 0, "mask dims not divisible");
    let pc = canvas / factor;
    let mut out = vec![false; pc * pc];
    for (p, &m) in mask.iter().enumerate() {
        if m {
            out[(p / canvas / factor) * pc + (p % canvas) / factor] = true;
        }
    }
    out
}

/// Bundles flow and novelty at both image and feature resolution for one
/// (target, window) pairing.
pub struct FlowTruth {
    /// One backward flow per observed frame, oldest first, feature grid.
    pub flows: Vec<Tensor<f32>>,
    pub novelty: Vec<bool>,
}

/// Computes pooled ground truth for a forecast: backward flow from the
/// target to every observed frame plus the pooled novelty mask.
pub fn flow_truth(
    tracks: &[Vec<(i64, i64)>],
    target: &RenderedFrame,
    t_target: usize,
    observed: &[(usize, &RenderedFrame)],
    canvas: usize,
    factor: usize,
) -> FlowTruth {
    let flows = observed
        .iter()
        .map(|&(t_w, _)| {
            let px = backward_flow(tracks, &target.ids, canvas, t_target, t_w);
            pool_flow(&px, factor)
        })
        .collect();
    let obs_ids: Vec<(usize, &[i16])> = observed
        .iter()
        .map(|&(t_w, f)| (t_w, f.ids.as_slice()))
        .collect();
    let novelty = novelty_mask(tracks, &target.ids, t_target, &obs_ids, canvas);
    FlowTruth {
        flows,
        novelty: pool_novelty(&novelty, canvas, factor),
    }
}
