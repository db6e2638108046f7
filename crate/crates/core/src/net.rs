//! The forecasting network: window fusion, a shared deformable trunk, the
//! motion head (per-frame backward flows), the content head (direct feature
//! regression), the weight head, and the per-pixel blend of both forecasts.

use crate::checkpoint::{self, param_record, stat_record, Record};
use crate::corr::{
    correlation_volume, correlation_volume_backward, l2_normalize_channels,
    l2_normalize_channels_backward, L2Ctx,
};
use crate::dconv::{DconvBlock, DconvBlockCtx};
use crate::error::{CoreError, Result};
use crate::init::InitRng;
use crate::ops::act::{softmax_channels, softmax_channels_backward};
use crate::ops::bn::Mode;
use crate::ops::concat::{concat_channels, concat_channels_backward};
use crate::ops::conv::Conv2d;
use crate::ops::loss::{mse, mse_backward};
use crate::param::{Param, VisitParams};
use crate::tensor::{Scalar, Tensor};
use crate::warp::{warp_backward, warp_backward_grad};
use std::path::Path;

/// How blend weights vary over the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlendMode {
    /// Weight maps regressed per pixel (default).
    PerPixel,
    /// Logits averaged over the image, one scalar weight per candidate.
    ImageLevel,
    /// Uniform weights, no weight head.
    Mean,
}

impl BlendMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_pixel" => Ok(BlendMode::PerPixel),
            "image_level" => Ok(BlendMode::ImageLevel),
            "mean" => Ok(BlendMode::Mean),
            other => Err(CoreError::Config(format!(
                "unknown blend mode {other:?}; expected per_pixel, image_level, or mean"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BlendMode::PerPixel => "per_pixel",
            BlendMode::ImageLevel => "image_level",
            BlendMode::Mean => "mean",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug)]
pub struct NetConfig {
    /// Input window length, 1 to 5 frames.
    pub t: usize,
    /// Feature channels per frame.
    pub c: usize,
    /// Fusion conv output width.
    pub c_f: usize,
    /// Trunk width.
    pub c_s: usize,
    /// Correlation embedding width.
    pub c_embed: usize,
    /// Correlation search window (odd).
    pub d: usize,
    pub blend: BlendMode,
    /// Keep the content head.
    pub use_f2f: bool,
    /// Keep the motion head.
    pub use_f2m: bool,
    /// Keep the correlation input to the trunk.
    pub use_corr: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            t: 4,
            c: 32,
            c_f: 32,
            c_s: 32,
            c_embed: 32,
            d: 9,
            blend: BlendMode::PerPixel,
            use_f2f: true,
            use_f2m: true,
            use_corr: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.t > 5 {
            return Err(CoreError::Config(format!(
                "window length must be 1 to 5, got {}",
                self.t
            )));
        }
        if !self.use_f2f && !self.use_f2m {
            return Err(CoreError::Config(
                "at least one of the motion and content heads must be enabled".into(),
            ));
        }
        if self.d % 2 == 0 {
            return Err(CoreError::Config(format!(
                "correlation window must be odd, got {}",
                self.d
            )));
        }
        for (name, v) in [
            ("feature channels", self.c),
            ("fusion width", self.c_f),
            ("trunk width", self.c_s),
            ("embedding width", self.c_embed),
        ] {
            if v == 0 {
                return Err(CoreError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Correlation feeds the trunk only when enabled and the window has pairs.
    pub fn corr_active(&self) -> bool {
        self.use_corr && self.t >= 2
    }

    pub fn corr_channels(&self) -> usize {
        if self.corr_active() {
            (self.t - 1) * self.d * self.d
        } else {
            0
        }
    }

    /// Channels entering the first trunk block.
    pub fn trunk_in_channels(&self) -> usize {
        self.c_f + self.corr_channels()
    }

    /// Weight head output channels: one logit per blend candidate.
    pub fn weight_channels(&self) -> usize {
        if !self.use_f2m || self.blend == BlendMode::Mean {
            0
        } else if self.use_f2f {
            self.t + 1
        } else {
            self.t
        }
    }
}

/// Per-pixel blend weights produced by the weight head.
pub struct BlendMaps<E> {
    /// Raw head logits; absent in mean mode.
    pub logits: Option<Tensor<E>>,
    /// Softmax over the motion logits, (n, T, h, w).
    pub alpha: Tensor<E>,
    /// Softmax over all candidate logits, (n, T+1, h, w) when the content
    /// head is present, otherwise equal to alpha.
    pub beta: Tensor<E>,
}

/// Outputs of a single forecasting step, all in normalized feature space.
pub struct ForecastResult<E> {
    /// Combined forecast, always present.
    pub f2mf: Tensor<E>,
    /// Motion-only forecast; present when both heads run.
    pub f2m: Option<Tensor<E>>,
    /// Content-only forecast; present when both heads run.
    pub f2f: Option<Tensor<E>>,
    /// Regressed backward flow per window frame, oldest first, (n, 2, h, w).
    pub flows: Vec<Tensor<E>>,
    /// Each window frame warped by its flow.
    pub warped: Vec<Tensor<E>>,
    pub blend: Option<BlendMaps<E>>,
}

/// Loss gradients flowing into the network outputs.
pub struct OutputGrads<E> {
    pub f2mf: Option<Tensor<E>>,
    pub f2f: Option<Tensor<E>>,
    pub f2m: Option<Tensor<E>>,
}

/// The three forecast penalties, all mean squared error in normalized space.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub l_f2mf: f64,
    pub l_f2f: f64,
    pub l_f2m: f64,
}

impl LossBreakdown {
    /// Unit-weighted sum of the terms.
    pub fn total(&self) -> f64 {
        self.l_f2mf + self.l_f2f + self.l_f2m
    }
}

/// Everything the backward pass needs from one forward call.
pub struct Trace<E> {
    window: Vec<Tensor<E>>,
    concat_win: Tensor<E>,
    embed_raws: Vec<Tensor<E>>,
    embed_l2: Vec<L2Ctx<E>>,
    embeds: Vec<Tensor<E>>,
    trunk_ctxs: Vec<DconvBlockCtx<E>>,
    f2m_ctx: Option<DconvBlockCtx<E>>,
    f2f_ctx: Option<DconvBlockCtx<E>>,
    weight_ctx: Option<DconvBlockCtx<E>>,
    flows: Vec<Tensor<E>>,
    warped: Vec<Tensor<E>>,
    f2f: Option<Tensor<E>>,
    alpha: Option<Tensor<E>>,
    beta: Option<Tensor<E>>,
}

/// Weighted per-pixel sum of candidate tensors: out = sum_k w_k * in_k with
/// the weight plane broadcast over channels.
pub fn blend_weighted<E: Scalar>(inputs: &[&Tensor<E>], weights: &Tensor<E>) -> Tensor<E> {
    let (n, c, h, w) = inputs[0].dims();
    assert_eq!(weights.dims(), (n, inputs.len(), h, w), "blend weight shape");
    let mut out = Tensor::zeros(n, c, h, w);
    for ni in 0..n {
        for (k, input) in inputs.iter().enumerate() {
            let wp = weights.plane(ni, k).to_vec();
            for ci in 0..c {
                let ip = input.plane(ni, ci);
                let op = out.plane_mut(ni, ci);
                for (i, (o, &x)) in op.iter_mut().zip(ip).enumerate() {
                    *o = *o + wp[i] * x;
                }
            }
        }
    }
    out
}

/// Gradients of `blend_weighted` w.r.t. the inputs and the weight maps.
pub fn blend_weighted_backward<E: Scalar>(
    inputs: &[&Tensor<E>],
    weights: &Tensor<E>,
    grad_out: &Tensor<E>,
) -> (Vec<Tensor<E>>, Tensor<E>) {
    let (n, c, h, w) = inputs[0].dims();
    let mut d_inputs: Vec<Tensor<E>> = inputs.iter().map(|_| Tensor::zeros(n, c, h, w)).collect();
    let mut d_weights = Tensor::zeros(n, inputs.len(), h, w);
    for ni in 0..n {
        for (k, input) in inputs.iter().enumerate() {
            let wp = weights.plane(ni, k).to_vec();
            for ci in 0..c {
                let gp = grad_out.plane(ni, ci);
                let ip = input.plane(ni, ci);
                let dip = d_inputs[k].plane_mut(ni, ci);
                for (i, (d, &g)) in dip.iter_mut().zip(gp).enumerate() {
                    *d = *d + wp[i] * g;
                }
                let dwp = d_weights.plane_mut(ni, k);
                for ((dw, &g), &x) in dwp.iter_mut().zip(gp).zip(ip) {
                    *dw = *dw + g * x;
                }
            }
        }
    }
    (d_inputs, d_weights)
}

fn split_flows<E: Scalar>(head_out: &Tensor<E>, t: usize) -> Vec<Tensor<E>> {
    let (n, c, h, w) = head_out.dims();
    assert_eq!(c, 2 * t, "flow head channels");
    let mut flows = Vec::with_capacity(t);
    for i in 0..t {
        let mut f = Tensor::zeros(n, 2, h, w);
        for ni in 0..n {
            f.plane_mut(ni, 0).copy_from_slice(head_out.plane(ni, 2 * i));
            f.plane_mut(ni, 1).copy_from_slice(head_out.plane(ni, 2 * i + 1));
        }
        flows.push(f);
    }
    flows
}

fn merge_flow_grads<E: Scalar>(grads: &[Tensor<E>]) -> Tensor<E> {
    let t = grads.len();
    let (n, _, h, w) = grads[0].dims();
    let mut out = Tensor::zeros(n, 2 * t, h, w);
    for (i, g) in grads.iter().enumerate() {
        for ni in 0..n {
            out.plane_mut(ni, 2 * i).copy_from_slice(g.plane(ni, 0));
            out.plane_mut(ni, 2 * i + 1).copy_from_slice(g.plane(ni, 1));
        }
    }
    out
}

fn spatial_mean_broadcast<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let (n, c, h, w) = x.dims();
    let inv = E::from_f64(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let m = x.plane(ni, ci).iter().copied().sum::<E>() * inv;
            out.plane_mut(ni, ci).iter_mut().for_each(|v| *v = m);
        }
    }
    out
}

pub struct F2mfNet<E> {
    cfg: NetConfig,
    embed: Option<Conv2d<E>>,
    fusion: Conv2d<E>,
    trunk: Vec<DconvBlock<E>>,
    f2m_head: Option<DconvBlock<E>>,
    f2f_head: Option<DconvBlock<E>>,
    weight_head: Option<DconvBlock<E>>,
}

impl<E: Scalar> F2mfNet<E> {
    pub fn new(cfg: NetConfig, rng: &mut InitRng) -> Result<Self> {
        cfg.validate()?;
        let embed = if cfg.corr_active() {
            Some(Conv2d::new("embed", rng, cfg.c, cfg.c_embed, 3, 1))
        } else {
            None
        };
        let fusion = Conv2d::new("fusion", rng, cfg.t * cfg.c, cfg.c_f, 1, 1);
        let mut trunk = Vec::with_capacity(6);
        let mut cin = cfg.trunk_in_channels();
        for i in 0..6 {
            trunk.push(DconvBlock::new(&format!("trunk{i}"), rng, cin, cfg.c_s, 3));
            cin = cfg.c_s;
        }
        let f2m_head = cfg
            .use_f2m
            .then(|| DconvBlock::new("f2m", rng, cfg.c_s, 2 * cfg.t, 3));
        let f2f_head = cfg
            .use_f2f
            .then(|| DconvBlock::new("f2f", rng, cfg.c_s, cfg.c, 3));
        let weight_head = (cfg.weight_channels() > 0)
            .then(|| DconvBlock::new("weight", rng, cfg.c_s, cfg.weight_channels(), 3));
        Ok(F2mfNet {
            cfg,
            embed,
            fusion,
            trunk,
            f2m_head,
            f2f_head,
            weight_head,
        })
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    fn check_window(&self, window: &[Tensor<E>]) -> Result<()> {
        if window.len() != self.cfg.t {
            return Err(CoreError::shape(
                "forecast window",
                format!("{} frames", self.cfg.t),
                format!("{} frames", window.len()),
            ));
        }
        let dims = window[0].dims();
        for f in window {
            if f.dims() != dims {
                return Err(CoreError::shape(
                    "forecast window",
                    format!("{dims:?}"),
                    format!("{:?}", f.dims()),
                ));
            }
        }
        if dims.1 != self.cfg.c {
            return Err(CoreError::shape(
                "forecast window channels",
                format!("{}", self.cfg.c),
                format!("{}", dims.1),
            ));
        }
        Ok(())
    }

    /// Full forward pass. The window is ordered oldest to newest and already
    /// normalized; outputs stay in normalized space.
    pub fn forward(
        &mut self,
        window: &[Tensor<E>],
        mode: Mode,
    ) -> Result<(ForecastResult<E>, Trace<E>)> {
        self.check_window(window)?;
        let t = self.cfg.t;
        let refs: Vec<&Tensor<E>> = window.iter().collect();
        let concat_win = concat_channels(&refs)?;
        let fusion_out = self.fusion.forward(&concat_win)?;

        let mut embed_raws = Vec::new();
        let mut embed_l2 = Vec::new();
        let mut embeds = Vec::new();
        let trunk_in = if let Some(embed) = &self.embed {
            for f in window {
                let raw = embed.forward(f)?;
                let (normed, ctx) = l2_normalize_channels(&raw);
                embed_raws.push(raw);
                embed_l2.push(ctx);
                embeds.push(normed);
            }
            let corr = correlation_volume(&embeds, self.cfg.d)?;
            concat_channels(&[&fusion_out, &corr])?
        } else {
            fusion_out
        };

        let mut trunk_ctxs = Vec::with_capacity(self.trunk.len());
        let mut x = trunk_in;
        for block in &mut self.trunk {
            let (y, ctx) = block.forward(&x, mode)?;
            trunk_ctxs.push(ctx);
            x = y;
        }
        let shared = x;

        let mut f2m_ctx = None;
        let mut flows = Vec::new();
        let mut warped = Vec::new();
        if let Some(head) = &mut self.f2m_head {
            let (out, ctx) = head.forward(&shared, mode)?;
            f2m_ctx = Some(ctx);
            flows = split_flows(&out, t);
            for (frame, flow) in window.iter().zip(&flows) {
                warped.push(warp_backward(frame, flow));
            }
        }

        let mut f2f_ctx = None;
        let mut f2f_out = None;
        if let Some(head) = &mut self.f2f_head {
            let (out, ctx) = head.forward(&shared, mode)?;
            f2f_ctx = Some(ctx);
            f2f_out = Some(out);
        }

        let (n, _, h, w) = window[0].dims();
        let mut weight_ctx = None;
        let mut logits = None;
        let (alpha, beta) = if self.cfg.use_f2m {
            let k = if self.cfg.use_f2f { t + 1 } else { t };
            let l_eff = match self.cfg.blend {
                BlendMode::Mean => Tensor::zeros(n, k, h, w),
                _ => {
                    let head = self.weight_head.as_mut().expect("weight head");
                    let (out, ctx) = head.forward(&shared, mode)?;
                    weight_ctx = Some(ctx);
                    let eff = match self.cfg.blend {
                        BlendMode::PerPixel => out.clone(),
                        BlendMode::ImageLevel => spatial_mean_broadcast(&out),
                        BlendMode::Mean => unreachable!(),
                    };
                    logits = Some(out);
                    eff
                }
            };
            let beta = softmax_channels(&l_eff);
            let alpha = if self.cfg.use_f2f {
                let parts = concat_channels_backward(&l_eff, &[t, 1]);
                softmax_channels(&parts[0])
            } else {
                beta.clone()
            };
            (Some(alpha), Some(beta))
        } else {
            (None, None)
        };

        let (f2mf, f2m) = match (&warped[..], &f2f_out, &beta) {
            ([], Some(f2f), _) => (f2f.clone(), None),
            (warps, None, Some(beta)) => {
                let inputs: Vec<&Tensor<E>> = warps.iter().collect();
                (blend_weighted(&inputs, beta), None)
            }
            (warps, Some(f2f), Some(beta)) => {
                let alpha = alpha.as_ref().expect("alpha");
                let warp_refs: Vec<&Tensor<E>> = warps.iter().collect();
                let f2m = blend_weighted(&warp_refs, alpha);
                let mut inputs = warp_refs;
                inputs.push(f2f);
                (blend_weighted(&inputs, beta), Some(f2m))
            }
            _ => unreachable!("validated head combination"),
        };

        let result = ForecastResult {
            f2mf,
            f2m,
            f2f: if self.cfg.use_f2m { f2f_out.clone() } else { None },
            flows: flows.clone(),
            warped: warped.clone(),
            blend: beta.as_ref().map(|b| BlendMaps {
                logits: logits.clone(),
                alpha: alpha.clone().expect("alpha"),
                beta: b.clone(),
            }),
        };
        let trace = Trace {
            window: window.to_vec(),
            concat_win,
            embed_raws,
            embed_l2,
            embeds,
            trunk_ctxs,
            f2m_ctx,
            f2f_ctx,
            weight_ctx,
            flows,
            warped,
            f2f: f2f_out,
            alpha,
            beta,
        };
        Ok((result, trace))
    }

    /// Forward without keeping the backward state.
    pub fn forecast(&mut self, window: &[Tensor<E>], mode: Mode) -> Result<ForecastResult<E>> {
        Ok(self.forward(window, mode)?.0)
    }

    /// Repeated forecasting: after each step the window drops its oldest
    /// frame and appends the combined forecast.
    pub fn autoregressive(
        &mut self,
        window: &[Tensor<E>],
        steps: usize,
        mode: Mode,
    ) -> Result<Vec<ForecastResult<E>>> {
        let mut win = window.to_vec();
        let mut results = Vec::with_capacity(steps);
        for _ in 0..steps {
            let r = self.forecast(&win, mode)?;
            win.remove(0);
            win.push(r.f2mf.clone());
            results.push(r);
        }
        Ok(results)
    }

    /// Backpropagates output gradients through the whole network,
    /// accumulating parameter gradients and returning the gradient w.r.t.
    /// each window frame.
    pub fn backward(&mut self, trace: &Trace<E>, grads: OutputGrads<E>) -> Result<Vec<Tensor<E>>> {
        let t = self.cfg.t;
        let (n, c, h, w) = trace.window[0].dims();
        let zero_like = || Tensor::<E>::zeros(n, c, h, w);

        let mut d_warped: Vec<Tensor<E>> = trace.warped.iter().map(|_| zero_like()).collect();
        let mut d_f2f = match (&trace.f2f, grads.f2f) {
            (Some(_), Some(g)) => Some(g),
            (Some(_), None) => Some(zero_like()),
            (None, _) => None,
        };
        let mut d_alpha: Option<Tensor<E>> = None;
        let mut d_beta: Option<Tensor<E>> = None;

        // Combined-forecast gradient distributes over the blend candidates.
        if let Some(d_f2mf) = &grads.f2mf {
            match (&trace.warped[..], &trace.f2f, &trace.beta) {
                ([], Some(_), _) => {
                    let d = d_f2f.as_mut().expect("content head grad");
                    d.add_assign(d_f2mf);
                }
                (warps, None, Some(beta)) => {
                    let inputs: Vec<&Tensor<E>> = warps.iter().collect();
                    let (d_in, d_w) = blend_weighted_backward(&inputs, beta, d_f2mf);
                    for (acc, d) in d_warped.iter_mut().zip(d_in) {
                        acc.add_assign(&d);
                    }
                    d_beta = Some(d_w);
                }
                (warps, Some(f2f), Some(beta)) => {
                    let mut inputs: Vec<&Tensor<E>> = warps.iter().collect();
                    inputs.push(f2f);
                    let (mut d_in, d_w) = blend_weighted_backward(&inputs, beta, d_f2mf);
                    let d_last = d_in.pop().expect("content candidate");
                    d_f2f.as_mut().expect("content head grad").add_assign(&d_last);
                    for (acc, d) in d_warped.iter_mut().zip(d_in) {
                        acc.add_assign(&d);
                    }
                    d_beta = Some(d_w);
                }
                _ => unreachable!("validated head combination"),
            }
        }

        // Motion-forecast gradient flows through the alpha blend.
        if let Some(d_f2m) = &grads.f2m {
            if let Some(alpha) = &trace.alpha {
                let inputs: Vec<&Tensor<E>> = trace.warped.iter().collect();
                let (d_in, d_a) = blend_weighted_backward(&inputs, alpha, d_f2m);
                for (acc, d) in d_warped.iter_mut().zip(d_in) {
                    acc.add_assign(&d);
                }
                d_alpha = Some(d_a);
            }
        }

        let mut window_grads: Vec<Tensor<E>> = trace.window.iter().map(|_| zero_like()).collect();
        let mut d_shared = Tensor::<E>::zeros(n, self.cfg.c_s, h, w);

        // Weight head: softmax backward, then the blend-mode adapter.
        if trace.beta.is_some() && self.cfg.blend != BlendMode::Mean {
            let beta = trace.beta.as_ref().expect("beta");
            let k = beta.c();
            let mut d_l_eff = match d_beta {
                Some(db) => softmax_channels_backward(beta, &db),
                None => Tensor::zeros(n, k, h, w),
            };
            if let (Some(da), Some(alpha), true) = (&d_alpha, &trace.alpha, self.cfg.use_f2f) {
                let d_alpha_logits = softmax_channels_backward(alpha, da);
                for ni in 0..n {
                    for ci in 0..t {
                        let src = d_alpha_logits.plane(ni, ci).to_vec();
                        let dst = d_l_eff.plane_mut(ni, ci);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            } else if let (Some(da), Some(alpha), false) =
                (&d_alpha, &trace.alpha, self.cfg.use_f2f)
            {
                // Without the content head beta aliases alpha.
                let extra = softmax_channels_backward(alpha, da);
                d_l_eff.add_assign(&extra);
            }
            let d_logits = match self.cfg.blend {
                BlendMode::PerPixel => d_l_eff,
                BlendMode::ImageLevel => {
                    let inv = E::from_f64(1.0 / (h * w) as f64);
                    let mut d = Tensor::zeros(n, k, h, w);
                    for ni in 0..n {
                        for ci in 0..k {
                            let s = d_l_eff.plane(ni, ci).iter().copied().sum::<E>() * inv;
                            d.plane_mut(ni, ci).iter_mut().for_each(|v| *v = s);
                        }
                    }
                    d
                }
                BlendMode::Mean => unreachable!(),
            };
            let head = self.weight_head.as_mut().expect("weight head");
            let ctx = trace.weight_ctx.as_ref().expect("weight trace");
            d_shared.add_assign(&head.backward(ctx, &d_logits));
        }

        // Content head.
        if let Some(dg) = &d_f2f {
            let head = self.f2f_head.as_mut().expect("content head");
            let ctx = trace.f2f_ctx.as_ref().expect("content trace");
            d_shared.add_assign(&head.backward(ctx, dg));
        }

        // Warps, then the motion head.
        if self.cfg.use_f2m {
            let mut flow_grads = Vec::with_capacity(t);
            for i in 0..t {
                let (gx, gflow) =
                    warp_backward_grad(&trace.window[i], &trace.flows[i], &d_warped[i]);
                window_grads[i].add_assign(&gx);
                flow_grads.push(gflow);
            }
            let d_head_out = merge_flow_grads(&flow_grads);
            let head = self.f2m_head.as_mut().expect("motion head");
            let ctx = trace.f2m_ctx.as_ref().expect("motion trace");
            d_shared.add_assign(&head.backward(ctx, &d_head_out));
        }

        // Trunk, in reverse.
        let mut d = d_shared;
        for (block, ctx) in self.trunk.iter_mut().zip(&trace.trunk_ctxs).rev() {
            d = block.backward(ctx, &d);
        }

        // Split into the fusion and correlation paths.
        let corr_ch = self.cfg.corr_channels();
        let d_fusion_out = if corr_ch > 0 {
            let parts = concat_channels_backward(&d, &[self.cfg.c_f, corr_ch]);
            let d_corr = &parts[1];
            let d_embeds = correlation_volume_backward(&trace.embeds, self.cfg.d, d_corr);
            let embed = self.embed.as_mut().expect("embedding conv");
            for i in 0..t {
                let d_raw =
                    l2_normalize_channels_backward(&trace.embed_raws[i], &trace.embed_l2[i], &d_embeds[i]);
                let gx = embed.backward(&trace.window[i], &d_raw);
                window_grads[i].add_assign(&gx);
            }
            parts[0].clone()
        } else {
            d
        };

        let d_concat = self.fusion.backward(&trace.concat_win, &d_fusion_out);
        let counts = vec![c; t];
        let pieces = concat_channels_backward(&d_concat, &counts);
        for (acc, piece) in window_grads.iter_mut().zip(pieces) {
            acc.add_assign(&piece);
        }
        Ok(window_grads)
    }

    /// Captures parameters and batchnorm running statistics as records, the
    /// same payload `save_checkpoint` writes.
    pub fn to_records(&mut self) -> Vec<Record> {
        let mut records = Vec::new();
        self.visit_params(&mut |p: &mut Param<E>| {
            records.push(param_record(p));
        });
        for bn in self.batchnorms() {
            let prefix = bn.gamma.name().trim_end_matches(".gamma").to_string();
            records.push(stat_record(
                format!("{prefix}.running_mean"),
                &bn.running_mean,
            ));
            records.push(stat_record(format!("{prefix}.running_var"), &bn.running_var));
        }
        records
    }

    /// Serializes parameters and batchnorm running statistics, plus any
    /// caller records (normalization stats, metadata).
    pub fn save_checkpoint(&mut self, path: &Path, extra: &[Record]) -> Result<()> {
        let mut records = self.to_records();
        records.extend_from_slice(extra);
        checkpoint::save_records(path, &records)
    }

    /// Restores parameters and running statistics saved by `save_checkpoint`.
    /// Returns the records that belong to the caller.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<Vec<Record>> {
        let records = checkpoint::load_records(path)?;
        self.restore_records(records)
    }

    /// Counterpart of `to_records`; leftover records are returned.
    pub fn restore_records(&mut self, records: Vec<Record>) -> Result<Vec<Record>> {
        let mut used = vec![false; records.len()];
        let mut missing = Vec::new();
        self.visit_params(&mut |p: &mut Param<E>| {
            match records.iter().position(|r| r.name == p.name()) {
                Some(i) => {
                    used[i] = true;
                    let vals = records[i].data.to_f64_vec();
                    if vals.len() == p.numel() {
                        for (dst, v) in p.value_mut().data_mut().iter_mut().zip(vals) {
                            *dst = E::from_f64(v);
                        }
                    } else {
                        missing.push(format!(
                            "{}: expected {} values, found {}",
                            p.name(),
                            p.numel(),
                            vals.len()
                        ));
                    }
                }
                None => missing.push(p.name().to_string()),
            }
        });
        if !missing.is_empty() {
            return Err(CoreError::Checkpoint(format!(
                "missing or mismatched parameters: {}",
                missing.join(", ")
            )));
        }
        for bn in self.batchnorms() {
            let prefix = bn.gamma.name().trim_end_matches(".gamma").to_string();
            for (suffix, dst) in [
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ] {
                let name = format!("{prefix}.{suffix}");
                let rec = records
                    .iter()
                    .position(|r| r.name == name)
                    .ok_or_else(|| CoreError::Checkpoint(format!("missing record {name}")))?;
                used[rec] = true;
                let vals = records[rec].data.to_f64_vec();
                if vals.len() != dst.len() {
                    return Err(CoreError::Checkpoint(format!(
                        "record {name}: expected {} values, found {}",
                        dst.len(),
                        vals.len()
                    )));
                }
                for (d, v) in dst.iter_mut().zip(vals) {
                    *d = E::from_f64(v);
                }
            }
        }
        Ok(records
            .into_iter()
            .zip(used)
            .filter_map(|(r, u)| (!u).then_some(r))
            .collect())
    }

    fn batchnorms(&mut self) -> Vec<&mut crate::ops::bn::BatchNorm2d<E>> {
        let mut bns = Vec::new();
        for block in &mut self.trunk {
            bns.push(&mut block.bn);
        }
        for head in [&mut self.f2m_head, &mut self.f2f_head, &mut self.weight_head]
            .into_iter()
            .flatten()
        {
            bns.push(&mut head.bn);
        }
        bns
    }
}

impl<E: Scalar> VisitParams<E> for F2mfNet<E> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        if let Some(embed) = &mut self.embed {
            embed.visit_params(f);
        }
        self.fusion.visit_params(f);
        for block in &mut self.trunk {
            block.visit_params(f);
        }
        for head in [&mut self.f2m_head, &mut self.f2f_head, &mut self.weight_head]
            .into_iter()
            .flatten()
        {
            head.visit_params(f);
        }
    }
}

/// Mean-squared-error terms for each forecast against the normalized target.
/// Absent heads contribute zero.
pub fn f2mf_loss<E: Scalar>(result: &ForecastResult<E>, target: &Tensor<E>) -> Result<LossBreakdown> {
    let l_f2mf = mse(&result.f2mf, target)?.as_f64();
    let l_f2f = match &result.f2f {
        Some(x) => mse(x, target)?.as_f64(),
        None => 0.0,
    };
    let l_f2m = match &result.f2m {
        Some(x) => mse(x, target)?.as_f64(),
        None => 0.0,
    };
    Ok(LossBreakdown { l_f2mf, l_f2f, l_f2m })
}

/// Gradients of the unit-weighted total loss w.r.t. each present forecast.
pub fn f2mf_loss_grads<E: Scalar>(result: &ForecastResult<E>, target: &Tensor<E>) -> OutputGrads<E> {
    OutputGrads {
        f2mf: Some(mse_backward(&result.f2mf, target, E::one())),
        f2f: result.f2f.as_ref().map(|x| mse_backward(x, target, E::one())),
        f2m: result.f2m.as_ref().map(|x| mse_backward(x, target, E::one())),
    }
}
