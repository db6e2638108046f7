//! Multiply-accumulate accounting for every stage of the pipeline,
//! computed from layer shapes alone.

use f2mf_core::net::NetConfig;
use f2mf_world::seg::{ENC_WIDTHS, FEATURE_STRIDE};

/// MACs of a dense convolution producing a `h_out` by `w_out` map.
pub fn conv_macs(cin: usize, cout: usize, h_out: usize, w_out: usize, k: usize) -> u64 {
    (cout * h_out * w_out * cin * k * k) as u64
}

/// MACs of a deformable block: the offset regressor, the main convolution,
/// and four multiplies per bilinear tap.
pub fn dconv_macs(cin: usize, cout: usize, h: usize, w: usize, k: usize) -> u64 {
    let offset = conv_macs(cin, 2 * k * k, h, w, k);
    let main = conv_macs(cin, cout, h, w, k);
    let taps = (4 * k * k * cin * h * w) as u64;
    offset + main + taps
}

/// MACs of the correlation volume between consecutive embedded frames.
pub fn corr_macs(t: usize, d: usize, h: usize, w: usize, c_embed: usize) -> u64 {
    ((t - 1) * d * d * h * w * c_embed) as u64
}

/// MACs of bilinear upsampling: four multiplies per output value.
pub fn upsample_macs(c: usize, h_out: usize, w_out: usize) -> u64 {
    (4 * c * h_out * w_out) as u64
}

/// MACs of warping one feature map: four multiplies per output value.
pub fn warp_macs(c: usize, h: usize, w: usize) -> u64 {
    (4 * c * h * w) as u64
}

/// One accounted component.
#[derive(Clone, Debug)]
pub struct MacRow {
    pub stage: &'static str,
    pub component: String,
    pub macs: u64,
}

/// Full cost table of the pipeline at a given canvas size.
#[derive(Clone, Debug)]
pub struct MacReport {
    pub rows: Vec<MacRow>,
}

impl MacReport {
    pub fn stage_total(&self, stage: &str) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.macs)
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("stage,component,macs\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.stage, r.component, r.macs));
        }
        out
    }

    /// Human-readable table with stage subtotals.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for stage in ["extraction", "forecasting", "semantics"] {
            out.push_str(&format!("{stage}:\n"));
            for r in self.rows.iter().filter(|r| r.stage == stage) {
                out.push_str(&format!("  {:<28} {:>12}\n", r.component, r.macs));
            }
            out.push_str(&format!(
                "  {:<28} {:>12}\n",
                "subtotal",
                self.stage_total(stage)
            ));
        }
        out.push_str(&format!("total: {}\n", self.total()));
        out
    }
}

/// Feature extraction cost: the frozen encoder applied to every window
/// frame at full resolution.
fn extraction_rows(canvas: usize, t: usize, rows: &mut Vec<MacRow>) {
    let mut cin = 3;
    let mut side = canvas;
    let mut per_frame = Vec::new();
    for (i, &cout) in ENC_WIDTHS.iter().enumerate() {
        side /= 2;
        per_frame.push((format!("enc{i} ({cin}->{cout})"), conv_macs(cin, cout, side, side, 3)));
        cin = cout;
    }
    for (name, macs) in per_frame {
        rows.push(MacRow {
            stage: "extraction",
            component: format!("{name} x{t} frames"),
            macs: macs * t as u64,
        });
    }
}

/// Forecasting cost from the architecture config at feature resolution.
fn forecasting_rows(cfg: &NetConfig, h: usize, w: usize, rows: &mut Vec<MacRow>) {
    let t = cfg.t;
    let mut push = |component: String, macs: u64| {
        rows.push(MacRow {
            stage: "forecasting",
            component,
            macs,
        });
    };
    if cfg.corr_active() {
        push(
            format!("embed 3x3 x{t} frames"),
            conv_macs(cfg.c, cfg.c_embed, h, w, 3) * t as u64,
        );
        push(
            "correlation".into(),
            corr_macs(t, cfg.d, h, w, cfg.c_embed),
        );
    }
    push(
        "fusion 1x1".into(),
        conv_macs(t * cfg.c, cfg.c_f, h, w, 1),
    );
    let trunk_in = cfg.trunk_in_channels();
    push("trunk block 0".into(), dconv_macs(trunk_in, cfg.c_s, h, w, 3));
    push(
        "trunk blocks 1-5".into(),
        5 * dconv_macs(cfg.c_s, cfg.c_s, h, w, 3),
    );
    if cfg.use_f2m {
        push(
            "motion head".into(),
            dconv_macs(cfg.c_s, 2 * t, h, w, 3),
        );
        push(format!("warps x{t}"), warp_macs(cfg.c, h, w) * t as u64);
    }
    if cfg.use_f2f {
        push("content head".into(), dconv_macs(cfg.c_s, cfg.c, h, w, 3));
    }
    let wc = cfg.weight_channels();
    if wc > 0 {
        push("weight head".into(), dconv_macs(cfg.c_s, wc, h, w, 3));
    }
    if cfg.use_f2m {
        // Blending multiplies every candidate map by its weight.
        let candidates = t + usize::from(cfg.use_f2f);
        push("blend".into(), (candidates * cfg.c * h * w) as u64);
    }
}

/// Decode cost: upsampling the forecast features and applying the
/// classifier head at full resolution.
fn semantics_rows(canvas: usize, c: usize, classes: usize, rows: &mut Vec<MacRow>) {
    rows.push(MacRow {
        stage: "semantics",
        component: "upsample x8".into(),
        macs: upsample_macs(c, canvas, canvas),
    });
    rows.push(MacRow {
        stage: "semantics",
        component: "classifier 1x1".into(),
        macs: conv_macs(c, classes, canvas, canvas, 1),
    });
}

/// Builds the full cost table for a forecaster at the given canvas size.
pub fn mac_report(cfg: &NetConfig, canvas: usize, classes: usize) -> MacReport {
    let h = canvas / FEATURE_STRIDE;
    let mut rows = Vec::new();
    extraction_rows(canvas, cfg.t, &mut rows);
    forecasting_rows(cfg, h, h, &mut rows);
    semantics_rows(canvas, cfg.c, classes, &mut rows);
    MacReport { rows }
}
