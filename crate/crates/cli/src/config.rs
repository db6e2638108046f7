//! Flat `key = value` run configuration with `#` comments. Unknown keys and
//! malformed values are rejected with line and field diagnostics.

use anyhow::{bail, Context, Result};
use f2mf_core::net::{BlendMode, NetConfig};
use f2mf_harness::train::TrainConfig;
use f2mf_world::data::DatasetSpec;
use f2mf_world::scene::WorldConfig;
use f2mf_world::seg::SegTrainConfig;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Everything a command run may need, with desk-scale defaults. Config-file
/// values overwrite defaults; command-line flags overwrite both.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub oracle: PathBuf,
    pub forecaster: PathBuf,

    pub world: WorldConfig,
    pub dataset: DatasetSpec,

    pub seg_seed: u64,
    pub seg_scenes: usize,
    pub seg_frames: Vec<usize>,
    pub seg: SegTrainConfig,

    pub train: TrainConfig,
    pub eval_split: String,
    pub eval_sequences: usize,
    pub ar_steps: usize,

    pub sal_sequence: Option<usize>,
    pub sal_y: Option<usize>,
    pub sal_x: Option<usize>,
    pub sal_class: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            oracle: PathBuf::from("data/oracle.ckpt"),
            forecaster: PathBuf::from("data/forecaster.ckpt"),
            world: WorldConfig::default(),
            dataset: DatasetSpec {
                n_train: 1600,
                n_val: 200,
                n_test: 200,
                base_seed: 20_260_401,
            },
            seg_seed: 2_026,
            seg_scenes: 120,
            seg_frames: vec![0, 9, 18],
            seg: SegTrainConfig {
                epochs: 20,
                ..SegTrainConfig::default()
            },
            train: TrainConfig::default(),
            eval_split: "test".into(),
            eval_sequences: 64,
            ar_steps: 3,
            sal_sequence: None,
            sal_y: None,
            sal_x: None,
            sal_class: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| {
        anyhow::anyhow!(
            "config line {line} ({key}): invalid value '{raw}' for {}",
            std::any::type_name::<T>()
        )
    })
}

fn parse_bool(line: usize, key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("config line {line} ({key}): expected 'true' or 'false', got '{raw}'"),
    }
}

fn parse_list(line: usize, key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|p| parse_num(line, key, p.trim()))
        .collect()
}

pub fn parse_blend(raw: &str) -> Result<BlendMode> {
    match raw {
        "mean" => Ok(BlendMode::Mean),
        "image" => Ok(BlendMode::ImageLevel),
        "pixel" => Ok(BlendMode::PerPixel),
        _ => bail!("expected one of mean|image|pixel, got '{raw}'"),
    }
}

fn blend_name(mode: BlendMode) -> &'static str {
    match mode {
        BlendMode::Mean => "mean",
        BlendMode::ImageLevel => "image",
        BlendMode::PerPixel => "pixel",
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut cfg = RunConfig::default();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                bail!("config line {line}: expected 'key = value', got '{content}'");
            };
            cfg.apply(line, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "oracle" => self.oracle = PathBuf::from(value),
            "forecaster" => self.forecaster = PathBuf::from(value),

            "canvas" => self.world.canvas = parse_num(line, key, value)?,
            "classes" => self.world.k = parse_num(line, key, value)?,
            "length" => self.world.length = parse_num(line, key, value)?,
            "min_sprites" => self.world.min_sprites = parse_num(line, key, value)?,
            "max_sprites" => self.world.max_sprites = parse_num(line, key, value)?,
            "min_half" => self.world.min_half = parse_num(line, key, value)?,
            "max_half" => self.world.max_half = parse_num(line, key, value)?,
            "min_speed" => self.world.min_speed = parse_num(line, key, value)?,
            "max_speed" => self.world.max_speed = parse_num(line, key, value)?,
            "jitter" => self.world.jitter = parse_num(line, key, value)?,
            "enter_prob" => self.world.enter_prob = parse_num(line, key, value)?,
            "texture_cells" => self.world.texture_cells = parse_num(line, key, value)?,

            "n_train" => self.dataset.n_train = parse_num(line, key, value)?,
            "n_val" => self.dataset.n_val = parse_num(line, key, value)?,
            "n_test" => self.dataset.n_test = parse_num(line, key, value)?,
            "base_seed" => self.dataset.base_seed = parse_num(line, key, value)?,

            "seg_seed" => self.seg_seed = parse_num(line, key, value)?,
            "seg_scenes" => self.seg_scenes = parse_num(line, key, value)?,
            "seg_frames" => self.seg_frames = parse_list(line, key, value)?,
            "seg_epochs" => self.seg.epochs = parse_num(line, key, value)?,
            "seg_batch" => self.seg.batch = parse_num(line, key, value)?,
            "seg_lr0" => self.seg.lr0 = parse_num(line, key, value)?,
            "seg_lr_min" => self.seg.lr_min = parse_num(line, key, value)?,

            "epochs" => self.train.epochs = parse_num(line, key, value)?,
            "batch" => self.train.batch = parse_num(line, key, value)?,
            "lr0" => self.train.lr0 = parse_num(line, key, value)?,
            "lr_min" => self.train.lr_min = parse_num(line, key, value)?,
            "patience" => self.train.patience = parse_num(line, key, value)?,
            "seed" => self.train.seed = parse_num(line, key, value)?,
            "dt" => self.train.dt = parse_num(line, key, value)?,
            "anchors" => self.train.anchors = parse_list(line, key, value)?,
            "eval_anchor" => self.train.eval_anchor = parse_num(line, key, value)?,
            "steps_per_epoch" => {
                let n: usize = parse_num(line, key, value)?;
                self.train.steps_per_epoch = (n > 0).then_some(n);
            }
            "val_subset" => self.train.val_subset = parse_num(line, key, value)?,

            "frames" => self.train.net.t = parse_num(line, key, value)?,
            "c" => self.train.net.c = parse_num(line, key, value)?,
            "c_f" => self.train.net.c_f = parse_num(line, key, value)?,
            "c_s" => self.train.net.c_s = parse_num(line, key, value)?,
            "c_embed" => self.train.net.c_embed = parse_num(line, key, value)?,
            "d" => self.train.net.d = parse_num(line, key, value)?,
            "blend" => {
                self.train.net.blend = parse_blend(value)
                    .map_err(|e| anyhow::anyhow!("config line {line} ({key}): {e}"))?
            }
            "use_f2f" => self.train.net.use_f2f = parse_bool(line, key, value)?,
            "use_f2m" => self.train.net.use_f2m = parse_bool(line, key, value)?,
            "use_corr" => self.train.net.use_corr = parse_bool(line, key, value)?,

            "eval_split" => match value {
                "train" | "val" | "test" => self.eval_split = value.into(),
                _ => bail!("config line {line} ({key}): expected train|val|test, got '{value}'"),
            },
            "eval_sequences" => self.eval_sequences = parse_num(line, key, value)?,
            "ar_steps" => self.ar_steps = parse_num(line, key, value)?,

            "sal_sequence" => self.sal_sequence = Some(parse_num(line, key, value)?),
            "sal_y" => self.sal_y = Some(parse_num(line, key, value)?),
            "sal_x" => self.sal_x = Some(parse_num(line, key, value)?),
            "sal_class" => self.sal_class = Some(parse_num(line, key, value)?),

            _ => bail!("config line {line}: unknown key '{key}'"),
        }
        Ok(())
    }

    /// The effective configuration in the same flat format the parser reads,
    /// written to each run's manifest.
    pub fn manifest(&self, command: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {command}");
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "oracle = {}", self.oracle.display());
        let _ = writeln!(s, "forecaster = {}", self.forecaster.display());
        let w = &self.world;
        let _ = writeln!(s, "canvas = {}", w.canvas);
        let _ = writeln!(s, "classes = {}", w.k);
        let _ = writeln!(s, "length = {}", w.length);
        let _ = writeln!(s, "min_sprites = {}", w.min_sprites);
        let _ = writeln!(s, "max_sprites = {}", w.max_sprites);
        let _ = writeln!(s, "min_half = {}", w.min_half);
        let _ = writeln!(s, "max_half = {}", w.max_half);
        let _ = writeln!(s, "min_speed = {}", w.min_speed);
        let _ = writeln!(s, "max_speed = {}", w.max_speed);
        let _ = writeln!(s, "jitter = {}", w.jitter);
        let _ = writeln!(s, "enter_prob = {}", w.enter_prob);
        let _ = writeln!(s, "texture_cells = {}", w.texture_cells);
        let d = &self.dataset;
        let _ = writeln!(s, "n_train = {}", d.n_train);
        let _ = writeln!(s, "n_val = {}", d.n_val);
        let _ = writeln!(s, "n_test = {}", d.n_test);
        let _ = writeln!(s, "base_seed = {}", d.base_seed);
        let _ = writeln!(s, "seg_seed = {}", self.seg_seed);
        let _ = writeln!(s, "seg_scenes = {}", self.seg_scenes);
        let _ = writeln!(s, "seg_frames = {}", join(&self.seg_frames));
        let _ = writeln!(s, "seg_epochs = {}", self.seg.epochs);
        let _ = writeln!(s, "seg_batch = {}", self.seg.batch);
        let _ = writeln!(s, "seg_lr0 = {}", self.seg.lr0);
        let _ = writeln!(s, "seg_lr_min = {}", self.seg.lr_min);
        let t = &self.train;
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "lr0 = {}", t.lr0);
        let _ = writeln!(s, "lr_min = {}", t.lr_min);
        let _ = writeln!(s, "patience = {}", t.patience);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "dt = {}", t.dt);
        let _ = writeln!(s, "anchors = {}", join(&t.anchors));
        let _ = writeln!(s, "eval_anchor = {}", t.eval_anchor);
        let _ = writeln!(s, "steps_per_epoch = {}", t.steps_per_epoch.unwrap_or(0));
        let _ = writeln!(s, "val_subset = {}", t.val_subset);
        let n = &t.net;
        let _ = writeln!(s, "frames = {}", n.t);
        let _ = writeln!(s, "c = {}", n.c);
        let _ = writeln!(s, "c_f = {}", n.c_f);
        let _ = writeln!(s, "c_s = {}", n.c_s);
        let _ = writeln!(s, "c_embed = {}", n.c_embed);
        let _ = writeln!(s, "d = {}", n.d);
        let _ = writeln!(s, "blend = {}", blend_name(n.blend));
        let _ = writeln!(s, "use_f2f = {}", n.use_f2f);
        let _ = writeln!(s, "use_f2m = {}", n.use_f2m);
        let _ = writeln!(s, "use_corr = {}", n.use_corr);
        let _ = writeln!(s, "eval_split = {}", self.eval_split);
        let _ = writeln!(s, "eval_sequences = {}", self.eval_sequences);
        let _ = writeln!(s, "ar_steps = {}", self.ar_steps);
        if let Some(v) = self.sal_sequence {
            let _ = writeln!(s, "sal_sequence = {v}");
        }
        if let Some(v) = self.sal_y {
            let _ = writeln!(s, "sal_y = {v}");
        }
        if let Some(v) = self.sal_x {
            let _ = writeln!(s, "sal_x = {v}");
        }
        if let Some(v) = self.sal_class {
            let _ = writeln!(s, "sal_class = {v}");
        }
        s
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes the network shape next to a checkpoint so loaders can rebuild the
/// exact architecture before reading weights.
pub fn write_net_sidecar(path: &Path, cfg: &NetConfig) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "frames = {}", cfg.t);
    let _ = writeln!(s, "c = {}", cfg.c);
    let _ = writeln!(s, "c_f = {}", cfg.c_f);
    let _ = writeln!(s, "c_s = {}", cfg.c_s);
    let _ = writeln!(s, "c_embed = {}", cfg.c_embed);
    let _ = writeln!(s, "d = {}", cfg.d);
    let _ = writeln!(s, "blend = {}", blend_name(cfg.blend));
    let _ = writeln!(s, "use_f2f = {}", cfg.use_f2f);
    let _ = writeln!(s, "use_f2m = {}", cfg.use_f2m);
    let _ = writeln!(s, "use_corr = {}", cfg.use_corr);
    std::fs::write(sidecar_path(path), s)
        .with_context(|| format!("cannot write sidecar for {}", path.display()))?;
    Ok(())
}

pub fn read_net_sidecar(path: &Path) -> Result<NetConfig> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)
        .with_context(|| format!("cannot read net sidecar {}", side.display()))?;
    let mut cfg = NetConfig::default();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            bail!("sidecar line {line}: expected 'key = value', got '{content}'");
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "frames" => cfg.t = parse_num(line, key, value)?,
            "c" => cfg.c = parse_num(line, key, value)?,
            "c_f" => cfg.c_f = parse_num(line, key, value)?,
            "c_s" => cfg.c_s = parse_num(line, key, value)?,
            "c_embed" => cfg.c_embed = parse_num(line, key, value)?,
            "d" => cfg.d = parse_num(line, key, value)?,
            "blend" => {
                cfg.blend = parse_blend(value)
                    .map_err(|e| anyhow::anyhow!("sidecar line {line} ({key}): {e}"))?
            }
            "use_f2f" => cfg.use_f2f = parse_bool(line, key, value)?,
            "use_f2m" => cfg.use_f2m = parse_bool(line, key, value)?,
            "use_corr" => cfg.use_corr = parse_bool(line, key, value)?,
            _ => bail!("sidecar line {line}: unknown key '{key}'"),
        }
    }
    Ok(cfg)
}

/// Writes the oracle's class count and seed next to its checkpoint.
pub fn write_oracle_sidecar(path: &Path, k: usize, seed: u64) -> Result<()> {
    let s = format!("classes = {k}\nseg_seed = {seed}\n");
    std::fs::write(sidecar_path(path), s)
        .with_context(|| format!("cannot write sidecar for {}", path.display()))?;
    Ok(())
}

pub fn read_oracle_sidecar(path: &Path) -> Result<(usize, u64)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)
        .with_context(|| format!("cannot read oracle sidecar {}", side.display()))?;
    let (mut k, mut seed) = (None, None);
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            bail!("sidecar line {line}: expected 'key = value', got '{content}'");
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "classes" => k = Some(parse_num(line, key, value)?),
            "seg_seed" => seed = Some(parse_num(line, key, value)?),
            _ => bail!("sidecar line {line}: unknown key '{key}'"),
        }
    }
    match (k, seed) {
        (Some(k), Some(seed)) => Ok((k, seed)),
        _ => bail!("oracle sidecar {} is missing classes or seg_seed", side.display()),
    }
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("cfg")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(name: &str, content: &str) -> PathBuf {
        let path = std::env::temp_dir().join(name);
        std::fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn parses_keys_comments_and_blanks() {
        let path = write_tmp(
            "f2mf_cli_cfg_ok.txt",
            "# a comment\n\nn_train = 12  # trailing\nblend = image\nanchors = 9, 12\n",
        );
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.dataset.n_train, 12);
        assert_eq!(cfg.train.net.blend, BlendMode::ImageLevel);
        assert_eq!(cfg.train.anchors, vec![9, 12]);
        std::fs::remove_file(path).unwrap();
    }

    #[test]
    fn rejects_unknown_key_with_line_number() {
        let path = write_tmp("f2mf_cli_cfg_unknown.txt", "n_train = 5\nbogus = 1\n");
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("bogus"), "{err}");
        std::fs::remove_file(path).unwrap();
    }

    #[test]
    fn rejects_bad_value_with_field_name() {
        let path = write_tmp("f2mf_cli_cfg_badval.txt", "epochs = many\n");
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
        assert!(err.contains("many"), "{err}");
        std::fs::remove_file(path).unwrap();
    }

    #[test]
    fn manifest_reparses_to_the_same_config() {
        let mut cfg = RunConfig::default();
        cfg.train.net.blend = BlendMode::Mean;
        cfg.train.steps_per_epoch = Some(7);
        cfg.dataset.n_val = 3;
        let manifest = cfg.manifest("eval");
        let path = write_tmp("f2mf_cli_cfg_roundtrip.txt", &manifest);
        let text = std::fs::read_to_string(&path).unwrap();
        let no_command: String = text
            .lines()
            .filter(|l| !l.starts_with("command"))
            .map(|l| format!("{l}\n"))
            .collect();
        std::fs::write(&path, no_command).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.train.net.blend, BlendMode::Mean);
        assert_eq!(back.train.steps_per_epoch, Some(7));
        assert_eq!(back.dataset.n_val, 3);
        assert_eq!(back.manifest("eval"), manifest);
        std::fs::remove_file(path).unwrap();
    }

    #[test]
    fn net_sidecar_roundtrips() {
        let ckpt = std::env::temp_dir().join("f2mf_cli_sidecar.ckpt");
        let cfg = NetConfig {
            t: 2,
            d: 5,
            blend: BlendMode::ImageLevel,
            use_corr: false,
            ..NetConfig::default()
        };
        write_net_sidecar(&ckpt, &cfg).unwrap();
        let back = read_net_sidecar(&ckpt).unwrap();
        assert_eq!(back.t, 2);
        assert_eq!(back.d, 5);
        assert_eq!(back.blend, BlendMode::ImageLevel);
        assert!(!back.use_corr);
        std::fs::remove_file(sidecar_path(&ckpt)).unwrap();
    }
}
