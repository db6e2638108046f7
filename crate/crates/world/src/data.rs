//! On-disk dataset cache: one file of scene parameters per sequence in the
//! tensor record format, plus a plain-text manifest assigning splits.
//! Storing parameters instead of frames keeps files tiny and lets any
//! consumer re-render sequences bit-identically.

use crate::error::{Result, WorldError};
use crate::scene::{SceneParams, Sprite, SpriteShape, WorldConfig};
use f2mf_core::checkpoint::{self, Record};
use std::fmt;
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(WorldError::Data(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One manifest row: sequence file name and its split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqEntry {
    pub name: String,
    pub split: Split,
}

impl SeqEntry {
    pub fn path(&self, dir: &Path) -> PathBuf {
        dir.join(&self.name)
    }
}

/// Sizes and seeding of a generated dataset. Sequence i is generated from
/// seed `base_seed + i` and named `seq_<seed>_<i>`.
#[derive(Clone, Copy, Debug)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub base_seed: u64,
}

impl DatasetSpec {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.n_train {
            Split::Train
        } else if index < self.n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

pub fn scene_to_records(scene: &SceneParams) -> Vec<Record> {
    let mut records = vec![Record::f64(
        "meta",
        vec![4],
        vec![
            scene.canvas as f64,
            scene.length as f64,
            scene.k as f64,
            scene.bg_seed as f64,
        ],
    )];
    for (i, s) in scene.sprites.iter().enumerate() {
        records.push(Record::f64(
            format!("sprite{i}"),
            vec![10],
            vec![
                s.shape.code() as f64,
                s.class as f64,
                s.half,
                s.tint,
                s.pos.0,
                s.pos.1,
                s.vel.0,
                s.vel.1,
                s.jitter,
                s.jitter_seed as f64,
            ],
        ));
    }
    records
}

pub fn scene_from_records(records: &[Record]) -> Result<SceneParams> {
    let meta = checkpoint::find(records, "meta")?;
    let m = meta.data.to_f64_vec();
    if m.len() != 4 {
        return Err(WorldError::Data(format!(
            "meta record has {} values, expected 4",
            m.len()
        )));
    }
    let mut sprites = Vec::new();
    loop {
        let name = format!("sprite{}", sprites.len());
        let Some(rec) = records.iter().find(|r| r.name == name) else {
            break;
        };
        let v = rec.data.to_f64_vec();
        if v.len() != 10 {
            return Err(WorldError::Data(format!(
                "{name} has {} values, expected 10",
                v.len()
            )));
        }
        sprites.push(Sprite {
            shape: SpriteShape::from_code(v[0] as u8)?,
            class: v[1] as u8,
            half: v[2],
            tint: v[3],
            pos: (v[4], v[5]),
            vel: (v[6], v[7]),
            jitter: v[8],
            jitter_seed: v[9] as u32,
        });
    }
    let expected = 1 + sprites.len();
    if records.len() != expected {
        let extras: Vec<&str> = records
            .iter()
            .map(|r| r.name.as_str())
            .filter(|n| *n != "meta" && !n.starts_with("sprite"))
            .collect();
        return Err(WorldError::Data(format!(
            "unexpected records in scene file: {}",
            extras.join(", ")
        )));
    }
    Ok(SceneParams {
        canvas: m[0] as usize,
        length: m[1] as usize,
        k: m[2] as usize,
        bg_seed: m[3] as u32,
        sprites,
    })
}

pub fn save_scene(path: &Path, scene: &SceneParams) -> Result<()> {
    checkpoint::save_records(path, &scene_to_records(scene))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<SceneParams> {
    let records = checkpoint::load_records(path)?;
    scene_from_records(&records)
}

/// Generates every sequence of the dataset into `dir` and writes the
/// manifest. Rerunning with the same spec and config produces bit-identical
/// files. Returns the manifest rows in order.
pub fn gen_dataset(dir: &Path, spec: &DatasetSpec, cfg: &WorldConfig) -> Result<Vec<SeqEntry>> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(spec.total());
    let mut manifest = String::new();
    for i in 0..spec.total() {
        let seed = spec.base_seed + i as u64;
        let scene = SceneParams::generate(seed, cfg)?;
        let name = format!("seq_{seed}_{i}");
        save_scene(&dir.join(&name), &scene)?;
        let split = spec.split_of(i);
        manifest.push_str(&format!("{name} {split}\n"));
        entries.push(SeqEntry { name, split });
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(entries)
}

/// Reads the manifest back. Lines are `<name> <split>`.
pub fn load_manifest(dir: &Path) -> Result<Vec<SeqEntry>> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(name), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(WorldError::Data(format!(
                "manifest line {}: expected `<name> <split>`, got {line:?}",
                lineno + 1
            )));
        };
        entries.push(SeqEntry {
            name: name.to_string(),
            split: Split::parse(split)?,
        });
    }
    Ok(entries)
}

/// Loads the scenes of one split, in manifest order, as (entry, scene).
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<(SeqEntry, SceneParams)>> {
    let mut out = Vec::new();
    for entry in load_manifest(dir)? {
        if entry.split == split {
            let scene = load_scene(&entry.path(dir))?;
            out.push((entry, scene));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::Renderer;

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("f2mf_world_data_{tag}"));
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn scene_records_roundtrip_exactly() {
        let cfg = WorldConfig::default();
        let scene = SceneParams::generate(77, &cfg).unwrap();
        let back = scene_from_records(&scene_to_records(&scene)).unwrap();
        assert_eq!(back.canvas, scene.canvas);
        assert_eq!(back.length, scene.length);
        assert_eq!(back.k, scene.k);
        assert_eq!(back.bg_seed, scene.bg_seed);
        assert_eq!(back.sprites.len(), scene.sprites.len());
        for (a, b) in back.sprites.iter().zip(&scene.sprites) {
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.class, b.class);
            assert_eq!(a.half, b.half);
            assert_eq!(a.tint, b.tint);
            assert_eq!(a.pos, b.pos);
            assert_eq!(a.vel, b.vel);
            assert_eq!(a.jitter, b.jitter);
            assert_eq!(a.jitter_seed, b.jitter_seed);
        }
        assert_eq!(back.tracks(), scene.tracks());
    }

    #[test]
    fn dataset_generation_roundtrips_through_the_manifest() {
        let dir = temp_dir("roundtrip");
        let cfg = WorldConfig {
            canvas: 80,
            ..WorldConfig::default()
        };
        let spec = DatasetSpec {
            n_train: 4,
            n_val: 2,
            n_test: 2,
            base_seed: 100,
        };
        let entries = gen_dataset(&dir, &spec, &cfg).unwrap();
        assert_eq!(entries.len(), 8);
        assert_eq!(entries[0].name, "seq_100_0");
        assert_eq!(entries[7].name, "seq_107_7");
        assert_eq!(load_manifest(&dir).unwrap(), entries);
        assert_eq!(load_split(&dir, Split::Val).unwrap().len(), 2);

        // A reloaded scene renders identically to direct generation.
        let scene = load_scene(&dir.join("seq_103_3")).unwrap();
        let direct = SceneParams::generate(103, &cfg).unwrap();
        let a = Renderer::new(&scene).render(6);
        let b = Renderer::new(&direct).render(6);
        assert_eq!(a.image.max_abs_diff(&b.image), 0.0);
        assert_eq!(a.labels, b.labels);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let dir = temp_dir("regen");
        let cfg = WorldConfig {
            canvas: 80,
            ..WorldConfig::default()
        };
        let spec = DatasetSpec {
            n_train: 3,
            n_val: 1,
            n_test: 1,
            base_seed: 40,
        };
        gen_dataset(&dir, &spec, &cfg).unwrap();
        let before: Vec<Vec<u8>> = (0..5)
            .map(|i| std::fs::read(dir.join(format!("seq_{}_{i}", 40 + i))).unwrap())
            .collect();
        let manifest_before = std::fs::read(dir.join(MANIFEST_NAME)).unwrap();
        gen_dataset(&dir, &spec, &cfg).unwrap();
        for (i, want) in before.iter().enumerate() {
            let got = std::fs::read(dir.join(format!("seq_{}_{i}", 40 + i))).unwrap();
            assert_eq!(&got, want, "file {i} changed across reruns");
        }
        assert_eq!(
            std::fs::read(dir.join(MANIFEST_NAME)).unwrap(),
            manifest_before
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_manifest_lines_are_rejected() {
        let dir = temp_dir("badmanifest");
        std::fs::write(dir.join(MANIFEST_NAME), "seq_1_0 train extra\n").unwrap();
        assert!(matches!(
            load_manifest(&dir),
            Err(WorldError::Data(_))
        ));
        std::fs::write(dir.join(MANIFEST_NAME), "seq_1_0 dev\n").unwrap();
        assert!(matches!(load_manifest(&dir), Err(WorldError::Data(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn foreign_records_in_a_scene_file_are_rejected() {
        let mut records = scene_to_records(
            &SceneParams::generate(5, &WorldConfig::default()).unwrap(),
        );
        records.push(Record::f64("mystery", vec![1], vec![0.0]));
        let err = scene_from_records(&records).unwrap_err();
        match err {
            WorldError::Data(msg) => assert!(msg.contains("mystery")),
            other => panic!("unexpected error {other}"),
        }
    }
}
