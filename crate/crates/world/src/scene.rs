//! Sprite scene parameters and their deterministic generation.
//!
//! A scene is a static textured background plus a handful of moving sprites.
//! Every quantity is a pure function of the seed, so a scene can be
//! re-rendered bit-identically from its stored parameters.

use crate::error::{Result, WorldError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteShape {
    Rect,
    Disc,
    Triangle,
}

impl SpriteShape {
    pub fn code(self) -> u8 {
        match self {
            SpriteShape::Rect => 0,
            SpriteShape::Disc => 1,
            SpriteShape::Triangle => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(SpriteShape::Rect),
            1 => Ok(SpriteShape::Disc),
            2 => Ok(SpriteShape::Triangle),
            other => Err(WorldError::Data(format!("unknown shape code {other}"))),
        }
    }
}

/// One moving sprite. Positions and velocities are in pixels with (y, x)
/// axis order, matching the flow tensor channel order (dy, dx).
#[derive(Clone, Debug)]
pub struct Sprite {
    pub shape: SpriteShape,
    /// Semantic class, 1..=k (0 is background).
    pub class: u8,
    /// Half-extent in pixels.
    pub half: f64,
    /// Brightness factor applied to the class color.
    pub tint: f64,
    /// Center position at step 0, (y, x).
    pub pos: (f64, f64),
    /// Base velocity in px/step, (vy, vx).
    pub vel: (f64, f64),
    /// Per-step velocity jitter amplitude in px/step.
    pub jitter: f64,
    /// Seed of the jitter stream.
    pub jitter_seed: u32,
}

/// Everything needed to re-render a sequence.
#[derive(Clone, Debug)]
pub struct SceneParams {
    /// Square canvas side in pixels.
    pub canvas: usize,
    /// Number of rendered steps.
    pub length: usize,
    /// Sprite class count (labels run 0..=k).
    pub k: usize,
    /// Seed of the background texture.
    pub bg_seed: u32,
    /// Render order: later sprites occlude earlier ones.
    pub sprites: Vec<Sprite>,
}

/// Generation knobs for random scenes.
#[derive(Clone, Debug)]
pub struct WorldConfig {
    pub canvas: usize,
    pub k: usize,
    pub length: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    /// Sprite half-extent range in pixels.
    pub min_half: f64,
    pub max_half: f64,
    /// Speed range in px/step.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Velocity jitter amplitude in px/step.
    pub jitter: f64,
    /// Probability that a sprite starts outside the canvas and moves in.
    pub enter_prob: f64,
    /// Background texture grid resolution.
    pub texture_cells: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            canvas: 128,
            k: 4,
            length: 22,
            min_sprites: 1,
            max_sprites: 5,
            min_half: 9.0,
            max_half: 19.0,
            min_speed: 1.5,
            max_speed: 4.5,
            jitter: 0.25,
            enter_prob: 0.25,
            texture_cells: 8,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas < (4.0 * self.max_half) as usize {
            return Err(WorldError::Config(format!(
                "canvas {} too small for sprites with half-extent up to {}",
                self.canvas, self.max_half
            )));
        }
        if self.min_sprites > self.max_sprites || self.max_sprites == 0 {
            return Err(WorldError::Config(format!(
                "bad sprite count range {}..={}",
                self.min_sprites, self.max_sprites
            )));
        }
        if self.k == 0 || self.k > 8 {
            return Err(WorldError::Config(format!(
                "class count must be 1..=8, got {}",
                self.k
            )));
        }
        if self.min_speed > self.max_speed || self.min_speed < 0.0 {
            return Err(WorldError::Config(format!(
                "bad speed range {}..={}",
                self.min_speed, self.max_speed
            )));
        }
        Ok(())
    }
}

impl SceneParams {
    /// Draws a random scene. Pure function of (seed, config).
    pub fn generate(seed: u64, cfg: &WorldConfig) -> Result<SceneParams> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let n = rng.gen_range(cfg.min_sprites..=cfg.max_sprites);
        let mut sprites = Vec::with_capacity(n);
        for _ in 0..n {
            let shape = match rng.gen_range(0..3) {
                0 => SpriteShape::Rect,
                1 => SpriteShape::Disc,
                _ => SpriteShape::Triangle,
            };
            let class = rng.gen_range(1..=cfg.k) as u8;
            let half = rng.gen_range(cfg.min_half..=cfg.max_half);
            let tint = rng.gen_range(0.85..1.15);
            let speed = rng.gen_range(cfg.min_speed..=cfg.max_speed);
            let jitter_seed = rng.gen::<u32>();
            let c = cfg.canvas as f64;
            let (pos, vel) = if rng.gen_bool(cfg.enter_prob) {
                // Start just outside one edge, moving inward at an angle.
                let edge = rng.gen_range(0..4);
                let along = rng.gen_range(0.2 * c..0.8 * c);
                let off = half + rng.gen_range(1.0..6.0);
                let slant = rng.gen_range(-0.5..0.5);
                let (pos, dir): ((f64, f64), (f64, f64)) = match edge {
                    0 => ((-off, along), (1.0, slant)),
                    1 => ((c + off, along), (-1.0, slant)),
                    2 => ((along, -off), (slant, 1.0)),
                    _ => ((along, c + off), (slant, -1.0)),
                };
                let norm = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
                (pos, (dir.0 / norm * speed, dir.1 / norm * speed))
            } else {
                let margin = half * 0.5;
                let pos = (
                    rng.gen_range(margin..c - margin),
                    rng.gen_range(margin..c - margin),
                );
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                (pos, (angle.sin() * speed, angle.cos() * speed))
            };
            sprites.push(Sprite {
                shape,
                class,
                half,
                tint,
                pos,
                vel,
                jitter: cfg.jitter,
                jitter_seed,
            });
        }
        Ok(SceneParams {
            canvas: cfg.canvas,
            length: cfg.length,
            k: cfg.k,
            bg_seed: rng.gen::<u32>(),
            sprites,
        })
    }

    /// Integer center offsets of every sprite at every step, rounded from the
    /// jittered continuous track. Index as `tracks[sprite][step]` = (y, x).
    pub fn tracks(&self) -> Vec<Vec<(i64, i64)>> {
        self.sprites
            .iter()
            .map(|s| {
                let mut jrng = ChaCha20Rng::seed_from_u64(s.jitter_seed as u64);
                let mut pos = s.pos;
                let mut track = Vec::with_capacity(self.length);
                for _ in 0..self.length {
                    track.push((pos.0.round() as i64, pos.1.round() as i64));
                    let jy = if s.jitter > 0.0 {
                        jrng.gen_range(-s.jitter..s.jitter)
                    } else {
                        0.0
                    };
                    let jx = if s.jitter > 0.0 {
                        jrng.gen_range(-s.jitter..s.jitter)
                    } else {
                        0.0
                    };
                    pos.0 += s.vel.0 + jy;
                    pos.1 += s.vel.1 + jx;
                }
                track
            })
            .collect()
    }
}
