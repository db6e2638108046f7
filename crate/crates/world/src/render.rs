//! Rasterization of scenes into images, class label maps, and owner id maps.

use crate::scene::{SceneParams, SpriteShape};
use f2mf_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Base colors per sprite class (class 1 at index 0).
const PALETTE: [(f32, f32, f32); 8] = [
    (0.85, 0.25, 0.20),
    (0.20, 0.75, 0.30),
    (0.25, 0.40, 0.90),
    (0.90, 0.80, 0.25),
    (0.80, 0.30, 0.80),
    (0.30, 0.80, 0.80),
    (0.60, 0.50, 0.30),
    (0.90, 0.50, 0.10),
];

/// One rendered step: RGB image in [0,1], class labels, and the topmost
/// owner per pixel (-1 for background, otherwise the sprite index).
pub struct RenderedFrame {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
    pub ids: Vec<i16>,
}

/// Does the shape with the given half-extent cover local offset (dy, dx)?
pub fn covers(shape: SpriteShape, half: f64, dy: f64, dx: f64) -> bool {
    match shape {
        SpriteShape::Rect => dy.abs() <= half && dx.abs() <= half,
        SpriteShape::Disc => dy * dy + dx * dx <= half * half,
        SpriteShape::Triangle => dy.abs() <= half && dx.abs() <= (dy + half) * 0.5,
    }
}

/// Renders frames of one scene. Holds the precomputed background texture and
/// the integer sprite tracks.
pub struct Renderer {
    scene: SceneParams,
    tracks: Vec<Vec<(i64, i64)>>,
    background: Vec<f32>,
}

impl Renderer {
    pub fn new(scene: &SceneParams) -> Self {
        let background = value_noise_background(scene.canvas, scene.bg_seed);
        Renderer {
            scene: scene.clone(),
            tracks: scene.tracks(),
            background,
        }
    }

    pub fn tracks(&self) -> &[Vec<(i64, i64)>] {
        &self.tracks
    }

    pub fn render(&self, t: usize) -> RenderedFrame {
        let c = self.scene.canvas;
        assert!(t < self.scene.length, "frame index out of range");
        let mut image = Tensor::zeros(1, 3, c, c);
        for ch in 0..3 {
            image
                .plane_mut(0, ch)
                .copy_from_slice(&self.background[ch * c * c..(ch + 1) * c * c]);
        }
        let mut labels = vec![0u8; c * c];
        let mut ids = vec![-1i16; c * c];

        for (idx, sprite) in self.scene.sprites.iter().enumerate() {
            let (cy, cx) = self.tracks[idx][t];
            let (r, g, b) = PALETTE[(sprite.class - 1) as usize];
            let reach = sprite.half.ceil() as i64 + 1;
            let y_lo = (cy - reach).max(0);
            let y_hi = (cy + reach + 1).min(c as i64);
            let x_lo = (cx - reach).max(0);
            let x_hi = (cx + reach + 1).min(c as i64);
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    let dy = (y - cy) as f64;
                    let dx = (x - cx) as f64;
                    if !covers(sprite.shape, sprite.half, dy, dx) {
                        continue;
                    }
                    let shade = sprite_shade(sprite.half, dy, dx) * sprite.tint;
                    let p = (y as usize) * c + x as usize;
                    image.plane_mut(0, 0)[p] = (r * shade as f32).clamp(0.0, 1.0);
                    image.plane_mut(0, 1)[p] = (g * shade as f32).clamp(0.0, 1.0);
                    image.plane_mut(0, 2)[p] = (b * shade as f32).clamp(0.0, 1.0);
                    labels[p] = sprite.class;
                    ids[p] = idx as i16;
                }
            }
        }
        RenderedFrame { image, labels, ids }
    }

    pub fn render_sequence(&self) -> Vec<RenderedFrame> {
        (0..self.scene.length).map(|t| self.render(t)).collect()
    }
}

/// Radial falloff plus a local sinusoidal pattern that moves with the
/// sprite, so its interior carries matchable texture.
fn sprite_shade(half: f64, dy: f64, dx: f64) -> f64 {
    let r2 = (dy * dy + dx * dx) / (half * half);
    let base = 1.0 - 0.18 * r2;
    let pattern = 0.08 * (0.8 * dy).sin() * (0.7 * dx).cos();
    (base + pattern).clamp(0.0, 1.2)
}

/// Smooth per-channel value noise: a coarse random grid interpolated
/// bilinearly over the canvas.
fn value_noise_background(canvas: usize, seed: u32) -> Vec<f32> {
    let cells = 8usize;
    let mut rng = ChaCha20Rng::seed_from_u64(seed as u64 ^ 0x00c0_ffee);
    let grid: Vec<f32> = (0..3 * (cells + 1) * (cells + 1))
        .map(|_| rng.gen_range(0.30..0.62))
        .collect();
    let mut out = vec![0.0f32; 3 * canvas * canvas];
    let scale = cells as f32 / canvas as f32;
    for ch in 0..3 {
        let g = &grid[ch * (cells + 1) * (cells + 1)..];
        for y in 0..canvas {
            let fy = y as f32 * scale;
            let y0 = fy.floor() as usize;
            let ty = fy - y0 as f32;
            for x in 0..canvas {
                let fx = x as f32 * scale;
                let x0 = fx.floor() as usize;
                let tx = fx - x0 as f32;
                let v00 = g[y0 * (cells + 1) + x0];
                let v01 = g[y0 * (cells + 1) + x0 + 1];
                let v10 = g[(y0 + 1) * (cells + 1) + x0];
                let v11 = g[(y0 + 1) * (cells + 1) + x0 + 1];
                let v = v00 * (1.0 - ty) * (1.0 - tx)
                    + v01 * (1.0 - ty) * tx
                    + v10 * ty * (1.0 - tx)
                    + v11 * ty * tx;
                out[ch * canvas * canvas + y * canvas + x] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Sprite, WorldConfig};

    fn still_sprite(shape: SpriteShape, class: u8, half: f64, pos: (f64, f64)) -> Sprite {
        Sprite {
            shape,
            class,
            half,
            tint: 1.0,
            pos,
            vel: (0.0, 0.0),
            jitter: 0.0,
            jitter_seed: 0,
        }
    }

    #[test]
    fn shape_membership_behaves_geometrically() {
        assert!(covers(SpriteShape::Rect, 4.0, 4.0, -4.0));
        assert!(!covers(SpriteShape::Rect, 4.0, 4.5, 0.0));
        assert!(covers(SpriteShape::Disc, 5.0, 3.0, 4.0));
        assert!(!covers(SpriteShape::Disc, 5.0, 3.1, 4.0));
        // Triangle widens toward larger dy: narrow at the top.
        assert!(covers(SpriteShape::Triangle, 6.0, 5.0, 5.0));
        assert!(!covers(SpriteShape::Triangle, 6.0, -5.0, 5.0));
        assert!(covers(SpriteShape::Triangle, 6.0, -5.0, 0.4));
    }

    #[test]
    fn later_sprites_occlude_earlier_ones() {
        let scene = SceneParams {
            canvas: 48,
            length: 1,
            k: 2,
            bg_seed: 7,
            sprites: vec![
                still_sprite(SpriteShape::Rect, 1, 8.0, (24.0, 24.0)),
                still_sprite(SpriteShape::Rect, 2, 8.0, (24.0, 28.0)),
            ],
        };
        let frame = Renderer::new(&scene).render(0);
        // Overlap region belongs to the later sprite.
        assert_eq!(frame.labels[24 * 48 + 26], 2);
        assert_eq!(frame.ids[24 * 48 + 26], 1);
        // Left part of the first sprite is still visible.
        assert_eq!(frame.labels[24 * 48 + 17], 1);
        assert_eq!(frame.ids[24 * 48 + 17], 0);
        // Far corner is background.
        assert_eq!(frame.labels[2 * 48 + 2], 0);
        assert_eq!(frame.ids[2 * 48 + 2], -1);
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let cfg = WorldConfig::default();
        let scene = SceneParams::generate(8, &cfg).unwrap();
        let a = Renderer::new(&scene).render(5);
        let b = Renderer::new(&scene).render(5);
        assert_eq!(a.image.max_abs_diff(&b.image), 0.0);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.ids, b.ids);
        for &v in a.image.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn moving_sprite_changes_position_between_frames() {
        let scene = SceneParams {
            canvas: 64,
            length: 8,
            k: 1,
            bg_seed: 3,
            sprites: vec![Sprite {
                vel: (0.0, 2.0),
                ..still_sprite(SpriteShape::Disc, 1, 6.0, (32.0, 16.0))
            }],
        };
        let r = Renderer::new(&scene);
        let f0 = r.render(0);
        let f3 = r.render(3);
        assert_eq!(f0.ids[32 * 64 + 16], 0);
        assert_eq!(f3.ids[32 * 64 + 16 + 6], 0);
        assert_eq!(f3.ids[32 * 64 + 16 - 7], -1);
    }

    #[test]
    fn partially_entered_sprites_render_their_visible_part() {
        let scene = SceneParams {
            canvas: 32,
            length: 2,
            k: 1,
            bg_seed: 11,
            sprites: vec![still_sprite(SpriteShape::Rect, 1, 6.0, (-3.0, 16.0))],
        };
        let frame = Renderer::new(&scene).render(0);
        assert_eq!(frame.labels[0 * 32 + 16], 1);
        assert_eq!(frame.labels[4 * 32 + 16], 0);
    }
}
