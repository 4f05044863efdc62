//! Seeded procedural test images: piecewise-smooth scenes of colored
//! rectangles and disks over a linear gradient. They have crisp edges of
//! every orientation, which is what blur synthesis and edge supervision
//! need, and make tests independent of any external dataset.

use eadnet_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `[3,H,W]` RGB scene in `[0,1]`.
pub fn random_scene(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f32; 3] { [rng.random(), rng.random(), rng.random()] };
    let top = color(&mut rng);
    let bottom = color(&mut rng);
    let mut img = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        let t = y as f32 / (h.max(2) - 1) as f32;
        for x in 0..w {
            for c in 0..3 {
                img[c * h * w + y * w + x] = 0.6 * (top[c] * (1.0 - t) + bottom[c] * t) + 0.2;
            }
        }
    }
    let shapes = 4 + (h * w / 1024).min(12);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let ry = rng.random_range(2.0..(h as f32 / 4.0).max(3.0));
        let rx = rng.random_range(2.0..(w as f32 / 4.0).max(3.0));
        let disk = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
                let inside = if disk {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for c in 0..3 {
                        img[c * h * w + y * w + x] = col[c];
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, h, w], img).expect("scene shape")
}
