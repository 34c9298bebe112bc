//! Procedural toy scenes and a small noise-prediction training loop for
//! producing test checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Graph;
use crate::diffnet::{forward, BoundWeights, Denoiser, NoHook, UnetConfig};
use crate::error::Result;
use crate::pipeline::LatentCodec;
use crate::raster::Raster;
use crate::tensor::Matrix;

/// A bright axis-aligned square on a darker smoothly shaded background.
#[derive(Clone, Debug)]
pub struct ToyScene {
    pub image: Raster,
    pub mask: Raster,
    /// `(x0, y0, side)` of the square in pixels.
    pub square: (usize, usize, usize),
}

/// Draws a scene of `size × size` pixels. `side` fixes the square's side;
/// otherwise it is drawn from `[size/8, size/2]`.
pub fn toy_scene(rng: &mut impl Rng, size: usize, side: Option<usize>) -> ToyScene {
    let side = side.unwrap_or_else(|| rng.random_range(size / 8..=size / 2));
    let x0 = rng.random_range(0..=size - side);
    let y0 = rng.random_range(0..=size - side);
    toy_scene_at(rng, size, x0, y0, side)
}

/// Like [`toy_scene`] with the square placed at `(x0, y0)`.
pub fn toy_scene_at(rng: &mut impl Rng, size: usize, x0: usize, y0: usize, side: usize) -> ToyScene {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.4));
    let tilt: [f64; 2] = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
    let mut image = Raster::zeros(size, size, 3);
    let mask = Raster::rect_mask(size, size, x0, y0, x0 + side, y0 + side);
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let inside = mask.get(x, y, 0) > 0.5;
            for c in 0..3 {
                let v = if inside {
                    fg[c]
                } else {
                    base[c] + tilt[0] * (x as f64 / s - 0.5) + tilt[1] * (y as f64 / s - 0.5)
                };
                image.set(x, y, c, v.clamp(0.0, 1.0));
            }
        }
    }
    ToyScene {
        image,
        mask,
        square: (x0, y0, side),
    }
}

/// A training scene: the shaded background with zero to two squares.
pub fn training_scene(rng: &mut impl Rng, size: usize) -> Raster {
    let count = [0, 1, 1, 2][rng.random_range(0..4)];
    if count == 0 {
        return toy_scene_at(rng, size, 0, 0, 0).image;
    }
    let mut scene = toy_scene(rng, size, None);
    for _ in 1..count {
        let other = toy_scene(rng, size, None);
        for y in 0..size {
            for x in 0..size {
                if other.mask.get(x, y, 0) > 0.5 {
                    for c in 0..3 {
                        scene.image.set(x, y, c, other.image.get(x, y, c));
                    }
                }
            }
        }
    }
    scene.image
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    /// Image side; the latent grid is `size / 4`.
    pub image_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 8000,
            lr: 2e-3,
            seed: 0,
            image_size: 64,
        }
    }
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;

    fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - Self::B1.powi(self.t), 1.0 - Self::B2.powi(self.t));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.data().len() {
                let gj = g.data()[j];
                let mj = Self::B1 * m.data()[j] + (1.0 - Self::B1) * gj;
                let vj = Self::B2 * v.data()[j] + (1.0 - Self::B2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                p.data_mut()[j] -= lr * (mj / c1) / ((vj / c2).sqrt() + 1e-8);
            }
        }
    }
}

/// Trains a denoiser from seeded random weights on toy scenes with the
/// standard noise-prediction objective. `log` receives `(iteration, loss)`.
pub fn train_toy(config: TrainConfig, log: &mut dyn FnMut(usize, f64)) -> Result<Denoiser> {
    let unet = UnetConfig {
        latent_height: config.image_size / 4,
        latent_width: config.image_size / 4,
        ..UnetConfig::default()
    };
    let init = Denoiser::random(unet, config.seed);
    let schedule = init.schedule().clone();
    let mut weights = init.weights().clone();
    let mut null_text = init.null_text().clone();
    let names: Vec<String> = weights.keys().cloned().collect();
    let mut adam = Adam {
        m: names.iter().map(|n| Matrix::zeros(weights[n].rows(), weights[n].cols())).chain([Matrix::zeros(null_text.rows(), null_text.cols())]).collect(),
        v: names.iter().map(|n| Matrix::zeros(weights[n].rows(), weights[n].cols())).chain([Matrix::zeros(null_text.rows(), null_text.cols())]).collect(),
        t: 0,
    };
    let codec = LatentCodec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    for it in 0..config.iterations {
        let image = training_scene(&mut rng, config.image_size);
        let x0 = codec.encode(&image)?;
        let t = rng.random_range(1..=schedule.train_steps());
        let eps = Matrix::from_vec(
            x0.rows(),
            x0.cols(),
            (0..x0.data().len()).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )?;
        let xt = schedule.forward_noise(&x0, t, &eps)?;

        let mut g = Graph::new();
        let bound = BoundWeights::bind(&mut g, &weights, true);
        let z = g.constant(xt);
        let text = g.param(null_text.clone());
        let pred = forward(&unet, &bound, &mut g, z, t, text, NoHook)?;
        let target = g.constant(eps);
        let d = g.sub(pred, target)?;
        let sq = g.mul(d, d)?;
        let loss = g.mean(sq);
        let grads = g.backward(loss)?;
        log(it, g.value(loss).item());

        let mut gs: Vec<Matrix> = names
            .iter()
            .map(|n| grads.get_or_zeros(bound.get(n).expect("bound"), weights[n].shape()).0)
            .collect();
        gs.push(grads.get_or_zeros(text, null_text.shape()).0);
        let lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / config.iterations as f64).cos());
        let mut params: Vec<&mut Matrix> = weights.values_mut().collect();
        params.push(&mut null_text);
        adam.step(&mut params, &gs, lr);
    }
    Denoiser::new(unet, schedule, weights, null_text)
}
