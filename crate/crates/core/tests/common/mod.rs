#![allow(dead_code)]

use pcqa_core::pc_io::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform points in an axis-aligned box with uniform colours.
pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, name: &str) -> PointCloud {
    let extent = [
        rng.gen_range(0.5..4.0),
        rng.gen_range(0.5..4.0),
        rng.gen_range(0.5..4.0),
    ];
    let positions = (0..n)
        .map(|_| {
            [
                rng.gen_range(0.0..extent[0]),
                rng.gen_range(0.0..extent[1]),
                rng.gen_range(0.0..extent[2]),
            ]
        })
        .collect();
    let colors = (0..n)
        .map(|_| [rng.gen(), rng.gen(), rng.gen()])
        .collect();
    PointCloud::new(name, positions, colors).unwrap()
}

/// One to three anisotropic Gaussian blobs, each with its own base colour;
/// the colour jitter level is drawn per cloud.
pub fn blob_cloud(rng: &mut ChaCha8Rng, n: usize, name: &str) -> PointCloud {
    let blobs = rng.gen_range(1..=3);
    let jitter = rng.gen_range(0.01..0.3);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let specs: Vec<([f64; 3], [f64; 3], [f64; 3])> = (0..blobs)
        .map(|_| {
            let center = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            let scale = [
                rng.gen_range(0.05..1.5),
                rng.gen_range(0.05..1.5),
                rng.gen_range(0.05..1.5),
            ];
            let color = [rng.gen(), rng.gen(), rng.gen()];
            (center, scale, color)
        })
        .collect();
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for i in 0..n {
        let (c, s, col) = specs[i % blobs];
        positions.push([
            c[0] + s[0] * unit.sample(rng),
            c[1] + s[1] * unit.sample(rng),
            c[2] + s[2] * unit.sample(rng),
        ]);
        colors.push([
            (col[0] + jitter * unit.sample(rng)).clamp(0.0, 1.0),
            (col[1] + jitter * unit.sample(rng)).clamp(0.0, 1.0),
            (col[2] + jitter * unit.sample(rng)).clamp(0.0, 1.0),
        ]);
    }
    PointCloud::new(name, positions, colors).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    Torus,
    Cylinder,
}

pub const SHAPES: [Shape; 4] = [Shape::Sphere, Shape::Cube, Shape::Torus, Shape::Cylinder];

fn surface_point(shape: Shape, rng: &mut ChaCha8Rng) -> [f64; 3] {
    use std::f64::consts::TAU;
    match shape {
        Shape::Sphere => {
            let z: f64 = rng.gen_range(-1.0..1.0);
            let t = rng.gen_range(0.0..TAU);
            let r = (1.0 - z * z).sqrt();
            [r * t.cos(), r * t.sin(), z]
        }
        Shape::Cube => {
            let face = rng.gen_range(0..6);
            let (u, v) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [s, u, v],
                1 => [u, s, v],
                _ => [u, v, s],
            }
        }
        Shape::Torus => {
            let (a, b) = (rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU));
            let r = 1.0 + 0.4 * b.cos();
            [r * a.cos(), r * a.sin(), 0.4 * b.sin()]
        }
        Shape::Cylinder => {
            let t = rng.gen_range(0.0..TAU);
            [t.cos(), t.sin(), rng.gen_range(-1.5..1.5)]
        }
    }
}

fn surface_area(shape: Shape) -> f64 {
    use std::f64::consts::PI;
    match shape {
        Shape::Sphere => 4.0 * PI,
        Shape::Cube => 24.0,
        Shape::Torus => 4.0 * PI * PI * 0.4,
        Shape::Cylinder => 6.0 * PI,
    }
}

/// Surface samples of a clean shape coloured by a smooth positional
/// gradient, then corrupted by isotropic Gaussian noise of std `sigma` on
/// both geometry and colour. Shapes are scaled to the surface area of the
/// unit sphere so equal point counts give equal sampling density.
pub fn noisy_shape(shape: Shape, n: usize, sigma: f64, seed: u64) -> PointCloud {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let scale = (4.0 * std::f64::consts::PI / surface_area(shape)).sqrt();
    for _ in 0..n {
        let p = surface_point(shape, &mut r).map(|c| c * scale);
        let c = [
            0.5 + 0.4 * (p[0] * 1.3).sin(),
            0.5 + 0.4 * (p[1] * 1.1).cos(),
            0.5 + 0.3 * p[2].tanh(),
        ];
        positions.push([
            p[0] + sigma * noise.sample(&mut r),
            p[1] + sigma * noise.sample(&mut r),
            p[2] + sigma * noise.sample(&mut r),
        ]);
        colors.push([
            (c[0] + sigma * noise.sample(&mut r)).clamp(0.0, 1.0),
            (c[1] + sigma * noise.sample(&mut r)).clamp(0.0, 1.0),
            (c[2] + sigma * noise.sample(&mut r)).clamp(0.0, 1.0),
        ]);
    }
    PointCloud::new(format!("{shape:?}_{sigma}"), positions, colors).unwrap()
}
