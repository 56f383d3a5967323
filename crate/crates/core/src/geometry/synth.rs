//! Seeded synthetic clouds standing in for object scans and LiDAR sweeps.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Point3, RawPointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Uniform,
    Plane,
    Sphere,
    GaussianClusters,
    LidarRings,
}

impl SynthKind {
    pub const ALL: [SynthKind; 5] = [
        SynthKind::Uniform,
        SynthKind::Plane,
        SynthKind::Sphere,
        SynthKind::GaussianClusters,
        SynthKind::LidarRings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Uniform => "uniform",
            SynthKind::Plane => "plane",
            SynthKind::Sphere => "sphere",
            SynthKind::GaussianClusters => "gaussian_clusters",
            SynthKind::LidarRings => "lidar_rings",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown synthetic kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    /// Surface-normal (plane) or radial (sphere, rings) noise half-width.
    pub jitter: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { jitter: 0.0 }
    }
}

/// Unit normal of the synthetic plane; it passes through the origin.
pub const PLANE_NORMAL: Point3 = [
    0.267_261_241_912_424_4,
    0.534_522_483_824_848_8,
    0.801_783_725_737_273_2,
];
pub const SPHERE_RADIUS: f64 = 1.0;

const LIDAR_BEAMS: usize = 32;
const LIDAR_HEIGHT: f64 = 1.73;
const LIDAR_WALL: f64 = 40.0;

pub fn synth(kind: SynthKind, n: usize, seed: u64) -> Result<RawPointCloud> {
    synth_with(kind, n, seed, &SynthOptions::default())
}

pub fn synth_with(
    kind: SynthKind,
    n: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<RawPointCloud> {
    if n == 0 {
        return Err(Error::invalid("synthetic cloud needs at least one point"));
    }
    if !(opts.jitter >= 0.0 && opts.jitter.is_finite()) {
        return Err(Error::invalid("jitter must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = opts.jitter;
    let noise = |rng: &mut ChaCha8Rng| if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };

    let points: Vec<Point3> = match kind {
        SynthKind::Uniform => (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect(),
        SynthKind::Plane => {
            let (e1, e2) = plane_basis();
            (0..n)
                .map(|_| {
                    let u: f64 = rng.gen_range(-1.0..1.0);
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    let h = noise(&mut rng);
                    std::array::from_fn(|a| u * e1[a] + v * e2[a] + h * PLANE_NORMAL[a])
                })
                .collect()
        }
        SynthKind::Sphere => (0..n)
            .map(|_| {
                let g: Point3 = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2])
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                let r = SPHERE_RADIUS + noise(&mut rng);
                std::array::from_fn(|a| g[a] / norm * r)
            })
            .collect(),
        SynthKind::GaussianClusters => {
            let centers: Vec<Point3> = (0..8)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-0.8..0.8)))
                .collect();
            let spread = Normal::new(0.0, 0.05).unwrap();
            (0..n)
                .map(|_| {
                    let c = centers[rng.gen_range(0..centers.len())];
                    std::array::from_fn(|a| c[a] + spread.sample(&mut rng))
                })
                .collect()
        }
        SynthKind::LidarRings => (0..n)
            .map(|_| {
                let beam = rng.gen_range(0..LIDAR_BEAMS);
                let elev = (-25.0 + 28.0 * beam as f64 / (LIDAR_BEAMS - 1) as f64).to_radians();
                let az = rng.gen_range(0.0..2.0 * PI);
                // downward beams hit the ground, the rest hit a cylindrical wall
                let range = if elev < 0.0 {
                    (LIDAR_HEIGHT / (-elev).tan()).min(LIDAR_WALL / elev.cos())
                } else {
                    LIDAR_WALL / elev.cos()
                } + noise(&mut rng);
                [
                    range * elev.cos() * az.cos(),
                    range * elev.cos() * az.sin(),
                    range * elev.sin(),
                ]
            })
            .collect(),
    };
    RawPointCloud::new(points, format!("synth:{kind}:{n}:{seed}"))
}

fn plane_basis() -> (Point3, Point3) {
    let n = PLANE_NORMAL;
    // e1 = normalize(n x z_hat), e2 = n x e1
    let c = [n[1], -n[0], 0.0];
    let len = (c[0] * c[0] + c[1] * c[1]).sqrt();
    let e1 = [c[0] / len, c[1] / len, 0.0];
    let e2 = [
        n[1] * e1[2] - n[2] * e1[1],
        n[2] * e1[0] - n[0] * e1[2],
        n[0] * e1[1] - n[1] * e1[0],
    ];
    (e1, e2)
}
