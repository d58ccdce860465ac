use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};
use core::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::{Point, PointCloud};
use crate::{Error, Result};

/// Synthetic surfaces: unit sphere, cube surface of half-width 0.5, torus
/// with `R = 1, r = 0.3`, and a closed cylinder of radius 0.5 and height 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    Cylinder,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::Cylinder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::invalid("shape", format!("unknown shape `{s}`")))
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const TORUS_MAJOR: f64 = 1.0;
pub const TORUS_MINOR: f64 = 0.3;
pub const CUBE_HALF: f64 = 0.5;
pub const CYLINDER_RADIUS: f64 = 0.5;
pub const CYLINDER_HALF_HEIGHT: f64 = 0.5;

fn surface_point(kind: ShapeKind, rng: &mut dyn RngCore) -> Point {
    match kind {
        ShapeKind::Sphere => loop {
            let v: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(rng));
            let n = libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            if n > 1e-12 {
                break [v[0] / n, v[1] / n, v[2] / n];
            }
        },
        ShapeKind::Cube => {
            let face = rng.random_range(0..6usize);
            let mut p = [
                rng.random_range(-CUBE_HALF..=CUBE_HALF),
                rng.random_range(-CUBE_HALF..=CUBE_HALF),
                0.0,
            ];
            p[2] = if face % 2 == 0 { CUBE_HALF } else { -CUBE_HALF };
            let axis = face / 2;
            p.swap(2, axis);
            p
        }
        ShapeKind::Torus => {
            let theta = rng.random_range(0.0..TAU);
            // area element is proportional to R + r cos(phi)
            let phi = loop {
                let phi = rng.random_range(0.0..TAU);
                let w = (TORUS_MAJOR + TORUS_MINOR * libm::cos(phi)) / (TORUS_MAJOR + TORUS_MINOR);
                if rng.random::<f64>() < w {
                    break phi;
                }
            };
            let ring = TORUS_MAJOR + TORUS_MINOR * libm::cos(phi);
            [
                ring * libm::cos(theta),
                ring * libm::sin(theta),
                TORUS_MINOR * libm::sin(phi),
            ]
        }
        ShapeKind::Cylinder => {
            let side = 2.0 * PI * CYLINDER_RADIUS * 2.0 * CYLINDER_HALF_HEIGHT;
            let caps = 2.0 * PI * CYLINDER_RADIUS * CYLINDER_RADIUS;
            let theta = rng.random_range(0.0..TAU);
            if rng.random::<f64>() * (side + caps) < side {
                let z = rng.random_range(-CYLINDER_HALF_HEIGHT..=CYLINDER_HALF_HEIGHT);
                [
                    CYLINDER_RADIUS * libm::cos(theta),
                    CYLINDER_RADIUS * libm::sin(theta),
                    z,
                ]
            } else {
                let r = CYLINDER_RADIUS * libm::sqrt(rng.random::<f64>());
                let z = if rng.random::<bool>() {
                    CYLINDER_HALF_HEIGHT
                } else {
                    -CYLINDER_HALF_HEIGHT
                };
                [r * libm::cos(theta), r * libm::sin(theta), z]
            }
        }
    }
}

/// Area-uniform surface samples plus isotropic Gaussian noise.
pub fn generate_shape_with(
    kind: ShapeKind,
    n_points: usize,
    noise_sigma: f64,
    rng: &mut dyn RngCore,
) -> Result<PointCloud> {
    if n_points == 0 {
        return Err(Error::invalid(
            "generate_shape",
            "n_points must be positive",
        ));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid(
            "generate_shape",
            format!("noise sigma {noise_sigma}"),
        ));
    }
    let mut pts = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let mut p = surface_point(kind, rng);
        if noise_sigma > 0.0 {
            for v in &mut p {
                let z: f64 = StandardNormal.sample(rng);
                *v += noise_sigma * z;
            }
        }
        pts.push(p);
    }
    PointCloud::new(pts)
}

pub fn generate_shape(
    kind: ShapeKind,
    n_points: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<PointCloud> {
    generate_shape_with(
        kind,
        n_points,
        noise_sigma,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

/// Same shape name as [`ShapeKind::parse`] accepts.
pub fn generate_named(
    kind: &str,
    n_points: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<PointCloud> {
    generate_shape(ShapeKind::parse(kind)?, n_points, noise_sigma, seed)
}

/// Isotropic scale in `[2/3, 3/2]` then per-axis translation in `[-0.2, 0.2]`.
pub fn augment_scale_translate_with(
    cloud: &PointCloud,
    rng: &mut dyn RngCore,
) -> Result<PointCloud> {
    let s = rng.random_range(2.0 / 3.0..=1.5);
    let t: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-0.2..=0.2));
    cloud.map(|p| [p[0] * s + t[0], p[1] * s + t[1], p[2] * s + t[2]])
}

pub fn augment_scale_translate(cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
    augment_scale_translate_with(cloud, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Rotation by `angle` radians about the z axis.
pub fn rotate_z(cloud: &PointCloud, angle: f64) -> Result<PointCloud> {
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    cloud.map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
}

/// Rotation about z by an angle uniform in `[0, 2π)`.
pub fn augment_rotate_with(cloud: &PointCloud, rng: &mut dyn RngCore) -> Result<PointCloud> {
    rotate_z(cloud, rng.random_range(0.0..TAU))
}

pub fn augment_rotate(cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
    augment_rotate_with(cloud, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Which augmentations training applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    #[default]
    ScaleTranslate,
    Rotate,
    Both,
}

impl Augmentation {
    pub fn name(self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::ScaleTranslate => "scale_translate",
            Augmentation::Rotate => "rotate",
            Augmentation::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Augmentation::None,
            Augmentation::ScaleTranslate,
            Augmentation::Rotate,
            Augmentation::Both,
        ]
        .into_iter()
        .find(|a| a.name() == s.trim())
        .ok_or_else(|| Error::invalid("augmentation", format!("unknown augmentation `{s}`")))
    }

    pub fn apply(self, cloud: &PointCloud, rng: &mut dyn RngCore) -> Result<PointCloud> {
        match self {
            Augmentation::None => Ok(cloud.clone()),
            Augmentation::ScaleTranslate => augment_scale_translate_with(cloud, rng),
            Augmentation::Rotate => augment_rotate_with(cloud, rng),
            Augmentation::Both => {
                augment_scale_translate_with(&augment_rotate_with(cloud, rng)?, rng)
            }
        }
    }
}

/// Train or test partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A labelled point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub label: usize,
}

/// Labelled clouds of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, split: Split) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
            return Err(Error::invalid(
                "dataset",
                format!("label {} with {} classes", s.label, class_names.len()),
            ));
        }
        Ok(Dataset {
            samples,
            class_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = alloc::vec![0; self.num_classes()];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }
}

/// Settings for [`synthetic_datasets`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub noise: f64,
    /// Each axis of each sample is stretched by a factor drawn from
    /// `[1 - stretch, 1 + stretch]`.
    pub stretch: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_per_class: 64,
            test_per_class: 16,
            points: 256,
            noise: 0.01,
            stretch: 0.0,
            seed: 0,
        }
    }
}

fn synthetic_sample(
    kind: ShapeKind,
    label: usize,
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = generate_shape_with(kind, cfg.points, cfg.noise, &mut rng)?;
    let s: [f64; 3] = [0, 1, 2].map(|_| 1.0 + cfg.stretch * rng.random_range(-1.0..=1.0));
    let cloud = cloud.map(|p| [p[0] * s[0], p[1] * s[1], p[2] * s[2]])?;
    Ok(Sample { cloud, label })
}

/// Class-balanced 4-class shape datasets; samples alternate classes in label order.
pub fn synthetic_datasets(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&cfg.stretch) {
        return Err(Error::invalid(
            "synthetic dataset",
            format!("stretch {}", cfg.stretch),
        ));
    }
    let names: Vec<String> = ShapeKind::ALL
        .iter()
        .map(|k| String::from(k.name()))
        .collect();
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut build = |per_class: usize| -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(per_class * 4);
        for _ in 0..per_class {
            for (label, &kind) in ShapeKind::ALL.iter().enumerate() {
                out.push(synthetic_sample(kind, label, cfg, master.next_u64())?);
            }
        }
        Ok(out)
    };
    let train = build(cfg.train_per_class)?;
    let test = build(cfg.test_per_class)?;
    Ok((
        Dataset::new(train, names.clone(), Split::Train)?,
        Dataset::new(test, names, Split::Test)?,
    ))
}
