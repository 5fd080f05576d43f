//! Seeded synthetic atlases and ground-truth deformations.
//!
//! Every random quantity is drawn from xoshiro256++ seeded with
//! `seed_from_u64(seed)` (SplitMix64 state expansion), then advanced by
//! `stream` calls to `jump()` so that independent quantities use disjoint
//! subsequences:
//!
//! | stream   | quantity                 |
//! |----------|--------------------------|
//! | 0        | intensity noise          |
//! | 1        | label geometry           |
//! | 2, 3, 4  | velocity components z, y, x |
//! | 5        | random affine            |
//! | 6 + c    | feature channel `c`      |
//!
//! A draw maps to `[-1, 1)` as `(next_u64() >> 11) * 2^-53 * 2 - 1`.
//! Smoothing uses a separable triangular kernel `w_k = r + 1 − |k|` for
//! `|k| ≤ r` (the composition of two box passes), normalized, with border
//! replication.

use nalgebra::Matrix3;
use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::affine::AffineTransform;
use crate::error::{Error, Result};
use crate::grid::{
    warp_features, warp_labels, warp_scalar, DisplacementField, FeatureMap, FnMap, GridShape,
    LabelVolume, Point3, ScalarVolume, SpatialMap, VelocityField,
};
use crate::pipeline::Bundle;
use crate::transform::{integrate_svf, CompositeTransform, DEFAULT_SVF_STEPS};

const STREAM_INTENSITY: u64 = 0;
const STREAM_LABELS: u64 = 1;
const STREAM_WARP: u64 = 2;
const STREAM_AFFINE: u64 = 5;
const STREAM_FEATURES: u64 = 6;

/// Parameters of a synthetic atlas and its deformation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub shape: GridShape,
    pub channels: usize,
    /// Feature smoothing radius, in voxels.
    pub feature_smoothness: f64,
    /// Largest velocity component, in voxels.
    pub warp_amplitude: f64,
    /// Velocity smoothing radius, in voxels.
    pub warp_smoothness: f64,
    pub labels: u32,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(dims: [usize; 3], seed: u64) -> Result<Self> {
        Ok(SynthSpec {
            shape: GridShape::new(dims)?,
            channels: 16,
            feature_smoothness: 2.0,
            warp_amplitude: 2.0,
            warp_smoothness: 4.0,
            labels: 4,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.feature_smoothness > 0.0 && self.warp_smoothness > 0.0) {
            return Err(Error::Config("smoothness radii must be > 0".into()));
        }
        if !(self.warp_amplitude >= 0.0) {
            return Err(Error::Config("warp amplitude must be >= 0".into()));
        }
        if self.channels < 4 {
            return Err(Error::Config("synthetic features need at least 4 channels".into()));
        }
        Ok(())
    }
}

/// Generator for stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> Xoshiro256PlusPlus {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for _ in 0..stream {
        rng.jump();
    }
    rng
}

/// Uniform draw in `[-1, 1)`.
pub fn symmetric_unit(rng: &mut Xoshiro256PlusPlus) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * 2.0 - 1.0
}

fn noise(shape: &GridShape, rng: &mut Xoshiro256PlusPlus) -> Vec<f64> {
    (0..shape.len()).map(|_| symmetric_unit(rng)).collect()
}

/// Separable triangular smoothing of radius `radius`, replicating borders.
pub fn smooth_triangular(shape: &GridShape, values: &[f64], radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let weights: Vec<f64> = (-r..=r).map(|k| (r + 1 - k.abs()) as f64).collect();
    let total: f64 = weights.iter().sum();
    let d = shape.dims;
    let mut cur = values.to_vec();
    for axis in 0..3 {
        let n = d[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for i in 0..shape.len() {
            let c = shape.coord(i);
            let mut acc = 0.0;
            for (w, k) in weights.iter().zip(-r..=r) {
                let mut q = c;
                q[axis] = (c[axis] as isize + k).clamp(0, n - 1) as usize;
                acc += w * cur[shape.index(q[0], q[1], q[2])];
            }
            next[i] = acc / total;
        }
        cur = next;
    }
    cur
}

fn radius(sigma: f64) -> usize {
    sigma.ceil() as usize
}

/// Atlas images: features, labels and intensities on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Atlas {
    pub features: FeatureMap,
    pub labels: LabelVolume,
    pub image: ScalarVolume,
}

impl Atlas {
    pub fn into_bundle(self) -> Bundle {
        Bundle {
            image: self.image,
            features: self.features,
            labels: Some(self.labels),
        }
    }
}

pub fn make_atlas(spec: &SynthSpec) -> Result<Atlas> {
    spec.validate()?;
    let shape = spec.shape;
    let c = spec.channels;
    let r = radius(spec.feature_smoothness);

    let mut data = vec![0.0; shape.len() * c];
    for ch in 0..c {
        let mut rng = stream(spec.seed, STREAM_FEATURES + ch as u64);
        let smooth = smooth_triangular(&shape, &noise(&shape, &mut rng), r);
        for (i, v) in smooth.into_iter().enumerate() {
            data[i * c + ch] = v;
        }
    }
    let features = FeatureMap::normalized(shape, c, data)?;

    let labels = nested_ellipsoids(spec);

    let mut rng = stream(spec.seed, STREAM_INTENSITY);
    let texture = smooth_triangular(&shape, &noise(&shape, &mut rng), r);
    let peak = texture.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let nl = spec.labels.max(1) as f64;
    let values = texture
        .iter()
        .zip(&labels.labels)
        .map(|(t, &l)| 0.2 * t / peak - 0.8 + 1.6 * l as f64 / nl)
        .collect();
    let image = ScalarVolume::new(shape, values)?;
    Ok(Atlas {
        features,
        labels,
        image,
    })
}

/// Label `l` is the innermost of `spec.labels` jittered, shrinking ellipsoids.
fn nested_ellipsoids(spec: &SynthSpec) -> LabelVolume {
    let shape = spec.shape;
    let mut rng = stream(spec.seed, STREAM_LABELS);
    let n = spec.labels as usize;
    let d = shape.dims.map(|v| v as f64);
    let shells: Vec<(Point3, Point3)> = (0..n)
        .map(|l| {
            let frac = 0.42 * (1.0 - l as f64 / (n as f64 + 1.0));
            let mut centre = [0.0; 3];
            let mut radii = [0.0; 3];
            for a in 0..3 {
                centre[a] = (d[a] - 1.0) / 2.0 + 0.05 * d[a] * symmetric_unit(&mut rng);
                radii[a] = (frac * d[a] * (1.0 + 0.15 * symmetric_unit(&mut rng))).max(0.5);
            }
            (centre, radii)
        })
        .collect();
    LabelVolume::from_fn(shape, |c| {
        let mut label = 0;
        for (l, (centre, radii)) in shells.iter().enumerate() {
            let q: f64 = (0..3).map(|a| ((c[a] as f64 - centre[a]) / radii[a]).powi(2)).sum();
            if q <= 1.0 {
                label = l as u32 + 1;
            }
        }
        label
    })
}

/// Smoothed noise velocity scaled so its largest component equals the
/// warp amplitude.
pub fn random_smooth_warp(spec: &SynthSpec) -> Result<VelocityField> {
    spec.validate()?;
    let shape = spec.shape;
    let r = radius(spec.warp_smoothness);
    let comps: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            let mut rng = stream(spec.seed, STREAM_WARP + a);
            smooth_triangular(&shape, &noise(&shape, &mut rng), r)
        })
        .collect();
    let peak = comps.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { spec.warp_amplitude / peak } else { 0.0 };
    let data = (0..shape.len())
        .map(|i| [comps[0][i] * scale, comps[1][i] * scale, comps[2][i] * scale])
        .collect();
    VelocityField::new(shape, data)
}

/// Random affine about the grid centre: off-diagonal shear entries up to
/// `tan(max_angle_deg)` and translation components up to `max_translation`.
pub fn random_affine(shape: &GridShape, seed: u64, max_angle_deg: f64, max_translation: f64) -> AffineTransform {
    let mut rng = stream(seed, STREAM_AFFINE);
    let t = max_angle_deg.to_radians().tan();
    let mut lin = Matrix3::identity();
    for r in 0..3 {
        for c in 0..3 {
            if r != c {
                lin[(r, c)] = t * symmetric_unit(&mut rng);
            }
        }
    }
    let centre: Point3 = shape.dims.map(|v| (v as f64 - 1.0) / 2.0);
    let shift: Point3 = [0, 1, 2].map(|_| max_translation * symmetric_unit(&mut rng));
    // p -> centre + L (p − centre) + shift
    let lc = lin * nalgebra::Vector3::from(centre);
    let trans = [0, 1, 2].map(|a| centre[a] - lc[a] + shift[a]);
    AffineTransform::from_parts(lin, trans).expect("small shear is invertible")
}

/// A ground-truth deformation: moving images are the atlas sampled at
/// `ψ_v(A y)`, where `ψ_v` is the integrated velocity.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub affine: AffineTransform,
    pub velocity: VelocityField,
    pub steps: usize,
    forward: DisplacementField,
    backward: DisplacementField,
}

impl GroundTruth {
    pub fn new(affine: AffineTransform, velocity: VelocityField, steps: usize) -> Self {
        let forward = integrate_svf(&velocity, steps);
        let backward = integrate_svf(&velocity.scaled(-1.0), steps);
        GroundTruth {
            affine,
            velocity,
            steps,
            forward,
            backward,
        }
    }

    /// Moving-grid point to atlas (fixed) point: `y -> ψ_v(A y)`.
    pub fn moving_to_fixed(&self, y: Point3) -> Point3 {
        self.forward.apply(self.affine.apply(y))
    }

    /// The registration the pipeline should recover, fixed to moving:
    /// `x -> A⁻¹ ψ_{−v}(x)`.
    pub fn registration(&self) -> Result<CompositeTransform> {
        CompositeTransform::new(
            self.affine,
            DisplacementField::zeros(self.backward.shape),
            self.backward.clone(),
        )
    }

    /// Paired landmarks `(moving, fixed)`: fixed points on a lattice of the
    /// given step (offset `step / 2`), moving points their images under
    /// [`GroundTruth::registration`].
    pub fn landmarks(&self, step: usize) -> Result<(Vec<Point3>, Vec<Point3>)> {
        let shape = self.backward.shape;
        let reg = self.registration()?;
        let fixed: Vec<Point3> = crate::matching::select_points(&shape, step)?
            .points
            .iter()
            .map(|p| p.map(|c| c as f64))
            .collect();
        let moving = fixed.iter().map(|&x| reg.apply(x)).collect();
        Ok((moving, fixed))
    }
}

/// Moving/fixed bundles generated from an atlas.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub moving: Bundle,
    pub fixed: Bundle,
    pub truth: GroundTruth,
}

pub fn make_pair(atlas: &Atlas, velocity: &VelocityField, affine: &AffineTransform) -> Result<SyntheticPair> {
    let shape = atlas.features.shape;
    shape.check_dims(&velocity.shape, "velocity vs atlas")?;
    shape.check_dims(&atlas.labels.shape, "labels vs atlas")?;
    shape.check_dims(&atlas.image.shape, "image vs atlas")?;
    let truth = GroundTruth::new(*affine, velocity.clone(), DEFAULT_SVF_STEPS);
    let map = FnMap(|y| truth.moving_to_fixed(y));
    let moving = Bundle {
        image: warp_scalar(&atlas.image, &map, &shape)?,
        features: warp_features(&atlas.features, &map, &shape)?,
        labels: Some(warp_labels(&atlas.labels, &map, &shape)?),
    };
    Ok(SyntheticPair {
        moving,
        fixed: atlas.clone().into_bundle(),
        truth,
    })
}
