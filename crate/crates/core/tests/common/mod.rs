#![allow(dead_code)]

use anatreg::synth::{stream, symmetric_unit};
use anatreg::{
    AffineTransform, DisplacementField, FeatureMap, GridShape, Match, MatchSet, Point3,
    ScalarVolume,
};
use nalgebra::Matrix3;

/// Seeded uniform draws for tests.
pub struct Draw(Box<dyn FnMut() -> f64>);

impl Draw {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(seed ^ 0x5eed_7e57, 0);
        Draw(Box::new(move || symmetric_unit(&mut rng)))
    }

    /// Uniform in `[-1, 1)`.
    pub fn sym(&mut self) -> f64 {
        (self.0)()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * 0.5 * (self.sym() + 1.0)
    }

    pub fn index(&mut self, n: usize) -> usize {
        ((0.5 * (self.sym() + 1.0) * n as f64) as usize).min(n - 1)
    }

    pub fn point(&mut self, lo: f64, hi: f64) -> Point3 {
        [self.range(lo, hi), self.range(lo, hi), self.range(lo, hi)]
    }
}

pub fn cube(n: usize) -> GridShape {
    GridShape::new([n, n, n]).unwrap()
}

pub fn random_features(shape: GridShape, channels: usize, seed: u64) -> FeatureMap {
    let mut d = Draw::new(seed);
    let data = (0..shape.len() * channels).map(|_| d.sym()).collect();
    FeatureMap::normalized(shape, channels, data).unwrap()
}

pub fn random_volume(shape: GridShape, seed: u64) -> ScalarVolume {
    let mut d = Draw::new(seed);
    ScalarVolume::new(shape, (0..shape.len()).map(|_| d.sym()).collect()).unwrap()
}

pub fn random_field(shape: GridShape, amp: f64, seed: u64) -> DisplacementField {
    let mut d = Draw::new(seed);
    let data = (0..shape.len()).map(|_| [amp * d.sym(), amp * d.sym(), amp * d.sym()]).collect();
    DisplacementField::new(shape, data).unwrap()
}

/// A smooth field built from low-frequency sines.
pub fn smooth_field(shape: GridShape, amp: f64, seed: u64) -> DisplacementField {
    let mut d = Draw::new(seed);
    let k: Vec<[f64; 4]> = (0..3)
        .map(|_| [0.3 * d.sym(), 0.3 * d.sym(), 0.3 * d.sym(), 3.0 * d.sym()])
        .collect();
    DisplacementField::from_fn(shape, |c| {
        let p = c.map(|v| v as f64);
        std::array::from_fn(|a| {
            let [kz, ky, kx, ph] = k[a];
            amp * (kz * p[0] + ky * p[1] + kx * p[2] + ph).sin()
        })
    })
}

/// Well-conditioned affine: linear block near the identity.
pub fn random_affine(seed: u64, spread: f64, shift: f64) -> AffineTransform {
    let mut d = Draw::new(seed);
    let lin = Matrix3::from_fn(|r, c| if r == c { 1.0 } else { 0.0 } + spread * d.sym());
    AffineTransform::from_parts(lin, [shift * d.sym(), shift * d.sym(), shift * d.sym()]).unwrap()
}

/// Real-valued pairs in the same layout as integer matches.
pub fn to_point(p: [usize; 3]) -> Point3 {
    p.map(|c| c as f64)
}

pub fn matches_from(pairs: &[([usize; 3], [usize; 3])]) -> MatchSet {
    MatchSet {
        pairs: pairs
            .iter()
            .map(|&(moving, fixed)| Match {
                moving,
                fixed,
                score: 1.0,
            })
            .collect(),
    }
}

/// `|a − f| / max(|a|, |f|)`, or 0 when both are below `floor`.
pub fn rel_err(a: f64, f: f64, floor: f64) -> f64 {
    let m = a.abs().max(f.abs());
    if m < floor {
        0.0
    } else {
        (a - f).abs() / m
    }
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let mut m = x.to_vec();
    m[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}
