//! Homogeneous affine transforms and their least-squares estimation from
//! matched point pairs.

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Point3, SpatialMap};
use crate::matching::MatchSet;

/// Largest singular-value ratio of the design matrix accepted by [`fit_affine`].
pub const MAX_CONDITION: f64 = 1e12;

const MIN_DET: f64 = 1e-12;

/// A 4x4 homogeneous matrix with last row `(0, 0, 0, 1)`.
///
/// Serializes as a 16-number row-major array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: Matrix4::identity(),
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self::from_parts(Matrix3::identity(), t).expect("identity block is invertible")
    }

    /// `p -> linear * p + translation`.
    pub fn from_parts(linear: Matrix3<f64>, translation: [f64; 3]) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::from(translation));
        Self::from_matrix(m)
    }

    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDivergence("non-finite affine entry".into()));
        }
        let last = matrix.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::Config(format!(
                "affine last row must be (0, 0, 0, 1), got {last:?}"
            )));
        }
        let det = matrix.fixed_view::<3, 3>(0, 0).determinant();
        if det.abs() <= MIN_DET {
            return Err(Error::SingularAffine(det));
        }
        Ok(AffineTransform { matrix })
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::Config(format!(
                "affine needs 16 values, got {}",
                values.len()
            )));
        }
        Self::from_matrix(Matrix4::from_row_slice(values))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_part(&self) -> [f64; 3] {
        [self.matrix[(0, 3)], self.matrix[(1, 3)], self.matrix[(2, 3)]]
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let v = self.linear() * Vector3::from(p) + Vector3::from(self.translation_part());
        [v[0], v[1], v[2]]
    }

    /// Applies only the linear block (for transforming displacement vectors).
    pub fn apply_linear(&self, v: [f64; 3]) -> [f64; 3] {
        let r = self.linear() * Vector3::from(v);
        [r[0], r[1], r[2]]
    }

    pub fn inverse(&self) -> Result<Self> {
        invert_affine(self)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn then_after(&self, other: &AffineTransform) -> Result<Self> {
        Self::from_matrix(self.matrix * other.matrix)
    }

    /// Re-expresses a transform fitted on a lattice whose voxel `j` sits at
    /// coordinate `scale * j` of another grid: the linear block is unchanged
    /// and the translation scales by `scale`.
    pub fn rescaled(&self, scale: f64) -> Self {
        let mut m = self.matrix;
        for r in 0..3 {
            m[(r, 3)] *= scale;
        }
        AffineTransform { matrix: m }
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        (self.matrix - other.matrix).amax()
    }
}

impl TryFrom<Vec<f64>> for AffineTransform {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_row_major(&v)
    }
}

impl From<AffineTransform> for Vec<f64> {
    fn from(a: AffineTransform) -> Vec<f64> {
        a.to_row_major().to_vec()
    }
}

impl SpatialMap for AffineTransform {
    fn apply(&self, x: Point3) -> Point3 {
        AffineTransform::apply(self, x)
    }
}

pub fn apply_affine(a: &AffineTransform, p: Point3) -> Point3 {
    a.apply(p)
}

/// Exact homogeneous inverse.
pub fn invert_affine(a: &AffineTransform) -> Result<AffineTransform> {
    let lin = a.linear();
    let det = lin.determinant();
    if det.abs() <= MIN_DET {
        return Err(Error::SingularAffine(det));
    }
    let inv = lin.try_inverse().ok_or(Error::SingularAffine(det))?;
    let t = -(inv * Vector3::from(a.translation_part()));
    AffineTransform::from_parts(inv, [t[0], t[1], t[2]])
}

/// Least-squares affine `A` with `A * [x_m; 1] ≈ [x_f; 1]` over all pairs.
///
/// Solved through the singular value decomposition of the `N x 4` design
/// matrix, which also provides the conditioning check.
pub fn fit_affine(matches: &MatchSet) -> Result<AffineTransform> {
    let pts: Vec<(Point3, Point3)> = matches
        .pairs
        .iter()
        .map(|m| (to_f(m.moving), to_f(m.fixed)))
        .collect();
    fit_affine_points(&pts)
}

/// [`fit_affine`] on continuous `(moving, fixed)` pairs.
pub fn fit_affine_points(pairs: &[(Point3, Point3)]) -> Result<AffineTransform> {
    let n = pairs.len();
    if n < 4 {
        return Err(Error::DegenerateMatches(format!(
            "{n} pairs; at least 4 non-coplanar pairs are needed"
        )));
    }
    let design = DMatrix::from_fn(n, 4, |r, c| if c < 3 { pairs[r].0[c] } else { 1.0 });
    let rhs = DMatrix::from_fn(n, 3, |r, c| pairs[r].1[c]);
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::DegenerateMatches(format!(
            "design matrix condition estimate {cond:e} (points coplanar?)"
        )));
    }
    let sol = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::DegenerateMatches(e.to_string()))?;
    // sol is 4x3: column j holds row j of the affine block.
    let mut m = Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            m[(r, c)] = sol[(c, r)];
        }
    }
    AffineTransform::from_matrix(m)
}

/// Root-mean-square distance between `A x_m` and `x_f`.
pub fn fit_residual(a: &AffineTransform, matches: &MatchSet) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    let ss: f64 = matches
        .pairs
        .iter()
        .map(|m| {
            let p = a.apply(to_f(m.moving));
            let f = to_f(m.fixed);
            (0..3).map(|i| (p[i] - f[i]).powi(2)).sum::<f64>()
        })
        .sum();
    (ss / matches.len() as f64).sqrt()
}

pub(crate) fn to_f(p: [usize; 3]) -> Point3 {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}
