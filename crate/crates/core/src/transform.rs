//! Velocity-field integration, transform composition and Jacobian analysis.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::AffineTransform;
use crate::error::{Error, Result};
use crate::grid::{
    add, map_points, DisplacementField, GridShape, Interpolate, Point3, ScalarVolume, SpatialMap,
    Stencil, VelocityField,
};

/// Default number of squarings.
pub const DEFAULT_SVF_STEPS: usize = 7;

/// Flow of a stationary velocity field at `t = 1` by scaling and squaring.
///
/// Starts from `v / 2^steps` and applies `steps` self-compositions
/// `u <- u + u ∘ (id + u)`.
pub fn integrate_svf(v: &VelocityField, steps: usize) -> DisplacementField {
    integrate_with_history(v, steps).pop().unwrap()
}

/// All intermediate displacements `u_0 .. u_steps`.
pub(crate) fn integrate_with_history(v: &VelocityField, steps: usize) -> Vec<DisplacementField> {
    let scale = 0.5f64.powi(steps as i32);
    let mut history = Vec::with_capacity(steps + 1);
    history.push(v.scaled(scale).cast());
    for _ in 0..steps {
        let u = history.last().unwrap();
        history.push(self_compose(u));
    }
    history
}

fn self_compose(u: &DisplacementField) -> DisplacementField {
    let shape = u.shape;
    let data = (0..shape.len())
        .into_par_iter()
        .map(|i| {
            let d = u.data[i];
            let p = add(shape.point(i), d);
            let st = Stencil::at(&shape, p).expect("finite field");
            add(d, u.blend(&st))
        })
        .collect();
    DisplacementField::from_vec(shape, data)
}

/// Pulls a gradient with respect to the integrated displacement back to the
/// velocity field.
pub(crate) fn integrate_svf_backward(
    history: &[DisplacementField],
    grad_out: Vec<[f64; 3]>,
) -> Vec<[f64; 3]> {
    let steps = history.len() - 1;
    let mut g = grad_out;
    for k in (0..steps).rev() {
        let u = &history[k];
        let shape = u.shape;
        let mut prev = g.clone();
        for i in 0..shape.len() {
            let gi = g[i];
            if gi == [0.0; 3] {
                continue;
            }
            let p = add(shape.point(i), u.data[i]);
            let st = Stencil::at(&shape, p).expect("finite field");
            let mut jt = [0.0; 3];
            for c in 0..8 {
                let val = u.data[st.index[c]];
                let w = st.weight[c];
                let dot = gi[0] * val[0] + gi[1] * val[1] + gi[2] * val[2];
                for a in 0..3 {
                    jt[a] += st.dweight[c][a] * dot;
                    prev[st.index[c]][a] += w * gi[a];
                }
            }
            for a in 0..3 {
                prev[i][a] += jt[a];
            }
        }
        g = prev;
    }
    let scale = 0.5f64.powi(steps as i32);
    g.into_iter().map(|v| v.map(|c| c * scale)).collect()
}

/// `φ⁻¹ = φ_a⁻¹ ∘ φ_c⁻¹ ∘ φ_i⁻¹` on the fixed grid.
///
/// Per fixed point `x`: `y1 = x + dense(x)`, `y2 = y1 + coarse(y1)`,
/// result `A⁻¹ y2`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeTransform {
    pub affine: AffineTransform,
    pub coarse: DisplacementField,
    pub dense: DisplacementField,
    inverse: AffineTransform,
}

impl CompositeTransform {
    pub fn new(
        affine: AffineTransform,
        coarse: DisplacementField,
        dense: DisplacementField,
    ) -> Result<Self> {
        coarse.shape.check_dims(&dense.shape, "coarse vs dense stage")?;
        for f in [&coarse, &dense] {
            if f.data.iter().flatten().any(|c| !c.is_finite()) {
                return Err(Error::NumericalDivergence("non-finite transform stage".into()));
            }
        }
        let inverse = affine.inverse()?;
        Ok(CompositeTransform {
            affine,
            coarse,
            dense,
            inverse,
        })
    }

    pub fn identity(shape: GridShape) -> Self {
        Self::new(
            AffineTransform::identity(),
            DisplacementField::zeros(shape),
            DisplacementField::zeros(shape),
        )
        .expect("identity stages are valid")
    }

    pub fn shape(&self) -> &GridShape {
        &self.dense.shape
    }

    /// Bakes the map into a displacement on the fixed grid: `φ⁻¹(x) − x`.
    pub fn materialize(&self) -> DisplacementField {
        let shape = *self.shape();
        let pts = map_points(self, &shape);
        let data = pts
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let x = shape.point(i);
                [p[0] - x[0], p[1] - x[1], p[2] - x[2]]
            })
            .collect();
        DisplacementField::from_vec(shape, data)
    }
}

impl SpatialMap for CompositeTransform {
    fn apply(&self, x: Point3) -> Point3 {
        let y1 = self.dense.apply(x);
        let y2 = self.coarse.apply(y1);
        self.inverse.apply(y2)
    }

    fn domain(&self) -> Option<&GridShape> {
        Some(&self.dense.shape)
    }
}

/// Lazily evaluated composite map.
pub fn compose(t: &CompositeTransform) -> &CompositeTransform {
    t
}

/// On-disk description of a [`CompositeTransform`]: the affine array plus
/// the paths of two VOL1 field files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformManifest {
    pub affine: AffineTransform,
    pub coarse: String,
    pub dense: String,
}

/// Jacobian determinant of `x -> x + u(x)` per voxel.
///
/// Central differences in the interior, one-sided differences on faces.
pub fn jacobian_determinant(field: &DisplacementField) -> ScalarVolume {
    let shape = field.shape;
    let coords: Vec<Point3> = (0..shape.len())
        .map(|i| add(shape.point(i), field.data[i]))
        .collect();
    jacobian_of_coordinates(&shape, &coords)
}

/// Jacobian determinant of an arbitrary map sampled on `shape`.
pub fn jacobian_of_map<M: SpatialMap>(map: &M, shape: &GridShape) -> ScalarVolume {
    jacobian_of_coordinates(shape, &map_points(map, shape))
}

fn jacobian_of_coordinates(shape: &GridShape, phi: &[Point3]) -> ScalarVolume {
    let d = shape.dims;
    let values = (0..shape.len())
        .into_par_iter()
        .map(|i| {
            let c = shape.coord(i);
            let mut j = [[0.0; 3]; 3];
            for a in 0..3 {
                if d[a] == 1 {
                    j[a][a] = 1.0;
                    continue;
                }
                let (lo, hi) = if c[a] == 0 {
                    (0, 1)
                } else if c[a] == d[a] - 1 {
                    (d[a] - 2, d[a] - 1)
                } else {
                    (c[a] - 1, c[a] + 1)
                };
                let mut pl = c;
                pl[a] = lo;
                let mut ph = c;
                ph[a] = hi;
                let fl = phi[shape.index(pl[0], pl[1], pl[2])];
                let fh = phi[shape.index(ph[0], ph[1], ph[2])];
                let h = (hi - lo) as f64;
                // Column a holds the derivative along axis a.
                for r in 0..3 {
                    j[r][a] = (fh[r] - fl[r]) / h;
                }
            }
            det3(&j)
        })
        .collect();
    ScalarVolume {
        shape: *shape,
        values,
    }
}

pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Fraction of voxels with a non-positive Jacobian determinant.
pub fn folding_fraction(jac: &ScalarVolume) -> f64 {
    if jac.values.is_empty() {
        return 0.0;
    }
    jac.values.iter().filter(|&&v| v <= 0.0).count() as f64 / jac.values.len() as f64
}
