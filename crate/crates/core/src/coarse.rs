//! Coarse displacement field fitted to matched points.
//!
//! The field lives on a lattice with one node every `stride` voxels and maps
//! affinely pre-aligned points `y = A⁻¹ x_f` towards their moving partners:
//! `x_m ≈ y + u(y)`. It minimizes
//!
//! ```text
//! (1/|X|) Σ ‖x_m − (y + u(y))‖²  +  λ (1/|nodes|) Σ ‖∇u‖²_F
//! ```
//!
//! where `u(y)` is the trilinear interpolation of the lattice at `y / stride`
//! and `∇u` uses forward differences on the lattice.

use crate::affine::{to_f, AffineTransform};
use crate::error::{Error, Result};
use crate::grid::{DisplacementField, GridShape, Interpolate, Point3, Stencil};
use crate::matching::MatchSet;
use crate::optim::{descend, DescentConfig, Objective};
use crate::smoothness::{add_gradient_energy_grad, gradient_energy};

/// Displacements on a strided lattice, in fine-grid voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseDisplacementField {
    pub stride: usize,
    pub lattice: DisplacementField,
}

impl CoarseDisplacementField {
    /// Zero field with `⌈n / stride⌉` nodes per axis of `grid`.
    pub fn zeros(grid: &GridShape, stride: usize) -> Result<Self> {
        let lattice = lattice_shape(grid, stride)?;
        Ok(CoarseDisplacementField {
            stride,
            lattice: DisplacementField::zeros(lattice),
        })
    }

    pub fn new(stride: usize, lattice: DisplacementField) -> Result<Self> {
        if stride < 1 {
            return Err(Error::InvalidStep(stride));
        }
        if lattice.data.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NumericalDivergence("non-finite coarse field".into()));
        }
        Ok(CoarseDisplacementField { stride, lattice })
    }

    /// Displacement at a fine-grid point.
    pub fn displacement(&self, y: Point3) -> Result<[f64; 3]> {
        let s = self.stride as f64;
        let st = Stencil::at(&self.lattice.shape, [y[0] / s, y[1] / s, y[2] / s])?;
        Ok(self.lattice.blend(&st))
    }
}

/// Lattice with `⌈n / stride⌉` nodes per axis.
pub fn lattice_shape(grid: &GridShape, stride: usize) -> Result<GridShape> {
    if stride < 1 {
        return Err(Error::InvalidStep(stride));
    }
    let dims = grid.dims.map(|n| n.div_ceil(stride));
    let s = stride as f64;
    GridShape::with_spacing(dims, grid.spacing.map(|v| v * s))
}

/// Settings of the coarse-stage descent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub reg_weight: f64,
    pub convergence_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 0.5,
            iterations: 200,
            reg_weight: 1.0,
            convergence_tol: 1e-6,
        }
    }
}

impl OptimizerConfig {
    fn descent(&self) -> DescentConfig {
        DescentConfig {
            step_size: self.step_size,
            iterations: self.iterations,
            tolerance: self.convergence_tol,
        }
    }
}

/// The objective with per-match stencils precomputed.
pub struct CoarseProblem {
    lattice: GridShape,
    targets: Vec<(Point3, Point3, Stencil)>,
    reg_weight: f64,
}

impl CoarseProblem {
    pub fn new(
        lattice: GridShape,
        stride: usize,
        matches: &MatchSet,
        affine: &AffineTransform,
        reg_weight: f64,
    ) -> Result<Self> {
        if matches.is_empty() {
            return Err(Error::EmptyMatchSet);
        }
        if !(reg_weight >= 0.0) {
            return Err(Error::Config(format!("regularizer weight {reg_weight} must be >= 0")));
        }
        let inv = affine.inverse()?;
        let s = stride as f64;
        let targets = matches
            .pairs
            .iter()
            .map(|m| {
                let y = inv.apply(to_f(m.fixed));
                let st = Stencil::at(&lattice, [y[0] / s, y[1] / s, y[2] / s])?;
                Ok((to_f(m.moving), y, st))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CoarseProblem {
            lattice,
            targets,
            reg_weight,
        })
    }

    fn field(&self, flat: &[f64]) -> DisplacementField {
        DisplacementField::from_flat(self.lattice, flat)
    }

    fn residual(&self, u: &DisplacementField, xm: &Point3, y: &Point3, st: &Stencil) -> [f64; 3] {
        let d = u.blend(st);
        [xm[0] - y[0] - d[0], xm[1] - y[1] - d[1], xm[2] - y[2] - d[2]]
    }

    pub fn evaluate(&self, u: &DisplacementField) -> f64 {
        let data: f64 = self
            .targets
            .iter()
            .map(|(xm, y, st)| self.residual(u, xm, y, st).iter().map(|r| r * r).sum::<f64>())
            .sum::<f64>()
            / self.targets.len() as f64;
        data + self.reg_weight * gradient_energy(u)
    }

    pub fn gradient(&self, u: &DisplacementField) -> Vec<[f64; 3]> {
        let mut grad = vec![[0.0; 3]; self.lattice.len()];
        let scale = -2.0 / self.targets.len() as f64;
        for (xm, y, st) in &self.targets {
            let r = self.residual(u, xm, y, st);
            for k in 0..8 {
                let w = st.weight[k];
                if w != 0.0 {
                    for c in 0..3 {
                        grad[st.index[k]][c] += scale * r[c] * w;
                    }
                }
            }
        }
        if self.reg_weight > 0.0 {
            add_gradient_energy_grad(u, self.reg_weight, &mut grad);
        }
        grad
    }
}

impl Objective for CoarseProblem {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(&self.field(x)))
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let u = self.field(x);
        let g = self.gradient(&u);
        Ok((self.evaluate(&u), g.into_iter().flatten().collect()))
    }
}

pub fn coarse_objective(
    u: &CoarseDisplacementField,
    matches: &MatchSet,
    affine: &AffineTransform,
    reg_weight: f64,
) -> Result<f64> {
    let p = CoarseProblem::new(u.lattice.shape, u.stride, matches, affine, reg_weight)?;
    Ok(p.evaluate(&u.lattice))
}

pub fn coarse_gradient(
    u: &CoarseDisplacementField,
    matches: &MatchSet,
    affine: &AffineTransform,
    reg_weight: f64,
) -> Result<DisplacementField> {
    let p = CoarseProblem::new(u.lattice.shape, u.stride, matches, affine, reg_weight)?;
    Ok(DisplacementField::from_vec(u.lattice.shape, p.gradient(&u.lattice)))
}

/// Result of [`optimize_coarse`] together with its objective trace.
#[derive(Clone, Debug)]
pub struct CoarseFit {
    pub field: CoarseDisplacementField,
    pub history: Vec<f64>,
}

/// Descends from `u = 0` on the lattice covering `grid`.
pub fn optimize_coarse(
    matches: &MatchSet,
    affine: &AffineTransform,
    grid: &GridShape,
    stride: usize,
    config: &OptimizerConfig,
) -> Result<CoarseFit> {
    let lattice = lattice_shape(grid, stride)?;
    let problem = CoarseProblem::new(lattice, stride, matches, affine, config.reg_weight)?;
    let out = descend(&problem, vec![0.0; lattice.len() * 3], &config.descent())?;
    Ok(CoarseFit {
        field: CoarseDisplacementField::new(stride, problem.field(&out.x))?,
        history: out.history,
    })
}

/// Dense field on `target`: the lattice interpolated at every voxel.
pub fn upsample_coarse(u: &CoarseDisplacementField, target: &GridShape) -> Result<DisplacementField> {
    check_cover(u, target)?;
    let data = (0..target.len())
        .map(|i| u.displacement(target.point(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DisplacementField::from_vec(*target, data))
}

/// Re-expresses the coarse stage as a displacement on the fixed grid.
///
/// The coarse field acts after `A⁻¹`: `x -> y + u(y)` with `y = A⁻¹ x`. The
/// returned field `w` satisfies `A⁻¹(x + w(x)) = y + u(y)`, i.e.
/// `w(x) = L u(A⁻¹ x)` with `L` the linear block of `A`, so that the coarse
/// stage composes before the affine inverse.
pub fn fixed_frame_field(
    u: &CoarseDisplacementField,
    affine: &AffineTransform,
    target: &GridShape,
) -> Result<DisplacementField> {
    check_cover(u, target)?;
    let inv = affine.inverse()?;
    let data = (0..target.len())
        .map(|i| {
            let y = inv.apply(target.point(i));
            Ok(affine.apply_linear(u.displacement(y)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DisplacementField::from_vec(*target, data))
}

fn check_cover(u: &CoarseDisplacementField, target: &GridShape) -> Result<()> {
    let want = lattice_shape(target, u.stride)?;
    want.check_dims(&u.lattice.shape, "coarse lattice vs target grid")
}
