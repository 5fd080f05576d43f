//! Dense instance optimization on feature similarity.
//!
//! Minimizes
//!
//! ```text
//! λ₁ (L_feat + L_int) + λ₂ (1/N) Σ ‖∇θ‖²_F
//! ```
//!
//! over a per-voxel parameter field `θ`, which is either the displacement
//! `u` itself or a stationary velocity integrated into `u`. `L_feat` is the
//! mean of `1 − ŵ(x)·s_f(x)` over unmasked voxels, where `ŵ` is the moving
//! feature map sampled at `x + u(x)` and re-normalized; `L_int` is an
//! optional `1 − NCC` or `1 − LNCC` on the warped intensities.
//!
//! The gradient is exact (up to the kinks of trilinear interpolation): it
//! differentiates through the sampling stencil, the re-normalization of the
//! warped feature vectors and, for velocity fields, every squaring step.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{
    add, DisplacementField, FeatureMap, GridShape, Interpolate, ScalarVolume, Stencil, VectorField,
    MASK_NORM,
};
use crate::metrics::{lncc_with_grad, ncc_with_grad};
use crate::optim::{descend, DescentConfig, Objective};
use crate::smoothness::{add_gradient_energy_grad, gradient_energy};
use crate::transform::{integrate_svf_backward, integrate_with_history, DEFAULT_SVF_STEPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntensityTerm {
    None,
    Ncc,
    Lncc { window: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameterization {
    Displacement,
    Svf { steps: usize },
}

impl Parameterization {
    pub fn svf() -> Self {
        Parameterization::Svf {
            steps: DEFAULT_SVF_STEPS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceObjectiveConfig {
    /// Weight on the similarity terms.
    pub lambda_sim: f64,
    /// Weight on the smoothness term.
    pub lambda_reg: f64,
    pub intensity: IntensityTerm,
    pub parameterization: Parameterization,
    pub step_size: f64,
    pub iterations: usize,
    pub convergence_tol: f64,
}

impl Default for InstanceObjectiveConfig {
    fn default() -> Self {
        InstanceObjectiveConfig {
            lambda_sim: 1.0,
            lambda_reg: 1.0,
            intensity: IntensityTerm::None,
            parameterization: Parameterization::Displacement,
            step_size: 1.0,
            iterations: 100,
            convergence_tol: 1e-6,
        }
    }
}

impl InstanceObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sim >= 0.0 && self.lambda_reg >= 0.0) {
            return Err(Error::Config("instance weights must be >= 0".into()));
        }
        if let IntensityTerm::Lncc { window } = self.intensity {
            if window < 3 || window % 2 == 0 {
                return Err(Error::Config(format!("LNCC window {window} must be odd and >= 3")));
            }
        }
        if let Parameterization::Svf { steps } = self.parameterization {
            if steps < 1 {
                return Err(Error::Config("SVF steps must be >= 1".into()));
            }
        }
        self.descent().validate()
    }

    fn descent(&self) -> DescentConfig {
        DescentConfig {
            step_size: self.step_size,
            iterations: self.iterations,
            tolerance: self.convergence_tol,
        }
    }
}

/// Mean `1 − similarity` over voxels unmasked in both maps.
pub fn feature_loss(warped: &FeatureMap, fixed: &FeatureMap) -> Result<f64> {
    warped.shape.check_dims(&fixed.shape, "feature loss")?;
    if warped.channels() != fixed.channels() {
        return Err(Error::DimensionMismatch {
            expected: fixed.channels(),
            actual: warped.channels(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..fixed.shape.len() {
        if warped.is_masked(i) || fixed.is_masked(i) {
            continue;
        }
        let d: f64 = warped.vector(i).iter().zip(fixed.vector(i)).map(|(a, b)| a * b).sum();
        sum += 1.0 - d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyOverlap);
    }
    Ok(sum / n as f64)
}

/// Smoothness penalty: mean squared forward-difference Jacobian norm.
pub fn reg_loss<K>(field: &VectorField<K>) -> f64 {
    gradient_energy(field)
}

/// Inputs of one instance problem, all on the fixed grid.
pub struct InstanceProblem<'a> {
    pub moving_features: &'a FeatureMap,
    pub fixed_features: &'a FeatureMap,
    pub moving_image: Option<&'a ScalarVolume>,
    pub fixed_image: Option<&'a ScalarVolume>,
    pub config: InstanceObjectiveConfig,
}

struct VoxelTerm {
    loss: f64,
    valid: bool,
    dloss: [f64; 3],
    intensity: f64,
    dintensity: [f64; 3],
}

impl<'a> InstanceProblem<'a> {
    pub fn new(
        moving_features: &'a FeatureMap,
        fixed_features: &'a FeatureMap,
        moving_image: Option<&'a ScalarVolume>,
        fixed_image: Option<&'a ScalarVolume>,
        config: InstanceObjectiveConfig,
    ) -> Result<Self> {
        config.validate()?;
        let shape = fixed_features.shape;
        moving_features.shape.check_dims(&shape, "moving vs fixed features")?;
        if moving_features.channels() != fixed_features.channels() {
            return Err(Error::DimensionMismatch {
                expected: fixed_features.channels(),
                actual: moving_features.channels(),
            });
        }
        if config.intensity != IntensityTerm::None {
            match (moving_image, fixed_image) {
                (Some(m), Some(f)) => {
                    m.shape.check_dims(&shape, "moving image vs feature grid")?;
                    f.shape.check_dims(&shape, "fixed image vs feature grid")?;
                }
                _ => {
                    return Err(Error::Config(
                        "intensity term selected but images are missing".into(),
                    ))
                }
            }
        }
        Ok(InstanceProblem {
            moving_features,
            fixed_features,
            moving_image,
            fixed_image,
            config,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.fixed_features.shape
    }

    fn voxel_term(&self, i: usize, u: [f64; 3], want_grad: bool) -> Result<VoxelTerm> {
        let shape = self.shape();
        let st = Stencil::at(&shape, add(shape.point(i), u))?;
        let mut term = VoxelTerm {
            loss: 0.0,
            valid: false,
            dloss: [0.0; 3],
            intensity: 0.0,
            dintensity: [0.0; 3],
        };
        if let Some(img) = self.moving_image.filter(|_| self.config.intensity != IntensityTerm::None) {
            term.intensity = img.blend(&st);
            if want_grad {
                for k in 0..8 {
                    let v = img.values[st.index[k]];
                    for a in 0..3 {
                        term.dintensity[a] += st.dweight[k][a] * v;
                    }
                }
            }
        }
        if self.fixed_features.is_masked(i) {
            return Ok(term);
        }
        let raw = self.moving_features.blend(&st);
        let n = raw.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n < MASK_NORM {
            return Ok(term);
        }
        let s = self.fixed_features.vector(i);
        let cos = raw.iter().zip(s).map(|(r, f)| r * f).sum::<f64>() / n;
        term.loss = 1.0 - cos;
        term.valid = true;
        if want_grad {
            // d(1 − r·s/|r|)/dr = −(s − cos r̂) / |r|
            let q: Vec<f64> = raw.iter().zip(s).map(|(r, f)| -(f - cos * r / n) / n).collect();
            for k in 0..8 {
                let dw = st.dweight[k];
                if dw == [0.0; 3] {
                    continue;
                }
                let proj: f64 = q
                    .iter()
                    .zip(self.moving_features.vector(st.index[k]))
                    .map(|(a, b)| a * b)
                    .sum();
                for a in 0..3 {
                    term.dloss[a] += dw[a] * proj;
                }
            }
        }
        Ok(term)
    }

    /// Objective, and optionally its gradient with respect to `u`, for a
    /// displacement field. The regularizer is not included.
    fn similarity(&self, u: &DisplacementField, want_grad: bool) -> Result<(f64, Vec<[f64; 3]>)> {
        let shape = self.shape();
        let terms = (0..shape.len())
            .into_par_iter()
            .map(|i| self.voxel_term(i, u.data[i], want_grad))
            .collect::<Result<Vec<_>>>()?;
        let valid = terms.iter().filter(|t| t.valid).count();
        if valid == 0 {
            return Err(Error::EmptyOverlap);
        }
        let feat = terms.iter().filter(|t| t.valid).map(|t| t.loss).sum::<f64>() / valid as f64;
        let lambda = self.config.lambda_sim;
        let mut grad = Vec::new();
        if want_grad {
            let inv = lambda / valid as f64;
            grad = terms
                .iter()
                .map(|t| if t.valid { t.dloss.map(|g| g * inv) } else { [0.0; 3] })
                .collect();
        }

        let mut intensity = 0.0;
        if self.config.intensity != IntensityTerm::None {
            let warped = ScalarVolume {
                shape,
                values: terms.iter().map(|t| t.intensity).collect(),
            };
            let fixed = self.fixed_image.expect("validated in new");
            let (cc, dcc) = match self.config.intensity {
                IntensityTerm::Ncc => ncc_with_grad(&warped, fixed)?,
                IntensityTerm::Lncc { window } => lncc_with_grad(&warped, fixed, window, want_grad)?,
                IntensityTerm::None => unreachable!(),
            };
            intensity = 1.0 - cc;
            if want_grad {
                for ((g, t), d) in grad.iter_mut().zip(&terms).zip(&dcc) {
                    for a in 0..3 {
                        g[a] -= lambda * d * t.dintensity[a];
                    }
                }
            }
        }
        Ok((lambda * (feat + intensity), grad))
    }

    fn displacement(&self, params: &[f64]) -> (DisplacementField, Option<Vec<DisplacementField>>) {
        let field = DisplacementField::from_flat(self.shape(), params);
        match self.config.parameterization {
            Parameterization::Displacement => (field, None),
            Parameterization::Svf { steps } => {
                let hist = integrate_with_history(&field.cast(), steps);
                (hist.last().unwrap().clone(), Some(hist))
            }
        }
    }

    fn reg(&self, params: &[f64]) -> f64 {
        self.config.lambda_reg * gradient_energy(&DisplacementField::from_flat(self.shape(), params))
    }

    /// Objective value for a flat parameter vector.
    pub fn objective(&self, params: &[f64]) -> Result<f64> {
        let (u, _) = self.displacement(params);
        Ok(self.similarity(&u, false)?.0 + self.reg(params))
    }

    /// Objective value and gradient with respect to the parameters.
    pub fn objective_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (u, hist) = self.displacement(params);
        let (sim, mut grad) = self.similarity(&u, true)?;
        if let Some(hist) = hist {
            grad = integrate_svf_backward(&hist, grad);
        }
        if self.config.lambda_reg > 0.0 {
            let p = DisplacementField::from_flat(self.shape(), params);
            add_gradient_energy_grad(&p, self.config.lambda_reg, &mut grad);
        }
        Ok((sim + self.reg(params), grad.into_iter().flatten().collect()))
    }
}

impl Objective for InstanceProblem<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        self.objective(x)
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.objective_and_gradient(x)
    }
}

/// Objective at a parameter field (displacement or velocity, per config).
pub fn instance_objective<K>(params: &VectorField<K>, problem: &InstanceProblem) -> Result<f64> {
    problem.shape().check_dims(&params.shape, "parameter field")?;
    problem.objective(&params.flat())
}

/// Gradient of [`instance_objective`] with respect to every parameter.
pub fn instance_gradient<K>(
    params: &VectorField<K>,
    problem: &InstanceProblem,
) -> Result<VectorField<K>> {
    problem.shape().check_dims(&params.shape, "parameter field")?;
    let (_, g) = problem.objective_and_gradient(&params.flat())?;
    Ok(VectorField::from_flat(params.shape, &g))
}

#[derive(Clone, Debug)]
pub struct InstanceFit {
    /// The resulting displacement (integrated when optimizing a velocity).
    pub field: DisplacementField,
    /// The optimized parameter field.
    pub params: DisplacementField,
    pub history: Vec<f64>,
}

/// Descends from `init`. In velocity mode `init` seeds the velocity field.
pub fn optimize_instance(problem: &InstanceProblem, init: &DisplacementField) -> Result<InstanceFit> {
    problem.shape().check_dims(&init.shape, "initial field")?;
    let out = descend(problem, init.flat(), &problem.config.descent())?;
    let (field, _) = problem.displacement(&out.x);
    Ok(InstanceFit {
        field,
        params: DisplacementField::from_flat(problem.shape(), &out.x),
        history: out.history,
    })
}
