//! Gradient descent with step halving.
//!
//! Each update moves the parameters by `step * g / ‖g‖∞`, so the step size is
//! the largest change of any single component (in voxels for displacement
//! fields). A step that would increase the objective is halved, up to
//! [`MAX_HALVINGS`] times per iteration; the reduced step is kept for the
//! following iterations. Accepted objective values never increase.

use crate::error::{Error, Result};

pub const MAX_HALVINGS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DescentConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub tolerance: f64,
}

impl DescentConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size {} must be > 0", self.step_size)));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config(format!("tolerance {} must be >= 0", self.tolerance)));
        }
        Ok(())
    }
}

/// A differentiable objective over a flat parameter vector.
pub trait Objective {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Clone, Debug)]
pub struct DescentOutcome {
    pub x: Vec<f64>,
    /// Objective at the start and after every accepted step.
    pub history: Vec<f64>,
    /// Whether the gradient fell below the tolerance.
    pub converged: bool,
}

impl DescentOutcome {
    pub fn initial(&self) -> f64 {
        self.history[0]
    }

    pub fn last(&self) -> f64 {
        *self.history.last().unwrap()
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericalDivergence(format!("{what} objective is {v}")))
    }
}

pub fn descend<O: Objective + ?Sized>(
    objective: &O,
    x0: Vec<f64>,
    config: &DescentConfig,
) -> Result<DescentOutcome> {
    config.validate()?;
    let mut x = x0;
    let (mut f, mut g) = objective.value_and_gradient(&x)?;
    finite(f, "initial")?;
    let mut history = vec![f];
    let mut step = config.step_size;
    let mut converged = false;
    let mut cand = vec![0.0; x.len()];

    'outer: for _ in 0..config.iterations {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !gmax.is_finite() {
            return Err(Error::NumericalDivergence("non-finite gradient".into()));
        }
        if gmax <= config.tolerance || gmax == 0.0 {
            converged = true;
            break;
        }
        let mut halvings = 0;
        loop {
            let scale = step / gmax;
            for ((c, xi), gi) in cand.iter_mut().zip(&x).zip(&g) {
                *c = xi - scale * gi;
            }
            let fc = finite(objective.value(&cand)?, "trial")?;
            if fc <= f {
                std::mem::swap(&mut x, &mut cand);
                let (nf, ng) = objective.value_and_gradient(&x)?;
                f = finite(nf, "accepted")?;
                g = ng;
                history.push(f);
                break;
            }
            halvings += 1;
            if halvings > MAX_HALVINGS {
                // No decrease along the gradient at any tried scale.
                break 'outer;
            }
            step *= 0.5;
        }
    }
    Ok(DescentOutcome {
        x,
        history,
        converged,
    })
}
