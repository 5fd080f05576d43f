//! Forward-difference gradient energy of a vector field.
//!
//! `E(u) = (1/N) Σ_x Σ_axis ‖u(x + e_axis) − u(x)‖²`, with differences that
//! would leave the grid taken as zero.

use crate::grid::VectorField;

/// Mean squared Frobenius norm of the forward-difference Jacobian.
pub fn gradient_energy<K>(field: &VectorField<K>) -> f64 {
    let shape = field.shape;
    let d = shape.dims;
    let mut sum = 0.0;
    for i in 0..shape.len() {
        let c = shape.coord(i);
        let u = field.data[i];
        for a in 0..3 {
            if c[a] + 1 < d[a] {
                let mut n = c;
                n[a] += 1;
                let v = field.data[shape.index(n[0], n[1], n[2])];
                sum += (0..3).map(|k| (v[k] - u[k]).powi(2)).sum::<f64>();
            }
        }
    }
    sum / shape.len() as f64
}

/// Gradient of [`gradient_energy`] with respect to every vector, scaled by
/// `weight`, accumulated into `out`.
pub fn add_gradient_energy_grad<K>(field: &VectorField<K>, weight: f64, out: &mut [[f64; 3]]) {
    let shape = field.shape;
    let d = shape.dims;
    let scale = 2.0 * weight / shape.len() as f64;
    for i in 0..shape.len() {
        let c = shape.coord(i);
        let u = field.data[i];
        for a in 0..3 {
            if c[a] + 1 < d[a] {
                let mut n = c;
                n[a] += 1;
                let j = shape.index(n[0], n[1], n[2]);
                let v = field.data[j];
                for k in 0..3 {
                    let g = scale * (v[k] - u[k]);
                    out[j][k] += g;
                    out[i][k] -= g;
                }
            }
        }
    }
}
