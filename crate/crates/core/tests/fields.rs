mod common;

use anatreg::coarse::{lattice_shape, CoarseProblem};
use anatreg::optim::Objective;
use anatreg::transform::jacobian_of_map;
use anatreg::{
    coarse_gradient, coarse_objective, compose, folding_fraction, gradient_energy,
    integrate_svf, jacobian_determinant, optimize_coarse, upsample_coarse, AffineTransform,
    CoarseDisplacementField, CompositeTransform, DisplacementField, GridShape, MatchSet,
    OptimizerConfig, Point3, SpatialMap, VelocityField,
};
use common::*;

/// Trilinear sample with clamping, written out corner by corner.
fn oracle_sample(u: &DisplacementField, p: Point3) -> [f64; 3] {
    let d = u.shape.dims;
    let mut out = [0.0; 3];
    let c: [f64; 3] = std::array::from_fn(|a| p[a].clamp(0.0, (d[a] - 1) as f64));
    let f: [usize; 3] = std::array::from_fn(|a| (c[a].floor() as usize).min(d[a].saturating_sub(2)));
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let idx = [f[0] + dz, f[1] + dy, f[2] + dx];
                if (0..3).any(|a| idx[a] >= d[a]) {
                    continue;
                }
                let w: f64 = (0..3)
                    .map(|a| {
                        let t = c[a] - f[a] as f64;
                        if idx[a] == f[a] { 1.0 - t } else { t }
                    })
                    .product();
                let v = u.data[(idx[0] * d[1] + idx[1]) * d[2] + idx[2]];
                for k in 0..3 {
                    out[k] += w * v[k];
                }
            }
        }
    }
    out
}

fn oracle_energy(u: &DisplacementField) -> f64 {
    let d = u.shape.dims;
    let at = |z: usize, y: usize, x: usize| u.data[(z * d[1] + y) * d[2] + x];
    let mut total = 0.0;
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                let here = at(z, y, x);
                for next in [
                    (z + 1 < d[0]).then(|| at(z + 1, y, x)),
                    (y + 1 < d[1]).then(|| at(z, y + 1, x)),
                    (x + 1 < d[2]).then(|| at(z, y, x + 1)),
                ]
                .into_iter()
                .flatten()
                {
                    total += (0..3).map(|k| (next[k] - here[k]).powi(2)).sum::<f64>();
                }
            }
        }
    }
    total / u.shape.len() as f64
}

fn random_matches(grid: &GridShape, n: usize, a: &AffineTransform, noise: f64, seed: u64) -> MatchSet {
    let mut d = Draw::new(seed);
    let pairs: Vec<_> = (0..n)
        .map(|_| {
            let xf = [d.index(grid.dims[0]), d.index(grid.dims[1]), d.index(grid.dims[2])];
            let y = a.inverse().unwrap().apply(to_point(xf));
            let xm = std::array::from_fn(|k| {
                ((y[k] + noise * d.sym()).round().max(0.0) as usize).min(grid.dims[k] - 1)
            });
            (xm, xf)
        })
        .collect();
    matches_from(&pairs)
}

#[test]
fn coarse_objective_matches_double_loop_oracle() {
    for seed in 0..5 {
        let grid = cube(12);
        let stride = 4;
        let a = random_affine(seed, 0.05, 1.0);
        let ms = random_matches(&grid, 40, &a, 1.5, seed);
        let lat = lattice_shape(&grid, stride).unwrap();
        let u = CoarseDisplacementField::new(stride, random_field(lat, 0.5, seed)).unwrap();
        let inv = a.matrix().try_inverse().unwrap();
        let mut data = 0.0;
        for m in &ms.pairs {
            let xf = to_point(m.fixed);
            let h = inv * nalgebra::Vector4::new(xf[0], xf[1], xf[2], 1.0);
            let y = [h[0], h[1], h[2]];
            let q = y.map(|c| c / stride as f64);
            let s = oracle_sample(&u.lattice, q);
            let xm = to_point(m.moving);
            data += (0..3).map(|k| (xm[k] - y[k] - s[k]).powi(2)).sum::<f64>();
        }
        let want = data / ms.len() as f64 + oracle_energy(&u.lattice);
        let got = coarse_objective(&u, &ms, &a, 1.0).unwrap();
        assert!((got - want).abs() < 1e-12 * want.max(1.0), "{got} vs {want}");
        assert!(got >= 0.0);
    }
}

#[test]
fn coarse_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let grid = GridShape::new([8, 7, 8]).unwrap();
        let stride = 3;
        let a = random_affine(seed, 0.05, 1.0);
        let ms = random_matches(&grid, 30, &a, 2.0, seed);
        let lat = lattice_shape(&grid, stride).unwrap();
        let u = CoarseDisplacementField::new(stride, random_field(lat, 0.7, seed + 50)).unwrap();
        let lambda = 0.5 + (seed % 3) as f64;
        let g = coarse_gradient(&u, &ms, &a, lambda).unwrap();
        let p = CoarseProblem::new(lat, stride, &ms, &a, lambda).unwrap();
        let x: Vec<f64> = u.lattice.data.iter().flatten().copied().collect();
        let f = |x: &[f64]| p.value(x).unwrap();
        for i in 0..x.len() {
            let fd = central_diff(&f, &x, i, 1e-5);
            let an = g.data[i / 3][i % 3];
            assert!(rel_err(an, fd, 1e-9) < 1e-5, "seed {seed} comp {i}: {an} vs {fd}");
        }
    }
}

#[test]
fn node_matches_recover_lattice_displacement() {
    let grid = cube(13);
    let stride = 4;
    let lat = lattice_shape(&grid, stride).unwrap();
    let truth = DisplacementField::from_fn(lat, |[z, y, x]| {
        [((z + y) % 3) as f64 - 1.0, (x % 2) as f64, -(((z * x) % 2) as f64)]
    });
    let mut pairs = Vec::new();
    let mut matched = Vec::new();
    for i in 0..lat.len() {
        let c = lat.coord(i);
        let y = c.map(|v| v * stride);
        let u = truth.data[i];
        let xm: [f64; 3] = std::array::from_fn(|k| y[k] as f64 + u[k]);
        if xm.iter().all(|&v| (0.0..13.0).contains(&v)) {
            pairs.push((xm.map(|v| v as usize), y));
            matched.push(i);
        }
    }
    assert!(matched.len() > lat.len() / 2);
    let cfg = OptimizerConfig {
        step_size: 1.0,
        iterations: 2000,
        reg_weight: 0.0,
        convergence_tol: 1e-12,
    };
    let fit = optimize_coarse(&matches_from(&pairs), &AffineTransform::identity(), &grid, stride, &cfg).unwrap();
    for &i in &matched {
        let (got, want) = (fit.field.lattice.data[i], truth.data[i]);
        for k in 0..3 {
            assert!((got[k] - want[k]).abs() < 1e-4, "{got:?} vs {want:?}");
        }
    }
    assert!(fit.history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn larger_weights_never_roughen_the_field() {
    let grid = cube(16);
    let a = random_affine(2, 0.05, 1.0);
    let ms = random_matches(&grid, 150, &a, 3.0, 2);
    let mut last = f64::INFINITY;
    for lambda in [0.0, 0.1, 0.5, 1.0, 5.0, 25.0] {
        let cfg = OptimizerConfig {
            step_size: 0.5,
            iterations: 3000,
            reg_weight: lambda,
            convergence_tol: 1e-10,
        };
        let fit = optimize_coarse(&ms, &a, &grid, 4, &cfg).unwrap();
        let e = gradient_energy(&fit.field.lattice);
        assert!(e <= last + 1e-9, "lambda {lambda}: {e} > {last}");
        last = e;
    }
}

#[test]
fn upsampled_ramp_is_exact_off_nodes() {
    let grid = GridShape::new([9, 9, 9]).unwrap();
    let stride = 4;
    let lat = lattice_shape(&grid, stride).unwrap();
    let ramp = DisplacementField::from_fn(lat, |[z, y, x]| [0.5 * z as f64, -(y as f64), 0.25 * x as f64 + 1.0]);
    let up = upsample_coarse(&CoarseDisplacementField::new(stride, ramp).unwrap(), &grid).unwrap();
    for i in 0..grid.len() {
        let [z, y, x] = grid.point(i);
        let want = [0.5 * z / 4.0, -y / 4.0, 0.25 * x / 4.0 + 1.0];
        for k in 0..3 {
            assert!((up.data[i][k] - want[k]).abs() < 1e-12);
        }
    }
    let zero = CoarseDisplacementField::zeros(&grid, stride).unwrap();
    assert_eq!(upsample_coarse(&zero, &grid).unwrap().max_abs(), 0.0);
}

#[test]
fn composition_matches_pointwise_oracle() {
    let g = GridShape::new([10, 11, 9]).unwrap();
    let a = random_affine(4, 0.1, 2.0);
    let coarse = smooth_field(g, 1.2, 1);
    let dense = smooth_field(g, 0.8, 2);
    let t = CompositeTransform::new(a, coarse.clone(), dense.clone()).unwrap();
    let inv = a.matrix().try_inverse().unwrap();
    let mut d = Draw::new(8);
    for _ in 0..100 {
        let x = [d.range(0.0, 9.0), d.range(0.0, 10.0), d.range(0.0, 8.0)];
        let u1 = oracle_sample(&dense, x);
        let y1: Point3 = std::array::from_fn(|k| x[k] + u1[k]);
        let u2 = oracle_sample(&coarse, y1);
        let y2: Point3 = std::array::from_fn(|k| y1[k] + u2[k]);
        let h = inv * nalgebra::Vector4::new(y2[0], y2[1], y2[2], 1.0);
        let got = compose(&t).apply(x);
        for k in 0..3 {
            assert!((got[k] - h[k]).abs() < 1e-9);
        }
    }
}

#[test]
fn identity_stages_can_be_dropped() {
    let g = cube(8);
    let a = random_affine(6, 0.1, 2.0);
    let dense = smooth_field(g, 0.8, 3);
    let full = CompositeTransform::new(a, DisplacementField::zeros(g), dense.clone()).unwrap();
    let mut d = Draw::new(1);
    for _ in 0..50 {
        let x = d.point(0.0, 7.0);
        let p = dense.apply(x);
        let want = a.inverse().unwrap().apply(p);
        let got = full.apply(x);
        assert!((0..3).all(|k| (got[k] - want[k]).abs() < 1e-12));
    }
    let only_affine = CompositeTransform::new(a, DisplacementField::zeros(g), DisplacementField::zeros(g)).unwrap();
    let x = [1.5, 2.5, 3.5];
    let want = a.inverse().unwrap().apply(x);
    let got = only_affine.apply(x);
    assert!((0..3).all(|k| (got[k] - want[k]).abs() < 1e-12));
}

fn interior_max_diff(a: &DisplacementField, b: &DisplacementField, margin: usize) -> f64 {
    let d = a.shape.dims;
    let mut m: f64 = 0.0;
    for i in 0..a.shape.len() {
        let c = a.shape.coord(i);
        if (0..3).all(|k| c[k] >= margin && c[k] + margin < d[k]) {
            for k in 0..3 {
                m = m.max((a.data[i][k] - b.data[i][k]).abs());
            }
        }
    }
    m
}

#[test]
fn more_squarings_converge() {
    let g = cube(14);
    let v: VelocityField = smooth_field(g, 1.0, 5).cast();
    let diffs: Vec<f64> = (1..8)
        .map(|s| interior_max_diff(&integrate_svf(&v, s), &integrate_svf(&v, s + 1), 3))
        .collect();
    for w in diffs.windows(2) {
        assert!(w[1] <= w[0] * 1.01, "{diffs:?}");
    }
    assert!(diffs[6] < 1e-2);
}

#[test]
fn negative_velocity_inverts_the_flow() {
    for seed in 0..4 {
        let g = cube(16);
        let v: VelocityField = smooth_field(g, 1.0, seed).cast();
        let fwd = integrate_svf(&v, 7);
        let bwd = integrate_svf(&v.scaled(-1.0), 7);
        let mut worst: f64 = 0.0;
        for i in 0..g.len() {
            let c = g.coord(i);
            if c.iter().all(|&k| (3..13).contains(&k)) {
                let x = g.point(i);
                let y = bwd.apply(fwd.apply(x));
                worst = worst.max((0..3).map(|k| (y[k] - x[k]).abs()).fold(0.0, f64::max));
            }
        }
        assert!(worst < 0.05, "seed {seed}: {worst}");
    }
}

#[test]
fn uniform_scaling_jacobian_is_cubed() {
    let g = cube(7);
    for alpha in [0.5, 1.3, 2.0] {
        let u = DisplacementField::from_fn(g, |c| c.map(|v| (alpha - 1.0) * v as f64));
        let j = jacobian_determinant(&u);
        for i in 0..g.len() {
            let c = g.coord(i);
            if c.iter().all(|&k| (1..6).contains(&k)) {
                assert!((j.values[i] - alpha.powi(3)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn slab_jacobian_matches_stencil_oracle() {
    let g = GridShape::new([8, 5, 5]).unwrap();
    let u = DisplacementField::from_fn(g, |[z, _, _]| {
        if (2..6).contains(&z) { [-2.0 * z as f64, 0.0, 0.0] } else { [0.0; 3] }
    });
    let j = jacobian_determinant(&u);
    let uz = |z: usize| u.data[g.index(z, 2, 2)][0];
    for z in 0..8 {
        let dz = if z == 0 {
            uz(1) - uz(0)
        } else if z == 7 {
            uz(7) - uz(6)
        } else {
            (uz(z + 1) - uz(z - 1)) / 2.0
        };
        let want = 1.0 + dz;
        assert!((j.values[g.index(z, 2, 2)] - want).abs() < 1e-12, "z {z}");
    }
    assert!(j.values[g.index(3, 2, 2)] < 0.0);
    assert!(folding_fraction(&j) > 0.0);
    let via_map = jacobian_of_map(&u, &g);
    assert_eq!(via_map.values, j.values);
}
