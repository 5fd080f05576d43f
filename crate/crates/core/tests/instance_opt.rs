mod common;

use anatreg::synth::{make_atlas, SynthSpec};
use anatreg::{
    folding_fraction, instance_gradient, instance_objective, jacobian_determinant,
    optimize_instance, reg_loss, feature_loss, warp_features, DisplacementField, FeatureMap,
    GridShape, InstanceObjectiveConfig, InstanceProblem, IntensityTerm, Parameterization, Point3,
    ScalarVolume, VelocityField,
};
use common::*;

fn clamp_sample(values: &[f64], channels: usize, g: &GridShape, p: Point3) -> Vec<f64> {
    let d = g.dims;
    let c: [f64; 3] = std::array::from_fn(|a| p[a].clamp(0.0, (d[a] - 1) as f64));
    let lo: [usize; 3] = std::array::from_fn(|a| (c[a].floor() as usize).min(d[a] - 2));
    let mut out = vec![0.0; channels];
    for corner in 0..8 {
        let idx: [usize; 3] = std::array::from_fn(|a| lo[a] + ((corner >> (2 - a)) & 1));
        let w: f64 = (0..3)
            .map(|a| {
                let t = c[a] - lo[a] as f64;
                if idx[a] == lo[a] { 1.0 - t } else { t }
            })
            .product();
        let flat = (idx[0] * d[1] + idx[1]) * d[2] + idx[2];
        for k in 0..channels {
            out[k] += w * values[flat * channels + k];
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn energy(u: &DisplacementField) -> f64 {
    let d = u.shape.dims;
    let mut t = 0.0;
    for i in 0..u.shape.len() {
        let c = u.shape.coord(i);
        for a in 0..3 {
            if c[a] + 1 < d[a] {
                let mut n = c;
                n[a] += 1;
                let j = u.shape.index(n[0], n[1], n[2]);
                t += (0..3).map(|k| (u.data[j][k] - u.data[i][k]).powi(2)).sum::<f64>();
            }
        }
    }
    t / u.shape.len() as f64
}

#[test]
fn objective_matches_straight_line_evaluation() {
    for seed in 0..4 {
        let g = cube(6);
        let mf = random_features(g, 5, seed);
        let ff = random_features(g, 5, seed + 10);
        let mi = random_volume(g, seed + 20);
        let fi = random_volume(g, seed + 30);
        let u = random_field(g, 0.8, seed + 40);
        let cfg = InstanceObjectiveConfig {
            lambda_sim: 0.7,
            lambda_reg: 0.3,
            intensity: IntensityTerm::Ncc,
            ..Default::default()
        };
        let p = InstanceProblem::new(&mf, &ff, Some(&mi), Some(&fi), cfg).unwrap();

        let mut feat = 0.0;
        let mut warped_img = Vec::new();
        for i in 0..g.len() {
            let x = g.point(i);
            let q = [x[0] + u.data[i][0], x[1] + u.data[i][1], x[2] + u.data[i][2]];
            let v = clamp_sample(mf.data(), 5, &g, q);
            let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            feat += 1.0 - v.iter().zip(ff.vector(i)).map(|(a, b)| a * b).sum::<f64>() / n;
            warped_img.push(clamp_sample(&mi.values, 1, &g, q)[0]);
        }
        feat /= g.len() as f64;
        let want = 0.7 * (feat + 1.0 - pearson(&warped_img, &fi.values)) + 0.3 * energy(&u);
        let got = instance_objective(&u, &p).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

fn fd_check(p: &InstanceProblem, params: &DisplacementField, picks: usize, seed: u64) -> f64 {
    let g = instance_gradient(params, p).unwrap();
    let x: Vec<f64> = params.data.iter().flatten().copied().collect();
    let f = |x: &[f64]| p.objective(x).unwrap();
    let mut d = Draw::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..picks {
        let i = d.index(x.len());
        let fd = central_diff(&f, &x, i, 1e-5);
        worst = worst.max(rel_err(g.data[i / 3][i % 3], fd, 1e-8));
    }
    worst
}

#[test]
fn gradient_matches_finite_differences_in_every_mode() {
    let g = cube(6);
    let modes = [
        (IntensityTerm::None, Parameterization::Displacement),
        (IntensityTerm::Ncc, Parameterization::Displacement),
        (IntensityTerm::Lncc { window: 3 }, Parameterization::Displacement),
        (IntensityTerm::None, Parameterization::svf()),
        (IntensityTerm::Lncc { window: 5 }, Parameterization::Svf { steps: 4 }),
    ];
    for (m, (intensity, parameterization)) in modes.into_iter().enumerate() {
        for seed in 0..4u64 {
            let s = seed + 10 * m as u64;
            let mf = random_features(g, 4, s);
            let ff = random_features(g, 4, s + 1);
            let mi = random_volume(g, s + 2);
            let fi = random_volume(g, s + 3);
            let cfg = InstanceObjectiveConfig {
                lambda_sim: 1.0,
                lambda_reg: 0.2,
                intensity,
                parameterization,
                ..Default::default()
            };
            let p = InstanceProblem::new(&mf, &ff, Some(&mi), Some(&fi), cfg).unwrap();
            let params = random_field(g, 0.6, s + 4);
            let worst = fd_check(&p, &params, 50, s);
            assert!(worst < 1e-4, "mode {m} seed {seed}: {worst}");
        }
    }
}

fn smooth_atlas(n: usize, seed: u64) -> FeatureMap {
    let mut spec = SynthSpec::new([n, n, n], seed).unwrap();
    spec.feature_smoothness = 2.0;
    make_atlas(&spec).unwrap().features
}

#[test]
fn half_voxel_shift_is_recovered() {
    let g = cube(12);
    let moving = smooth_atlas(12, 3);
    let shift = anatreg::FnMap(|x: Point3| [x[0], x[1], x[2] + 0.5]);
    let fixed = warp_features(&moving, &shift, &g).unwrap();
    let cfg = InstanceObjectiveConfig {
        lambda_reg: 0.01,
        step_size: 0.25,
        iterations: 300,
        ..Default::default()
    };
    let p = InstanceProblem::new(&moving, &fixed, None, None, cfg).unwrap();
    let fit = optimize_instance(&p, &DisplacementField::zeros(g)).unwrap();
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..g.len() {
        let c = g.coord(i);
        if c.iter().all(|&k| (2..10).contains(&k)) {
            sum += fit.field.data[i][2];
            n += 1;
        }
    }
    let mean = sum / n as f64;
    assert!((mean - 0.5).abs() < 0.1, "mean x displacement {mean}");
    assert!(fit.history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn aligned_inputs_keep_the_initial_field() {
    let g = cube(6);
    let f = random_features(g, 4, 1);
    let p = InstanceProblem::new(&f, &f, None, None, InstanceObjectiveConfig::default()).unwrap();
    let fit = optimize_instance(&p, &DisplacementField::zeros(g)).unwrap();
    assert_eq!(fit.field.max_abs(), 0.0);
    assert_eq!(fit.history.len(), 1);
    assert!(fit.history[0].abs() < 1e-12);
}

#[test]
fn regularizer_alone_flattens_the_field() {
    let g = cube(6);
    let f = random_features(g, 4, 2);
    let cfg = InstanceObjectiveConfig {
        lambda_sim: 0.0,
        lambda_reg: 1.0,
        step_size: 0.1,
        iterations: 300,
        ..Default::default()
    };
    let p = InstanceProblem::new(&f, &f, None, None, cfg).unwrap();
    let init = random_field(g, 0.5, 3);
    let fit = optimize_instance(&p, &init).unwrap();
    assert!(fit.history.windows(2).all(|w| w[1] <= w[0]));
    let (start, end) = (reg_loss(&init), reg_loss(&fit.field));
    assert!(end < 0.05 * start, "{start} -> {end}");
    let constant = DisplacementField::constant(g, [0.3, -0.2, 0.1]);
    assert!(instance_objective(&constant, &p).unwrap().abs() < 1e-12);
}

#[test]
fn feature_loss_stays_in_range() {
    for seed in 0..10 {
        let g = cube(4);
        let a = random_features(g, 3, seed);
        let b = random_features(g, 3, seed + 100);
        let l = feature_loss(&a, &b).unwrap();
        assert!((0.0..=2.0).contains(&l));
        assert!(feature_loss(&a, &a).unwrap().abs() < 1e-15);
    }
}

#[test]
fn velocity_mode_folds_no_more_than_displacement_mode() {
    let n = 14;
    let g = cube(n);
    let moving = smooth_atlas(n, 8);
    let large = smooth_field(g, 3.0, 4);
    let fixed = warp_features(&moving, &large, &g).unwrap();
    let run = |parameterization| {
        let cfg = InstanceObjectiveConfig {
            lambda_reg: 0.05,
            parameterization,
            step_size: 0.5,
            iterations: 150,
            ..Default::default()
        };
        let p = InstanceProblem::new(&moving, &fixed, None, None, cfg).unwrap();
        let fit = optimize_instance(&p, &DisplacementField::zeros(g)).unwrap();
        folding_fraction(&jacobian_determinant(&fit.field))
    };
    let disp = run(Parameterization::Displacement);
    let svf = run(Parameterization::svf());
    assert!(svf <= disp, "svf {svf} > displacement {disp}");
}

#[test]
fn velocity_objective_accepts_velocity_fields() {
    let g = cube(5);
    let f = random_features(g, 3, 4);
    let cfg = InstanceObjectiveConfig {
        parameterization: Parameterization::svf(),
        ..Default::default()
    };
    let p = InstanceProblem::new(&f, &f, None, None, cfg).unwrap();
    let v = VelocityField::zeros(g);
    assert!(instance_objective(&v, &p).unwrap().abs() < 1e-12);
    assert!(instance_gradient(&v, &p).unwrap().max_abs() < 1e-12);
    let img = ScalarVolume::filled(g, 1.0);
    let bad = InstanceObjectiveConfig {
        intensity: IntensityTerm::Ncc,
        ..Default::default()
    };
    assert!(InstanceProblem::new(&f, &f, Some(&img), None, bad).is_err());
}
