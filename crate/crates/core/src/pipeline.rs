//! The staged registration pipeline.
//!
//! Stages run on the feature grid: matching, affine fit, coarse field,
//! instance optimization. The resulting transform is expressed on the image
//! grid, where labels and landmarks are evaluated. With a feature scale `f`
//! (image voxels per feature voxel), a feature-grid field `u` becomes
//! `X -> f u(X / f)` and the affine translation is multiplied by `f`.

use std::time::Instant;

use crate::affine::{fit_affine, fit_residual, AffineTransform};
use crate::coarse::{fixed_frame_field, optimize_coarse, CoarseDisplacementField};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::grid::{
    trilinear_sample, warp_features, warp_labels, warp_scalar, DisplacementField, FeatureMap,
    FnMap, GridShape, IdentityMap, LabelVolume, ScalarVolume, SpatialMap,
};
use crate::instance::{optimize_instance, InstanceProblem, IntensityTerm};
use crate::io::Landmarks;
use crate::matching::{filter_matches, sscc, MatchSet};
use crate::metrics::{dice, landmark_error, RegistrationReport, StageRecord};
use crate::transform::{folding_fraction, jacobian_determinant, CompositeTransform};

/// Intensities, features and optional labels of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub image: ScalarVolume,
    pub features: FeatureMap,
    pub labels: Option<LabelVolume>,
}

impl Bundle {
    fn check(&self, scale: f64) -> Result<()> {
        if let Some(l) = &self.labels {
            l.shape.check_dims(&self.image.shape, "labels vs image")?;
        }
        if scale == 1.0 {
            self.features.shape.check_dims(&self.image.shape, "features vs image")?;
        }
        Ok(())
    }
}

/// Everything a registration run produces.
#[derive(Clone, Debug)]
pub struct Registration {
    /// Fixed-to-moving map on the image grid.
    pub transform: CompositeTransform,
    pub matches: MatchSet,
    /// Affine on the feature grid.
    pub affine: AffineTransform,
    pub coarse: CoarseDisplacementField,
    pub report: RegistrationReport,
}

/// Cycle-consistent matches above the similarity threshold.
pub fn match_stage(cfg: &PipelineConfig, moving: &FeatureMap, fixed: &FeatureMap) -> Result<MatchSet> {
    let all = sscc(moving, fixed, cfg.match_step, cfg.match_iterations)?;
    Ok(filter_matches(&all, cfg.match_epsilon))
}

/// Least-squares affine and its RMS residual; identity when disabled.
pub fn affine_stage(cfg: &PipelineConfig, matches: &MatchSet) -> Result<(AffineTransform, f64)> {
    let a = if cfg.stages.affine {
        fit_affine(matches)?
    } else {
        AffineTransform::identity()
    };
    Ok((a, fit_residual(&a, matches)))
}

/// Regularized coarse field on the feature grid; zero when disabled.
pub fn coarse_stage(
    cfg: &PipelineConfig,
    matches: &MatchSet,
    affine: &AffineTransform,
    grid: &GridShape,
) -> Result<CoarseDisplacementField> {
    if !cfg.stages.coarse {
        return CoarseDisplacementField::zeros(grid, cfg.coarse_stride);
    }
    Ok(optimize_coarse(matches, affine, grid, cfg.coarse_stride, &cfg.coarse)?.field)
}

/// Dense field on the feature grid refining the affine and coarse stages;
/// zero when disabled.
pub fn instance_stage(
    cfg: &PipelineConfig,
    moving: &Bundle,
    fixed: &Bundle,
    affine: &AffineTransform,
    coarse: &CoarseDisplacementField,
) -> Result<DisplacementField> {
    let grid = fixed.features.shape;
    if !cfg.stages.instance {
        return Ok(DisplacementField::zeros(grid));
    }
    let w = fixed_frame_field(coarse, affine, &grid)?;
    let prealign = CompositeTransform::new(*affine, w, DisplacementField::zeros(grid))?;
    let moving_features = warp_features(&moving.features, &prealign, &grid)?;
    let images = if cfg.instance.intensity == IntensityTerm::None {
        None
    } else {
        let f = cfg.feature_scale;
        let to_image = FnMap(|x: [f64; 3]| {
            let y = prealign.apply(x);
            [y[0] * f, y[1] * f, y[2] * f]
        });
        let m = warp_scalar(&moving.image, &to_image, &grid)?;
        let fx = resample_image(&fixed.image, f, &grid)?;
        Some((m, fx))
    };
    let problem = InstanceProblem::new(
        &moving_features,
        &fixed.features,
        images.as_ref().map(|p| &p.0),
        images.as_ref().map(|p| &p.1),
        cfg.instance,
    )?;
    Ok(optimize_instance(&problem, &DisplacementField::zeros(grid))?.field)
}

fn resample_image(img: &ScalarVolume, scale: f64, grid: &GridShape) -> Result<ScalarVolume> {
    if scale == 1.0 && img.shape.same_dims(grid) {
        return Ok(img.clone());
    }
    warp_scalar(img, &FnMap(|x: [f64; 3]| x.map(|c| c * scale)), grid)
}

/// `X -> f u(X / f)` on `target`.
pub fn field_to_image_grid(u: &DisplacementField, scale: f64, target: &GridShape) -> Result<DisplacementField> {
    if scale == 1.0 && u.shape.same_dims(target) {
        let mut out = u.clone();
        out.shape = *target;
        return Ok(out);
    }
    let data = (0..target.len())
        .map(|i| {
            let p = target.point(i).map(|c| c / scale);
            Ok(trilinear_sample(u, p)?.map(|c| c * scale))
        })
        .collect::<Result<Vec<_>>>()?;
    DisplacementField::new(*target, data)
}

/// Transform on the image grid built from feature-grid stages.
pub fn image_transform(
    scale: f64,
    image: &GridShape,
    affine: &AffineTransform,
    coarse: &CoarseDisplacementField,
    dense: &DisplacementField,
) -> Result<CompositeTransform> {
    let grid = dense.shape;
    let w = fixed_frame_field(coarse, affine, &grid)?;
    CompositeTransform::new(
        affine.rescaled(scale),
        field_to_image_grid(&w, scale, image)?,
        field_to_image_grid(dense, scale, image)?,
    )
}

/// Landmark error and mean Dice of `map`.
fn stage_metrics<M: SpatialMap>(
    map: &M,
    moving: &Bundle,
    fixed: &Bundle,
    landmarks: Option<&Landmarks>,
) -> Result<(Option<f64>, Option<f64>)> {
    let shape = fixed.image.shape;
    let lm = landmarks
        .map(|l| landmark_error(&l.moving, &l.fixed, map, shape.spacing))
        .transpose()?;
    let dice = match (&moving.labels, &fixed.labels) {
        (Some(m), Some(f)) => Some(dice(&warp_labels(m, map, &shape)?, f)?.mean),
        _ => None,
    };
    Ok((lm, dice))
}

/// Dice, folding and landmark error of a finished transform.
pub fn evaluate(
    transform: &CompositeTransform,
    moving: &Bundle,
    fixed: &Bundle,
    landmarks: Option<&Landmarks>,
) -> Result<RegistrationReport> {
    let shape = fixed.image.shape;
    let (initial_landmark_error, initial_mean_dice) =
        stage_metrics(&ScopedIdentity(shape), moving, fixed, landmarks)?;
    let (mean_landmark_error, _) = stage_metrics(transform, moving, fixed, landmarks)?;
    let (per_label_dice, mean_dice) = match (&moving.labels, &fixed.labels) {
        (Some(m), Some(f)) => {
            let d = dice(&warp_labels(m, transform, &shape)?, f)?;
            (d.per_label, Some(d.mean))
        }
        _ => Default::default(),
    };
    Ok(RegistrationReport {
        per_label_dice,
        mean_dice,
        initial_mean_dice,
        folding_fraction: folding_fraction(&jacobian_determinant(&transform.materialize())),
        mean_landmark_error,
        initial_landmark_error,
        matches: 0,
        affine_residual: 0.0,
        stages: Vec::new(),
    })
}

/// Identity restricted to a grid, so warps accept it as a target map.
struct ScopedIdentity(GridShape);

impl SpatialMap for ScopedIdentity {
    fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        IdentityMap.apply(x)
    }

    fn domain(&self) -> Option<&GridShape> {
        Some(&self.0)
    }
}

/// Runs every enabled stage and evaluates the result.
///
/// Errors carry the name of the stage that raised them.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    moving: &Bundle,
    fixed: &Bundle,
    landmarks: Option<&Landmarks>,
) -> Result<Registration> {
    cfg.validate()?;
    moving.check(cfg.feature_scale).map_err(|e| e.in_stage("input"))?;
    fixed.check(cfg.feature_scale).map_err(|e| e.in_stage("input"))?;
    if !moving.features.shape.same_dims(&fixed.features.shape) {
        return Err(Error::ShapeMismatch("moving and fixed feature grids differ".into()).in_stage("input"));
    }
    let grid = fixed.features.shape;
    let image = fixed.image.shape;
    let scale = cfg.feature_scale;
    let mut stages = Vec::new();
    let mut record = |name: &str, start: Instant, t: &CompositeTransform| -> Result<()> {
        let seconds = start.elapsed().as_secs_f64();
        let (landmark_error, mean_dice) = stage_metrics(t, moving, fixed, landmarks)?;
        stages.push(StageRecord {
            stage: name.to_string(),
            seconds,
            landmark_error,
            mean_dice,
        });
        Ok(())
    };

    let t0 = Instant::now();
    let matches = match_stage(cfg, &moving.features, &fixed.features).map_err(|e| e.in_stage("match"))?;
    record("match", t0, &CompositeTransform::identity(image)).map_err(|e| e.in_stage("eval"))?;

    let t0 = Instant::now();
    let (affine, affine_residual) = affine_stage(cfg, &matches).map_err(|e| e.in_stage("affine"))?;
    let zero_coarse = CoarseDisplacementField::zeros(&grid, cfg.coarse_stride).map_err(|e| e.in_stage("affine"))?;
    let zero_dense = DisplacementField::zeros(grid);
    if cfg.stages.affine {
        let t = image_transform(scale, &image, &affine, &zero_coarse, &zero_dense).map_err(|e| e.in_stage("affine"))?;
        record("affine", t0, &t).map_err(|e| e.in_stage("eval"))?;
    }

    let t0 = Instant::now();
    let coarse = coarse_stage(cfg, &matches, &affine, &grid).map_err(|e| e.in_stage("coarse"))?;
    if cfg.stages.coarse {
        let t = image_transform(scale, &image, &affine, &coarse, &zero_dense).map_err(|e| e.in_stage("coarse"))?;
        record("coarse", t0, &t).map_err(|e| e.in_stage("eval"))?;
    }

    let t0 = Instant::now();
    let dense = instance_stage(cfg, moving, fixed, &affine, &coarse).map_err(|e| e.in_stage("instance"))?;
    let transform = image_transform(scale, &image, &affine, &coarse, &dense).map_err(|e| e.in_stage("instance"))?;
    if cfg.stages.instance {
        record("instance", t0, &transform).map_err(|e| e.in_stage("eval"))?;
    }

    let t0 = Instant::now();
    let mut report = evaluate(&transform, moving, fixed, landmarks).map_err(|e| e.in_stage("eval"))?;
    stages.push(StageRecord {
        stage: "eval".into(),
        seconds: t0.elapsed().as_secs_f64(),
        landmark_error: None,
        mean_dice: None,
    });
    report.matches = matches.len();
    report.affine_residual = affine_residual;
    report.stages = stages;
    Ok(Registration {
        transform,
        matches,
        affine,
        coarse,
        report,
    })
}
