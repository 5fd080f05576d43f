//! Feature-driven 3D image registration.
//!
//! Dense per-voxel feature maps drive a cascade of increasingly flexible
//! transforms between a moving and a fixed volume:
//!
//! 1. cycle-consistent nearest-neighbour matching of feature vectors
//!    ([`sscc`], [`filter_matches`]),
//! 2. a least-squares affine fit to the matches ([`fit_affine`]),
//! 3. a regularized displacement on a coarse lattice ([`optimize_coarse`]),
//! 4. dense instance optimization of a displacement or stationary velocity
//!    field ([`optimize_instance`]),
//!
//! composed into one fixed-to-moving map ([`CompositeTransform`]) and scored
//! with Dice, landmark error and Jacobian folding ([`evaluate`]).
//!
//! ```
//! use anatreg::{make_atlas, run_pipeline, PipelineConfig, SynthSpec};
//!
//! let spec = SynthSpec::new([10, 10, 10], 1).unwrap();
//! let atlas = make_atlas(&spec).unwrap().into_bundle();
//! let mut cfg = PipelineConfig::default();
//! cfg.instance.iterations = 5;
//! let reg = run_pipeline(&cfg, &atlas, &atlas, None).unwrap();
//! assert_eq!(reg.report.mean_dice, Some(1.0));
//! ```

pub mod affine;
pub mod coarse;
pub mod config;
pub mod error;
pub mod features;
pub mod grid;
pub mod instance;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod smoothness;
pub mod synth;
pub mod transform;

pub use affine::{apply_affine, fit_affine, fit_affine_points, fit_residual, invert_affine, AffineTransform};
pub use coarse::{
    coarse_gradient, coarse_objective, fixed_frame_field, optimize_coarse, upsample_coarse,
    CoarseDisplacementField, OptimizerConfig,
};
pub use config::{PipelineConfig, Recipe, Stages};
pub use error::{Error, Result};
pub use features::assemble_features;
pub use grid::{
    trilinear_sample, warp_features, warp_labels, warp_scalar, DisplacementField, FeatureMap,
    FnMap, GridShape, IdentityMap, LabelVolume, Point3, ScalarVolume, SpatialMap, VectorField,
    VelocityField,
};
pub use instance::{
    instance_gradient, instance_objective, optimize_instance, reg_loss, feature_loss,
    InstanceObjectiveConfig, InstanceProblem, IntensityTerm, Parameterization,
};
pub use matching::{
    filter_matches, find_points, is_cycle_consistent, select_points, similarity, sscc, Domain,
    Match, MatchSet, PointSet,
};
pub use metrics::{dice, landmark_error, lncc, ncc, DiceScores, RegistrationReport, StageRecord};
pub use pipeline::{evaluate, run_pipeline, Bundle, Registration};
pub use smoothness::gradient_energy;
pub use synth::{make_atlas, make_pair, random_affine, random_smooth_warp, Atlas, SynthSpec};
pub use transform::{
    compose, folding_fraction, integrate_svf, jacobian_determinant, CompositeTransform,
    DEFAULT_SVF_STEPS,
};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/grids.md")]
    mod grids {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/affine-coarse.md")]
    mod affine_coarse {}
    #[doc = include_str!("../../../book/src/instance.md")]
    mod instance {}
    #[doc = include_str!("../../../book/src/transforms.md")]
    mod transforms {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/files-cli.md")]
    mod files_cli {}
}
