use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use anatreg::coarse::CoarseDisplacementField;
use anatreg::io::{
    load_bundle, load_transform, read_json, resolve, save_bundle, save_transform, write_json,
    Landmarks, SynthManifest, VolData,
};
use anatreg::pipeline::{affine_stage, coarse_stage, image_transform, instance_stage, match_stage};
use anatreg::{
    evaluate, folding_fraction, jacobian_determinant, make_atlas, make_pair, random_affine,
    random_smooth_warp, run_pipeline, AffineTransform, Error, GridShape, MatchSet,
    PipelineConfig, RegistrationReport, Result, SynthSpec, DEFAULT_SVF_STEPS,
};

#[derive(Parser)]
#[command(name = "anatreg", version, about = "Feature-driven 3D image registration")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic atlas and a deformed copy with ground truth.
    Synth(SynthArgs),
    /// Cycle-consistent feature matches, written as text.
    Match {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Least-squares affine from a match file.
    Affine {
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regularized coarse displacement from matches and an affine.
    Coarse {
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        affine: PathBuf,
        /// Fixed bundle, used for the feature grid.
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dense instance optimization on top of affine and coarse stages.
    Instance {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        affine: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        /// Transform manifest to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: transform, matches and report into a directory.
    Register {
        #[command(flatten)]
        pair: PairArgs,
        /// Synthetic manifest supplying ground-truth landmarks.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a transform.
    Eval {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        transform: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Report JSON to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Jacobian determinant and folding fraction of a transform.
    Jacobian {
        #[arg(long)]
        transform: PathBuf,
        /// Determinant volume to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [24, 24, 24])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 2.0)]
    feature_smoothness: f64,
    #[arg(long, default_value_t = 2.0)]
    warp_amplitude: f64,
    #[arg(long, default_value_t = 4.0)]
    warp_smoothness: f64,
    #[arg(long, default_value_t = 4)]
    labels: u32,
    /// Largest shear, as an angle in degrees.
    #[arg(long, default_value_t = 10.0)]
    max_angle: f64,
    /// Largest translation component, in voxels.
    #[arg(long, default_value_t = 3.0)]
    max_translation: f64,
    /// Spacing of the landmark lattice, in voxels.
    #[arg(long, default_value_t = 3)]
    landmark_step: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Match { pair, out } => {
            let (m, f) = (load_bundle(&pair.moving)?, load_bundle(&pair.fixed)?);
            let matches = match_stage(&cfg, &m.features, &f.features)?;
            fs::write(&out, matches.to_text())?;
            println!("{} matches", matches.len());
            Ok(())
        }
        Command::Affine { matches, out } => {
            let matches = read_matches(&matches)?;
            let (a, residual) = affine_stage(&cfg, &matches)?;
            write_json(&out, &a)?;
            println!("rms residual {residual:.6}");
            Ok(())
        }
        Command::Coarse {
            matches,
            affine,
            fixed,
            out,
        } => {
            let matches = read_matches(&matches)?;
            let a: AffineTransform = read_json(&affine)?;
            let f = load_bundle(&fixed)?;
            let u = coarse_stage(&cfg, &matches, &a, &f.features.shape)?;
            u.write(&out)
        }
        Command::Instance {
            pair,
            affine,
            coarse,
            out,
        } => {
            let (m, f) = (load_bundle(&pair.moving)?, load_bundle(&pair.fixed)?);
            let a: AffineTransform = read_json(&affine)?;
            let u = CoarseDisplacementField::read(&coarse)?;
            let dense = instance_stage(&cfg, &m, &f, &a, &u)?;
            let t = image_transform(cfg.feature_scale, &f.image.shape, &a, &u, &dense)?;
            save_transform(&out, &t)
        }
        Command::Register { pair, manifest, out } => {
            let (m, f) = (load_bundle(&pair.moving)?, load_bundle(&pair.fixed)?);
            let landmarks = manifest.as_deref().map(read_landmarks).transpose()?;
            let reg = run_pipeline(&cfg, &m, &f, landmarks.as_ref())?;
            fs::create_dir_all(&out)?;
            save_transform(out.join("transform.json"), &reg.transform)?;
            fs::write(out.join("matches.txt"), reg.matches.to_text())?;
            reg.coarse.write(out.join("coarse.vol"))?;
            write_json(out.join("report.json"), &reg.report)?;
            print!("{}", reg.report.to_table());
            Ok(())
        }
        Command::Eval {
            pair,
            transform,
            manifest,
            out,
        } => {
            let (m, f) = (load_bundle(&pair.moving)?, load_bundle(&pair.fixed)?);
            let t = load_transform(&transform)?;
            let landmarks = manifest.as_deref().map(read_landmarks).transpose()?;
            let report: RegistrationReport = evaluate(&t, &m, &f, landmarks.as_ref())?;
            if let Some(p) = out {
                write_json(p, &report)?;
            }
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Jacobian { transform, out } => {
            let t = load_transform(&transform)?;
            let jac = jacobian_determinant(&t.materialize());
            let min = jac.values.iter().copied().fold(f64::INFINITY, f64::min);
            println!("folding fraction {:.6}", folding_fraction(&jac));
            println!("min determinant  {min:.6}");
            if let Some(p) = out {
                jac.write(p)?;
            }
            Ok(())
        }
    }
}

fn read_matches(path: &Path) -> Result<MatchSet> {
    MatchSet::from_text(&fs::read_to_string(path)?)
}

fn read_landmarks(path: &Path) -> Result<Landmarks> {
    Ok(read_json::<SynthManifest>(path)?.landmarks)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let dims: [usize; 3] = a
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| Error::Config("--dims takes three values".into()))?;
    let spec = SynthSpec {
        shape: GridShape::new(dims)?,
        channels: a.channels,
        feature_smoothness: a.feature_smoothness,
        warp_amplitude: a.warp_amplitude,
        warp_smoothness: a.warp_smoothness,
        labels: a.labels,
        seed: a.seed,
    };
    let atlas = make_atlas(&spec)?;
    let v = random_smooth_warp(&spec)?;
    let affine = random_affine(&spec.shape, spec.seed, a.max_angle, a.max_translation);
    let pair = make_pair(&atlas, &v, &affine)?;
    let (moving, fixed) = pair.truth.landmarks(a.landmark_step)?;

    let out = &a.out;
    fs::create_dir_all(out)?;
    save_bundle(out.join("moving"), &pair.moving)?;
    save_bundle(out.join("fixed"), &pair.fixed)?;
    v.write(out.join("velocity.vol"))?;
    save_transform(out.join("truth.json"), &pair.truth.registration()?)?;
    let manifest_path = out.join("manifest.json");
    let manifest = SynthManifest {
        seed: spec.seed,
        dims,
        channels: spec.channels,
        feature_smoothness: spec.feature_smoothness,
        warp_amplitude: spec.warp_amplitude,
        warp_smoothness: spec.warp_smoothness,
        labels: spec.labels,
        affine,
        svf_steps: DEFAULT_SVF_STEPS,
        velocity: "velocity.vol".into(),
        truth: "truth.json".into(),
        moving: "moving".into(),
        fixed: "fixed".into(),
        landmarks: Landmarks { moving, fixed },
    };
    write_json(&manifest_path, &manifest)?;
    println!("wrote {}", resolve(&manifest_path, &manifest.moving).display());
    println!("wrote {}", resolve(&manifest_path, &manifest.fixed).display());
    Ok(())
}
