use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Serialize;

use fanbeam_core::io::{self, ReportDocument};
use fanbeam_core::phantom::{analytic_sinogram, random_phantom_suite};
use fanbeam_core::{
    calibrate as run_calibration, equispaced_angles, fbp_reconstruct, geometry_from_reduced,
    iterative_reconstruct, rasterize, BiasCorrection, CalibParams, CoordinateDescentConfig,
    EllipsePhantom, FanbeamGeometry, FbpConfig, Image, Operators, Projector, RampFilter,
    ReconConfig, Sinogram,
};

use crate::manifest::Outcome;

/// Invalid combination of command-line arguments.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn config_bytes(args: &impl std::fmt::Debug, files: &[&Path]) -> anyhow::Result<Vec<u8>> {
    let mut bytes = format!("{args:?}").into_bytes();
    for f in files {
        bytes.extend(fs::read(f).with_context(|| format!("reading {}", f.display()))?);
    }
    Ok(bytes)
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating directory {}", parent.display()))?;
    }
    Ok(())
}

fn save_image(path: &Path, image: &Image) -> anyhow::Result<()> {
    ensure_parent(path)?;
    io::save_image(path, image).with_context(|| format!("writing {}", path.display()))
}

fn save_sinogram(path: &Path, sino: &Sinogram) -> anyhow::Result<()> {
    ensure_parent(path)?;
    io::save_sinogram(path, sino).with_context(|| format!("writing {}", path.display()))
}

fn load_geometry(path: &Path) -> anyhow::Result<FanbeamGeometry> {
    io::load_geometry(path).with_context(|| format!("reading geometry {}", path.display()))
}

#[derive(Debug, Args)]
pub struct GeometryArgs {
    #[arg(long)]
    pub d_source: f64,
    #[arg(long)]
    pub n_angle: usize,
    #[arg(long)]
    pub n_detector: usize,
    #[arg(long)]
    pub image_size: usize,
    /// First view angle, radians.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub angle_start: f64,
    /// Angular span of the equispaced views, radians.
    #[arg(long, default_value_t = TAU)]
    pub angle_span: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn geometry(args: &GeometryArgs) -> anyhow::Result<Outcome> {
    let params = CalibParams {
        s_fwd: 1.0,
        d_source: args.d_source,
        angles: equispaced_angles(args.n_angle, args.angle_start, args.angle_span),
    };
    let geom = geometry_from_reduced(&params, args.n_detector, args.n_angle, args.image_size)?;
    ensure_parent(&args.out)?;
    io::write_json(&args.out, &geom)?;
    Ok(Outcome {
        outputs: vec![args.out.clone()],
        config: config_bytes(args, &[])?,
        ..Outcome::default()
    })
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Ellipse list JSON; omit to draw random phantoms from `--seed`.
    #[arg(conflicts_with = "seed")]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of seeded phantoms.
    #[arg(long, default_value_t = 1, requires = "seed")]
    pub count: usize,
    #[arg(long, default_value_t = 512)]
    pub n_pix: usize,
    /// Geometry for the sinograms; required for `--out-sino` and `--out-dir`.
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub s_fwd: f64,
    /// Use the ray-driven projector instead of exact line integrals.
    #[arg(long)]
    pub projected: bool,
    #[arg(long)]
    pub out_image: Option<PathBuf>,
    #[arg(long)]
    pub out_sino: Option<PathBuf>,
    /// Write a pairs directory (`pair_NNNN_image.npy`, `pair_NNNN_sino.npy`,
    /// `pairs.json`).
    #[arg(long, conflicts_with_all = ["out_image", "out_sino"])]
    pub out_dir: Option<PathBuf>,
}

pub fn phantom(args: &PhantomArgs) -> anyhow::Result<Outcome> {
    let mut inputs = Vec::new();
    let phantoms = match (&args.spec, args.seed) {
        (Some(path), _) => {
            inputs.push(path.clone());
            let p: EllipsePhantom = io::read_json(path)
                .with_context(|| format!("reading phantom {}", path.display()))?;
            p.validate()?;
            vec![p]
        }
        (None, Some(seed)) => {
            if args.count == 0 {
                return Err(usage("--count must be at least 1"));
            }
            random_phantom_suite(args.count, args.n_pix, seed)
        }
        (None, None) => return Err(usage("give a phantom spec file or --seed")),
    };
    let geom = match &args.geometry {
        Some(path) => {
            inputs.push(path.clone());
            let g = load_geometry(path)?;
            if g.image_size != args.n_pix {
                return Err(usage(format!(
                    "--n-pix {} does not match geometry image_size {}",
                    args.n_pix, g.image_size
                )));
            }
            Some(g)
        }
        None => None,
    };
    let sinogram = |p: &EllipsePhantom, x: &Image| -> anyhow::Result<Sinogram> {
        let g = geom
            .as_ref()
            .ok_or_else(|| usage("sinogram output requires --geometry"))?;
        Ok(if args.projected {
            Projector::default().project(x, g, args.s_fwd)?
        } else {
            analytic_sinogram(p, g, args.s_fwd)?
        })
    };

    let mut outputs = Vec::new();
    if let Some(dir) = &args.out_dir {
        let pairs = phantoms
            .iter()
            .map(|p| {
                let x = rasterize(p, args.n_pix)?;
                Ok((sinogram(p, &x)?, x))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        outputs = io::write_pairs(dir, &pairs)
            .with_context(|| format!("writing pairs to {}", dir.display()))?;
    } else {
        if phantoms.len() != 1 {
            return Err(usage("several phantoms need --out-dir"));
        }
        if args.out_image.is_none() && args.out_sino.is_none() {
            return Err(usage("nothing to write: give --out-image, --out-sino or --out-dir"));
        }
        let x = rasterize(&phantoms[0], args.n_pix)?;
        if let Some(path) = &args.out_sino {
            save_sinogram(path, &sinogram(&phantoms[0], &x)?)?;
            outputs.push(path.clone());
        }
        if let Some(path) = &args.out_image {
            save_image(path, &x)?;
            outputs.push(path.clone());
        }
    }
    let files: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    Ok(Outcome {
        config: config_bytes(args, &files)?,
        inputs,
        outputs,
        seed: args.seed,
    })
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    pub image: PathBuf,
    pub geometry: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub s_fwd: f64,
    /// Bias sinogram subtracted from the projection.
    #[arg(long)]
    pub bias: Option<PathBuf>,
    /// Sampling step along each ray, pixels.
    #[arg(long, default_value_t = fanbeam_core::projector::DEFAULT_STEP)]
    pub step: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn project(args: &ProjectArgs) -> anyhow::Result<Outcome> {
    let geom = load_geometry(&args.geometry)?;
    let image = io::load_image(&args.image)
        .with_context(|| format!("reading image {}", args.image.display()))?;
    let projector = Projector::new(args.step)?;
    let mut inputs = vec![args.image.clone(), args.geometry.clone()];
    let sino = match &args.bias {
        Some(path) => {
            inputs.push(path.clone());
            let bias = io::load_sinogram(path)
                .with_context(|| format!("reading bias {}", path.display()))?;
            projector.project_corrected(&image, &geom, args.s_fwd, &BiasCorrection::new(bias))?
        }
        None => projector.project(&image, &geom, args.s_fwd)?,
    };
    save_sinogram(&args.out, &sino)?;
    Ok(Outcome {
        config: config_bytes(args, &[&args.geometry])?,
        inputs,
        outputs: vec![args.out.clone()],
        seed: None,
    })
}

#[derive(Debug, Args)]
pub struct FbpArgs {
    pub sinogram: PathBuf,
    pub geometry: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub s_fbp: f64,
    /// `hamming_ramp` or `pure_ramp`.
    #[arg(long, default_value = "hamming_ramp")]
    pub filter: RampFilter,
    /// Zero padding per detector row before filtering; defaults to the row
    /// length.
    #[arg(long)]
    pub padding: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn fbp(args: &FbpArgs) -> anyhow::Result<Outcome> {
    let geom = load_geometry(&args.geometry)?;
    let sino = io::load_sinogram(&args.sinogram)
        .with_context(|| format!("reading sinogram {}", args.sinogram.display()))?;
    let mut cfg = FbpConfig::for_geometry(&geom).with_scale(args.s_fbp);
    cfg.filter = args.filter;
    if let Some(p) = args.padding {
        cfg.padding = p;
    }
    let image = fbp_reconstruct(&sino, &geom, &cfg)?;
    save_image(&args.out, &image)?;
    Ok(Outcome {
        config: config_bytes(args, &[&args.geometry])?,
        inputs: vec![args.sinogram.clone(), args.geometry.clone()],
        outputs: vec![args.out.clone()],
        seed: None,
    })
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    pub pairs_dir: PathBuf,
    /// Initial parameters `{s_fwd, d_source, angles}`.
    pub init: PathBuf,
    /// Coordinate-descent settings; missing keys take defaults.
    pub config: PathBuf,
    /// Receives `report.json`, `bias.npy` and `history.csv`.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn calibrate(args: &CalibrateArgs) -> anyhow::Result<Outcome> {
    let pairs = io::read_pairs(&args.pairs_dir)
        .with_context(|| format!("reading pairs from {}", args.pairs_dir.display()))?;
    let init: CalibParams = io::read_json(&args.init)
        .with_context(|| format!("reading {}", args.init.display()))?;
    let cfg: CoordinateDescentConfig = io::read_json(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let report = run_calibration(&pairs, &init, &cfg)?;

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let report_path = args.out_dir.join("report.json");
    let bias_path = args.out_dir.join("bias.npy");
    let history_path = args.out_dir.join("history.csv");
    save_sinogram(&bias_path, report.bias.as_sinogram())?;
    let doc = ReportDocument::from_report(&report, Some("bias.npy".into()))?;
    io::write_json(&report_path, &doc)?;
    let file = fs::File::create(&history_path)
        .with_context(|| format!("writing {}", history_path.display()))?;
    io::write_loss_history(std::io::BufWriter::new(file), &report.loss_history)?;

    let mut inputs = vec![args.init.clone(), args.config.clone()];
    inputs.extend(pair_inputs(&args.pairs_dir, pairs.len()));
    Ok(Outcome {
        config: config_bytes(args, &[&args.init, &args.config])?,
        inputs,
        outputs: vec![report_path, bias_path, history_path],
        seed: Some(cfg.seed),
    })
}

fn pair_inputs(dir: &Path, n: usize) -> Vec<PathBuf> {
    let manifest = dir.join(io::PAIRS_MANIFEST);
    match io::read_json::<io::PairsManifest>(&manifest) {
        Ok(m) => {
            let mut files = vec![manifest];
            for e in m.pairs {
                files.push(dir.join(e.image));
                files.push(dir.join(e.sinogram));
            }
            files
        }
        Err(_) => (0..n)
            .flat_map(|i| {
                let e = io::pair_file_names(i);
                [dir.join(e.image), dir.join(e.sinogram)]
            })
            .collect(),
    }
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    pub sinogram: PathBuf,
    /// Report written by `calibrate`.
    pub report: PathBuf,
    /// `{lambdas, enhancer, use_bias_correction}`.
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Data residual `y − F x` of the final iterate; defaults to
    /// `residual.npy` next to `--out`.
    #[arg(long)]
    pub residual: Option<PathBuf>,
}

pub fn reconstruct(args: &ReconstructArgs) -> anyhow::Result<Outcome> {
    let y = io::load_sinogram(&args.sinogram)
        .with_context(|| format!("reading sinogram {}", args.sinogram.display()))?;
    let doc: ReportDocument = io::read_json(&args.report)
        .with_context(|| format!("reading report {}", args.report.display()))?;
    let cfg: ReconConfig = io::read_json(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    cfg.validate()?;

    let mut inputs = vec![args.sinogram.clone(), args.report.clone(), args.config.clone()];
    let mut ops = Operators::new(doc.geometry.clone(), doc.params.s_fwd, doc.fbp)?;
    if cfg.use_bias_correction {
        let bias = doc
            .load_bias(&args.report)?
            .ok_or_else(|| usage("bias correction requested but the report has no bias file"))?;
        if let Some(name) = &doc.bias {
            inputs.push(args.report.parent().unwrap_or(Path::new(".")).join(name));
        }
        ops = ops.with_bias(bias)?;
    }
    let x = iterative_reconstruct(&y, &cfg, &ops)?;
    let residual = ops.residual(&x, &y)?;

    let residual_path = args.residual.clone().unwrap_or_else(|| {
        args.out
            .parent()
            .unwrap_or(Path::new(""))
            .join("residual.npy")
    });
    save_image(&args.out, &x)?;
    save_sinogram(&residual_path, &residual)?;
    Ok(Outcome {
        config: config_bytes(args, &[&args.report, &args.config])?,
        inputs,
        outputs: vec![args.out.clone(), residual_path],
        seed: None,
    })
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    pub a: PathBuf,
    pub b: PathBuf,
}

#[derive(Debug, Serialize)]
struct Metrics {
    rmse: f64,
    max_abs: f64,
}

pub fn metrics(args: &MetricsArgs) -> anyhow::Result<Outcome> {
    let load = |p: &Path| {
        io::load_image(p).with_context(|| format!("reading image {}", p.display()))
    };
    let (a, b) = (load(&args.a)?, load(&args.b)?);
    let m = Metrics {
        rmse: fanbeam_core::rmse(&a, &b)?,
        max_abs: fanbeam_core::reconstruction::max_abs_diff(&a, &b)?,
    };
    println!("{}", serde_json::to_string(&m)?);
    Ok(Outcome {
        config: config_bytes(args, &[])?,
        inputs: vec![args.a.clone(), args.b.clone()],
        ..Outcome::default()
    })
}
