//! `sdfield`: the mesh -> samples -> train -> fit -> extract -> eval
//! pipeline, plus `lab`, numerical studies of the local-SDF theory.
//!
//! Exit codes: 0 success, 1 domain error (printed verbatim), 2 usage error.
//! Every run echoes its fully resolved configuration to stderr; primary
//! results go to stdout as `key = value` lines.

mod config;

use clap::{Parser, Subcommand, ValueEnum};
use sdfield::error::{Error, Result};
use sdfield::extract::{chamfer_l2, extract_mesh};
use sdfield::field::{build_grid, init_frames_from_samples, CoordinateField};
use sdfield::lab::{
    approx_error_sweep, bowl_problem, landscape_grad_hess, landscape_r, multistart_unaligned,
    verify_critical_point, LandscapePoint, PatchFamily, SampleLaw, XDist,
};
use sdfield::linalg::sym_eigen;
use sdfield::mesh::{load_mesh, save_mesh};
use sdfield::mlp::Mlp;
use sdfield::rng::child_seed;
use sdfield::sdf::{build_sample_set, SampleSet};
use sdfield::train::{
    infer_fit, load_checkpoint, save_checkpoint, train, InferConfig, InferInput, TrainShape,
};
use serde_json::json;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sdfield", version, about = "Neural SDF surfaces on sparse voxel grids")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Center a mesh and scale its longest side to 1.9, inside [-1,1]^3.
    Normalize {
        in_mesh: PathBuf,
        out_mesh: PathBuf,
    },
    /// Build per-voxel SDF sample pools for a normalized mesh.
    Sample {
        in_mesh: PathBuf,
        out_samples: PathBuf,
        /// Voxel grid resolution V (the grid spans [-1,1]^3).
        #[arg(long, default_value_t = 32)]
        grid: u32,
        /// Sample-pool size per valid voxel.
        #[arg(long = "per-voxel", default_value_t = 24)]
        per_voxel: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the shared decoder over one or more sample sets.
    Train {
        /// Sample-set files or directories containing .cfsm files.
        #[arg(required = true, num_args = 1..)]
        samples: Vec<PathBuf>,
        out_checkpoint: PathBuf,
        /// `key = value` file with optimizer and decoder settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config-file seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a new shape against a frozen decoder checkpoint.
    Fit {
        checkpoint: PathBuf,
        /// Mesh file or sample set (recognized by content).
        input: PathBuf,
        out_field: PathBuf,
        #[arg(long, default_value_t = 800)]
        iters: u64,
        #[arg(long, default_value_t = 5e-4)]
        lr: f64,
    },
    /// Extract the zero level set of a fitted field with marching cubes.
    Extract {
        checkpoint: PathBuf,
        field: PathBuf,
        out_mesh: PathBuf,
        #[arg(long, default_value_t = 128)]
        res: usize,
    },
    /// Chamfer-L2 between two meshes by surface sampling.
    Eval {
        extracted_mesh: PathBuf,
        gt_mesh: PathBuf,
        #[arg(long, default_value_t = 30_000)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Numerical studies of the local-SDF theory.
    #[command(subcommand)]
    Lab(LabCmd),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Quadratic,
    SharpEdge,
    Plane,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum XDistArg {
    Uniform,
    TwoPoint,
    Grid,
}

#[derive(clap::Args)]
struct LawArgs {
    /// Ground-truth curve coefficient.
    #[arg(long, default_value_t = 1.0)]
    k0: f64,
    /// Distribution of x.
    #[arg(long, value_enum, default_value_t = XDistArg::Uniform)]
    x_dist: XDistArg,
    /// Atoms for the grid distribution, as `value:weight,value:weight,...`.
    #[arg(long)]
    x_atoms: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    y_lo: f64,
    #[arg(long, default_value_t = 0.02)]
    y_hi: f64,
}

#[derive(Subcommand)]
enum LabCmd {
    /// Max |approximate - exact| patch SDF per radius and the log-log slope.
    Sweep {
        #[arg(long, value_enum, default_value_t = FamilyArg::Quadratic)]
        family: FamilyArg,
        /// Strictly decreasing patch radii.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.1, 0.05, 0.025])]
        radii: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
    },
    /// r, gradient, and Hessian spectrum at one landscape point.
    Landscape {
        #[command(flatten)]
        law: LawArgs,
        /// Defaults to the candidate spurious point (-k0, 0, 2c, pi).
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        tx: Option<f64>,
        #[arg(long)]
        ty: Option<f64>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Critical-point certificate at the candidate spurious point.
    Critical {
        #[command(flatten)]
        law: LawArgs,
        #[arg(long)]
        json: bool,
    },
    /// Multi-start unaligned patch fitting on the built-in bowl problem.
    Multistart {
        #[arg(long, default_value_t = 20)]
        starts: usize,
        #[arg(long, default_value_t = 40_000)]
        steps: usize,
        #[arg(long, default_value_t = 0.08)]
        lr: f64,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Normalize { in_mesh, out_mesh } => cmd_normalize(&in_mesh, &out_mesh),
        Cmd::Sample {
            in_mesh,
            out_samples,
            grid,
            per_voxel,
            seed,
        } => cmd_sample(&in_mesh, &out_samples, grid, per_voxel, seed),
        Cmd::Train {
            samples,
            out_checkpoint,
            config,
            seed,
        } => cmd_train(&samples, &out_checkpoint, config.as_deref(), seed),
        Cmd::Fit {
            checkpoint,
            input,
            out_field,
            iters,
            lr,
        } => cmd_fit(&checkpoint, &input, &out_field, iters, lr),
        Cmd::Extract {
            checkpoint,
            field,
            out_mesh,
            res,
        } => cmd_extract(&checkpoint, &field, &out_mesh, res),
        Cmd::Eval {
            extracted_mesh,
            gt_mesh,
            points,
            seed,
        } => cmd_eval(&extracted_mesh, &gt_mesh, points, seed),
        Cmd::Lab(lab) => run_lab(lab),
    }
}

fn cmd_normalize(input: &Path, output: &Path) -> Result<()> {
    eprintln!("normalize: in={} out={}", input.display(), output.display());
    let mut loaded = load_mesh(input)?;
    let sim = loaded.mesh.normalize()?;
    save_mesh(&loaded.mesh, output)?;
    println!("scale = {}", sim.scale);
    println!(
        "offset = ({}, {}, {})",
        sim.offset.x, sim.offset.y, sim.offset.z
    );
    Ok(())
}

fn cmd_sample(input: &Path, output: &Path, grid: u32, per_voxel: usize, seed: u64) -> Result<()> {
    eprintln!(
        "sample: in={} out={} grid={grid} per_voxel={per_voxel} seed={seed}",
        input.display(),
        output.display()
    );
    if per_voxel == 0 {
        return Err(Error::Config("--per-voxel must be at least 1".into()));
    }
    let mesh = load_mesh(input)?.mesh;
    let g = build_grid(&mesh, grid)?;
    let set = build_sample_set(&mesh, &g, per_voxel, seed)?;
    set.save(output)?;
    println!("valid_voxels = {}", set.n_groups());
    println!("samples = {}", set.len());
    Ok(())
}

fn collect_sample_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found = Vec::new();
            for entry in std::fs::read_dir(p)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "cfsm") {
                    found.push(path);
                }
            }
            if found.is_empty() {
                return Err(Error::Config(format!(
                    "no .cfsm sample sets in {}",
                    p.display()
                )));
            }
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn cmd_train(
    inputs: &[PathBuf],
    out: &Path,
    config_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut settings = config::TrainSettings::default();
    if let Some(path) = config_path {
        settings.apply_file(path)?;
    }
    if let Some(s) = seed {
        settings.train.seed = s;
    }
    let paths = collect_sample_files(inputs)?;
    eprintln!("train: {} sample sets, out={}", paths.len(), out.display());
    eprintln!("train: {}", settings.banner());

    let decoder_cfg = settings.decoder_config()?;
    let train_seed = settings.train.seed;
    let mut shapes = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let samples = SampleSet::load(p)?;
        let mut field = CoordinateField::new(
            samples.grid()?,
            decoder_cfg.latent_len(),
            child_seed(train_seed, 1000 + i as u64),
        );
        init_frames_from_samples(&mut field, &samples);
        shapes.push(TrainShape { samples, field });
    }
    let mlp = Mlp::init(decoder_cfg, child_seed(train_seed, 0x11a9))?;
    let cp = train(mlp, &mut shapes, &settings.train)?;
    save_checkpoint(&cp, out)?;
    if let Some(&(it, loss)) = cp.history.last() {
        println!("iterations = {it}");
        println!("final_l1 = {loss}");
    }
    println!("checkpoint = {}", out.display());
    Ok(())
}

fn cmd_fit(checkpoint: &Path, input: &Path, out_field: &Path, iters: u64, lr: f64) -> Result<()> {
    let cfg = InferConfig {
        lr,
        iterations: iters,
        ..InferConfig::default()
    };
    eprintln!(
        "fit: checkpoint={} input={} out={} iters={} lr={} seed={} grid={} \
         samples_per_voxel={} voxels_per_step={} points_per_voxel={}",
        checkpoint.display(),
        input.display(),
        out_field.display(),
        cfg.iterations,
        cfg.lr,
        cfg.seed,
        cfg.grid_v,
        cfg.samples_per_voxel,
        cfg.voxels_per_step,
        cfg.points_per_voxel
    );
    let cp = load_checkpoint(checkpoint)?;
    let mut magic = [0u8; 4];
    let n = std::fs::File::open(input)?.read(&mut magic)?;
    let result = if n == 4 && &magic == b"CFSM" {
        let set = SampleSet::load(input)?;
        infer_fit(&cp, InferInput::Samples(&set), &cfg)?
    } else {
        let mesh = load_mesh(input)?.mesh;
        infer_fit(&cp, InferInput::Mesh(&mesh), &cfg)?
    };
    result.field.save(out_field)?;
    println!("final_l1 = {}", result.final_l1);
    println!("field = {}", out_field.display());
    Ok(())
}

fn cmd_extract(checkpoint: &Path, field_path: &Path, out_mesh: &Path, res: usize) -> Result<()> {
    eprintln!(
        "extract: checkpoint={} field={} out={} res={res}",
        checkpoint.display(),
        field_path.display(),
        out_mesh.display()
    );
    if res < 8 {
        return Err(Error::Config("--res must be at least 8".into()));
    }
    let cp = load_checkpoint(checkpoint)?;
    let field = CoordinateField::load(field_path)?;
    let mesh = extract_mesh(&cp.mlp, &field, res)?;
    save_mesh(&mesh, out_mesh)?;
    println!("vertices = {}", mesh.vertices.len());
    println!("triangles = {}", mesh.triangles.len());
    Ok(())
}

fn cmd_eval(extracted: &Path, gt: &Path, points: usize, seed: u64) -> Result<()> {
    eprintln!(
        "eval: extracted={} gt={} points={points} seed={seed}",
        extracted.display(),
        gt.display()
    );
    if points == 0 {
        return Err(Error::Config("--points must be at least 1".into()));
    }
    let a = load_mesh(extracted)?.mesh;
    let b = load_mesh(gt)?.mesh;
    let t0 = std::time::Instant::now();
    let pa = a.sample_surface(points, child_seed(seed, 1))?;
    let pb = b.sample_surface(points, child_seed(seed, 2))?;
    let chamfer = chamfer_l2(&pa, &pb)?;
    println!("chamfer = {chamfer:.10}");
    println!("chamfer_x1e4 = {:.6}", chamfer * 1e4);
    println!("points = {points}");
    println!("compare_seconds = {:.3}", t0.elapsed().as_secs_f64());
    Ok(())
}

fn parse_atoms(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .map(|pair| {
            let (v, w) = pair.split_once(':').ok_or_else(|| {
                Error::Config(format!("bad atom `{pair}`, expected value:weight"))
            })?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad atom value `{v}`")))?;
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad atom weight `{w}`")))?;
            Ok((v, w))
        })
        .collect()
}

impl LawArgs {
    fn build(&self) -> Result<SampleLaw> {
        let x = match self.x_dist {
            XDistArg::Uniform => XDist::Uniform,
            XDistArg::TwoPoint => XDist::TwoPoint,
            XDistArg::Grid => {
                let atoms = self.x_atoms.as_deref().ok_or_else(|| {
                    Error::Config("--x-atoms is required with --x-dist grid".into())
                })?;
                XDist::Grid(parse_atoms(atoms)?)
            }
        };
        SampleLaw::new(x, self.y_lo, self.y_hi, self.k0)
    }

    fn banner(&self) -> String {
        let x = match self.x_dist {
            XDistArg::Uniform => "uniform".into(),
            XDistArg::TwoPoint => "two-point".into(),
            XDistArg::Grid => format!("grid({})", self.x_atoms.as_deref().unwrap_or("")),
        };
        format!(
            "k0={} x_dist={x} y_lo={} y_hi={}",
            self.k0, self.y_lo, self.y_hi
        )
    }
}

fn run_lab(cmd: LabCmd) -> Result<()> {
    match cmd {
        LabCmd::Sweep {
            family,
            radii,
            trials,
            seed,
            json,
        } => lab_sweep(family, &radii, trials, seed, json),
        LabCmd::Landscape {
            law,
            k,
            tx,
            ty,
            theta,
            json,
        } => lab_landscape(&law, k, tx, ty, theta, json),
        LabCmd::Critical { law, json } => lab_critical(&law, json),
        LabCmd::Multistart {
            starts,
            steps,
            lr,
            seed,
            json,
        } => lab_multistart(starts, steps, lr, seed, json),
    }
}

fn lab_sweep(family: FamilyArg, radii: &[f64], trials: usize, seed: u64, json: bool) -> Result<()> {
    let family = match family {
        FamilyArg::Quadratic => PatchFamily::Quadratic,
        FamilyArg::SharpEdge => PatchFamily::SharpEdge,
        FamilyArg::Plane => PatchFamily::Plane,
    };
    eprintln!("lab sweep: family={family} radii={radii:?} trials={trials} seed={seed}");
    if radii.len() < 3
        || radii.iter().any(|&r| !(r > 0.0))
        || radii.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::Config(
            "--radii needs at least 3 positive strictly decreasing values".into(),
        ));
    }
    if trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    let report = approx_error_sweep(family, radii, trials, seed);
    if json {
        let points: Vec<_> = report
            .points
            .iter()
            .map(|p| json!({"radius": p.radius, "max_error": p.max_error}))
            .collect();
        println!(
            "{}",
            json!({
                "family": family.to_string(),
                "trials": trials,
                "points": points,
                "slope": report.slope,
                "exact": report.is_exact(),
            })
        );
    } else {
        println!("{report}");
    }
    Ok(())
}

fn lab_landscape(
    law_args: &LawArgs,
    k: Option<f64>,
    tx: Option<f64>,
    ty: Option<f64>,
    theta: Option<f64>,
    json: bool,
) -> Result<()> {
    let law = law_args.build()?;
    let cand = law.candidate();
    let pt = LandscapePoint {
        k: k.unwrap_or(cand.k),
        t_x: tx.unwrap_or(cand.t_x),
        t_y: ty.unwrap_or(cand.t_y),
        theta: theta.unwrap_or(cand.theta),
    };
    eprintln!(
        "lab landscape: {} k={} tx={} ty={} theta={}",
        law_args.banner(),
        pt.k,
        pt.t_x,
        pt.t_y,
        pt.theta
    );
    let r = landscape_r(pt, &law);
    let (grad, hess) = landscape_grad_hess(pt, &law);
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let flat: Vec<f64> = hess.iter().flatten().copied().collect();
    let (eigs, _) = sym_eigen(4, &flat);
    if json {
        println!(
            "{}",
            json!({
                "point": {"k": pt.k, "t_x": pt.t_x, "t_y": pt.t_y, "theta": pt.theta},
                "r": r,
                "grad": grad.to_vec(),
                "grad_norm": grad_norm,
                "hessian": hess.iter().map(|row| row.to_vec()).collect::<Vec<_>>(),
                "hessian_eigs": eigs,
            })
        );
    } else {
        println!(
            "point = (k={}, t_x={}, t_y={}, theta={})",
            pt.k, pt.t_x, pt.t_y, pt.theta
        );
        println!("r = {r:.12e}");
        println!(
            "grad = ({:.6e}, {:.6e}, {:.6e}, {:.6e})",
            grad[0], grad[1], grad[2], grad[3]
        );
        println!("grad_norm = {grad_norm:.6e}");
        println!(
            "hessian_eigs = ({:.6e}, {:.6e}, {:.6e}, {:.6e})",
            eigs[0], eigs[1], eigs[2], eigs[3]
        );
    }
    Ok(())
}

fn lab_critical(law_args: &LawArgs, json: bool) -> Result<()> {
    let law = law_args.build()?;
    eprintln!("lab critical: {}", law_args.banner());
    let report = verify_critical_point(&law);
    if json {
        let c = report.candidate;
        println!(
            "{}",
            json!({
                "candidate": {"k": c.k, "t_x": c.t_x, "t_y": c.t_y, "theta": c.theta},
                "r": report.r_value,
                "grad": report.grad.to_vec(),
                "grad_norm": report.grad_norm,
                "is_critical": report.is_critical,
                "hessian": report.hessian.iter().map(|row| row.to_vec()).collect::<Vec<_>>(),
                "hessian_min_eig": report.hessian_min_eig,
                "margin_theta_tx": report.margin_theta_tx,
                "margin_k_ty": report.margin_k_ty,
                "degenerate": report.degenerate,
                "y_span": report.y_span,
            })
        );
    } else {
        println!("{report}");
    }
    Ok(())
}

fn lab_multistart(starts: usize, steps: usize, lr: f64, seed: u64, json: bool) -> Result<()> {
    eprintln!("lab multistart: starts={starts} steps={steps} lr={lr} seed={seed} problem=bowl");
    if starts == 0 {
        return Err(Error::Config("--starts must be at least 1".into()));
    }
    let samples = bowl_problem(80, 2, 0.02);
    let report = multistart_unaligned(&samples, starts, steps, lr, seed)?;
    if json {
        let clusters: Vec<_> = report
            .clusters
            .iter()
            .map(|c| json!({"lo": c.lo, "hi": c.hi, "count": c.count}))
            .collect();
        println!(
            "{}",
            json!({
                "starts": report.fits.len(),
                "residuals": report.fits.iter().map(|f| f.residual).collect::<Vec<_>>(),
                "clusters": clusters,
            })
        );
    } else {
        println!("{report}");
    }
    Ok(())
}
