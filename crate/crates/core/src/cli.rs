//! Command-line front end. `run` returns the process exit code:
//! 0 ok, 1 usage, 2 data error, 3 solver failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::error;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipeline::{mcrc_run, rc_only_run, watershed_baseline, PipelineRun};
use crate::pointcloud::{attach_features, load_cloud, save_cloud, write_segmentation, write_text, ClassLabel, CloudFormat, PointCloud};
use crate::raster::RasterGrid;
use crate::rpca::{default_lambda, pc_score_rasters, rpca, stack_to_matrix};
use crate::spectral::nodes_csv;
use crate::synth::generate_forest;
use crate::terrain::{classify_ground, rasterize_chm, rasterize_dtm, smooth_raster};
use crate::treetops::{local_maxima_mwf, watershed_markers};
use crate::validation::{match_trees, read_truth, MAX_DZ, MAX_XY};
use crate::pointcloud::read_tree_table;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mcrc", version, about = "Tree crown delineation from LiDAR point clouds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the solver seed (and the generator seed for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Debug, Args)]
struct CloudInput {
    /// Point cloud (`.csv` text or `.bin` binary).
    #[arg(long)]
    input: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Label ground and object returns.
    Filter(CloudInput),
    /// Terrain, canopy height and smoothed canopy height rasters.
    Chm(CloudInput),
    /// Tree tops and the marker-watershed baseline.
    Detect(CloudInput),
    /// Robust PCA of a band stack and principal-component score rasters.
    Rpca {
        /// Band rasters in order; repeat the flag per band.
        #[arg(long = "band", required = true)]
        bands: Vec<PathBuf>,
    },
    /// Full segmentation: multiclass cut with priors, then recursive cuts.
    Segment {
        #[command(flatten)]
        input: CloudInput,
        /// Feature rasters attached to the points before segmentation.
        #[arg(long = "feature")]
        features: Vec<PathBuf>,
    },
    /// Recursive cut on the whole object graph, no priors.
    RcOnly {
        #[command(flatten)]
        input: CloudInput,
    },
    /// Match a tree table against field truth.
    Validate {
        /// Field truth, `x,y,height` rows.
        #[arg(long)]
        truth: PathBuf,
        /// Tree table written by `segment`, `rc-only` or `detect`.
        #[arg(long)]
        trees: PathBuf,
    },
    /// Generate a synthetic plot with truth files.
    Synth,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Filter(_) => "filter",
            Command::Chm(_) => "chm",
            Command::Detect(_) => "detect",
            Command::Rpca { .. } => "rpca",
            Command::Segment { .. } => "segment",
            Command::RcOnly { .. } => "rc-only",
            Command::Validate { .. } => "validate",
            Command::Synth => "synth",
        }
    }
}

/// What a subcommand reports back for the manifest.
#[derive(Default)]
struct Report {
    outputs: Vec<String>,
    timings: Vec<(String, f64)>,
    facts: Vec<(String, String)>,
}

impl Report {
    fn wrote(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn fact(&mut self, k: &str, v: impl ToString) {
        self.facts.push((k.to_string(), v.to_string()));
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonConvergence { .. } => EXIT_SOLVER,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (program name first), runs the command, writes the manifest.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let wall = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);

    let outcome = (|| -> Result<(Config, Report)> {
        let mut cfg = match &cli.common.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = cli.common.seed {
            cfg.pipeline.seed = s;
            cfg.synth.seed = s;
        }
        fs::create_dir_all(&cli.common.out).map_err(|e| Error::io(&cli.common.out, e))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.common.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let report = pool.install(|| dispatch(&cli.command, &cfg, &cli.common.out))?;
        Ok((cfg, report))
    })();

    let (code, status, cfg, report) = match outcome {
        Ok((cfg, report)) => (EXIT_OK, "ok".to_string(), Some(cfg), report),
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            (exit_code(&e), format!("error: {e}"), None, Report::default())
        }
    };
    let manifest = manifest_text(&cli, &argv, cfg.as_ref(), &report, &status, wall, started.elapsed().as_secs_f64());
    let path = cli.common.out.join("manifest.txt");
    if fs::create_dir_all(&cli.common.out).is_ok() {
        if let Err(e) = fs::write(&path, manifest) {
            eprintln!("error: cannot write {}: {e}", path.display());
        }
    }
    code
}

fn manifest_text(
    cli: &Cli,
    argv: &[std::ffi::OsString],
    cfg: Option<&Config>,
    report: &Report,
    status: &str,
    wall: u64,
    elapsed: f64,
) -> String {
    let mut m = String::new();
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let _ = writeln!(m, "command = {}", cli.command.name());
    let _ = writeln!(m, "argv = {}", args.join(" "));
    let _ = writeln!(m, "version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "threads = {}", rayon_threads(cli.common.threads));
    let _ = writeln!(m, "started_unix = {wall}");
    let _ = writeln!(m, "status = {status}");
    for (k, v) in &report.facts {
        let _ = writeln!(m, "result.{k} = {v}");
    }
    for o in &report.outputs {
        let _ = writeln!(m, "output = {o}");
    }
    for (k, t) in &report.timings {
        let _ = writeln!(m, "timing.{k} = {t:.6}");
    }
    let _ = writeln!(m, "timing.total = {elapsed:.6}");
    if let Some(c) = cfg {
        for line in c.to_text().lines() {
            let _ = writeln!(m, "config.{line}");
        }
    }
    m
}

fn rayon_threads(requested: usize) -> usize {
    if requested == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        requested
    }
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    load_cloud(path, CloudFormat::from_path(path))
}

fn write_string(out: &Path, name: &str, body: &str, report: &mut Report) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    report.wrote(name);
    Ok(())
}

fn write_raster(out: &Path, name: &str, grid: &RasterGrid, report: &mut Report) -> Result<()> {
    grid.write_ascii(&out.join(name))?;
    report.wrote(name);
    Ok(())
}

fn dispatch(cmd: &Command, cfg: &Config, out: &Path) -> Result<Report> {
    let mut report = Report::default();
    let p = &cfg.pipeline;
    match cmd {
        Command::Filter(input) => {
            let cloud = read_cloud(&input.input)?;
            let classified = classify_ground(&cloud, &p.terrain)?;
            let ground = classified.subset(&classified.indices_with(ClassLabel::Ground))?;
            let objects = classified.subset(&classified.indices_with(ClassLabel::Object))?;
            report.fact("ground_points", ground.len());
            report.fact("object_points", objects.len());
            save_cloud(&ground, &out.join("ground.csv"), CloudFormat::XyzCsv)?;
            report.wrote("ground.csv");
            save_cloud(&objects, &out.join("objects.csv"), CloudFormat::XyzCsv)?;
            report.wrote("objects.csv");
        }
        Command::Chm(input) => {
            let cloud = read_cloud(&input.input)?;
            let classified = classify_ground(&cloud, &p.terrain)?;
            let dtm = rasterize_dtm(&classified, p.terrain.cell_size)?;
            let chm = rasterize_chm(&classified, &dtm, p.terrain.cell_size)?;
            let smoothed = smooth_raster(&chm, p.chm_smoothing_sigma)?;
            write_raster(out, "dtm.asc", &dtm, &mut report)?;
            write_raster(out, "chm.asc", &chm, &mut report)?;
            write_raster(out, "chm_smoothed.asc", &smoothed, &mut report)?;
        }
        Command::Detect(input) => {
            let cloud = read_cloud(&input.input)?;
            let classified = classify_ground(&cloud, &p.terrain)?;
            let dtm = rasterize_dtm(&classified, p.terrain.cell_size)?;
            let chm = rasterize_chm(&classified, &dtm, p.terrain.cell_size)?;
            let smoothed = smooth_raster(&chm, p.chm_smoothing_sigma)?;
            let apexes = local_maxima_mwf(&smoothed, p.mwf_window, p.min_tree_height)?;
            report.fact("tree_tops", apexes.len());
            write_string(out, "treetops.csv", &apexes.to_csv(), &mut report)?;
            if !apexes.is_empty() {
                let regions = watershed_markers(&smoothed, &apexes, p.min_tree_height)?;
                write_raster(out, "watershed.asc", &regions.to_raster(), &mut report)?;
            }
            let trees = watershed_baseline(&cloud, p)?;
            crate::pointcloud::write_tree_table(&trees, &out.join("watershed_trees.csv"))?;
            report.wrote("watershed_trees.csv");
        }
        Command::Rpca { bands } => {
            let grids = bands.iter().map(|b| RasterGrid::read_ascii(b)).collect::<Result<Vec<_>>>()?;
            let m = stack_to_matrix(&grids)?;
            let r = &cfg.rpca;
            let lambda = r.lambda.unwrap_or_else(|| default_lambda(m.nrows(), m.ncols()));
            let t = Instant::now();
            let res = rpca(&m, lambda, r.tol, r.max_iter)?;
            report.timings.push(("rpca".into(), t.elapsed().as_secs_f64()));
            report.fact("iterations", res.iterations);
            report.fact("converged", res.converged);
            report.fact("primal_residual", res.primal_residual);
            let mut trace = String::from("iteration,objective,merit\n");
            for (k, (o, g)) in res.objective.iter().zip(&res.merit).enumerate() {
                let _ = writeln!(trace, "{},{o},{g}", k + 1);
            }
            write_string(out, "rpca_trace.csv", &trace, &mut report)?;
            let scores = pc_score_rasters(&res.low_rank, r.first_component..=r.last_component, &grids[0].geometry())?;
            for (k, g) in scores.iter().enumerate() {
                write_raster(out, &format!("pc{}.asc", r.first_component + k), g, &mut report)?;
            }
        }
        Command::Segment { input, features } => {
            let mut cloud = read_cloud(&input.input)?;
            if !features.is_empty() {
                let grids = features.iter().map(|f| RasterGrid::read_ascii(f)).collect::<Result<Vec<_>>>()?;
                cloud = attach_features(&cloud, &grids, true)?;
            }
            let run = mcrc_run(&cloud, p)?;
            write_run(out, &run, &mut report)?;
        }
        Command::RcOnly { input } => {
            let cloud = read_cloud(&input.input)?;
            let run = rc_only_run(&cloud, p)?;
            write_run(out, &run, &mut report)?;
        }
        Command::Validate { truth, trees } => {
            let truth = read_truth(truth)?;
            let trees = read_tree_table(trees)?;
            let r = match_trees(&trees, &truth, MAX_XY, MAX_DZ);
            report.fact("extracted", r.n_extracted);
            report.fact("matched", r.n_matched);
            report.fact("truth", r.n_truth);
            write_string(out, "report.csv", &r.to_csv(), &mut report)?;
        }
        Command::Synth => {
            let t = Instant::now();
            let forest = generate_forest(&cfg.synth)?;
            report.timings.push(("synth".into(), t.elapsed().as_secs_f64()));
            report.fact("points", forest.cloud.len());
            report.fact("trees", forest.trees.len());
            save_cloud(&forest.cloud, &out.join("cloud.csv"), CloudFormat::XyzCsv)?;
            report.wrote("cloud.csv");
            crate::validation::write_truth(&forest.truth(), &out.join("truth.csv"))?;
            report.wrote("truth.csv");
            forest.write_tree_truth(&out.join("tree_truth.csv"))?;
            report.wrote("tree_truth.csv");
            forest.write_point_truth(&out.join("point_truth.csv"))?;
            report.wrote("point_truth.csv");
        }
    }
    Ok(report)
}

fn write_run(out: &Path, run: &PipelineRun, report: &mut Report) -> Result<()> {
    write_segmentation(&run.segmentation, &out.join("segmentation.csv"), &out.join("trees.csv"))?;
    report.wrote("segmentation.csv");
    report.wrote("trees.csv");
    report.fact("trees", run.segmentation.trees.len());
    report.fact("first_stage_clusters", run.first_stage_clusters);
    report.fact("tree_tops", run.apexes.len());
    if let Some(d) = &run.mc_diagnostics {
        report.fact("prior_violations", d.violations.len());
        write_string(out, "mc_correlations.csv", &d.correlations_csv(), report)?;
        write_string(out, "mc_eigen.csv", &d.eigen_csv(), report)?;
    }
    let mut nodes = String::new();
    for (c, n) in &run.rc_nodes {
        for line in nodes_csv(std::slice::from_ref(n)).lines().skip(1) {
            let _ = writeln!(nodes, "{c},{line}");
        }
    }
    write_string(out, "rc_nodes.csv", &format!("cluster,path,depth,size,ncut,split\n{nodes}"), report)?;
    write_text(&out.join("treetops.csv"), |w| {
        use std::io::Write as _;
        w.write_all(run.apexes.to_csv().as_bytes())
    })?;
    report.wrote("treetops.csv");
    report.timings.extend(run.timings.iter().cloned());
    Ok(())
}
