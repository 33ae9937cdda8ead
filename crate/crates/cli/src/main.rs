//! `cgca`: data generation, training, completion, meshing, evaluation and
//! self-verification for continuous generative cellular automata.
//!
//! Exit codes: 0 success, 1 runtime error, 2 invalid configuration or
//! arguments, 3 verification failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgca::autoencoder::Autoencoder;
use cgca::config::Config;
use cgca::data::{self, Split};
use cgca::kernel::{self, TransitionKernel};
use cgca::metrics;
use cgca::net::ParamStore;
use cgca::rng::ChainRng;
use cgca::surface::{self, AbsentPolicy};
use cgca::training::{self, CloudSource, Pipeline};
use cgca::{verify, Error, SparseState};

#[derive(Parser)]
#[command(name = "cgca", version, about = "Continuous generative cellular automata")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural toy corpus into `data_dir`.
    GenData,
    /// Train the autoencoder on the training split.
    TrainAe,
    /// Train the transition kernel with a frozen autoencoder.
    TrainKernel,
    /// Complete a partial point cloud with several seeds.
    Complete {
        /// Partial scan, one `x y z` per line.
        #[arg(long)]
        input: PathBuf,
        /// Number of completions (default: `completions` key).
        #[arg(short = 'n', long)]
        count: Option<usize>,
        /// Also write every intermediate state.
        #[arg(long)]
        trace: bool,
    },
    /// Extract a mesh from a state dump.
    Mesh {
        /// State CSV written by `complete`.
        #[arg(long)]
        state: PathBuf,
        /// Output OBJ (default: `<state>.obj`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Complete the held-out partials and write the metrics report.
    Eval,
    /// Run the self-check suites.
    Verify {
        /// Restrict to these suites (repeatable).
        #[arg(long)]
        suite: Vec<String>,
    },
}

enum Failure {
    Invalid(String),
    Verification(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Invalid(m),
            other => Failure::Runtime(other),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn effective_config(g: &GlobalArgs) -> Outcome<Config> {
    let mut cfg = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::full(),
    };
    if let Ok(seed) = std::env::var("CGCA_SEED") {
        cfg.set("seed", &seed)?;
    }
    for kv in &g.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Invalid(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if g.threads == 0 {
        return Err(Failure::Invalid("--threads must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_params(path: &Path) -> Outcome<ParamStore> {
    Ok(ParamStore::load_checkpoint(path)?)
}

fn autoencoder(cfg: &Config) -> Outcome<(Autoencoder, ParamStore)> {
    let ae = Autoencoder::new(cfg.autoencoder()?)?;
    let params = load_params(&cfg.ae_checkpoint)?;
    Ok((ae, params))
}

fn transition_kernel(cfg: &Config) -> Outcome<(TransitionKernel, ParamStore)> {
    let kern = TransitionKernel::new(cfg.kernel()?)?;
    let params = load_params(&cfg.kernel_checkpoint)?;
    Ok((kern, params))
}

fn parent_dir(path: &Path) -> Outcome<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| Failure::Runtime(io_error(p, e)))?;
    }
    Ok(())
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn gen_data(cfg: &Config) -> Outcome {
    let ds = data::generate_dataset(&cfg.data()?)?;
    data::save_dataset(&ds, &cfg.data_dir)?;
    cfg.echo_into(&cfg.data_dir)?;
    println!(
        "wrote {} shapes ({} train, {} test) to {}",
        ds.records.len(),
        ds.split(Split::Train).count(),
        ds.split(Split::Test).count(),
        cfg.data_dir.display()
    );
    Ok(())
}

fn train_ae(cfg: &Config) -> Outcome {
    let ds = data::load_dataset(&cfg.data_dir)?;
    let train: Vec<_> = ds.split(Split::Train).collect();
    let test: Vec<_> = ds.split(Split::Test).collect();
    let ae = Autoencoder::new(cfg.autoencoder()?)?;
    let mut params = ParamStore::new();
    ae.init(&mut params, &mut cgca::rng::stream(cfg.seed, 0, "ae-init"))?;
    let log = training::train_autoencoder(&ae, &mut params, &train, &cfg.ae_training()?)?;
    cfg.echo_into(&cfg.out_dir)?;
    parent_dir(&cfg.ae_checkpoint)?;
    params.save_checkpoint(&cfg.ae_checkpoint)?;
    training::write_ae_log(&cfg.out_dir.join("ae_log.csv"), &log)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!("autoencoder loss {:.6} -> {:.6}", first.loss, last.loss);
    }
    if !test.is_empty() {
        let mae = training::autoencoder_mae(&ae, &params, &test, cfg.resolution, cfg.voxel_size())?;
        println!("held-out clamped-distance MAE {mae:.6}");
    }
    println!("checkpoint {}", cfg.ae_checkpoint.display());
    Ok(())
}

fn train_kernel(cfg: &Config) -> Outcome {
    let ds = data::load_dataset(&cfg.data_dir)?;
    let (ae, ae_params) = autoencoder(cfg)?;
    let pairs = ds
        .split(Split::Train)
        .map(|r| training::encode_pair(&ae, &ae_params, r, cfg.resolution, cfg.voxel_size()))
        .collect::<cgca::Result<Vec<_>>>()?;
    let kern = TransitionKernel::new(cfg.kernel()?)?;
    let mut params = ParamStore::new();
    kern.init(&mut params, &mut cgca::rng::stream(cfg.seed, 0, "kernel-init"))?;
    let log = training::train_kernel(&kern, &mut params, &pairs, &cfg.kernel_training()?)?;
    cfg.echo_into(&cfg.out_dir)?;
    parent_dir(&cfg.kernel_checkpoint)?;
    params.save_checkpoint(&cfg.kernel_checkpoint)?;
    training::write_kernel_log(&cfg.out_dir.join("kernel_log.csv"), &log)?;
    if let (Some(first), Some(last)) = (log.epochs.first(), log.epochs.last()) {
        println!("mean L_t {:.6} -> {:.6}", first.mean_lt, last.mean_lt);
    }
    let failed = log.probes.iter().filter(|p| !p.passed).count();
    if !log.probes.is_empty() {
        println!("gradient probes: {} of {} within tolerance", log.probes.len() - failed, log.probes.len());
    }
    println!("checkpoint {}", cfg.kernel_checkpoint.display());
    Ok(())
}

fn pipeline<'a>(
    cfg: &Config,
    ae: &'a Autoencoder,
    ae_params: &'a ParamStore,
    kern: &'a TransitionKernel,
    kernel_params: &'a ParamStore,
) -> Pipeline<'a> {
    Pipeline {
        ae,
        ae_params,
        kernel: kern,
        kernel_params,
        resolution: cfg.resolution,
        voxel_size: cfg.voxel_size(),
    }
}

fn complete(cfg: &Config, input: &Path, count: Option<usize>, trace: bool) -> Outcome {
    let n = count.unwrap_or(cfg.completions);
    if n == 0 {
        return Err(Failure::Invalid("-n must be at least 1".into()));
    }
    let partial = surface::read_xyz(input)?;
    let (ae, ae_params) = autoencoder(cfg)?;
    let (kern, kernel_params) = transition_kernel(cfg)?;
    let pipe = pipeline(cfg, &ae, &ae_params, &kern, &kernel_params);
    let chain = cfg.chain()?;
    let start = cfg.start();
    let out = &cfg.out_dir;
    cfg.echo_into(out)?;
    let cloud = CloudSource::Surface {
        upsample: cfg.upsample,
        tau: cfg.tau,
    };
    let mut clouds = Vec::with_capacity(n);
    if trace {
        let s0 = pipe.initial_state(&partial, start, cfg.seed, 0)?;
        for i in 0..n {
            let mut rng = ChainRng::new(cfg.seed, i as u64);
            let g = kernel::generate(&kernel_params, &kern, &s0, &chain, &mut rng, true)?;
            kernel::write_trace(&out.join(format!("trace_{i}")), &g.trace)?;
        }
    }
    let states = pipe.complete(&partial, &chain, start, cfg.seed, 0, n)?;
    for (i, s) in states.iter().enumerate() {
        s.write_csv(&out.join(format!("completion_{i}.csv")))?;
        let pts = pipe.cloud(s, cloud)?;
        surface::export_xyz(&pts, &out.join(format!("completion_{i}.xyz")))?;
        println!("completion {i}: {} cells, {} points", s.len(), pts.len());
        clouds.push(pts);
    }
    if clouds.len() >= 2 {
        println!("TMD {:.6}", metrics::tmd(&clouds)?);
    }
    Ok(())
}

fn mesh(cfg: &Config, state_path: &Path, output: Option<PathBuf>) -> Outcome {
    let state = SparseState::read_csv(state_path)?;
    let (ae, params) = autoencoder(cfg)?;
    let field = surface::dense_query(&ae, &params, &state, cfg.upsample)?;
    let m = surface::marching_cubes(&field, cfg.iso, AbsentPolicy::Outside);
    let path = output.unwrap_or_else(|| state_path.with_extension("obj"));
    parent_dir(&path)?;
    surface::export_obj(&m, &path)?;
    cfg.echo_into(path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
    println!(
        "{}: {} vertices, {} triangles",
        path.display(),
        m.vertices.len(),
        m.triangles.len()
    );
    Ok(())
}

fn eval(cfg: &Config) -> Outcome {
    let ds = data::load_dataset(&cfg.data_dir)?;
    let test: Vec<_> = ds.split(Split::Test).collect();
    let (ae, ae_params) = autoencoder(cfg)?;
    let (kern, kernel_params) = transition_kernel(cfg)?;
    let pipe = pipeline(cfg, &ae, &ae_params, &kern, &kernel_params);
    let rows = training::evaluate_checkpoint(&pipe, &test, &cfg.evaluation()?)?;
    cfg.echo_into(&cfg.out_dir)?;
    let path = cfg.out_dir.join("report.csv");
    metrics::write_report(&path, &rows)?;
    let n = rows.len().max(1) as f64;
    println!(
        "{} inputs: MMD {:.6}, mean TMD {:.6}, mean UHD {:.6}",
        rows.len(),
        rows.iter().map(|r| r.mmd_component).sum::<f64>() / n,
        rows.iter().map(|r| r.tmd).sum::<f64>() / n,
        rows.iter().map(|r| r.uhd).sum::<f64>() / n
    );
    println!("report {}", path.display());
    Ok(())
}

fn run_verify(cfg: &Config, suites: &[String]) -> Outcome {
    if let Some(bad) = suites.iter().find(|s| !verify::SUITES.contains(&s.as_str())) {
        return Err(Failure::Invalid(format!(
            "unknown suite `{bad}` (expected one of {})",
            verify::SUITES.join(", ")
        )));
    }
    let results = verify::run(cfg.seed, suites)?;
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "{} of {} checks failed",
            failed.len(),
            results.len()
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = effective_config(&cli.global).and_then(|cfg| match &cli.command {
        Command::GenData => gen_data(&cfg),
        Command::TrainAe => train_ae(&cfg),
        Command::TrainKernel => train_kernel(&cfg),
        Command::Complete { input, count, trace } => complete(&cfg, input, *count, *trace),
        Command::Mesh { state, output } => mesh(&cfg, state, output.clone()),
        Command::Eval => eval(&cfg),
        Command::Verify { suite } => run_verify(&cfg, suite),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error[config]: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("error[verify]: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(e)) => {
            let (module, invariant) = e.origin();
            eprintln!("error[{module}: {invariant}]: {e}");
            ExitCode::from(1)
        }
    }
}
