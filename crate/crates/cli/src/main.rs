//! `lrcnet`: dataset generation, training, evaluation and benchmarking
//! from one TOML config.
//!
//! Exit codes are stable: 0 ok, 2 config error, 3 generation error,
//! 4 data mismatch, 5 training divergence.

mod config;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::RunConfig;
use lrcnet::dataset::{read_dataset, write_dataset, Dataset};
use lrcnet::domain::Domain;
use lrcnet::net::{Checkpoint, Mode};
use lrcnet::net::model::relative_l2_error;
use lrcnet::nufft::{MultiplierParams, NufftPlan};
use lrcnet::refdata::{generate_dataset, ReferencePotential, SamplerParams};
use lrcnet::train::{
    benchmark_scaling, train_one_scale, train_two_scale, write_bench_csv, write_metrics_csv,
    TrainOutcome,
};

const EXIT_CONFIG: i32 = 2;
const EXIT_GENERATE: i32 = 3;
const EXIT_DATA: i32 = 4;
const EXIT_DIVERGED: i32 = 5;

#[derive(Parser)]
#[command(name = "lrcnet", version, about = "Neural potentials with a fast long-range layer")]
struct Cli {
    /// Worker threads for parallel sections (env: LRC_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample configurations and label them with the reference potential.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file to write; a manifest is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint, metrics and manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: TrainMode,
        /// Run directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-snapshot error CSV (default: <data>.eval.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the fast convolution against the all-to-all reference.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated cloud sizes, ascending.
        #[arg(long = "N", value_name = "N1,N2,...")]
        n_list: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Output directory for bench.csv and bench.dat.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    /// Short-range descriptors only.
    Sr,
    /// Short-range plus the long-range convolution pathway.
    Full,
    /// Short-range on the small boxes, then warm-started full-range
    /// on the large boxes.
    TwoScale,
}

/// An error tagged with the exit code it should produce.
struct Failure {
    code: i32,
    error: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

trait WithCode<T> {
    fn code(self, code: i32) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: i32) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code,
            error: e.into(),
        })
    }
}

fn fail(code: i32, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

fn main() {
    let cli = Cli::parse();
    let result = init_threads(cli.threads).and_then(|_| match cli.cmd {
        Cmd::Generate { config, out } => cmd_generate(&config, &out),
        Cmd::Train { config, mode, out } => cmd_train(&config, mode, &out),
        Cmd::Eval {
            checkpoint,
            data,
            out,
        } => cmd_eval(&checkpoint, &data, out.as_deref()),
        Cmd::Bench {
            config,
            n_list,
            repeats,
            out,
        } => cmd_bench(&config, &n_list, repeats, &out),
    });
    if let Err(f) = result {
        eprintln!("error: {:#}", f.error);
        std::process::exit(f.code);
    }
}

fn init_threads(flag: Option<usize>) -> CmdResult {
    let from_env = match std::env::var("LRC_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| anyhow!("LRC_THREADS must be a positive integer, got {v:?}"))
                .code(EXIT_CONFIG)?,
        ),
        Err(_) => None,
    };
    if let Some(n) = flag.or(from_env) {
        if n == 0 {
            return Err(fail(EXIT_CONFIG, anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")
            .code(EXIT_CONFIG)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_path: String,
    /// Verbatim config text; the run is reproducible from this alone.
    config_echo: String,
    git: String,
    timestamp_unix: u64,
    outputs: Vec<String>,
}

impl Manifest {
    fn new(config_path: &Path, config_echo: &str, outputs: &[&Path]) -> Self {
        Self {
            command: std::env::args().collect::<Vec<_>>().join(" "),
            config_path: config_path.display().to_string(),
            config_echo: config_echo.to_string(),
            git: git_describe(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        }
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")
            .with_context(|| format!("cannot write manifest {}", path.display()))
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Exit code for core errors encountered while generating data.
fn generate_code(e: &lrcnet::Error) -> i32 {
    use lrcnet::Error;
    match e {
        Error::InvalidConfig(_) | Error::InvalidDomain(_) | Error::GridTooSmall { .. } => {
            EXIT_CONFIG
        }
        _ => EXIT_GENERATE,
    }
}

/// Exit code for core errors encountered while training.
fn train_code(e: &lrcnet::Error) -> i32 {
    use lrcnet::Error;
    match e {
        Error::InvalidConfig(_) | Error::InvalidDomain(_) | Error::GridTooSmall { .. } => {
            EXIT_CONFIG
        }
        Error::NonFiniteLoss(_) => EXIT_DIVERGED,
        Error::Io(_) => EXIT_GENERATE,
        _ => EXIT_DATA,
    }
}

fn load_config(path: &Path) -> Result<(RunConfig, String), Failure> {
    RunConfig::load(path).code(EXIT_CONFIG)
}

fn cmd_generate(config: &Path, out: &Path) -> CmdResult {
    let (cfg, raw) = load_config(config)?;
    let dom = cfg.domain().code(EXIT_CONFIG)?;
    let spec = cfg.kernel_spec().code(EXIT_CONFIG)?;
    let sampler = cfg.sampler().code(EXIT_CONFIG)?;

    let potential = ReferencePotential::with_spectral(&dom, &spec, cfg.spectral_overrides())
        .map_err(|e| fail(generate_code(&e), e.into()))?;
    let params = SamplerParams {
        n_particles: sampler.n_particles,
        delta_min: sampler.delta_min,
        n_sample: sampler.n_sample,
        seed: cfg.seed,
    };
    let dataset = generate_dataset(&potential, &params)
        .map_err(|e| fail(generate_code(&e), e.into()))?;
    write_dataset(out, &dataset)
        .map_err(anyhow::Error::from)
        .with_context(|| format!("cannot write dataset {}", out.display()))
        .code(EXIT_GENERATE)?;

    let manifest_path = sibling(out, ".manifest.json");
    Manifest::new(config, &raw, &[out])
        .write(&manifest_path)
        .code(EXIT_GENERATE)?;
    println!(
        "wrote {} snapshots ({}d, N={}) to {}",
        dataset.header.n_sample,
        dataset.header.d,
        dataset.header.n_particles,
        out.display()
    );
    Ok(())
}

/// The dataset must have been generated for the configured box.
fn check_matches_domain(ds: &Dataset, dom: &Domain, label: &str) -> CmdResult {
    if ds.header.d != dom.dim() {
        return Err(fail(
            EXIT_DATA,
            anyhow!(
                "{label} dataset is {}-dimensional but the config says d = {}",
                ds.header.d,
                dom.dim()
            ),
        ));
    }
    let rel = (ds.header.length - dom.length()).abs() / dom.length();
    if rel > 1e-12 {
        return Err(fail(
            EXIT_DATA,
            anyhow!(
                "{label} dataset box length {} does not match config length {}",
                ds.header.length,
                dom.length()
            ),
        ));
    }
    Ok(())
}

fn read_data(path: &Path, label: &str) -> Result<Dataset, Failure> {
    read_dataset(path)
        .map_err(anyhow::Error::from)
        .with_context(|| format!("cannot read {label} dataset {}", path.display()))
        .code(EXIT_DATA)
}

fn save_run(
    out_dir: &Path,
    name: &str,
    dom: &Domain,
    l_fft: Option<usize>,
    seed: u64,
    outcome: &TrainOutcome,
) -> Result<(PathBuf, PathBuf), Failure> {
    let ck_path = out_dir.join(format!("checkpoint{name}.json"));
    let metrics_path = out_dir.join(format!("metrics{name}.csv"));
    Checkpoint::new(dom, l_fft, seed, outcome.model.clone())
        .save(&ck_path)
        .code(EXIT_GENERATE)?;
    write_metrics_csv(&metrics_path, &outcome.metrics).code(EXIT_GENERATE)?;
    Ok((ck_path, metrics_path))
}

fn cmd_train(config: &Path, mode: TrainMode, out_dir: &Path) -> CmdResult {
    let (cfg, raw) = load_config(config)?;
    let dom = cfg.domain().code(EXIT_CONFIG)?;
    let desc = cfg.descriptor_config().code(EXIT_CONFIG)?;
    let train_cfg = cfg.train_config().code(EXIT_CONFIG)?.clone();
    let paths = cfg.paths().code(EXIT_CONFIG)?.clone();
    if mode == TrainMode::TwoScale && paths.data_large.is_none() {
        return Err(fail(
            EXIT_CONFIG,
            anyhow!("two-scale training needs paths.data_large in the config"),
        ));
    }
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create run directory {}", out_dir.display()))
        .code(EXIT_GENERATE)?;

    let data = read_data(&paths.data, "primary")?;
    check_matches_domain(&data, &dom, "primary")?;

    let mut outputs: Vec<PathBuf> = Vec::new();
    let diverged: Option<String>;
    let final_eps;

    match mode {
        TrainMode::Sr => {
            let outcome =
                train_one_scale(&data, Mode::ShortRange, &desc, None, &train_cfg, None)
                    .map_err(|e| fail(train_code(&e), e.into()))?;
            let (ck, mcsv) = save_run(out_dir, "", &dom, None, train_cfg.seed, &outcome)?;
            outputs.extend([ck, mcsv]);
            diverged = outcome.diverged.clone();
            final_eps = outcome.final_eps_rel;
            println!("eps_rel {}", outcome.final_eps_rel);
        }
        TrainMode::Full => {
            let l_fft = cfg.l_fft().code(EXIT_CONFIG)?;
            let plan = NufftPlan::new(&dom, l_fft).map_err(|e| fail(generate_code(&e), e.into()))?;
            let outcome = train_one_scale(
                &data,
                Mode::FullRange,
                &desc,
                Some(&plan),
                &train_cfg,
                None,
            )
            .map_err(|e| fail(train_code(&e), e.into()))?;
            let (ck, mcsv) = save_run(out_dir, "", &dom, Some(l_fft), train_cfg.seed, &outcome)?;
            outputs.extend([ck, mcsv]);
            diverged = outcome.diverged.clone();
            final_eps = outcome.final_eps_rel;
            println!("eps_rel {}", outcome.final_eps_rel);
        }
        TrainMode::TwoScale => {
            let large_path = paths.data_large.as_ref().unwrap();
            let large = read_data(large_path, "large-box")?;
            if large.header.d != dom.dim() {
                return Err(fail(
                    EXIT_DATA,
                    anyhow!(
                        "large-box dataset is {}-dimensional but the config says d = {}",
                        large.header.d,
                        dom.dim()
                    ),
                ));
            }
            let l_fft = cfg.l_fft().code(EXIT_CONFIG)?;
            let dom_large = large.header.domain().code(EXIT_DATA)?;
            let plan = NufftPlan::new(&dom_large, l_fft)
                .map_err(|e| fail(generate_code(&e), e.into()))?;
            let cfg_b = cfg.train_b.clone().unwrap_or_else(|| train_cfg.clone());
            let outcome = train_two_scale(&data, &large, &desc, &plan, &train_cfg, &cfg_b)
                .map_err(|e| fail(train_code(&e), e.into()))?;
            let (ck_a, mcsv_a) =
                save_run(out_dir, "_sr", &dom, None, train_cfg.seed, &outcome.phase_a)?;
            let (ck_b, mcsv_b) = save_run(
                out_dir,
                "",
                &dom_large,
                Some(l_fft),
                cfg_b.seed,
                &outcome.phase_b,
            )?;
            outputs.extend([ck_a, mcsv_a, ck_b, mcsv_b]);
            diverged = outcome
                .phase_a
                .diverged
                .clone()
                .or_else(|| outcome.phase_b.diverged.clone());
            final_eps = outcome.phase_b.final_eps_rel;
            println!("phase_a_eps_rel {}", outcome.phase_a.final_eps_rel);
            println!("eps_rel {}", outcome.phase_b.final_eps_rel);
        }
    }

    let manifest_path = out_dir.join("manifest.json");
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    Manifest::new(config, &raw, &refs)
        .write(&manifest_path)
        .code(EXIT_GENERATE)?;

    if let Some(reason) = diverged {
        return Err(fail(
            EXIT_DIVERGED,
            anyhow!("training diverged ({reason}); last good checkpoint saved, eps_rel {final_eps}"),
        ));
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> CmdResult {
    let ck = Checkpoint::load(checkpoint)
        .map_err(anyhow::Error::from)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))
        .code(EXIT_DATA)?;
    let ds = read_data(data, "evaluation")?;
    if ds.snapshots.is_empty() {
        return Err(fail(
            EXIT_DATA,
            anyhow!("dataset {} has no snapshots", data.display()),
        ));
    }
    if ck.d != ds.header.d {
        return Err(fail(
            EXIT_DATA,
            anyhow!(
                "checkpoint is {}-dimensional, dataset is {}-dimensional",
                ck.d,
                ds.header.d
            ),
        ));
    }
    if (ck.length - ds.header.length).abs() / ds.header.length > 1e-12 {
        return Err(fail(
            EXIT_DATA,
            anyhow!(
                "checkpoint box length {} does not match dataset box length {}",
                ck.length,
                ds.header.length
            ),
        ));
    }
    let dom = ck.domain().code(EXIT_DATA)?;
    let plan = match ck.l_fft {
        Some(l_fft) => Some(NufftPlan::new(&dom, l_fft).code(EXIT_DATA)?),
        None => None,
    };

    let eps = relative_l2_error(&ck.params, &dom, plan.as_ref(), &ds.snapshots).code(EXIT_DATA)?;
    let mut rows = String::from("snapshot,eps_rel\n");
    for (i, snap) in ds.snapshots.iter().enumerate() {
        let e = relative_l2_error(&ck.params, &dom, plan.as_ref(), std::slice::from_ref(snap))
            .code(EXIT_DATA)?;
        rows.push_str(&format!("{i},{e}\n"));
    }
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| sibling(data, ".eval.csv"));
    std::fs::write(&out_path, rows)
        .with_context(|| format!("cannot write {}", out_path.display()))
        .code(EXIT_GENERATE)?;
    println!("per-snapshot errors written to {}", out_path.display());
    println!("eps_rel {eps}");
    Ok(())
}

fn cmd_bench(config: &Path, n_list: &str, repeats: usize, out_dir: &Path) -> CmdResult {
    let (cfg, raw) = load_config(config)?;
    let dom = cfg.domain().code(EXIT_CONFIG)?;
    if dom.dim() != 1 {
        return Err(fail(
            EXIT_CONFIG,
            anyhow!("the benchmark comparator is one-dimensional; set domain.d = 1"),
        ));
    }
    let mut sizes = Vec::new();
    for tok in n_list.split(',') {
        let tok = tok.trim();
        let n: usize = tok
            .parse()
            .map_err(|_| anyhow!("malformed N list: {tok:?} is not a positive integer"))
            .code(EXIT_CONFIG)?;
        sizes.push(n);
    }
    let l_fft = cfg.l_fft().code(EXIT_CONFIG)?;
    let plan = NufftPlan::new(&dom, l_fft).code(EXIT_CONFIG)?;
    // Fixed unit multiplier: the timings do not depend on (beta, lambda).
    let params = MultiplierParams {
        beta: vec![1.0],
        lambda: vec![1.0],
    };
    let report = benchmark_scaling(&plan, &params, &sizes, repeats, cfg.seed)
        .map_err(|e| fail(generate_code(&e), e.into()))?;

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))
        .code(EXIT_GENERATE)?;
    let csv_path = out_dir.join("bench.csv");
    write_bench_csv(&csv_path, &report).code(EXIT_GENERATE)?;
    let dat_path = out_dir.join("bench.dat");
    let mut dat = String::from("# N t_lrc_median t_direct_median lrc_normalized direct_normalized\n");
    for r in &report.rows {
        dat.push_str(&format!(
            "{} {} {} {} {}\n",
            r.n, r.t_lrc_median, r.t_direct_median, r.lrc_normalized, r.direct_normalized
        ));
    }
    std::fs::write(&dat_path, dat)
        .with_context(|| format!("cannot write {}", dat_path.display()))
        .code(EXIT_GENERATE)?;
    Manifest::new(config, &raw, &[&csv_path, &dat_path])
        .write(&out_dir.join("manifest.json"))
        .code(EXIT_GENERATE)?;

    for r in &report.rows {
        println!(
            "N {:>8}  lrc {:.6e} s  direct {:.6e} s  ratio {:.3}",
            r.n,
            r.t_lrc_median,
            r.t_direct_median,
            r.t_direct_median / r.t_lrc_median
        );
    }
    println!("lrc_slope {}", report.lrc_slope);
    println!("direct_slope {}", report.direct_slope);
    Ok(())
}
