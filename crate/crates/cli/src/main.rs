//! `equiflow` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error (including
//! unreadable inputs), 2 runtime failure.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use equiflow::alignment::{benchmark_eot, EotOptions};
use equiflow::checkpoint;
use equiflow::data::{read_xyz, read_xyz_molecules, synthetic_toy_dataset, write_xyz, Dataset, Molecule};
use equiflow::metrics::{information_curves, stability, BondTable, ClassifierConfig, STABILITY_HEADER};
use equiflow::paths::{ConditionalPath, NoiseSchedule, DEFAULT_SIGMA_MIN};
use equiflow::rng;
use equiflow::sampling::sample_batch;
use equiflow::training::{train, TrainState, TRAIN_LOG_HEADER};

use config::RunConfig;

const THREADS_ENV: &str = "EQUIFLOW_THREADS";

#[derive(Debug, Parser)]
#[command(name = "equiflow", version, about = "Equivariant flow matching for small molecules")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and train_log.csv into OUT.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate molecules from a checkpoint; writes XYZ files and NFE CSVs into OUT.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `sample.n_samples`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Stability and uniqueness of every molecule in the XYZ files of DIR.
    Eval {
        dir: PathBuf,
        /// `standard`, `toy`, or a bond-table file. Overrides `eval.bond_table`.
        #[arg(long)]
        bond_table: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalized information curves for the feature paths and the coordinate path.
    AnalyzeMi {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the EOT solver on random Gaussian cloud pairs.
    BenchEot {
        /// Comma-separated cloud sizes. Overrides `bench.sizes`.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Overrides `bench.trials`.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn usage(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> CmdResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| anyhow!("{THREADS_ENV} must be a positive integer, got {raw:?}"))
        .usage()?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().runtime()
}

fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    let text = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())).usage()?),
        None => None,
    };
    let cfg = RunConfig::load(text.as_deref(), &cli.overrides).usage()?;
    match cli.command {
        Command::Train { out } => cmd_train(&cfg, &out),
        Command::Sample { checkpoint, out, n } => cmd_sample(&cfg, &checkpoint, &out, n),
        Command::Eval { dir, bond_table, out } => cmd_eval(&cfg, &dir, bond_table.as_deref(), out.as_deref()),
        Command::AnalyzeMi { out } => cmd_analyze_mi(&cfg, out.as_deref()),
        Command::BenchEot { sizes, trials, out } => cmd_bench(&cfg, sizes, trials, out.as_deref()),
    }
}

fn load_dataset(cfg: &RunConfig) -> CmdResult<Dataset> {
    match &cfg.data.xyz {
        Some(path) => read_xyz(path).with_context(|| format!("reading dataset {}", path.display())).usage(),
        None => synthetic_toy_dataset(cfg.data.toy_molecules, cfg.seed).usage(),
    }
}

fn emit(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())).runtime(),
        None => std::io::stdout().write_all(text.as_bytes()).runtime(),
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).runtime()
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> CmdResult {
    let ds = load_dataset(cfg)?;
    let tc = cfg.train_config().usage()?;
    create_dir(out)?;
    fs::write(out.join("size_histogram.csv"), ds.size_histogram_csv()).runtime()?;
    let mut state = TrainState::new(&tc).usage()?;
    let mut log = String::from(TRAIN_LOG_HEADER);
    log.push('\n');
    let every = cfg.train.checkpoint_every;
    let result = train(&mut state, &ds, &tc, |st, row| {
        log.push_str(&row.csv());
        log.push('\n');
        if every > 0 && st.step % every == 0 {
            checkpoint::save(out.join(format!("checkpoint_step{}.bin", st.step)), &st.model, st.step)?;
        }
        Ok(())
    });
    // Keep the log of a failed run; it is the main diagnostic.
    fs::write(out.join("train_log.csv"), &log).runtime()?;
    result.with_context(|| format!("training stopped at step {}", state.step)).runtime()?;
    checkpoint::save(out.join("checkpoint.bin"), &state.model, state.step).runtime()?;
    eprintln!("trained {} steps; wrote {}", state.step, out.join("checkpoint.bin").display());
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, ckpt: &Path, out: &Path, n: Option<usize>) -> CmdResult {
    let spec = cfg.sample.integrator().usage()?;
    let model = checkpoint::load_matching(ckpt, &cfg.model_config())
        .with_context(|| format!("loading {}", ckpt.display()))
        .usage()?
        .model;
    let n = n.unwrap_or(cfg.sample.n_samples);
    let mut r = rng::seeded(cfg.seed);
    let counts = match cfg.sample.n_nodes {
        Some(k) if k > 0 => vec![k; n],
        Some(_) => return Err(Failure::Usage(anyhow!("sample.n_nodes must be positive"))),
        None => load_dataset(cfg)?.sample_node_counts(n, &mut r),
    };
    let batch = sample_batch(&model, &counts, &spec, &mut r).runtime()?;
    create_dir(out)?;
    let mut per_sample = String::from("index,n_nodes,nfe\n");
    for (i, g) in batch.samples.iter().enumerate() {
        let mol: Molecule = g.discretize().runtime()?;
        write_xyz(std::slice::from_ref(&mol), out.join(format!("sample_{i:04}.xyz"))).runtime()?;
        let _ = writeln!(per_sample, "{i},{},{}", g.n_nodes(), batch.nfe[i]);
    }
    fs::write(out.join("samples.csv"), per_sample).runtime()?;
    fs::write(out.join("nfe_histogram.csv"), batch.nfe_histogram_csv()).runtime()?;
    eprintln!("wrote {} samples, nfe_total {}", batch.samples.len(), batch.nfe_total());
    Ok(())
}

fn bond_table(name: &str) -> CmdResult<BondTable> {
    match name {
        "standard" => Ok(BondTable::standard()),
        "toy" => Ok(BondTable::toy()),
        path => BondTable::load(path).with_context(|| format!("reading bond table {path}")).usage(),
    }
}

fn cmd_eval(cfg: &RunConfig, dir: &Path, table: Option<&str>, out: Option<&Path>) -> CmdResult {
    let table = bond_table(table.unwrap_or(&cfg.eval.bond_table))?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))
        .usage()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xyz"))
        .collect();
    files.sort();
    let mut mols = Vec::new();
    for f in &files {
        mols.extend(read_xyz_molecules(f).with_context(|| format!("reading {}", f.display())).usage()?);
    }
    if mols.is_empty() {
        return Err(Failure::Usage(anyhow!("no molecules found in XYZ files under {}", dir.display())));
    }
    let report = stability(&mols, &table).runtime()?;
    emit(out, &format!("{STABILITY_HEADER}\n{}\n", report.csv_row()))
}

fn cmd_analyze_mi(cfg: &RunConfig, out: Option<&Path>) -> CmdResult {
    let mut ds = load_dataset(cfg)?;
    ds.molecules.truncate(cfg.mi.max_molecules);
    let h_paths = [
        ConditionalPath::ot(DEFAULT_SIGMA_MIN),
        ConditionalPath::vp(NoiseSchedule::LINEAR),
        ConditionalPath::vp(NoiseSchedule::COSINE),
        ConditionalPath::vp(NoiseSchedule::POLYNOMIAL),
    ]
    .into_iter()
    .collect::<Result<Vec<_>, _>>()
    .runtime()?;
    let x_path = cfg.paths.x.build().usage()?;
    let clf = ClassifierConfig {
        steps: cfg.mi.classifier_steps,
        learning_rate: cfg.mi.classifier_learning_rate,
        ..ClassifierConfig::default()
    };
    let curves = information_curves(&ds, &h_paths, &x_path, cfg.mi.n_points, cfg.mi.n_mc, &clf, cfg.seed).usage()?;
    for (name, _) in &curves.hh {
        if let Some(d) = curves.distance_to_xh(name) {
            eprintln!("L2 distance to mi_xh: {name} {d:.4}");
        }
    }
    emit(out, &curves.csv())
}

fn cmd_bench(cfg: &RunConfig, sizes: Option<Vec<usize>>, trials: Option<usize>, out: Option<&Path>) -> CmdResult {
    let sizes = sizes.unwrap_or_else(|| cfg.bench.sizes.clone());
    let trials = trials.unwrap_or(cfg.bench.trials);
    if trials < 10 {
        return Err(Failure::Usage(anyhow!("bench-eot needs at least 10 trials, got {trials}")));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Failure::Usage(anyhow!("bench-eot sizes must be a non-empty list of positive integers")));
    }
    let opts = EotOptions { restarts: cfg.bench.restarts, screening: cfg.bench.screening, ..EotOptions::default() };
    let rows = benchmark_eot(&sizes, trials, &opts, &mut rng::seeded(cfg.seed)).runtime()?;
    let mut csv = String::from("n_points,trials,mean_ms,std_ms,mean_iterations,std_iterations\n");
    for r in rows {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.4},{:.4}",
            r.n_points, r.trials, r.mean_ms, r.std_ms, r.mean_iterations, r.std_iterations
        );
    }
    emit(out, &csv)
}
