use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aftcil::checkpoint::ModelBundle;
use aftcil::dataset::{ingest, DatasetManifest};
use aftcil::engine::{run_method, Corpus, Method, RunConfig};
use aftcil::report::{
    accuracy_curve_svg, cell_dir_name, evaluate_bundle, grid_cells, ranking_csv, summary_csv, summary_table,
    write_run_dir, GridResult, StoredRun, CHECKPOINT_FILE, CONFIG_FILE,
};
use aftcil::synth::{synth_generate, SyntheticSpec};
use aftcil::{Error, Result};

/// Exemplar-free class-incremental sound classification.
#[derive(Parser)]
#[command(name = "aftcil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and cache its MFCC features.
    Ingest(Common),
    /// Write a synthetic benchmark corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Clips per class.
        #[arg(long, default_value_t = 40)]
        clips: usize,
    },
    /// Train one method over the task sequence and write a run directory.
    Train(Common),
    /// Re-evaluate a run directory's checkpoint on the dataset.
    Eval {
        /// Run directory written by `train`.
        run: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Summarise run directories as a table, CSV and SVG curve.
    Report {
        /// Run directories, or directories containing them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write summary.csv and accuracy_curve.svg.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every (alpha, beta, gamma) cell and rank them.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 1.0, 1.5, 2.0])]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 5.0, 15.0, 18.0, 20.0])]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 5.0, 15.0, 18.0, 20.0])]
        gammas: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// Flags shared by the commands that build a run configuration. Flags
/// override keys from `--config`.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    selective: Option<Switch>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(s) = self.selective {
            cfg.selective = Some(matches!(s, Switch::On));
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--dataset is required".into()))
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--out is required".into()))
    }
}

fn load_corpus(dataset: &Path, cfg: &RunConfig) -> Result<Corpus> {
    let manifest = DatasetManifest::load(dataset)?;
    let (corpus, summary) = ingest(&manifest, &cfg.frontend, &manifest.default_cache_path())?;
    log::info!("{summary}");
    Ok(corpus)
}

fn print_run(dir: &Path, method: Method, acc: f64, bwt: Option<f64>) {
    let bwt = bwt.map(|b| format!("{b:.4}")).unwrap_or_else(|| "-".into());
    println!("{method}: ACC {:.3}% BWT {bwt} -> {}", acc * 100.0, dir.display());
}

/// Expands directories holding run directories, one level deep.
fn collect_runs(paths: &[PathBuf]) -> Result<Vec<StoredRun>> {
    let mut runs = Vec::new();
    for p in paths {
        if p.join(CONFIG_FILE).is_file() {
            runs.push(StoredRun::load(p)?);
            continue;
        }
        let mut children: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.join(CONFIG_FILE).is_file())
            .collect();
        if children.is_empty() {
            return Err(Error::Data(format!("{} is not a run directory", p.display())));
        }
        children.sort();
        for c in children {
            runs.push(StoredRun::load(&c)?);
        }
    }
    Ok(runs)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Ingest(common) => {
            let cfg = common.run_config()?;
            let manifest = DatasetManifest::load(common.dataset()?)?;
            let cache = match &common.out {
                Some(p) => p.clone(),
                None => manifest.default_cache_path(),
            };
            let (_, summary) = ingest(&manifest, &cfg.frontend, &cache)?;
            println!("{summary}");
        }
        Command::Synth { out, seed, clips } => {
            let spec = SyntheticSpec::default_with(seed, clips);
            let manifest = synth_generate(&spec, &out)?;
            println!(
                "wrote {} classes x {clips} clips; manifest {}",
                spec.recipes.len(),
                manifest.display()
            );
        }
        Command::Train(common) => {
            let cfg = common.run_config()?;
            let out = common.out()?;
            let corpus = load_corpus(common.dataset()?, &cfg)?;
            let report = run_method(&cfg, &corpus)?;
            write_run_dir(&report, out)?;
            print_run(out, cfg.method, report.acc, report.bwt);
        }
        Command::Eval { run, dataset } => {
            let stored = StoredRun::load(&run)?;
            let bundle = ModelBundle::load(&run.join(CHECKPOINT_FILE))?;
            let corpus = load_corpus(&dataset, &stored.config)?;
            let row = evaluate_bundle(&bundle, &corpus, &stored.config)?;
            let acc = row.iter().sum::<f64>() / row.len() as f64;
            let recorded = stored.matrix.final_row();
            for (t, a) in row.iter().enumerate() {
                let was = recorded.and_then(|r| r.get(t)).map(|v| format!(" (recorded {v:.4})")).unwrap_or_default();
                println!("task {t}: {a:.4}{was}");
            }
            println!("ACC {:.3}%", acc * 100.0);
        }
        Command::Report { runs, out } => {
            let runs = collect_runs(&runs)?;
            for r in &runs {
                let (acc, bwt) = r.recompute()?;
                if acc != r.stored_metrics.acc || bwt != r.stored_metrics.bwt {
                    log::warn!("{}: stored metrics differ from the accuracy matrix", r.dir.display());
                }
            }
            print!("{}", summary_table(&runs)?);
            if let Some(out) = out {
                std::fs::create_dir_all(&out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
                let series: Vec<(String, Vec<Option<f64>>)> =
                    runs.iter().map(|r| (r.label(), r.matrix.average_curve())).collect();
                let write = |name: &str, text: String| {
                    let p = out.join(name);
                    std::fs::write(&p, text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
                };
                write("summary.csv", summary_csv(&runs)?)?;
                write("accuracy_curve.svg", accuracy_curve_svg(&series))?;
                println!("wrote {}", out.display());
            }
        }
        Command::Grid {
            common,
            alphas,
            betas,
            gammas,
        } => {
            let base = common.run_config()?;
            let out = common.out()?;
            let cells = grid_cells(&alphas, &betas, &gammas);
            if cells.is_empty() {
                return Err(Error::InvalidArgument("grid has no cells".into()));
            }
            let corpus = load_corpus(common.dataset()?, &base)?;
            let mut results = Vec::new();
            for (i, &(alpha, beta, gamma)) in cells.iter().enumerate() {
                let mut cfg = base.clone();
                (cfg.alpha, cfg.beta, cfg.gamma) = (alpha, beta, gamma);
                cfg.validate()?;
                let dir = out.join(cell_dir_name(alpha, beta, gamma));
                log::info!("cell {}/{}: alpha {alpha} beta {beta} gamma {gamma}", i + 1, cells.len());
                let report = run_method(&cfg, &corpus)?;
                write_run_dir(&report, &dir)?;
                print_run(&dir, cfg.method, report.acc, report.bwt);
                results.push(GridResult {
                    alpha,
                    beta,
                    gamma,
                    acc: report.acc,
                    bwt: report.bwt,
                    dir,
                });
            }
            let path = out.join("ranking.csv");
            std::fs::write(&path, ranking_csv(&results)).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
