use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossicl::adaptation::AdaptationMode;
use crossicl::composer::DemoOrder;
use crossicl::corpus::TaskFileSchema;
use crossicl::embedding::EmbeddingChannel;
use crossicl::pipeline::Method;
use crossicl::runner::{
    self, ChatBackend, IngestStatus, LoadedRun, RunConfig, RunError, RunOptions, Sweep,
};
use tracing_subscriber::EnvFilter;

/// Cross-task in-context learning experiments.
#[derive(Parser)]
#[command(name = "crossicl", version)]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log provider retries and other detail to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read the source and target splits into the cache.
    Ingest {
        #[command(flatten)]
        paths: PathArgs,
        /// Task files use the capitalised Super-NI field names.
        #[arg(long)]
        super_ni: bool,
    },
    /// Embed the ingested source split.
    Index {
        #[command(flatten)]
        paths: PathArgs,
        /// Comma-separated channels; default is what the criterion reads.
        #[arg(long, value_delimiter = ',')]
        channels: Vec<EmbeddingChannel>,
        #[arg(long)]
        criterion: Option<String>,
    },
    /// Run one experiment.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Validate and print the planned provider-call budget.
        #[arg(long)]
        dry_run: bool,
        /// Write every final prompt under the run directory.
        #[arg(long)]
        dump_prompts: bool,
        /// Print the first final prompt.
        #[arg(long)]
        dump_final_prompt: bool,
    },
    /// Run a grid of experiments and write a comparison CSV.
    Ablate {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// `mode`, `criterion`, `method`, `n=1,3,5` or `kth=1..5`; repeat for a grid.
        #[arg(long, required = true)]
        sweep: Vec<Sweep>,
    },
    /// Print finished runs as a per-category table.
    Report {
        /// Run directories or fingerprint prefixes.
        #[arg(required = true)]
        runs: Vec<String>,
        #[arg(long)]
        runs_dir: Option<PathBuf>,
        /// Also print the source/target category pair matrix.
        #[arg(long)]
        pairs: bool,
    },
}

#[derive(Args)]
struct PathArgs {
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    paths: PathArgs,
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    /// Ingest the corpus first.
    #[arg(long)]
    auto: bool,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    criterion: Option<String>,
    #[arg(long)]
    mode: Option<AdaptationMode>,
    /// Demonstrations per prompt.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_guides: Option<usize>,
    /// Use the k-th most similar source task.
    #[arg(long)]
    kth: Option<usize>,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    instances_per_task: Option<usize>,
    #[arg(long)]
    sample_per_category: Option<usize>,
    /// Selection seed; also seeds the per-category sample.
    #[arg(long)]
    seed: Option<u64>,
    /// `as_selected`, `reversed` or `shuffled:<seed>`.
    #[arg(long)]
    demo_order: Option<DemoOrder>,
    /// Replay a JSON-lines script instead of calling a provider.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, RunError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

impl PathArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.source {
            cfg.corpus.source_dir = p.clone();
        }
        if let Some(p) = &self.target {
            cfg.corpus.target_dir = p.clone();
        }
        if let Some(p) = &self.cache_dir {
            cfg.cache_dir = p.clone();
        }
    }
}

impl ExperimentArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.paths.apply(cfg);
        let e = &mut cfg.experiment;
        if let Some(v) = self.method {
            e.method = v;
        }
        if let Some(v) = &self.criterion {
            e.criterion = v.clone();
        }
        if let Some(v) = self.mode {
            e.mode = v;
        }
        if let Some(v) = self.n {
            e.n_demos = v;
        }
        if let Some(v) = self.n_guides {
            e.n_guides = v;
        }
        if let Some(v) = self.kth {
            e.k_th_task = v;
        }
        if let Some(v) = self.n_tasks {
            e.n_tasks = v;
        }
        if let Some(v) = self.rounds {
            e.rounds = v;
        }
        if let Some(v) = self.instances_per_task {
            e.instances_per_task = v;
        }
        if let Some(v) = self.sample_per_category {
            e.sample_per_category = Some(v);
        }
        if let Some(v) = self.seed {
            e.seed = v;
            e.sample_seed = v;
        }
        if let Some(v) = self.demo_order {
            e.demo_order = v;
        }
        if let Some(p) = &self.runs_dir {
            cfg.runs_dir = p.clone();
        }
        if let Some(p) = &self.mock_script {
            cfg.chat.backend = ChatBackend::Mock;
            cfg.chat.mock_script = Some(p.clone());
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
    }
}

fn run(cli: Cli) -> Result<(), RunError> {
    let mut cfg = load_config(cli.config.as_ref())?;
    match cli.command {
        Command::Ingest { paths, super_ni } => {
            paths.apply(&mut cfg);
            if super_ni {
                cfg.corpus.schema = TaskFileSchema::super_ni();
            }
            let s = runner::ingest(&cfg)?;
            if s.status == IngestStatus::UpToDate {
                println!("up to date ({})", &s.digest[..16]);
            } else {
                println!("wrote {} ({})", s.path.display(), &s.digest[..16]);
            }
            let cats: BTreeSet<&String> = s.source_by_category.keys().chain(s.target_by_category.keys()).collect();
            let width = cats.iter().map(|c| c.len()).max().unwrap_or(8).max(8);
            println!("{:<width$} {:>6} {:>6}", "category", "source", "target");
            for c in cats {
                println!(
                    "{c:<width$} {:>6} {:>6}",
                    s.source_by_category.get(c).unwrap_or(&0),
                    s.target_by_category.get(c).unwrap_or(&0)
                );
            }
        }
        Command::Index {
            paths,
            channels,
            criterion,
        } => {
            paths.apply(&mut cfg);
            if let Some(c) = criterion {
                cfg.experiment.criterion = c;
            }
            let channels = (!channels.is_empty()).then(|| channels.into_iter().collect());
            let s = runner::index(&cfg, channels)?;
            let names: Vec<&str> = s.channels.iter().map(|c| c.as_str()).collect();
            println!("model {} dim {} channels {}", s.model_id, s.dim, names.join(","));
            println!("{} task vectors, {} instance vectors", s.task_vectors, s.instance_vectors);
            println!(
                "cache hits {}/{} ({:.1}%), {} provider calls",
                s.cache_hits,
                s.cache_hits + s.texts_embedded,
                100.0 * s.hit_rate(),
                s.provider_calls
            );
        }
        Command::Run {
            exp,
            dry_run,
            dump_prompts,
            dump_final_prompt,
        } => {
            exp.apply(&mut cfg);
            if dry_run {
                let (fp, budget) = runner::plan(&cfg, exp.auto)?;
                println!("fingerprint {fp}");
                println!("run dir {}", runner::run_dir_for(&cfg, &fp).display());
                println!("{}", serde_json::to_string_pretty(&budget).expect("budget serializes"));
                return Ok(());
            }
            let opts = RunOptions {
                auto: exp.auto,
                dump_prompts,
            };
            let out = runner::execute(&cfg, &opts)?;
            if dump_final_prompt {
                if let Some(p) = &out.first_prompt {
                    println!("{p}\n");
                }
            }
            println!("run dir {}", out.run_dir.display());
            if out.items_reused > 0 {
                println!("resumed {} finished items", out.items_reused);
            }
            if out.report.error_count > 0 {
                println!("{} items failed and scored 0", out.report.error_count);
            }
            let loaded = LoadedRun::load(&out.run_dir.to_string_lossy(), &cfg.runs_dir)?;
            print!("{}", runner::render_table(&[loaded]));
        }
        Command::Ablate { exp, sweep } => {
            exp.apply(&mut cfg);
            let opts = RunOptions {
                auto: exp.auto,
                dump_prompts: false,
            };
            let out = runner::ablate(&cfg, &sweep, &opts)?;
            for (label, r) in &out.points {
                println!("{label:<40} {:.4}  {}", r.report.avg, r.run_dir.display());
            }
            println!("comparison {}", out.comparison_csv.display());
        }
        Command::Report { runs, runs_dir, pairs } => {
            let runs_dir = runs_dir.unwrap_or(cfg.runs_dir);
            let loaded = runs
                .iter()
                .map(|r| LoadedRun::load(r, &runs_dir))
                .collect::<Result<Vec<_>, _>>()?;
            print!("{}", runner::render_table(&loaded));
            if pairs {
                for r in &loaded {
                    println!("\n{} pairs (rows: target category, columns: source category)", r.label);
                    print!("{}", runner::pairs_csv(&r.dir)?);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let filter = if cli.verbose { "crossicl=debug" } else { "crossicl=warn" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(filter)))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
