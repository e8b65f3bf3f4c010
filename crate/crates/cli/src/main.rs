//! `trainlog`: diagnose failed distributed-training jobs from their logs.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trainlog::library::{add_pattern, FaultCategory, FaultLibrary, FaultPattern, MatchMode};
use trainlog::model::LayoutSpec;
use trainlog::pattern::TemplatePattern;
use trainlog::pipeline::{OutputFormat, Pipeline, RunConfig};
use trainlog::synth::corpus::{self, CaseSpec, CSV_HEADER};
use trainlog::synth::{generate, generate_success, load_toml, FaultInjection, WorkloadSpec};

const SEED_ENV: &str = "L4_SEED";

#[derive(Parser)]
#[command(name = "trainlog", version, about = "Log-based failure diagnosis for distributed training jobs")]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Diagnose a failed job and write a report.
    Diagnose(DiagnoseArgs),
    /// Dump a job's parsed records as JSON lines.
    Parse(ParseArgs),
    /// Generate synthetic jobs.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Manage the fault pattern library.
    #[command(subcommand)]
    Library(LibraryCommand),
    /// Score the pipeline on a corpus directory written by `synth corpus`.
    Eval(EvalArgs),
}

/// Ingestion and analysis knobs shared by every command that reads logs.
#[derive(Args, Debug, Default)]
struct AnalysisArgs {
    /// TOML file with any of the settings below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// file-per-node or dir-per-node.
    #[arg(long)]
    layout: Option<LayoutSpec>,
    /// iso, bracketed, framework, or a regex with `ts`, `level` and `msg` groups.
    #[arg(long)]
    header: Option<String>,
    /// Append header-less lines to the previous record.
    #[arg(long)]
    join_continuations: bool,
    #[arg(long)]
    drain_depth: Option<usize>,
    #[arg(long)]
    drain_threshold: Option<f64>,
    #[arg(long)]
    drain_max_children: Option<usize>,
    /// Mask file: one `<regex> <placeholder>` per line.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    presence_fraction: Option<f64>,
    #[arg(long)]
    iforest_trees: Option<usize>,
    #[arg(long)]
    iforest_subsample: Option<usize>,
    #[arg(long)]
    anomaly_threshold: Option<f64>,
    #[arg(long)]
    top_k_nodes: Option<usize>,
    /// Falls back to the config file, then $L4_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    window: Option<usize>,
    /// Stage rule file: `<STAGE> <pattern> <priority>` per line.
    #[arg(long)]
    stage_rules: Option<PathBuf>,
    /// Template pattern marking the start of an iteration (`/regex/` or substring).
    #[arg(long)]
    iter_marker: Option<String>,
}

impl AnalysisArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_toml_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { c.$field = v.clone(); })*
            };
        }
        set!(layout, header, drain_depth, drain_threshold, drain_max_children, presence_fraction, iforest_trees,
            anomaly_threshold, top_k_nodes, window);
        macro_rules! set_opt {
            ($($field:ident),*) => {
                $(if self.$field.is_some() { c.$field = self.$field.clone(); })*
            };
        }
        set_opt!(masks, iforest_subsample, stage_rules, iter_marker);
        c.join_continuations |= self.join_continuations;
        c.seed = match (self.seed, c.seed) {
            (Some(s), _) | (None, Some(s)) => Some(s),
            (None, None) => env_seed()?,
        };
        if let Some(n) = c.jobs {
            if n == 0 {
                bail!("jobs must be positive");
            }
            // fails only when --jobs already sized the pool, and the flag wins
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(c)
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not a seed"))?)),
        Err(_) => Ok(None),
    }
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Directory of the failed job.
    #[arg(long)]
    failed: Option<PathBuf>,
    /// Directories of successful runs of the same workload.
    #[arg(long, num_args = 1..)]
    history: Vec<PathBuf>,
    /// Fault library file; a missing file counts as empty.
    #[arg(long)]
    library: Option<PathBuf>,
    /// Report file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[command(flatten)]
    analysis: AnalysisArgs,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Args)]
struct ParseArgs {
    /// Job directory.
    job: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    analysis: AnalysisArgs,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Write one job; with `--fault` also its `truth.json`.
    Generate {
        /// Workload TOML (default: built-in workload).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Fault injection TOML; omit for a successful run.
        #[arg(long)]
        fault: Option<PathBuf>,
        /// Overrides the workload seed; falls back to $L4_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "job")]
        job_id: String,
    },
    /// Write the seeded evaluation corpus, one directory per case.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        /// `a..b`, or a comma-separated list.
        #[arg(long, default_value = "0..50")]
        seeds: String,
    },
}

#[derive(Subcommand)]
enum LibraryCommand {
    /// Add a pattern, given by flags or by a TOML file of `[[pattern]]` tables.
    Add {
        #[arg(long)]
        library: PathBuf,
        #[arg(long, conflicts_with_all = ["id", "name", "category", "event", "match_mode", "root_cause", "remediation"])]
        from: Option<PathBuf>,
        #[arg(long, required_unless_present = "from")]
        id: Option<String>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, required_unless_present = "from")]
        category: Option<FaultCategory>,
        /// Signature event, repeatable; `/regex/` or substring of the template.
        #[arg(long, required_unless_present = "from")]
        event: Vec<TemplatePattern>,
        #[arg(long)]
        match_mode: Option<MatchMode>,
        #[arg(long, default_value = "")]
        root_cause: String,
        #[arg(long, default_value = "")]
        remediation: String,
    },
    /// List patterns.
    List {
        #[arg(long)]
        library: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Match a job against the library and print the matches as JSON.
    Match {
        #[arg(long)]
        library: PathBuf,
        job: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding case directories.
    corpus: PathBuf,
    #[arg(long)]
    library: Option<PathBuf>,
    /// Per-case CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus metric CSV (default: stderr).
    #[arg(long)]
    summary: Option<PathBuf>,
    #[command(flatten)]
    analysis: AnalysisArgs,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let mut config = args.analysis.run_config()?;
    if args.failed.is_some() {
        config.failed = args.failed;
    }
    if !args.history.is_empty() {
        config.history = args.history;
    }
    if args.library.is_some() {
        config.library = args.library;
    }
    if args.out.is_some() {
        config.out = args.out;
    }
    match args.format {
        Some(Format::Json) => config.format = OutputFormat::Json,
        Some(Format::Text) => config.format = OutputFormat::Text,
        None => {}
    }
    if config.failed.is_none() {
        bail!("no failed job given (--failed or `failed` in the config file)");
    }
    let pipeline = Pipeline::from_config(&config)?;
    let d = pipeline.run(&config).context("diagnosis failed")?;
    let text = match config.format {
        OutputFormat::Json => d.report.to_json(),
        OutputFormat::Text => d.report.to_text(),
    };
    let mut out = output(config.out.as_deref())?;
    out.write_all(text.as_bytes())?;
    if !text.ends_with('\n') {
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn parse(args: ParseArgs) -> Result<()> {
    let pipeline = Pipeline::from_config(&args.analysis.run_config()?)?;
    let parsed = pipeline.parse(&pipeline.load(&args.job)?);
    let mut out = output(args.out.as_deref())?;
    parsed.write_json_lines(&mut out)?;
    out.flush()?;
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let r: Range<u64> = a.trim().parse()?..b.trim().parse()?;
        return Ok(r.collect());
    }
    text.split(',').map(|s| s.trim().parse().with_context(|| format!("bad seed {s:?}"))).collect()
}

fn synth(cmd: SynthCommand) -> Result<()> {
    match cmd {
        SynthCommand::Generate { spec, fault, seed, out, job_id } => {
            let mut spec: WorkloadSpec = match spec {
                Some(p) => load_toml(&p)?,
                None => WorkloadSpec::default(),
            };
            if let Some(s) = seed.map(Some).unwrap_or(env_seed()?) {
                spec.seed = s;
            }
            match fault {
                Some(p) => {
                    let injection: FaultInjection = load_toml(&p)?;
                    let (job, truth) = generate(&spec, &injection, &job_id)?;
                    job.write(&out)?;
                    truth.save(&out.join("truth.json"))?;
                }
                None => generate_success(&spec, &job_id)?.write(&out)?,
            }
        }
        SynthCommand::Corpus { out, seeds } => {
            for seed in parse_seeds(&seeds)? {
                let case = CaseSpec::for_seed(seed);
                let jobs = corpus::generate_case(&case)?;
                corpus::write_case(&jobs, &out.join(case.case_name()))?;
            }
        }
    }
    Ok(())
}

fn library(cmd: LibraryCommand) -> Result<()> {
    match cmd {
        LibraryCommand::Add { library, from: Some(path), .. } => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let incoming = FaultLibrary::from_toml(&text).map_err(anyhow::Error::msg)?;
            for p in incoming.patterns() {
                add_pattern(&library, p.clone())?;
            }
        }
        LibraryCommand::Add { library, from: None, id, name, category, event, match_mode, root_cause, remediation } => {
            let id = id.expect("clap requires --id");
            let pattern = FaultPattern {
                name: name.unwrap_or_else(|| id.clone()),
                id,
                category: category.expect("clap requires --category"),
                signature_events: event,
                match_mode: match_mode.unwrap_or_default(),
                root_cause,
                remediation,
            };
            add_pattern(&library, pattern)?;
        }
        LibraryCommand::List { library, format } => {
            let lib = FaultLibrary::load(&library)?;
            let mut out = output(None)?;
            match format {
                Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(lib.patterns())?)?,
                Format::Text => {
                    for p in lib.patterns() {
                        writeln!(out, "{}\t{}\t{}", p.id, p.category, p.name)?;
                    }
                }
            }
            out.flush()?;
        }
        LibraryCommand::Match { library, job, analysis } => {
            let lib = FaultLibrary::load(&library)?;
            let pipeline = Pipeline::from_config(&analysis.run_config()?)?;
            let parsed = pipeline.parse(&pipeline.load(&job)?);
            println!("{}", serde_json::to_string_pretty(&lib.match_bundle(&parsed))?);
        }
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let pipeline = Pipeline::from_config(&args.analysis.run_config()?)?;
    let library = args.library.as_deref().map(FaultLibrary::load_or_empty).transpose()?;
    let results = corpus::run_corpus_dir(&pipeline, &args.corpus, library.as_ref())?;
    if results.is_empty() {
        bail!("no case directories under {}", args.corpus.display());
    }
    let mut out = output(args.out.as_deref())?;
    writeln!(out, "{CSV_HEADER}")?;
    for r in &results {
        writeln!(out, "{}", r.csv_row())?;
    }
    out.flush()?;
    let summary = corpus::summarize(&results).to_csv();
    match &args.summary {
        Some(p) => fs::write(p, summary).with_context(|| format!("writing {}", p.display()))?,
        None => eprint!("{summary}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Diagnose(a) => diagnose(a),
        Command::Parse(a) => parse(a),
        Command::Synth(c) => synth(c),
        Command::Library(c) => library(c),
        Command::Eval(a) => eval(a),
    }
}

/// The error chain, skipping causes whose text the outer message already
/// carries.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if text.contains(&msg) {
            continue;
        }
        if !text.is_empty() {
            text.push_str(": ");
        }
        text.push_str(&msg);
    }
    text
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        // a closed downstream pipe (`| head`) is not a failure to run
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
