use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use influence_core::change::{self, ChangeKind};
use influence_core::citation::Model;
use influence_core::corpus::{self, VocabConfig, VocabTable, Year};
use influence_core::fixture::{self, FixtureConfig};
use influence_core::hawkes::{self, FitOptions};
use influence_core::io::parse_year_range;
use influence_core::pipeline::{self, PipelineConfig, Stage, StageStatus};
use influence_core::store::MomentTable;
use influence_core::{influence, Error, Execution, Result};

/// Estimate document influence from the spread of semantic and lexical
/// innovations, and test whether it predicts future citations.
#[derive(Parser)]
#[command(name = "cascade-influence", version)]
struct Cli {
    /// Run data-parallel work on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Rerun even when the manifest says the outputs are current.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pipeline stage: tokenize the corpus and build the vocabulary.
    BuildCorpus(StageArgs),
    /// Pipeline stage with `--config`, or `moments compute`.
    Moments(Group<MomentsCmd>),
    /// Pipeline stage with `--config`, or `changes detect`.
    Changes(Group<ChangesCmd>),
    /// Pipeline stage with `--config`, or `cascades build`.
    Cascades(Group<CascadesCmd>),
    /// Pipeline stage: fit the Hawkes models over the bandwidth grid.
    Fit(StageArgs),
    /// Pipeline stage: normalize influence into regression features.
    Featurize(StageArgs),
    /// Pipeline stage: regressions, likelihood-ratio tests and online prediction.
    Evaluate(StageArgs),
    /// Run every stage, then write the report.
    All(StageArgs),
    /// Render the evaluation artifacts as tables and print a summary.
    Report {
        #[arg(long, conflicts_with = "dir", required_unless_present = "dir")]
        config: Option<PathBuf>,
        /// Output directory holding evaluation.json.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Generate the synthetic fixture corpus, store, citations and config.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Corpus tokenization and vocabulary
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Hawkes fitting on a cascades file
    #[command(subcommand)]
    Hawkes(HawkesCmd),
    /// Influence feature normalization
    #[command(subcommand)]
    Influence(InfluenceCmd),
    /// Citation regressions and online prediction
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
struct Group<C: Subcommand> {
    #[command(flatten)]
    stage: Option<StageArgs>,
    #[command(subcommand)]
    cmd: Option<C>,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Build the vocabulary TSV and document table from a corpus file.
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        years: String,
        #[arg(long, default_value_t = 30)]
        min_count: u64,
        #[arg(long, default_value_t = 0.9)]
        max_df: f64,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
        #[arg(long, default_value = "vocab.tsv")]
        out: PathBuf,
        #[arg(long, default_value = "docs.csv")]
        docs: PathBuf,
    },
}

#[derive(Subcommand)]
enum MomentsCmd {
    /// Per-word, per-year embedding moments in one pass over the store.
    Compute {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the range recorded in the vocabulary.
        #[arg(long)]
        years: Option<String>,
    },
}

#[derive(Subcommand)]
enum ChangesCmd {
    /// Rank words by semantic or lexical change and keep the top K.
    Detect {
        #[arg(long)]
        kind: ChangeKind,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary TSV (both kinds).
        #[arg(long)]
        vocab: PathBuf,
        /// Moments file (semantic).
        #[arg(long)]
        moments: Option<PathBuf>,
        /// Corpus file (lexical).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        min_count: u64,
        #[arg(long, default_value_t = 0.9)]
        max_df: f64,
        #[arg(long, default_value_t = 3)]
        min_len: usize,
    },
}

#[derive(Subcommand)]
enum CascadesCmd {
    /// Label usages of the changed words and assemble their cascades.
    Build {
        /// One or more change TSVs.
        #[arg(long, required = true, num_args = 1..)]
        changes: Vec<PathBuf>,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        docs: PathBuf,
        /// Corpus file, needed for lexical cascades.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        l2: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum HawkesCmd {
    /// Fit per-document influence for each bandwidth and pick one per kind.
    Fit {
        #[arg(long)]
        cascades: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1,1,10,100")]
        gamma_grid: Vec<f64>,
        #[arg(long, default_value_t = 0.1)]
        heldout: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        max_iter: usize,
        /// Document table; documents absent from every cascade get zero influence.
        #[arg(long)]
        docs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Bandwidth summary; defaults to bandwidth.csv next to `out`.
        #[arg(long)]
        bandwidth: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum InfluenceCmd {
    /// Year-normalized influence, quantile bins and per-bandwidth scores.
    Featurize {
        #[arg(long)]
        raw: PathBuf,
        /// Bandwidth summary; defaults to bandwidth.csv next to `raw`.
        #[arg(long)]
        bandwidth: Option<PathBuf>,
        /// Document table giving each document's year.
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalInputs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    citations: PathBuf,
    #[arg(long)]
    topics: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "M1,M2,M3,M4")]
    models: Vec<Model>,
    #[arg(long, default_value_t = 2000)]
    min_year: Year,
    /// Last year with complete citation counts.
    #[arg(long)]
    horizon: Option<Year>,
    /// Directory for the evaluation artifacts and tables.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Nested regressions M1..M4 with likelihood-ratio tests.
    Regress(EvalInputs),
    /// Year-by-year prediction of future citations.
    Online {
        #[command(flatten)]
        inputs: EvalInputs,
        #[arg(long, default_value = "2001:2014")]
        years: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::MissingUpstream { .. } => 3,
        Error::Numerical(_) | Error::Infeasible | Error::RankDeficient(_) | Error::NotNested { .. } => 4,
        _ => 1,
    }
}

fn load_config(path: &Path, exec: Execution) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path)?;
    if exec == Execution::Sequential {
        cfg.execution = exec;
    }
    Ok(cfg)
}

fn stage(args: &StageArgs, stage: Stage, exec: Execution) -> Result<()> {
    let cfg = load_config(&args.config, exec)?;
    match pipeline::run_stage(&cfg, stage, args.force)? {
        StageStatus::Ran => println!("{stage}: done"),
        StageStatus::UpToDate => println!("{stage}: up to date"),
    }
    Ok(())
}

fn group<C: Subcommand>(g: Group<C>, s: Stage, exec: Execution, module: impl FnOnce(C) -> Result<()>) -> Result<()> {
    match (g.stage, g.cmd) {
        (_, Some(cmd)) => module(cmd),
        (Some(args), None) => stage(&args, s, exec),
        (None, None) => Err(Error::InvalidArgument(format!("{s}: pass --config or a subcommand"))),
    }
}

fn years_arg(s: &str) -> Result<(Year, Year)> {
    parse_year_range(s).map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.with_file_name(name)
}

fn run(command: Command, exec: Execution) -> Result<()> {
    match command {
        Command::BuildCorpus(a) => stage(&a, Stage::BuildCorpus, exec),
        Command::Fit(a) => stage(&a, Stage::Fit, exec),
        Command::Featurize(a) => stage(&a, Stage::Featurize, exec),
        Command::Evaluate(a) => stage(&a, Stage::Evaluate, exec),
        Command::All(a) => {
            let cfg = load_config(&a.config, exec)?;
            for (s, status) in pipeline::run_all(&cfg, a.force)? {
                let word = if status == StageStatus::Ran { "done" } else { "up to date" };
                println!("{s}: {word}");
            }
            print!("{}", pipeline::report(&cfg.paths.output)?);
            Ok(())
        }
        Command::Report { config, dir } => {
            let dir = match (config, dir) {
                (Some(c), _) => PipelineConfig::load(&c)?.paths.output,
                (None, Some(d)) => d,
                (None, None) => unreachable!("clap requires one of them"),
            };
            print!("{}", pipeline::report(&dir)?);
            Ok(())
        }
        Command::Fixture { out, seed } => {
            let cfg = FixtureConfig { seed, ..FixtureConfig::default() };
            let (paths, truth) = fixture::generate(&out, &cfg)?;
            println!(
                "{} documents, {} semantic and {} lexical innovations; config at {}",
                truth.doc_ids.len(),
                truth.semantic_words.len(),
                truth.lexical_words.len(),
                paths.config.display()
            );
            Ok(())
        }
        Command::Moments(g) => group(g, Stage::Moments, exec, |MomentsCmd::Compute { store, vocab, out, years }| {
            let years = years.as_deref().map(years_arg).transpose()?;
            let table = pipeline::compute_moments(&store, &vocab, years, &out)?;
            println!("{} words with moments", table.words.len());
            Ok(())
        }),
        Command::Changes(g) => group(g, Stage::Changes, exec, |cmd| {
            let ChangesCmd::Detect { kind, k, out, vocab, moments, corpus, min_count, max_df, min_len } = cmd;
            let table = VocabTable::read(&vocab)?;
            let ranked = match kind {
                ChangeKind::Semantic => {
                    let m = moments.ok_or_else(|| Error::InvalidArgument("semantic changes need --moments".into()))?;
                    change::rank_semantic_changes(&MomentTable::read(&m)?, table.len(), k, exec)?
                }
                ChangeKind::Lexical => {
                    let c = corpus.ok_or_else(|| Error::InvalidArgument("lexical changes need --corpus".into()))?;
                    let years = table
                        .year_range
                        .ok_or_else(|| Error::InvalidArgument("vocabulary has no years line".into()))?;
                    let vcfg = VocabConfig { min_count, max_df, min_len };
                    let (ranked, words) = pipeline::lexical_changes(&c, years, &vcfg, k, exec)?;
                    if words != table.words {
                        return Err(Error::InvalidArgument(
                            "vocabulary thresholds differ from the ones used to build --vocab".into(),
                        ));
                    }
                    ranked
                }
            };
            change::write_changes(&out, &table.words, &ranked)?;
            println!("{} {kind} changes", ranked.len());
            Ok(())
        }),
        Command::Cascades(g) => group(g, Stage::Cascades, exec, |cmd| {
            let CascadesCmd::Build { changes, store, vocab, docs, corpus, l2, out } = cmd;
            let mut rows = Vec::new();
            for p in &changes {
                rows.extend(change::read_changes(p)?);
            }
            let years = VocabTable::read(&vocab)?.year_range;
            let corpus = match (&corpus, years) {
                (Some(c), Some(y)) => Some((c.as_path(), y)),
                (Some(_), None) => return Err(Error::InvalidArgument("vocabulary has no years line".into())),
                (None, _) => None,
            };
            let set = pipeline::build_cascades(&rows, &store, &vocab, &docs, corpus, l2, exec)?;
            set.write_jsonl(&out)?;
            println!("{} cascades", set.cascades.len());
            Ok(())
        }),
        Command::Corpus(CorpusCmd::Build { input, years, min_count, max_df, min_len, out, docs }) => {
            let vocab = pipeline::build_corpus(
                &input,
                years_arg(&years)?,
                &VocabConfig { min_count, max_df, min_len },
                &out,
                &docs,
            )?;
            println!("{} vocabulary words", vocab.len());
            Ok(())
        }
        Command::Hawkes(HawkesCmd::Fit { cascades, gamma_grid, heldout, seed, max_iter, docs, out, bandwidth }) => {
            let ids: Option<Vec<String>> = docs
                .map(|d| corpus::read_doc_table(&d).map(|rows| rows.into_iter().map(|r| r.doc_id).collect()))
                .transpose()?;
            let set = influence_core::cascade::CascadeSet::read_jsonl(&cascades, ids.as_deref())?;
            let opts = FitOptions { max_iter, exec, ..FitOptions::default() };
            let (raw, summary) = pipeline::fit_influence(&set, &gamma_grid, heldout, seed, &opts)?;
            hawkes::write_influence_csv(&out, &raw)?;
            hawkes::write_bandwidth_csv(&bandwidth.unwrap_or_else(|| sibling(&out, pipeline::BANDWIDTH_FILE)), &summary)?;
            for r in summary.iter().filter(|r| r.selected) {
                println!("{}: gamma = {}", r.kind, r.gamma);
            }
            Ok(())
        }
        Command::Influence(InfluenceCmd::Featurize { raw, bandwidth, meta, out }) => {
            let rows = hawkes::read_influence_csv(&raw)?;
            let bw = hawkes::read_bandwidth_csv(&bandwidth.unwrap_or_else(|| sibling(&raw, pipeline::BANDWIDTH_FILE)))?;
            let docs = corpus::read_doc_table(&meta)?;
            influence::featurize(&rows, &bw, &docs)?.write_csv(&out)?;
            println!("features for {} documents", docs.len());
            Ok(())
        }
        Command::Eval(EvalCmd::Regress(inputs)) => eval(inputs, None, exec),
        Command::Eval(EvalCmd::Online { inputs, years }) => {
            let years = years_arg(&years)?;
            eval(inputs, Some(years), exec)
        }
    }
}

fn eval(inputs: EvalInputs, online: Option<(Year, Year)>, exec: Execution) -> Result<()> {
    let mut models = inputs.models;
    models.sort();
    models.dedup();
    let (rows, _) = pipeline::load_rows(
        &inputs.features,
        &inputs.citations,
        inputs.topics.as_deref(),
        inputs.min_year,
        inputs.horizon,
    )?;
    let evaluation = pipeline::evaluate(&rows, &models, online, exec)?;
    let dir = inputs.out.unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    evaluation.write(&dir.join(pipeline::EVALUATION_FILE))?;
    print!("{}", pipeline::report(&dir)?);
    Ok(())
}
