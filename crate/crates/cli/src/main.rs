//! `uqsuite`: generate data, train models, run acceptance suites, search for
//! worst-case inputs and render reports.
//!
//! Exit codes: 0 overall pass, 1 overall fail or inconclusive, 2 execution
//! error, 3 invalid configuration or report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use uqsuite::aggregate::Verdict;
use uqsuite::datasel::{self, DataSpec, SearchConfig, SelectionContext};
use uqsuite::estimators;
use uqsuite::harness;
use uqsuite::nn::{self, Mlp, ModelSpec, TrainConfig};
use uqsuite::odd::OddSpec;
use uqsuite::report::Report;
use uqsuite::suite::Suite;
use uqsuite::synthdata::{Dataset, Generator};
use uqsuite::Error;

const EXIT_FAIL: u8 = 1;
const EXIT_EXEC: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "uqsuite", version, about = "Hierarchical acceptance testing of uncertainty estimates")]
struct Cli {
    /// Worker threads for parallel test levels; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the datasets of a generation config as JSONL files.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network (or several ensemble members) and write checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a suite and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Overrides the suite seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Skip every non-technical level once a technical test does not pass.
        #[arg(long)]
        fail_fast: bool,
        /// Also write a markdown summary.
        #[arg(long)]
        md: Option<PathBuf>,
    },
    /// Search for worst-case inputs and write them sorted by score.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Name of a `search_generated` dataset when `--config` is a suite.
        #[arg(long)]
        data: Option<String>,
    },
    /// Render a report as markdown, re-checking its verdicts.
    Render {
        #[arg(long)]
        report: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        md: Option<PathBuf>,
    },
}

/// Failure of a command, already classified by exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_config() { EXIT_CONFIG } else { EXIT_EXEC },
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

fn config_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_EXEC,
        message: format!("cannot write {}: {e}", path.display()),
    }
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| config_failure(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        config_failure(format!(
            "{}: line {} column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

fn parse_doc<T: for<'de> Deserialize<'de>>(doc: Value, path: &Path) -> Result<T, Failure> {
    serde_json::from_value(doc).map_err(|e| config_failure(format!("{}: {e}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenConfig {
    #[serde(default)]
    seed: u64,
    generators: BTreeMap<String, Generator>,
    #[serde(default)]
    odd: Option<OddSpec>,
    datasets: BTreeMap<String, DataSpec>,
}

fn cmd_gen(config: &Path, out: &Path) -> Result<u8, Failure> {
    let cfg: GenConfig = parse_doc(read_json(config)?, config)?;
    for (name, g) in &cfg.generators {
        g.validate().map_err(|e| config_failure(format!("generator '{name}': {e}")))?;
    }
    let dir = base_dir(config);
    let ctx = SelectionContext {
        generators: &cfg.generators,
        odd: cfg.odd.as_ref(),
        base_dir: &dir,
        seed: cfg.seed,
    };
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    for (name, spec) in &cfg.datasets {
        let data = datasel::select(&Dataset::default(), spec, None, &ctx)
            .map_err(|e| Failure::from(e).context(&format!("dataset '{name}'")))?;
        let path = out.join(format!("{name}.jsonl"));
        data.write_jsonl(&path)?;
        println!("{}: {} rows", path.display(), data.len());
    }
    Ok(0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    seed: u64,
    generators: BTreeMap<String, Generator>,
    data: DataSpec,
    model: ModelSpec,
    train: TrainConfig,
    /// Trains this many independently seeded members instead of one network.
    #[serde(default)]
    members: Option<usize>,
}

fn cmd_train(config: &Path, out: &Path) -> Result<u8, Failure> {
    let cfg: TrainFile = parse_doc(read_json(config)?, config)?;
    let dir = base_dir(config);
    let ctx = SelectionContext {
        generators: &cfg.generators,
        odd: None,
        base_dir: &dir,
        seed: cfg.seed,
    };
    let data = datasel::select(&Dataset::default(), &cfg.data, None, &ctx)?;
    let models: Vec<Mlp> = match cfg.members {
        Some(n) => estimators::train_members(&cfg.model, &data, &cfg.train, n)?,
        None => {
            let init = Mlp::new(&cfg.model, cfg.train.seed)?;
            let trained = nn::train(&init, &data, &cfg.train)?;
            log::info!("final training loss {:?}", trained.losses.last());
            vec![trained.model]
        }
    };
    if models.len() == 1 {
        models[0].save(out)?;
        println!("{}", out.display());
    } else {
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        for (i, m) in models.iter().enumerate() {
            let p = out.with_file_name(format!("{stem}_{i}.json"));
            m.save(&p)?;
            println!("{}", p.display());
        }
    }
    Ok(0)
}

fn cmd_run(config: &Path, report_path: &Path, seed: Option<u64>, fail_fast: bool, md: Option<&Path>) -> Result<u8, Failure> {
    let mut suite = Suite::load(config).map_err(|e| config_failure(e.to_string()))?;
    if let Some(s) = seed {
        suite.seed = s;
    }
    suite.fail_fast |= fail_fast;
    let est = suite.build_estimator()?;
    let results = harness::run_suite(&suite, &est)?;
    let report = Report::build(&suite, est.name(), results)?;
    write_file(report_path, &report.to_json())?;
    if let Some(md) = md {
        write_file(md, &report.to_markdown())?;
    }
    for c in &report.criteria {
        println!("{:<40} {}", c.id, c.verdict);
    }
    println!("overall: {}", report.overall);
    Ok(match report.overall {
        Verdict::Pass => 0,
        Verdict::Fail | Verdict::Inconclusive => EXIT_FAIL,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchFile {
    #[serde(default)]
    generators: BTreeMap<String, Generator>,
    #[serde(default)]
    odd: Option<OddSpec>,
    search: SearchConfig,
}

fn write_hits(out: &Path, hits: &[datasel::SearchHit]) -> Result<(), Failure> {
    let doc = json!({ "hits": hits });
    write_file(out, &(serde_json::to_string_pretty(&doc).expect("serialisable") + "\n"))?;
    if let Some(top) = hits.first() {
        println!("worst input {:?} score {}", top.x, top.score);
    }
    Ok(())
}

fn cmd_search(config: &Path, out: &Path, data: Option<&str>) -> Result<u8, Failure> {
    let doc = read_json(config)?;
    if doc.get("suite_id").is_some() {
        let name = data.ok_or_else(|| config_failure("--data is required when --config is a suite"))?;
        let suite = Suite::load(config).map_err(|e| config_failure(e.to_string()))?;
        let cfg = match suite.data.get(name) {
            Some(DataSpec::SearchGenerated { search }) => search.clone(),
            Some(_) => return Err(config_failure(format!("dataset '{name}' is not search_generated"))),
            None => return Err(config_failure(format!("unknown dataset '{name}'"))),
        };
        let est = suite.build_estimator()?;
        let hits = datasel::run_search(Some(&est), &cfg, &suite.selection_context(suite.seed))?;
        write_hits(out, &hits)?;
        return Ok(0);
    }
    let cfg: SearchFile = parse_doc(doc, config)?;
    cfg.search.validate().map_err(|e| config_failure(e.to_string()))?;
    let dir = base_dir(config);
    let ctx = SelectionContext {
        generators: &cfg.generators,
        odd: cfg.odd.as_ref(),
        base_dir: &dir,
        seed: cfg.search.seed,
    };
    let hits = datasel::run_search(None, &cfg.search, &ctx)?;
    write_hits(out, &hits)?;
    Ok(0)
}

fn cmd_render(report: &Path, md: Option<&Path>) -> Result<u8, Failure> {
    let text = std::fs::read_to_string(report).map_err(|e| config_failure(format!("{}: {e}", report.display())))?;
    let r = Report::from_json(&text).map_err(|e| config_failure(e.to_string()))?;
    for w in r.check_integrity() {
        eprintln!("integrity warning: {w}");
    }
    let rendered = r.to_markdown();
    match md {
        Some(p) => write_file(p, &rendered)?,
        None => print!("{rendered}"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UQSUITE_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(EXIT_EXEC);
        }
    }
    let outcome = match &cli.command {
        Command::Gen { config, out } => cmd_gen(config, out),
        Command::Train { config, out } => cmd_train(config, out),
        Command::Run {
            config,
            report,
            seed,
            fail_fast,
            md,
        } => cmd_run(config, report, *seed, *fail_fast, md.as_deref()),
        Command::Search { config, out, data } => cmd_search(config, out, data.as_deref()),
        Command::Render { report, md } => cmd_render(report, md.as_deref()),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
