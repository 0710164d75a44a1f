//! `gpssm`: simulate the benchmark, learn GP-SSMs with particle Gibbs,
//! predict and evaluate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use gpssm::benchmark::{
    benchmark_fic, benchmark_model_config, evaluate_baselines, evaluate_chain, run_protocol,
    summarize_reports, BenchmarkSpec, SummaryRow,
};
use gpssm::model::{Dataset, GpSsmModel, ModelConfig};
use gpssm::pgas::{read_chain, run_pgas, ChainWriter, PgasConfig, PriorKind};
use gpssm::predict::{
    post_burn_in, predict_points, write_predictions_csv, GridSpec, MixturePredictor,
};
use gpssm::Error;

#[derive(Parser)]
#[command(
    name = "gpssm",
    version,
    about = "GP state-space models with particle Gibbs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Dense,
    Fic,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long, value_enum)]
    prior: Option<PriorArg>,
    /// Number of inducing inputs for `--prior fic`.
    #[arg(long)]
    m: Option<usize>,
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write benchmark training and test datasets.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run particle Gibbs on a dataset and write the chain.
    Learn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue an existing chain in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the predictive mixture over a grid of query points.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        chain: PathBuf,
        /// Training data the chain was learned from.
        #[arg(long)]
        data: PathBuf,
        /// Add process noise (next-state prediction instead of f).
        #[arg(long)]
        with_noise: bool,
    },
    /// Score a chain against test data and write a JSON report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Skip the parametric baseline rows.
        #[arg(long)]
        no_baselines: bool,
    },
    /// Run the full repeated benchmark protocol.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        no_baselines: bool,
    },
}

/// Contents of a `--config` file; every section is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: Option<ModelConfig>,
    pgas: PgasConfig,
    benchmark: BenchmarkSpec,
    grid: Option<GridSpec>,
}

impl RunConfig {
    fn load(common: &Common) -> Result<Self, Error> {
        let mut cfg: RunConfig = match &common.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        let p = &mut cfg.pgas;
        if let Some(v) = common.seed {
            p.seed = v;
        }
        if let Some(v) = common.particles {
            p.n_particles = v;
        }
        if let Some(v) = common.iterations {
            p.n_iterations = v;
        }
        if let Some(v) = common.burn_in {
            p.burn_in = v;
        }
        match (common.prior, common.m) {
            (Some(PriorArg::Dense), _) => p.prior = PriorKind::Dense,
            (Some(PriorArg::Fic), m) | (None, m @ Some(_)) => {
                p.prior = match &p.prior {
                    PriorKind::Fic { m: m0, strategy } => PriorKind::Fic {
                        m: m.unwrap_or(*m0),
                        strategy: strategy.clone(),
                    },
                    PriorKind::Dense => benchmark_fic(m.unwrap_or(40)),
                }
            }
            (None, None) => {}
        }
        if common.iterations.is_some() && common.burn_in.is_none() && p.burn_in >= p.n_iterations {
            p.burn_in = p.n_iterations / 5;
        }
        if let Some(seed) = common.seed {
            cfg.benchmark.seeds = (seed..seed + cfg.benchmark.n_repeats as u64).collect();
        }
        cfg.pgas.validate()?;
        cfg.benchmark.validate()?;
        Ok(cfg)
    }

    fn model_config(&self) -> ModelConfig {
        self.model
            .clone()
            .unwrap_or_else(|| benchmark_model_config(&self.benchmark))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Model stored next to a chain by `learn`, or the configured one.
fn chain_model(cfg: &RunConfig, chain: &Path, explicit: bool) -> Result<GpSsmModel, Error> {
    let stored = chain.with_file_name("model.json");
    let mc = if !explicit && stored.exists() {
        serde_json::from_str(&fs::read_to_string(stored)?)?
    } else {
        cfg.model_config()
    };
    GpSsmModel::from_config(&mc)
}

fn default_grid() -> GridSpec {
    GridSpec {
        x: vec![(-20.0, 20.0, 81)],
        u: vec![(-1.0, 1.0, 21)],
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { common } => {
            let cfg = RunConfig::load(&common)?;
            fs::create_dir_all(&common.out)?;
            let (train, test) = cfg.benchmark.simulate(cfg.pgas.seed)?;
            train.save(&common.out.join("train.csv"))?;
            test.save(&common.out.join("test.csv"))?;
            println!(
                "wrote {} and {}",
                common.out.join("train.csv").display(),
                common.out.join("test.csv").display()
            );
        }
        Command::Learn {
            common,
            data,
            resume,
        } => {
            let cfg = RunConfig::load(&common)?;
            fs::create_dir_all(&common.out)?;
            let mc = cfg.model_config();
            let model = GpSsmModel::from_config(&mc)?;
            let ds = Dataset::load(&data)?;
            let chain_path = common.out.join("chain.jsonl");
            let last = if resume && chain_path.exists() {
                read_chain(&model, &chain_path)?.pop()
            } else {
                None
            };
            if resume && last.is_none() {
                log::warn!("no chain to resume; starting fresh");
            }
            write_json(&common.out.join("model.json"), &mc)?;
            write_json(&common.out.join("run.json"), &cfg)?;
            let mut writer = ChainWriter::open(&chain_path, last.is_none())?;
            let t0 = Instant::now();
            run_pgas(&model, &ds, &cfg.pgas, last.as_ref(), |s, dt| {
                writer.append(s)?;
                println!(
                    "{}",
                    serde_json::json!({"iteration": s.iteration, "log_joint": s.log_joint, "seconds": dt.as_secs_f64()})
                );
                Ok(())
            })?;
            log::info!("learned in {:.1}s", t0.elapsed().as_secs_f64());
        }
        Command::Predict {
            common,
            chain,
            data,
            with_noise,
        } => {
            let cfg = RunConfig::load(&common)?;
            fs::create_dir_all(&common.out)?;
            let model = chain_model(&cfg, &chain, cfg.model.is_some())?;
            let ds = Dataset::load(&data)?;
            let kept = post_burn_in(&read_chain(&model, &chain)?, cfg.pgas.burn_in);
            let predictor = MixturePredictor::new(&model, &kept, &ds.inputs)?;
            let grid = cfg.grid.clone().unwrap_or_else(default_grid);
            let rows = predict_points(&predictor, &grid.points()?, with_noise)?;
            let path = common.out.join("predictions.csv");
            write_predictions_csv(&rows, fs::File::create(&path)?)?;
            println!(
                "wrote {} ({} points, {} samples)",
                path.display(),
                rows.len(),
                predictor.len()
            );
        }
        Command::Evaluate {
            common,
            chain,
            data,
            test,
            no_baselines,
        } => {
            let cfg = RunConfig::load(&common)?;
            fs::create_dir_all(&common.out)?;
            let model = chain_model(&cfg, &chain, cfg.model.is_some())?;
            let train = Dataset::load(&data)?;
            let test = Dataset::load(&test)?;
            let samples = read_chain(&model, &chain)?;
            let mut report = evaluate_chain(
                &model,
                &samples,
                cfg.pgas.burn_in,
                &train,
                &test,
                cfg.pgas.seed,
            )?;
            if !no_baselines {
                report.baselines = evaluate_baselines(&cfg.benchmark, &train, &test, &cfg.pgas)?;
            }
            let path = common.out.join("report.json");
            write_json(&path, &report)?;
            println!("{}", report.to_json()?);
        }
        Command::Bench {
            common,
            no_baselines,
        } => {
            let cfg = RunConfig::load(&common)?;
            fs::create_dir_all(&common.out)?;
            let outcomes = run_protocol(&cfg.benchmark, &cfg.pgas, !no_baselines)?;
            let mut reports = Vec::new();
            let mut seconds = Vec::new();
            for o in &outcomes {
                let dir = common.out.join(format!("seed_{}", o.report.seed));
                fs::create_dir_all(&dir)?;
                let mut w = ChainWriter::open(&dir.join("chain.jsonl"), true)?;
                for s in &o.chain {
                    w.append(s)?;
                }
                write_json(&dir.join("report.json"), &o.report)?;
                reports.push(o.report.clone());
                seconds.push(o.mean_iteration_seconds());
            }
            let name = match cfg.pgas.prior {
                PriorKind::Dense => "gp_ssm",
                PriorKind::Fic { .. } => "sparse_gp_ssm",
            };
            #[derive(Serialize)]
            struct Summary<'a> {
                rows: Vec<SummaryRow>,
                mean_iteration_seconds: f64,
                run: &'a RunConfig,
            }
            let summary = Summary {
                rows: summarize_reports(name, &reports),
                mean_iteration_seconds: seconds.iter().sum::<f64>() / seconds.len() as f64,
                run: &cfg,
            };
            write_json(&common.out.join("summary.json"), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary.rows)?);
        }
    }
    Ok(())
}

/// Machine-readable failure record written to stderr.
fn error_record(e: &Error) -> serde_json::Value {
    let (kind, key) = match e {
        Error::Config { key, .. } => ("config", Some(key.clone())),
        Error::Dimension { .. } => ("dimension", None),
        Error::NotPositiveDefinite { .. } => ("numerical", None),
        Error::NonFinite { .. } => ("numerical", None),
        Error::Degenerate { .. } => ("degenerate", None),
        Error::Iteration { .. } => ("sampler", None),
        Error::Io(_) => ("io", None),
        Error::Csv(_) | Error::Parse(_) => ("parse", None),
        Error::Json(_) => ("json", None),
    };
    let mut v = serde_json::json!({"error": {"kind": kind, "message": e.to_string()}});
    let key = key.or_else(|| {
        let msg = e.to_string();
        let rest = &msg[msg.find("field `")? + 7..];
        Some(rest[..rest.find('`')?].to_string())
    });
    if let Some(k) = key {
        v["error"]["key"] = k.into();
    }
    if let Error::Iteration { iteration, .. } = e {
        v["error"]["iteration"] = (*iteration).into();
    }
    v
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": {"kind": "usage", "message": e.to_string()}})
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(if matches!(e, Error::Config { .. }) {
                2
            } else {
                1
            })
        }
    }
}
