use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use trajcast::config::RunConfig;
use trajcast::datagen::{ingest_csv, write_tracks_csv, EpisodeMeta, IngestOptions, Units};
use trajcast::eval::{duration_sweep, mean_reduction, reduction_csv, rmse_reduction, ComparisonTable};
use trajcast::experiment::{
    cohorts, compare_driver, driver_name, driver_specs, driver_windows, parse_driver, personalize, pretrain_models, pretrain_specs,
    pretrain_windows, run_experiment, simulate, train_individual, Cohorts, DriverData, EpisodeTracks, ExperimentConfig, GenericModels,
    ModelSet, COLUMNS,
};
use trajcast::model::init_params;
use trajcast::numeric::{load_checkpoint_matching, save_checkpoint};
use trajcast::training::{model_grad_check, LossReport};

/// Personalized GCN-LSTM trajectory prediction on synthetic or ingested highway data.
#[derive(Parser, Debug)]
#[command(name = "trajcast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key = value run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Personal driver (`d1`, `d2`, ...); repeat or comma-separate. Default: all.
    #[arg(long, global = true, value_delimiter = ',')]
    driver: Vec<String>,
    /// Fine-tuning minutes: one value for `finetune`, a list for `sweep`.
    #[arg(long, global = true, value_delimiter = ',')]
    minutes: Vec<u32>,
    /// Units of ingested coordinates.
    #[arg(long, global = true, default_value = "m")]
    units: String,
}

#[derive(Subcommand, Debug, Clone, PartialEq)]
enum Command {
    /// Simulate the pretraining pool and every personal driver's rounds.
    Simulate,
    /// Convert an external trajectory CSV to the canonical 0.5 s format.
    Ingest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the generic GCN-LSTM and the seq2seq baseline.
    Pretrain,
    /// Personalize the generic model and train the individual model.
    Finetune,
    /// Write the comparison table and reduction percentages.
    Evaluate,
    /// Fine-tuning duration sweep.
    Sweep,
    /// Whole study in one go: every table, sweep and loss curve.
    Report,
    /// Finite-difference check of the model gradients.
    Gradcheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Ingest { .. } => "ingest",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Sweep => "sweep",
            Command::Report => "report",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Bad flags or configuration; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TRAJCAST_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| usage(format!("TRAJCAST_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(usage("TRAJCAST_THREADS must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            trajcast::Error::Io(io) => usage(format!("{}: {io}", path.display())),
            other => usage(other.to_string()),
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    cfg.experiment.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    init_threads()?;
    let cfg = load_config(cli)?;
    if let Command::Gradcheck = cli.command {
        let report = model_grad_check(cfg.experiment.seed)?;
        println!(
            "max relative error {:.3e} over {} parameters (worst {}: tape {:.6e}, finite difference {:.6e})",
            report.max_rel_error, report.checked, report.worst, report.worst_pair.0, report.worst_pair.1
        );
        return Ok(if report.max_rel_error < 1e-4 {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(1)
        });
    }
    let drivers = selected_drivers(cli, &cfg.experiment)?;
    let run = RunDir::create(&cli.out, cfg.experiment.seed, cli.command.name())?;
    fs::write(run.path.join("config.resolved.txt"), cfg.to_text())?;
    match cli.command {
        Command::Simulate => cmd_simulate(&cfg, &run),
        Command::Ingest { ref input } => cmd_ingest(cli, input, &run),
        Command::Pretrain => cmd_pretrain(cli, &cfg, &run),
        Command::Finetune => cmd_finetune(cli, &cfg, &run, &drivers),
        Command::Evaluate => cmd_evaluate(cli, &cfg, &run, &drivers),
        Command::Sweep => cmd_sweep(cli, &cfg, &run, &drivers),
        Command::Report => cmd_report(&cfg, &run),
        Command::Gradcheck => unreachable!("handled above"),
    }?;
    println!("{}", run.path.display());
    Ok(ExitCode::SUCCESS)
}

fn selected_drivers(cli: &Cli, cfg: &ExperimentConfig) -> Result<Vec<String>> {
    if cli.driver.is_empty() {
        return Ok((0..cfg.personal_drivers).map(driver_name).collect());
    }
    cli.driver
        .iter()
        .map(|d| {
            parse_driver(d, cfg.personal_drivers)
                .map(driver_name)
                .map_err(|e| usage(e.to_string()))
        })
        .collect()
}

struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn create(out: &Path, seed: u64, cmd: &str) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%3f");
        let path = out.join(format!("{stamp}-s{seed}-{cmd}"));
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { path })
    }
}

/// Latest run directory of `cmd` under `out` with the same seed that
/// satisfies `accept`.
fn latest_run(out: &Path, seed: u64, cmd: &str, accept: impl Fn(&Path) -> bool) -> Option<PathBuf> {
    let suffix = format!("-s{seed}-{cmd}");
    let mut runs: Vec<PathBuf> = fs::read_dir(out)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(&suffix)))
        .filter(|p| accept(p))
        .collect();
    runs.sort();
    runs.pop()
}

fn write_episode(dir: &Path, ep: &EpisodeTracks, seed: u64, density: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tracks_csv(dir.join(format!("{}.csv", ep.name)), &ep.tracks)?;
    EpisodeMeta::new(ep.ego_id, seed, density).write(dir.join(format!("{}.meta", ep.name)))?;
    Ok(())
}

fn read_episodes(dir: &Path) -> Result<Vec<EpisodeTracks>> {
    let mut csvs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    csvs.sort();
    if csvs.is_empty() {
        bail!("no episode CSVs in {}", dir.display());
    }
    csvs.iter()
        .map(|csv| {
            let meta_path = csv.with_extension("meta");
            let meta = EpisodeMeta::read(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?;
            let ego_id = meta.ego_id().ok_or_else(|| anyhow!("{}: missing ego_id", meta_path.display()))?;
            let options = IngestOptions {
                resample: false,
                ..IngestOptions::default()
            };
            Ok(EpisodeTracks {
                name: csv.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
                tracks: ingest_csv(csv, options)?,
                ego_id,
            })
        })
        .collect()
}

/// Where a stage's input tracks come from.
enum Source {
    Dir(PathBuf),
    Simulate(Cohorts),
}

impl Source {
    fn find(cli: &Cli, cfg: &RunConfig) -> Result<Self> {
        let seed = cfg.experiment.seed;
        if let Some(dir) = &cfg.data_dir {
            return Ok(Source::Dir(dir.clone()));
        }
        if let Some(dir) = latest_run(&cli.out, seed, "simulate", |_| true) {
            eprintln!("using simulated data from {}", dir.display());
            return Ok(Source::Dir(dir));
        }
        eprintln!("no simulate run with seed {seed}; simulating in memory");
        Ok(Source::Simulate(cohorts(&cfg.experiment)?))
    }

    fn pretraining(&self, cfg: &ExperimentConfig) -> Result<Vec<EpisodeTracks>> {
        match self {
            Source::Dir(dir) => read_episodes(&dir.join("pretrain")),
            Source::Simulate(c) => {
                use rayon::prelude::*;
                Ok(pretrain_specs(cfg, c).par_iter().map(simulate).collect::<trajcast::Result<_>>()?)
            }
        }
    }

    fn driver(&self, cfg: &ExperimentConfig, name: &str) -> Result<DriverData> {
        let rounds = match self {
            Source::Dir(dir) => read_episodes(&dir.join("drivers").join(name))?,
            Source::Simulate(c) => {
                use rayon::prelude::*;
                let idx = parse_driver(name, cfg.personal_drivers)?;
                driver_specs(cfg, c, idx)
                    .par_iter()
                    .map(simulate)
                    .collect::<trajcast::Result<_>>()?
            }
        };
        Ok(driver_windows(cfg, name, &rounds)?)
    }
}

fn cmd_simulate(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    use rayon::prelude::*;
    let e = &cfg.experiment;
    let c = cohorts(e)?;
    let mut jobs: Vec<(PathBuf, _)> = pretrain_specs(e, &c).into_iter().map(|s| (run.path.join("pretrain"), s)).collect();
    for d in 0..e.personal_drivers {
        let dir = run.path.join("drivers").join(driver_name(d));
        jobs.extend(driver_specs(e, &c, d).into_iter().map(|s| (dir.clone(), s)));
    }
    jobs.par_iter().try_for_each(|(dir, spec)| {
        let ep = simulate(spec)?;
        write_episode(dir, &ep, spec.scenario.seed, spec.scenario.density.name())
    })
}

fn cmd_ingest(cli: &Cli, input: &Path, run: &RunDir) -> Result<()> {
    let units = Units::parse(&cli.units).map_err(|e| usage(e.to_string()))?;
    let tracks = ingest_csv(input, IngestOptions { units, resample: true })?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("tracks");
    write_tracks_csv(run.path.join(format!("{stem}.csv")), &tracks)?;
    let meta = input.with_extension("meta");
    if meta.exists() {
        fs::copy(&meta, run.path.join(format!("{stem}.meta")))?;
    }
    eprintln!(
        "{} tracks, {} points",
        tracks.len(),
        tracks.iter().map(|t| t.points.len()).sum::<usize>()
    );
    Ok(())
}

fn write_report(path: &Path, report: &LossReport) -> Result<()> {
    report.write_csv(path).with_context(|| format!("writing {}", path.display()))
}

fn cmd_pretrain(cli: &Cli, cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let e = &cfg.experiment;
    let source = Source::find(cli, cfg)?;
    let data = pretrain_windows(e, &source.pretraining(e)?)?;
    eprintln!("pretraining on {} windows ({} validation)", data.train.len(), data.val.len());
    let generic = pretrain_models(e, &data)?;
    save_checkpoint(&generic.gcn, run.path.join("generic"))?;
    save_checkpoint(&generic.seq2seq, run.path.join("seq2seq"))?;
    write_report(&run.path.join("generic_loss.csv"), &generic.gcn_report)?;
    write_report(&run.path.join("seq2seq_loss.csv"), &generic.seq2seq_report)?;
    Ok(())
}

/// Generic and seq2seq checkpoints from `base_checkpoint` or the latest
/// pretrain run.
fn load_generic(cli: &Cli, cfg: &RunConfig) -> Result<GenericModels> {
    let e = &cfg.experiment;
    let dir = match &cfg.base_checkpoint {
        Some(d) => d.clone(),
        None => latest_run(&cli.out, e.seed, "pretrain", |p| p.join("generic").is_dir())
            .ok_or_else(|| anyhow!("no pretrain run with seed {} under {}", e.seed, cli.out.display()))?,
    };
    eprintln!("using base models from {}", dir.display());
    let s2s = e.model.seq2seq();
    Ok(GenericModels {
        gcn: load_checkpoint_matching(dir.join("generic"), &init_params(&e.model, 0)?)?,
        gcn_report: LossReport::default(),
        seq2seq: load_checkpoint_matching(dir.join("seq2seq"), &init_params(&s2s, 0)?)?,
        seq2seq_report: LossReport::default(),
    })
}

fn full_minutes(driver: &DriverData) -> u32 {
    driver.available_minutes().floor() as u32
}

fn cmd_finetune(cli: &Cli, cfg: &RunConfig, run: &RunDir, drivers: &[String]) -> Result<()> {
    let e = &cfg.experiment;
    if cli.minutes.len() > 1 {
        return Err(usage("finetune takes a single --minutes value"));
    }
    let generic = load_generic(cli, cfg)?;
    let source = Source::find(cli, cfg)?;
    for name in drivers {
        let data = source.driver(e, name)?;
        let minutes = cli.minutes.first().copied().unwrap_or_else(|| full_minutes(&data));
        let (personalized, p_report) = personalize(e, &generic.gcn, &data, minutes)?;
        let (individual, i_report) = train_individual(e, &data)?;
        let dir = run.path.join(name);
        save_checkpoint(&personalized, dir.join("personalized"))?;
        save_checkpoint(&individual, dir.join("individual"))?;
        write_report(&dir.join("personalized_loss.csv"), &p_report)?;
        write_report(&dir.join("individual_loss.csv"), &i_report)?;
        eprintln!("{name}: fine-tuned on {minutes} min");
    }
    Ok(())
}

fn cmd_evaluate(cli: &Cli, cfg: &RunConfig, run: &RunDir, drivers: &[String]) -> Result<()> {
    let e = &cfg.experiment;
    let generic = load_generic(cli, cfg)?;
    let source = Source::find(cli, cfg)?;
    let template = init_params(&e.model, 0)?;
    let mut pooled = ComparisonTable::empty(&COLUMNS);
    let mut reductions = Vec::new();
    for name in drivers {
        let tuned = latest_run(&cli.out, e.seed, "finetune", |p| p.join(name).join("personalized").is_dir())
            .ok_or_else(|| anyhow!("no finetune run for {name} with seed {}", e.seed))?
            .join(name);
        let personalized = load_checkpoint_matching(tuned.join("personalized"), &template)?;
        let individual = load_checkpoint_matching(tuned.join("individual"), &template)?;
        let data = source.driver(e, name)?;
        let set = ModelSet {
            cfg: e,
            generic: &generic,
            individual: &individual,
            personalized: &personalized,
        };
        let table = compare_driver(&set, &data.test);
        let dir = run.path.join(name);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("table.csv"), table.to_csv()?)?;
        reductions.push(rmse_reduction(&table.rmse("generic")?, &table.rmse("personalized")?));
        fs::write(dir.join("reduction.csv"), reduction_csv(reductions.last().expect("just pushed")))?;
        pooled.merge(&table)?;
    }
    fs::write(run.path.join("table.csv"), pooled.to_csv()?)?;
    fs::write(run.path.join("reduction.csv"), reduction_csv(&mean_reduction(&reductions)))?;
    print!("{}", pooled.to_csv()?);
    Ok(())
}

fn cmd_sweep(cli: &Cli, cfg: &RunConfig, run: &RunDir, drivers: &[String]) -> Result<()> {
    let e = &cfg.experiment;
    let minutes = if cli.minutes.is_empty() {
        e.sweep_minutes.clone()
    } else {
        cli.minutes.clone()
    };
    let generic = load_generic(cli, cfg)?;
    let source = Source::find(cli, cfg)?;
    for name in drivers {
        let data = source.driver(e, name)?;
        let sweep = duration_sweep(&minutes, data.available_minutes(), &data.test, &e.model, |m| {
            personalize(e, &generic.gcn, &data, m).map(|p| p.0)
        })?;
        let dir = run.path.join(name);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("sweep.csv"), sweep.to_csv())?;
        eprintln!("{name}: sweep over {} durations", minutes.len());
    }
    Ok(())
}

fn cmd_report(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let report = run_experiment(&cfg.experiment, true, |m| eprintln!("{m}"))?;
    let p = &run.path;
    fs::write(p.join("summary.txt"), report.summary()?)?;
    fs::write(p.join("table.csv"), report.table_csv()?)?;
    fs::write(p.join("reduction.csv"), report.reduction_csv()?)?;
    write_report(&p.join("generic_loss.csv"), &report.generic.gcn_report)?;
    write_report(&p.join("seq2seq_loss.csv"), &report.generic.seq2seq_report)?;
    save_checkpoint(&report.generic.gcn, p.join("generic"))?;
    save_checkpoint(&report.generic.seq2seq, p.join("seq2seq"))?;
    for d in &report.drivers {
        let dir = p.join(&d.name);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("table.csv"), d.table.to_csv()?)?;
        fs::write(dir.join("reduction.csv"), reduction_csv(&d.reduction()?))?;
        write_report(&dir.join("personalized_loss.csv"), &d.personalized_report)?;
        write_report(&dir.join("individual_loss.csv"), &d.individual_report)?;
        if let Some(s) = &d.sweep {
            fs::write(dir.join("sweep.csv"), s.to_csv())?;
        }
    }
    print!("{}", report.summary()?);
    Ok(())
}
