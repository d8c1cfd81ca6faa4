mod error;
mod layout;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use fresco::audit::{run_audit, AuditSettings};
use fresco::config::{Scale, ScenarioConfig};
use fresco::engine::{generate_labels, run_episode, EpisodeOptions, Policy};
use fresco::io::{dataset_to_csv, loss_trace_to_csv, params_from_text, params_to_text, trace_to_jsonl};
use fresco::metrics::{aggregate, episode_metrics, metrics_to_csv, parse_metrics_csv, summary_to_csv, MetricsRow};
use fresco::model::generate_scenario;
use fresco::risk::{lstm_train, LstmParams};

use error::CliError;
use layout::{create_dir, read, run_stem, sha256_hex, write, RunManifest};

#[derive(Parser)]
#[command(name = "fresco", version, about = "Successor-UAV reservation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root. FRESCO_OUT overrides it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write initial scenario snapshots.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long, default_value = "1")]
        seeds: String,
    },
    /// Label shadow runs and write the dataset.
    Labels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long, default_value = "1001-1012")]
        seeds: String,
    },
    /// Label shadow runs and train the predictor.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long, default_value = "1001-1012")]
        seeds: String,
    },
    /// Run one policy on one or more seeds.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: String,
        #[arg(long)]
        scale: Option<String>,
        #[arg(long, default_value = "1")]
        seeds: String,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Measure decision time (makes adt_ms nondeterministic).
        #[arg(long)]
        timing: bool,
    },
    /// Policies x scales x seeds, aggregated.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "all")]
        policy: String,
        #[arg(long, default_value = "S1,S2,S3,S4")]
        scale: String,
        #[arg(long, default_value = "1-50")]
        seeds: String,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Worker threads; 0 picks the core count.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Skip runs whose row file already exists.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        timing: bool,
    },
    /// Randomized stability and optimality audit of the matcher.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 500)]
        instances: usize,
        #[arg(long, default_value_t = 5)]
        max_pairs: usize,
        #[arg(long, default_value_t = 4)]
        max_candidates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// `7`, `1-20` or comma-separated mixes such as `1-5,9`.
fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("bad seed list `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if b < a || b - a > 1_000_000 {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("empty seed list".into()));
    }
    Ok(out)
}

fn parse_policies(s: &str) -> Result<Vec<Policy>, CliError> {
    if s.trim() == "all" {
        return Ok(Policy::ALL.to_vec());
    }
    s.split(',').map(|p| Policy::parse(p.trim()).map_err(CliError::from)).collect()
}

fn parse_scales(s: &str) -> Result<Vec<Scale>, CliError> {
    s.split(',').map(|p| Scale::parse(p).map_err(CliError::from)).collect()
}

struct Loaded {
    cfg: ScenarioConfig,
    path: Option<String>,
    sha: String,
}

fn load_config(path: Option<&Path>) -> Result<Loaded, CliError> {
    let cfg = match path {
        Some(p) => ScenarioConfig::from_toml_str(&read(p)?)?,
        None => ScenarioConfig::default(),
    };
    // hash the normalized form so formatting does not matter
    let sha = sha256_hex(cfg.to_toml_string().as_bytes());
    Ok(Loaded { cfg, path: path.map(|p| p.display().to_string()), sha })
}

fn with_scale(cfg: &ScenarioConfig, scale: Option<&str>) -> Result<ScenarioConfig, CliError> {
    let mut c = cfg.clone();
    if let Some(s) = scale {
        c.set_scale(Scale::parse(s)?);
    }
    Ok(c)
}

fn scale_label(cfg: &ScenarioConfig) -> String {
    cfg.scale()
        .map(|s| s.name().to_string())
        .unwrap_or_else(|| format!("{}x{}", cfg.scenario.num_mus, cfg.scenario.num_uavs))
}

fn out_root(common: &Common) -> PathBuf {
    std::env::var_os("FRESCO_OUT").map(PathBuf::from).unwrap_or_else(|| common.out.clone())
}

fn manifest(command: &str, loaded: &Loaded) -> RunManifest {
    RunManifest {
        command: command.into(),
        config_path: loaded.path.clone(),
        config_sha256: loaded.sha.clone(),
        params_sha256: None,
        policies: Vec::new(),
        scales: Vec::new(),
        seeds: Vec::new(),
        options: BTreeMap::new(),
        output_dir: String::new(),
    }
}

fn load_params(path: Option<&Path>, policies: &[Policy]) -> Result<Option<(LstmParams, String)>, CliError> {
    match path {
        Some(p) => {
            let text = read(p)?;
            let params = params_from_text(&text)?;
            params.check_shape()?;
            Ok(Some((params, sha256_hex(text.as_bytes()))))
        }
        None if policies.iter().any(|p| p.needs_params()) => Err(CliError::Usage(
            "policy `fresco` needs --params (create one with `fresco train`)".into(),
        )),
        None => Ok(None),
    }
}

fn cmd_gen(common: &Common, scale: Option<&str>, seeds: &str) -> Result<(), CliError> {
    let loaded = load_config(common.config.as_deref())?;
    let cfg = with_scale(&loaded.cfg, scale)?;
    let seeds = parse_seeds(seeds)?;
    let mut m = manifest("gen", &loaded);
    m.scales = vec![scale_label(&cfg)];
    m.seeds = seeds.clone();
    let dir = m.materialize(&out_root(common))?;
    for seed in seeds {
        let w = generate_scenario(&cfg, seed)?;
        write(&dir.join(format!("scenario_{seed}.snap")), w.to_snapshot().as_bytes())?;
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_labels(common: &Common, scale: Option<&str>, seeds: &str, train: bool) -> Result<(), CliError> {
    let loaded = load_config(common.config.as_deref())?;
    let cfg = with_scale(&loaded.cfg, scale)?;
    let seeds = parse_seeds(seeds)?;
    let mut m = manifest(if train { "train" } else { "labels" }, &loaded);
    m.scales = vec![scale_label(&cfg)];
    m.seeds = seeds.clone();
    let dir = m.materialize(&out_root(common))?;
    let data = generate_labels(&cfg, &seeds)?;
    if !train {
        write(&dir.join("labels.csv"), dataset_to_csv(&data).as_bytes())?;
        println!("{} samples, {} positive -> {}", data.samples.len(), data.positives(), dir.display());
        return Ok(());
    }
    let outcome = lstm_train(&data, &cfg.train)?;
    let params_dir = dir.join("params");
    create_dir(&params_dir)?;
    write(&params_dir.join("lstm.txt"), params_to_text(&outcome.params).as_bytes())?;
    write(&params_dir.join("loss.csv"), loss_trace_to_csv(&outcome.loss_trace).as_bytes())?;
    println!(
        "{} samples, final loss {:.6} -> {}",
        data.samples.len(),
        outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
        params_dir.join("lstm.txt").display()
    );
    Ok(())
}

struct Job {
    policy: Policy,
    scale: String,
    cfg: ScenarioConfig,
    seed: u64,
}

fn run_job(job: &Job, params: Option<&LstmParams>, timing: bool, dir: &Path) -> Result<MetricsRow, CliError> {
    let opts = EpisodeOptions { timing, ..EpisodeOptions::default() };
    let ep = run_episode(&job.cfg, job.seed, job.policy, params, opts)?;
    let row = episode_metrics(job.policy.name(), &job.scale, job.seed, &ep, job.cfg.scenario.tau);
    let stem = run_stem(job.policy.name(), &job.scale, job.seed);
    write(&dir.join("traces").join(format!("{stem}.jsonl")), trace_to_jsonl(&ep.events).as_bytes())?;
    write(&dir.join("runs").join(format!("{stem}.csv")), metrics_to_csv(std::slice::from_ref(&row)).as_bytes())?;
    Ok(row)
}

struct SweepArgs<'a> {
    common: &'a Common,
    command: &'a str,
    policies: Vec<Policy>,
    scales: Vec<Option<Scale>>,
    seeds: Vec<u64>,
    params: Option<&'a Path>,
    workers: usize,
    resume: bool,
    timing: bool,
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let loaded = load_config(a.common.config.as_deref())?;
    let params = load_params(a.params, &a.policies)?;
    let mut jobs = Vec::new();
    let mut scale_names = Vec::new();
    for s in &a.scales {
        let mut cfg = loaded.cfg.clone();
        if let Some(s) = s {
            cfg.set_scale(*s);
        }
        let scale = scale_label(&cfg);
        scale_names.push(scale.clone());
        for &policy in &a.policies {
            for &seed in &a.seeds {
                jobs.push(Job { policy, scale: scale.clone(), cfg: cfg.clone(), seed });
            }
        }
    }
    let mut m = manifest(a.command, &loaded);
    m.params_sha256 = params.as_ref().map(|(_, h)| h.clone());
    m.policies = a.policies.iter().map(|p| p.name().to_string()).collect();
    m.scales = scale_names;
    m.seeds = a.seeds.clone();
    m.options.insert("timing".into(), a.timing.to_string());
    let dir = m.materialize(&out_root(a.common))?;
    for sub in ["traces", "runs", "params"] {
        create_dir(&dir.join(sub))?;
    }
    if let Some((p, _)) = &params {
        write(&dir.join("params").join("lstm.txt"), params_to_text(p).as_bytes())?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", a.workers)))?;
    let lstm = params.as_ref().map(|(p, _)| p);
    let row_path = |j: &Job| dir.join("runs").join(format!("{}.csv", run_stem(j.policy.name(), &j.scale, j.seed)));
    let results: Vec<Result<(), (String, CliError)>> = pool.install(|| {
        jobs.par_iter()
            .map(|j| {
                if a.resume && row_path(j).exists() {
                    return Ok(());
                }
                run_job(j, lstm, a.timing, &dir)
                    .map(|_| ())
                    .map_err(|e| (run_stem(j.policy.name(), &j.scale, j.seed), e))
            })
            .collect()
    });

    let mut failed = 0;
    for r in &results {
        if let Err((stem, e)) = r {
            eprintln!("run {stem} failed: {e}");
            failed += 1;
        }
    }
    let mut rows = Vec::new();
    for j in &jobs {
        let path = row_path(j);
        if path.exists() {
            rows.extend(parse_metrics_csv(&read(&path)?)?);
        }
    }
    write(&dir.join("metrics.csv"), metrics_to_csv(&rows).as_bytes())?;
    write(&dir.join("summary.csv"), summary_to_csv(&aggregate(&rows)).as_bytes())?;
    println!("{} rows -> {}", rows.len(), dir.display());
    if failed > 0 {
        return Err(CliError::Runs { failed, total: jobs.len() });
    }
    Ok(())
}

fn cmd_audit(common: &Common, instances: usize, max_pairs: usize, max_candidates: usize, seed: u64) -> Result<(), CliError> {
    let loaded = load_config(common.config.as_deref())?;
    let settings = AuditSettings { instances, max_pairs, max_candidates, seed };
    let report = run_audit(&loaded.cfg, &settings)?;
    let mut m = manifest("audit", &loaded);
    m.seeds = vec![seed];
    m.options.insert("instances".into(), instances.to_string());
    m.options.insert("max_pairs".into(), max_pairs.to_string());
    m.options.insert("max_candidates".into(), max_candidates.to_string());
    let dir = m.materialize(&out_root(common))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write(&dir.join("audit.json"), json.as_bytes())?;
    println!("instances              {}", report.instances);
    println!("contested instances    {}", report.contested_instances);
    println!("blocking pairs         {}", report.blocking_pairs);
    println!("IR violations          {}", report.ir_violations);
    println!("oracle violations      {}", report.oracle_violations);
    println!("termination violations {}", report.termination_violations);
    println!("welfare ratio          mean {:.4} min {:.4} over {}", report.ratio_mean, report.ratio_min, report.ratio_samples);
    println!("report                 {}", dir.join("audit.json").display());
    if !report.passed() {
        let n = report.blocking_pairs + report.ir_violations + report.oracle_violations + report.termination_violations;
        return Err(CliError::Audit(n));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common, scale, seeds } => cmd_gen(&common, scale.as_deref(), &seeds),
        Command::Labels { common, scale, seeds } => cmd_labels(&common, scale.as_deref(), &seeds, false),
        Command::Train { common, scale, seeds } => cmd_labels(&common, scale.as_deref(), &seeds, true),
        Command::Run { common, policy, scale, seeds, params, timing } => cmd_sweep(SweepArgs {
            common: &common,
            command: "run",
            policies: vec![Policy::parse(&policy)?],
            scales: vec![scale.as_deref().map(Scale::parse).transpose()?],
            seeds: parse_seeds(&seeds)?,
            params: params.as_deref(),
            workers: 1,
            resume: false,
            timing,
        }),
        Command::Sweep { common, policy, scale, seeds, params, workers, resume, timing } => cmd_sweep(SweepArgs {
            common: &common,
            command: "sweep",
            policies: parse_policies(&policy)?,
            scales: parse_scales(&scale)?.into_iter().map(Some).collect(),
            seeds: parse_seeds(&seeds)?,
            params: params.as_deref(),
            workers,
            resume,
            timing,
        }),
        Command::Audit { common, instances, max_pairs, max_candidates, seed } => {
            cmd_audit(&common, instances, max_pairs, max_candidates, seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
