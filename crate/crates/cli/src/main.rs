//! `sepo`: pretrain, fine-tune, sample from and evaluate tabular discrete
//! diffusion models, and run the oracle invariant suite.
//!
//! Exit status: 0 on success, 1 on numerical/domain failures (and failed
//! oracle checks), 2 on configuration or usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sepo_core::config::ConfigFile;
use sepo_core::score::{ScoreModel, ScoreParams};
use sepo_core::trainer::{
    evaluate_policy, format_sequences, parse_sequences, pretrain_score, sepo_train, Manifest,
    PretrainConfig,
};
use sepo_core::{sampler, verify, Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "sepo",
    version,
    about = "Policy-gradient fine-tuning of discrete diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the score table to the dataset named in the config.
    Pretrain(RunArgs),
    /// Run the fine-tuning loop from a pretrained checkpoint.
    Finetune(RunArgs),
    /// Draw sequences and write them one per line.
    Sample(RunArgs),
    /// Report reward statistics of samples from a checkpoint.
    Evaluate(RunArgs),
    /// Run the oracle-backed invariant suite and print a pass/fail table.
    OracleVerify {
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; defaults depend on the subcommand.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Score checkpoint to start from.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Number of samples for `sample` and `evaluate`.
    #[arg(long, default_value_t = 256)]
    n_samples: usize,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

struct Loaded {
    cfg: ConfigFile,
    path: PathBuf,
    hash: String,
    seed: u64,
}

impl RunArgs {
    fn load(&self) -> Result<Loaded> {
        let cfg = ConfigFile::load(&self.config)?;
        let hash = cfg.hash()?;
        let seed = self.seed.unwrap_or(cfg.train.seed);
        Ok(Loaded {
            cfg,
            path: self.config.clone(),
            hash,
            seed,
        })
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

impl Loaded {
    fn dir(&self, p: &Path) -> Result<PathBuf> {
        let dir = ConfigFile::resolve(&self.path, p);
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    /// Loads a checkpoint and checks it matches the configured space and schedule.
    fn checkpoint(&self, path: &Path) -> Result<ScoreParams> {
        let (params, fingerprint) = ScoreParams::load(path)?;
        let sched = self.cfg.schedule()?;
        if fingerprint != sched.fingerprint() {
            return Err(Error::Config(format!(
                "checkpoint {} was trained under a different noise schedule",
                path.display()
            )));
        }
        let expect = self.cfg.init_params()?;
        if same_shape(&params, &expect) {
            Ok(params)
        } else {
            Err(Error::Config(format!(
                "checkpoint {} does not match the configured space",
                path.display()
            )))
        }
    }

    /// Explicit checkpoint, else the untrained table of the config.
    fn model(&self, path: Option<&Path>) -> Result<ScoreParams> {
        match path {
            Some(p) => self.checkpoint(p),
            None => self.cfg.init_params(),
        }
    }
}

fn same_shape(a: &ScoreParams, b: &ScoreParams) -> bool {
    a.spec() == b.spec()
        && a.kind() == b.kind()
        && a.n_buckets() == b.n_buckets()
        && a.shared_positions() == b.shared_positions()
        && a.horizon() == b.horizon()
        && a.num_params() == b.num_params()
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.toml");
    out.with_file_name(name)
}

fn pretrain(args: &RunArgs) -> Result<()> {
    let run = args.load()?;
    let cfg = &run.cfg;
    let data_path = cfg
        .paths
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("pretrain needs paths.dataset".into()))?;
    let data_path = ConfigFile::resolve(&run.path, data_path);
    let text = std::fs::read_to_string(&data_path)
        .map_err(|e| Error::Config(format!("cannot read dataset {}: {e}", data_path.display())))?;
    let data = parse_sequences(&text)?;
    let spec = cfg.spec()?;
    for s in &data {
        spec.check(s)
            .map_err(|e| Error::Config(format!("dataset {}: {e}", data_path.display())))?;
    }
    let (g, sched) = (cfg.generator()?, cfg.schedule()?);
    let pcfg = PretrainConfig {
        seed: run.seed,
        ..cfg.pretrain.clone()
    };
    args.say(format!(
        "pretraining on {} sequences for {} steps",
        data.len(),
        pcfg.steps
    ));
    let fitted = pretrain_score(&data, cfg.init_params()?, &g, &sched, &pcfg)?;
    let out = match &args.out {
        Some(p) => p.clone(),
        None => run.dir(&cfg.paths.checkpoint_dir)?.join("pretrained.ckpt"),
    };
    fitted.params.save(&out, &sched)?;
    Manifest::new(
        "pretrain",
        &run.hash,
        run.seed,
        vec![out.display().to_string()],
    )
    .write(&manifest_path(&out))?;
    if let Some(last) = fitted.losses.last() {
        args.say(format!("final loss {last:.6}"));
    }
    args.say(format!("wrote {}", out.display()));
    Ok(())
}

fn finetune(args: &RunArgs) -> Result<()> {
    let run = args.load()?;
    let cfg = &run.cfg;
    let reward = cfg.reward()?;
    let (g, sched) = (cfg.generator()?, cfg.schedule()?);
    let ckpt = match &args.checkpoint {
        Some(p) => p.clone(),
        None => ConfigFile::resolve(&run.path, &cfg.paths.checkpoint_dir).join("pretrained.ckpt"),
    };
    let pre = run.checkpoint(&ckpt)?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = run.seed;
    let sampler = cfg.sampler_config(run.seed);
    args.say(format!(
        "fine-tuning {} for {} iterations",
        ckpt.display(),
        tcfg.iterations
    ));
    let out = sepo_train(&pre, &reward, &g, &sched, &sampler, &tcfg)?;
    let ckpt_out = match &args.out {
        Some(p) => p.clone(),
        None => run.dir(&cfg.paths.checkpoint_dir)?.join("finetuned.ckpt"),
    };
    let stem = ckpt_out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "finetune".into());
    let csv = run.dir(&cfg.paths.log_dir)?.join(format!("{stem}.csv"));
    out.params.save(&ckpt_out, &sched)?;
    out.log.write_csv(&csv)?;
    let outputs = vec![ckpt_out.display().to_string(), csv.display().to_string()];
    Manifest::new("finetune", &run.hash, run.seed, outputs).write(&manifest_path(&ckpt_out))?;
    for f in &out.log.failures {
        args.say(format!("iteration {} skipped: {}", f.0, f.1));
    }
    if let Some(r) = out.log.records.last() {
        args.say(format!(
            "last iteration: mean reward {:.4}, median {:.4}",
            r.mean_reward, r.median_reward
        ));
    }
    args.say(format!(
        "wrote {} and {}",
        ckpt_out.display(),
        csv.display()
    ));
    Ok(())
}

fn sample(args: &RunArgs) -> Result<()> {
    let run = args.load()?;
    let cfg = &run.cfg;
    if args.n_samples == 0 {
        return Err(Error::Config("--n-samples must be >= 1".into()));
    }
    let score = run.model(args.checkpoint.as_deref())?;
    let (g, sched) = (cfg.generator()?, cfg.schedule()?);
    let xs = sampler::sample_terminals(
        &cfg.sampler_config(run.seed),
        &score,
        &g,
        &sched,
        args.n_samples,
    )?;
    let text = format!(
        "# seed={} config_hash={}\n{}",
        run.seed,
        run.hash,
        format_sequences(&xs)
    );
    match &args.out {
        Some(p) => {
            std::fs::write(p, &text)?;
            args.say(format!("wrote {} samples to {}", xs.len(), p.display()));
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn evaluate(args: &RunArgs) -> Result<()> {
    let run = args.load()?;
    let cfg = &run.cfg;
    let reward = cfg.reward()?;
    let score = run.model(args.checkpoint.as_deref())?;
    let (g, sched) = (cfg.generator()?, cfg.schedule()?);
    let summary = evaluate_policy(
        &score,
        &reward,
        args.n_samples,
        &cfg.sampler_config(run.seed),
        &g,
        &sched,
    )?;
    let text = format!(
        "reward={} samples={} mean={:.6} median={:.6} std={:.6}\n",
        reward.name(),
        summary.samples.len(),
        summary.mean,
        summary.median,
        summary.std
    );
    match &args.out {
        Some(p) => std::fs::write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn oracle_verify(quiet: bool) -> ExitCode {
    let checks = verify::run_suite();
    let table = verify::format_table(&checks);
    if quiet {
        print!(
            "{}",
            table
                .lines()
                .last()
                .map(|l| format!("{l}\n"))
                .unwrap_or_default()
        );
    } else {
        print!("{table}");
    }
    if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn exit_for(result: Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    // clap reports usage errors (unknown subcommand, missing --config) with status 2.
    let cli = Cli::parse();
    match &cli.command {
        Command::Pretrain(a) => exit_for(pretrain(a)),
        Command::Finetune(a) => exit_for(finetune(a)),
        Command::Sample(a) => exit_for(sample(a)),
        Command::Evaluate(a) => exit_for(evaluate(a)),
        Command::OracleVerify { quiet } => oracle_verify(*quiet),
    }
}
