use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transfer_lab_cli::config::RunConfig;
use transfer_lab_cli::{execute, CliError};

/// Transferable targeted adversarial attacks on small CIFAR-10 classifiers.
///
/// Settings resolve as defaults, then `--config` file, then flags, then
/// `--set key=value` pairs. Every run writes its resolved config next to its
/// outputs; `run --config <that file>` repeats it.
#[derive(Parser)]
#[command(name = "transfer-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one architecture and write `<arch>_s<seed>.mzw` into --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        epochs: Option<String>,
        #[arg(long)]
        batch_size: Option<String>,
        #[arg(long)]
        learning_rate: Option<String>,
    },
    /// Attack evaluation images on source model(s) and score on targets.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackArgs,
        /// Source model(s), comma-separated; several are fused.
        #[arg(long)]
        source: Option<String>,
        /// Target models, comma-separated.
        #[arg(long)]
        targets: Option<String>,
        #[arg(long)]
        loss: Option<String>,
    },
    /// Run an experiment suite.
    Suite {
        /// single, ensemble-easy, ensemble-hard, ranksweep, stepsweep, trends or uap.
        name: String,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackArgs,
        /// Losses, comma-separated (ce, logit, cw, po_trip).
        #[arg(long)]
        losses: Option<String>,
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        targets: Option<String>,
    },
    /// Repeat a run from a config file.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    jobs: Option<String>,
    /// Override any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct AttackArgs {
    /// Enable momentum; if any of --mi/--ti/--di is given, exactly those run.
    #[arg(long)]
    mi: bool,
    /// Enable translation-invariant gradient smoothing.
    #[arg(long)]
    ti: bool,
    /// Enable diverse-input resize and pad.
    #[arg(long)]
    di: bool,
    #[arg(long)]
    iters: Option<String>,
    /// Ball radius in /255 units.
    #[arg(long)]
    eps: Option<String>,
    /// Step size in /255 units.
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    n_images: Option<String>,
}

type Overrides = Vec<(&'static str, String)>;

fn push(out: &mut Overrides, key: &'static str, value: &Option<String>) {
    if let Some(v) = value {
        out.push((key, v.clone()));
    }
}

impl Common {
    fn overrides(&self, out: &mut Overrides) {
        push(out, "data", &self.data);
        push(out, "models", &self.models);
        push(out, "out", &self.out);
        push(out, "seed", &self.seed);
        push(out, "jobs", &self.jobs);
    }
}

impl AttackArgs {
    fn overrides(&self, out: &mut Overrides) {
        if self.mi || self.ti || self.di {
            out.push(("mi", self.mi.to_string()));
            out.push(("ti", self.ti.to_string()));
            out.push(("di", self.di.to_string()));
        }
        push(out, "iters", &self.iters);
        push(out, "eps", &self.eps);
        push(out, "alpha", &self.alpha);
        push(out, "lambda", &self.lambda);
        push(out, "gamma", &self.gamma);
        push(out, "n_images", &self.n_images);
    }
}

fn resolve(cli: Cli) -> Result<RunConfig, CliError> {
    let mut flags = Overrides::new();
    let common = match &cli.command {
        Cmd::Train {
            common,
            arch,
            epochs,
            batch_size,
            learning_rate,
        } => {
            flags.push(("command", "train".into()));
            push(&mut flags, "arch", arch);
            push(&mut flags, "epochs", epochs);
            push(&mut flags, "batch_size", batch_size);
            push(&mut flags, "learning_rate", learning_rate);
            common
        }
        Cmd::Attack {
            common,
            attack,
            source,
            targets,
            loss,
        } => {
            flags.push(("command", "attack".into()));
            attack.overrides(&mut flags);
            push(&mut flags, "source", source);
            push(&mut flags, "targets", targets);
            push(&mut flags, "loss", loss);
            common
        }
        Cmd::Suite {
            name,
            common,
            attack,
            losses,
            source,
            targets,
        } => {
            flags.push(("command", "suite".into()));
            flags.push(("suite", name.clone()));
            attack.overrides(&mut flags);
            push(&mut flags, "losses", losses);
            push(&mut flags, "source", source);
            push(&mut flags, "targets", targets);
            common
        }
        Cmd::Run { common } => {
            if common.config.is_none() {
                return Err(transfer_lab::Error::Usage("run needs --config".into()).into());
            }
            common
        }
    };
    common.overrides(&mut flags);

    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (k, v) in &flags {
        cfg.set_flag(k, v)?;
    }
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| transfer_lab::Error::Usage(format!("--set expects KEY=VALUE, got '{pair}'")))?;
        cfg.set_flag(k.trim(), v)?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let outcome = resolve(Cli::parse()).and_then(|cfg| execute(&cfg));
    match outcome {
        Ok(files) => {
            for f in files {
                log::info!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
