//! Operator surface for the fast-weight-programmer workbench.
//!
//! Exit codes are stable API: 0 ok, 2 config error, 3 numeric divergence,
//! 4 i/o error, 5 verification failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use srwm_core::episodes::Protocol;
use srwm_core::error::Error;

use config::RunConfig;

const USAGE: &str = "\
usage: srwm <command> [flags]

commands:
  train         train a model from a config file
  eval          evaluate a checkpoint (instance-level accuracy table)
  gradcheck     compare analytic gradients against finite differences
  gen-episodes  write sampled episodes in the dump format
  inspect       sigma(beta) statistics of a checkpoint

flags:
  --config PATH      run configuration file (train/eval/gen-episodes/inspect)
  --seed N           override [train] seed
  --threads N        override [train] threads (fixed pool size)
  --steps N          override [train] total_steps
  --protocol P       override [data] protocol (synchronous|delayed)
  --N n              override [data] n_ways
  --K k              override [data] k_shots
  --checkpoint PATH  checkpoint to load (eval/inspect) or resume from (train)
  --out-dir PATH     output directory (default: out)
  --episodes N       episode count for gen-episodes/inspect (default 10/50)
  --kind K           gradcheck layer kind (srwm|delta_net|fake_sr|sr_delta|all)
  --tolerance T      gradcheck tolerance (default 1e-5)
";

struct Flags {
    config: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
    steps: Option<u64>,
    protocol: Option<String>,
    n_ways: Option<usize>,
    k_shots: Option<usize>,
    checkpoint: Option<PathBuf>,
    out_dir: PathBuf,
    episodes: Option<usize>,
    kind: Option<String>,
    tolerance: f64,
}

fn parse_flags(args: &[String]) -> Result<Flags, Error> {
    let mut flags = Flags {
        config: None,
        seed: None,
        threads: None,
        steps: None,
        protocol: None,
        n_ways: None,
        k_shots: None,
        checkpoint: None,
        out_dir: PathBuf::from("out"),
        episodes: None,
        kind: None,
        tolerance: 1e-5,
    };
    let mut i = 0;
    let value = |i: &mut usize, name: &str| -> Result<String, Error> {
        *i += 1;
        args.get(*i)
            .cloned()
            .ok_or_else(|| Error::Config(format!("flag {name} needs a value")))
    };
    while i < args.len() {
        match args[i].as_str() {
            "--config" => flags.config = Some(PathBuf::from(value(&mut i, "--config")?)),
            "--seed" => {
                let v = value(&mut i, "--seed")?;
                flags.seed =
                    Some(v.parse().map_err(|_| Error::Config(format!("bad --seed `{v}`")))?);
            }
            "--threads" => {
                let v = value(&mut i, "--threads")?;
                flags.threads =
                    Some(v.parse().map_err(|_| Error::Config(format!("bad --threads `{v}`")))?);
            }
            "--steps" => {
                let v = value(&mut i, "--steps")?;
                flags.steps =
                    Some(v.parse().map_err(|_| Error::Config(format!("bad --steps `{v}`")))?);
            }
            "--protocol" => flags.protocol = Some(value(&mut i, "--protocol")?),
            "--N" => {
                let v = value(&mut i, "--N")?;
                flags.n_ways =
                    Some(v.parse().map_err(|_| Error::Config(format!("bad --N `{v}`")))?);
            }
            "--K" => {
                let v = value(&mut i, "--K")?;
                flags.k_shots =
                    Some(v.parse().map_err(|_| Error::Config(format!("bad --K `{v}`")))?);
            }
            "--checkpoint" => flags.checkpoint = Some(PathBuf::from(value(&mut i, "--checkpoint")?)),
            "--out-dir" => flags.out_dir = PathBuf::from(value(&mut i, "--out-dir")?),
            "--episodes" => {
                let v = value(&mut i, "--episodes")?;
                flags.episodes =
                    Some(v.parse().map_err(|_| Error::Config(format!("bad --episodes `{v}`")))?);
            }
            "--kind" => flags.kind = Some(value(&mut i, "--kind")?),
            "--tolerance" => {
                let v = value(&mut i, "--tolerance")?;
                flags.tolerance =
                    Some(v.parse().map_err(|_| Error::Config(format!("bad --tolerance `{v}`")))?)
                        .unwrap();
            }
            other => return Err(Error::Config(format!("unknown flag `{other}`"))),
        }
        i += 1;
    }
    Ok(flags)
}

fn load_config(flags: &Flags) -> Result<RunConfig, Error> {
    let path = flags
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = flags.seed {
        cfg.train.seed = seed;
    }
    if let Some(threads) = flags.threads {
        cfg.train.threads = threads;
    }
    if let Some(steps) = flags.steps {
        cfg.train.total_steps = steps;
    }
    if let Some(protocol) = &flags.protocol {
        cfg.protocol = Protocol::parse(protocol)?;
    }
    if let Some(n) = flags.n_ways {
        cfg.n_ways = n;
    }
    if let Some(k) = flags.k_shots {
        cfg.k_shots = k;
    }
    cfg.model_config().validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape { .. } | Error::ConfigHashMismatch { .. } => 2,
        Error::NonFinite { .. } | Error::Divergence { .. } | Error::TrainDiverged { .. } => 3,
        Error::Io(_) | Error::BadMagic { .. } | Error::Truncated { .. }
        | Error::FormatInconsistent(_) => 4,
    }
}

fn run() -> Result<u8, Error> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return Ok(2);
    };
    let flags = parse_flags(&args[1..])?;
    match command.as_str() {
        "train" => {
            let cfg = load_config(&flags)?;
            commands::cmd_train(&cfg, &flags.out_dir, flags.checkpoint.as_deref())?;
            Ok(0)
        }
        "eval" => {
            let cfg = load_config(&flags)?;
            let ckpt = flags
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
            commands::cmd_eval(&cfg, ckpt, &flags.out_dir)?;
            Ok(0)
        }
        "gradcheck" => {
            let seed = flags.seed.unwrap_or(3);
            let pass = commands::cmd_gradcheck(
                flags.kind.as_deref(),
                seed,
                flags.tolerance as srwm_core::Real,
            )?;
            Ok(if pass { 0 } else { 5 })
        }
        "gen-episodes" => {
            let cfg = load_config(&flags)?;
            commands::cmd_gen_episodes(&cfg, &flags.out_dir, flags.episodes.unwrap_or(10))?;
            Ok(0)
        }
        "inspect" => {
            let cfg = load_config(&flags)?;
            let ckpt = flags
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("inspect needs --checkpoint".into()))?;
            commands::cmd_inspect(&cfg, ckpt, flags.episodes.unwrap_or(50))?;
            Ok(0)
        }
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            Ok(0)
        }
        other => Err(Error::Config(format!("unknown command `{other}`"))),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
