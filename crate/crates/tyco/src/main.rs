use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tyco::commands;
use tyco::config::{Resolved, RunConfig};
use tyco::corpus;
use tyco::experiment::{self, Axis, Cache};
use tyco::selftest;
use tyco::{Error, Result};

/// Typology-aware conditioning for toy multilingual speech translation.
#[derive(Parser)]
#[command(name = "tyco", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train both stages; writes config.json, metrics.jsonl and checkpoint.bin.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint, or a hypothesis file, on a split.
    Eval {
        #[arg(long, required_unless_present = "hyps")]
        checkpoint: Option<PathBuf>,
        /// train, dev, test or a corpus file.
        #[arg(long, default_value = "test")]
        split: String,
        /// Hypotheses in corpus format, scored instead of decoding.
        #[arg(long, conflicts_with = "checkpoint")]
        hyps: Option<PathBuf>,
        /// Config that generates the reference split when scoring hypotheses.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model and ablated variants under the same seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated, e.g. dg,ti-hle,ta-prompt,morph,reorder,family,residual.
        #[arg(long)]
        axes: Option<String>,
        /// One seed or a comma-separated list.
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hierarchical versus flat language encoding on nested data budgets.
    Budget {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "0.1,0.5,1.0")]
        fractions: String,
        /// One seed or a comma-separated list.
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-frame gate values of a checkpoint as JSON Lines.
    InspectGate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        lang: Option<String>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the assembled prompt for a language.
    Prompt {
        #[arg(long)]
        lang: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the synthetic corpus as train/dev/test files.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle and gradient suites.
    Selftest,
}

fn resolve(path: Option<&PathBuf>) -> Result<Resolved> {
    let resolved = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_json("{}", "<defaults>")?,
    };
    for o in &resolved.overrides {
        eprintln!("override: {o}");
    }
    for w in &resolved.warnings {
        eprintln!("warning: {w}");
    }
    Ok(resolved)
}

fn seeds(arg: Option<&str>, config: &RunConfig) -> Result<Vec<u64>> {
    arg.map_or(Ok(vec![config.seed]), experiment::parse_seeds)
}

fn cache_for(config: &RunConfig) -> Cache {
    Cache::new(config.pretrain_cache.clone())
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Train { config, seed, out } => {
            let r = resolve(config.as_ref())?;
            let s = commands::train(&r, seed, out, &mut cache_for(&r.config), &mut progress)?;
            println!("trained {} steps on {} utterances; artifacts in {}", s.steps, s.train_utterances, s.out.display());
            if let Some(last) = s.last {
                println!("final total {:.4} ce {:.4} ctc_src {:.4} ctc_tgt {:.4}", last.total, last.ce, last.ctc_src, last.ctc_tgt);
            }
        }
        Cmd::Eval { checkpoint, split, hyps, config, out } => {
            let report = match (checkpoint, hyps) {
                (Some(ck), _) => commands::eval(&ck, &split, out.as_deref())?,
                (None, Some(h)) => {
                    let r = resolve(config.as_ref())?;
                    let setup = experiment::Setup::new(r.config)?;
                    let refs = commands::resolve_split(&setup, &split)?;
                    let report = commands::score_hypotheses(&refs, &corpus::read(&h)?)?;
                    if let Some(dir) = out {
                        std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                        let p = dir.join("eval_hyps.json");
                        std::fs::write(&p, commands::report_json(&report)).map_err(|e| Error::Io { path: p, source: e })?;
                    }
                    report
                }
                (None, None) => return Err(Error::Invalid("eval needs --checkpoint or --hyps".into())),
            };
            println!("{}", commands::report_json(&report));
        }
        Cmd::Ablate { config, axes, seed, out } => {
            let r = resolve(config.as_ref())?;
            let axes = axes.as_deref().map_or(Ok(Axis::ALL.to_vec()), experiment::parse_axes)?;
            let seeds = seeds(seed.as_deref(), &r.config)?;
            let table = commands::ablate(&r, &axes, &seeds, out, &mut cache_for(&r.config), &mut progress)?;
            print!("{}", table.render());
        }
        Cmd::Budget { config, fractions, seed, out } => {
            let r = resolve(config.as_ref())?;
            let fractions = experiment::parse_fractions(&fractions)?;
            let seeds = seeds(seed.as_deref(), &r.config)?;
            let records = commands::budget(&r, &fractions, &seeds, out, &mut cache_for(&r.config), &mut progress)?;
            print!("{}", commands::jsonl(&records));
            for (f, adv) in experiment::budget_advantages(&records) {
                println!("budget {f}: median flat − hierarchical token error {adv:+.4}");
            }
        }
        Cmd::InspectGate { checkpoint, split, lang, out } => {
            let records = commands::inspect_gate(&checkpoint, &split, lang.as_deref())?;
            let text = commands::jsonl(&records);
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })?,
                None => print!("{text}"),
            }
        }
        Cmd::Prompt { lang, config } => {
            let r = resolve(config.as_ref())?;
            let spec = commands::prompt(&r.config, &lang)?;
            if spec.fallback {
                eprintln!("warning: no template for `{lang}`; using the system instruction only");
            }
            println!("{}", spec.text);
        }
        Cmd::GenData { config, out } => {
            let r = resolve(config.as_ref())?;
            let [train, dev, test] = commands::gen_data(&r.config, &out)?;
            println!("wrote {train} train, {dev} dev and {test} test utterances to {}", out.display());
        }
        Cmd::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{}", c.line());
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
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
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
