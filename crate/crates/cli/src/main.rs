//! `smc`: phantom generation, agent pretraining and tuning, RD sweeps and
//! BD metrics from the command line.

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use smc_core::codec::{decode_frame, encode_sequence, frame_qp_schedule};
use smc_core::dataset::{gen_corpus, load_corpus, DatasetError, Domain};
use smc_core::eval::{
    anchor_sweep, baseline_sweep, bd_metric, policy_sweep, read_curve_csv, EvalError, HandcraftedKind, RdCurve,
};
use smc_core::policy::{ctu_action_to_offset, forward, frame_action_to_qp, greedy_action, ArchConfig, Checkpoint, PolicyError, PolicyNet};
use smc_core::training::{pretrain, PreparedSequence, TrainError};
use smc_core::tuning::{make_split, strategy_sweep, tune, write_sweep_csv, FewShotSplit, SweepConfig, TuneError, TuningStrategy};
use thiserror::Error;

use config::RunConfig;

pub const VERSION: &str = concat!("smc ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "smc", version, about = "Task-driven semantic compression toolkit")]
struct Cli {
    /// JSON run config merged over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted config override, e.g. `--set train.iterations=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a phantom corpus and merge it into DIR/manifest.json.
    GenData {
        #[arg(long)]
        domain: Domain,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both agents from scratch on a corpus domain.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "A")]
        domain: Domain,
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-shot tune a checkpoint with one strategy on a K:10:10 split.
    Tune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = strategy_parser())]
        strategy: String,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "B")]
        domain: Domain,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune every listed strategy and tabulate test-set BD against the anchor.
    Compare {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "B")]
        domain: Domain,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated strategy names; all eight when omitted.
        #[arg(long)]
        strategies: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy policy RD curve, one point per λ.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "B")]
        domain: Domain,
        /// Restrict to the test set of a split manifest.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Comma-separated λ values; `eval.lambdas` when omitted.
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flat-QP anchor RD curve.
    Anchor {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "B")]
        domain: Domain,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        qps: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hand-crafted mask-ratio QP maps, one curve per kind.
    Baseline {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "B")]
        domain: Domain,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "linear,exp,square,log,sqrt")]
        kinds: String,
        #[arg(long)]
        qps: Option<String>,
        #[arg(long)]
        span: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// BD-rate and BD-quality of a test curve against an anchor curve.
    Bd {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Only rows whose label starts with this prefix (baseline CSVs).
        #[arg(long)]
        test_prefix: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wall-clock of agent decisions, encoding and decoding per sequence.
    Bench {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 22)]
        qp_i: i32,
    },
    /// Print the command tree as JSON.
    Schema,
}

fn strategy_parser() -> clap::builder::PossibleValuesParser {
    clap::builder::PossibleValuesParser::new(TuningStrategy::names())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| CliError::Usage(format!("bad {what} '{s}': {e}"))))
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// Records the resolved config and tool version beside an output.
fn write_run_record(dir: &Path, command: &str, cfg: &RunConfig, args: serde_json::Value) -> Result<(), CliError> {
    let record = json!({ "version": VERSION, "command": command, "args": args, "config": cfg });
    write_json(&dir.join(format!("smc-run.{command}.json")), &record)
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_prepared(corpus: &Path, domain: Option<Domain>) -> Result<Vec<PreparedSequence>, CliError> {
    let seqs = load_corpus(corpus, domain)?;
    if seqs.is_empty() {
        return Err(CliError::Runtime(format!(
            "no sequences{} in {}",
            domain.map(|d| format!(" of domain {d}")).unwrap_or_default(),
            corpus.display()
        )));
    }
    Ok(seqs.into_iter().map(|(s, _)| PreparedSequence::new(s)).collect())
}

fn restrict(seqs: Vec<PreparedSequence>, split: Option<&Path>) -> Result<Vec<PreparedSequence>, CliError> {
    match split {
        None => Ok(seqs),
        Some(path) => {
            let raw = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            let split: FewShotSplit = serde_json::from_slice(&raw)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            Ok(split.resolve(&seqs)?.test)
        }
    }
}

fn write_curve(path: &Path, curve: &RdCurve) -> Result<(), CliError> {
    let mut w = create(path)?;
    curve
        .write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let ck = Checkpoint::load(path)?;
    ck.ensure_arch(&ArchConfig::frame_default(), &ArchConfig::ctu_default())?;
    Ok(ck)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.cmd {
        Cmd::GenData { domain, count, seed, out } => {
            let template = cfg.phantom(domain);
            let manifest = gen_corpus(count, &template, seed, &out)?;
            write_run_record(&out, "gen-data", &cfg, json!({ "domain": domain, "count": count, "seed": seed }))?;
            println!("wrote {count} {domain} sequences to {} ({} total)", out.display(), manifest.entries.len());
        }
        Cmd::Pretrain { corpus, domain, out } => {
            let seqs = load_prepared(&corpus, Some(domain))?;
            let log_path = out.with_extension("log.csv");
            let mut log = create(&log_path)?;
            let (ck, _) = pretrain(&seqs, &cfg.train, Some(&mut log))?;
            log.flush().map_err(|e| CliError::io(&log_path, e))?;
            ck.save(&out)?;
            write_run_record(&parent_dir(&out), "pretrain", &cfg, json!({ "corpus": corpus, "domain": domain, "out": out }))?;
            println!("checkpoint {} sha256 {}", out.display(), ck.digest());
        }
        Cmd::Tune { ckpt, strategy, corpus, domain, k, seed, out } => {
            let strategy: TuningStrategy = strategy.parse()?;
            let ck = load_checkpoint(&ckpt)?;
            let seqs = load_prepared(&corpus, Some(domain))?;
            let ids: Vec<String> = seqs.iter().map(|p| p.id().to_string()).collect();
            let split = make_split(&ids, k, seed)?;
            let data = split.resolve(&seqs)?;
            let mut tcfg = cfg.tune.clone();
            tcfg.train.seed = seed;
            let (tuned, report) = tune(&ck, strategy, &data, &tcfg)?;
            tuned.save(&out)?;
            write_json(&out.with_extension("split.json"), &split)?;
            write_json(&out.with_extension("report.json"), &report)?;
            write_run_record(
                &parent_dir(&out),
                "tune",
                &cfg,
                json!({ "ckpt": ckpt, "strategy": strategy, "corpus": corpus, "k": k, "seed": seed, "out": out }),
            )?;
            println!(
                "checkpoint {} sha256 {} trainable {} / {} ({:.4}%) best val reward {:.6} at iteration {}",
                out.display(),
                tuned.digest(),
                report.trainable_params,
                report.total_params,
                100.0 * report.trainable_fraction,
                report.best_val_reward,
                report.best_iteration
            );
        }
        Cmd::Compare { ckpt, corpus, domain, k, seed, strategies, out } => {
            let list: Vec<TuningStrategy> = match strategies {
                Some(s) => parse_list(&s, "strategy")?,
                None => TuningStrategy::ALL.to_vec(),
            };
            let ck = load_checkpoint(&ckpt)?;
            let seqs = load_prepared(&corpus, Some(domain))?;
            let ids: Vec<String> = seqs.iter().map(|p| p.id().to_string()).collect();
            let split = make_split(&ids, k, seed)?;
            let data = split.resolve(&seqs)?;
            let mut scfg = SweepConfig {
                tune: cfg.tune.clone(),
                lambdas: cfg.eval.lambdas.clone(),
                anchor_qps: cfg.eval.anchor_qps.clone(),
            };
            scfg.tune.train.seed = seed;
            let rows = strategy_sweep(&ck, &list, &data, &scfg)?;
            let mut w = create(&out)?;
            write_sweep_csv(&rows, &mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&out, e))?;
            write_json(&out.with_extension("split.json"), &split)?;
            write_run_record(&parent_dir(&out), "compare", &cfg, json!({ "ckpt": ckpt, "corpus": corpus, "k": k, "seed": seed, "strategies": list, "out": out }))?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Cmd::Sweep { ckpt, corpus, domain, split, lambdas, out } => {
            let lambdas = match lambdas {
                Some(s) => parse_list(&s, "lambda")?,
                None => cfg.eval.lambdas.clone(),
            };
            let ck = load_checkpoint(&ckpt)?;
            let seqs = restrict(load_prepared(&corpus, Some(domain))?, split.as_deref())?;
            let curve = policy_sweep(&ck, &seqs, &lambdas)?;
            write_curve(&out, &curve)?;
            write_run_record(&parent_dir(&out), "sweep", &cfg, json!({ "ckpt": ckpt, "corpus": corpus, "lambdas": lambdas, "out": out }))?;
            if !curve.usable_for_bd() {
                eprintln!("warning: {} distinct points; BD needs at least 4", curve.len());
            }
            println!("wrote {} points to {}", curve.len(), out.display());
        }
        Cmd::Anchor { corpus, domain, split, qps, out } => {
            let qps = match qps {
                Some(s) => parse_list(&s, "QP")?,
                None => cfg.eval.anchor_qps.clone(),
            };
            let seqs = restrict(load_prepared(&corpus, Some(domain))?, split.as_deref())?;
            let curve = anchor_sweep(&seqs, &qps)?;
            write_curve(&out, &curve)?;
            write_run_record(&parent_dir(&out), "anchor", &cfg, json!({ "corpus": corpus, "qps": qps, "out": out }))?;
            println!("wrote {} points to {}", curve.len(), out.display());
        }
        Cmd::Baseline { corpus, domain, split, kinds, qps, span, out } => {
            let kinds: Vec<HandcraftedKind> =
                parse_list(&kinds, "kind").map_err(|e| CliError::Usage(format!("{e}; valid: linear, exp, square, log, sqrt")))?;
            let qps = match qps {
                Some(s) => parse_list(&s, "QP")?,
                None => cfg.eval.anchor_qps.clone(),
            };
            let span = span.unwrap_or(cfg.eval.qp_span);
            let seqs = restrict(load_prepared(&corpus, Some(domain))?, split.as_deref())?;
            let curves = baseline_sweep(&seqs, &kinds, &qps, span)?;
            let mut w = create(&out)?;
            writeln!(w, "{}", smc_core::eval::RD_CSV_HEADER).map_err(|e| CliError::io(&out, e))?;
            for (_, c) in &curves {
                let body = c.to_csv();
                w.write_all(body.split_once('\n').map(|x| x.1).unwrap_or("").as_bytes())
                    .map_err(|e| CliError::io(&out, e))?;
            }
            w.flush().map_err(|e| CliError::io(&out, e))?;
            write_run_record(&parent_dir(&out), "baseline", &cfg, json!({ "corpus": corpus, "kinds": kinds, "qps": qps, "span": span, "out": out }))?;
            println!("wrote {} curves to {}", curves.len(), out.display());
        }
        Cmd::Bd { anchor, test, test_prefix, out } => {
            let read = |p: &Path, prefix: Option<&str>| -> Result<RdCurve, CliError> {
                let f = File::open(p).map_err(|e| CliError::io(p, e))?;
                Ok(read_curve_csv(BufReader::new(f), prefix)?)
            };
            let a = read(&anchor, None)?;
            let t = read(&test, test_prefix.as_deref())?;
            let bd = bd_metric(&a, &t)?;
            write_json(&out, &bd)?;
            write_run_record(&parent_dir(&out), "bd", &cfg, json!({ "anchor": anchor, "test": test, "test_prefix": test_prefix, "out": out }))?;
            println!("bd_rate {:.4}% bd_quality {:.6}", bd.bd_rate, bd.bd_quality);
        }
        Cmd::Bench { corpus, domain, ckpt, qp_i } => bench(&corpus, domain, ckpt.as_deref(), qp_i)?,
        Cmd::Schema => {
            let schema = command_schema(&Cli::command());
            println!("{}", serde_json::to_string_pretty(&schema).expect("serializable"));
        }
    }
    Ok(())
}

fn command_schema(cmd: &clap::Command) -> serde_json::Value {
    let args: Vec<serde_json::Value> = cmd
        .get_arguments()
        .filter(|a| a.get_id() != "help" && a.get_id() != "version")
        .map(|a| {
            json!({
                "name": a.get_id().as_str(),
                "long": a.get_long(),
                "required": a.is_required_set(),
                "help": a.get_help().map(|h| h.to_string()),
                "default": a.get_default_values().iter().map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>(),
                "values": a.get_possible_values().iter().map(|v| v.get_name().to_string()).collect::<Vec<_>>(),
            })
        })
        .collect();
    let subs: Vec<serde_json::Value> = cmd.get_subcommands().filter(|s| s.get_name() != "help").map(command_schema).collect();
    json!({
        "name": cmd.get_name(),
        "about": cmd.get_about().map(|a| a.to_string()),
        "args": args,
        "subcommands": subs,
    })
}

fn bench(corpus: &Path, domain: Option<Domain>, ckpt: Option<&Path>, qp_i: i32) -> Result<(), CliError> {
    let seqs = load_prepared(corpus, domain)?;
    let ck = match ckpt {
        Some(p) => load_checkpoint(p)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            Checkpoint {
                frame: PolicyNet::new(ArchConfig::frame_default(), &mut rng),
                ctu: PolicyNet::new(ArchConfig::ctu_default(), &mut rng),
                seed: 0,
                bpp_norm: 1.0,
            }
        }
    };
    let (mut t_agent, mut t_enc, mut t_dec) = (0.0, 0.0, 0.0);
    let mut frames = 0usize;
    for p in &seqs {
        let n = p.seq.len();
        let t = Instant::now();
        let (logits, _) = forward(&ck.frame, &p.frame_state(1.0), None)?;
        let _ = frame_action_to_qp(greedy_action(&logits)?.action);
        let qps = frame_qp_schedule(qp_i, n).map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut offsets = Vec::with_capacity(n);
        for (f, &fqp) in qps.iter().enumerate() {
            let l = &p.labels[f];
            let mut o = Vec::with_capacity(l.len());
            for c in 0..l.len() {
                let (s, label) = p.ctu_state(f, c, fqp);
                let (logits, _) = forward(&ck.ctu, &s, Some(label))?;
                o.push(ctu_action_to_offset(greedy_action(&logits)?.action));
            }
            offsets.push(smc_core::codec::CtuOffsets { grid_w: l.grid_w, grid_h: l.grid_h, offsets: o });
        }
        t_agent += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let (streams, recons, _) = encode_sequence(&p.seq, &qps, &offsets).map_err(|e| CliError::Runtime(e.to_string()))?;
        t_enc += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let mut prev = None;
        for (s, r) in streams.iter().zip(&recons) {
            let d = decode_frame(s, prev.as_ref()).map_err(|e| CliError::Runtime(e.to_string()))?;
            if &d != r {
                return Err(CliError::Runtime(format!("decoder mismatch in {}", p.id())));
            }
            prev = Some(d);
        }
        t_dec += t.elapsed().as_secs_f64();
        frames += n;
    }
    let k = seqs.len() as f64;
    let per_frame = |t: f64| 1e3 * t / frames as f64;
    println!("sequences {} frames {frames}", seqs.len());
    println!("stage,total_s,per_sequence_ms,per_frame_ms");
    for (name, t) in [("agent_decision", t_agent), ("encode", t_enc), ("decode", t_dec)] {
        println!("{name},{t:.4},{:.3},{:.3}", 1e3 * t / k, per_frame(t));
    }
    Ok(())
}
