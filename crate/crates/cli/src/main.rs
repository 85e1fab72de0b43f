//! `octopus`: data generation, evaluation, diagnostics and head training for
//! the synthetic contrastive-decoding testbed.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 data-integrity error,
//! 3 gradient check over threshold.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use octopus_core::cd::CdConfig;
use octopus_core::dpo::{replay_all, replay_pair, train_replayed, TrainConfig};
use octopus_core::exec::Execution;
use octopus_core::experiments::{
    analyze_enumerate, analyze_overlap, evaluate, grad_check_pair, write_report, EvalTask, Fingerprints, Policy,
    PolicySpec, TrainReport, ENUMERATION_CSV_HEADER, EVAL_CSV_HEADER, OVERLAP_CSV_HEADER,
};
use octopus_core::head::{init_head, load_checkpoint, save_checkpoint, HeadConfig};
use octopus_core::io::{read_to_string, write_atomic, write_json};
use octopus_core::preference::{
    build_preference_pairs, build_preference_pairs_from, dataset_rollouts, Criterion, PrefBuildConfig, PreferenceSet,
    Provenance, RolloutSet, DEFAULT_ROLLOUTS,
};
use octopus_core::sim::{ModelConfig, SimModel};
use octopus_core::world::{gen_dataset, CauseMix, Dataset, DatasetConfig, HallucinationCause};
use octopus_core::Error;

const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "octopus", version, about = "Adaptive contrastive decoding testbed")]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CauseArg {
    Mixed,
    None,
    Prior,
    Visloss,
    Attnbias,
}

impl CauseArg {
    fn mix(self) -> CauseMix {
        match self {
            CauseArg::Mixed => CauseMix::uniform(),
            CauseArg::None => CauseMix::only(HallucinationCause::None),
            CauseArg::Prior => CauseMix::only(HallucinationCause::Prior),
            CauseArg::Visloss => CauseMix::only(HallucinationCause::VisLoss),
            CauseArg::Attnbias => CauseMix::only(HallucinationCause::AttnBias),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a JSONL dataset of describe and exists samples.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n_describe: usize,
        #[arg(long)]
        n_exists: usize,
        #[arg(long)]
        out: PathBuf,
        /// Hallucination causes to draw scenes from.
        #[arg(long, value_enum, default_value = "mixed")]
        cause: CauseArg,
    },
    /// Decode a dataset under a policy and report metrics.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// base | fixed:s1|s2|s3 | random | octopus:CKPT
        #[arg(long)]
        policy: String,
        /// gen | disc
        #[arg(long)]
        task: String,
        #[arg(long)]
        report: PathBuf,
        /// Seed for the random policy.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Which fixed strategies improve each describe sample over base decoding.
    AnalyzeOverlap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Exhaustive strategy assignments over the first hallucinated mentions.
    AnalyzeEnumerate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        prefix_len: usize,
        #[arg(long)]
        report: PathBuf,
    },
    /// Random-workflow rollouts for every describe sample.
    Rollout {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_ROLLOUTS)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build preference pairs from rollouts (describe) and per-action answers (exists).
    BuildPrefs {
        #[arg(long)]
        data: PathBuf,
        /// Stored rollouts; generated from --seed when absent.
        #[arg(long)]
        rollouts: Option<PathBuf>,
        /// chair | cover | average
        #[arg(long, default_value = "chair")]
        criterion: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_ROLLOUTS)]
        count: usize,
        #[arg(long)]
        max_pairs: Option<usize>,
        /// Use every exists sample, not only those base decoding gets wrong.
        #[arg(long)]
        all_exists: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the strategy head on a preference file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prefs: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Loss report; defaults to the checkpoint path with a `.report.json` suffix.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences on one pair.
    Gradcheck {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prefs: PathBuf,
        /// Pair index; the pair with the fewest decoding steps by default.
        #[arg(long)]
        pair: Option<usize>,
        /// Checkpoint to check; a freshly initialized head otherwise.
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
    Threshold(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_integrity() { 2 } else { 1 })
        }
        Err(Failure::Threshold(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
    }
}

fn model() -> Result<SimModel, Error> {
    SimModel::new(ModelConfig::default())
}

fn load_dataset(path: &Path) -> Result<Dataset, Error> {
    Dataset::from_jsonl(&read_to_string(path)?)
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, Failure> {
    s.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

fn run(command: Command, exec: Execution) -> CliResult {
    let cd = CdConfig::default();
    match command {
        Command::GenData {
            seed,
            n_describe,
            n_exists,
            out,
            cause,
        } => {
            let cfg = DatasetConfig {
                n_describe,
                n_exists,
                cause_mix: cause.mix(),
            };
            let ds = gen_dataset(&cfg, seed)?;
            write_atomic(&out, ds.to_jsonl().as_bytes())?;
            eprintln!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Eval {
            data,
            policy,
            task,
            report,
            seed,
        } => {
            let spec: PolicySpec = parse(&policy)?;
            let task: EvalTask = parse(&task)?;
            let model = model()?;
            let ds = load_dataset(&data)?;
            let policy = Policy::resolve(&spec, &model, seed)?;
            let r = evaluate(&model, &ds, &policy, task, &cd, seed, exec)?;
            write_report(&report, &r, EVAL_CSV_HEADER, &[r.csv_row()])?;
            println!("{}", r.csv_row());
        }
        Command::AnalyzeOverlap { data, report } => {
            let model = model()?;
            let ds = load_dataset(&data)?;
            let r = analyze_overlap(&model, &ds, &cd, exec)?;
            write_report(&report, &r, OVERLAP_CSV_HEADER, &[r.csv_row()])?;
            println!("{}", r.csv_row());
        }
        Command::AnalyzeEnumerate {
            data,
            prefix_len,
            report,
        } => {
            let model = model()?;
            let ds = load_dataset(&data)?;
            let r = analyze_enumerate(&model, &ds, prefix_len, &cd, exec)?;
            let rows = r.csv_rows();
            write_report(&report, &r, ENUMERATION_CSV_HEADER, &rows)?;
            for row in rows {
                println!("{row}");
            }
        }
        Command::Rollout {
            data,
            seed,
            count,
            out,
        } => {
            let model = model()?;
            let ds = load_dataset(&data)?;
            let rollouts = dataset_rollouts(&model, &ds, count, seed, &cd, exec)?;
            let set = RolloutSet {
                provenance: provenance(&data, &ds, &model, seed),
                records: rollouts.iter().map(|r| r.record()).collect(),
            };
            write_atomic(&out, set.to_jsonl().as_bytes())?;
            eprintln!("wrote {} rollouts to {}", set.records.len(), out.display());
        }
        Command::BuildPrefs {
            data,
            rollouts,
            criterion,
            seed,
            count,
            max_pairs,
            all_exists,
            out,
        } => {
            let criterion: Criterion = parse(&criterion)?;
            let model = model()?;
            let ds = load_dataset(&data)?;
            let cfg = PrefBuildConfig {
                criterion,
                rollouts: count,
                seed,
                max_pairs,
                hallucinated_only: !all_exists,
                exec,
            };
            let (pairs, seed) = match rollouts {
                Some(path) => {
                    let set = RolloutSet::from_jsonl(&read_to_string(&path)?, &ds, model.prior())?;
                    if set.provenance.model_fingerprint != model.fingerprint() {
                        return Err(Error::DataIntegrity(format!(
                            "rollouts in {} were made with model {}, current model is {}",
                            path.display(),
                            set.provenance.model_fingerprint,
                            model.fingerprint()
                        ))
                        .into());
                    }
                    let seed = set.provenance.seed;
                    (build_preference_pairs_from(&model, &ds, &set, &cd, &cfg)?, seed)
                }
                None => (build_preference_pairs(&model, &ds, &cd, &cfg)?, seed),
            };
            if pairs.is_empty() {
                return Err(Failure::Usage("no preference pairs could be built from this dataset".into()));
            }
            let set = PreferenceSet {
                provenance: provenance(&data, &ds, &model, seed),
                pairs,
            };
            write_atomic(&out, set.to_jsonl().as_bytes())?;
            eprintln!("wrote {} pairs to {}", set.len(), out.display());
        }
        Command::Train {
            data,
            prefs,
            seed,
            epochs,
            lr,
            beta,
            batch_size,
            out,
            report,
        } => {
            let model = model()?;
            let ds = load_dataset(&data)?;
            let set = PreferenceSet::from_jsonl(&read_to_string(&prefs)?)?;
            let cfg = TrainConfig {
                beta,
                lr,
                epochs,
                batch_size,
                seed,
                exec,
                ..TrainConfig::default()
            };
            cfg.validate()?;
            let replayed = replay_all(&model, &ds, &set, &cd, exec)?;
            let head_config = HeadConfig::default();
            let mut head = init_head(head_config, seed)?;
            let loss = train_replayed(&mut head, &replayed, &cfg)?;
            save_checkpoint(&head, Some(&model.fingerprint()), &out)?;
            let mut fingerprints = Fingerprints::new(&ds, &model, &cd);
            fingerprints.head = Some(head.fingerprint());
            let r = TrainReport {
                experiment: "train".into(),
                config: cfg,
                head_config,
                fingerprints,
                preferences: set.provenance,
                loss,
            };
            let report = report.unwrap_or_else(|| suffixed(&out, ".report.json"));
            write_json(&report, &r)?;
            if let Some(l) = r.loss.epoch_losses.last() {
                println!("trained on {} pairs, final epoch loss {l:.6}", r.loss.pairs);
            }
        }
        Command::Gradcheck {
            data,
            prefs,
            pair,
            head,
            seed,
            step,
            beta,
            report,
        } => {
            let model = model()?;
            let ds = load_dataset(&data)?;
            let set = PreferenceSet::from_jsonl(&read_to_string(&prefs)?)?;
            octopus_core::dpo::check_provenance(&model, &ds, &set)?;
            let pair = pair.unwrap_or_else(|| shortest_pair(&set));
            let p = set
                .pairs
                .get(pair)
                .ok_or_else(|| Failure::Usage(format!("pair index {pair} out of range ({} pairs)", set.len())))?;
            let replayed = replay_pair(&model, &ds, p, &cd)?;
            let params = match head {
                Some(path) => load_checkpoint(&path)?.params,
                None => init_head(HeadConfig::default(), seed)?,
            };
            let r = grad_check_pair(&params, &replayed, pair, beta, step, GRADCHECK_THRESHOLD)?;
            if let Some(path) = report {
                write_json(&path, &r)?;
            }
            println!(
                "head max relative error {:.3e}, pair loss max relative error {:.3e}",
                r.head.max_relative_error, r.dpo.max_relative_error
            );
            if !r.passed {
                return Err(Failure::Threshold(format!(
                    "gradient check failed: max relative error {:.3e} >= {GRADCHECK_THRESHOLD:e}",
                    r.max_relative_error
                )));
            }
        }
    }
    Ok(())
}

fn provenance(data: &Path, ds: &Dataset, model: &SimModel, seed: u64) -> Provenance {
    Provenance {
        dataset: data.display().to_string(),
        dataset_fingerprint: ds.fingerprint(),
        model_fingerprint: model.fingerprint(),
        seed,
    }
}

fn shortest_pair(set: &PreferenceSet) -> usize {
    (0..set.len())
        .min_by_key(|&i| set.pairs[i].pos.actions.len() + set.pairs[i].neg.actions.len())
        .unwrap_or(0)
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
