//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use octopus_core::cd::{
    contrast, contrast_mn, decode_base, decode_with, decode_with_policy, run_workflow, step_logits, Action, CdConfig,
    Workflow,
};
use octopus_core::dpo::{dpo_loss, grad_check, replay_pair, train_replayed, ReplayedPair, TrainConfig};
use octopus_core::exec::Execution;
use octopus_core::experiments::{analyze_enumerate, analyze_overlap, evaluate, EvalTask, Policy};
use octopus_core::head::{head_grad_check, init_head, load_checkpoint, save_checkpoint, HeadConfig, HeadParams};
use octopus_core::metrics::GenMetrics;
use octopus_core::preference::{build_preference_pairs, Criterion, PrefBuildConfig, PreferenceSet, Provenance};
use octopus_core::rng::RngState;
use octopus_core::sim::{distorted_stream, hallucination_margin, ModelConfig, SimModel};
use octopus_core::tensor::{argmax, softmax, Matrix};
use octopus_core::world::{gen_dataset, CauseMix, Dataset, DatasetConfig, HallucinationCause, Token};

const TRAIN_SEED: u64 = 1001;
const TEST_SEED: u64 = 2002;
const MIXED_SEED: u64 = 0;
const PAIRS: usize = 2000;
/// Learning rate for the generative runs. At the default 1e-3 the chair head
/// settles on always picking s2 after about 5000 steps.
const GEN_LR: f64 = 1e-4;

type Outcome = Result<String, String>;
/// Name, time budget in seconds, check.
type Entry = (&'static str, u64, fn() -> Outcome);

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn model() -> SimModel {
    SimModel::new(ModelConfig::default()).unwrap()
}

fn cd() -> CdConfig {
    CdConfig::default()
}

fn exec() -> Execution {
    Execution::default()
}

fn matched(cause: HallucinationCause) -> Action {
    match cause {
        HallucinationCause::Prior => Action::S1,
        HallucinationCause::VisLoss => Action::S2,
        HallucinationCause::AttnBias => Action::S3,
        HallucinationCause::None => unreachable!("no strategy targets clean scenes"),
    }
}

fn a1_algebra() -> Outcome {
    let mut rng = RngState::new(1, "acceptance-a1");
    for _ in 0..200 {
        let x = rng.gaussian(32, 3.0);
        let c = rng.gaussian(1, 10.0)[0];
        let p = softmax(&x).unwrap();
        check((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "softmax does not sum to 1")?;
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let q = softmax(&shifted).unwrap();
        check(p.iter().zip(&q).all(|(a, b)| (a - b).abs() <= 1e-12), "softmax not shift invariant")?;
        check(argmax(&x) == argmax(&shifted), "argmax not shift invariant")?;

        let b = rng.gaussian(32, 1.0);
        let d1 = rng.gaussian(32, 1.0);
        let d2 = rng.gaussian(32, 1.0);
        let (m, n) = (2.0, 1.0);
        let sum_b: Vec<f64> = b.iter().zip(&x).map(|(u, v)| u + v).collect();
        let sum_d: Vec<f64> = d1.iter().zip(&d2).map(|(u, v)| u + v).collect();
        let lhs = contrast_mn(&sum_b, &sum_d, m, n).unwrap();
        let r1 = contrast_mn(&b, &d1, m, n).unwrap();
        let r2 = contrast_mn(&x, &d2, m, n).unwrap();
        check(
            lhs.iter().zip(r1.iter().zip(&r2)).all(|(l, (u, v))| (l - (u + v)).abs() <= 1e-12),
            "contrast is not linear",
        )?;
        check(contrast_mn(&b, &d1, 1.0, 0.0).unwrap() == b, "alpha = 0 is not the identity")?;
        check(contrast(&b, &b, &cd()).unwrap() == b, "contrast of a stream with itself is not the stream")?;
    }
    let m = model();
    let ds = gen_dataset(&DatasetConfig { n_describe: 20, n_exists: 20, cause_mix: CauseMix::uniform() }, 3).unwrap();
    for s in &ds.samples {
        let history = m.prompt_history(s);
        let bundle = m.logits(s, &history).unwrap();
        check(step_logits(&m, s, &history, Action::Null, &cd()).unwrap() == bundle.base, "null action is not base")?;
        let base = decode_base(&m, s, &cd()).unwrap();
        let null = run_workflow(&m, s, &Workflow::constant(Action::Null, m.max_steps(s)), &cd()).unwrap();
        check(null.generated == base.generated, "all-null workflow differs from base decoding")?;
    }
    Ok("softmax, contrast, argmax and null-action identities hold exactly".into())
}

fn first_slot_margins(m: &SimModel, ds: &Dataset, action: Action) -> Vec<(f64, f64)> {
    ds.samples
        .iter()
        .map(|s| {
            let bundle = m.logits(s, &[Token::BOS, Token::A]).unwrap();
            let base = hallucination_margin(&bundle.base, &s.scene);
            let cd = contrast(&bundle.base, distorted_stream(&bundle, action).unwrap(), &cd()).unwrap();
            (base, hallucination_margin(&cd, &s.scene))
        })
        .collect()
}

fn hal(m: &SimModel, ds: &Dataset, policy: Policy) -> GenMetrics {
    evaluate(m, ds, &policy, EvalTask::Gen, &cd(), 0, exec()).unwrap().gen.unwrap()
}

fn a2_testbed() -> Outcome {
    let m = model();
    let clean = gen_dataset(&DatasetConfig::describe(200, CauseMix::only(HallucinationCause::None)), 11).unwrap();
    let clean_chair = hal(&m, &clean, Policy::Base).chair_i;
    check(clean_chair == 0.0, format!("cause-None base chair_i = {clean_chair}"))?;
    let mut detail = Vec::new();
    for cause in [HallucinationCause::Prior, HallucinationCause::VisLoss, HallucinationCause::AttnBias] {
        let ds = gen_dataset(&DatasetConfig::describe(200, CauseMix::only(cause)), 12).unwrap();
        let a = matched(cause);
        let reduced = first_slot_margins(&m, &ds, a).iter().filter(|(b, c)| c < b).count();
        check(reduced >= 180, format!("{}: margin reduced on {reduced}/200", cause.name()))?;
        let base = hal(&m, &ds, Policy::Base).hal;
        let ours = hal(&m, &ds, Policy::Fixed(a)).hal;
        check(
            ours <= 0.7 * base,
            format!("{}: matched Hal {ours:.3} vs base {base:.3}", cause.name()),
        )?;
        for other in Action::STRATEGIES.into_iter().filter(|o| *o != a) {
            let theirs = hal(&m, &ds, Policy::Fixed(other)).hal;
            check(
                base - theirs < base - ours,
                format!("{}: {} reduces Hal as much as {}", cause.name(), other, a),
            )?;
        }
        detail.push(format!("{} margin {reduced}/200, Hal {base:.3}->{ours:.3}", cause.name()));
    }
    Ok(detail.join("; "))
}

fn mixed_set() -> &'static Dataset {
    static SET: OnceLock<Dataset> = OnceLock::new();
    SET.get_or_init(|| gen_dataset(&DatasetConfig::describe(600, CauseMix::uniform()), MIXED_SEED).unwrap())
}

fn a3_overlap() -> Outcome {
    let r = analyze_overlap(&model(), mixed_set(), &cd(), exec()).unwrap();
    let f = r.fractions;
    check(f.exactly_one >= 0.40, format!("exactly-one {:.3}", f.exactly_one))?;
    check(f.all_three <= 0.15, format!("all-three {:.3}", f.all_three))?;
    Ok(format!("exactly-one {:.3}, all-three {:.3}", f.exactly_one, f.all_three))
}

fn a4_enumerate() -> Outcome {
    let r = analyze_enumerate(&model(), mixed_set(), 3, &cd(), exec()).unwrap();
    let (all, pair, single, base) = (r.best_all_three, r.best_pair, r.best_single, r.base);
    check(all.chair <= pair.chair && pair.chair <= single.chair && single.chair <= base.chair, "chair not monotone")?;
    check(all.hal <= 0.8 * base.hal && all.hal < base.hal, format!("Hal {:.3} vs base {:.3}", all.hal, base.hal))?;
    Ok(format!(
        "chair {:.4} <= {:.4} <= {:.4} <= {:.4}; Hal {:.3} vs base {:.3}",
        all.chair, pair.chair, single.chair, base.chair, all.hal, base.hal
    ))
}

fn perturbed_head(seed: u64, std: f64) -> HeadParams {
    let mut head = init_head(HeadConfig::default(), seed).unwrap();
    let noise = RngState::new(seed, "perturb").gaussian(head.len(), std);
    for (v, e) in head.values_mut().iter_mut().zip(noise) {
        *v += e;
    }
    head
}

fn a5_gradients() -> Outcome {
    let m = model();
    let ds = gen_dataset(&DatasetConfig::exists(30, CauseMix::uniform()), 21).unwrap();
    let pairs = build_preference_pairs(&m, &ds, &cd(), &PrefBuildConfig::default()).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let head = perturbed_head(seed, 0.1);
        let pair = replay_pair(&m, &ds, &pairs[seed as usize], &cd()).unwrap();
        let dpo = grad_check(&head, &pair, 1.0, 1e-5).unwrap();
        let hidden = Matrix::from_vec(4, 32, RngState::new(seed, "hid").gaussian(128, 1.0)).unwrap();
        let fwd = head_grad_check(&head, &hidden, 1e-5).unwrap();
        for r in [dpo, fwd] {
            check(r.passes(1e-5), format!("seed {seed}: {r:?}"))?;
            worst = worst.max(r.max_relative_error);
        }
    }
    Ok(format!("worst max relative error {worst:.2e} over 3 seeds"))
}

fn replayed(m: &SimModel, ds: &Dataset, pairs: &[octopus_core::preference::PreferencePair]) -> Vec<ReplayedPair> {
    exec()
        .map(pairs, |p| replay_pair(m, ds, p, &cd()))
        .into_iter()
        .collect::<Result<_, _>>()
        .unwrap()
}

fn a6_dpo() -> Outcome {
    let gap = (dpo_loss(-7.25, -7.25, 1.0) - std::f64::consts::LN_2).abs();
    check(gap <= 1e-12, format!("indifference loss off by {gap:e}"))?;
    let m = model();
    let ds = gen_dataset(&DatasetConfig::describe(6, CauseMix::uniform()), 22).unwrap();
    let pairs = build_preference_pairs(&m, &ds, &cd(), &PrefBuildConfig::default()).unwrap();
    let one = replayed(&m, &ds, &pairs[..1]);
    let mut head = init_head(HeadConfig::default(), 0).unwrap();
    let cfg = TrainConfig { epochs: 200, batch_size: 1, ..TrainConfig::default() };
    let r = train_replayed(&mut head, &one, &cfg).unwrap();
    let steps = r.step_losses.iter().position(|l| *l < 0.05).map(|i| i + 1);
    check(steps.is_some(), format!("final loss {:?}", r.step_losses.last()))?;
    let all = replayed(&m, &ds, &pairs);
    let train = || {
        let mut h = init_head(HeadConfig::default(), 5).unwrap();
        let cfg = TrainConfig { epochs: 3, seed: 5, ..TrainConfig::default() };
        let rep = train_replayed(&mut h, &all, &cfg).unwrap();
        (h, rep)
    };
    let (h1, r1) = train();
    let (h2, r2) = train();
    let bits = |h: &HeadParams| h.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check(bits(&h1) == bits(&h2) && r1 == r2, "training is not bit-deterministic")?;
    Ok(format!("ln 2 within {gap:.0e}; overfit below 0.05 after {} steps; deterministic", steps.unwrap()))
}

struct GenRun {
    chair_i: f64,
    cover: f64,
    pairs: usize,
}

/// Describe samples needed for `PAIRS` untied pairs. Most rollouts cover
/// every object, so cover ties far more often than chair.
fn train_size(criterion: Criterion) -> usize {
    match criterion {
        Criterion::Cover => 70_000,
        _ => 4000,
    }
}

/// Trains on `PAIRS` describe pairs under `criterion` and evaluates on the
/// held-out mixed set.
fn gen_run(criterion: Criterion) -> GenRun {
    let m = model();
    let train = gen_dataset(&DatasetConfig::describe(train_size(criterion), CauseMix::uniform()), TRAIN_SEED).unwrap();
    let cfg = PrefBuildConfig { criterion, max_pairs: Some(PAIRS), ..PrefBuildConfig::default() };
    let pairs = build_preference_pairs(&m, &train, &cd(), &cfg).unwrap();
    assert_eq!(pairs.len(), PAIRS, "not enough {criterion} pairs");
    let rp = replayed(&m, &train, &pairs);
    let mut head = init_head(HeadConfig::default(), 0).unwrap();
    train_replayed(&mut head, &rp, &TrainConfig { lr: GEN_LR, ..TrainConfig::default() }).unwrap();
    let g = hal(&m, test_gen(), Policy::Octopus(Box::new(head)));
    GenRun { chair_i: g.chair_i, cover: g.cover, pairs: pairs.len() }
}

fn test_gen() -> &'static Dataset {
    static SET: OnceLock<Dataset> = OnceLock::new();
    SET.get_or_init(|| gen_dataset(&DatasetConfig::describe(600, CauseMix::uniform()), TEST_SEED).unwrap())
}

fn chair_run() -> &'static GenRun {
    static RUN: OnceLock<GenRun> = OnceLock::new();
    RUN.get_or_init(|| gen_run(Criterion::Chair))
}

fn a7_generative() -> Outcome {
    let m = model();
    let test = test_gen();
    let base = hal(&m, test, Policy::Base).chair_i;
    let random = hal(&m, test, Policy::Random { seed: 0 }).chair_i;
    let ours = chair_run().chair_i;
    check(ours <= 0.75 * base, format!("octopus {ours:.4} vs base {base:.4}"))?;
    let mut fixed = Vec::new();
    for a in Action::STRATEGIES {
        let c = hal(&m, test, Policy::Fixed(a)).chair_i;
        check(ours <= c, format!("octopus {ours:.4} vs fixed:{a} {c:.4}"))?;
        fixed.push(format!("{a} {c:.4}"));
    }
    check(ours < random, format!("octopus {ours:.4} vs random {random:.4}"))?;
    Ok(format!(
        "chair_i octopus {ours:.4}, base {base:.4}, random {random:.4}, {}",
        fixed.join(", ")
    ))
}

fn a8_discriminative() -> Outcome {
    let m = model();
    let train = gen_dataset(&DatasetConfig::exists(12000, CauseMix::uniform()), TRAIN_SEED).unwrap();
    let test = gen_dataset(&DatasetConfig::exists(600, CauseMix::uniform()), TEST_SEED).unwrap();
    let cfg = PrefBuildConfig { hallucinated_only: true, max_pairs: Some(PAIRS), ..PrefBuildConfig::default() };
    let pairs = build_preference_pairs(&m, &train, &cd(), &cfg).unwrap();
    let rp = replayed(&m, &train, &pairs);
    let mut head = init_head(HeadConfig::default(), 0).unwrap();
    train_replayed(&mut head, &rp, &TrainConfig::default()).unwrap();
    let acc = |p: Policy| evaluate(&m, &test, &p, EvalTask::Disc, &cd(), 0, exec()).unwrap().disc.unwrap().accuracy;
    let ours = acc(Policy::Octopus(Box::new(head)));
    let base = acc(Policy::Base);
    check(ours >= base + 0.03, format!("octopus {ours:.4} vs base {base:.4}"))?;
    let mut fixed = Vec::new();
    for a in Action::STRATEGIES {
        let f = acc(Policy::Fixed(a));
        check(ours >= f, format!("octopus {ours:.4} vs fixed:{a} {f:.4}"))?;
        fixed.push(format!("{a} {f:.4}"));
    }
    Ok(format!("accuracy octopus {ours:.4}, base {base:.4}, {} ({} pairs)", fixed.join(", "), pairs.len()))
}

fn a9_criteria() -> Outcome {
    let chair = chair_run();
    let cover = gen_run(Criterion::Cover);
    let avg = gen_run(Criterion::Average);
    check(
        cover.cover >= chair.cover,
        format!("cover-trained cover {:.4} < chair-trained {:.4}", cover.cover, chair.cover),
    )?;
    let within = |v: f64, a: f64, b: f64| a.min(b) <= v && v <= a.max(b);
    check(
        within(avg.chair_i, chair.chair_i, cover.chair_i) && within(avg.cover, chair.cover, cover.cover),
        format!(
            "average ({:.4}, {:.4}) outside chair ({:.4}, {:.4}) / cover ({:.4}, {:.4})",
            avg.chair_i, avg.cover, chair.chair_i, chair.cover, cover.chair_i, cover.cover
        ),
    )?;
    Ok(format!(
        "(chair_i, cover, pairs): chair ({:.4}, {:.4}, {}), cover ({:.4}, {:.4}, {}), average ({:.4}, {:.4}, {})",
        chair.chair_i, chair.cover, chair.pairs, cover.chair_i, cover.cover, cover.pairs, avg.chair_i, avg.cover, avg.pairs
    ))
}

/// Dataset, preference file and checkpoint bytes from seeds alone.
fn pipeline_bytes(dir: &std::path::Path, tag: &str) -> Vec<Vec<u8>> {
    let m = model();
    let ds = gen_dataset(&DatasetConfig { n_describe: 10, n_exists: 30, cause_mix: CauseMix::uniform() }, 41).unwrap();
    let pairs = build_preference_pairs(&m, &ds, &cd(), &PrefBuildConfig { seed: 42, ..PrefBuildConfig::default() }).unwrap();
    let set = PreferenceSet {
        provenance: Provenance {
            dataset: "data.jsonl".into(),
            dataset_fingerprint: ds.fingerprint(),
            model_fingerprint: m.fingerprint(),
            seed: 42,
        },
        pairs,
    };
    let rp = replayed(&m, &ds, &set.pairs);
    let mut head = init_head(HeadConfig::default(), 43).unwrap();
    train_replayed(&mut head, &rp, &TrainConfig { epochs: 2, seed: 43, ..TrainConfig::default() }).unwrap();
    let path = dir.join(format!("{tag}.json"));
    save_checkpoint(&head, Some(&m.fingerprint()), &path).unwrap();
    vec![ds.to_jsonl().into_bytes(), set.to_jsonl().into_bytes(), std::fs::read(path).unwrap()]
}

fn a10_replay() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let m = model();
    let head = perturbed_head(7, 0.2);
    let path = dir.path().join("h.json");
    save_checkpoint(&head, Some(&m.fingerprint()), &path).unwrap();
    let back = load_checkpoint(&path).unwrap().params;
    let bits = |h: &HeadParams| h.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check(bits(&back) == bits(&head) && back.config() == head.config(), "checkpoint roundtrip is not bit-exact")?;

    let ds = gen_dataset(&DatasetConfig { n_describe: 15, n_exists: 15, cause_mix: CauseMix::uniform() }, 44).unwrap();
    for s in &ds.samples {
        let (d, _) = decode_with_policy(&m, s, &back, &cd()).unwrap();
        let again = run_workflow(&m, s, &d.workflow(), &cd()).unwrap();
        check(again.generated == d.generated, format!("sample {} does not replay", s.id))?;
        let stepwise = decode_with(&m, s, &cd(), |t, _| Ok(d.actions[t])).unwrap();
        check(stepwise.generated == d.generated, format!("sample {} does not replay stepwise", s.id))?;
    }
    let a = pipeline_bytes(dir.path(), "a");
    let b = pipeline_bytes(dir.path(), "b");
    check(a == b, "pipeline artifacts differ between runs")?;
    Ok(format!(
        "checkpoint bit-exact; {} decodes replay; {} artifact bytes identical",
        ds.len(),
        a.iter().map(Vec::len).sum::<usize>()
    ))
}

fn main() {
    let criteria: [Entry; 10] = [
        ("A1", 5, a1_algebra),
        ("A2", 60, a2_testbed),
        ("A3", 120, a3_overlap),
        ("A4", 300, a4_enumerate),
        ("A5", 30, a5_gradients),
        ("A6", 60, a6_dpo),
        ("A7", 900, a7_generative),
        ("A8", 300, a8_discriminative),
        ("A9", 1200, a9_criteria),
        ("A10", 60, a10_replay),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == name) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > Duration::from_secs(budget) => Err(format!("{d}; over the {budget}s budget")),
            o => o,
        };
        match outcome {
            Ok(d) => println!("{name} PASS [{:.1}s / {budget}s] {d}", took.as_secs_f64()),
            Err(d) => {
                failed += 1;
                println!("{name} FAIL [{:.1}s / {budget}s] {d}", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
