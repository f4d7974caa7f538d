use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{gen_phantom, Domain, PhantomConfig};
use crate::policy::{forward, State};
use crate::semantics::CtuLabel;

fn phantom(seed: u64) -> PreparedSequence {
    let cfg = PhantomConfig {
        width: 64,
        height: 64,
        n_frames: 2,
        n_vessels: 1,
        ..PhantomConfig::defaults(Domain::B).with_seed(seed)
    };
    PreparedSequence::new(gen_phantom(&cfg).unwrap().0)
}

fn checkpoint(seed: u64) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Checkpoint {
        frame: PolicyNet::new(ArchConfig::frame_default(), &mut rng),
        ctu: PolicyNet::new(ArchConfig::ctu_default(), &mut rng),
        seed,
        bpp_norm: 0.4,
    }
}

fn data() -> SplitData {
    SplitData {
        train: vec![phantom(1)],
        val: vec![phantom(2), phantom(3)],
        test: vec![phantom(4), phantom(5)],
    }
}

fn quick(iterations: usize) -> TuneConfig {
    TuneConfig {
        train: TrainConfig {
            iterations,
            lr_frame: 1e-2,
            lr_ctu: 1e-2,
            seed: 9,
            ..TrainConfig::default()
        },
        eval_every: 2,
        val_lambdas: vec![1.0, 20.0],
    }
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("seq{i:03}")).collect()
}

fn tensor_map(net: &PolicyNet) -> BTreeMap<&'static str, (Group, Vec<f64>)> {
    net.tensors().into_iter().map(|t| (t.name, (t.group, t.data.to_vec()))).collect()
}

#[test]
fn strategy_group_table() {
    use Group::*;
    use TuningStrategy as S;
    let table: [(S, &[Group]); 8] = [
        (S::Pretrained, &[]),
        (S::TuneA2C, &[Actor, Critic]),
        (S::TuneA2CFc, &[Fc, Actor, Critic]),
        (S::TuneFull, &[Fe, Fc, Actor, Critic]),
        (S::TuneAdapterV1, &[AdapterV1]),
        (S::TuneAdapterV1A2C, &[Actor, Critic, AdapterV1]),
        (S::TuneAdapter, &[AdapterA, AdapterC]),
        (S::TuneAdapterCritic, &[Critic, AdapterA]),
    ];
    for (s, want) in table {
        let mut got = s.trainable_groups();
        got.sort();
        assert_eq!(got, want, "{s}");
        let (v1, a, c) = s.adapters();
        for (flag, g) in [(v1, AdapterV1), (a, AdapterA), (c, AdapterC)] {
            // every trained adapter is inserted
            if want.contains(&g) {
                assert!(flag, "{s} {g}");
            }
        }
    }
    assert_eq!(S::TuneAdapterCritic.adapters(), (false, true, false));
    assert_eq!(S::TuneAdapter.adapters(), (false, true, true));
}

#[test]
fn strategy_names() {
    for s in TuningStrategy::ALL {
        assert_eq!(s.name().parse::<TuningStrategy>().unwrap(), s);
        assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
    }
    let msg = "tune-everything".parse::<TuningStrategy>().unwrap_err().to_string();
    for name in TuningStrategy::names() {
        assert!(msg.contains(name), "{msg}");
    }
}

#[test]
fn split_sizes_and_determinism() {
    let s = make_split(&ids(21), 1, 3).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 10, 10));
    let mut all: Vec<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 21);
    assert_eq!(make_split(&ids(21), 1, 3).unwrap(), s);
    assert_ne!(make_split(&ids(21), 1, 4).unwrap(), s);

    let mut shuffled = ids(21);
    shuffled.reverse();
    assert_eq!(make_split(&shuffled, 1, 3).unwrap(), s);

    let s5 = make_split(&ids(30), 5, 0).unwrap();
    assert_eq!((s5.train.len(), s5.val.len(), s5.test.len()), (5, 10, 10));

    let json = serde_json::to_string(&s).unwrap();
    assert_eq!(serde_json::from_str::<FewShotSplit>(&json).unwrap(), s);
}

#[test]
fn split_errors() {
    assert!(matches!(
        make_split(&ids(24), 5, 0),
        Err(TuneError::CorpusTooSmall { needed: 25, got: 24, k: 5 })
    ));
    assert!(matches!(make_split(&ids(40), 2, 0), Err(TuneError::InvalidK(2))));
    let mut dup = ids(21);
    dup[3] = dup[4].clone();
    assert!(matches!(make_split(&dup, 1, 0), Err(TuneError::DuplicateId(_))));
    let split = make_split(&ids(21), 1, 0).unwrap();
    assert!(matches!(split.resolve(&[phantom(1)]), Err(TuneError::MissingSequence(_))));
}

#[test]
fn pretrained_is_byte_identical() {
    let ck = checkpoint(1);
    let (out, report) = tune(&ck, TuningStrategy::Pretrained, &data(), &quick(4)).unwrap();
    assert_eq!(out.to_bytes(), ck.to_bytes());
    assert_eq!(report.trainable_params, 0);
    assert_eq!(report.val_history.len(), 1);
}

#[test]
fn frozen_groups_are_conserved_for_every_strategy() {
    let ck = checkpoint(2);
    let d = data();
    let before = (tensor_map(&ck.frame), tensor_map(&ck.ctu));
    let mut counts = BTreeMap::new();
    for s in TuningStrategy::ALL {
        let (out, report) = tune(&ck, s, &d, &quick(4)).unwrap();
        let trained = s.trainable_groups();
        for (net, old) in [(&out.frame, &before.0), (&out.ctu, &before.1)] {
            for (name, (group, data)) in tensor_map(net) {
                if trained.contains(&group) {
                    continue;
                }
                match old.get(name) {
                    Some((_, orig)) => assert_eq!(&data, orig, "{s}: {name}"),
                    // a frozen adapter keeps its identity initialisation
                    None => assert!(group.is_adapter(), "{s}: {name}"),
                }
            }
        }
        counts.insert(s, report.trainable_params);
        assert_eq!(
            report.trainable_fraction,
            report.trainable_params as f64 / report.total_params as f64
        );
    }
    use TuningStrategy as S;
    assert!(counts[&S::TuneA2C] < counts[&S::TuneA2CFc]);
    assert!(counts[&S::TuneA2CFc] < counts[&S::TuneFull]);
    let frac = counts[&S::TuneA2C] as f64 / (ck.frame.param_count() + ck.ctu.param_count()) as f64;
    assert!(frac <= 0.05, "{frac}");
}

#[test]
fn best_on_validation_is_selected() {
    let ck = checkpoint(3);
    let (out, report) = tune(&ck, TuningStrategy::TuneA2C, &data(), &quick(5)).unwrap();
    assert_eq!(report.val_history.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 2, 4, 5]);
    let best = report.val_history.iter().map(|h| h.1).fold(f64::MIN, f64::max);
    assert_eq!(report.best_val_reward, best);
    let first = report.val_history.iter().find(|h| h.1 == best).unwrap().0;
    assert_eq!(report.best_iteration, first);
    if report.best_iteration > 0 {
        assert_ne!(out.frame.actor.w, ck.frame.actor.w);
    } else {
        assert_eq!(out.frame.actor.w, ck.frame.actor.w);
    }
    assert_eq!(out.bpp_norm, report.bpp_norm);
}

#[test]
fn adapter_strategies_start_at_pretrained_behaviour() {
    let ck = checkpoint(4);
    let d = data();
    let (_, base) = tune(&ck, TuningStrategy::Pretrained, &d, &quick(2)).unwrap();
    let (_, v1) = tune(&ck, TuningStrategy::TuneAdapterV1, &d, &quick(2)).unwrap();
    assert_eq!(v1.val_history[0].1, base.val_history[0].1);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for s in [
        TuningStrategy::TuneAdapterV1,
        TuningStrategy::TuneAdapterV1A2C,
        TuningStrategy::TuneAdapter,
        TuningStrategy::TuneAdapterCritic,
    ] {
        let mut f = ck.frame.clone();
        let mut c = ck.ctu.clone();
        s.prepare(&mut f, &mut rng);
        s.prepare(&mut c, &mut rng);
        for _ in 0..100 {
            let sf = State {
                planes: (0..f.arch.plane_len()).map(|_| rng.gen()).collect(),
                scalars: vec![],
            };
            assert_eq!(forward(&f, &sf, None).unwrap(), forward(&ck.frame, &sf, None).unwrap());
            let sc = State {
                planes: (0..c.arch.plane_len()).map(|_| rng.gen()).collect(),
                scalars: (0..c.arch.n_scalars).map(|_| rng.gen()).collect(),
            };
            let label = Some(CtuLabel::Background);
            assert_eq!(forward(&c, &sc, label).unwrap(), forward(&ck.ctu, &sc, label).unwrap());
        }
    }
}

#[test]
fn tuning_is_reproducible() {
    let ck = checkpoint(6);
    let d = data();
    for s in [TuningStrategy::TuneA2C, TuningStrategy::TuneAdapter] {
        let (a, ra) = tune(&ck, s, &d, &quick(4)).unwrap();
        let (b, rb) = tune(&ck, s, &d, &quick(4)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ra, rb);
    }
}

#[test]
fn tune_rejects_bad_inputs() {
    let ck = checkpoint(7);
    let mut cfg = quick(2);
    cfg.eval_every = 0;
    assert!(matches!(tune(&ck, TuningStrategy::TuneA2C, &data(), &cfg), Err(TuneError::InvalidConfig(_))));
    let mut empty = data();
    empty.train.clear();
    assert!(tune(&ck, TuningStrategy::TuneA2C, &empty, &quick(2)).is_err());
}

#[test]
fn sweep_of_pretrained_matches_direct_eval() {
    let ck = checkpoint(8);
    let d = data();
    let cfg = SweepConfig {
        tune: quick(2),
        lambdas: vec![0.0, 5.0, 100.0],
        anchor_qps: vec![17, 27, 37],
    };
    let rows = strategy_sweep(&ck, &[TuningStrategy::Pretrained], &d, &cfg).unwrap();
    assert_eq!(rows.len(), 1);
    let anchor = anchor_sweep(&d.test, &cfg.anchor_qps).unwrap();
    let curve = policy_sweep(&ck, &d.test, &cfg.lambdas).unwrap();
    match bd_metric(&anchor, &curve) {
        Ok(bd) => assert_eq!(rows[0].bd_rate_pct, Some(bd.bd_rate)),
        Err(_) => assert_eq!(rows[0].bd_rate_pct, None),
    }
    let mut out = Vec::new();
    write_sweep_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with(SWEEP_CSV_HEADER));
    assert_eq!(text.lines().count(), 2);

    let dup = [TuningStrategy::TuneA2C, TuningStrategy::TuneA2C];
    assert!(matches!(strategy_sweep(&ck, &dup, &d, &cfg), Err(TuneError::DuplicateStrategy(_))));
}

#[test]
fn sweep_rows_sort_by_bd_rate() {
    let row = |s, bd: Option<f64>| SweepRow {
        strategy: s,
        trainable_params: 0,
        trainable_fraction: 0.0,
        bd_rate_pct: bd,
        bd_quality: bd,
        val_reward: 0.0,
        seed: 0,
    };
    let rows = vec![
        row(TuningStrategy::Pretrained, None),
        row(TuningStrategy::TuneA2C, Some(-3.0)),
    ];
    assert_eq!(rows[0].csv(), "pretrained,0,0,,,0,0");
    assert_eq!(rows[1].csv(), "tune-a2c,0,0,-3,-3,0,0");
}
