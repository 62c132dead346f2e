use super::*;
use crate::corpus::temperature_probs;
use crate::mask::is_maskable;
use crate::testutil::{tiny_corpus, tiny_model};

fn quick(steps: u64) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        batch_size: 8,
        eval_every: 0,
        patience: 0,
        sched: LrSchedule { base_lr: 3e-3, warmup_steps: 10 },
        finetune: FinetuneLadder([(1, 3), (30, 5)].into_iter().collect()),
        ..TrainConfig::default()
    }
}

fn changed_positions(a: &TransformerModel<f32>, b: &TransformerModel<f32>) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (x, y) in a.params.entries().iter().zip(b.params.entries()) {
        for (i, (u, v)) in x.values.iter().zip(&y.values).enumerate() {
            if u.to_bits() != v.to_bits() {
                out.push((x.name.clone(), i));
            }
        }
    }
    out
}

#[test]
fn ladder_buckets_and_parsing() {
    let l = FinetuneLadder::default();
    assert_eq!(l.steps_for(1).unwrap(), 100);
    assert_eq!(l.steps_for(100).unwrap(), 100);
    assert_eq!(l.steps_for(1000).unwrap(), 200);
    assert_eq!(l.steps_for(20000).unwrap(), 800);
    assert_eq!(FinetuneLadder::parse(&l.render()).unwrap(), l);
    assert!(FinetuneLadder::parse("1-100").is_err());
    assert!(FinetuneLadder([(5, 1)].into_iter().collect()).steps_for(2).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = TrainConfig { alpha: 1.0, ..TrainConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "mask.alpha"));
    assert!(TrainConfig { temperature: 0.5, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { max_steps: 0, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn masked_steps_only_touch_the_active_sub_network() {
    let corpus = tiny_corpus();
    let base = tiny_model(&corpus);
    let pairs = corpus.trained_pairs();
    let masks = random_masks(&base, &pairs, 0.5, 9).unwrap();
    let mut trainer = Trainer::new(&corpus, &pairs, &quick(10), Some(&masks), "continue", 0).unwrap();
    let mut model = base.clone();
    for _ in 0..2 {
        let before = model.clone();
        let (pair, _) = trainer.step(&mut model).unwrap();
        let mask = masks.get(&pair).unwrap();
        let changed = changed_positions(&before, &model);
        assert!(!changed.is_empty());
        for (name, i) in changed {
            if is_maskable(&name) {
                assert!(mask.bits(&name).unwrap().get(i), "{name}[{i}] moved outside {pair}");
            }
        }
    }
}

#[test]
fn parameters_outside_every_mask_never_move() {
    let corpus = tiny_corpus();
    let base = tiny_model(&corpus);
    let pairs = corpus.trained_pairs();
    let masks = random_masks(&base, &pairs, 0.8, 4).unwrap();
    let mut model = base.clone();
    lass_train(&mut model, &masks, &corpus, &pairs, &quick(12), 0).unwrap();
    let union = masks.union().unwrap();
    let mut outside = 0;
    for (x, y) in base.params.entries().iter().zip(model.params.entries()) {
        if let Some(bits) = union.get(&x.name) {
            for i in 0..x.values.len() {
                if !bits.get(i) {
                    outside += 1;
                    assert_eq!(x.values[i].to_bits(), y.values[i].to_bits());
                }
            }
        }
    }
    assert!(outside > 0);
}

#[test]
fn all_ones_masks_reproduce_the_unmasked_baseline() {
    let corpus = tiny_corpus();
    let base = tiny_model(&corpus);
    let pairs = corpus.trained_pairs();
    let ones = MaskSet::from_masks(pairs.iter().map(|p| ParameterMask::all_ones(&base.params, p.clone()))).unwrap();
    let mut a = base.clone();
    let mut b = base.clone();
    continue_joint(&mut a, &corpus, &pairs, &quick(6), 50).unwrap();
    lass_train(&mut b, &ones, &corpus, &pairs, &quick(6), 50).unwrap();
    assert!(a.params.values_bit_equal(&b.params));
    assert!(!a.params.values_bit_equal(&base.params));
}

#[test]
fn training_is_deterministic() {
    let corpus = tiny_corpus();
    let pairs = corpus.trained_pairs();
    let run = || {
        let mut m = tiny_model(&corpus);
        train_joint(&mut m, &corpus, &pairs, &quick(5)).unwrap();
        m
    };
    assert!(run().params.values_bit_equal(&run().params));
}

#[test]
fn zero_step_finetune_is_the_identity() {
    let corpus = tiny_corpus();
    let base = tiny_model(&corpus);
    let pair = LangPair::new("en", "aa");
    let tuned = finetune_pair(&base, &pair, &corpus, &quick(1), 0, 0).unwrap();
    assert!(tuned.params.values_bit_equal(&base.params));
    assert!(matches!(
        finetune_pair(&base, &LangPair::new("en", "zz"), &corpus, &quick(1), 1, 0),
        Err(Error::Lookup { .. })
    ));
}

#[test]
fn mask_finding_leaves_the_base_untouched_and_hits_the_density() {
    let corpus = tiny_corpus();
    let base = tiny_model(&corpus);
    let snapshot = base.clone();
    let pairs = corpus.trained_pairs();
    let masks = find_masks(&base, &pairs, &corpus, &quick(1), 0).unwrap();
    assert!(base.params.values_bit_equal(&snapshot.params));
    assert_eq!(masks.len(), pairs.len());
    for (_, m) in masks.iter() {
        for (name, bits) in m.tensors() {
            let n = bits.len();
            let want = ((1.0 - 0.3) * n as f64).round() as usize;
            assert_eq!(bits.count_ones(), want, "{name}");
        }
    }
    // the mask comes from the fine-tuned copy, not from θ_0
    let p = &pairs[0];
    let direct = magnitude_prune(&base.params, 0.3, PruneScope::PerTensor, p.clone()).unwrap();
    assert_ne!(masks.get(p).unwrap(), &direct);
}

#[test]
fn missing_masks_fail_before_training() {
    let corpus = tiny_corpus();
    let base = tiny_model(&corpus);
    let pairs = corpus.trained_pairs();
    let partial = random_masks(&base, &pairs[..1], 0.5, 1).unwrap();
    let mut m = base.clone();
    assert!(matches!(lass_train(&mut m, &partial, &corpus, &pairs, &quick(2), 0), Err(Error::Config { .. })));
    assert!(m.params.values_bit_equal(&base.params));
}

#[test]
fn pair_draws_follow_temperature_probabilities() {
    let corpus = tiny_corpus();
    let pairs = corpus.trained_pairs();
    let sizes: Vec<usize> = pairs.iter().map(|p| corpus.pair(p).unwrap().train.len()).collect();
    let exact = temperature_probs(&sizes, 5.0).unwrap();
    let sized = pairs.iter().cloned().zip(sizes).collect();
    let mut sampler = PairSampler::new(sized, 5.0, derive_seed(1, "continue/sampler")).unwrap();
    let n = 100_000;
    let mut hist = vec![0usize; pairs.len()];
    for _ in 0..n {
        hist[sampler.next_index()] += 1;
    }
    for (h, p) in hist.iter().zip(&exact) {
        assert!((*h as f64 / n as f64 - p).abs() < 0.01);
    }
}

#[test]
fn training_lowers_validation_loss_and_records_history() {
    let corpus = tiny_corpus();
    let pairs = corpus.trained_pairs();
    let mut m = tiny_model(&corpus);
    let before = validation_loss(&m, &corpus, &pairs, None, 16).unwrap();
    let cfg = TrainConfig { eval_every: 20, ..quick(60) };
    let out = train_joint(&mut m, &corpus, &pairs, &cfg).unwrap();
    let after = validation_loss(&m, &corpus, &pairs, None, 16).unwrap();
    let mean = |v: &BTreeMap<LangPair, f64>| v.values().sum::<f64>() / v.len() as f64;
    assert!(mean(&after) < mean(&before));
    assert_eq!(out.steps, 60);
    let valid_rows = out.history.iter().filter(|r| r.split == Split::Valid).count();
    assert_eq!(valid_rows, 3 * pairs.len());
    assert!(history_csv(&out.history).starts_with("step,pair,split,metric,value\n"));
}

#[test]
fn patience_stops_a_stalled_run() {
    let corpus = tiny_corpus();
    let pairs = corpus.trained_pairs();
    let mut m = tiny_model(&corpus);
    // a vanishing learning rate cannot improve validation loss measurably
    let cfg = TrainConfig {
        eval_every: 1,
        patience: 2,
        sched: LrSchedule { base_lr: 1e-30, warmup_steps: 1 },
        ..quick(50)
    };
    let out = train_joint(&mut m, &corpus, &pairs, &cfg).unwrap();
    assert!(out.stopped_early);
    assert!(out.steps < 50);
}

#[test]
fn extension_keeps_masked_out_weights_and_existing_scores() {
    let corpus = tiny_corpus();
    let base = tiny_model(&corpus);
    let existing = vec![LangPair::new("en", "aa"), LangPair::new("aa", "en")];
    let masks = random_masks(&base, &existing, 0.5, 3).unwrap();
    let new = LangPair::new("en", "ba");
    let cfg = quick(1);
    let idle = extend_new_pair(&base, &masks, &corpus, &new, &existing, &ExtendMode::Masked, &cfg, 0, 0).unwrap();
    assert!(idle.model.params.values_bit_equal(&base.params));
    assert_eq!(idle.trajectory.len(), 1);
    let run = extend_new_pair(&base, &masks, &corpus, &new, &existing, &ExtendMode::Masked, &cfg, 4, 0).unwrap();
    let mask = run.mask.as_ref().unwrap();
    for (name, i) in changed_positions(&base, &run.model) {
        if is_maskable(&name) {
            assert!(mask.bits(&name).unwrap().get(i));
        }
    }
    assert_eq!(run.trajectory.last().unwrap().step, 4);
    assert!(matches!(
        extend_new_pair(&base, &masks, &corpus, &existing[0], &existing, &ExtendMode::Unmasked, &cfg, 1, 0),
        Err(Error::Usage(_))
    ));
    let missing = LangPair::new("en", "qq");
    assert!(matches!(
        extend_new_pair(&base, &masks, &corpus, &missing, &existing, &ExtendMode::Unmasked, &cfg, 1, 0),
        Err(Error::Data(_))
    ));
}

#[test]
fn one_finetune_serves_every_pruning_rate() {
    let corpus = tiny_corpus();
    let base = tiny_model(&corpus);
    let pairs = corpus.trained_pairs();
    let tuned = finetune_all(&base, &pairs, &corpus, &quick(1), 0).unwrap();
    for alpha in [0.2, 0.6] {
        let cfg = TrainConfig { alpha, ..quick(1) };
        let direct = find_masks(&base, &pairs, &corpus, &cfg, 0).unwrap();
        assert_eq!(prune_all(&tuned, alpha, cfg.scope).unwrap().fingerprint(), direct.fingerprint());
    }
}
