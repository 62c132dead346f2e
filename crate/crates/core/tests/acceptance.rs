//! Acceptance run. Every check prints one line
//! `criterion N: PASS|FAIL <measurements> [seconds]` straight to stdout, so
//! the lines show up even when the harness captures test output.
//!
//! The desk pipeline (default configuration, run through the command layer)
//! is shared by criteria 2, 8, 9, 10 and 12 and is built once per process.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use lass::analysis::sparsity_sweep;
use lass::cli::{run_command, Command, RunDir};
use lass::config::ExperimentConfig;
use lass::corpus::{generate_corpus, temperature_probs, CorpusSet, GenerationSpec, LangPair, PairSampler};
use lass::evaluation::corpus_bleu;
use lass::mask::{
    intersection_count, is_maskable, magnitude_prune, random_mask, similarity, ParameterMask, PruneScope,
};
use lass::tensor::{grad_check, Checkpoint, ParamStore};
use lass::training::{lass_train, train_joint, TrainConfig};
use lass::transformer::{ModelConfig, TransformerModel};
use lass::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn report(n: u32, pass: bool, detail: String, elapsed: Duration, limit: Option<Duration>) {
    let in_time = limit.map_or(true, |l| elapsed <= l);
    let ok = pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" (limit {}s)", l.as_secs()));
    let line = format!(
        "criterion {n:>2}: {} {detail} [{:.1}s{budget}]\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "{}", line.trim_end());
}

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

struct Desk {
    dir: PathBuf,
    cfg: ExperimentConfig,
    /// Time spent on gen-data through evaluate.
    main: Duration,
    zero_shot: Duration,
}

const MAIN: [Command; 5] = [
    Command::GenData,
    Command::TrainBase,
    Command::MakeMasks,
    Command::LassTrain,
    Command::Evaluate,
];

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let dir = scratch("acceptance-desk");
        let cfg = ExperimentConfig::default();
        let mut log = std::io::stderr();
        let t = Instant::now();
        for cmd in MAIN {
            run_command(cmd, &cfg, &dir, false, &mut log).unwrap();
        }
        let main = t.elapsed();
        let t = Instant::now();
        run_command(Command::ZeroShot, &cfg, &dir, false, &mut log).unwrap();
        let zero_shot = t.elapsed();
        run_command(Command::Analyze, &cfg, &dir, false, &mut log).unwrap();
        Desk { dir, cfg, main, zero_shot }
    })
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn load_model(dir: &Path, phase: &str) -> TransformerModel<f32> {
    let (_, path) = RunDir::new(dir).find_checkpoint(phase).unwrap();
    TransformerModel::from_checkpoint(&Checkpoint::load(path).unwrap()).unwrap()
}

fn load_masks(dir: &Path) -> Vec<ParameterMask> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "mask"))
        .collect();
    paths.sort();
    paths.iter().map(|p| ParameterMask::load(p).unwrap()).collect()
}

#[test]
fn criterion_01_masked_update_is_bit_exact() {
    let t = Instant::now();
    let corpus = generate_corpus(&GenerationSpec::default()).unwrap();
    let cfg = ModelConfig { vocab_size: corpus.registry.vocab_size(), ..ModelConfig::default() };
    let theta0 = TransformerModel::<f32>::build(&cfg).unwrap();
    let pair: LangPair = "en-aa".parse().unwrap();
    let mask = random_mask(&theta0.params, 0.5, 17, pair.clone()).unwrap();
    let masks = lass::mask::MaskSet::from_masks([mask.clone()]).unwrap();
    let train = TrainConfig { max_steps: 2, eval_every: 0, patience: 0, ..TrainConfig::default() };
    let mut model = theta0.clone();
    lass_train(&mut model, &masks, &corpus, &[pair], &train, 0).unwrap();

    let before = Checkpoint::from_bytes(&theta0.to_checkpoint(&Default::default()).to_bytes().unwrap()).unwrap();
    let after = Checkpoint::from_bytes(&model.to_checkpoint(&Default::default()).to_bytes().unwrap()).unwrap();
    let a = TransformerModel::<f32>::from_checkpoint(&before).unwrap();
    let b = TransformerModel::<f32>::from_checkpoint(&after).unwrap();
    let (mut violations, mut changed) = (0usize, 0usize);
    for (x, y) in a.params.entries().iter().zip(b.params.entries()) {
        let bits = is_maskable(&x.name).then(|| mask.bits(&x.name).unwrap());
        for (i, (u, v)) in x.values.iter().zip(&y.values).enumerate() {
            if u.to_bits() != v.to_bits() {
                changed += 1;
                if bits.is_some_and(|b| !b.get(i)) {
                    violations += 1;
                }
            }
        }
    }
    report(
        1,
        violations == 0 && changed > 0,
        format!("{changed} values changed, {violations} of them under a 0 bit"),
        t.elapsed(),
        secs(10),
    );
}

#[test]
fn criterion_02_untouched_complement_after_desk_run() {
    let d = desk();
    let t = Instant::now();
    let theta0 = load_model(&d.dir, "base");
    let theta = load_model(&d.dir, "lass");
    let masks = load_masks(&d.dir.join("masks"));
    let (mut outside, mut moved) = (0usize, 0usize);
    for (x, y) in theta0.params.entries().iter().zip(theta.params.entries()) {
        if !is_maskable(&x.name) {
            continue;
        }
        let bits: Vec<_> = masks.iter().map(|m| m.bits(&x.name).unwrap()).collect();
        for i in 0..x.values.len() {
            if bits.iter().all(|b| !b.get(i)) {
                outside += 1;
                if x.values[i].to_bits() != y.values[i].to_bits() {
                    moved += 1;
                }
            }
        }
    }
    report(
        2,
        moved == 0 && outside > 0,
        format!("{outside} maskable values outside the union, {moved} differ from the base model"),
        t.elapsed() + d.main,
        None,
    );
}

#[test]
fn criterion_03_gradients_match_finite_differences() {
    let t = Instant::now();
    let corpus = generate_corpus(&GenerationSpec::default()).unwrap();
    let cfg = ModelConfig {
        vocab_size: corpus.registry.vocab_size(),
        dropout: 0.0,
        ..ModelConfig::default()
    };
    assert_eq!(cfg.num_layers, 2);
    let model = TransformerModel::<f64>::build(&cfg).unwrap();
    let pair: LangPair = "aa-en".parse().unwrap();
    let batch = lass::corpus::BatchStream::new(&corpus, &pair, 4, 5).unwrap().next_batch();
    let objective = |s: &ParamStore<f64>| {
        let m = TransformerModel::from_parts(cfg.clone(), s.clone())?;
        let (out, grads) = m.loss_and_grads(&batch, None)?;
        Ok((out.loss, grads))
    };
    let samples = 256;
    let err = grad_check(objective, &model.params, "aa-en/0", 1e-6, samples, 3).unwrap();
    report(
        3,
        err < 1e-4,
        format!("max relative error {err:.3e} over {samples} sampled parameters"),
        t.elapsed(),
        secs(60),
    );
}

/// Sort-based reference: order by (|w|, index) and keep the top
/// `round((1-α)·n)`.
fn oracle_keep(values: &[f32], alpha: f64) -> Vec<bool> {
    let n = values.len();
    let keep = ((1.0 - alpha) * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    let mut out = vec![false; n];
    for &i in &order[n - keep..] {
        out[i] = true;
    }
    out
}

#[test]
fn criterion_04_pruning_matches_sort_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut cases, mut mismatches, mut tie_cases) = (0usize, 0usize, 0usize);
    let pair: LangPair = "en-aa".parse().unwrap();
    let names = ["dec.0.ffn_1.weight".to_string(), "enc.0.ffn_1.weight".to_string()];
    let draw = |rng: &mut ChaCha8Rng, tied: bool| -> Vec<f32> {
        let n = rng.gen_range(1..200);
        (0..n)
            .map(|_| {
                if tied {
                    // few distinct magnitudes, both signs
                    let v = rng.gen_range(0..4) as f32 * 0.25;
                    if rng.gen() { v } else { -v }
                } else {
                    rng.gen_range(-1.0f32..1.0)
                }
            })
            .collect()
    };
    for k in 0..100 {
        let tensors = [draw(&mut rng, k % 2 == 0), draw(&mut rng, k % 3 == 0)];
        let all: Vec<f32> = tensors.concat();
        let distinct: BTreeSet<u32> = all.iter().map(|v| v.abs().to_bits()).collect();
        tie_cases += (distinct.len() < all.len()) as usize;
        let store = ParamStore::from_tensors(
            names.iter().zip(&tensors).map(|(n, v)| (n.clone(), vec![v.len()], v.clone())),
        )
        .unwrap();
        for a in 1..=9 {
            let alpha = a as f64 / 10.0;
            cases += 1;
            let per = magnitude_prune(&store, alpha, PruneScope::PerTensor, pair.clone()).unwrap();
            for (name, values) in names.iter().zip(&tensors) {
                let expect = oracle_keep(values, alpha);
                let bits = per.bits(name).unwrap();
                mismatches += (0..values.len()).any(|i| bits.get(i) != expect[i]) as usize;
            }
            let global = magnitude_prune(&store, alpha, PruneScope::Global, pair.clone()).unwrap();
            let expect = oracle_keep(&all, alpha);
            let got: Vec<bool> = names
                .iter()
                .zip(&tensors)
                .flat_map(|(name, v)| {
                    let bits = global.bits(name).unwrap();
                    (0..v.len()).map(move |i| bits.get(i))
                })
                .collect();
            mismatches += (got != expect) as usize;
        }
    }
    report(
        4,
        mismatches == 0,
        format!("{cases} store/rate cases, per-tensor and global ({tie_cases} stores with ties), {mismatches} mismatches"),
        t.elapsed(),
        secs(10),
    );
}

#[test]
fn criterion_05_similarity_identities() {
    let t = Instant::now();
    let n = 100_000;
    let store = ParamStore::from_tensors([("dec.0.ffn_2.weight".to_string(), vec![n], vec![0.5f32; n])]).unwrap();
    let pair: LangPair = "en-aa".parse().unwrap();
    let mut self_ok = true;
    let mut recip_ok = true;
    let mut worst_dev = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..8 {
        let (da, db) = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
        let a = random_mask(&store, da, 100 + k, pair.clone()).unwrap();
        let b = random_mask(&store, db, 200 + k, pair.clone()).unwrap();
        self_ok &= similarity(&a, &a).unwrap() == 1.0;
        let inter = intersection_count(&a, &b).unwrap() as f64;
        let ab = similarity(&a, &b).unwrap() * a.count_ones() as f64;
        let ba = similarity(&b, &a).unwrap() * b.count_ones() as f64;
        recip_ok &= ab.round() == inter && ba.round() == inter && (ab - ba).abs() <= 1e-9 * inter.max(1.0);
        // hypergeometric mean of |a∩b|/|a| is |b|/n
        let expected = b.count_ones() as f64 / n as f64;
        worst_dev = worst_dev.max((similarity(&a, &b).unwrap() - expected).abs());
    }
    report(
        5,
        self_ok && recip_ok && worst_dev <= 0.01,
        format!(
            "self-similarity {}, reciprocity {}, largest deviation from density {worst_dev:.4}",
            if self_ok { "1" } else { "not 1" },
            if recip_ok { "exact" } else { "broken" }
        ),
        t.elapsed(),
        secs(10),
    );
}

#[test]
fn criterion_06_temperature_sampling() {
    let t = Instant::now();
    let probs = temperature_probs(&[100, 900], 5.0).unwrap();
    let (a, b) = (0.1f64.powf(0.2), 0.9f64.powf(0.2));
    let closed = [a / (a + b), b / (a + b)];
    let err = probs.iter().zip(&closed).map(|(p, c)| (p - c).abs()).fold(0.0, f64::max);
    let pairs = vec![("en-aa".parse().unwrap(), 100), ("en-ab".parse().unwrap(), 900)];
    let mut sampler = PairSampler::new(pairs, 5.0, 6).unwrap();
    let draws = 100_000;
    let mut hits = [0usize; 2];
    for _ in 0..draws {
        hits[sampler.next_index()] += 1;
    }
    let emp_err = (0..2).map(|i| (hits[i] as f64 / draws as f64 - closed[i]).abs()).fold(0.0, f64::max);
    report(
        6,
        err <= 1e-12 && emp_err <= 0.01,
        format!(
            "p = [{:.6}, {:.6}], closed-form error {err:.1e}, histogram error {emp_err:.4}",
            probs[0], probs[1]
        ),
        t.elapsed(),
        secs(10),
    );
}

#[test]
fn criterion_07_bleu_oracle() {
    let t = Instant::now();
    let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let perfect = corpus_bleu(&[words("a b c d e f")], &[words("a b c d e f")]).unwrap();
    let bp = corpus_bleu(&[words("a b c d")], &[words("a b c d e")]).unwrap();
    let expected = 100.0 * (1.0f64 - 5.0 / 4.0).exp();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vocab: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    let sent = |rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..rng.gen_range(3..10)).map(|_| vocab[rng.gen_range(0..vocab.len())].clone()).collect()
    };
    let hyps: Vec<Vec<String>> = (0..30).map(|_| sent(&mut rng)).collect();
    let refs: Vec<Vec<String>> = (0..30).map(|_| sent(&mut rng)).collect();
    let base = corpus_bleu(&hyps, &refs).unwrap();
    let mut invariant = true;
    let mut idx: Vec<usize> = (0..30).collect();
    for _ in 0..100 {
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let h: Vec<_> = idx.iter().map(|&i| hyps[i].clone()).collect();
        let r: Vec<_> = idx.iter().map(|&i| refs[i].clone()).collect();
        invariant &= (corpus_bleu(&h, &r).unwrap() - base).abs() < 1e-9;
    }
    report(
        7,
        perfect == 100.0 && (bp - 77.88).abs() <= 0.01 && (bp - expected).abs() < 1e-9 && invariant,
        format!(
            "perfect {perfect:.2}, brevity example {bp:.4}, shuffles {}",
            if invariant { "invariant" } else { "changed the score" }
        ),
        t.elapsed(),
        secs(10),
    );
}

fn rich(report: &Value) -> f64 {
    report["tiers"]["rich"]["bleu"].as_f64().unwrap()
}

#[test]
fn criterion_08_lass_beats_baseline_and_random_falls_below() {
    let d = desk();
    let reports = d.dir.join("reports");
    let lass = json(&reports.join("eval.json"));
    let base = json(&reports.join(format!("eval_{}.json", d.cfg.baseline)));
    let random = json(&reports.join("eval_random.json"));
    let (l, b, r) = (rich(&lass), rich(&base), rich(&random));
    report(
        8,
        l > b && r < b,
        format!(
            "rich-tier BLEU lass {l:.3}, baseline {b:.3}, random {r:.3}; all pairs {:.3} / {:.3} / {:.3}; win ratio {:.1}%",
            lass["mean_bleu"].as_f64().unwrap(),
            base["mean_bleu"].as_f64().unwrap(),
            random["mean_bleu"].as_f64().unwrap(),
            lass["win_ratio"]["overall"].as_f64().unwrap()
        ),
        d.main,
        minutes(30),
    );
}

#[test]
fn criterion_09_zero_shot_direction() {
    let d = desk();
    let reports = d.dir.join("reports");
    let merged = json(&reports.join("zero_shot.json"));
    let base = json(&reports.join(format!("zero_shot_{}.json", d.cfg.baseline)));
    let swap = json(&reports.join("swap.json"));
    let (ma, ba) = (merged["mean_accuracy"].as_f64().unwrap(), base["mean_accuracy"].as_f64().unwrap());
    let enc = swap["mean_worst_encoder_swap_bleu"].as_f64().unwrap();
    let dec = swap["mean_worst_decoder_swap_bleu"].as_f64().unwrap();
    report(
        9,
        ma > ba && dec < enc,
        format!(
            "accuracy merged {ma:.2}% vs unmasked {ba:.2}%; BLEU merged {:.4} vs {:.4}; \
             worst swap BLEU decoder {dec:.3e} vs encoder {enc:.3e}",
            merged["mean_bleu"].as_f64().unwrap(),
            base["mean_bleu"].as_f64().unwrap()
        ),
        d.zero_shot,
        minutes(15),
    );
}

fn small_corpus(cfg: &ExperimentConfig) -> GenerationSpec {
    let mut spec = cfg.data.clone();
    for n in spec.sizes.values_mut() {
        *n /= 10;
    }
    spec
}

#[test]
fn criterion_10_mask_structure_direction() {
    let d = desk();
    let t = Instant::now();
    let analysis = json(&d.dir.join("reports/analysis.json"));
    let rho = analysis["spearman_pooled"].as_f64().unwrap();
    let alphas = [0.3, 0.5, 0.7];
    let cfg = &d.cfg;

    let large = CorpusSet::load_dir(d.dir.join("data")).unwrap();
    let theta0 = load_model(&d.dir, "base");
    let steps = cfg.train.max_steps;
    let sweep = |theta0: &TransformerModel<f32>, corpus: &CorpusSet| {
        let pairs = corpus.trained_pairs();
        sparsity_sweep(theta0, corpus, &pairs, &cfg.train, &alphas, steps, &cfg.decode, |_, _, _| Ok(())).unwrap()
    };
    let big = sweep(&theta0, &large);

    let small = generate_corpus(&small_corpus(cfg)).unwrap();
    let mcfg = ModelConfig { vocab_size: small.registry.vocab_size(), ..cfg.model.clone() };
    let mut small0 = TransformerModel::<f32>::build(&mcfg).unwrap();
    let pairs = small.trained_pairs();
    train_joint(&mut small0, &small, &pairs, &cfg.train).unwrap();
    let little = sweep(&small0, &small);

    let fmt = |r: &lass::analysis::SweepReport| {
        r.overall.iter().map(|(a, b)| format!("{a}:{b:.2}")).collect::<Vec<_>>().join(" ")
    };
    let (ab, al) = (big.best_alpha().unwrap(), little.best_alpha().unwrap());
    report(
        10,
        rho > 0.0 && ab <= al,
        format!(
            "Spearman {rho:.3}; best alpha large {ab} [{}], small {al} [{}]",
            fmt(&big),
            fmt(&little)
        ),
        t.elapsed(),
        minutes(45),
    );
}

#[test]
fn criterion_11_serialization_round_trips() {
    let t = Instant::now();
    let corpus = generate_corpus(&GenerationSpec::default()).unwrap();
    let cfg = ModelConfig { vocab_size: corpus.registry.vocab_size(), ..ModelConfig::default() };
    let model = TransformerModel::<f32>::build(&cfg).unwrap();
    let ckpt = model.to_checkpoint(&[("phase".to_string(), "base".to_string())].into_iter().collect());
    let bytes = ckpt.to_bytes().unwrap();
    let ckpt_ok = Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap() == bytes;

    let mask = magnitude_prune(&model.params, 0.3, PruneScope::PerTensor, "en-aa".parse().unwrap()).unwrap();
    let mbytes = mask.to_bytes().unwrap();
    let mask_ok = ParameterMask::from_bytes(&mbytes).unwrap().to_bytes().unwrap() == mbytes;

    let mut rejected = 0usize;
    let trials = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..trials {
        let mut bad = mbytes.clone();
        // payload bytes only: skip the 4-byte magic and the 4-byte checksum trailer
        let i = rng.gen_range(4..bad.len() - 4);
        bad[i] ^= 1 << rng.gen_range(0..8);
        if matches!(ParameterMask::from_bytes(&bad), Err(Error::Format { .. })) {
            rejected += 1;
        }
    }
    report(
        11,
        ckpt_ok && mask_ok && rejected == trials,
        format!(
            "checkpoint round trip {}, mask round trip {}, {rejected}/{trials} corrupted masks rejected",
            if ckpt_ok { "identical" } else { "differs" },
            if mask_ok { "identical" } else { "differs" }
        ),
        t.elapsed(),
        secs(5),
    );
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files_under(&p, out);
        } else {
            out.push(p);
        }
    }
}

#[test]
fn criterion_12_clean_room_rerun_is_byte_identical() {
    let d = desk();
    let t = Instant::now();
    let other = scratch("acceptance-rerun");
    let mut log = std::io::stderr();
    for cmd in &MAIN[..4] {
        run_command(*cmd, &d.cfg, &other, false, &mut log).unwrap();
    }
    let mut files = Vec::new();
    files_under(&d.dir.join("masks"), &mut files);
    files_under(&d.dir.join("ckpt"), &mut files);
    let mut differing = Vec::new();
    for f in &files {
        let rel = f.strip_prefix(&d.dir).unwrap();
        if fs::read(f).unwrap() != fs::read(other.join(rel)).unwrap_or_default() {
            differing.push(rel.display().to_string());
        }
    }
    let lass_ckpt = files.iter().any(|f| f.file_name().unwrap().to_string_lossy().starts_with("lass."));
    report(
        12,
        differing.is_empty() && lass_ckpt,
        format!("{} mask and checkpoint files compared, differing: {differing:?}", files.len()),
        t.elapsed(),
        Some(2 * d.main),
    );
}
