//! Pipeline commands over a run directory:
//!
//! ```text
//! run_dir/
//!   config.resolved   every key with its value; the hash is on the first line
//!   data/             registry, manifest and bitext files
//!   ckpt/             {phase}.{step}.ckpt
//!   masks/            {pair}.mask, random/{pair}.mask, extend/{pair}.mask
//!   reports/          CSV and JSON outputs
//!   .stamps/          one file per finished command, holding the config hash
//!   .lock             present while a command runs
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{
    layer_component_profile, relatedness_correlation, similarity_matrix, sparsity_sweep, Grouping,
};
use crate::config::ExperimentConfig;
use crate::corpus::{generate_corpus, CorpusSet, LangPair, PairRole, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, swap_grid, EvalReport, MaskChoice, SwapGrid};
use crate::mask::{MaskSet, ParameterMask};
use crate::tensor::Checkpoint;
use crate::training::{
    continue_joint, extend_new_pair, find_masks, history_csv, lass_train, random_masks, train_joint,
    ExtendMode, TrainOutcome,
};
use crate::transformer::TransformerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainBase,
    MakeMasks,
    LassTrain,
    Evaluate,
    ZeroShot,
    Extend,
    Analyze,
    Sweep,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::GenData,
        Command::TrainBase,
        Command::MakeMasks,
        Command::LassTrain,
        Command::Evaluate,
        Command::ZeroShot,
        Command::Extend,
        Command::Analyze,
        Command::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainBase => "train-base",
            Command::MakeMasks => "make-masks",
            Command::LassTrain => "lass-train",
            Command::Evaluate => "evaluate",
            Command::ZeroShot => "zero-shot",
            Command::Extend => "extend",
            Command::Analyze => "analyze",
            Command::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown command `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    /// Already finished under the same configuration.
    UpToDate,
}

/// Removes the lock file when dropped.
struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct RunDir {
    root: PathBuf,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn mask_file(pair: &LangPair) -> String {
    format!("{pair}.mask")
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn ckpt(&self) -> PathBuf {
        self.root.join("ckpt")
    }
    pub fn masks(&self) -> PathBuf {
        self.root.join("masks")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    fn stamp(&self, cmd: Command) -> PathBuf {
        self.root.join(".stamps").join(cmd.name())
    }

    fn lock(&self) -> Result<Lock> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "{} is locked by another command; delete {} if that command is gone",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Hash recorded in `config.resolved`, if any.
    pub fn recorded_hash(&self) -> Result<Option<String>> {
        let path = self.root.join("config.resolved");
        match fs::read_to_string(&path) {
            Ok(text) => Ok(text
                .lines()
                .next()
                .and_then(|l| l.strip_prefix("# hash "))
                .map(|h| h.trim().to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    fn record_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        write(
            &self.root.join("config.resolved"),
            format!("# hash {}\n{}", cfg.hash(), cfg.render()),
        )
    }

    /// Latest `{phase}.{step}.ckpt`.
    pub fn find_checkpoint(&self, phase: &str) -> Option<(u64, PathBuf)> {
        let entries = fs::read_dir(self.ckpt()).ok()?;
        entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let step = name.strip_prefix(phase)?.strip_prefix('.')?.strip_suffix(".ckpt")?.parse().ok()?;
                Some((step, e.path()))
            })
            .max_by_key(|(s, _)| *s)
    }

    fn load_model(&self, phase: &str, command: &'static str) -> Result<(u64, TransformerModel<f32>)> {
        let (step, path) = self.find_checkpoint(phase).ok_or_else(|| Error::Prerequisite {
            what: format!("{phase} checkpoint"),
            command,
        })?;
        Ok((step, TransformerModel::from_checkpoint(&Checkpoint::load(path)?)?))
    }

    fn save_model(
        &self,
        phase: &str,
        step: u64,
        model: &TransformerModel<f32>,
        cfg: &ExperimentConfig,
    ) -> Result<PathBuf> {
        let dir = self.ckpt();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if let Ok(entries) = fs::read_dir(&dir) {
            for e in entries.filter_map(|e| e.ok()) {
                let name = e.file_name().to_string_lossy().to_string();
                if name.starts_with(&format!("{phase}.")) && name.ends_with(".ckpt") {
                    let _ = fs::remove_file(e.path());
                }
            }
        }
        let mut meta = BTreeMap::new();
        meta.insert("phase".to_string(), phase.to_string());
        meta.insert("train.steps".to_string(), step.to_string());
        meta.insert("config.hash".to_string(), cfg.hash());
        let path = dir.join(format!("{phase}.{step}.ckpt"));
        model.to_checkpoint(&meta).save(&path)?;
        Ok(path)
    }

    fn load_masks(&self, sub: &str) -> Result<MaskSet> {
        let dir = if sub.is_empty() { self.masks() } else { self.masks().join(sub) };
        let missing = || Error::Prerequisite {
            what: format!("masks in {}", dir.display()),
            command: "make-masks",
        };
        let entries = fs::read_dir(&dir).map_err(|_| missing())?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "mask"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(missing());
        }
        MaskSet::from_masks(paths.iter().map(ParameterMask::load).collect::<Result<Vec<_>>>()?)
    }

    fn save_masks(&self, sub: &str, masks: &MaskSet) -> Result<()> {
        let dir = if sub.is_empty() { self.masks() } else { self.masks().join(sub) };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (pair, m) in masks.iter() {
            m.save(dir.join(mask_file(pair)))?;
        }
        Ok(())
    }

    fn load_corpus(&self) -> Result<CorpusSet> {
        CorpusSet::load_dir(self.data())
    }

    fn report(&self, name: &str, text: impl AsRef<[u8]>) -> Result<()> {
        write(&self.reports().join(name), text)
    }
}

/// Runs one command against `run_dir`, writing progress notes to `log`.
pub fn run_command(
    cmd: Command,
    cfg: &ExperimentConfig,
    run_dir: &Path,
    force: bool,
    log: &mut dyn Write,
) -> Result<Outcome> {
    cfg.validate()?;
    let dir = RunDir::new(run_dir);
    let _lock = dir.lock()?;
    let hash = cfg.hash();
    match dir.recorded_hash()? {
        Some(h) if h != hash && !force => {
            return Err(Error::config(
                "config",
                format!(
                    "{} holds artifacts of configuration {h}, this one is {hash}; pass --force to overwrite",
                    run_dir.display()
                ),
            ))
        }
        Some(h) if h != hash => {
            let _ = fs::remove_dir_all(run_dir.join(".stamps"));
            dir.record_config(cfg)?;
        }
        Some(_) => {}
        None => dir.record_config(cfg)?,
    }
    let stamp = dir.stamp(cmd);
    if !force && fs::read_to_string(&stamp).is_ok_and(|s| s.trim() == hash) {
        let _ = writeln!(log, "{cmd}: already done for configuration {hash}; nothing to do");
        return Ok(Outcome::UpToDate);
    }
    let _ = writeln!(log, "{cmd}: running (configuration {hash})");
    match cmd {
        Command::GenData => gen_data(&dir, cfg, log)?,
        Command::TrainBase => train_base(&dir, cfg, log)?,
        Command::MakeMasks => make_masks(&dir, cfg, log)?,
        Command::LassTrain => lass_train_cmd(&dir, cfg, log)?,
        Command::Evaluate => evaluate_cmd(&dir, cfg, log)?,
        Command::ZeroShot => zero_shot(&dir, cfg, log)?,
        Command::Extend => extend(&dir, cfg, log)?,
        Command::Analyze => analyze(&dir, cfg, log)?,
        Command::Sweep => sweep(&dir, cfg, log)?,
    }
    write(&stamp, &hash)?;
    Ok(Outcome::Ran)
}

fn model_config(cfg: &ExperimentConfig, corpus: &CorpusSet) -> crate::transformer::ModelConfig {
    crate::transformer::ModelConfig {
        vocab_size: corpus.registry.vocab_size(),
        ..cfg.model.clone()
    }
}

fn gen_data(dir: &RunDir, cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let corpus = generate_corpus(&cfg.data)?;
    corpus.save_dir(dir.data())?;
    let _ = writeln!(
        log,
        "generated {} pairs over a vocabulary of {}",
        corpus.pairs.len(),
        corpus.registry.vocab_size()
    );
    Ok(())
}

/// Saves the last finite state under `{phase}.aborted.ckpt` before passing a
/// numerical error on.
fn guard(
    dir: &RunDir,
    phase: &str,
    model: &TransformerModel<f32>,
    result: Result<TrainOutcome>,
) -> Result<TrainOutcome> {
    if let Err(Error::Numerical(msg)) = &result {
        let path = dir.ckpt().join(format!("{phase}.aborted.ckpt"));
        fs::create_dir_all(dir.ckpt()).map_err(|e| Error::io(dir.ckpt(), e))?;
        model.to_checkpoint(&BTreeMap::new()).save(&path)?;
        return Err(Error::Numerical(format!("{msg}; last finite state saved to {}", path.display())));
    }
    result
}

fn train_base(dir: &RunDir, cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let corpus = dir.load_corpus()?;
    let mut model = TransformerModel::<f32>::build(&model_config(cfg, &corpus))?;
    let pairs = corpus.trained_pairs();
    let res = train_joint(&mut model, &corpus, &pairs, &cfg.train);
    let out = guard(dir, "base", &model, res)?;
    dir.save_model("base", out.steps, &model, cfg)?;
    dir.report("history_base.csv", history_csv(&out.history))?;
    let _ = writeln!(log, "base model trained for {} steps", out.steps);
    Ok(())
}

fn make_masks(dir: &RunDir, cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let corpus = dir.load_corpus()?;
    let (step, theta0) = dir.load_model("base", "train-base")?;
    let pairs = corpus.trained_pairs();
    let masks = find_masks(&theta0, &pairs, &corpus, &cfg.train, step)?;
    dir.save_masks("", &masks)?;
    if cfg.control_arms {
        dir.save_masks("random", &random_masks(&theta0, &pairs, cfg.train.alpha, cfg.random_seed)?)?;
    }
    let _ = writeln!(log, "{} masks at alpha {}", masks.len(), cfg.train.alpha);
    Ok(())
}

fn lass_train_cmd(dir: &RunDir, cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let corpus = dir.load_corpus()?;
    let (step, theta0) = dir.load_model("base", "train-base")?;
    let masks = dir.load_masks("")?;
    let pairs = corpus.trained_pairs();
    let mut arms: Vec<(&str, Option<MaskSet>)> = vec![("lass", Some(masks))];
    if cfg.control_arms {
        arms.push(("baseline", None));
        arms.push(("random", Some(dir.load_masks("random")?)));
    }
    for (phase, masks) in arms {
        let mut model = theta0.clone();
        let res = match &masks {
            Some(m) => lass_train(&mut model, m, &corpus, &pairs, &cfg.train, step),
            None => continue_joint(&mut model, &corpus, &pairs, &cfg.train, step),
        };
        let out = guard(dir, phase, &model, res)?;
        dir.save_model(phase, step + out.steps, &model, cfg)?;
        dir.report(&format!("history_{phase}.csv"), history_csv(&out.history))?;
        let _ = writeln!(log, "{phase}: {} steps from step {step}", out.steps);
    }
    Ok(())
}

fn checkpoint_label(dir: &RunDir, phase: &str) -> Result<String> {
    let (_, path) = dir.find_checkpoint(phase).ok_or_else(|| Error::Prerequisite {
        what: format!("{phase} checkpoint"),
        command: "lass-train",
    })?;
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
    Ok(format!("{name} sha256:{}", short_hash(&bytes)))
}

fn write_report(dir: &RunDir, stem: &str, report: &EvalReport) -> Result<()> {
    dir.report(&format!("{stem}.csv"), report.to_csv())?;
    dir.report(&format!("{stem}.json"), report.to_json())
}

fn evaluate_cmd(dir: &RunDir, cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let corpus = dir.load_corpus()?;
    let (_, model) = dir.load_model("lass", "lass-train")?;
    let masks = dir.load_masks("")?;
    let pairs = corpus.trained_pairs();
    let mut report = evaluate(&model, MaskChoice::Own(&masks), &corpus, &pairs, Split::Test, &cfg.decode)?;
    if !cfg.baseline.is_empty() {
        let (_, base) = dir.load_model(&cfg.baseline, "lass-train")?;
        let base_report = evaluate(&base, MaskChoice::None, &corpus, &pairs, Split::Test, &cfg.decode)?;
        let label = checkpoint_label(dir, &cfg.baseline)?;
        report.compare_with(&base_report, &label)?;
        write_report(dir, &format!("eval_{}", cfg.baseline), &base_report)?;
        if let (Some(_), Ok(rmasks)) = (dir.find_checkpoint("random"), dir.load_masks("random")) {
            let (_, rmodel) = dir.load_model("random", "lass-train")?;
            let mut r = evaluate(&rmodel, MaskChoice::Own(&rmasks), &corpus, &pairs, Split::Test, &cfg.decode)?;
            r.compare_with(&base_report, &label)?;
            write_report(dir, "eval_random", &r)?;
        }
        let _ = writeln!(
            log,
            "mean BLEU {:.2} against {:.2}; win ratio {:.1}",
            report.mean_bleu(),
            base_report.mean_bleu(),
            report.win_ratio.as_ref().map_or(0.0, |w| w.overall)
        );
    }
    write_report(dir, "eval", &report)?;
    Ok(())
}

#[derive(Serialize)]
struct SwapSummary {
    pairs: usize,
    mean_own_bleu: f64,
    mean_worst_encoder_swap_bleu: f64,
    mean_worst_decoder_swap_bleu: f64,
}

fn zero_shot(dir: &RunDir, cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let corpus = dir.load_corpus()?;
    let masks = dir.load_masks("")?;
    let (_, model) = dir.load_model("lass", "lass-train")?;
    let pairs = corpus.pairs_with_role(PairRole::ZeroShot);
    if pairs.is_empty() {
        return Err(Error::Data("the corpus has no zero-shot test directions".into()));
    }
    let mut report = evaluate(&model, MaskChoice::Merged(&masks), &corpus, &pairs, Split::Test, &cfg.decode)?;
    if !cfg.baseline.is_empty() {
        let (_, base) = dir.load_model(&cfg.baseline, "lass-train")?;
        let base_report = evaluate(&base, MaskChoice::None, &corpus, &pairs, Split::Test, &cfg.decode)?;
        report.compare_with(&base_report, &checkpoint_label(dir, &cfg.baseline)?)?;
        write_report(dir, &format!("zero_shot_{}", cfg.baseline), &base_report)?;
        let _ = writeln!(
            log,
            "zero-shot accuracy {:.1} against {:.1}",
            report.mean_accuracy(),
            base_report.mean_accuracy()
        );
    }
    write_report(dir, "zero_shot", &report)?;
    let grids: Vec<SwapGrid> =
        pairs.iter().map(|p| swap_grid(&model, &masks, &corpus, p, &cfg.decode)).collect::<Result<_>>()?;
    let mut csv = String::new();
    for (i, g) in grids.iter().enumerate() {
        let body = g.to_csv();
        csv.push_str(if i == 0 { &body } else { body.split_once('\n').map_or("", |x| x.1) });
    }
    dir.report("swap.csv", csv)?;
    let mean = |f: &dyn Fn(&SwapGrid) -> Option<f64>| {
        let v: Vec<f64> = grids.iter().filter_map(f).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let summary = SwapSummary {
        pairs: grids.len(),
        mean_own_bleu: mean(&|g| Some(g.own.bleu)),
        mean_worst_encoder_swap_bleu: mean(&|g| g.worst_encoder_bleu()),
        mean_worst_decoder_swap_bleu: mean(&|g| g.worst_decoder_bleu()),
    };
    dir.report("swap.json", serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(())
}

fn extend(dir: &RunDir, cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let corpus = dir.load_corpus()?;
    let masks = dir.load_masks("")?;
    let (step, model) = dir.load_model("lass", "lass-train")?;
    let new_pairs = corpus.pairs_with_role(PairRole::Extension);
    if new_pairs.is_empty() {
        return Err(Error::Data("the corpus has no extension pairs; set data.extension".into()));
    }
    let existing = corpus.trained_pairs();
    let mut arms = vec![cfg.extend_mode.clone()];
    if cfg.extend_mode != ExtendMode::Unmasked {
        arms.push(ExtendMode::Unmasked);
    }
    let mut csv = String::from("arm,pair,step,new_bleu,existing_bleu\n");
    for (k, mode) in arms.iter().enumerate() {
        let arm = match mode {
            ExtendMode::Masked => "masked".to_string(),
            ExtendMode::Unmasked => "unmasked".to_string(),
            ExtendMode::Donor(p) => format!("donor:{p}"),
        };
        let mut current = model.clone();
        let mut set = masks.clone();
        for pair in &new_pairs {
            let out = extend_new_pair(
                &current, &set, &corpus, pair, &existing, mode, &cfg.train, cfg.extend_steps, step,
            )?;
            for p in &out.trajectory {
                csv.push_str(&format!("{arm},{pair},{},{:.4},{:.4}\n", p.step, p.new_bleu, p.existing_bleu));
            }
            if let Some(m) = out.mask {
                set.insert(m)?;
            }
            current = out.model;
        }
        if k == 0 {
            let new_only = MaskSet::from_masks(
                new_pairs.iter().filter_map(|p| set.get(p).ok().cloned()).collect::<Vec<_>>(),
            );
            if let Ok(new_only) = new_only {
                if !new_only.is_empty() {
                    dir.save_masks("extend", &new_only)?;
                }
            }
            dir.save_model("extend", step + cfg.extend_steps * new_pairs.len() as u64, &current, cfg)?;
        }
        let _ = writeln!(log, "extension arm {arm} done");
    }
    dir.report("extend.csv", csv)?;
    Ok(())
}

#[derive(Serialize)]
struct AnalysisSummary {
    spearman_from_pivot: Option<f64>,
    spearman_to_pivot: Option<f64>,
    spearman_pooled: f64,
}

fn analyze(dir: &RunDir, _cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let corpus = dir.load_corpus()?;
    let masks = dir.load_masks("")?;
    let pivot = corpus.registry.pivot.clone();
    let mut mats = Vec::new();
    for g in Grouping::ALL {
        let m = similarity_matrix(&masks, g, &pivot)?;
        dir.report(&format!("similarity_{}.csv", g.tag()), m.to_csv())?;
        mats.push(m);
    }
    let rel = &corpus.relatedness;
    let single = |m| relatedness_correlation(&[m], rel, &pivot).ok();
    let summary = AnalysisSummary {
        spearman_from_pivot: single(&mats[0]),
        spearman_to_pivot: single(&mats[1]),
        spearman_pooled: relatedness_correlation(&[&mats[0], &mats[1]], rel, &pivot)?,
    };
    dir.report("profile.csv", layer_component_profile(&masks)?.to_csv())?;
    dir.report("analysis.json", serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    let _ = writeln!(log, "similarity/relatedness rank correlation {:.3}", summary.spearman_pooled);
    Ok(())
}

#[derive(Serialize)]
struct SweepSummary {
    overall: Vec<(f64, f64)>,
    best_alpha: Option<f64>,
}

fn sweep(dir: &RunDir, cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<()> {
    let corpus = dir.load_corpus()?;
    let (step, theta0) = dir.load_model("base", "train-base")?;
    let pairs = corpus.trained_pairs();
    let report = sparsity_sweep(&theta0, &corpus, &pairs, &cfg.train, &cfg.alphas, step, &cfg.decode, |a, r, partial| {
        dir.report("sweep.csv", partial.to_csv())?;
        let _ = writeln!(log, "alpha {a}: mean BLEU {:.2}", r.mean_bleu());
        Ok(())
    })?;
    let summary = SweepSummary {
        overall: report.overall.clone(),
        best_alpha: report.best_alpha(),
    };
    dir.report("sweep.json", serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(())
}
