//! Config-driven experiment stages: corpus synthesis, ASV training, attack
//! set generation, MCS hyperparameter search, LMD training, evaluation, and
//! report emission. Stages communicate only through files under the output
//! directory and record their artifacts (with content digests) in a run
//! manifest, so any stage can be re-run or resumed in isolation.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asv::{self, AsvModel, AsvTrainConfig, FeatureConfig};
use crate::attack::{self, AdvSet, AttackConfig, AttackGrid};
use crate::ckpt::Checkpoint;
use crate::config::{ConfigError, ExperimentConfig};
use crate::corpus::{self, Corpus, TrialList, TrialRole, TrialSets, UttId};
use crate::detect::{self, DetectorKind, LmdModel, LmdTrainConfig, McsVariant};
use crate::metrics::{self, BudgetRule, VariationOrigin, VariationSet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Asv(#[from] crate::asv::AsvError),
    #[error(transparent)]
    Attack(#[from] crate::attack::AttackError),
    #[error(transparent)]
    Detect(#[from] Box<crate::detect::DetectError>),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error(transparent)]
    Ckpt(#[from] crate::ckpt::CkptError),
    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: String, stage: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("malformed artifact {path}: {detail}")]
    BadArtifact { path: String, detail: String },
}

impl From<crate::detect::DetectError> for PipelineError {
    fn from(e: crate::detect::DetectError) -> Self {
        PipelineError::Detect(Box::new(e))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Run manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub seconds: f64,
    pub artifacts: Vec<ArtifactRecord>,
}

/// Persistent record of a run: config snapshot, tool version, and per-stage
/// artifact digests. Identical configs reproduce identical digests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    pub fn load_or_new(cfg: &ExperimentConfig) -> Result<RunManifest, PipelineError> {
        let path = Self::path(&cfg.out_dir);
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let mut m: RunManifest = serde_json::from_str(&text)
                .map_err(|e| PipelineError::Manifest(e.to_string()))?;
            m.config = cfg.clone();
            Ok(m)
        } else {
            Ok(RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config: cfg.clone(),
                stages: BTreeMap::new(),
            })
        }
    }

    pub fn load(out_dir: &Path) -> Result<RunManifest, PipelineError> {
        let path = Self::path(out_dir);
        if !path.exists() {
            return Err(PipelineError::MissingArtifact {
                path: path.display().to_string(),
                stage: "synth".into(),
            });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Manifest(e.to_string()))
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
        let path = Self::path(out_dir);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| PipelineError::Manifest(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    fn record(
        &mut self,
        out_dir: &Path,
        stage: &str,
        seed: u64,
        started: Instant,
        files: &[PathBuf],
    ) -> Result<(), PipelineError> {
        let mut artifacts = Vec::new();
        for f in files {
            artifacts.push(ArtifactRecord {
                path: f
                    .strip_prefix(out_dir)
                    .unwrap_or(f)
                    .display()
                    .to_string(),
                sha256: file_digest(f)?,
            });
        }
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        self.stages.insert(
            stage.to_string(),
            StageRecord { seed, seconds: started.elapsed().as_secs_f64(), artifacts },
        );
        self.save(out_dir)
    }
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

fn collect_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| io_err(&d, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| io_err(&d, e))?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn require(path: &Path, stage: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact {
            path: path.display().to_string(),
            stage: stage.to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Shared artifact plumbing

fn corpus_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("corpus")
}

fn trials_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("trials")
}

fn write_utt_list(path: &Path, utts: &[UttId]) -> Result<(), PipelineError> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    for u in utts {
        writeln!(f, "{u}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn read_utt_list(path: &Path) -> Result<Vec<UttId>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            UttId::from_rel_path(&format!("{l}.wav")).ok_or_else(|| PipelineError::BadArtifact {
                path: path.display().to_string(),
                detail: format!("bad utterance id `{l}`"),
            })
        })
        .collect()
}

/// Rebuild the in-memory corpus and trial sets backing a run. The waveforms
/// regenerate exactly from the recorded seed (the WAV directory is the
/// inspectable export); trial lists and utterance pools come from the files
/// the synth stage wrote.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<(Corpus, TrialSets), PipelineError> {
    let td = trials_dir(cfg);
    require(&td.join("attack.txt"), "synth")?;
    let corpus = Corpus::synthesize(
        cfg.stage_seed("synth", 0),
        cfg.corpus.n_speakers,
        cfg.corpus.utts_per_speaker,
        cfg.corpus.duration_s,
    )?;
    let sets = TrialSets {
        attack: corpus::read_trial_list(&td.join("attack.txt"), TrialRole::Attack)?,
        eval: corpus::read_trial_list(&td.join("eval.txt"), TrialRole::Eval)?,
        train: corpus::read_trial_list(&td.join("train.txt"), TrialRole::AsvTrain)?,
        validation: corpus::read_trial_list(
            &td.join("validation.txt"),
            TrialRole::AsvValidation,
        )?,
        train_utts: read_utt_list(&td.join("train_utts.txt"))?,
        validation_utts: read_utt_list(&td.join("validation_utts.txt"))?,
    };
    Ok((corpus, sets))
}

fn victim_ckpt_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("asv/victim.ckpt")
}

fn substitute_ckpt_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("asv/substitute.ckpt")
}

fn threshold_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("asv/threshold.txt")
}

pub fn load_victim(cfg: &ExperimentConfig) -> Result<(AsvModel, f64), PipelineError> {
    let p = victim_ckpt_path(cfg);
    require(&p, "train-asv")?;
    let model = AsvModel::from_checkpoint(&Checkpoint::read_file(&p)?)?;
    let tp = threshold_path(cfg);
    require(&tp, "train-asv")?;
    let text = std::fs::read_to_string(&tp).map_err(|e| io_err(&tp, e))?;
    let eta: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("eta "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| PipelineError::BadArtifact {
            path: tp.display().to_string(),
            detail: "no `eta` line".into(),
        })?;
    Ok((model, eta))
}

pub fn load_substitute(cfg: &ExperimentConfig) -> Result<AsvModel, PipelineError> {
    let p = substitute_ckpt_path(cfg);
    require(&p, "train-asv")?;
    Ok(AsvModel::from_checkpoint(&Checkpoint::read_file(&p)?)?)
}

fn lmd_ckpt_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("lmd/lmd.ckpt")
}

pub fn load_lmd(cfg: &ExperimentConfig) -> Result<LmdModel, PipelineError> {
    let p = lmd_ckpt_path(cfg);
    require(&p, "train-lmd")?;
    Ok(LmdModel::from_checkpoint(&Checkpoint::read_file(&p)?)?)
}

fn mcs_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("mcs/search.txt")
}

/// Searched MCS hyperparameters with their run statistics.
#[derive(Debug, Clone)]
pub struct McsSearchResult {
    pub h_mean: f64,
    pub h_std: f64,
    pub d_mean: f64,
    pub d_std: f64,
    pub h_runs: Vec<f64>,
    pub d_runs: Vec<f64>,
}

pub fn load_mcs(cfg: &ExperimentConfig) -> Result<McsSearchResult, PipelineError> {
    let p = mcs_path(cfg);
    require(&p, "search-mcs")?;
    let text = std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
    let bad = |detail: String| PipelineError::BadArtifact {
        path: p.display().to_string(),
        detail,
    };
    let mut result = McsSearchResult {
        h_mean: f64::NAN,
        h_std: f64::NAN,
        d_mean: f64::NAN,
        d_std: f64::NAN,
        h_runs: Vec::new(),
        d_runs: Vec::new(),
    };
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(bad(format!("short line `{line}`")));
        }
        let nums: Vec<f64> = fields[1..]
            .iter()
            .map(|v| v.parse().map_err(|_| bad(format!("bad number in `{line}`"))))
            .collect::<Result<_, _>>()?;
        match fields[0] {
            "mcs-h" => {
                result.h_mean = nums[0];
                result.h_std = nums[1];
                result.h_runs = nums[2..].to_vec();
            }
            "mcs-d" => {
                result.d_mean = nums[0];
                result.d_std = nums[1];
                result.d_runs = nums[2..].to_vec();
            }
            other => return Err(bad(format!("unknown variant `{other}`"))),
        }
    }
    if !result.h_mean.is_finite() || !result.d_mean.is_finite() {
        return Err(bad("missing mcs-h or mcs-d line".into()));
    }
    Ok(result)
}

fn attack_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("attack")
}

/// The grid points of one run, in a fixed order.
pub fn grid_points(cfg: &ExperimentConfig) -> Vec<(String, AttackConfig)> {
    let mut points = Vec::new();
    points.extend(AttackGrid::BimN(cfg.attack.bim_n.clone()).points());
    points.extend(AttackGrid::PgdN(cfg.attack.pgd_n.clone()).points());
    for (label, mut c) in AttackGrid::CwKappa(cfg.attack.cw_kappa.clone()).points() {
        c.n_iters = cfg.attack.cw_steps;
        c.n_binary_search = cfg.attack.cw_binary_search;
        points.push((label, c));
    }
    points
}

pub fn load_adv_set(cfg: &ExperimentConfig, label: &str) -> Result<AdvSet, PipelineError> {
    let dir = attack_root(cfg).join(label);
    require(&dir.join("manifest.txt"), "attack")?;
    Ok(attack::read_adv_set(&dir)?)
}

// ---------------------------------------------------------------------------
// Stages

pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<(), PipelineError> {
    let started = Instant::now();
    let seed = cfg.stage_seed("synth", 0);
    let corpus = Corpus::synthesize(
        seed,
        cfg.corpus.n_speakers,
        cfg.corpus.utts_per_speaker,
        cfg.corpus.duration_s,
    )?;
    let cdir = corpus_dir(cfg);
    corpus.write_dir(&cdir)?;
    let sets = corpus::build_trial_lists(
        cfg.corpus.n_speakers,
        cfg.corpus.utts_per_speaker,
        cfg.corpus.n_attack_pairs,
        cfg.stage_seed("synth", 1),
    )?;
    let td = trials_dir(cfg);
    std::fs::create_dir_all(&td).map_err(|e| io_err(&td, e))?;
    corpus::write_trial_list(&td.join("attack.txt"), &sets.attack)?;
    corpus::write_trial_list(&td.join("eval.txt"), &sets.eval)?;
    corpus::write_trial_list(&td.join("train.txt"), &sets.train)?;
    corpus::write_trial_list(&td.join("validation.txt"), &sets.validation)?;
    write_utt_list(&td.join("train_utts.txt"), &sets.train_utts)?;
    write_utt_list(&td.join("validation_utts.txt"), &sets.validation_utts)?;

    let mut files = collect_files(&cdir)?;
    files.extend(collect_files(&td)?);
    let mut manifest = RunManifest::load_or_new(cfg)?;
    manifest.record(&cfg.out_dir, "synth", seed, started, &files)
}

fn write_history(path: &Path, history: &[(usize, f64)]) -> Result<(), PipelineError> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    for (step, loss) in history {
        writeln!(f, "{step} {loss:.16e}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn cmd_train_asv(cfg: &ExperimentConfig) -> Result<(), PipelineError> {
    let started = Instant::now();
    let (corpus, sets) = load_corpus(cfg)?;
    let dir = cfg.out_dir.join("asv");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

    let victim_seed = cfg.stage_seed("train-asv", 0);
    let base = AsvTrainConfig {
        steps: cfg.asv.steps,
        batch_pairs: cfg.asv.batch_pairs,
        lr: cfg.asv.lr,
        margin: cfg.asv.margin,
        c1: cfg.asv.c1,
        c2: cfg.asv.c2,
        seed: victim_seed,
    };
    let (victim, victim_history) =
        asv::train_asv(&corpus, &sets, FeatureConfig::default(), &base)?;
    victim.to_checkpoint().write_file(&victim_ckpt_path(cfg))?;

    // Substitute for transfer attacks: independent seed and channel widths.
    let sub_cfg = AsvTrainConfig {
        c1: cfg.asv.substitute_c1,
        c2: cfg.asv.substitute_c2,
        seed: cfg.stage_seed("train-asv", 1),
        ..base
    };
    let (substitute, sub_history) =
        asv::train_asv(&corpus, &sets, FeatureConfig::default(), &sub_cfg)?;
    substitute.to_checkpoint().write_file(&substitute_ckpt_path(cfg))?;

    let threshold = asv::calibrate_threshold(&victim, &corpus, &sets.eval)?;
    let tp = threshold_path(cfg);
    std::fs::write(
        &tp,
        format!("eta {:.16e}\neer {:.16e}\n", threshold.eta, threshold.eer),
    )
    .map_err(|e| io_err(&tp, e))?;

    let vh: Vec<(usize, f64)> =
        victim_history.train_loss.iter().copied().enumerate().collect();
    write_history(&dir.join("victim_history.txt"), &vh)?;
    let sh: Vec<(usize, f64)> = sub_history.train_loss.iter().copied().enumerate().collect();
    write_history(&dir.join("substitute_history.txt"), &sh)?;

    let files = collect_files(&dir)?;
    let mut manifest = RunManifest::load_or_new(cfg)?;
    manifest.record(&cfg.out_dir, "train-asv", victim_seed, started, &files)
}

pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<(), PipelineError> {
    let started = Instant::now();
    let (corpus, sets) = load_corpus(cfg)?;
    let (victim, eta) = load_victim(cfg)?;
    let grad_model = if cfg.attack.black_box { load_substitute(cfg)? } else { victim.clone() };
    let root = attack_root(cfg);
    std::fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
    let stage_seed = cfg.stage_seed("attack", 0);

    let mut points = grid_points(cfg);
    if cfg.attack.adaptive {
        let lmd = load_lmd(cfg)?;
        for (label, c) in grid_points(cfg) {
            let adaptive = AttackConfig { detector: DetectorKind::Lmd(lmd.clone()), ..c };
            points.push((format!("{label}-adaptive"), adaptive));
        }
    }
    for (i, (label, mut point)) in points.into_iter().enumerate() {
        point.seed = cfg.stage_seed("attack", 1 + i as u64);
        let set =
            build_set_with_config(&corpus, &sets.attack, &grad_model, &victim, eta, &label, &point)?;
        attack::write_adv_set(&root.join(&label), &set)?;
    }

    let files = collect_files(&root)?;
    let mut manifest = RunManifest::load_or_new(cfg)?;
    manifest.record(&cfg.out_dir, "attack", stage_seed, started, &files)
}

/// One adversarial set with an explicit per-point config (used for adaptive
/// points and CW budgets that differ from the grid defaults).
fn build_set_with_config(
    corpus: &Corpus,
    list: &TrialList,
    grad_model: &AsvModel,
    victim: &AsvModel,
    eta: f64,
    label: &str,
    point: &AttackConfig,
) -> Result<AdvSet, PipelineError> {
    use rayon::prelude::*;
    let examples: Vec<Result<attack::AdversarialExample, attack::AttackError>> = list
        .trials
        .par_iter()
        .map(|&trial| {
            let goal = attack::AttackGoal::for_trial(&trial);
            attack::attack_trial(corpus, trial, grad_model, victim, goal, eta, point)
        })
        .collect();
    let mut set = AdvSet { label: label.to_string(), examples: Vec::new(), genuine: Vec::new() };
    for (ti, ex) in examples.into_iter().enumerate() {
        let ex = ex?;
        let clean = corpus.wave(ex.trial.test);
        let noise_seed = point
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(ti as u64);
        let noisy = crate::dsp::add_white_noise_at_snr(clean, ex.snr_db, noise_seed);
        let snr = crate::dsp::snr_db(clean, &noisy)?;
        set.genuine.push(attack::GenuineExample { waveform: noisy, trial: ex.trial, snr_db: snr });
        set.examples.push(ex);
    }
    Ok(set)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cmd_search_mcs(cfg: &ExperimentConfig) -> Result<(), PipelineError> {
    let started = Instant::now();
    let (corpus, sets) = load_corpus(cfg)?;
    let (victim, _) = load_victim(cfg)?;
    let stage_seed = cfg.stage_seed("search-mcs", 0);
    let mut lines = vec!["# variant mean std runs...".to_string()];
    for (vi, variant) in [McsVariant::H, McsVariant::D].into_iter().enumerate() {
        let runs: Vec<f64> = (0..cfg.detector.mcs_search_runs)
            .map(|r| {
                detect::search_mcs(
                    variant,
                    &victim,
                    &corpus,
                    &sets.train_utts,
                    cfg.detector.mcs_search_batch,
                    cfg.stage_seed("search-mcs", (vi * 100 + r + 1) as u64),
                    cfg.detector.mcs_search_iters,
                )
            })
            .collect::<Result<_, _>>()?;
        let (mean, std) = mean_std(&runs);
        let name = match variant {
            McsVariant::H => "mcs-h",
            McsVariant::D => "mcs-d",
        };
        let run_text: Vec<String> = runs.iter().map(|v| format!("{v:.6}")).collect();
        lines.push(format!("{name} {mean:.6} {std:.6} {}", run_text.join(" ")));
    }
    let p = mcs_path(cfg);
    std::fs::create_dir_all(p.parent().unwrap()).map_err(|e| io_err(&p, e))?;
    std::fs::write(&p, lines.join("\n") + "\n").map_err(|e| io_err(&p, e))?;
    let mut manifest = RunManifest::load_or_new(cfg)?;
    manifest.record(&cfg.out_dir, "search-mcs", stage_seed, started, &[p])
}

pub fn cmd_train_lmd(cfg: &ExperimentConfig) -> Result<(), PipelineError> {
    let started = Instant::now();
    let (corpus, sets) = load_corpus(cfg)?;
    let (victim, _) = load_victim(cfg)?;
    let seed = cfg.stage_seed("train-lmd", 0);
    let train_cfg = LmdTrainConfig {
        steps: cfg.detector.lmd_steps,
        batch: cfg.detector.lmd_batch,
        lr: cfg.detector.lmd_lr,
        hidden: cfg.detector.lmd_hidden,
        lambda_s: cfg.detector.lambda_s,
        lambda_b: cfg.detector.lambda_b,
        margin: cfg.detector.margin,
        crop_frames: cfg.detector.crop_frames,
        seed,
        ..LmdTrainConfig::default()
    };
    let (model, history) = detect::train_lmd(&corpus, &sets, &victim, &train_cfg)?;
    let dir = cfg.out_dir.join("lmd");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    model.to_checkpoint().write_file(&lmd_ckpt_path(cfg))?;
    let th: Vec<(usize, f64)> = history.train_loss.iter().copied().enumerate().collect();
    write_history(&dir.join("train_loss.txt"), &th)?;
    write_history(&dir.join("validation_loss.txt"), &history.validation_loss)?;
    let files = collect_files(&dir)?;
    let mut manifest = RunManifest::load_or_new(cfg)?;
    manifest.record(&cfg.out_dir, "train-lmd", seed, started, &files)
}

// ---------------------------------------------------------------------------
// Evaluation

fn quartiles(values: &[f64]) -> [f64; 5] {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let idx = p * (v.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        v[lo] + (idx - lo as f64) * (v[hi] - v[lo])
    };
    [v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]]
}

/// Score variations of a whole set under one detector, preserving order.
pub fn score_variation_sets(
    victim: &AsvModel,
    detector: &DetectorKind,
    set: &AdvSet,
    corpus: &Corpus,
    exclude_failed: bool,
) -> Result<(VariationSet, VariationSet), PipelineError> {
    use rayon::prelude::*;
    let mut emb_cache: BTreeMap<UttId, Vec<f64>> = BTreeMap::new();
    for ex in &set.examples {
        if !emb_cache.contains_key(&ex.trial.enroll) {
            emb_cache.insert(ex.trial.enroll, victim.embed(corpus.wave(ex.trial.enroll))?);
        }
    }
    let keep: Vec<bool> = set
        .examples
        .iter()
        .map(|ex| !exclude_failed || ex.success)
        .collect();
    let items: Vec<(&corpus::Waveform, &corpus::Trial, f64, VariationOrigin)> = set
        .examples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(ex, _)| (&ex.waveform, &ex.trial, ex.snr_db, VariationOrigin::Adversarial))
        .chain(
            set.genuine
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(g, _)| (&g.waveform, &g.trial, g.snr_db, VariationOrigin::Genuine)),
        )
        .collect();
    let variations: Vec<Result<f64, crate::detect::DetectError>> = items
        .par_iter()
        .map(|(wave, trial, _, _)| {
            let r = detect::detect(victim, detector, wave, &emb_cache[&trial.enroll], 0.0)?;
            Ok(r.variation)
        })
        .collect();
    let mut adv = (Vec::new(), Vec::new(), Vec::new());
    let mut gen = (Vec::new(), Vec::new(), Vec::new());
    for ((_, trial, snr, origin), var) in items.iter().zip(variations) {
        let var = var?;
        let bucket = if *origin == VariationOrigin::Adversarial { &mut adv } else { &mut gen };
        bucket.0.push(var);
        bucket.1.push(*snr);
        bucket.2.push(format!("{}~{}", trial.test, trial.enroll));
    }
    Ok((
        VariationSet::new(VariationOrigin::Adversarial, adv.0, adv.1, adv.2)?,
        VariationSet::new(VariationOrigin::Genuine, gen.0, gen.1, gen.2)?,
    ))
}

pub fn detector_roster(
    cfg: &ExperimentConfig,
) -> Result<Vec<(String, DetectorKind)>, PipelineError> {
    let mcs = load_mcs(cfg)?;
    let lmd = load_lmd(cfg)?;
    Ok(vec![
        ("identity".into(), DetectorKind::Identity),
        (format!("mcs-h(l={})", mcs.h_mean.round() as usize), DetectorKind::McsH {
            l: mcs.h_mean.round() as usize,
        }),
        (format!("mcs-d(xi={:.3})", mcs.d_mean), DetectorKind::McsD { xi: mcs.d_mean }),
        (lmd_label(&lmd), DetectorKind::Lmd(lmd)),
    ])
}

fn lmd_label(m: &LmdModel) -> String {
    if m.lambda_b > 0.0 { "lmd-aibm".into() } else { "lmd-irm".into() }
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, exclude_failed: bool) -> Result<(), PipelineError> {
    let started = Instant::now();
    let (corpus, sets) = load_corpus(cfg)?;
    let (victim, eta) = load_victim(cfg)?;
    let roster = detector_roster(cfg)?;
    let dir = cfg.out_dir.join("eval");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

    let mut labels: Vec<String> = grid_points(cfg).into_iter().map(|(l, _)| l).collect();
    if cfg.attack.adaptive {
        let adaptive: Vec<String> = labels.iter().map(|l| format!("{l}-adaptive")).collect();
        labels.extend(adaptive);
    }

    let mut eer_lines = vec!["# detector set eer tau".to_string()];
    let mut dsr_lines = vec!["# detector set far_given dsr tau".to_string()];
    let mut budget_lines = vec!["# detector set budget eer tau".to_string()];
    let mut det_lines = vec!["# detector set far frr".to_string()];
    let mut box_lines = vec!["# detector set origin min q1 median q3 max".to_string()];
    let mut asr_lines = vec!["# set asr mean_snr".to_string()];

    for label in &labels {
        let set = load_adv_set(cfg, label)?;
        let scored: Vec<(f64, bool)> = set
            .examples
            .iter()
            .map(|ex| (ex.raw_score_or_final(), ex.goal == attack::AttackGoal::Impersonation))
            .collect();
        let mean_snr =
            set.examples.iter().map(|e| e.snr_db).sum::<f64>() / set.examples.len().max(1) as f64;
        asr_lines.push(format!("{label} {:.6} {mean_snr:.3}", metrics::asr(&scored, eta)));

        for (name, det) in &roster {
            let (adv, gen) = score_variation_sets(&victim, det, &set, &corpus, exclude_failed)?;
            if adv.values.is_empty() || gen.values.is_empty() {
                continue;
            }
            let (eer, tau) = metrics::eer(&gen.values, &adv.values)?;
            eer_lines.push(format!("{name} {label} {eer:.6} {tau:.6}"));
            for &far in &cfg.metrics.far_grid {
                let (dsr, tau) = metrics::dsr_at_far(&gen.values, &adv.values, far)?;
                dsr_lines.push(format!("{name} {label} {far:.4} {dsr:.6} {tau:.6}"));
            }
            for &b in &cfg.metrics.snr_budgets {
                match metrics::snr_budget_eer(&adv, &gen, b, BudgetRule::Or)? {
                    Some((eer, tau)) => {
                        budget_lines.push(format!("{name} {label} {b:.1} {eer:.6} {tau:.6}"))
                    }
                    None => budget_lines.push(format!("{name} {label} {b:.1} empty empty")),
                }
            }
            for (far, frr) in metrics::det_curve(&gen.values, &adv.values) {
                det_lines.push(format!("{name} {label} {far:.6} {frr:.6}"));
            }
            for (origin, vs) in [("adversarial", &adv), ("genuine", &gen)] {
                let q = quartiles(&vs.values);
                box_lines.push(format!(
                    "{name} {label} {origin} {:.6} {:.6} {:.6} {:.6} {:.6}",
                    q[0], q[1], q[2], q[3], q[4]
                ));
            }
        }
    }

    // Purification: victim EER through each transform on the genuine eval
    // list and on the strongest BIM set, against the no-defense baseline.
    let mut purif_lines = vec!["# detector genuine_eer adv_eer".to_string()];
    let mut emb_cache: BTreeMap<UttId, Vec<f64>> = BTreeMap::new();
    let mut embed = |id: UttId| -> Result<Vec<f64>, PipelineError> {
        if !emb_cache.contains_key(&id) {
            emb_cache.insert(id, victim.embed(corpus.wave(id))?);
        }
        Ok(emb_cache[&id].clone())
    };
    let genuine_trials: Vec<(corpus::Waveform, Vec<f64>, bool)> = sets
        .eval
        .trials
        .iter()
        .map(|t| Ok((corpus.wave(t.test).clone(), embed(t.enroll)?, t.is_target)))
        .collect::<Result<_, PipelineError>>()?;
    let strongest = cfg
        .attack
        .bim_n
        .iter()
        .max()
        .map(|n| format!("bim-n{n}"));
    let adv_trials: Option<Vec<(corpus::Waveform, Vec<f64>, bool)>> = match &strongest {
        Some(label) => {
            let set = load_adv_set(cfg, label)?;
            Some(
                set.examples
                    .iter()
                    .map(|ex| Ok((ex.waveform.clone(), embed(ex.trial.enroll)?, ex.trial.is_target)))
                    .collect::<Result<_, PipelineError>>()?,
            )
        }
        None => None,
    };
    let mut rows: Vec<(String, DetectorKind)> = vec![("none".into(), DetectorKind::Identity)];
    rows.extend(roster.iter().filter(|(n, _)| n != "identity").cloned());
    for (name, det) in &rows {
        let (gen_eer, _) = detect::purification_eer(&victim, det, &genuine_trials)?;
        let adv_part = match &adv_trials {
            Some(trials) => {
                let (adv_eer, _) = detect::purification_eer(&victim, det, trials)?;
                format!("{adv_eer:.6}")
            }
            None => "n/a".to_string(),
        };
        purif_lines.push(format!("{name} {gen_eer:.6} {adv_part}"));
    }

    for (file, lines) in [
        ("eer_table.txt", &eer_lines),
        ("dsr_table.txt", &dsr_lines),
        ("snr_budget.txt", &budget_lines),
        ("det_points.txt", &det_lines),
        ("boxplot.txt", &box_lines),
        ("asr_table.txt", &asr_lines),
        ("purification.txt", &purif_lines),
    ] {
        let p = dir.join(file);
        std::fs::write(&p, lines.join("\n") + "\n").map_err(|e| io_err(&p, e))?;
    }
    let files = collect_files(&dir)?;
    let mut manifest = RunManifest::load_or_new(cfg)?;
    manifest.record(&cfg.out_dir, "evaluate", cfg.seed, started, &files)
}

impl attack::AdversarialExample {
    /// Raw victim score; falls back to the optimized score for reloaded sets
    /// that only kept the manifest value.
    pub fn raw_score_or_final(&self) -> f64 {
        if self.raw_score.is_finite() { self.raw_score } else { self.final_score }
    }
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<(), PipelineError> {
    let started = Instant::now();
    let eval_dir = cfg.out_dir.join("eval");
    require(&eval_dir.join("eer_table.txt"), "evaluate")?;
    let tp = threshold_path(cfg);
    require(&tp, "train-asv")?;
    let mut out = String::new();
    out.push_str("# Experiment report\n\n## Victim threshold\n");
    out.push_str(&std::fs::read_to_string(&tp).map_err(|e| io_err(&tp, e))?);
    let mp = mcs_path(cfg);
    if mp.exists() {
        out.push_str("\n## MCS hyperparameter search\n");
        out.push_str(&std::fs::read_to_string(&mp).map_err(|e| io_err(&mp, e))?);
    }
    for (title, file) in [
        ("Attack success rates", "asr_table.txt"),
        ("Detection EER per grid point", "eer_table.txt"),
        ("DSR at tolerated FAR", "dsr_table.txt"),
        ("SNR-budget detection EER", "snr_budget.txt"),
        ("Score-variation quartiles", "boxplot.txt"),
        ("Purification", "purification.txt"),
    ] {
        let p = eval_dir.join(file);
        out.push_str(&format!("\n## {title}\n"));
        out.push_str(&std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))?);
    }
    let rp = cfg.out_dir.join("report.txt");
    std::fs::write(&rp, out).map_err(|e| io_err(&rp, e))?;
    let mut manifest = RunManifest::load_or_new(cfg)?;
    manifest.record(&cfg.out_dir, "report", cfg.seed, started, &[rp])
}
