//! Toy differentiable speaker-verification model: LogFBank features, a small
//! convolutional embedding encoder with temporal pooling, cosine scoring,
//! contrastive training, and EER threshold calibration.
//!
//! The model is deliberately tiny — two conv layers over 24 mel filters and a
//! 32-dim L2-normalized embedding — so every gradient the attackers consume
//! stays hand-auditable.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::ckpt::{Checkpoint, CkptError};
use crate::corpus::{self, Corpus, TrialList, TrialSets, UttId, Waveform};
use crate::diffgraph::{ConstMatrix, DiffError, StftBasis, Tape, Tensor, VarId};
use crate::dsp::{DspError, StftConfig};
use crate::metrics::{self, MetricsError};
use crate::opt::Adam;

#[derive(Debug, Error)]
pub enum AsvError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),
    #[error("non-finite training loss at step {0}")]
    Diverged(usize),
    #[error("checkpoint is not an asv model: kind {0}")]
    WrongKind(String),
    #[error("degenerate score set: {0}")]
    DegenerateScores(&'static str),
}

/// LogFBank feature extraction settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub n_filters: usize,
    pub cmvn: bool,
    pub log_floor: f64,
    pub stft: StftConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_filters: 24,
            cmvn: true,
            log_floor: 1e-6,
            stft: StftConfig::asv(),
        }
    }
}

/// n_filters × T log filterbank energies.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub n_filters: usize,
    pub n_frames: usize,
    pub data: Vec<f64>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel-spaced filterbank over the one-sided bins, spanning
/// 0 Hz to Nyquist.
pub fn mel_filterbank(n_filters: usize, stft: &StftConfig, sample_rate: u32) -> ConstMatrix {
    let n_bins = stft.n_bins();
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    // n_filters + 2 edge points, equally spaced on the mel scale.
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_filters + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / stft.fft_size as f64;
    let mut data = vec![0.0; n_filters * n_bins];
    for m in 0..n_filters {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            data[m * n_bins + b] = w;
        }
    }
    ConstMatrix::new(n_filters, n_bins, data)
}

/// Frequencies (Hz) of the filter centers, for oracle checks.
pub fn filter_centers(n_filters: usize, sample_rate: u32) -> Vec<f64> {
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_filters)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_filters + 1) as f64))
        .collect()
}

/// Parameter variable handles for one model instance on a tape.
pub struct AsvParams {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
    pub wp: VarId,
    pub bp: VarId,
}

/// The toy ASV model. The filterbank is fixed (not learned) and rebuilt from
/// the feature config on load.
#[derive(Debug, Clone)]
pub struct AsvModel {
    pub feat: FeatureConfig,
    pub c1: usize,
    pub c2: usize,
    pub embedding_dim: usize,
    pub seed: u64,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub wp: Tensor,
    pub bp: Tensor,
    basis: Arc<StftBasis>,
    fb: Arc<ConstMatrix>,
}

pub const EMBEDDING_DIM: usize = 32;
const CONV_KERNEL: usize = 5;

impl AsvModel {
    /// Randomly initialized model (uniform ±√(1/fan_in) per layer).
    pub fn init(feat: FeatureConfig, c1: usize, c2: usize, seed: u64) -> Result<Self, AsvError> {
        let basis = Arc::new(StftBasis::new(feat.stft.clone())?);
        let fb = Arc::new(mel_filterbank(feat.n_filters, &feat.stft, corpus::SAMPLE_RATE));
        let mut rng = corpus::derive_rng(seed, &[0x41535656]);
        let uniform = |rng: &mut rand_chacha::ChaCha20Rng, shape: Vec<usize>, fan_in: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        let nf = feat.n_filters;
        // Conv biases start away from zero: tanh is odd, so with zero-mean
        // activations the temporal average pool would see no amplitude
        // information at all and training would have to bootstrap the bias
        // shift from a second-order signal. An offset operating point gives
        // every unit a rectifying (even) response component from step one.
        let offset_uniform = |rng: &mut rand_chacha::ChaCha20Rng, n: usize| {
            Tensor::new(
                vec![n],
                (0..n)
                    .map(|i| {
                        let b = 0.15 + rng.gen_range(0.0..0.15);
                        if i % 2 == 0 { b } else { -b }
                    })
                    .collect(),
            )
        };
        Ok(AsvModel {
            w1: uniform(&mut rng, vec![c1, nf, CONV_KERNEL], nf * CONV_KERNEL),
            b1: offset_uniform(&mut rng, c1),
            w2: uniform(&mut rng, vec![c2, c1, CONV_KERNEL], c1 * CONV_KERNEL),
            b2: offset_uniform(&mut rng, c2),
            wp: uniform(&mut rng, vec![EMBEDDING_DIM, c2], c2),
            bp: uniform(&mut rng, vec![EMBEDDING_DIM], c2),
            feat,
            c1,
            c2,
            embedding_dim: EMBEDDING_DIM,
            seed,
            basis,
            fb,
        })
    }

    pub fn basis(&self) -> &Arc<StftBasis> {
        &self.basis
    }

    /// Put the parameters on a tape, as leaves when `trainable`.
    pub fn params_on_tape(&self, tape: &mut Tape, trainable: bool) -> Result<AsvParams, DiffError> {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Ok(AsvParams {
            w1: put(&self.w1)?,
            b1: put(&self.b1)?,
            w2: put(&self.w2)?,
            b2: put(&self.b2)?,
            wp: put(&self.wp)?,
            bp: put(&self.bp)?,
        })
    }

    /// Feature sub-graph: waveform variable → [n_filters, T] LogFBank.
    pub fn features_graph(&self, tape: &mut Tape, wave: VarId) -> Result<VarId, DiffError> {
        let spec = tape.stft(wave, Arc::clone(&self.basis))?;
        let power = tape.power_spec(spec)?;
        let banked = tape.matmul_const(Arc::clone(&self.fb), power)?;
        let floored = tape.add_scalar(banked, self.feat.log_floor)?;
        let logged = tape.log(floored)?;
        if self.feat.cmvn {
            tape.cmvn(logged)
        } else {
            Ok(logged)
        }
    }

    /// Encoder sub-graph: [n_filters, T] features → unit embedding.
    pub fn encoder_graph(
        &self,
        tape: &mut Tape,
        features: VarId,
        params: &AsvParams,
    ) -> Result<VarId, DiffError> {
        let h1 = tape.conv1d(features, params.w1, params.b1)?;
        let a1 = tape.tanh(h1)?;
        let h2 = tape.conv1d(a1, params.w2, params.b2)?;
        let a2 = tape.tanh(h2)?;
        let pooled = tape.mean_last(a2)?;
        let proj = tape.affine(pooled, params.wp, params.bp)?;
        tape.l2_normalize(proj)
    }

    /// Full sub-graph: waveform variable → unit embedding.
    pub fn embedding_graph(
        &self,
        tape: &mut Tape,
        wave: VarId,
        params: &AsvParams,
    ) -> Result<VarId, DiffError> {
        let features = self.features_graph(tape, wave)?;
        self.encoder_graph(tape, features, params)
    }

    /// LogFBank features of a waveform (no gradients retained).
    pub fn logfbank(&self, wave: &Waveform) -> Result<FeatureMatrix, AsvError> {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::vector(wave.samples.clone()))?;
        let f = self.features_graph(&mut tape, w)?;
        let t = tape.value(f);
        Ok(FeatureMatrix {
            n_filters: t.shape[0],
            n_frames: t.shape[1],
            data: t.data.clone(),
        })
    }

    /// Unit embedding of precomputed features.
    pub fn embed_features(&self, features: &FeatureMatrix) -> Result<Vec<f64>, AsvError> {
        let mut tape = Tape::new();
        let params = self.params_on_tape(&mut tape, false)?;
        let f = tape.constant(Tensor::new(
            vec![features.n_filters, features.n_frames],
            features.data.clone(),
        ))?;
        let e = self.encoder_graph(&mut tape, f, &params)?;
        Ok(tape.value(e).data.clone())
    }

    /// Unit embedding of a waveform.
    pub fn embed(&self, wave: &Waveform) -> Result<Vec<f64>, AsvError> {
        let mut tape = Tape::new();
        let params = self.params_on_tape(&mut tape, false)?;
        let w = tape.constant(Tensor::vector(wave.samples.clone()))?;
        let e = self.embedding_graph(&mut tape, w, &params)?;
        Ok(tape.value(e).data.clone())
    }

    /// Cosine score of a trial (both embeddings are unit vectors).
    pub fn score(&self, test: &Waveform, enroll: &Waveform) -> Result<f64, AsvError> {
        let et = self.embed(test)?;
        let ee = self.embed(enroll)?;
        Ok(et.iter().zip(&ee).map(|(a, b)| a * b).sum())
    }

    /// Cosine score against a precomputed enrollment embedding.
    pub fn score_against(&self, test: &Waveform, enroll_emb: &[f64]) -> Result<f64, AsvError> {
        let et = self.embed(test)?;
        Ok(et.iter().zip(enroll_emb).map(|(a, b)| a * b).sum())
    }

    /// Score and its exact gradient w.r.t. the test samples, with the
    /// enrollment embedding held constant.
    pub fn score_grad(
        &self,
        test: &Waveform,
        enroll_emb: &[f64],
    ) -> Result<(f64, Vec<f64>), AsvError> {
        let mut tape = Tape::new();
        let params = self.params_on_tape(&mut tape, false)?;
        let w = tape.leaf(Tensor::vector(test.samples.clone()))?;
        let e = self.embedding_graph(&mut tape, w, &params)?;
        let enroll = tape.constant(Tensor::vector(enroll_emb.to_vec()))?;
        let s = tape.dot(e, enroll)?;
        let score = tape.value(s).item();
        let grads = tape.backward(s)?;
        let g = grads
            .wrt(w)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; test.samples.len()]);
        Ok((score, g))
    }

    fn param_list(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("wp", &self.wp),
            ("bp", &self.bp),
        ]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        let meta = &mut ckpt.meta;
        meta.push(("kind".into(), "asv".into()));
        meta.push(("seed".into(), self.seed.to_string()));
        meta.push(("n_filters".into(), self.feat.n_filters.to_string()));
        meta.push(("cmvn".into(), self.feat.cmvn.to_string()));
        meta.push(("log_floor".into(), format!("{:.16e}", self.feat.log_floor)));
        meta.push(("c1".into(), self.c1.to_string()));
        meta.push(("c2".into(), self.c2.to_string()));
        meta.push(("embedding_dim".into(), self.embedding_dim.to_string()));
        for (name, t) in self.param_list() {
            ckpt.tensors.push((name.into(), t.clone()));
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, AsvError> {
        let kind = ckpt.meta_value("kind")?;
        if kind != "asv" {
            return Err(AsvError::WrongKind(kind.to_string()));
        }
        let parse = |k: &str| -> Result<f64, AsvError> {
            Ok(ckpt.meta_value(k)?.parse().map_err(|_| CkptError::MissingMeta(k.to_string()))?)
        };
        let feat = FeatureConfig {
            n_filters: parse("n_filters")? as usize,
            cmvn: ckpt.meta_value("cmvn")? == "true",
            log_floor: parse("log_floor")?,
            stft: StftConfig::asv(),
        };
        let mut model = AsvModel::init(
            feat,
            parse("c1")? as usize,
            parse("c2")? as usize,
            parse("seed")? as u64,
        )?;
        model.w1 = ckpt.tensor("w1")?.clone();
        model.b1 = ckpt.tensor("b1")?.clone();
        model.w2 = ckpt.tensor("w2")?.clone();
        model.b2 = ckpt.tensor("b2")?.clone();
        model.wp = ckpt.tensor("wp")?.clone();
        model.bp = ckpt.tensor("bp")?.clone();
        Ok(model)
    }
}

/// Training settings for the contrastive objective.
#[derive(Debug, Clone)]
pub struct AsvTrainConfig {
    pub steps: usize,
    pub batch_pairs: usize,
    pub lr: f64,
    pub margin: f64,
    pub c1: usize,
    pub c2: usize,
    pub seed: u64,
}

impl Default for AsvTrainConfig {
    fn default() -> Self {
        AsvTrainConfig {
            steps: 600,
            batch_pairs: 6,
            lr: 0.01,
            margin: 0.2,
            c1: 8,
            c2: 8,
            seed: 7,
        }
    }
}

/// Loss history of one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// (step, loss) pairs at validation checkpoints.
    pub validation_loss: Vec<(usize, f64)>,
}

fn group_by_speaker(utts: &[UttId]) -> BTreeMap<u32, Vec<UttId>> {
    let mut by_speaker: BTreeMap<u32, Vec<UttId>> = BTreeMap::new();
    for &u in utts {
        by_speaker.entry(u.speaker).or_default().push(u);
    }
    by_speaker
}

/// Contrastive batch loss over same-speaker pairs: pull matched cosines to 1,
/// push every mismatched cosine below the margin. Returns the scalar loss
/// variable; embeddings are built from cached constant features.
fn batch_loss(
    tape: &mut Tape,
    model: &AsvModel,
    params: &AsvParams,
    features: &[(u32, FeatureMatrix, FeatureMatrix)],
    margin: f64,
) -> Result<VarId, DiffError> {
    let mut anchors = Vec::new();
    let mut positives = Vec::new();
    for (_, fa, fp) in features {
        let a = tape.constant(Tensor::new(vec![fa.n_filters, fa.n_frames], fa.data.clone()))?;
        let p = tape.constant(Tensor::new(vec![fp.n_filters, fp.n_frames], fp.data.clone()))?;
        anchors.push(model.encoder_graph(tape, a, params)?);
        positives.push(model.encoder_graph(tape, p, params)?);
    }
    let b = features.len();
    let mut terms = Vec::new();
    for i in 0..b {
        for j in 0..b {
            // Two pairs in one batch may share a speaker; only genuinely
            // cross-speaker combinations count as mismatched.
            if i != j && features[i].0 == features[j].0 {
                continue;
            }
            let cos = tape.dot(anchors[i], positives[j])?;
            if i == j {
                // 1 − cos(anchor, positive)
                let neg = tape.scale(cos, -1.0)?;
                terms.push(tape.add_scalar(neg, 1.0)?);
            } else {
                // max(0, cos(anchor, other) − margin)
                let shifted = tape.add_scalar(cos, -margin)?;
                terms.push(tape.relu(shifted)?);
            }
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / b as f64)
}

/// Train the toy ASV on the training-half speakers. Deterministic given the
/// config seed; single-threaded by design.
pub fn train_asv(
    corpus: &Corpus,
    sets: &TrialSets,
    feat: FeatureConfig,
    cfg: &AsvTrainConfig,
) -> Result<(AsvModel, TrainHistory), AsvError> {
    let by_speaker = group_by_speaker(&sets.train_utts);
    let eligible: Vec<&Vec<UttId>> = by_speaker.values().filter(|v| v.len() >= 2).collect();
    if eligible.len() < 2 {
        return Err(AsvError::CorpusTooSmall(format!(
            "{} training speakers with >= 2 utterances",
            eligible.len()
        )));
    }
    let mut model = AsvModel::init(feat, cfg.c1, cfg.c2, cfg.seed)?;

    // Features never change during training: cache them per utterance.
    let mut cache: BTreeMap<UttId, FeatureMatrix> = BTreeMap::new();
    for utt in sets.train_utts.iter().chain(&sets.validation_utts) {
        cache.insert(*utt, model.logfbank(corpus.wave(*utt))?);
    }

    // Fixed validation pairing: consecutive same-speaker validation
    // utterances as matched pairs, first utterances across speakers as
    // mismatched probes.
    let val_by_speaker = group_by_speaker(&sets.validation_utts);
    let val_pairs: Vec<(UttId, UttId)> = val_by_speaker
        .values()
        .filter(|v| v.len() >= 2)
        .map(|v| (v[0], v[1]))
        .collect();

    let mut rng = corpus::derive_rng(cfg.seed, &[0x545241494e]);
    let mut adam = Adam::new(
        cfg.lr,
        &[
            model.w1.len(),
            model.b1.len(),
            model.w2.len(),
            model.b2.len(),
            model.wp.len(),
            model.bp.len(),
        ],
    );
    let mut history = TrainHistory::default();

    // Random temporal crops keep the encoder from memorizing utterance-level
    // layout; the speaker cue must survive any sub-window.
    const CROP_FRAMES: usize = 48;
    fn crop(f: &FeatureMatrix, rng: &mut rand_chacha::ChaCha20Rng) -> FeatureMatrix {
        if f.n_frames <= CROP_FRAMES {
            return f.clone();
        }
        let t0 = rng.gen_range(0..=f.n_frames - CROP_FRAMES);
        let mut data = Vec::with_capacity(f.n_filters * CROP_FRAMES);
        for m in 0..f.n_filters {
            let row = m * f.n_frames;
            data.extend_from_slice(&f.data[row + t0..row + t0 + CROP_FRAMES]);
        }
        FeatureMatrix { n_filters: f.n_filters, n_frames: CROP_FRAMES, data }
    }

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_pairs);
        for _ in 0..cfg.batch_pairs {
            let spk = eligible[rng.gen_range(0..eligible.len())];
            let i = rng.gen_range(0..spk.len());
            let mut j = rng.gen_range(0..spk.len() - 1);
            if j >= i {
                j += 1;
            }
            batch.push((
                spk[i].speaker,
                crop(&cache[&spk[i]], &mut rng),
                crop(&cache[&spk[j]], &mut rng),
            ));
        }

        // Half-cosine learning-rate decay: the pair-contrastive loss is noisy
        // at desk-scale batch sizes, and a decaying step lets the final model
        // settle instead of bouncing between minima.
        adam.lr =
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());

        let mut tape = Tape::new();
        let params = model.params_on_tape(&mut tape, true)?;
        let loss = batch_loss(&mut tape, &model, &params, &batch, cfg.margin)?;
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(AsvError::Diverged(step));
        }
        history.train_loss.push(loss_val);
        let grads = tape.backward(loss)?;

        let ids = [params.w1, params.b1, params.w2, params.b2, params.wp, params.bp];
        let gs: Vec<Option<&[f64]>> = ids.iter().map(|&v| grads.wrt(v)).collect();
        adam.step(
            &mut [
                &mut model.w1.data,
                &mut model.b1.data,
                &mut model.w2.data,
                &mut model.b2.data,
                &mut model.wp.data,
                &mut model.bp.data,
            ],
            &gs,
        );

        if (step + 1) % 20 == 0 || step + 1 == cfg.steps {
            if !val_pairs.is_empty() {
                let mut tape = Tape::new();
                let params = model.params_on_tape(&mut tape, false)?;
                let feats: Vec<(u32, FeatureMatrix, FeatureMatrix)> = val_pairs
                    .iter()
                    .map(|(a, p)| (a.speaker, cache[a].clone(), cache[p].clone()))
                    .collect();
                let vl = batch_loss(&mut tape, &model, &params, &feats, cfg.margin)?;
                history.validation_loss.push((step + 1, tape.value(vl).item()));
            }
        }
    }
    Ok((model, history))
}

/// The ASV decision threshold η, calibrated at the EER point of raw cosine
/// scores over a genuine trial list.
#[derive(Debug, Clone, Copy)]
pub struct DecisionThreshold {
    pub eta: f64,
    pub eer: f64,
}

pub fn calibrate_threshold(
    model: &AsvModel,
    corpus: &Corpus,
    trials: &TrialList,
) -> Result<DecisionThreshold, AsvError> {
    let mut emb_cache: BTreeMap<UttId, Vec<f64>> = BTreeMap::new();
    let embed = |m: &AsvModel, id: UttId, c: &Corpus, cache: &mut BTreeMap<UttId, Vec<f64>>| {
        if !cache.contains_key(&id) {
            let e = m.embed(c.wave(id))?;
            cache.insert(id, e);
        }
        Ok::<Vec<f64>, AsvError>(cache[&id].clone())
    };
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for t in &trials.trials {
        let et = embed(model, t.test, corpus, &mut emb_cache)?;
        let ee = embed(model, t.enroll, corpus, &mut emb_cache)?;
        let s: f64 = et.iter().zip(&ee).map(|(a, b)| a * b).sum();
        if t.is_target {
            targets.push(s);
        } else {
            nontargets.push(s);
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(AsvError::DegenerateScores("trial list missing a trial type"));
    }
    let (eer, eta) = metrics::asv_eer(&targets, &nontargets)?;
    Ok(DecisionThreshold { eta, eer })
}

/// Raw cosine scores over a trial list, split into (target, nontarget).
pub fn score_trial_list(
    model: &AsvModel,
    corpus: &Corpus,
    trials: &TrialList,
) -> Result<(Vec<f64>, Vec<f64>), AsvError> {
    let mut emb_cache: BTreeMap<UttId, Vec<f64>> = BTreeMap::new();
    for t in &trials.trials {
        for id in [t.test, t.enroll] {
            if !emb_cache.contains_key(&id) {
                let e = model.embed(corpus.wave(id))?;
                emb_cache.insert(id, e);
            }
        }
    }
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for t in &trials.trials {
        let s: f64 = emb_cache[&t.test]
            .iter()
            .zip(&emb_cache[&t.enroll])
            .map(|(a, b)| a * b)
            .sum();
        if t.is_target {
            targets.push(s);
        } else {
            nontargets.push(s);
        }
    }
    Ok((targets, nontargets))
}
