//! The defense side: transform-and-compare detection, the hand-crafted
//! complex-spectrogram masks (high-frequency and one-order-difference) with
//! their quadrisection hyperparameter search, and the learnable mask detector
//! with its training loop.
//!
//! Detection compares the ASV score of a test utterance before and after the
//! mask transform; a large variation flags an adversarial example.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::asv::{AsvError, AsvModel};
use crate::ckpt::{Checkpoint, CkptError};
use crate::corpus::{self, Corpus, TrialSets, UttId, Waveform};
use crate::diffgraph::{DiffError, StftBasis, Tape, Tensor, VarId};
use crate::dsp::{self, DspError, MaskKind, MaskMatrix, StftConfig};
use crate::opt::Adam;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Asv(#[from] AsvError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error("mask length {l} out of range 0..={f}")]
    MaskLenOutOfRange { l: usize, f: usize },
    #[error("negative difference threshold {0}")]
    NegativeThreshold(f64),
    #[error("empty training data: {0}")]
    EmptyTrainingData(&'static str),
    #[error("non-finite training loss at step {0}")]
    Diverged(usize),
    #[error("checkpoint is not an lmd model: kind {0}")]
    WrongKind(String),
}

/// High-frequency mask: the `l` highest-frequency rows are zeroed.
pub fn mcs_h_mask(n_bins: usize, n_frames: usize, l: usize) -> Result<MaskMatrix, DetectError> {
    if l > n_bins {
        return Err(DetectError::MaskLenOutOfRange { l, f: n_bins });
    }
    let mut values = vec![1.0; n_bins * n_frames];
    for row in n_bins - l..n_bins {
        values[row * n_frames..(row + 1) * n_frames].fill(0.0);
    }
    Ok(MaskMatrix::new(values, n_bins, n_frames, 1, MaskKind::Binary)?)
}

/// One-order-difference mask: a bin is kept only where the magnitude jump to
/// the next-higher frequency exceeds ξ; the top row is always dropped.
pub fn mcs_d_mask(
    magnitude: &[f64],
    n_bins: usize,
    n_frames: usize,
    xi: f64,
) -> Result<MaskMatrix, DetectError> {
    if xi < 0.0 {
        return Err(DetectError::NegativeThreshold(xi));
    }
    assert_eq!(magnitude.len(), n_bins * n_frames);
    let mut values = vec![0.0; n_bins * n_frames];
    for i in 0..n_bins - 1 {
        for j in 0..n_frames {
            let d = (magnitude[(i + 1) * n_frames + j] - magnitude[i * n_frames + j]).abs();
            if d > xi {
                values[i * n_frames + j] = 1.0;
            }
        }
    }
    Ok(MaskMatrix::new(values, n_bins, n_frames, 1, MaskKind::Binary)?)
}

/// Learnable mask network: two same-padded 3×3 convolutions over the
/// (frequency, time) grid, real/imag input planes, sigmoid output mask.
#[derive(Debug, Clone)]
pub struct LmdModel {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub hidden: usize,
    pub margin: f64,
    pub lambda_s: f64,
    pub lambda_b: f64,
    pub seed: u64,
    pub best_val_step: usize,
}

/// Input normalization for the mask network. Chosen so that the transition
/// between low-energy and speech-carrying spectrogram cells of 16-bit-scale
/// audio (upper-quartile magnitudes, a few thousand) lands near the knee of
/// tanh: the network can then separate the cell-energy regimes instead of
/// seeing every cell in the activation's linear region.
pub const MASK_INPUT_SCALE: f64 = 1.0 / 5000.0;

/// Parameter variable handles for one mask network instance on a tape.
pub struct LmdParams {
    pub w1: VarId,
    pub b1: VarId,
    pub w2: VarId,
    pub b2: VarId,
}

impl LmdModel {
    pub fn init(hidden: usize, margin: f64, lambda_s: f64, lambda_b: f64, seed: u64) -> Self {
        let mut rng = corpus::derive_rng(seed, &[0x4c4d44]);
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let bound = (1.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        // The output bias starts positive so the initial mask sits near 1 and
        // the untrained transform is close to an identity: training then
        // carves cells away from a score-preserving starting point instead of
        // climbing out of an all-zero mask.
        let mut b2 = uniform(vec![2], hidden * 9);
        for v in b2.data.iter_mut() {
            *v += 2.0;
        }
        LmdModel {
            w1: uniform(vec![hidden, 2, 3, 3], 2 * 9),
            b1: uniform(vec![hidden], 2 * 9),
            w2: uniform(vec![2, hidden, 3, 3], hidden * 9),
            b2,
            hidden,
            margin,
            lambda_s,
            lambda_b,
            seed,
            best_val_step: 0,
        }
    }

    pub fn params_on_tape(
        &self,
        tape: &mut Tape,
        trainable: bool,
    ) -> Result<LmdParams, DiffError> {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Ok(LmdParams {
            w1: put(&self.w1)?,
            b1: put(&self.b1)?,
            w2: put(&self.w2)?,
            b2: put(&self.b2)?,
        })
    }

    /// Mask sub-graph: complex spectrogram [2, F, T] → mask in (0,1)^[2,F,T].
    ///
    /// The network sees the spectrogram divided by `MASK_INPUT_SCALE` so its
    /// activations stay in the responsive range of tanh on 16-bit-scale
    /// audio; the mask itself still multiplies the raw spectrogram.
    pub fn mask_graph(
        &self,
        tape: &mut Tape,
        spec: VarId,
        params: &LmdParams,
    ) -> Result<VarId, DiffError> {
        let scaled = tape.scale(spec, MASK_INPUT_SCALE)?;
        let h = tape.conv2d(scaled, params.w1, params.b1)?;
        let a = tape.tanh(h)?;
        let o = tape.conv2d(a, params.w2, params.b2)?;
        tape.sigmoid(o)
    }

    /// Plane-wise ratio mask for a concrete spectrogram.
    pub fn mask_for(&self, spec: &dsp::ComplexSpectrogram) -> Result<MaskMatrix, DetectError> {
        let mut tape = Tape::new();
        let params = self.params_on_tape(&mut tape, false)?;
        let mut data = spec.real.clone();
        data.extend_from_slice(&spec.imag);
        let x = tape.constant(Tensor::new(vec![2, spec.n_bins, spec.n_frames], data))?;
        let m = self.mask_graph(&mut tape, x, &params)?;
        Ok(MaskMatrix::new(
            tape.value(m).data.clone(),
            spec.n_bins,
            spec.n_frames,
            2,
            MaskKind::Ratio,
        )?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        let meta = &mut ckpt.meta;
        meta.push(("kind".into(), "lmd".into()));
        meta.push(("seed".into(), self.seed.to_string()));
        meta.push(("hidden".into(), self.hidden.to_string()));
        meta.push(("margin".into(), format!("{:.16e}", self.margin)));
        meta.push(("lambda_s".into(), format!("{:.16e}", self.lambda_s)));
        meta.push(("lambda_b".into(), format!("{:.16e}", self.lambda_b)));
        meta.push(("best_val_step".into(), self.best_val_step.to_string()));
        meta.push(("optimizer".into(), "adam beta1=0.9 beta2=0.999 eps=1e-8".into()));
        for (name, t) in [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)] {
            ckpt.tensors.push((name.into(), t.clone()));
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, DetectError> {
        let kind = ckpt.meta_value("kind")?;
        if kind != "lmd" {
            return Err(DetectError::WrongKind(kind.to_string()));
        }
        let parse = |k: &str| -> Result<f64, DetectError> {
            Ok(ckpt
                .meta_value(k)?
                .parse()
                .map_err(|_| CkptError::MissingMeta(k.to_string()))?)
        };
        Ok(LmdModel {
            w1: ckpt.tensor("w1")?.clone(),
            b1: ckpt.tensor("b1")?.clone(),
            w2: ckpt.tensor("w2")?.clone(),
            b2: ckpt.tensor("b2")?.clone(),
            hidden: parse("hidden")? as usize,
            margin: parse("margin")?,
            lambda_s: parse("lambda_s")?,
            lambda_b: parse("lambda_b")?,
            seed: parse("seed")? as u64,
            best_val_step: parse("best_val_step")? as usize,
        })
    }
}

/// The deployable detector variants.
#[derive(Debug, Clone)]
pub enum DetectorKind {
    /// No-op transform; baseline and test hook.
    Identity,
    McsH { l: usize },
    McsD { xi: f64 },
    Lmd(LmdModel),
}

impl DetectorKind {
    pub fn mask_for(&self, spec: &dsp::ComplexSpectrogram) -> Result<MaskMatrix, DetectError> {
        match self {
            DetectorKind::Identity => Ok(MaskMatrix::ones(spec.n_bins, spec.n_frames)),
            DetectorKind::McsH { l } => mcs_h_mask(spec.n_bins, spec.n_frames, *l),
            DetectorKind::McsD { xi } => {
                mcs_d_mask(&spec.magnitude(), spec.n_bins, spec.n_frames, *xi)
            }
            DetectorKind::Lmd(model) => model.mask_for(spec),
        }
    }

    pub fn label(&self) -> String {
        match self {
            DetectorKind::Identity => "identity".into(),
            DetectorKind::McsH { l } => format!("mcs-h(l={l})"),
            DetectorKind::McsD { xi } => format!("mcs-d(xi={xi})"),
            DetectorKind::Lmd(m) => {
                if m.lambda_b > 0.0 {
                    "lmd-aibm".into()
                } else {
                    "lmd-irm".into()
                }
            }
        }
    }
}

/// Mask transform: hann STFT → mask product → inverse STFT at the original
/// length.
pub fn transform(wave: &Waveform, detector: &DetectorKind) -> Result<Waveform, DetectError> {
    let cfg = StftConfig::detector();
    let spec = dsp::stft(wave, &cfg)?;
    let mask = detector.mask_for(&spec)?;
    let masked = dsp::apply_mask(&spec, &mask)?;
    Ok(dsp::istft(&masked, wave.len())?)
}

/// Outcome of one transform-and-compare decision.
#[derive(Debug, Clone, Copy)]
pub struct DetectionResult {
    pub s: f64,
    pub s_hat: f64,
    pub variation: f64,
    pub is_adversarial: bool,
    pub tau_det: f64,
}

impl DetectionResult {
    /// One-line detection record: trial id, s, ŝ, variation, decision.
    pub fn to_line(&self, trial_id: &str) -> String {
        format!(
            "{trial_id} {:.6} {:.6} {:.6} {}",
            self.s,
            self.s_hat,
            self.variation,
            if self.is_adversarial { "adversarial" } else { "genuine" }
        )
    }
}

/// Score the test utterance before and after the transform and compare the
/// variation against τ_det (strictly greater flags adversarial).
pub fn detect(
    model: &AsvModel,
    detector: &DetectorKind,
    test: &Waveform,
    enroll_emb: &[f64],
    tau_det: f64,
) -> Result<DetectionResult, DetectError> {
    let s = model.score_against(test, enroll_emb)?;
    let transformed = transform(test, detector)?;
    let s_hat = model.score_against(&transformed, enroll_emb)?;
    let variation = (s - s_hat).abs();
    Ok(DetectionResult { s, s_hat, variation, is_adversarial: variation > tau_det, tau_det })
}

/// The composite mask-training loss and its three terms:
/// L = L_m + λ_s·L_s + λ_b·L_b with L_m = Σ M, L_s = max(0, |s−ŝ| − m),
/// L_b = Σ (M(1−M))².
pub fn lmd_loss(
    s: f64,
    s_hat: f64,
    mask: &MaskMatrix,
    m: f64,
    lambda_s: f64,
    lambda_b: f64,
) -> (f64, f64, f64, f64) {
    let l_m: f64 = mask.values.iter().sum();
    let l_s = ((s - s_hat).abs() - m).max(0.0);
    let l_b: f64 = mask
        .values
        .iter()
        .map(|&v| {
            let p = v * (1.0 - v);
            p * p
        })
        .sum();
    (l_m + lambda_s * l_s + lambda_b * l_b, l_m, l_s, l_b)
}

/// Which hand-crafted mask the hyperparameter search tunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McsVariant {
    H,
    D,
}

impl McsVariant {
    pub fn upper_bound(self) -> f64 {
        match self {
            McsVariant::H => 257.0,
            McsVariant::D => 1e5,
        }
    }

    pub fn detector(self, p: f64) -> DetectorKind {
        match self {
            McsVariant::H => DetectorKind::McsH { l: p.round().max(0.0) as usize },
            McsVariant::D => DetectorKind::McsD { xi: p.max(0.0) },
        }
    }
}

/// Quadrisection minimizer: split [lower, upper] at the quarter points
/// p1 < p2 < p3, contract toward the smallest of the three losses (first
/// split wins ties over the last), stop when the interval is narrower than
/// one unit or the iteration budget runs out; the rounded midpoint is the
/// answer.
pub fn quadrisection<F: FnMut(f64) -> f64>(
    mut lower: f64,
    mut upper: f64,
    max_iters: usize,
    mut eval: F,
) -> f64 {
    for _ in 0..max_iters {
        if (upper - lower).abs() < 1.0 {
            break;
        }
        let q = (upper - lower) / 4.0;
        let p1 = lower + q;
        let p2 = lower + 2.0 * q;
        let p3 = lower + 3.0 * q;
        let l1 = eval(p1);
        let l2 = eval(p2);
        let l3 = eval(p3);
        if l1 <= l2 && l1 <= l3 {
            upper = p2;
        } else if l3 <= l1 && l3 <= l2 {
            lower = p2;
        } else {
            lower = p1;
            upper = p3;
        }
    }
    (0.5 * (lower + upper)).round()
}

/// Search hyperparameters fixed by the MCS protocol (distinct from the LMD
/// training margin).
const SEARCH_LAMBDA_S: f64 = 10.0;
const SEARCH_MARGIN: f64 = 0.1;

/// Tune the MCS parameter (l or ξ) by quadrisection over minibatch losses.
/// Each candidate is scored on a freshly sampled minibatch of genuine trials
/// with same-speaker enrollments, so repeated runs with different seeds give
/// the mean ± std protocol.
pub fn search_mcs(
    variant: McsVariant,
    model: &AsvModel,
    corpus: &Corpus,
    utts: &[UttId],
    batch: usize,
    seed: u64,
    max_iters: usize,
) -> Result<f64, DetectError> {
    let by_speaker = speaker_groups(utts);
    let pairs = pair_pool(&by_speaker);
    if pairs.is_empty() {
        return Err(DetectError::EmptyTrainingData("no same-speaker pairs"));
    }
    let mut emb_cache: BTreeMap<UttId, Vec<f64>> = BTreeMap::new();
    let mut score_cache: BTreeMap<(UttId, UttId), f64> = BTreeMap::new();
    let mut rng = corpus::derive_rng(seed, &[0x4d4353, variant as u64]);
    let mut failure: Option<DetectError> = None;
    let result = quadrisection(0.0, variant.upper_bound(), max_iters, |p| {
        if failure.is_some() {
            return f64::INFINITY;
        }
        let detector = variant.detector(p);
        let mut total = 0.0;
        for _ in 0..batch {
            let &(test, enroll) = &pairs[rng.gen_range(0..pairs.len())];
            let run = (|| -> Result<f64, DetectError> {
                if !emb_cache.contains_key(&enroll) {
                    emb_cache.insert(enroll, model.embed(corpus.wave(enroll))?);
                }
                let e = &emb_cache[&enroll];
                if !score_cache.contains_key(&(test, enroll)) {
                    score_cache
                        .insert((test, enroll), model.score_against(corpus.wave(test), e)?);
                }
                let s = score_cache[&(test, enroll)];
                let wave = corpus.wave(test);
                let spec = dsp::stft(wave, &StftConfig::detector())?;
                let mask = detector.mask_for(&spec)?;
                let masked = dsp::apply_mask(&spec, &mask)?;
                let transformed = dsp::istft(&masked, wave.len())?;
                let s_hat = model.score_against(&transformed, e)?;
                let (loss, _, _, _) =
                    lmd_loss(s, s_hat, &mask, SEARCH_MARGIN, SEARCH_LAMBDA_S, 0.0);
                Ok(loss)
            })();
            match run {
                Ok(l) => total += l,
                Err(e) => {
                    failure = Some(e);
                    return f64::INFINITY;
                }
            }
        }
        total / batch as f64
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(result),
    }
}

fn speaker_groups(utts: &[UttId]) -> BTreeMap<u32, Vec<UttId>> {
    let mut by_speaker: BTreeMap<u32, Vec<UttId>> = BTreeMap::new();
    for &u in utts {
        by_speaker.entry(u.speaker).or_default().push(u);
    }
    by_speaker
}

/// All ordered same-speaker (test, enroll) pairs.
fn pair_pool(by_speaker: &BTreeMap<u32, Vec<UttId>>) -> Vec<(UttId, UttId)> {
    let mut pairs = Vec::new();
    for group in by_speaker.values() {
        for &a in group {
            for &b in group {
                if a != b {
                    pairs.push((a, b));
                }
            }
        }
    }
    pairs
}

/// Mask-detector training settings. The reference schedule (30K steps,
/// 1000-step decay/validation interval, 500-frame crops) scales down through
/// these fields for desk runs.
#[derive(Debug, Clone)]
pub struct LmdTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub crop_frames: usize,
    pub val_interval: usize,
    pub hidden: usize,
    pub lambda_s: f64,
    pub lambda_b: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for LmdTrainConfig {
    fn default() -> Self {
        LmdTrainConfig {
            steps: 300,
            batch: 8,
            lr: 0.002,
            lr_decay: 0.9,
            decay_every: 100,
            crop_frames: 100,
            val_interval: 50,
            hidden: 8,
            lambda_s: 1.0,
            lambda_b: 15.0,
            margin: 0.05,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LmdTrainHistory {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<(usize, f64)>,
    pub best_val_step: usize,
}

/// Fixed deterministic crop: the first `frames` worth of samples.
fn crop(wave: &Waveform, frames: usize, cfg: &StftConfig) -> Waveform {
    let len = (frames * cfg.hop).min(wave.len());
    Waveform::new(wave.samples[..len].to_vec())
}

struct LmdItemGrads {
    loss: f64,
    grads: [Vec<f64>; 4],
}

/// Loss and parameter gradients for one (test, enroll) item.
fn lmd_item_backward(
    model: &LmdModel,
    asv: &AsvModel,
    basis: &Arc<StftBasis>,
    test: &Waveform,
    enroll_emb: &[f64],
    s: f64,
    lambda_s: f64,
    lambda_b: f64,
    margin: f64,
) -> Result<LmdItemGrads, DetectError> {
    let mut tape = Tape::new();
    let params = model.params_on_tape(&mut tape, true)?;
    let asv_params = asv.params_on_tape(&mut tape, false)?;
    let x = tape.constant(Tensor::vector(test.samples.clone()))?;
    let spec = tape.stft(x, Arc::clone(basis))?;
    let mask = model.mask_graph(&mut tape, spec, &params)?;
    let masked = tape.mask_apply(spec, mask)?;
    let xhat = tape.istft(masked, Arc::clone(basis), test.len())?;
    let emb = asv.embedding_graph(&mut tape, xhat, &asv_params)?;
    let enroll = tape.constant(Tensor::vector(enroll_emb.to_vec()))?;
    let s_hat = tape.dot(emb, enroll)?;

    // L_s = max(0, |s − ŝ| − m)
    let neg = tape.scale(s_hat, -1.0)?;
    let diff = tape.add_scalar(neg, s)?;
    let adiff = tape.abs(diff)?;
    let shifted = tape.add_scalar(adiff, -margin)?;
    let l_s = tape.relu(shifted)?;
    // L_m = Σ M (mask entries are positive)
    let l_m = tape.sum(mask)?;
    // L_b = Σ (M(1−M))²
    let neg_m = tape.scale(mask, -1.0)?;
    let one_minus = tape.add_scalar(neg_m, 1.0)?;
    let prod = tape.mul(mask, one_minus)?;
    let sq = tape.mul(prod, prod)?;
    let l_b = tape.sum(sq)?;

    let s_term = tape.scale(l_s, lambda_s)?;
    let b_term = tape.scale(l_b, lambda_b)?;
    let partial = tape.add(l_m, s_term)?;
    let loss = tape.add(partial, b_term)?;
    let loss_val = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let take = |v: VarId, n: usize| grads.wrt(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    Ok(LmdItemGrads {
        loss: loss_val,
        grads: [
            take(params.w1, model.w1.len()),
            take(params.b1, model.b1.len()),
            take(params.w2, model.w2.len()),
            take(params.b2, model.b2.len()),
        ],
    })
}

/// Loss only (no gradients) for validation batches.
fn lmd_item_loss(
    model: &LmdModel,
    asv: &AsvModel,
    test: &Waveform,
    enroll_emb: &[f64],
    s: f64,
    lambda_s: f64,
    lambda_b: f64,
    margin: f64,
) -> Result<f64, DetectError> {
    let spec = dsp::stft(test, &StftConfig::detector())?;
    let mask = model.mask_for(&spec)?;
    let masked = dsp::apply_mask(&spec, &mask)?;
    let transformed = dsp::istft(&masked, test.len())?;
    let s_hat = asv.score_against(&transformed, enroll_emb)?;
    Ok(lmd_loss(s, s_hat, &mask, margin, lambda_s, lambda_b).0)
}

/// Train the learnable mask detector on genuine data with the ASV frozen.
/// Deterministic in the seed; per-item gradient work runs in parallel with an
/// ordered reduction.
pub fn train_lmd(
    corpus: &Corpus,
    sets: &TrialSets,
    asv: &AsvModel,
    cfg: &LmdTrainConfig,
) -> Result<(LmdModel, LmdTrainHistory), DetectError> {
    let stft_cfg = StftConfig::detector();
    let basis = Arc::new(StftBasis::new(stft_cfg.clone())?);
    let train_pairs = pair_pool(&speaker_groups(&sets.train_utts));
    if train_pairs.is_empty() {
        return Err(DetectError::EmptyTrainingData("no same-speaker training pairs"));
    }
    let val_pairs = pair_pool(&speaker_groups(&sets.validation_utts));

    // Crops, enrollment embeddings, and clean scores are all constant during
    // training: cache once.
    let mut crops: BTreeMap<UttId, Waveform> = BTreeMap::new();
    let mut embs: BTreeMap<UttId, Vec<f64>> = BTreeMap::new();
    for utt in sets.train_utts.iter().chain(&sets.validation_utts) {
        crops.insert(*utt, crop(corpus.wave(*utt), cfg.crop_frames, &stft_cfg));
        embs.insert(*utt, asv.embed(corpus.wave(*utt))?);
    }
    let mut clean_scores: BTreeMap<(UttId, UttId), f64> = BTreeMap::new();
    for &(t, e) in train_pairs.iter().chain(&val_pairs) {
        clean_scores.insert((t, e), asv.score_against(&crops[&t], &embs[&e])?);
    }

    let mut model =
        LmdModel::init(cfg.hidden, cfg.margin, cfg.lambda_s, cfg.lambda_b, cfg.seed);
    let mut adam = Adam::new(
        cfg.lr,
        &[model.w1.len(), model.b1.len(), model.w2.len(), model.b2.len()],
    );
    let mut rng = corpus::derive_rng(cfg.seed, &[0x4c4d445452]);
    let mut history = LmdTrainHistory::default();
    let mut best: Option<(f64, LmdModel, usize)> = None;

    let validate = |m: &LmdModel| -> Result<f64, DetectError> {
        let losses: Vec<Result<f64, DetectError>> = val_pairs
            .par_iter()
            .map(|&(t, e)| {
                lmd_item_loss(
                    m,
                    asv,
                    &crops[&t],
                    &embs[&e],
                    clean_scores[&(t, e)],
                    cfg.lambda_s,
                    cfg.lambda_b,
                    cfg.margin,
                )
            })
            .collect();
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / val_pairs.len().max(1) as f64)
    };

    for step in 0..cfg.steps {
        adam.lr = cfg.lr * cfg.lr_decay.powi((step / cfg.decay_every) as i32);
        let batch: Vec<(UttId, UttId)> = (0..cfg.batch)
            .map(|_| train_pairs[rng.gen_range(0..train_pairs.len())])
            .collect();

        let items: Vec<Result<LmdItemGrads, DetectError>> = batch
            .par_iter()
            .map(|&(t, e)| {
                lmd_item_backward(
                    &model,
                    asv,
                    &basis,
                    &crops[&t],
                    &embs[&e],
                    clean_scores[&(t, e)],
                    cfg.lambda_s,
                    cfg.lambda_b,
                    cfg.margin,
                )
            })
            .collect();

        // Ordered reduction keeps the update bit-deterministic regardless of
        // worker scheduling.
        let mut loss_sum = 0.0;
        let mut gsum: [Vec<f64>; 4] = [
            vec![0.0; model.w1.len()],
            vec![0.0; model.b1.len()],
            vec![0.0; model.w2.len()],
            vec![0.0; model.b2.len()],
        ];
        for item in items {
            let item = item?;
            loss_sum += item.loss;
            for (acc, g) in gsum.iter_mut().zip(&item.grads) {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        let batch_loss = loss_sum * inv;
        if !batch_loss.is_finite() {
            return Err(DetectError::Diverged(step));
        }
        history.train_loss.push(batch_loss);
        for g in gsum.iter_mut() {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        adam.step(
            &mut [
                &mut model.w1.data,
                &mut model.b1.data,
                &mut model.w2.data,
                &mut model.b2.data,
            ],
            &[Some(&gsum[0]), Some(&gsum[1]), Some(&gsum[2]), Some(&gsum[3])],
        );

        if !val_pairs.is_empty() && ((step + 1) % cfg.val_interval == 0 || step + 1 == cfg.steps) {
            let vl = validate(&model)?;
            history.validation_loss.push((step + 1, vl));
            if best.as_ref().map_or(true, |(b, _, _)| vl < *b) {
                best = Some((vl, model.clone(), step + 1));
            }
        }
    }

    if let Some((_, best_model, best_step)) = best {
        model = best_model;
        model.best_val_step = best_step;
        history.best_val_step = best_step;
    }
    Ok((model, history))
}

/// ASV EER over a trial list where every test utterance is transformed
/// before scoring (the purification view of the defense).
pub fn purification_eer(
    model: &AsvModel,
    detector: &DetectorKind,
    trials: &[(Waveform, Vec<f64>, bool)],
) -> Result<(f64, f64), DetectError> {
    let scored: Vec<Result<(f64, bool), DetectError>> = trials
        .par_iter()
        .map(|(test, enroll_emb, is_target)| {
            let transformed = transform(test, detector)?;
            Ok((model.score_against(&transformed, enroll_emb)?, *is_target))
        })
        .collect();
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for r in scored {
        let (s, is_target) = r?;
        if is_target {
            targets.push(s);
        } else {
            nontargets.push(s);
        }
    }
    Ok(crate::metrics::asv_eer(&targets, &nontargets).map_err(AsvError::from)?)
}
