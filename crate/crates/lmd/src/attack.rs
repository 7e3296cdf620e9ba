//! Adversarial example generation against the ASV: iterative sign-gradient
//! (BIM), L2 projected gradient (PGD), and the minimum-perturbation CW
//! formulation, each in impersonation or evasion mode, plus the adaptive
//! attack that differentiates through the detector transform and the
//! construction of the paired adversarial/genuine evaluation sets.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::asv::AsvModel;
use crate::corpus::{self, Corpus, Trial, TrialList, UttId, Waveform, AMP_MAX, AMP_MIN};
use crate::detect::{DetectError, DetectorKind};
use crate::diffgraph::{StftBasis, Tape, Tensor};
use crate::dsp::{self, StftConfig};
use std::sync::Arc;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Asv(#[from] crate::asv::AsvError),
    #[error(transparent)]
    Detect(#[from] Box<DetectError>),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error(transparent)]
    Diff(#[from] crate::diffgraph::DiffError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("goal {goal:?} does not apply to a {} trial", if *.is_target { "target" } else { "non-target" })]
    GoalMismatch { goal: AttackGoal, is_target: bool },
    #[error("bad attack config: {0}")]
    BadConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest line {0}: {1}")]
    BadManifest(usize, String),
}

impl From<DetectError> for AttackError {
    fn from(e: DetectError) -> Self {
        AttackError::Detect(Box::new(e))
    }
}

/// Attack direction. Impersonation pushes the score of a non-target trial up
/// (k = +1); evasion pushes a target trial's score down (k = −1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackGoal {
    Impersonation,
    Evasion,
}

impl AttackGoal {
    pub fn sign(self) -> f64 {
        match self {
            AttackGoal::Impersonation => 1.0,
            AttackGoal::Evasion => -1.0,
        }
    }

    /// The goal a trial admits: impersonation for non-target, evasion for
    /// target.
    pub fn for_trial(trial: &Trial) -> AttackGoal {
        if trial.is_target {
            AttackGoal::Evasion
        } else {
            AttackGoal::Impersonation
        }
    }

    pub fn check(self, trial: &Trial) -> Result<(), AttackError> {
        let ok = match self {
            AttackGoal::Impersonation => !trial.is_target,
            AttackGoal::Evasion => trial.is_target,
        };
        if ok {
            Ok(())
        } else {
            Err(AttackError::GoalMismatch { goal: self, is_target: trial.is_target })
        }
    }

    /// Strict decision crossing against η.
    pub fn crossed(self, score: f64, eta: f64) -> bool {
        match self {
            AttackGoal::Impersonation => score > eta,
            AttackGoal::Evasion => score < eta,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AttackGoal::Impersonation => "impersonation",
            AttackGoal::Evasion => "evasion",
        }
    }

    pub fn from_label(s: &str) -> Option<AttackGoal> {
        match s {
            "impersonation" => Some(AttackGoal::Impersonation),
            "evasion" => Some(AttackGoal::Evasion),
            _ => None,
        }
    }
}

/// One crafted adversarial utterance with its bookkeeping.
#[derive(Debug, Clone)]
pub struct AdversarialExample {
    pub waveform: Waveform,
    pub trial: Trial,
    pub goal: AttackGoal,
    /// SNR of the perturbation against the clean test utterance, dB.
    pub snr_db: f64,
    /// Strict η crossing of `final_score` in the goal direction.
    pub success: bool,
    /// The score the attack optimized (transformed score for adaptive runs).
    pub final_score: f64,
    /// Victim score on the raw (untransformed) waveform.
    pub raw_score: f64,
    pub iterations_used: usize,
    /// Final trade-off constant (CW only).
    pub cw_c: Option<f64>,
    /// PGD iterations skipped because the gradient vanished.
    pub zero_grad_skips: usize,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp_samples(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = v.clamp(AMP_MIN, AMP_MAX);
    }
}

fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// BIM core: N sign-gradient steps of size α inside the L∞ box of radius
/// ε = N·α, clipping to the box and then to amplitude range every iteration.
pub(crate) fn bim_engine<F>(
    x0: &[f64],
    k: f64,
    alpha: f64,
    n: usize,
    mut score_grad: F,
) -> Result<(Vec<f64>, usize), AttackError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), AttackError>,
{
    let eps = n as f64 * alpha;
    let mut x = x0.to_vec();
    for _ in 0..n {
        let (_, g) = score_grad(&x)?;
        for j in 0..x.len() {
            x[j] += k * alpha * sign(g[j]);
            x[j] = x[j].clamp(x0[j] - eps, x0[j] + eps);
        }
        clamp_samples(&mut x);
    }
    Ok((x, n))
}

/// BIM run to the largest grid N with snapshots at every grid point. The
/// iterate after k steps does not depend on N: each step moves a sample by at
/// most α, so the L∞ box of radius N·α never binds before step N and the
/// snapshot at k is exactly the output of an N=k run. `ns` must be strictly
/// increasing.
pub(crate) fn bim_engine_snapshots<F>(
    x0: &[f64],
    k: f64,
    alpha: f64,
    ns: &[usize],
    mut score_grad: F,
) -> Result<Vec<Vec<f64>>, AttackError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), AttackError>,
{
    let n_max = *ns.last().unwrap_or(&0);
    let mut x = x0.to_vec();
    let mut snaps = Vec::with_capacity(ns.len());
    let mut next = 0;
    for it in 0..=n_max {
        while next < ns.len() && ns[next] == it {
            snaps.push(x.clone());
            next += 1;
        }
        if it == n_max {
            break;
        }
        let (_, g) = score_grad(&x)?;
        for j in 0..x.len() {
            x[j] += k * alpha * sign(g[j]);
        }
        clamp_samples(&mut x);
    }
    Ok(snaps)
}

/// PGD core: seeded random start inside the L2 ball of radius ε = N·α, steps
/// along the L2-normalized gradient, projection back to the ball each
/// iteration. Vanishing gradients skip the step and are counted.
pub(crate) fn pgd_engine<F>(
    x0: &[f64],
    k: f64,
    alpha: f64,
    n: usize,
    rng: &mut ChaCha20Rng,
    mut score_grad: F,
) -> Result<(Vec<f64>, usize, usize), AttackError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), AttackError>,
{
    let eps = n as f64 * alpha;
    let mut x = x0.to_vec();
    if n > 0 {
        // Random start: gaussian direction, radius a uniform fraction of ε.
        let mut dir: Vec<f64> = (0..x.len())
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                (-2.0 * u1.ln()).sqrt() * u2.cos()
            })
            .collect();
        let norm = l2_norm(&dir);
        if norm > 0.0 {
            let r = eps * rng.gen_range(0.0..1.0);
            for (xi, d) in x.iter_mut().zip(dir.iter_mut()) {
                *xi += *d * r / norm;
            }
        }
        clamp_samples(&mut x);
    }
    let mut skips = 0;
    for _ in 0..n {
        let (_, g) = score_grad(&x)?;
        let gnorm = l2_norm(&g);
        if gnorm <= f64::MIN_POSITIVE {
            skips += 1;
            continue;
        }
        for j in 0..x.len() {
            x[j] += k * alpha * g[j] / gnorm;
        }
        // Project to the ball, then clamp; clamping toward in-range x0 never
        // grows the distance.
        let mut d: Vec<f64> = x.iter().zip(x0).map(|(a, b)| a - b).collect();
        let dn = l2_norm(&d);
        if dn > eps {
            let s = eps / dn;
            for v in d.iter_mut() {
                *v *= s;
            }
            for j in 0..x.len() {
                x[j] = x0[j] + d[j];
            }
        }
        clamp_samples(&mut x);
    }
    Ok((x, n, skips))
}

/// Hinge objective J of the CW formulation.
fn cw_hinge(score: f64, goal: AttackGoal, eta: f64, kappa: f64) -> f64 {
    match goal {
        AttackGoal::Impersonation => (eta + kappa - score).max(0.0),
        AttackGoal::Evasion => (score - (eta - kappa)).max(0.0),
    }
}

pub(crate) struct CwOutcome {
    pub x: Vec<f64>,
    pub success: bool,
    pub c: f64,
    pub iterations: usize,
}

/// CW core: minimize ‖δ‖₂/√L + c·J(x+δ) by plain gradient descent (step 0.5
/// on the 16-bit scale, ×0.8 decay on loss increase), binary-searching c —
/// halve on success, grow ×10 (bounded by 1e4) before the first success.
/// Returns the successful perturbation with the smallest RMS, else the last
/// attempt.
pub(crate) fn cw_engine<F>(
    x0: &[f64],
    goal: AttackGoal,
    eta: f64,
    kappa: f64,
    n: usize,
    n_bs: usize,
    mut score_grad: F,
) -> Result<CwOutcome, AttackError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), AttackError>,
{
    let len = x0.len() as f64;
    let sqrt_len = len.sqrt();
    let mut c = 0.01;
    let mut lower = 0.0_f64;
    let mut upper = 1e4_f64;
    let mut seen_success = false;
    let mut best: Option<(f64, Vec<f64>, f64)> = None; // (rms, x, c)
    let mut last = x0.to_vec();
    let mut iterations = 0;

    for _ in 0..n_bs {
        let mut x = x0.to_vec();
        let mut step = 0.5;
        let mut prev_loss = f64::INFINITY;
        let mut round_best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..n {
            iterations += 1;
            let (s, g) = score_grad(&x)?;
            let delta: Vec<f64> = x.iter().zip(x0).map(|(a, b)| a - b).collect();
            let dnorm = l2_norm(&delta);
            let j = cw_hinge(s, goal, eta, kappa);
            if j <= 1e-12 {
                let rms = dnorm / sqrt_len;
                if round_best.as_ref().map_or(true, |(r, _)| rms < *r) {
                    round_best = Some((rms, x.clone()));
                }
            }
            let loss = dnorm / sqrt_len + c * j;
            if loss > prev_loss {
                step *= 0.8;
            }
            prev_loss = loss;
            for jdx in 0..x.len() {
                let d_rms = if dnorm > 0.0 { delta[jdx] / (sqrt_len * dnorm) } else { 0.0 };
                let d_hinge = if j > 0.0 { -goal.sign() * g[jdx] } else { 0.0 };
                x[jdx] -= step * (d_rms + c * d_hinge);
            }
            clamp_samples(&mut x);
        }
        last = x.clone();
        if let Some((rms, xb)) = round_best {
            seen_success = true;
            if best.as_ref().map_or(true, |(r, _, _)| rms < *r) {
                best = Some((rms, xb, c));
            }
            upper = c;
            c = 0.5 * (lower + upper);
        } else {
            lower = c;
            if seen_success {
                c = 0.5 * (lower + upper);
            } else {
                c = (c * 10.0).min(upper);
            }
        }
    }

    Ok(match best {
        Some((_, x, c)) => CwOutcome { x, success: true, c, iterations },
        None => CwOutcome { x: last, success: false, c, iterations },
    })
}

/// Score-plus-gradient of the victim through an optional detector transform.
/// `Identity` short-circuits to the plain model gradient so a non-adaptive
/// attack and an adaptive attack with no transform are bit-identical.
fn transformed_score_grad(
    model: &AsvModel,
    detector: &DetectorKind,
    basis: &Arc<StftBasis>,
    enroll_emb: &[f64],
    samples: &[f64],
) -> Result<(f64, Vec<f64>), AttackError> {
    if matches!(detector, DetectorKind::Identity) {
        let wave = Waveform::new(samples.to_vec());
        return Ok(model.score_grad(&wave, enroll_emb)?);
    }
    let mut tape = Tape::new();
    let params = model.params_on_tape(&mut tape, false)?;
    let x = tape.leaf(Tensor::vector(samples.to_vec()))?;
    let spec = tape.stft(x, Arc::clone(basis))?;
    let masked = match detector {
        DetectorKind::Lmd(lmd) => {
            let lmd_params = lmd.params_on_tape(&mut tape, false)?;
            let mask = lmd.mask_graph(&mut tape, spec, &lmd_params)?;
            tape.mask_apply(spec, mask)?
        }
        det => {
            // Hand-crafted masks are piecewise constant in the input:
            // recompute per iteration, differentiate through the product only.
            let wave = Waveform::new(samples.to_vec());
            let concrete = dsp::stft(&wave, &StftConfig::detector())?;
            let mask = det.mask_for(&concrete)?;
            let shape = if mask.planes == 1 {
                vec![mask.n_bins, mask.n_frames]
            } else {
                vec![2, mask.n_bins, mask.n_frames]
            };
            let m = tape.constant(Tensor::new(shape, mask.values.clone()))?;
            tape.mask_apply(spec, m)?
        }
    };
    let xhat = tape.istft(masked, Arc::clone(basis), samples.len())?;
    let emb = model.embedding_graph(&mut tape, xhat, &params)?;
    let enroll = tape.constant(Tensor::vector(enroll_emb.to_vec()))?;
    let s = tape.dot(emb, enroll)?;
    let score = tape.value(s).item();
    let grads = tape.backward(s)?;
    let g = grads.wrt(x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; samples.len()]);
    Ok((score, g))
}

/// Which iterative attack to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackAlgorithm {
    Bim,
    Pgd,
    Cw,
}

/// Settings for one attack invocation.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub algorithm: AttackAlgorithm,
    /// Step on the 16-bit sample scale (1 for BIM, 300 for PGD).
    pub alpha: f64,
    pub n_iters: usize,
    /// Confidence margin (CW).
    pub kappa: f64,
    /// Binary-search rounds over the CW trade-off constant.
    pub n_binary_search: usize,
    /// Differentiate through this transform (adaptive attack).
    pub detector: DetectorKind,
    pub seed: u64,
}

impl AttackConfig {
    pub fn bim(n: usize) -> Self {
        AttackConfig {
            algorithm: AttackAlgorithm::Bim,
            alpha: 1.0,
            n_iters: n,
            kappa: 0.0,
            n_binary_search: 9,
            detector: DetectorKind::Identity,
            seed: 0,
        }
    }

    pub fn pgd(n: usize, seed: u64) -> Self {
        AttackConfig { algorithm: AttackAlgorithm::Pgd, alpha: 300.0, n_iters: n, seed, ..Self::bim(n) }
    }

    pub fn cw(kappa: f64, n: usize, n_bs: usize) -> Self {
        AttackConfig {
            algorithm: AttackAlgorithm::Cw,
            kappa,
            n_iters: n,
            n_binary_search: n_bs,
            ..Self::bim(0)
        }
    }

    fn validate(&self) -> Result<(), AttackError> {
        if self.alpha <= 0.0 {
            return Err(AttackError::BadConfig(format!("alpha {} must be > 0", self.alpha)));
        }
        if self.kappa < 0.0 {
            return Err(AttackError::BadConfig(format!("kappa {} must be >= 0", self.kappa)));
        }
        Ok(())
    }
}

/// Run one attack on one trial. `grad_model` supplies gradients (the
/// substitute model in the black-box scenario); `victim` supplies the
/// untransformed score recorded alongside.
pub fn attack_trial(
    corpus: &Corpus,
    trial: Trial,
    grad_model: &AsvModel,
    victim: &AsvModel,
    goal: AttackGoal,
    eta: f64,
    cfg: &AttackConfig,
) -> Result<AdversarialExample, AttackError> {
    goal.check(&trial)?;
    cfg.validate()?;
    let test = corpus.wave(trial.test);
    let enroll_emb = grad_model.embed(corpus.wave(trial.enroll))?;
    let basis = Arc::new(StftBasis::new(StftConfig::detector())?);
    let sg = |x: &[f64]| transformed_score_grad(grad_model, &cfg.detector, &basis, &enroll_emb, x);

    let (samples, iterations, skips, cw_c, cw_success) = match cfg.algorithm {
        AttackAlgorithm::Bim => {
            let (x, it) = bim_engine(&test.samples, goal.sign(), cfg.alpha, cfg.n_iters, sg)?;
            (x, it, 0, None, None)
        }
        AttackAlgorithm::Pgd => {
            let mut rng = corpus::derive_rng(
                cfg.seed,
                &[0x504744, trial.test.speaker as u64, trial.test.utt as u64, trial.enroll.speaker as u64, trial.enroll.utt as u64],
            );
            let (x, it, skips) =
                pgd_engine(&test.samples, goal.sign(), cfg.alpha, cfg.n_iters, &mut rng, sg)?;
            (x, it, skips, None, None)
        }
        AttackAlgorithm::Cw => {
            let out = cw_engine(
                &test.samples,
                goal,
                eta,
                cfg.kappa,
                cfg.n_iters,
                cfg.n_binary_search,
                sg,
            )?;
            (out.x, out.iterations, 0, Some(out.c), Some(out.success))
        }
    };

    let waveform = Waveform::new(samples);
    let snr_db = dsp::snr_db(test, &waveform)?;
    // Score the crafted input the way the attack sees it (through the
    // transform when adaptive) on the victim; keep the raw score as well.
    let victim_emb = if std::ptr::eq(grad_model, victim) {
        enroll_emb.clone()
    } else {
        victim.embed(corpus.wave(trial.enroll))?
    };
    let raw_score = victim.score_against(&waveform, &victim_emb)?;
    let final_score = if matches!(cfg.detector, DetectorKind::Identity) {
        raw_score
    } else {
        let transformed = crate::detect::transform(&waveform, &cfg.detector)?;
        victim.score_against(&transformed, &victim_emb)?
    };
    Ok(AdversarialExample {
        waveform,
        trial,
        goal,
        snr_db,
        // CW success means the κ-margin held at the returned perturbation;
        // the iterative attacks flip the decision strictly at η.
        success: cw_success.unwrap_or_else(|| goal.crossed(final_score, eta)),
        final_score,
        raw_score,
        iterations_used: iterations,
        cw_c,
        zero_grad_skips: skips,
    })
}

/// Genuine counterpart of an adversarial example: the clean utterance plus
/// white noise matched to the same SNR.
#[derive(Debug, Clone)]
pub struct GenuineExample {
    pub waveform: Waveform,
    pub trial: Trial,
    pub snr_db: f64,
}

/// One grid point's adversarial set 𝒜_i and its SNR-matched genuine set 𝒢_i.
#[derive(Debug, Clone)]
pub struct AdvSet {
    pub label: String,
    pub examples: Vec<AdversarialExample>,
    pub genuine: Vec<GenuineExample>,
}

/// The attack grids of the evaluation protocol.
#[derive(Debug, Clone)]
pub enum AttackGrid {
    BimN(Vec<usize>),
    PgdN(Vec<usize>),
    CwKappa(Vec<f64>),
}

impl AttackGrid {
    pub fn points(&self) -> Vec<(String, AttackConfig)> {
        match self {
            AttackGrid::BimN(ns) => ns
                .iter()
                .map(|&n| (format!("bim-n{n}"), AttackConfig::bim(n)))
                .collect(),
            AttackGrid::PgdN(ns) => ns
                .iter()
                .map(|&n| (format!("pgd-n{n}"), AttackConfig::pgd(n, 0)))
                .collect(),
            AttackGrid::CwKappa(ks) => ks
                .iter()
                .map(|&k| (format!("cw-k{k}"), AttackConfig::cw(k, 100, 9)))
                .collect(),
        }
    }
}

/// Build 𝒜_i over every attack-list trial for each grid point, with the
/// matched-noise 𝒢_i. Per-trial work runs in parallel under derived seeds;
/// outputs are order-preserving and deterministic.
pub fn build_adversarial_sets(
    corpus: &Corpus,
    attack_list: &TrialList,
    grad_model: &AsvModel,
    victim: &AsvModel,
    eta: f64,
    grid: &AttackGrid,
    seed: u64,
) -> Result<Vec<AdvSet>, AttackError> {
    if let AttackGrid::BimN(ns) = grid {
        // Ascending BIM grids share one run per trial (see bim_engine_snapshots).
        if !ns.is_empty() && ns.windows(2).all(|w| w[0] < w[1]) {
            return build_bim_grid(corpus, attack_list, grad_model, victim, eta, ns, seed);
        }
    }
    let mut sets = Vec::new();
    for (gi, (label, mut cfg)) in grid.points().into_iter().enumerate() {
        cfg.seed = seed;
        let examples: Vec<Result<AdversarialExample, AttackError>> = attack_list
            .trials
            .par_iter()
            .map(|&trial| {
                let goal = AttackGoal::for_trial(&trial);
                attack_trial(corpus, trial, grad_model, victim, goal, eta, &cfg)
            })
            .collect();
        let mut set = AdvSet { label, examples: Vec::new(), genuine: Vec::new() };
        for (ti, ex) in examples.into_iter().enumerate() {
            let ex = ex?;
            let clean = corpus.wave(ex.trial.test);
            let noise_seed = seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((gi as u64) << 32 | ti as u64);
            let noisy = dsp::add_white_noise_at_snr(clean, ex.snr_db, noise_seed);
            let snr = dsp::snr_db(clean, &noisy)?;
            set.genuine.push(GenuineExample { waveform: noisy, trial: ex.trial, snr_db: snr });
            set.examples.push(ex);
        }
        sets.push(set);
    }
    Ok(sets)
}

fn finish_bim_example(
    corpus: &Corpus,
    trial: Trial,
    goal: AttackGoal,
    eta: f64,
    victim: &AsvModel,
    victim_emb: &[f64],
    samples: Vec<f64>,
    iterations: usize,
) -> Result<AdversarialExample, AttackError> {
    let test = corpus.wave(trial.test);
    let waveform = Waveform::new(samples);
    let snr_db = dsp::snr_db(test, &waveform)?;
    let raw_score = victim.score_against(&waveform, victim_emb)?;
    Ok(AdversarialExample {
        waveform,
        trial,
        goal,
        snr_db,
        success: goal.crossed(raw_score, eta),
        final_score: raw_score,
        raw_score,
        iterations_used: iterations,
        cw_c: None,
        zero_grad_skips: 0,
    })
}

fn build_bim_grid(
    corpus: &Corpus,
    attack_list: &TrialList,
    grad_model: &AsvModel,
    victim: &AsvModel,
    eta: f64,
    ns: &[usize],
    seed: u64,
) -> Result<Vec<AdvSet>, AttackError> {
    let alpha = AttackConfig::bim(0).alpha;
    let per_trial: Vec<Result<Vec<AdversarialExample>, AttackError>> = attack_list
        .trials
        .par_iter()
        .map(|&trial| {
            let goal = AttackGoal::for_trial(&trial);
            goal.check(&trial)?;
            let test = corpus.wave(trial.test);
            let enroll_emb = grad_model.embed(corpus.wave(trial.enroll))?;
            let sg = |x: &[f64]| {
                let wave = Waveform::new(x.to_vec());
                Ok(grad_model.score_grad(&wave, &enroll_emb)?)
            };
            let snaps = bim_engine_snapshots(&test.samples, goal.sign(), alpha, ns, sg)?;
            let victim_emb = if std::ptr::eq(grad_model, victim) {
                enroll_emb.clone()
            } else {
                victim.embed(corpus.wave(trial.enroll))?
            };
            snaps
                .into_iter()
                .zip(ns)
                .map(|(x, &n)| {
                    finish_bim_example(corpus, trial, goal, eta, victim, &victim_emb, x, n)
                })
                .collect()
        })
        .collect();
    let mut sets: Vec<AdvSet> = ns
        .iter()
        .map(|n| AdvSet { label: format!("bim-n{n}"), examples: Vec::new(), genuine: Vec::new() })
        .collect();
    for (ti, exs) in per_trial.into_iter().enumerate() {
        for (gi, ex) in exs?.into_iter().enumerate() {
            let clean = corpus.wave(ex.trial.test);
            let noise_seed = seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((gi as u64) << 32 | ti as u64);
            let noisy = dsp::add_white_noise_at_snr(clean, ex.snr_db, noise_seed);
            let snr = dsp::snr_db(clean, &noisy)?;
            sets[gi].genuine.push(GenuineExample { waveform: noisy, trial: ex.trial, snr_db: snr });
            sets[gi].examples.push(ex);
        }
    }
    Ok(sets)
}

/// Persist a set as WAV files plus a manifest.
pub fn write_adv_set(dir: &Path, set: &AdvSet) -> Result<(), AttackError> {
    let io_err = |path: &Path, source: std::io::Error| AttackError::Io {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest_path = dir.join("manifest.txt");
    let mut manifest =
        std::fs::File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    writeln!(manifest, "# wav test enroll target goal grid snr success score")
        .map_err(|e| io_err(&manifest_path, e))?;
    for (i, (ex, gen)) in set.examples.iter().zip(&set.genuine).enumerate() {
        for (prefix, wave, snr, success, score) in [
            ("adv", &ex.waveform, ex.snr_db, ex.success, ex.final_score),
            ("gen", &gen.waveform, gen.snr_db, false, f64::NAN),
        ] {
            let name = format!("{prefix}{i:04}.wav");
            corpus::write_wav(&dir.join(&name), wave)?;
            writeln!(
                manifest,
                "{name} {} {} {} {} {} {:.6} {} {:.6}",
                ex.trial.test,
                ex.trial.enroll,
                ex.trial.is_target as u8,
                ex.goal.label(),
                set.label,
                snr,
                success as u8,
                score,
            )
            .map_err(|e| io_err(&manifest_path, e))?;
        }
    }
    Ok(())
}

/// Reload a persisted set. Scores and flags come back from the manifest; the
/// waveforms from the WAV files.
pub fn read_adv_set(dir: &Path) -> Result<AdvSet, AttackError> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path).map_err(|source| AttackError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let mut set = AdvSet { label: String::new(), examples: Vec::new(), genuine: Vec::new() };
    for (no, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let bad = || AttackError::BadManifest(no + 1, line.to_string());
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(bad());
        }
        let parse_utt = |s: &str| UttId::from_rel_path(&format!("{s}.wav")).ok_or_else(bad);
        let trial = Trial {
            test: parse_utt(fields[1])?,
            enroll: parse_utt(fields[2])?,
            is_target: fields[3] == "1",
        };
        let wave = corpus::read_wav(&dir.join(fields[0]))?;
        let snr_db: f64 = fields[6].parse().map_err(|_| bad())?;
        set.label = fields[5].to_string();
        if fields[0].starts_with("adv") {
            set.examples.push(AdversarialExample {
                waveform: wave,
                trial,
                goal: AttackGoal::from_label(fields[4]).ok_or_else(bad)?,
                snr_db,
                success: fields[7] == "1",
                final_score: fields[8].parse().map_err(|_| bad())?,
                raw_score: f64::NAN,
                iterations_used: 0,
                cw_c: None,
                zero_grad_skips: 0,
            });
        } else {
            set.genuine.push(GenuineExample { waveform: wave, trial, snr_db });
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asv::FeatureConfig;
    use crate::corpus::{synth_speaker, synth_utterance, SAMPLE_RATE};
    use rand::SeedableRng;

    fn test_wave(seed: u64, duration: f64) -> Waveform {
        let profile = synth_speaker(500 + seed, (seed % 8) as u32);
        synth_utterance(&profile, duration, seed).unwrap()
    }

    fn small_asv(seed: u64) -> AsvModel {
        AsvModel::init(FeatureConfig::default(), 8, 8, seed).unwrap()
    }

    fn tiny_setup() -> (Corpus, AsvModel) {
        let corpus = Corpus::synthesize(31, 4, 3, 0.5).unwrap();
        (corpus, small_asv(12))
    }

    fn non_target_trial() -> Trial {
        Trial {
            test: UttId { speaker: 0, utt: 0 },
            enroll: UttId { speaker: 1, utt: 0 },
            is_target: false,
        }
    }

    #[test]
    fn goal_trial_compatibility() {
        let t = non_target_trial();
        assert!(AttackGoal::Impersonation.check(&t).is_ok());
        assert!(matches!(
            AttackGoal::Evasion.check(&t),
            Err(AttackError::GoalMismatch { .. })
        ));
        assert_eq!(AttackGoal::for_trial(&t), AttackGoal::Impersonation);
    }

    #[test]
    fn bim_zero_iterations_is_identity() {
        let (corpus, model) = tiny_setup();
        let ex = attack_trial(
            &corpus,
            non_target_trial(),
            &model,
            &model,
            AttackGoal::Impersonation,
            0.0,
            &AttackConfig::bim(0),
        )
        .unwrap();
        assert_eq!(ex.waveform.samples, corpus.wave(ex.trial.test).samples);
        assert_eq!(ex.snr_db, dsp::SNR_CAP_DB);
    }

    #[test]
    fn bim_respects_linf_budget() {
        let (corpus, model) = tiny_setup();
        let trial = non_target_trial();
        let ex = attack_trial(
            &corpus,
            trial,
            &model,
            &model,
            AttackGoal::Impersonation,
            0.0,
            &AttackConfig::bim(5),
        )
        .unwrap();
        let clean = corpus.wave(trial.test);
        let max_dev = ex
            .waveform
            .samples
            .iter()
            .zip(&clean.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(max_dev <= 5.0 + 1e-12, "L-inf {max_dev}");
        assert!(max_dev > 0.0, "attack moved nothing");
    }

    #[test]
    fn bim_engine_climbs_a_quadratic_score() {
        // Score = −‖x − target‖²: sign steps must strictly increase it.
        let target = vec![10.0; 8];
        let x0 = vec![0.0; 8];
        let score = |x: &[f64]| {
            let s: f64 = -x.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let g: Vec<f64> = x.iter().zip(&target).map(|(a, b)| -2.0 * (a - b)).collect();
            Ok((s, g))
        };
        let (x, _) = bim_engine(&x0, 1.0, 1.0, 5, score).unwrap();
        assert!(x.iter().all(|&v| (v - 5.0).abs() < 1e-12), "{x:?}");
    }

    #[test]
    fn bim_grid_snapshots_match_single_runs() {
        let (corpus, model) = tiny_setup();
        let trials = vec![
            non_target_trial(),
            Trial {
                test: UttId { speaker: 2, utt: 1 },
                enroll: UttId { speaker: 2, utt: 0 },
                is_target: true,
            },
        ];
        let list = TrialList { trials, role: corpus::TrialRole::Attack };
        let ns = vec![2usize, 5];
        let sets = build_adversarial_sets(
            &corpus,
            &list,
            &model,
            &model,
            0.0,
            &AttackGrid::BimN(ns.clone()),
            7,
        )
        .unwrap();
        for (set, &n) in sets.iter().zip(&ns) {
            assert_eq!(set.label, format!("bim-n{n}"));
            for (ex, trial) in set.examples.iter().zip(&list.trials) {
                let single = attack_trial(
                    &corpus,
                    *trial,
                    &model,
                    &model,
                    AttackGoal::for_trial(trial),
                    0.0,
                    &AttackConfig::bim(n),
                )
                .unwrap();
                assert_eq!(ex.waveform.samples, single.waveform.samples);
                assert_eq!(ex.raw_score, single.raw_score);
                assert_eq!(ex.success, single.success);
                assert_eq!(ex.iterations_used, n);
            }
        }
    }

    #[test]
    fn pgd_holds_l2_budget_and_reproduces() {
        let (corpus, model) = tiny_setup();
        let trial = non_target_trial();
        let cfg = AttackConfig { n_iters: 3, seed: 9, ..AttackConfig::pgd(3, 9) };
        let run = || {
            attack_trial(
                &corpus,
                trial,
                &model,
                &model,
                AttackGoal::Impersonation,
                0.0,
                &cfg,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.waveform.samples, b.waveform.samples, "same seed, same output");
        let clean = corpus.wave(trial.test);
        let dist = l2_norm(
            &a.waveform
                .samples
                .iter()
                .zip(&clean.samples)
                .map(|(x, y)| x - y)
                .collect::<Vec<f64>>(),
        );
        assert!(dist <= 3.0 * 300.0 + 1e-6, "L2 {dist}");
    }

    #[test]
    fn pgd_zero_gradient_skips_are_counted() {
        let x0 = vec![0.0; 16];
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (x, _, skips) =
            pgd_engine(&x0, 1.0, 10.0, 4, &mut rng, |_| Ok((0.0, vec![0.0; 16]))).unwrap();
        assert_eq!(skips, 4);
        // Only the random start moved the point.
        assert!(l2_norm(&x) <= 40.0 + 1e-6);
    }

    #[test]
    fn cw_reaches_the_hinge_on_a_linear_score() {
        // s(x) = a·(x − x0)/‖a‖² + s0 with s0 far below η+κ.
        let len = 32;
        let a: Vec<f64> = (0..len).map(|i| ((i * 7 + 1) % 5) as f64 - 2.0).collect();
        let a2: f64 = a.iter().map(|v| v * v).sum();
        let x0 = vec![0.0; len];
        let s0 = -0.5;
        let eta = 0.0;
        let kappa = 0.1;
        let score = |x: &[f64]| {
            let s = s0 + x.iter().zip(&a).map(|(v, w)| v * w).sum::<f64>() / a2;
            Ok((s, a.iter().map(|w| w / a2).collect()))
        };
        let out = cw_engine(&x0, AttackGoal::Impersonation, eta, kappa, 60, 9, score).unwrap();
        assert!(out.success);
        let (s, _) = score(&out.x).unwrap();
        assert!(s >= eta + kappa - 1e-6, "final score {s}");
    }

    #[test]
    fn cw_trivial_success_at_zero_perturbation() {
        // Already above η+κ: the hinge is zero at δ=0, so the returned RMS is
        // near zero and success holds immediately.
        let x0 = vec![100.0; 8];
        let score = |_: &[f64]| Ok((0.9, vec![0.0; 8]));
        let out = cw_engine(&x0, AttackGoal::Impersonation, 0.0, 0.1, 10, 3, score).unwrap();
        assert!(out.success);
        assert_eq!(out.x, x0, "no perturbation needed");
    }

    #[test]
    fn adaptive_identity_matches_plain_bim() {
        let (corpus, model) = tiny_setup();
        let trial = non_target_trial();
        let plain = attack_trial(
            &corpus,
            trial,
            &model,
            &model,
            AttackGoal::Impersonation,
            0.0,
            &AttackConfig::bim(2),
        )
        .unwrap();
        let adaptive_cfg = AttackConfig {
            detector: DetectorKind::Identity,
            ..AttackConfig::bim(2)
        };
        let adaptive = attack_trial(
            &corpus,
            trial,
            &model,
            &model,
            AttackGoal::Impersonation,
            0.0,
            &adaptive_cfg,
        )
        .unwrap();
        assert_eq!(plain.waveform.samples, adaptive.waveform.samples);
    }

    #[test]
    fn adaptive_transform_gradient_matches_finite_differences() {
        use crate::diffgraph::grad_check;
        let model = small_asv(13);
        let lmd = crate::detect::LmdModel::init(3, 0.05, 1.0, 15.0, 14);
        let test = test_wave(1, 0.5);
        let enroll_emb = model.embed(&test_wave(2, 0.5)).unwrap();
        let basis = Arc::new(StftBasis::new(StftConfig::detector()).unwrap());
        let m = model.clone();
        let emb = enroll_emb.clone();
        let err = grad_check(
            move |tape, l| {
                let params = m.params_on_tape(tape, false)?;
                let lmd_params = lmd.params_on_tape(tape, false)?;
                let spec = tape.stft(l[0], Arc::clone(&basis))?;
                let mask = lmd.mask_graph(tape, spec, &lmd_params)?;
                let masked = tape.mask_apply(spec, mask)?;
                let xhat = tape.istft(masked, Arc::clone(&basis), tape.value(l[0]).len())?;
                let e = m.embedding_graph(tape, xhat, &params)?;
                let c = tape.constant(Tensor::vector(emb.clone()))?;
                tape.dot(e, c)
            },
            &[Tensor::vector(test.samples.clone())],
            0,
            6,
            1e-3,
            21,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn adversarial_sets_pair_snr_matched_genuine() {
        let corpus = Corpus::synthesize(41, 4, 3, 0.5).unwrap();
        let model = small_asv(15);
        let trials = vec![
            Trial {
                test: UttId { speaker: 0, utt: 0 },
                enroll: UttId { speaker: 1, utt: 0 },
                is_target: false,
            },
            Trial {
                test: UttId { speaker: 2, utt: 1 },
                enroll: UttId { speaker: 2, utt: 2 },
                is_target: true,
            },
        ];
        let list = TrialList { trials, role: crate::corpus::TrialRole::Attack };
        let sets = build_adversarial_sets(
            &corpus,
            &list,
            &model,
            &model,
            0.0,
            &AttackGrid::BimN(vec![1, 2]),
            5,
        )
        .unwrap();
        assert_eq!(sets.len(), 2);
        for set in &sets {
            assert_eq!(set.examples.len(), 2);
            assert_eq!(set.genuine.len(), 2);
            for (ex, gen) in set.examples.iter().zip(&set.genuine) {
                assert_eq!(ex.trial, gen.trial);
                assert!(
                    (ex.snr_db - gen.snr_db).abs() <= 0.1,
                    "snr mismatch {} vs {}",
                    ex.snr_db,
                    gen.snr_db
                );
            }
        }
        // Both goals exercised per the trial types.
        assert_eq!(sets[0].examples[0].goal, AttackGoal::Impersonation);
        assert_eq!(sets[0].examples[1].goal, AttackGoal::Evasion);
    }

    #[test]
    fn adv_set_round_trips_through_disk() {
        let corpus = Corpus::synthesize(43, 4, 3, 0.5).unwrap();
        let model = small_asv(16);
        let list = TrialList {
            trials: vec![non_target_trial()],
            role: crate::corpus::TrialRole::Attack,
        };
        let sets = build_adversarial_sets(
            &corpus,
            &list,
            &model,
            &model,
            0.0,
            &AttackGrid::BimN(vec![2]),
            6,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_adv_set(dir.path(), &sets[0]).unwrap();
        let back = read_adv_set(dir.path()).unwrap();
        assert_eq!(back.label, sets[0].label);
        assert_eq!(back.examples.len(), 1);
        assert_eq!(back.genuine.len(), 1);
        assert_eq!(back.examples[0].trial, sets[0].examples[0].trial);
        assert_eq!(back.examples[0].success, sets[0].examples[0].success);
        // WAV quantization: samples already integral, so they round-trip.
        let orig: Vec<f64> = sets[0].examples[0].waveform.samples.iter().map(|v| v.round()).collect();
        assert_eq!(back.examples[0].waveform.samples, orig);
        let _ = SAMPLE_RATE;
    }
}
