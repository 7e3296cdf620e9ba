//! Deterministic synthetic multi-speaker corpus: speaker profiles, formant
//! synthesis, WAV I/O, and attack/eval/train trial-list construction.
//!
//! All artifacts are pure functions of their seeds; two runs with equal seeds
//! produce bit-identical waveforms and lists.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed corpus sample rate. The 25 ms / 10 ms framing with FFT 512 assumes it.
pub const SAMPLE_RATE: u32 = 16_000;
/// Samples live on the signed-16-bit amplitude scale.
pub const AMP_MAX: f64 = 32767.0;
pub const AMP_MIN: f64 = -32768.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("utterance duration {0} s outside [0.5, 5.0]")]
    DurationOutOfRange(f64),
    #[error("unsupported channel count {0} (mono required)")]
    UnsupportedChannels(u16),
    #[error("unsupported wav format: {0}")]
    UnsupportedFormat(String),
    #[error("insufficient utterances: {0}")]
    InsufficientUtterances(String),
    #[error("invalid trial list line {line}: {reason}")]
    BadTrialLine { line: usize, reason: String },
    #[error("wav i/o: {0}")]
    Wav(#[from] hound::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Mono audio on the signed-16-bit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Waveform { samples, sample_rate: SAMPLE_RATE }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Clamp every sample into the representable 16-bit range.
    pub fn clamp_amplitude(&mut self) {
        for s in &mut self.samples {
            *s = s.clamp(AMP_MIN, AMP_MAX);
        }
    }

    pub fn power(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len().max(1) as f64
    }
}

/// Per-speaker synthesis signature. Deterministic in (corpus seed, speaker id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    /// Base fundamental frequency, Hz. In [80, 300].
    pub f0_base: f64,
    /// Three formant resonators: (center Hz, bandwidth Hz), strictly increasing centers.
    pub formants: [(f64, f64); 3],
    /// Spectral tilt in dB per octave (negative).
    pub spectral_tilt: f64,
    pub vibrato_rate: f64,
    /// Vibrato depth in cents.
    pub vibrato_depth: f64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha20 stream from a root seed and a list of salts.
pub fn derive_rng(root: u64, salts: &[u64]) -> ChaCha20Rng {
    let mut state = splitmix64(root);
    for &s in salts {
        state = splitmix64(state ^ s.wrapping_mul(0xd1b54a32d192ed03));
    }
    ChaCha20Rng::seed_from_u64(state)
}

/// Deterministic speaker profile. Distinct ids land in distinct f0 slots
/// (ids 0..15) and distinct formant grid cells, so profiles are well
/// separated. Slot order interleaves low and high ids so that any
/// contiguous id range (e.g. a train/eval speaker split) spans the full
/// f0 and formant ranges rather than a disjoint band.
pub fn synth_speaker(corpus_seed: u64, speaker_id: u32) -> SpeakerProfile {
    let mut rng = derive_rng(corpus_seed, &[0x5350_4b52, speaker_id as u64]);
    let id = speaker_id as u64;
    let slot = ((id % 4) * 2 + (id / 4) % 2 + 8 * ((id / 8) % 2)) as f64;
    let f0_base = 85.0 + 13.5 * slot + rng.gen_range(0.0..4.0);

    let f1 = 320.0 + 60.0 * ((id * 3 + 3) % 8) as f64 + rng.gen_range(0.0..30.0);
    let f2 = 1000.0 + 90.0 * ((id * 5 + 1) % 12) as f64 + rng.gen_range(0.0..40.0);
    let f3 = 2300.0 + 110.0 * ((id * 3 + 2) % 9) as f64 + rng.gen_range(0.0..50.0);
    let b1 = 60.0 + rng.gen_range(0.0..40.0);
    let b2 = 90.0 + rng.gen_range(0.0..60.0);
    let b3 = 120.0 + rng.gen_range(0.0..80.0);

    SpeakerProfile {
        speaker_id,
        f0_base,
        formants: [(f1, b1), (f2, b2), (f3, b3)],
        spectral_tilt: -(6.0 + rng.gen_range(0.0..6.0)),
        // Vibrato rate and depth follow their own slot grids (different
        // permutations than f0) so every speaker also carries a distinct
        // temporal signature, not just a distinct static spectrum.
        vibrato_rate: 3.0 + 0.32 * ((id * 5 + 2) % 16) as f64 + rng.gen_range(0.0..0.12),
        vibrato_depth: 18.0 + 2.1 * ((id * 11 + 5) % 16) as f64 + rng.gen_range(0.0..1.5),
    }
}

fn formant_gain(profile: &SpeakerProfile, freq: f64) -> f64 {
    let mut g = 0.05;
    for &(fc, bw) in &profile.formants {
        let d = (freq - fc) / bw;
        g += 1.0 / (1.0 + d * d);
    }
    g
}

/// Harmonic formant synthesis with a per-utterance random f0 contour and a
/// low-level noise floor. Peak amplitude ≤ 0.5 · 32767.
pub fn synth_utterance(
    profile: &SpeakerProfile,
    duration_s: f64,
    utt_seed: u64,
) -> Result<Waveform, CorpusError> {
    if !(0.5..=5.0).contains(&duration_s) {
        return Err(CorpusError::DurationOutOfRange(duration_s));
    }
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut rng = derive_rng(utt_seed, &[0x5554_5452, profile.speaker_id as u64]);

    // Slow random f0 drift: cubic-ish blend of three control points.
    let c0: f64 = rng.gen_range(-1.0..1.0);
    let c1: f64 = rng.gen_range(-1.0..1.0);
    let c2: f64 = rng.gen_range(-1.0..1.0);
    let vib_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

    let n_harm = ((7600.0 / profile.f0_base).floor() as usize).max(1);
    let mut harm_amp = vec![0.0f64; n_harm + 1];
    let mut harm_phase = vec![0.0f64; n_harm + 1];
    for h in 1..=n_harm {
        let f = h as f64 * profile.f0_base;
        let tilt = 10f64.powf(profile.spectral_tilt * (f / profile.f0_base).log2() / 20.0);
        harm_amp[h] = tilt * formant_gain(profile, f);
        harm_phase[h] = rng.gen_range(0.0..std::f64::consts::TAU);
    }

    let dt = 1.0 / SAMPLE_RATE as f64;
    let mut phase = 0.0f64;
    let mut samples = vec![0.0f64; n];
    for (i, out) in samples.iter_mut().enumerate() {
        let t = i as f64 * dt;
        let u = t / duration_s;
        // Quadratic Bezier drift in [-1, 1].
        let drift = (1.0 - u) * (1.0 - u) * c0 + 2.0 * u * (1.0 - u) * c1 + u * u * c2;
        let vib = (profile.vibrato_depth
            * (std::f64::consts::TAU * profile.vibrato_rate * t + vib_phase).sin())
            / 1200.0;
        let f0 = profile.f0_base * (1.0 + 0.03 * drift) * 2f64.powf(vib);
        phase += std::f64::consts::TAU * f0 * dt;
        let mut s = 0.0;
        for h in 1..=n_harm {
            s += harm_amp[h] * (h as f64 * phase + harm_phase[h]).sin();
        }
        *out = s;
    }

    let peak = samples.iter().fold(0.0f64, |m, &s| m.max(s.abs())).max(1e-12);
    let target_peak = 0.35 * AMP_MAX;
    let scale = target_peak / peak;
    let noise_amp = 0.002 * target_peak;
    for s in &mut samples {
        let noise: f64 = rng.sample(rand::distributions::Standard);
        *s = *s * scale + noise_amp * (noise - 0.5) * 2.0;
    }
    let mut w = Waveform::new(samples);
    w.clamp_amplitude();
    Ok(w)
}

/// Reference to one corpus utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UttId {
    pub speaker: u32,
    pub utt: u32,
}

impl fmt::Display for UttId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "spk{:03}/utt{:03}", self.speaker, self.utt)
    }
}

impl UttId {
    /// Relative WAV path under a corpus directory.
    pub fn rel_path(&self) -> PathBuf {
        PathBuf::from(format!("spk{:03}/utt{:03}.wav", self.speaker, self.utt))
    }

    pub fn from_rel_path(p: &str) -> Option<UttId> {
        let p = p.strip_suffix(".wav")?;
        let (spk, utt) = p.split_once('/')?;
        Some(UttId {
            speaker: spk.strip_prefix("spk")?.parse().ok()?,
            utt: utt.strip_prefix("utt")?.parse().ok()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub test: UttId,
    pub enroll: UttId,
    pub is_target: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialRole {
    Attack,
    Eval,
    AsvTrain,
    AsvValidation,
}

#[derive(Debug, Clone)]
pub struct TrialList {
    pub trials: Vec<Trial>,
    pub role: TrialRole,
}

/// The four lists of the experimental protocol plus the utterance pools
/// backing the train/validation split.
#[derive(Debug, Clone)]
pub struct TrialSets {
    pub attack: TrialList,
    pub eval: TrialList,
    pub train: TrialList,
    pub validation: TrialList,
    /// Utterances available for training (detector-half speakers), 19 parts.
    pub train_utts: Vec<UttId>,
    /// Held-out utterances of the same speakers, 1 part.
    pub validation_utts: Vec<UttId>,
}

/// In-memory synthesized corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub seed: u64,
    pub duration_s: f64,
    pub profiles: Vec<SpeakerProfile>,
    pub utts_per_speaker: u32,
    waves: BTreeMap<UttId, Waveform>,
}

impl Corpus {
    pub fn synthesize(
        seed: u64,
        n_speakers: u32,
        utts_per_speaker: u32,
        duration_s: f64,
    ) -> Result<Corpus, CorpusError> {
        let mut profiles = Vec::new();
        let mut waves = BTreeMap::new();
        for spk in 0..n_speakers {
            let profile = synth_speaker(seed, spk);
            for utt in 0..utts_per_speaker {
                let utt_seed = splitmix64(seed ^ ((spk as u64) << 32) ^ utt as u64);
                let w = synth_utterance(&profile, duration_s, utt_seed)?;
                waves.insert(UttId { speaker: spk, utt }, w);
            }
            profiles.push(profile);
        }
        Ok(Corpus { seed, duration_s, profiles, utts_per_speaker, waves })
    }

    pub fn n_speakers(&self) -> u32 {
        self.profiles.len() as u32
    }

    pub fn wave(&self, id: UttId) -> &Waveform {
        &self.waves[&id]
    }

    pub fn ids(&self) -> impl Iterator<Item = UttId> + '_ {
        self.waves.keys().copied()
    }

    /// Write all utterances plus a manifest mapping speakers to paths.
    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        for (id, w) in &self.waves {
            let p = dir.join(id.rel_path());
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_wav(&p, w)?;
        }
        let mut manifest = std::fs::File::create(dir.join("manifest.txt"))?;
        for spk in 0..self.n_speakers() {
            let paths: Vec<String> = (0..self.utts_per_speaker)
                .map(|u| UttId { speaker: spk, utt: u }.rel_path().display().to_string())
                .collect();
            writeln!(manifest, "{} {}", spk, paths.join(" "))?;
        }
        Ok(())
    }
}

/// Build the attack/eval/train/validation lists.
///
/// Speakers split in half: the lower half feeds detector (and ASV) training,
/// the upper half feeds the attack and eval lists, so detector-training
/// speakers never appear in attack trials.
pub fn build_trial_lists(
    n_speakers: u32,
    utts_per_speaker: u32,
    n_attack_pairs: u32,
    seed: u64,
) -> Result<TrialSets, CorpusError> {
    if utts_per_speaker < 3 {
        return Err(CorpusError::InsufficientUtterances(format!(
            "need ≥ 3 utterances per speaker for enrollment replacement, got {utts_per_speaker}"
        )));
    }
    if n_speakers < 4 {
        return Err(CorpusError::InsufficientUtterances(format!(
            "need ≥ 4 speakers to split train/eval halves, got {n_speakers}"
        )));
    }
    let mut rng = derive_rng(seed, &[0x5452_4c53]);
    let half = n_speakers / 2;
    let eval_speakers: Vec<u32> = (half..n_speakers).collect();

    let pick_utt = |rng: &mut ChaCha20Rng| rng.gen_range(0..utts_per_speaker);
    let mut attack = Vec::new();
    // Target trials: same-speaker pairs.
    for _ in 0..n_attack_pairs {
        let spk = eval_speakers[rng.gen_range(0..eval_speakers.len())];
        let t = pick_utt(&mut rng);
        let mut e = pick_utt(&mut rng);
        while e == t {
            e = pick_utt(&mut rng);
        }
        attack.push(Trial {
            test: UttId { speaker: spk, utt: t },
            enroll: UttId { speaker: spk, utt: e },
            is_target: true,
        });
    }
    // Non-target trials: cross-speaker pairs.
    for _ in 0..n_attack_pairs {
        let a = rng.gen_range(0..eval_speakers.len());
        let mut b = rng.gen_range(0..eval_speakers.len());
        while b == a {
            b = rng.gen_range(0..eval_speakers.len());
        }
        attack.push(Trial {
            test: UttId { speaker: eval_speakers[a], utt: pick_utt(&mut rng) },
            enroll: UttId { speaker: eval_speakers[b], utt: pick_utt(&mut rng) },
            is_target: false,
        });
    }

    let in_attack: std::collections::BTreeSet<UttId> =
        attack.iter().flat_map(|t| [t.test, t.enroll]).collect();

    // Eval list mirrors the attack list with enrollments replaced by a
    // different same-speaker utterance excluded from the attack list.
    let mut eval = Vec::new();
    for tr in &attack {
        let spk = tr.enroll.speaker;
        let candidates: Vec<u32> = (0..utts_per_speaker)
            .filter(|&u| {
                let id = UttId { speaker: spk, utt: u };
                id != tr.test && !in_attack.contains(&id)
            })
            .collect();
        if candidates.is_empty() {
            return Err(CorpusError::InsufficientUtterances(format!(
                "no spare enrollment utterance for speaker {spk}; raise utts_per_speaker"
            )));
        }
        let e = candidates[rng.gen_range(0..candidates.len())];
        eval.push(Trial {
            test: tr.test,
            enroll: UttId { speaker: spk, utt: e },
            is_target: tr.is_target,
        });
    }

    // Train/validation: utterances of the detector-half speakers, split 19:1.
    let mut pool: Vec<UttId> = (0..half)
        .flat_map(|s| (0..utts_per_speaker).map(move |u| UttId { speaker: s, utt: u }))
        .collect();
    // Deterministic shuffle.
    for i in (1..pool.len()).rev() {
        let j = rng.gen_range(0..=i);
        pool.swap(i, j);
    }
    let n_val = (pool.len() as f64 / 20.0).round().max(1.0) as usize;
    let validation_utts: Vec<UttId> = pool[..n_val].to_vec();
    let train_utts: Vec<UttId> = pool[n_val..].to_vec();

    let make_pairs = |utts: &[UttId], rng: &mut ChaCha20Rng| -> Vec<Trial> {
        let mut trials = Vec::new();
        for &id in utts {
            let same: Vec<UttId> = utts
                .iter()
                .copied()
                .filter(|o| o.speaker == id.speaker && *o != id)
                .collect();
            let diff: Vec<UttId> =
                utts.iter().copied().filter(|o| o.speaker != id.speaker).collect();
            if let Some(&e) = same.get(rng.gen_range(0..same.len().max(1)) % same.len().max(1)) {
                trials.push(Trial { test: id, enroll: e, is_target: true });
            }
            if !diff.is_empty() {
                let e = diff[rng.gen_range(0..diff.len())];
                trials.push(Trial { test: id, enroll: e, is_target: false });
            }
        }
        trials
    };
    let train_trials = make_pairs(&train_utts, &mut rng);
    let val_trials = make_pairs(&validation_utts, &mut rng);

    Ok(TrialSets {
        attack: TrialList { trials: attack, role: TrialRole::Attack },
        eval: TrialList { trials: eval, role: TrialRole::Eval },
        train: TrialList { trials: train_trials, role: TrialRole::AsvTrain },
        validation: TrialList { trials: val_trials, role: TrialRole::AsvValidation },
        train_utts,
        validation_utts,
    })
}

/// Read a 16-bit PCM mono WAV into a waveform.
pub fn read_wav(path: &Path) -> Result<Waveform, CorpusError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(CorpusError::UnsupportedChannels(spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(CorpusError::UnsupportedFormat(format!(
            "{:?} {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples: Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    Ok(Waveform { samples: samples?.into_iter().map(f64::from).collect(), sample_rate: spec.sample_rate })
}

/// Write a waveform as 16-bit PCM mono, rounding and clamping samples.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<(), CorpusError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        writer.write_sample(s.round().clamp(AMP_MIN, AMP_MAX) as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// One trial per line: `test_path enroll_path label{0,1}`.
pub fn write_trial_list(path: &Path, list: &TrialList) -> Result<(), CorpusError> {
    let mut f = std::fs::File::create(path)?;
    for t in &list.trials {
        writeln!(
            f,
            "{} {} {}",
            t.test.rel_path().display(),
            t.enroll.rel_path().display(),
            u8::from(t.is_target)
        )?;
    }
    Ok(())
}

pub fn read_trial_list(path: &Path, role: TrialRole) -> Result<TrialList, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(CorpusError::BadTrialLine {
                line: i + 1,
                reason: format!("expected 3 fields, got {}", parts.len()),
            });
        }
        let parse = |p: &str| {
            UttId::from_rel_path(p).ok_or_else(|| CorpusError::BadTrialLine {
                line: i + 1,
                reason: format!("bad utterance path {p}"),
            })
        };
        let label = match parts[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(CorpusError::BadTrialLine {
                    line: i + 1,
                    reason: format!("bad label {other}"),
                })
            }
        };
        trials.push(Trial { test: parse(parts[0])?, enroll: parse(parts[1])?, is_target: label });
    }
    Ok(TrialList { trials, role })
}
