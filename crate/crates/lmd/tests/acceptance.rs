//! End-to-end acceptance suite: one test per criterion, each printing a
//! single pass/fail line. Heavy fixtures (trained models, attack sets) are
//! built once and shared.

use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use lmd::asv::{self, AsvModel, AsvTrainConfig, FeatureConfig};
use lmd::attack::{self, AdvSet, AttackGrid};
use lmd::config::ExperimentConfig;
use lmd::corpus::{self, Corpus, TrialSets};
use lmd::detect::{self, DetectorKind, LmdModel, LmdTrainConfig, McsVariant};
use lmd::diffgraph::{grad_check, StftBasis, Tape, Tensor, VarId};
use lmd::dsp::{self, StftConfig};
use lmd::metrics::{self, BudgetRule, VariationOrigin, VariationSet};
use lmd::pipeline::{self, score_variation_sets, RunManifest};

fn criterion(n: u32, name: &str, pass: bool, detail: String) {
    println!(
        "acceptance {n:02} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

/// Criteria carry wall-clock caps, so they must not contend for cores with
/// each other: every test takes this lock first, turning the harness's
/// thread-per-test execution into a serial run.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------------------
// Shared fixtures. Each heavy fixture records its own build time; criteria
// whose runtime cap covers a fixture add that time to their local elapsed
// time, so the cap is charged once no matter which test builds the fixture.

fn corpus_fixture() -> &'static (Corpus, TrialSets) {
    static FIX: OnceLock<(Corpus, TrialSets)> = OnceLock::new();
    FIX.get_or_init(|| {
        let corpus = Corpus::synthesize(11, 8, 30, 1.0).unwrap();
        let sets = corpus::build_trial_lists(8, 30, 20, 12).unwrap();
        (corpus, sets)
    })
}

fn victim_fixture() -> &'static (AsvModel, f64, f64) {
    static FIX: OnceLock<(AsvModel, f64, f64)> = OnceLock::new();
    FIX.get_or_init(|| {
        let start = Instant::now();
        let (corpus, sets) = corpus_fixture();
        let cfg = AsvTrainConfig::default();
        let (model, _) = asv::train_asv(corpus, sets, FeatureConfig::default(), &cfg).unwrap();
        let thr = asv::calibrate_threshold(&model, corpus, &sets.eval).unwrap();
        (model, thr.eta, start.elapsed().as_secs_f64())
    })
}

fn attack_fixture(
    fix: &'static OnceLock<(Vec<AdvSet>, f64)>,
    grid: AttackGrid,
    n_trials: usize,
    seed: u64,
) -> &'static (Vec<AdvSet>, f64) {
    fix.get_or_init(|| {
        // Build the shared prerequisites before the clock starts: their cost
        // is charged by the criteria that own them, not by every attack set.
        let (corpus, sets) = corpus_fixture();
        let (victim, eta, _) = victim_fixture();
        let start = Instant::now();
        let mut list = sets.attack.clone();
        list.trials.truncate(n_trials);
        let sets =
            attack::build_adversarial_sets(corpus, &list, victim, victim, *eta, &grid, seed)
                .unwrap();
        (sets, start.elapsed().as_secs_f64())
    })
}

fn bim_sets() -> &'static (Vec<AdvSet>, f64) {
    static FIX: OnceLock<(Vec<AdvSet>, f64)> = OnceLock::new();
    attack_fixture(&FIX, AttackGrid::BimN(vec![5, 10, 20, 50]), usize::MAX, 101)
}

fn pgd_sets() -> &'static (Vec<AdvSet>, f64) {
    static FIX: OnceLock<(Vec<AdvSet>, f64)> = OnceLock::new();
    attack_fixture(&FIX, AttackGrid::PgdN(vec![5, 10, 20, 50]), usize::MAX, 102)
}

fn cw_sets() -> &'static (Vec<AdvSet>, f64) {
    static FIX: OnceLock<(Vec<AdvSet>, f64)> = OnceLock::new();
    attack_fixture(&FIX, AttackGrid::CwKappa(vec![0.0, 0.2, 0.4]), 10, 103)
}

fn bim200_set() -> &'static AdvSet {
    static FIX: OnceLock<(Vec<AdvSet>, f64)> = OnceLock::new();
    &attack_fixture(&FIX, AttackGrid::BimN(vec![200]), usize::MAX, 104).0[0]
}

fn lmd_fixture() -> &'static (LmdModel, f64) {
    static FIX: OnceLock<(LmdModel, f64)> = OnceLock::new();
    FIX.get_or_init(|| {
        let (corpus, sets) = corpus_fixture();
        let (victim, _, _) = victim_fixture();
        let start = Instant::now();
        let cfg = LmdTrainConfig { steps: 600, seed: 23, ..LmdTrainConfig::default() };
        let (model, _) = detect::train_lmd(corpus, sets, victim, &cfg).unwrap();
        (model, start.elapsed().as_secs_f64())
    })
}

fn mixture_eer(detector: &DetectorKind, sets: &[&AdvSet]) -> f64 {
    let (corpus, _) = corpus_fixture();
    let (victim, _, _) = victim_fixture();
    let mut gen_pool = Vec::new();
    let mut adv_pool = Vec::new();
    for set in sets {
        let (adv, gen) = score_variation_sets(victim, detector, set, corpus, false).unwrap();
        adv_pool.extend(adv.values);
        gen_pool.extend(gen.values);
    }
    metrics::eer(&gen_pool, &adv_pool).unwrap().0
}

// ---------------------------------------------------------------------------
// Criteria

#[test]
fn c01_dsp_round_trip_oracle() {
    let _guard = serial();
    let start = Instant::now();
    let (corpus, _) = corpus_fixture();
    let cfg = StftConfig::detector();
    let mut worst = 0.0_f64;
    for id in corpus.ids().take(100) {
        let w = corpus.wave(id);
        let spec = dsp::stft(w, &cfg).unwrap();
        let back = dsp::istft(&spec, w.len()).unwrap();
        let num: f64 = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = w.samples.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }

    // A sine at an exact bin frequency must peak at that bin in every frame.
    let k0 = 40;
    let freq = k0 as f64 * corpus::SAMPLE_RATE as f64 / cfg.fft_size as f64;
    let sine: Vec<f64> = (0..8000)
        .map(|i| {
            10_000.0 * (std::f64::consts::TAU * freq * i as f64 / corpus::SAMPLE_RATE as f64).sin()
        })
        .collect();
    let spec = dsp::stft(&corpus::Waveform::new(sine), &cfg).unwrap();
    let mag = spec.magnitude();
    let mid = spec.n_frames / 2;
    let peak = (0..spec.n_bins)
        .max_by(|&a, &b| mag[a * spec.n_frames + mid].total_cmp(&mag[b * spec.n_frames + mid]))
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    criterion(
        1,
        "dsp-round-trip",
        worst <= 1e-6 && peak == k0 && secs < 10.0,
        format!("worst rel err {worst:.2e}, sine peak bin {peak} (want {k0}), {secs:.1}s"),
    );
}

#[test]
fn c02_gradient_suite() {
    let _guard = serial();
    let start = Instant::now();
    let basis = Arc::new(StftBasis::new(StftConfig::detector()).unwrap());
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let mut vec_t = |n: usize, scale: f64| {
        Tensor::vector((0..n).map(|_| rng.gen_range(-scale..scale)).collect())
    };
    let wave = vec_t(1200, 1000.0);
    let x8 = vec_t(8, 1.0);
    let y8 = vec_t(8, 1.0);

    type Build = Box<dyn Fn(&mut Tape, &[VarId]) -> Result<VarId, lmd::diffgraph::DiffError>>;
    let mut worst_linear = 0.0_f64;
    let mut worst_nonlinear = 0.0_f64;
    let mut probes = 0usize;

    // FD step per case, scaled to the leaf magnitude: unit-scale leaves use
    // 1e-4 (1e-3 for linear ops, where truncation vanishes); the sample-scale
    // wave case uses 0.5, still 5e-4 relative, to avoid catastrophic
    // cancellation in the difference quotient.
    const STEP_LIN: f64 = 1e-3;
    const STEP_UNIT: f64 = 1e-4;
    const STEP_WAVE: f64 = 0.5;

    let b2 = basis.clone();
    let b3 = basis.clone();
    let b4 = basis.clone();
    let cases: Vec<(&str, bool, f64, Vec<Tensor>, Build)> = vec![
        ("add", true, STEP_LIN, vec![x8.clone(), y8.clone()], Box::new(|t, l| {
            let s = t.add(l[0], l[1])?;
            t.sum(s)
        })),
        ("sub", true, STEP_LIN, vec![x8.clone(), y8.clone()], Box::new(|t, l| {
            let s = t.sub(l[0], l[1])?;
            t.sum(s)
        })),
        ("mul", false, STEP_UNIT, vec![x8.clone(), y8.clone()], Box::new(|t, l| {
            let s = t.mul(l[0], l[1])?;
            t.sum(s)
        })),
        ("scale", true, STEP_LIN, vec![x8.clone()], Box::new(|t, l| {
            let s = t.scale(l[0], 2.5)?;
            t.sum(s)
        })),
        ("add_scalar+dot", true, STEP_LIN, vec![x8.clone(), y8.clone()], Box::new(|t, l| {
            let s = t.add_scalar(l[0], 0.7)?;
            t.dot(s, l[1])
        })),
        ("abs", false, STEP_UNIT, vec![Tensor::vector(vec![0.4, -0.9, 1.3, -2.0])], Box::new(|t, l| {
            let s = t.abs(l[0])?;
            t.sum(s)
        })),
        ("relu", false, STEP_UNIT, vec![Tensor::vector(vec![0.4, -0.9, 1.3, -2.0])], Box::new(|t, l| {
            let s = t.relu(l[0])?;
            t.sum(s)
        })),
        ("tanh", false, STEP_UNIT, vec![x8.clone()], Box::new(|t, l| {
            let s = t.tanh(l[0])?;
            t.sum(s)
        })),
        ("sigmoid", false, STEP_UNIT, vec![x8.clone()], Box::new(|t, l| {
            let s = t.sigmoid(l[0])?;
            t.sum(s)
        })),
        ("log", false, STEP_UNIT, vec![Tensor::vector(vec![0.5, 1.7, 3.0, 0.2])], Box::new(|t, l| {
            let s = t.log(l[0])?;
            t.sum(s)
        })),
        ("stft", true, STEP_LIN, vec![wave.clone()], Box::new(move |t, l| {
            let s = t.stft(l[0], Arc::clone(&b2))?;
            t.sum(s)
        })),
        ("istft", true, STEP_LIN, vec![wave.clone()], Box::new(move |t, l| {
            let s = t.stft(l[0], Arc::clone(&b3))?;
            let w = t.istft(s, Arc::clone(&b3), 1200)?;
            t.sum(w)
        })),
        ("power+mask+cmvn", false, STEP_WAVE, vec![wave.clone()], Box::new(move |t, l| {
            let s = t.stft(l[0], Arc::clone(&b4))?;
            let p = t.power_spec(s)?;
            let c = t.cmvn(p)?;
            t.sum(c)
        })),
        ("l2_normalize", false, STEP_UNIT, vec![x8.clone(), y8.clone()], Box::new(|t, l| {
            let n = t.l2_normalize(l[0])?;
            t.dot(n, l[1])
        })),
    ];
    for (name, linear, step, leaves, build) in cases {
        let n_probes = 8;
        let err = grad_check(|t, l| build(t, l), &leaves, 0, n_probes, step, 500)
        .unwrap();
        probes += n_probes;
        if linear {
            worst_linear = worst_linear.max(err);
        } else {
            worst_nonlinear = worst_nonlinear.max(err);
        }
        assert!(
            err <= if linear { 1e-6 } else { 1e-4 },
            "op {name} rel err {err:.2e}"
        );
    }

    // Full score pipeline: waveform → features → encoder → cosine score.
    let model = AsvModel::init(FeatureConfig::default(), 8, 8, 3).unwrap();
    let probe_wave = vec_t(1600, 8000.0);
    let enroll = {
        let e = vec_t(32, 1.0);
        let n = e.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        Tensor::vector(e.data.iter().map(|v| v / n).collect())
    };
    let m = model.clone();
    let err = grad_check(
        move |t, l| {
            let params = m.params_on_tape(t, false)?;
            let emb = m.embedding_graph(t, l[0], &params)?;
            let c = t.constant(enroll.clone())?;
            t.dot(emb, c)
        },
        &[probe_wave],
        0,
        12,
        1e-3,
        501,
    )
    .unwrap();
    probes += 12;
    worst_nonlinear = worst_nonlinear.max(err);

    let secs = start.elapsed().as_secs_f64();
    criterion(
        2,
        "gradient-suite",
        worst_linear <= 1e-6 && worst_nonlinear <= 1e-4 && probes >= 100 && secs < 60.0,
        format!(
            "linear worst {worst_linear:.2e}, nonlinear worst {worst_nonlinear:.2e}, {probes} probes, {secs:.1}s"
        ),
    );
}

// Enumeration oracles for criterion 3.
fn pooled_midpoints(gen: &[f64], adv: &[f64]) -> Vec<f64> {
    let mut pooled: Vec<f64> = gen.iter().chain(adv).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    let mut cands = vec![pooled[0] - 1.0];
    for w in pooled.windows(2) {
        cands.push(0.5 * (w[0] + w[1]));
    }
    cands.push(pooled[pooled.len() - 1] + 1.0);
    cands
}

fn rates(gen: &[f64], adv: &[f64], tau: f64) -> (f64, f64) {
    let fa = gen.iter().filter(|&&v| v > tau).count() as f64 / gen.len() as f64;
    let fr = adv.iter().filter(|&&v| v <= tau).count() as f64 / adv.len() as f64;
    (fa, fr)
}

fn eer_oracle(gen: &[f64], adv: &[f64]) -> (f64, f64) {
    let cands = pooled_midpoints(gen, adv);
    let mut prev: Option<(f64, f64, f64)> = None;
    for &tau in &cands {
        let (fa, fr) = rates(gen, adv, tau);
        if fa == fr {
            return (fa, tau);
        }
        if let Some((ptau, pfa, pfr)) = prev {
            if pfa > pfr && fa < fr {
                let d0 = pfa - pfr;
                let d1 = fa - fr;
                let s = d0 / (d0 - d1);
                return (pfa + s * (fa - pfa), ptau + s * (tau - ptau));
            }
        }
        prev = Some((tau, fa, fr));
    }
    unreachable!("no crossing");
}

fn dsr_oracle(gen: &[f64], adv: &[f64], far_given: f64) -> f64 {
    let max_gen = gen.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut cands: Vec<f64> = pooled_midpoints(gen, adv)
        .into_iter()
        .filter(|&c| c <= max_gen)
        .collect();
    cands.push(max_gen);
    let mut best: Option<(f64, f64)> = None;
    for &tau in &cands {
        let (fa, _) = rates(gen, adv, tau);
        let gap = (fa - far_given).abs();
        let better = match best {
            None => true,
            Some((bg, bt)) => gap < bg || (gap == bg && tau > bt),
        };
        if better {
            best = Some((gap, tau));
        }
    }
    let tau = best.unwrap().1;
    adv.iter().filter(|&&v| v > tau).count() as f64 / adv.len() as f64
}

fn min_dcf_oracle(targets: &[f64], nontargets: &[f64], p: f64) -> f64 {
    let mut cands = vec![f64::NEG_INFINITY];
    for &s in targets.iter().chain(nontargets) {
        cands.push(s - 1e-9);
        cands.push(s + 1e-9);
    }
    cands
        .iter()
        .map(|&tau| {
            let miss = targets.iter().filter(|&&s| s <= tau).count() as f64 / targets.len() as f64;
            let fa = nontargets.iter().filter(|&&s| s > tau).count() as f64
                / nontargets.len() as f64;
            (p * miss + (1.0 - p) * fa) / p.min(1.0 - p)
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn c03_metrics_enumeration_oracle() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(555);
    for trial in 0..1000 {
        let n = rng.gen_range(1..=20);
        let m = rng.gen_range(1..=20);
        let draw = |rng: &mut ChaCha20Rng, k: usize, hi: f64| -> Vec<f64> {
            (0..k)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        (rng.gen_range(0..5) as f64) * 0.25
                    } else {
                        rng.gen_range(0.0..hi)
                    }
                })
                .collect()
        };
        let gen = draw(&mut rng, n, 1.0);
        let adv = draw(&mut rng, m, 1.5);
        let (eer, tau) = metrics::eer(&gen, &adv).unwrap();
        let (oe, ot) = eer_oracle(&gen, &adv);
        assert!(
            (eer - oe).abs() <= 1e-12 && (tau - ot).abs() <= 1e-12,
            "trial {trial}: eer {eer} vs {oe}, tau {tau} vs {ot}\n gen={gen:?}\n adv={adv:?}"
        );
        let far_given = rng.gen_range(0.0..=1.0);
        let (dsr, _) = metrics::dsr_at_far(&gen, &adv, far_given).unwrap();
        let od = dsr_oracle(&gen, &adv, far_given);
        assert!(
            (dsr - od).abs() <= 1e-12,
            "trial {trial}: dsr {dsr} vs {od} at far {far_given}"
        );
        let targets = draw(&mut rng, n, 1.0);
        let nontargets = draw(&mut rng, m, 1.0);
        let dcf = metrics::min_dcf(&targets, &nontargets, 0.01).unwrap();
        let odcf = min_dcf_oracle(&targets, &nontargets, 0.01);
        assert!((dcf - odcf).abs() <= 1e-12, "trial {trial}: dcf {dcf} vs {odcf}");
    }
    let secs = start.elapsed().as_secs_f64();
    criterion(3, "metrics-oracle", secs < 30.0, format!("1000 sets matched, {secs:.1}s"));
}

#[test]
fn c04_loss_identities() {
    let _guard = serial();
    use lmd::dsp::{MaskKind, MaskMatrix};
    // Binary mask: no binarization penalty.
    let binary =
        MaskMatrix::new(vec![0.0, 1.0, 1.0, 0.0], 2, 2, 1, MaskKind::Binary).unwrap();
    let (_, _, _, lb) = detect::lmd_loss(0.5, 0.5, &binary, 0.05, 1.0, 15.0);
    // Half mask over 2×2×2: L_b = 8·(0.5·0.5)² = 0.5, L_m = 8·0.5 = 4.
    let half = MaskMatrix::new(vec![0.5; 8], 2, 2, 2, MaskKind::Ratio).unwrap();
    let (_, lm_h, _, lb_h) = detect::lmd_loss(0.5, 0.5, &half, 0.05, 1.0, 15.0);
    // Composite decomposition at arbitrary values.
    let mask = MaskMatrix::new(vec![0.1, 0.9, 0.4, 0.6], 2, 2, 1, MaskKind::Ratio).unwrap();
    let (l, lm, ls, lb2) = detect::lmd_loss(0.8, 0.6, &mask, 0.05, 1.3, 7.0);
    let recomposed = lm + 1.3 * ls + 7.0 * lb2;
    criterion(
        4,
        "loss-identities",
        lb == 0.0
            && (lb_h - 0.5).abs() <= 1e-12
            && (lm_h - 4.0).abs() <= 1e-12
            && (l - recomposed).abs() <= 1e-12,
        format!("L_b(binary)={lb}, half-mask L_b={lb_h} L_m={lm_h}, |L-Σ|={:.1e}", (l - recomposed).abs()),
    );
}

#[test]
fn c05_toy_asv_fitness() {
    let _guard = serial();
    let start = Instant::now();
    let (corpus, sets) = corpus_fixture();
    let (victim, _, victim_secs) = victim_fixture();
    let (targets, nontargets) = asv::score_trial_list(victim, corpus, &sets.eval).unwrap();
    let (trained_eer, _) = metrics::asv_eer(&targets, &nontargets).unwrap();
    let untrained = AsvModel::init(FeatureConfig::default(), 8, 8, 101).unwrap();
    let (t0, n0) = asv::score_trial_list(&untrained, corpus, &sets.eval).unwrap();
    let (untrained_eer, _) = metrics::asv_eer(&t0, &n0).unwrap();
    let secs = victim_secs + start.elapsed().as_secs_f64();
    criterion(
        5,
        "toy-asv-fitness",
        trained_eer <= 0.10 && (untrained_eer - 0.50).abs() <= 0.15 && secs < 180.0,
        format!("trained EER {trained_eer:.3}, untrained {untrained_eer:.3}, {secs:.0}s"),
    );
}

fn asr_of(set: &AdvSet, eta: f64) -> f64 {
    let scored: Vec<(f64, bool)> = set
        .examples
        .iter()
        .map(|e| (e.final_score, e.goal == attack::AttackGoal::Impersonation))
        .collect();
    metrics::asr(&scored, eta)
}

fn mean_snr(set: &AdvSet) -> f64 {
    set.examples.iter().map(|e| e.snr_db).sum::<f64>() / set.examples.len() as f64
}

#[test]
fn c06_attack_potency() {
    let _guard = serial();
    let start = Instant::now();
    let (_, eta, _) = victim_fixture();
    let mut ok = true;
    let mut detail = String::new();
    let mut build_secs = 0.0;
    for (name, (sets, secs)) in [("bim", bim_sets()), ("pgd", pgd_sets())] {
        build_secs += secs;
        let asrs: Vec<f64> = sets.iter().map(|s| asr_of(s, *eta)).collect();
        let snrs: Vec<f64> = sets.iter().map(mean_snr).collect();
        let monotone_asr = asrs.windows(2).all(|w| w[1] >= w[0]);
        let monotone_snr = snrs.windows(2).all(|w| w[1] <= w[0]);
        let asr50 = *asrs.last().unwrap();
        ok &= asr50 >= 0.9 && monotone_asr && monotone_snr;
        detail.push_str(&format!("{name} asr={asrs:.3?} snr={snrs:.1?}; "));
    }
    let secs = build_secs + start.elapsed().as_secs_f64();
    ok &= secs < 180.0;
    criterion(6, "attack-potency", ok, format!("{detail}{secs:.0}s"));
}

#[test]
fn c07_norm_budgets() {
    let _guard = serial();
    let (corpus, _) = corpus_fixture();
    let mut ok = true;
    for (sets, grid) in [(&bim_sets().0, [5usize, 10, 20, 50]), (&pgd_sets().0, [5, 10, 20, 50])] {
        let is_bim = sets[0].label.starts_with("bim");
        for (set, &n) in sets.iter().zip(&grid) {
            for ex in &set.examples {
                let clean = corpus.wave(ex.trial.test);
                let delta: Vec<f64> = ex
                    .waveform
                    .samples
                    .iter()
                    .zip(&clean.samples)
                    .map(|(a, b)| a - b)
                    .collect();
                if is_bim {
                    let linf = delta.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                    ok &= linf <= n as f64 * 1.0 + 1e-9;
                } else {
                    let l2 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                    ok &= l2 <= n as f64 * 300.0 + 1e-6;
                }
            }
        }
    }
    criterion(7, "norm-budgets", ok, "all BIM L∞ and PGD L2 budgets hold".into());
}

#[test]
fn c08_cw_contract() {
    let _guard = serial();
    let (_, eta, _) = victim_fixture();
    let (corpus, _) = corpus_fixture();
    let kappas = [0.0, 0.2, 0.4];
    let mut ok = true;
    let mut rms_means = Vec::new();
    for (set, &kappa) in cw_sets().0.iter().zip(&kappas) {
        let mut rms_sum = 0.0;
        let mut count = 0usize;
        for ex in &set.examples {
            if ex.success {
                let margin_ok = match ex.goal {
                    attack::AttackGoal::Impersonation => ex.final_score >= eta + kappa - 1e-6,
                    attack::AttackGoal::Evasion => ex.final_score <= eta - kappa + 1e-6,
                };
                ok &= margin_ok;
                let clean = corpus.wave(ex.trial.test);
                let rms = (ex
                    .waveform
                    .samples
                    .iter()
                    .zip(&clean.samples)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / clean.len() as f64)
                    .sqrt();
                rms_sum += rms;
                count += 1;
            }
        }
        ok &= count > 0;
        rms_means.push(rms_sum / count.max(1) as f64);
    }
    let monotone = rms_means.windows(2).all(|w| w[1] >= w[0]);
    criterion(
        8,
        "cw-contract",
        ok && monotone,
        format!("margins hold; mean RMS over κ = {rms_means:.2?}"),
    );
}

#[test]
fn c09_detection_trend() {
    let _guard = serial();
    let start = Instant::now();
    let (lmd, lmd_secs) = lmd_fixture();
    let trained = DetectorKind::Lmd(lmd.clone());
    let untrained = DetectorKind::Lmd(LmdModel::init(lmd.hidden, 0.05, 1.0, 15.0, 4242));
    let (sets, _) = bim_sets();
    let all: Vec<&AdvSet> = sets.iter().collect();
    let mix_trained = mixture_eer(&trained, &all);
    let mix_untrained = mixture_eer(&untrained, &all);
    let eer_n5 = mixture_eer(&trained, &all[..1]);
    let eer_n50 = mixture_eer(&trained, &all[3..]);
    let secs = lmd_secs + start.elapsed().as_secs_f64();
    criterion(
        9,
        "detection-trend",
        mix_trained < mix_untrained && eer_n50 <= 0.20 && eer_n5 > eer_n50 && secs < 300.0,
        format!(
            "mixture EER trained {mix_trained:.3} vs untrained {mix_untrained:.3}, N=5 {eer_n5:.3} → N=50 {eer_n50:.3}, {secs:.0}s"
        ),
    );
}

fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = p * (v.len() - 1) as f64;
    let (lo, hi) = (idx.floor() as usize, idx.ceil() as usize);
    v[lo] + (idx - lo as f64) * (v[hi] - v[lo])
}

fn n50_variations() -> (VariationSet, VariationSet) {
    let (corpus, _) = corpus_fixture();
    let (victim, _, _) = victim_fixture();
    let det = DetectorKind::Lmd(lmd_fixture().0.clone());
    let set = &bim_sets().0[3];
    score_variation_sets(victim, &det, set, corpus, false).unwrap()
}

#[test]
fn c10_score_variation_separation() {
    let _guard = serial();
    let (adv, gen) = n50_variations();
    let adv_median = percentile(&adv.values, 0.5);
    let gen_q3 = percentile(&gen.values, 0.75);
    criterion(
        10,
        "variation-separation",
        adv_median > gen_q3,
        format!("adv median {adv_median:.4} vs genuine q3 {gen_q3:.4}"),
    );
}

#[test]
fn c11_quadrisection_search() {
    let _guard = serial();
    // Quadratic stub: minimizer within ±1 in at most 12 iterations.
    let mut iters = 0;
    let p = detect::quadrisection(0.0, McsVariant::H.upper_bound(), 12, |p| {
        iters += 1;
        (p - 100.0) * (p - 100.0)
    });
    let stub_ok = (p - 100.0).abs() <= 1.0 && iters <= 3 * 12;

    // Ten seeded searches on the toy victim: stable mean ± std.
    let (corpus, sets) = corpus_fixture();
    let (victim, _, _) = victim_fixture();
    let runs: Vec<f64> = (0..10)
        .map(|r| {
            detect::search_mcs(
                McsVariant::H,
                victim,
                corpus,
                &sets.train_utts,
                8,
                900 + r,
                12,
            )
            .unwrap()
        })
        .collect();
    let mean = runs.iter().sum::<f64>() / runs.len() as f64;
    let std =
        (runs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / runs.len() as f64).sqrt();
    criterion(
        11,
        "quadrisection-search",
        stub_ok && std / mean < 0.5,
        format!("stub minimizer {p:.2}, search mean {mean:.1} ± {std:.1}"),
    );
}

#[test]
fn c12_purification_direction() {
    let _guard = serial();
    let (corpus, sets) = corpus_fixture();
    let (victim, _, _) = victim_fixture();
    let det = DetectorKind::Lmd(lmd_fixture().0.clone());
    let set = bim200_set();

    let mut cache: std::collections::BTreeMap<corpus::UttId, Vec<f64>> = Default::default();
    let mut embed = |id: corpus::UttId| {
        cache
            .entry(id)
            .or_insert_with(|| victim.embed(corpus.wave(id)).unwrap())
            .clone()
    };
    let adv_trials: Vec<(corpus::Waveform, Vec<f64>, bool)> = set
        .examples
        .iter()
        .map(|ex| (ex.waveform.clone(), embed(ex.trial.enroll), ex.trial.is_target))
        .collect();
    let gen_trials: Vec<(corpus::Waveform, Vec<f64>, bool)> = sets
        .eval
        .trials
        .iter()
        .map(|t| (corpus.wave(t.test).clone(), embed(t.enroll), t.is_target))
        .collect();

    let (adv_defended, _) = detect::purification_eer(victim, &det, &adv_trials).unwrap();
    let (adv_raw, _) = detect::purification_eer(victim, &DetectorKind::Identity, &adv_trials).unwrap();
    let (gen_defended, _) = detect::purification_eer(victim, &det, &gen_trials).unwrap();
    let (gen_raw, _) =
        detect::purification_eer(victim, &DetectorKind::Identity, &gen_trials).unwrap();
    criterion(
        12,
        "purification-direction",
        adv_defended < adv_raw && gen_defended <= gen_raw + 0.05,
        format!(
            "adv EER {adv_raw:.3} → {adv_defended:.3}; genuine {gen_raw:.3} → {gen_defended:.3}"
        ),
    );
}

#[test]
fn c13_snr_budget_behavior() {
    let _guard = serial();
    let (adv, gen) = n50_variations();
    let (plain_eer, plain_tau) = metrics::eer(&gen.values, &adv.values).unwrap();
    let (b_eer, b_tau) =
        metrics::snr_budget_eer(&adv, &gen, f64::NEG_INFINITY, BudgetRule::Or)
            .unwrap()
            .unwrap();
    let unbounded_ok = b_eer == plain_eer && b_tau == plain_tau;

    // Sweep a budget grid; the curve must eventually hit an empty retention
    // and stay defined before that.
    let max_snr = adv
        .snrs
        .iter()
        .chain(&gen.snrs)
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let budgets = [-20.0, 0.0, 20.0, max_snr + 1.0, max_snr + 100.0];
    let results: Vec<bool> = budgets
        .iter()
        .map(|&b| metrics::snr_budget_eer(&adv, &gen, b, BudgetRule::Or).unwrap().is_some())
        .collect();
    let curve_ok = results[0] && !results[results.len() - 1];
    let _ = VariationOrigin::Adversarial;
    criterion(
        13,
        "snr-budget",
        unbounded_ok && curve_ok,
        format!("b=-inf reproduces EER {plain_eer:.3}; retention over budgets {results:?}"),
    );
}

#[test]
fn c14_reproducibility() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let run = |out: std::path::PathBuf| {
        let mut cfg = ExperimentConfig::tiny_preset();
        cfg.out_dir = out;
        pipeline::cmd_synth(&cfg).unwrap();
        pipeline::cmd_train_asv(&cfg).unwrap();
        pipeline::cmd_attack(&cfg).unwrap();
        pipeline::cmd_search_mcs(&cfg).unwrap();
        pipeline::cmd_train_lmd(&cfg).unwrap();
        pipeline::cmd_evaluate(&cfg, false).unwrap();
        pipeline::cmd_report(&cfg).unwrap();
        RunManifest::load(&cfg.out_dir).unwrap()
    };
    let a = run(dir.path().join("a"));
    let b = run(dir.path().join("b"));
    let mut ok = a.stages.len() == b.stages.len();
    let mut mismatches = Vec::new();
    for (stage, rec) in &a.stages {
        let other = &b.stages[stage];
        ok &= rec.artifacts.len() == other.artifacts.len();
        for (x, y) in rec.artifacts.iter().zip(&other.artifacts) {
            if x.path != y.path || x.sha256 != y.sha256 {
                ok = false;
                mismatches.push(x.path.clone());
            }
        }
    }
    criterion(
        14,
        "reproducibility",
        ok,
        if mismatches.is_empty() {
            "all stage digests identical across two runs".into()
        } else {
            format!("digest drift: {mismatches:?}")
        },
    );
}
