//! Temporary tuning harness for the LMD acceptance fixture. Caches the
//! victim checkpoint and adversarial sets under /tmp/lmdtune so repeated
//! runs only pay for LMD training.
//! Args: steps lambda_s lambda_b margin lr hidden crop seed batch

use std::path::Path;
use std::time::Instant;

use lmd::asv::{self, AsvModel, AsvTrainConfig, FeatureConfig};
use lmd::attack::{self, AdvSet, AttackGrid};
use lmd::ckpt::Checkpoint;
use lmd::corpus::{self, Corpus, UttId};
use lmd::detect::{self, DetectorKind, LmdModel, LmdTrainConfig};
use lmd::metrics;
use lmd::pipeline::score_variation_sets;

fn mixture_eer(
    victim: &AsvModel,
    corpus: &Corpus,
    detector: &DetectorKind,
    sets: &[&AdvSet],
) -> f64 {
    let mut gen_pool = Vec::new();
    let mut adv_pool = Vec::new();
    for set in sets {
        let (adv, gen) = score_variation_sets(victim, detector, set, corpus, false).unwrap();
        adv_pool.extend(adv.values);
        gen_pool.extend(gen.values);
    }
    metrics::eer(&gen_pool, &adv_pool).unwrap().0
}

fn main() {
    let args: Vec<f64> = std::env::args().skip(1).map(|v| v.parse().unwrap()).collect();
    let cfg = LmdTrainConfig {
        steps: args.first().map(|&v| v as usize).unwrap_or(600),
        lambda_s: args.get(1).copied().unwrap_or(1.0),
        lambda_b: args.get(2).copied().unwrap_or(15.0),
        margin: args.get(3).copied().unwrap_or(0.05),
        lr: args.get(4).copied().unwrap_or(0.002),
        hidden: args.get(5).map(|&v| v as usize).unwrap_or(8),
        crop_frames: args.get(6).map(|&v| v as usize).unwrap_or(100),
        seed: args.get(7).map(|&v| v as u64).unwrap_or(23),
        batch: args.get(8).map(|&v| v as usize).unwrap_or(8),
        ..LmdTrainConfig::default()
    };
    eprintln!("{cfg:?}");

    let corpus = Corpus::synthesize(11, 8, 30, 1.0).unwrap();
    let sets = corpus::build_trial_lists(8, 30, 20, 12).unwrap();
    let dir = Path::new("/tmp/lmdtune");
    std::fs::create_dir_all(dir).unwrap();

    let vpath = dir.join("victim.ckpt");
    let epath = dir.join("eta.txt");
    let (victim, eta) = if vpath.exists() {
        let v = AsvModel::from_checkpoint(&Checkpoint::read_file(&vpath).unwrap()).unwrap();
        let eta: f64 = std::fs::read_to_string(&epath).unwrap().trim().parse().unwrap();
        (v, eta)
    } else {
        let t = Instant::now();
        let (v, _) =
            asv::train_asv(&corpus, &sets, FeatureConfig::default(), &AsvTrainConfig::default())
                .unwrap();
        let thr = asv::calibrate_threshold(&v, &corpus, &sets.eval).unwrap();
        eprintln!("victim trained in {:.0}s", t.elapsed().as_secs_f64());
        v.to_checkpoint().write_file(&vpath).unwrap();
        std::fs::write(&epath, format!("{:.16e}", thr.eta)).unwrap();
        (v, thr.eta)
    };

    let load_sets = |name: &str, grid: AttackGrid, seed: u64| -> Vec<AdvSet> {
        let labels: Vec<String> = grid.points().iter().map(|(l, _)| l.clone()).collect();
        if dir.join(name).join(&labels[0]).exists() {
            labels.iter().map(|l| attack::read_adv_set(&dir.join(name).join(l)).unwrap()).collect()
        } else {
            let t = Instant::now();
            let built =
                attack::build_adversarial_sets(&corpus, &sets.attack, &victim, &victim, eta, &grid, seed)
                    .unwrap();
            eprintln!("{name} built in {:.0}s", t.elapsed().as_secs_f64());
            for (s, l) in built.iter().zip(&labels) {
                attack::write_adv_set(&dir.join(name).join(l), s).unwrap();
            }
            built
        }
    };
    let bim = load_sets("bim", AttackGrid::BimN(vec![5, 10, 20, 50]), 101);
    let bim200 = load_sets("bim200", AttackGrid::BimN(vec![200]), 104);

    if std::env::var("MCS_REF").is_ok() {
        let all: Vec<&AdvSet> = bim.iter().collect();
        for l in [50usize, 100, 150, 180] {
            let det = DetectorKind::McsH { l };
            let mix = mixture_eer(&victim, &corpus, &det, &all);
            let n50 = mixture_eer(&victim, &corpus, &det, &all[3..]);
            println!("mcs-h l={l}: mix {mix:.3} n50 {n50:.3}");
        }
        for xi in [100.0, 300.0, 1000.0, 3000.0, 10000.0] {
            let det = DetectorKind::McsD { xi };
            let mix = mixture_eer(&victim, &corpus, &det, &all);
            let n50 = mixture_eer(&victim, &corpus, &det, &all[3..]);
            let mut cache: std::collections::BTreeMap<UttId, Vec<f64>> = Default::default();
            let gen_trials: Vec<(corpus::Waveform, Vec<f64>, bool)> = sets
                .eval
                .trials
                .iter()
                .map(|tr| {
                    let e = cache
                        .entry(tr.enroll)
                        .or_insert_with(|| victim.embed(corpus.wave(tr.enroll)).unwrap())
                        .clone();
                    (corpus.wave(tr.test).clone(), e, tr.is_target)
                })
                .collect();
            let (gen_d, _) = detect::purification_eer(&victim, &det, &gen_trials).unwrap();
            println!("mcs-d xi={xi}: mix {mix:.3} n50 {n50:.3} gen_pur {gen_d:.3}");
        }
    }

    let t = Instant::now();
    let (model, hist) = detect::train_lmd(&corpus, &sets, &victim, &cfg).unwrap();
    let train_secs = t.elapsed().as_secs_f64();
    let trained = DetectorKind::Lmd(model);
    let untrained =
        DetectorKind::Lmd(LmdModel::init(cfg.hidden, cfg.margin, cfg.lambda_s, cfg.lambda_b, 4242));

    let all: Vec<&AdvSet> = bim.iter().collect();
    let mix_t = mixture_eer(&victim, &corpus, &trained, &all);
    let mix_u = mixture_eer(&victim, &corpus, &untrained, &all);
    let n5 = mixture_eer(&victim, &corpus, &trained, &all[..1]);
    let n50 = mixture_eer(&victim, &corpus, &trained, &all[3..]);
    println!(
        "c09: trained {mix_t:.3} untrained {mix_u:.3} n5 {n5:.3} n50 {n50:.3} train_secs {train_secs:.0}"
    );

    let mut cache: std::collections::BTreeMap<UttId, Vec<f64>> = Default::default();
    let mut embed = |id: UttId| {
        cache.entry(id).or_insert_with(|| victim.embed(corpus.wave(id)).unwrap()).clone()
    };
    let adv_trials: Vec<(corpus::Waveform, Vec<f64>, bool)> = bim200[0]
        .examples
        .iter()
        .map(|ex| (ex.waveform.clone(), embed(ex.trial.enroll), ex.trial.is_target))
        .collect();
    let gen_trials: Vec<(corpus::Waveform, Vec<f64>, bool)> = sets
        .eval
        .trials
        .iter()
        .map(|tr| (corpus.wave(tr.test).clone(), embed(tr.enroll), tr.is_target))
        .collect();
    let (adv_d, _) = detect::purification_eer(&victim, &trained, &adv_trials).unwrap();
    let (adv_r, _) = detect::purification_eer(&victim, &DetectorKind::Identity, &adv_trials).unwrap();
    let (gen_d, _) = detect::purification_eer(&victim, &trained, &gen_trials).unwrap();
    let (gen_r, _) = detect::purification_eer(&victim, &DetectorKind::Identity, &gen_trials).unwrap();
    println!("c12: adv {adv_r:.3} -> {adv_d:.3}; gen {gen_r:.3} -> {gen_d:.3}");
    if std::env::var("LMD_BOTH").is_ok() {
        // Defended system that also re-embeds enrollments through the mask.
        let mut tcache: std::collections::BTreeMap<UttId, Vec<f64>> = Default::default();
        let mut tembed = |id: UttId| {
            tcache
                .entry(id)
                .or_insert_with(|| {
                    let t = detect::transform(corpus.wave(id), &trained).unwrap();
                    victim.embed(&t).unwrap()
                })
                .clone()
        };
        let adv2: Vec<(corpus::Waveform, Vec<f64>, bool)> = bim200[0]
            .examples
            .iter()
            .map(|ex| (ex.waveform.clone(), tembed(ex.trial.enroll), ex.trial.is_target))
            .collect();
        let gen2: Vec<(corpus::Waveform, Vec<f64>, bool)> = sets
            .eval
            .trials
            .iter()
            .map(|tr| (corpus.wave(tr.test).clone(), tembed(tr.enroll), tr.is_target))
            .collect();
        let (a2, _) = detect::purification_eer(&victim, &trained, &adv2).unwrap();
        let (g2, _) = detect::purification_eer(&victim, &trained, &gen2).unwrap();
        println!("c12-both: adv {adv_r:.3} -> {a2:.3}; gen {gen_r:.3} -> {g2:.3}");
    }
    if std::env::var("LMD_DUMP").is_ok() {
        for tr in &sets.eval.trials {
            let w = corpus.wave(tr.test);
            let e = embed(tr.enroll);
            let s = victim.score_against(w, &e).unwrap();
            let tw = detect::transform(w, &trained).unwrap();
            let sh = victim.score_against(&tw, &e).unwrap();
            println!(
                "{} t s{}u{} e s{}u{}  {s:+.3} -> {sh:+.3}  d {:+.3}",
                if tr.is_target { "T" } else { "N" },
                tr.test.speaker, tr.test.utt, tr.enroll.speaker, tr.enroll.utt,
                sh - s
            );
        }
    }
    let k = hist.validation_loss.len();
    eprintln!("val tail: {:?}", &hist.validation_loss[k.saturating_sub(4)..]);
}
