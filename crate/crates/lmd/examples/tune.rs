use lmd::asv::{self, AsvModel, AsvTrainConfig, FeatureConfig};
use lmd::corpus::{self, Corpus};
use lmd::metrics;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let utts: u32 = args[1].parse().unwrap();
    let dur: f64 = args[2].parse().unwrap();
    let steps: usize = args[3].parse().unwrap();
    let c: usize = args[4].parse().unwrap();
    let lr: f64 = args[5].parse().unwrap();
    let margin: f64 = args[6].parse().unwrap();
    let batch: usize = args[7].parse().unwrap();
    let seed: u64 = args[8].parse().unwrap();
    let pairs: u32 = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(12);
    let hop: usize = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(160);

    let t0 = Instant::now();
    let corpus = Corpus::synthesize(11, 8, utts, dur).unwrap();
    let sets = corpus::build_trial_lists(8, utts, pairs, 12).unwrap();
    let cfg = AsvTrainConfig {
        steps,
        batch_pairs: batch,
        lr,
        margin,
        c1: c,
        c2: c,
        seed,
    };
    let mut feat = FeatureConfig::default();
    feat.stft.hop = hop;
    let (model, hist) = asv::train_asv(&corpus, &sets, feat.clone(), &cfg).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let (t, n) = asv::score_trial_list(&model, &corpus, &sets.eval).unwrap();
    let (eer, _) = metrics::asv_eer(&t, &n).unwrap();
    let untrained = AsvModel::init(feat, c, c, 99).unwrap();
    let (t0s, n0s) = asv::score_trial_list(&untrained, &corpus, &sets.eval).unwrap();
    let (ueer, _) = metrics::asv_eer(&t0s, &n0s).unwrap();
    let vl = hist
        .validation_loss
        .iter()
        .map(|(s, l)| format!("{s}:{l:.3}"))
        .collect::<Vec<_>>()
        .join(" ");
    println!(
        "utts={utts} dur={dur} steps={steps} c={c} lr={lr} margin={margin} batch={batch} seed={seed} pairs={pairs} -> eval_eer={eer:.3} untrained={ueer:.3} train_secs={train_secs:.0} final_loss={:.4} val=[{vl}]",
        hist.train_loss.last().unwrap()
    );
}
