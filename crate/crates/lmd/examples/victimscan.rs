//! Temporary: screen victim training seeds for eval-margin robustness.
use lmd::asv::{self, AsvTrainConfig, FeatureConfig};
use lmd::corpus::{self, Corpus};
use lmd::metrics;

fn main() {
    let corpus = Corpus::synthesize(11, 8, 30, 1.0).unwrap();
    let sets = corpus::build_trial_lists(8, 30, 20, 12).unwrap();
    for steps in [600usize, 1200] {
        for seed in [7u64, 13, 21, 33, 41] {
            let cfg = AsvTrainConfig { steps, seed, ..AsvTrainConfig::default() };
            let (m, _) = asv::train_asv(&corpus, &sets, FeatureConfig::default(), &cfg).unwrap();
            let (t, n) = asv::score_trial_list(&m, &corpus, &sets.eval).unwrap();
            let (eer, thr) = metrics::asv_eer(&t, &n).unwrap();
            let mut ts = t.clone();
            ts.sort_by(f64::total_cmp);
            let mut ns = n.clone();
            ns.sort_by(|a, b| b.total_cmp(a));
            let near = t.iter().chain(&n).filter(|&&s| (s - thr).abs() < 0.1).count();
            println!(
                "steps {steps} seed {seed}: eer {eer:.3} thr {thr:+.3} near10 {near} t_low {:?} n_high {:?}",
                &ts[..4.min(ts.len())].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                &ns[..4.min(ns.len())].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            );
        }
    }
}
