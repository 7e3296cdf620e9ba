use lmd::asv::{self, AsvModel, AsvTrainConfig, FeatureConfig};
use lmd::corpus::{self, Corpus, UttId};
use lmd::metrics;

fn stat(model: &AsvModel, corpus: &Corpus, id: UttId, lags: &[usize]) -> Vec<f64> {
    let f = model.logfbank(corpus.wave(id)).unwrap();
    let mut v = Vec::new();
    for &lag in lags {
        for m in 0..f.n_filters {
            let row = &f.data[m * f.n_frames..(m + 1) * f.n_frames];
            let mut acc = 0.0;
            for t in 0..row.len() - lag {
                acc += row[t] * row[t + lag];
            }
            v.push(acc / (row.len() - lag) as f64);
        }
    }
    v
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn main() {
    let utts: u32 = std::env::args().nth(1).map(|v| v.parse().unwrap()).unwrap_or(20);
    let corpus = Corpus::synthesize(11, 8, utts, 1.0).unwrap();
    let sets = corpus::build_trial_lists(8, utts, 20, 12).unwrap();
    // Untrained EER across init seeds.
    for s in [77u64, 99, 101, 202, 303, 404, 505] {
        let m = AsvModel::init(FeatureConfig::default(), 8, 8, s).unwrap();
        let (t, n) = asv::score_trial_list(&m, &corpus, &sets.eval).unwrap();
        let (e, _) = metrics::asv_eer(&t, &n).unwrap();
        println!("untrained c8 seed {s}: eer {e:.3}");
    }
    let feat = FeatureConfig::default();
    let model = AsvModel::init(feat.clone(), 8, 8, 99).unwrap();

    // Oracle statistic: per-row autocorrelation profile at several lags.
    let lags = [1, 2, 4, 6, 8, 10, 12, 16];
    let (mut t, mut n) = (Vec::new(), Vec::new());
    for tr in &sets.eval.trials {
        let s = cosine(
            &stat(&model, &corpus, tr.test, &lags),
            &stat(&model, &corpus, tr.enroll, &lags),
        );
        if tr.is_target {
            t.push(s);
        } else {
            n.push(s);
        }
    }
    let (eer, _) = metrics::asv_eer(&t, &n).unwrap();
    println!("autocorr-profile oracle eval EER = {eer:.3}");

    // Trained model: per-trial scores.
    let cfg = AsvTrainConfig { steps: 600, c1: 8, c2: 8, seed: 13, ..AsvTrainConfig::default() };
    let (model, _) = asv::train_asv(&corpus, &sets, feat, &cfg).unwrap();
    let mut rows: Vec<(f64, bool, u32, u32)> = sets
        .eval
        .trials
        .iter()
        .map(|tr| {
            let s = model
                .score(corpus.wave(tr.test), corpus.wave(tr.enroll))
                .unwrap();
            (s, tr.is_target, tr.test.speaker, tr.enroll.speaker)
        })
        .collect();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (s, is_t, ts, es) in rows {
        println!("{} {s:+.3}  test s{ts} enroll s{es}", if is_t { "T" } else { "N" });
    }
}
