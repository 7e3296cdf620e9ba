//! Finite-difference gradient verification.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{DiffError, Tape, Tensor, VarId};

/// Worst relative error between analytic and central-difference gradients at
/// `probe_count` randomly chosen coordinates of leaf `leaf_idx`.
///
/// `build` must construct the same scalar graph each call from fresh leaf
/// values. Relative error uses denominator `max(|a|, |fd|, 1e-8)` so that
/// near-zero gradients compare absolutely.
pub fn grad_check<F>(
    build: F,
    leaves: &[Tensor],
    leaf_idx: usize,
    probe_count: usize,
    step: f64,
    seed: u64,
) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId, DiffError>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, Option<Vec<f64>>), DiffError> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = values
            .iter()
            .map(|v| tape.leaf(v.clone()))
            .collect::<Result<_, _>>()?;
        let out = build(&mut tape, &ids)?;
        let y = tape.value(out).item();
        let grads = tape.backward(out)?;
        Ok((y, grads.wrt(ids[leaf_idx]).map(|g| g.to_vec())))
    };

    let (_, analytic) = eval(leaves)?;
    let analytic = analytic.unwrap_or_else(|| vec![0.0; leaves[leaf_idx].len()]);

    let n = leaves[leaf_idx].len();
    let mut coords: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(probe_count.min(n));

    let mut worst = 0.0_f64;
    for &i in &coords {
        let mut plus = leaves.to_vec();
        plus[leaf_idx].data[i] += step;
        let mut minus = leaves.to_vec();
        minus[leaf_idx].data[i] -= step;
        let (yp, _) = eval(&plus)?;
        let (ym, _) = eval(&minus)?;
        let fd = (yp - ym) / (2.0 * step);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    Ok(worst)
}
