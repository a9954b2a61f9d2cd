//! Ordinal group-aware contrastive loss.
//!
//! For an anchor `i` and a partner `j`, the partner's similarity is normalized
//! against every other sample `k != i` whose group is at least as far from the
//! anchor's group as `j`'s is. Pairs in the same group are therefore pulled
//! together, and far groups are pushed away harder than near ones.
//!
//! Group distance is L1 on group indices and similarity is cosine, so the
//! denominators for one anchor only depend on the distance level. Bucketing the
//! batch by distance and taking suffix sums gives the loss and its gradient in
//! `O(B^2 D + B |G|)`.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

/// Rows with a norm at or below this are rejected.
pub const NORM_EPS: f64 = 1e-12;

/// Default temperature.
pub const DEFAULT_TEMPERATURE: f64 = 2.5;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug)]
pub struct EmbeddingBatch<'a> {
    pub z: &'a Matrix,
    pub groups: &'a [usize],
    pub temperature: f64,
}

impl<'a> EmbeddingBatch<'a> {
    pub fn new(z: &'a Matrix, groups: &'a [usize], temperature: f64) -> Result<Self> {
        if z.rows() != groups.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} embeddings but {} group labels",
                z.rows(),
                groups.len()
            )));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        Ok(EmbeddingBatch {
            z,
            groups,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

pub fn grc_loss(batch: &EmbeddingBatch<'_>) -> Result<f64> {
    Ok(grc_forward(batch, false)?.0)
}

/// Gradient of [`grc_loss`] with respect to every embedding coordinate.
pub fn grc_loss_backward(batch: &EmbeddingBatch<'_>) -> Result<Matrix> {
    Ok(grc_forward(batch, true)?.1)
}

pub fn grc_loss_and_grad(batch: &EmbeddingBatch<'_>) -> Result<(f64, Matrix)> {
    grc_forward(batch, true)
}

fn grc_forward(batch: &EmbeddingBatch<'_>, want_grad: bool) -> Result<(f64, Matrix)> {
    let b = batch.len();
    let d = batch.z.cols();
    let mut grad = Matrix::zeros(b, d);
    if b < 2 {
        return Ok((0.0, grad));
    }
    let t = batch.temperature;

    let norms: Vec<f64> = batch.z.iter_rows().map(norm).collect();
    if norms.iter().any(|&n| n <= NORM_EPS) {
        return Err(Error::ZeroVector);
    }
    let mut unit = batch.z.clone();
    for (i, &n) in norms.iter().enumerate() {
        unit.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    let mut sim = Matrix::zeros(b, b);
    for i in 0..b {
        for k in i..b {
            let s = dot(unit.row(i), unit.row(k)).clamp(-1.0, 1.0);
            sim[(i, k)] = s;
            sim[(k, i)] = s;
        }
    }

    let levels = batch.groups.iter().max().map_or(0, |m| m + 1);
    let pairs = (b * (b - 1)) as f64;
    // d loss / d sim[i][k], summed over both anchor roles afterwards.
    let mut dsim = Matrix::zeros(b, b);
    let mut mass = vec![0.0; levels];
    let mut count = vec![0usize; levels];
    let mut tail = vec![0.0; levels];
    let mut acc = vec![0.0; levels];
    let mut total = 0.0;

    for i in 0..b {
        mass.iter_mut().for_each(|v| *v = 0.0);
        count.iter_mut().for_each(|v| *v = 0);
        let gi = batch.groups[i];
        // Shifted by the maximal similarity 1/t so exp never overflows.
        let scaled = |k: usize| ((sim[(i, k)] - 1.0) / t).exp();
        for k in (0..b).filter(|&k| k != i) {
            let lvl = gi.abs_diff(batch.groups[k]);
            mass[lvl] += scaled(k);
            count[lvl] += 1;
        }
        let mut running = 0.0;
        for lvl in (0..levels).rev() {
            running += mass[lvl];
            tail[lvl] = running;
        }
        // Each ratio is <= 1 in floating point because its denominator is a
        // sum of non-negative terms that includes the numerator.
        for j in (0..b).filter(|&j| j != i) {
            let lvl = gi.abs_diff(batch.groups[j]);
            total += (scaled(j) / tail[lvl]).ln();
        }

        if want_grad {
            let mut running = 0.0;
            for lvl in 0..levels {
                if count[lvl] > 0 {
                    running += count[lvl] as f64 / tail[lvl];
                }
                acc[lvl] = running;
            }
            for k in (0..b).filter(|&k| k != i) {
                let lvl = gi.abs_diff(batch.groups[k]);
                dsim[(i, k)] = (scaled(k) * acc[lvl] - 1.0) / (pairs * t);
            }
        }
    }

    if want_grad {
        for i in 0..b {
            let out = grad.row_mut(i);
            for k in (0..b).filter(|&k| k != i) {
                let w = (dsim[(i, k)] + dsim[(k, i)]) / norms[i];
                if w == 0.0 {
                    continue;
                }
                let s = sim[(i, k)];
                for ((o, &uk), &ui) in out.iter_mut().zip(unit.row(k)).zip(unit.row(i)) {
                    *o += w * (uk - s * ui);
                }
            }
        }
    }

    Ok((-total / pairs, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Term-by-term evaluation of the loss with an explicit indicator over k.
    fn brute_force(z: &Matrix, groups: &[usize], t: f64) -> f64 {
        let b = z.rows();
        if b < 2 {
            return 0.0;
        }
        let s = |i: usize, k: usize| (cosine_similarity(z.row(i), z.row(k)).unwrap() / t).exp();
        let mut sum = 0.0;
        for i in 0..b {
            for j in (0..b).filter(|&j| j != i) {
                let dij = groups[i].abs_diff(groups[j]);
                let denom: f64 = (0..b)
                    .filter(|&k| k != i && groups[i].abs_diff(groups[k]) >= dij)
                    .map(|k| s(i, k))
                    .sum();
                sum += (s(i, j) / denom).ln();
            }
        }
        -sum / (b * (b - 1)) as f64
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize, g: usize) -> (Matrix, Vec<usize>) {
        let data = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let groups = (0..b).map(|_| rng.gen_range(0..g)).collect();
        (Matrix::from_vec(b, d, data).unwrap(), groups)
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn two_samples_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (z, g) = random_batch(&mut rng, 2, 3, 4);
            let batch = EmbeddingBatch::new(&z, &g, 0.7).unwrap();
            let (l, grad) = grc_loss_and_grad(&batch).unwrap();
            assert!(l.abs() < 1e-15);
            assert!(grad.as_slice().iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn worked_three_sample_value() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let groups = [0, 0, 1];
        let e = std::f64::consts::E;
        let oracle = -(2.0 * (e / (e + 1.0)).ln() + 2.0 * 0.5f64.ln()) / 6.0;
        assert!((brute_force(&z, &groups, 1.0) - oracle).abs() < 1e-14);
        assert!((oracle - 0.335470).abs() < 1e-6);
        let l = grc_loss(&EmbeddingBatch::new(&z, &groups, 1.0).unwrap()).unwrap();
        assert!((l - oracle).abs() < 1e-12, "{l}");
    }

    #[test]
    fn identical_samples_give_ln2() {
        let z = Matrix::from_rows(&vec![vec![0.3, -0.2]; 3]).unwrap();
        for t in [0.1, 1.0, 2.5, 10.0] {
            let l = grc_loss(&EmbeddingBatch::new(&z, &[4, 4, 4], t).unwrap()).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_is_rejected() {
        let z = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let batch = EmbeddingBatch::new(&z, &[0, 1, 2], 1.0).unwrap();
        assert!(matches!(grc_loss(&batch), Err(Error::ZeroVector)));
    }

    #[test]
    fn matches_brute_force_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let b = rng.gen_range(2..10);
            let (z, g) = random_batch(&mut rng, b, 3, 5);
            let t = rng.gen_range(0.2..3.0);
            let fast = grc_loss(&EmbeddingBatch::new(&z, &g, t).unwrap()).unwrap();
            assert!((fast - brute_force(&z, &g, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let (z, g) = random_batch(&mut rng, 6, 4, 4);
            let t = 0.8;
            let grad = grc_loss_backward(&EmbeddingBatch::new(&z, &g, t).unwrap()).unwrap();
            let h = 1e-6;
            for idx in 0..z.as_slice().len() {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp.as_mut_slice()[idx] += h;
                zm.as_mut_slice()[idx] -= h;
                let fd = (brute_force(&zp, &g, t) - brute_force(&zm, &g, t)) / (2.0 * h);
                let a = grad.as_slice()[idx];
                let scale = fd.abs().max(a.abs()).max(1e-3);
                assert!((fd - a).abs() / scale < 1e-5, "coord {idx}: fd {fd} analytic {a}");
            }
        }
    }

    #[test]
    fn gradient_is_orthogonal_to_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (z, g) = random_batch(&mut rng, 8, 5, 3);
        let grad = grc_loss_backward(&EmbeddingBatch::new(&z, &g, 2.5).unwrap()).unwrap();
        for i in 0..8 {
            assert!(dot(grad.row(i), z.row(i)).abs() < 1e-9);
        }
    }

    #[test]
    fn aligning_same_group_does_not_increase_loss() {
        let mut prev = f64::INFINITY;
        for step in (0..=20).rev() {
            let theta = std::f64::consts::FRAC_PI_2 * step as f64 / 20.0;
            let z = Matrix::from_rows(&[
                vec![1.0, 0.0],
                vec![theta.cos(), theta.sin()],
                vec![0.0, 1.0],
            ])
            .unwrap();
            let l = grc_loss(&EmbeddingBatch::new(&z, &[0, 0, 1], 1.0).unwrap()).unwrap();
            assert!(l <= prev + 1e-12, "theta {theta}: {l} > {prev}");
            prev = l;
        }
    }

    proptest! {
        #[test]
        fn loss_non_negative_and_invariant(
            seed in any::<u64>(),
            b in 2usize..9,
            scale in 0.1f64..10.0,
            t in 0.1f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (z, g) = random_batch(&mut rng, b, 3, 4);
            let l = grc_loss(&EmbeddingBatch::new(&z, &g, t).unwrap()).unwrap();
            prop_assert!(l >= 0.0 && l.is_finite());

            let mut scaled = z.clone();
            scaled.row_mut(0).iter_mut().for_each(|v| *v *= scale);
            let ls = grc_loss(&EmbeddingBatch::new(&scaled, &g, t).unwrap()).unwrap();
            prop_assert!((l - ls).abs() < 1e-12);

            let perm: Vec<usize> = (0..b).rev().collect();
            let zp = z.select_rows(&perm);
            let gp: Vec<usize> = perm.iter().map(|&i| g[i]).collect();
            let lp = grc_loss(&EmbeddingBatch::new(&zp, &gp, t).unwrap()).unwrap();
            prop_assert!((l - lp).abs() < 1e-12);
        }
    }
}
