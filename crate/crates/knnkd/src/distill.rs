//! Distillation math: the retrieved-neighbor teacher distribution, the
//! sparse distillation loss, the combined objective, and its analytic
//! gradient with respect to the logits.
//!
//! The teacher puts weight `exp(-d/tau)` on each retrieved neighbor's token;
//! duplicate tokens merge by summation before normalization, so the support
//! never exceeds the neighbor count. The combined objective mixes plain
//! cross-entropy with the distillation term by `alpha`, and its gradient at
//! the logits has the closed form `p - (1 - alpha) * onehot - alpha * teacher`,
//! which doubles as a finite-difference test oracle.

use crate::model::{softmax, LOG_FLOOR};
use crate::{Error, Result};
use std::collections::BTreeMap;

/// Distillation hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DistillConfig {
    /// Distance temperature; > 0.
    pub tau: f64,
    /// Mixing weight between cross-entropy and the distillation term; [0, 1].
    pub alpha: f64,
    /// Neighbors per query.
    pub k: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 100.0,
            alpha: 0.5,
            k: 16,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("tau must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument("alpha must be in [0, 1]".into()));
        }
        if self.k < 1 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sparse probability distribution over the vocabulary, supported on the
/// tokens that appeared among the retrieved neighbors. Entries are sorted by
/// token id and sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherDistribution {
    support: Vec<(u32, f64)>,
}

impl TeacherDistribution {
    /// Build the teacher from `(distance, token)` neighbors: weight each
    /// neighbor by `exp(-d/tau)` (computed with a max-shift on the exponents),
    /// merge duplicate tokens by summing, and normalize.
    pub fn from_neighbors(neighbors: &[(f32, u32)], tau: f64) -> Result<Self> {
        if neighbors.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot build a teacher from an empty neighbor set".into(),
            ));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument("tau must be > 0".into()));
        }
        let mut shift = f64::NEG_INFINITY;
        for &(d, _) in neighbors {
            if !d.is_finite() {
                return Err(Error::Numerical("non-finite neighbor distance".into()));
            }
            let e = -(d as f64) / tau;
            if e > shift {
                shift = e;
            }
        }
        let mut by_token: BTreeMap<u32, f64> = BTreeMap::new();
        for &(d, v) in neighbors {
            let w = (-(d as f64) / tau - shift).exp();
            *by_token.entry(v).or_insert(0.0) += w;
        }
        let total: f64 = by_token.values().sum();
        // Weights so far below the max-shifted scale that exp underflowed to
        // zero carry no mass; drop them so the support stays strictly
        // positive.
        let support: Vec<(u32, f64)> = by_token
            .into_iter()
            .filter(|&(_, w)| w > 0.0)
            .map(|(tok, w)| (tok, w / total))
            .collect();
        Ok(TeacherDistribution { support })
    }

    /// Exact one-hot teacher. Used for reduction tests.
    pub fn one_hot(token: u32) -> Self {
        TeacherDistribution {
            support: vec![(token, 1.0)],
        }
    }

    pub fn support(&self) -> &[(u32, f64)] {
        &self.support
    }

    /// Probability of `token`; zero off-support.
    pub fn prob(&self, token: u32) -> f64 {
        match self.support.binary_search_by_key(&token, |&(t, _)| t) {
            Ok(i) => self.support[i].1,
            Err(_) => 0.0,
        }
    }

    /// Dense embedding over a vocabulary of `size`. Reference path for tests.
    pub fn to_dense(&self, size: usize) -> Vec<f64> {
        let mut out = vec![0.0; size];
        for &(tok, p) in &self.support {
            out[tok as usize] = p;
        }
        out
    }
}

fn ln_clamped(p: f64) -> f64 {
    if p < LOG_FLOOR {
        log::warn!("student probability {p:.3e} clamped to {LOG_FLOOR:.0e}");
        LOG_FLOOR.ln()
    } else {
        p.ln()
    }
}

/// Sparse distillation cross-entropy: `-sum_support teacher(y) * ln student(y)`.
/// Off-support tokens contribute nothing, so the cost is O(|support|), not
/// O(|V|).
pub fn knn_kd_loss(student: &[f64], teacher: &TeacherDistribution) -> f64 {
    let mut loss = 0.0;
    for &(tok, pt) in teacher.support() {
        loss -= pt * ln_clamped(student[tok as usize]);
    }
    loss
}

/// Dense reference: full-vocabulary cross-entropy between a dense teacher row
/// and the student row. A sparse teacher padded with zeros must give exactly
/// the same value as [`knn_kd_loss`].
pub fn generic_kd_loss(student: &[f64], teacher_dense: &[f64]) -> f64 {
    assert_eq!(student.len(), teacher_dense.len());
    let mut loss = 0.0;
    for (pt, ps) in teacher_dense.iter().zip(student) {
        if *pt > 0.0 {
            loss -= pt * ln_clamped(*ps);
        }
    }
    loss
}

/// Combined objective at one position:
/// `(1 - alpha) * CE(target) + alpha * knn_kd_loss`.
pub fn combined_loss(
    student: &[f64],
    target: u32,
    teacher: &TeacherDistribution,
    alpha: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument("alpha must be in [0, 1]".into()));
    }
    let ce = -ln_clamped(student[target as usize]);
    Ok((1.0 - alpha) * ce + alpha * knn_kd_loss(student, teacher))
}

/// Analytic gradient of the combined objective with respect to the logits:
/// per token `y`, `p(y) - (1 - alpha) * 1[y = target] - alpha * teacher(y)`.
pub fn combined_grad_logits(
    student: &[f64],
    target: u32,
    teacher: &TeacherDistribution,
    alpha: f64,
) -> Vec<f64> {
    let mut grad = student.to_vec();
    grad[target as usize] -= 1.0 - alpha;
    for &(tok, pt) in teacher.support() {
        grad[tok as usize] -= alpha * pt;
    }
    grad
}

/// Central finite difference of `combined_loss(softmax(z))` with respect to
/// each logit. Test oracle for [`combined_grad_logits`]; `eps` is the
/// perturbation half-width.
pub fn fd_grad_logits(
    logits: &[f64],
    target: u32,
    teacher: &TeacherDistribution,
    alpha: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; logits.len()];
    let mut z = logits.to_vec();
    for i in 0..z.len() {
        let orig = z[i];
        z[i] = orig + eps;
        let up = combined_loss(&softmax(&z)?, target, teacher, alpha)?;
        z[i] = orig - eps;
        let down = combined_loss(&softmax(&z)?, target, teacher, alpha)?;
        z[i] = orig;
        grad[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_neighbor_is_one_hot() {
        let t = TeacherDistribution::from_neighbors(&[(7.3, 5)], 1.0).unwrap();
        assert_eq!(t.support(), &[(5, 1.0)]);
        assert_eq!(t.prob(5), 1.0);
        assert_eq!(t.prob(4), 0.0);
    }

    #[test]
    fn equal_distances_split_evenly_for_any_tau() {
        for tau in [1e-6, 1.0, 1e6] {
            let t = TeacherDistribution::from_neighbors(&[(2.0, 10), (2.0, 11)], tau).unwrap();
            assert!((t.prob(10) - 0.5).abs() < 1e-15);
            assert!((t.prob(11) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn tau_ln2_gap_gives_two_thirds_one_third() {
        // d = tau * ln 2 held exactly: the gap distance is 1.0 (representable
        // in f32) and tau = 1 / ln 2.
        let tau = 1.0 / (2.0f64).ln();
        let t = TeacherDistribution::from_neighbors(&[(0.0, 1), (1.0, 2)], tau).unwrap();
        assert!((t.prob(1) - 2.0 / 3.0).abs() < 1e-9);
        assert!((t.prob(2) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn tau_limits_flatten_and_sharpen() {
        let neighbors = [(0.0, 1), (5.0, 2), (9.0, 3)];
        // Large tau: near-uniform over retrieved tokens.
        let flat = TeacherDistribution::from_neighbors(&neighbors, 1e6).unwrap();
        for tok in [1, 2, 3] {
            assert!((flat.prob(tok) - 1.0 / 3.0).abs() < 1e-5);
        }
        // Tiny tau: all mass on the nearest.
        let sharp = TeacherDistribution::from_neighbors(&neighbors, 1e-6).unwrap();
        assert!((sharp.prob(1) - 1.0).abs() < 1e-12);
        assert!(sharp.prob(2) < 1e-12);
    }

    #[test]
    fn duplicate_tokens_merge_by_sum() {
        // Two zero-distance neighbors with the same token and one other.
        let t = TeacherDistribution::from_neighbors(&[(0.0, 5), (0.0, 5), (0.0, 6)], 10.0)
            .unwrap();
        assert_eq!(t.support().len(), 2);
        assert!((t.prob(5) - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.prob(6) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn teacher_rejects_bad_inputs() {
        assert!(TeacherDistribution::from_neighbors(&[], 1.0).is_err());
        assert!(TeacherDistribution::from_neighbors(&[(1.0, 0)], 0.0).is_err());
        assert!(TeacherDistribution::from_neighbors(&[(1.0, 0)], -2.0).is_err());
    }

    #[test]
    fn teacher_sums_to_one_under_extreme_distances() {
        // Max-shift keeps this finite even when -d/tau underflows exp.
        let t = TeacherDistribution::from_neighbors(&[(5000.0, 1), (5001.0, 2)], 1.0).unwrap();
        let sum: f64 = t.support().iter().map(|&(_, p)| p).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(t.prob(1) > t.prob(2));
    }

    #[test]
    fn kd_loss_reduces_to_ce_for_one_hot_teacher() {
        let student = vec![0.1, 0.2, 0.3, 0.4];
        let t = TeacherDistribution::one_hot(2);
        assert!((knn_kd_loss(&student, &t) - -(0.3f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn kd_loss_at_teacher_equals_entropy() {
        let t = TeacherDistribution::from_neighbors(&[(0.0, 0), (1.0, 1)], 1.0).unwrap();
        let student = t.to_dense(2);
        let entropy: f64 = t
            .support()
            .iter()
            .map(|&(_, p)| -p * p.ln())
            .sum();
        assert!((knn_kd_loss(&student, &t) - entropy).abs() < 1e-12);
    }

    #[test]
    fn kd_loss_hand_case() {
        // teacher {a: 2/3, b: 1/3}, student {a: 0.5, b: 0.25, rest 0.25}.
        let tau = 1.0 / (2.0f64).ln();
        let t = TeacherDistribution::from_neighbors(&[(0.0, 0), (1.0, 1)], tau).unwrap();
        let student = vec![0.5, 0.25, 0.25];
        let loss = knn_kd_loss(&student, &t);
        let expect = -(2.0 / 3.0 * (0.5f64).ln() + 1.0 / 3.0 * (0.25f64).ln());
        assert!((loss - 0.9242).abs() < 1e-4);
        assert!((loss - expect).abs() < 1e-11);
    }

    #[test]
    fn generic_kd_matches_sparse_and_hand_sum() {
        let t = TeacherDistribution::from_neighbors(&[(0.0, 1), (1.0, 3)], 2.0).unwrap();
        let student = vec![0.3, 0.25, 0.15, 0.2, 0.1];
        let dense = t.to_dense(5);
        assert!((generic_kd_loss(&student, &dense) - knn_kd_loss(&student, &t)).abs() < 1e-12);

        // Uniform teacher and student over |V| = 4.
        let u = vec![0.25; 4];
        assert!((generic_kd_loss(&u, &u) - (4.0f64).ln()).abs() < 1e-12);

        // Arbitrary 5-token case against a direct evaluation.
        let teacher = vec![0.1, 0.0, 0.4, 0.3, 0.2];
        let hand: f64 = -(0.1 * (0.3f64).ln()
            + 0.4 * (0.15f64).ln()
            + 0.3 * (0.2f64).ln()
            + 0.2 * (0.1f64).ln());
        assert!((generic_kd_loss(&student, &teacher) - hand).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_degenerate_mixings() {
        let t = TeacherDistribution::from_neighbors(&[(0.0, 0), (1.0, 1)], 1.0).unwrap();
        let student = vec![0.5, 0.3, 0.2];
        let ce = -(0.3f64).ln();
        let kd = knn_kd_loss(&student, &t);
        assert!((combined_loss(&student, 1, &t, 0.0).unwrap() - ce).abs() < 1e-15);
        assert!((combined_loss(&student, 1, &t, 1.0).unwrap() - kd).abs() < 1e-15);
        // alpha = 0.5 of components 2.0 and 1.0 is 1.5.
        let claimed = 0.5 * 2.0 + 0.5 * 1.0;
        assert_eq!(claimed, 1.5);
        let mid = combined_loss(&student, 1, &t, 0.5).unwrap();
        assert!((mid - (0.5 * ce + 0.5 * kd)).abs() < 1e-15);
    }

    #[test]
    fn grad_reduces_to_ce_gradient_at_alpha_zero() {
        let t = TeacherDistribution::from_neighbors(&[(0.0, 0), (1.0, 1)], 1.0).unwrap();
        let student = vec![0.5, 0.3, 0.2];
        let g = combined_grad_logits(&student, 1, &t, 0.0);
        assert_eq!(g, vec![0.5, 0.3 - 1.0, 0.2]);
    }

    #[test]
    fn grad_case_formulas_hold() {
        // Teacher supported on {0, 1}, target 1, alpha 0.5.
        let t = TeacherDistribution::from_neighbors(&[(0.0, 0), (0.5, 1)], 1.0).unwrap();
        let student = vec![0.25, 0.35, 0.4];
        let alpha = 0.5;
        let g = combined_grad_logits(&student, 1, &t, alpha);
        // y != y*, y in support: p - alpha * teacher.
        assert!((g[0] - (0.25 - alpha * t.prob(0))).abs() < 1e-15);
        // y = y*: p - (1 - alpha + alpha * teacher).
        assert!((g[1] - (0.35 - (1.0 - alpha + alpha * t.prob(1)))).abs() < 1e-15);
        // y != y*, y not in support: exactly p.
        assert_eq!(g[2], 0.4);
    }

    #[test]
    fn grad_plug_in_example() {
        // p(y) = 0.3, alpha = 0.5, teacher(y) = 0.622, y in support, y != y*.
        let t = TeacherDistribution {
            support: vec![(0, 0.378), (1, 0.622)],
        };
        let student = vec![0.6, 0.3, 0.1];
        let g = combined_grad_logits(&student, 0, &t, 0.5);
        assert!((g[1] - (0.3 - 0.311)).abs() < 1e-12);
        assert!((g[1] - -0.011).abs() < 1e-12);
    }

    #[test]
    fn grad_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let v = rng.gen_range(2..32);
            let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let student = softmax(&logits).unwrap();
            let n = rng.gen_range(1..6);
            let neighbors: Vec<(f32, u32)> = (0..n)
                .map(|_| (rng.gen_range(0.0..5.0), rng.gen_range(0..v) as u32))
                .collect();
            let t = TeacherDistribution::from_neighbors(&neighbors, 1.5).unwrap();
            let alpha = rng.gen_range(0.0..1.0);
            let target = rng.gen_range(0..v) as u32;
            let g = combined_grad_logits(&student, target, &t, alpha);
            let sum: f64 = g.iter().sum();
            assert!(sum.abs() < 1e-12, "gradient row sums to {sum}");
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let v = rng.gen_range(2..16);
            let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let student = softmax(&logits).unwrap();
            let n = rng.gen_range(1..5);
            let neighbors: Vec<(f32, u32)> = (0..n)
                .map(|_| (rng.gen_range(0.0..4.0), rng.gen_range(0..v) as u32))
                .collect();
            let t = TeacherDistribution::from_neighbors(&neighbors, 2.0).unwrap();
            let alpha = rng.gen_range(0.0..1.0);
            let target = rng.gen_range(0..v) as u32;
            let analytic = combined_grad_logits(&student, target, &t, alpha);
            let numeric = fd_grad_logits(&logits, target, &t, alpha, 1e-6).unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                let denom = a.abs().max(n.abs()).max(1.0);
                assert!(
                    ((a - n) / denom).abs() < 1e-6,
                    "analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn zero_gradient_fixed_point() {
        // The gradient vanishes exactly when
        // p = (1 - alpha) * onehot + alpha * teacher.
        let t = TeacherDistribution::from_neighbors(&[(0.0, 0), (0.7, 2)], 1.0).unwrap();
        let alpha = 0.4;
        let target = 0u32;
        let mut p = t.to_dense(4);
        for x in &mut p {
            *x *= alpha;
        }
        p[target as usize] += 1.0 - alpha;
        let g = combined_grad_logits(&p, target, &t, alpha);
        for x in &g {
            assert!(x.abs() < 1e-15);
        }
        // Self-retrieval puts the target in the support, so the fixed point
        // keeps strictly positive mass on it; at alpha <= 0.5 it stays argmax.
        assert!(p[target as usize] >= 1.0 - alpha);
        let max = p.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(max, p[target as usize]);
    }
}
