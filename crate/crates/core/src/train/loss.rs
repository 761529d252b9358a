//! Joint objective: next-control cross-entropy plus the routine regularizer.

use rand::Rng;

use crate::data::{Instance, Routine};
use crate::error::{Error, Result};
use crate::model::encoder::{predict_backward, predict_forward};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::{dot, neg_log_sigmoid, sigmoid, Matrix, Mode};

/// Draws `m` distinct devices uniformly from those not in the routine.
pub fn sample_negatives<R: Rng + ?Sized>(
    routine: &Routine,
    num_devices: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    let candidates: Vec<usize> = (0..num_devices)
        .filter(|d| !routine.devices.contains(d))
        .collect();
    if candidates.len() < m {
        return Err(Error::NotEnoughNegatives {
            requested: m,
            available: candidates.len(),
        });
    }
    Ok(rand::seq::index::sample(rng, candidates.len(), m)
        .into_iter()
        .map(|i| candidates[i])
        .collect())
}

/// Routine regularizer, optionally accumulating `∂loss/∂E_dev` into `grad`.
///
/// Each consecutive device pair `(d_j, d_{j+1})` contributes
/// `−ln σ(e_jᵀe_{j+1}) − Σ_k ln σ(−e_jᵀe_k)` over `m` fresh negatives `k`;
/// the sum is divided by the number of pairs.
pub fn routine_reg_loss_with_grad<T: Scalar, R: Rng + ?Sized>(
    routines: &[Routine],
    e_dev: &Matrix<T>,
    m: usize,
    rng: &mut R,
    mut grad: Option<&mut Matrix<T>>,
) -> Result<T> {
    let pairs: usize = routines.iter().map(|r| r.devices.len().saturating_sub(1)).sum();
    if pairs == 0 {
        return Ok(T::zero());
    }
    let weight = T::one() / T::from_usize(pairs).unwrap();
    let mut total = T::zero();
    for routine in routines {
        for pair in routine.devices.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let x = dot(e_dev.row(a), e_dev.row(b));
            total += neg_log_sigmoid(x);
            let negatives = sample_negatives(routine, e_dev.rows(), m, rng)?;
            let mut neg_terms = Vec::with_capacity(negatives.len());
            for &k in &negatives {
                let xk = dot(e_dev.row(a), e_dev.row(k));
                total += neg_log_sigmoid(-xk);
                neg_terms.push((k, xk));
            }
            if let Some(g) = grad.as_deref_mut() {
                let coef = (sigmoid(x) - T::one()) * weight;
                accumulate_pair(g, e_dev, a, b, coef);
                for (k, xk) in neg_terms {
                    accumulate_pair(g, e_dev, a, k, sigmoid(xk) * weight);
                }
            }
        }
    }
    Ok(total * weight)
}

/// Adds `coef · ∂(e_aᵀe_b)` to both rows.
fn accumulate_pair<T: Scalar>(g: &mut Matrix<T>, e: &Matrix<T>, a: usize, b: usize, coef: T) {
    let d = e.cols();
    for j in 0..d {
        let (ea, eb) = (e[(a, j)], e[(b, j)]);
        g[(a, j)] += coef * eb;
        g[(b, j)] += coef * ea;
    }
}

pub fn routine_reg_loss<T: Scalar, R: Rng + ?Sized>(
    routines: &[Routine],
    e_dev: &Matrix<T>,
    m: usize,
    rng: &mut R,
) -> Result<T> {
    routine_reg_loss_with_grad(routines, e_dev, m, rng, None)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub cross_entropy: T,
    /// Unweighted routine term (zero when inactive).
    pub regularizer: T,
}

fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> T {
    let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
    lse - logits[target]
}

fn run<T: Scalar, R: Rng + ?Sized>(
    batch: &[Instance],
    routines: &[Routine],
    params: &ModelParams<T>,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
    mut grads: Option<&mut ModelParams<T>>,
) -> Result<LossBreakdown<T>> {
    if batch.is_empty() {
        return Err(Error::Config("loss over an empty batch".into()));
    }
    let inv_n = T::one() / T::from_usize(batch.len()).unwrap();
    let mut ce_total = T::zero();
    for inst in batch {
        if inst.target_control_id >= config.num_controls {
            return Err(Error::IndexOutOfRange {
                kind: "control",
                index: inst.target_control_id,
                size: config.num_controls,
            });
        }
        let cache = predict_forward(inst, params, config, mode, rng)?;
        let ce = cross_entropy(&cache.logits, inst.target_control_id);
        if !ce.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0 });
        }
        ce_total += ce;
        if let Some(g) = grads.as_deref_mut() {
            let mut g_logits: Vec<T> = cache.probs.iter().map(|&p| p * inv_n).collect();
            g_logits[inst.target_control_id] -= inv_n;
            predict_backward(&cache, params, config, &g_logits, g);
        }
    }
    let cross_entropy = ce_total * inv_n;

    let regularizer = if config.regularizer_active() && !routines.is_empty() {
        let lambda = T::from_f64_lossy(config.lambda_reg);
        let mut reg_grad = grads.as_ref().map(|_| Matrix::zeros(params.e_dev.rows(), params.e_dev.cols()));
        let reg = routine_reg_loss_with_grad(routines, &params.e_dev, config.negatives, rng, reg_grad.as_mut())?;
        if let (Some(g), Some(rg)) = (grads, reg_grad) {
            g.e_dev.axpy(lambda, &rg);
        }
        reg
    } else {
        T::zero()
    };
    let total = cross_entropy + T::from_f64_lossy(config.lambda_reg) * regularizer;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    Ok(LossBreakdown {
        total,
        cross_entropy,
        regularizer,
    })
}

/// Mean cross-entropy over `batch` plus `λ ×` the routine regularizer.
pub fn total_loss<T: Scalar, R: Rng + ?Sized>(
    batch: &[Instance],
    routines: &[Routine],
    params: &ModelParams<T>,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<LossBreakdown<T>> {
    run(batch, routines, params, config, mode, rng, None)
}

/// Loss and its gradient with respect to every trainable tensor.
///
/// Consumes randomness in exactly the same order as [`total_loss`], so the
/// two agree when given identically seeded generators.
pub fn compute_gradients<T: Scalar, R: Rng + ?Sized>(
    batch: &[Instance],
    routines: &[Routine],
    params: &ModelParams<T>,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<(LossBreakdown<T>, ModelParams<T>)> {
    let mut grads = params.zeros_like();
    let loss = run(batch, routines, params, config, mode, rng, Some(&mut grads))?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn routine(devices: &[usize]) -> Routine {
        Routine {
            routine_id: "r".into(),
            devices: devices.to_vec(),
        }
    }

    #[test]
    fn negatives_exclude_routine_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut forced = sample_negatives(&routine(&[2]), 6, 5, &mut rng).unwrap();
        forced.sort_unstable();
        assert_eq!(forced, vec![0, 1, 3, 4, 5]);
        assert!(sample_negatives(&routine(&[2]), 6, 0, &mut rng).unwrap().is_empty());
        assert!(matches!(
            sample_negatives(&routine(&[0, 1, 2]), 3, 1, &mut rng),
            Err(Error::NotEnoughNegatives { requested: 1, available: 0 })
        ));
        for _ in 0..100 {
            let s = sample_negatives(&routine(&[0, 3]), 8, 4, &mut rng).unwrap();
            let mut u = s.clone();
            u.sort_unstable();
            u.dedup();
            assert_eq!(u.len(), 4);
            assert!(s.iter().all(|d| *d != 0 && *d != 3));
        }
    }

    #[test]
    fn regularizer_closed_forms() {
        let ln2 = 2f64.ln();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Orthogonal rows: every dot product is zero.
        let e = Matrix::<f64>::identity(4);
        let one_pair = routine_reg_loss(&[routine(&[0, 1])], &e, 0, &mut rng).unwrap();
        assert!((one_pair - ln2).abs() < 1e-15);
        let with_negative = routine_reg_loss(&[routine(&[0, 1])], &e, 1, &mut rng).unwrap();
        assert!((with_negative - 2.0 * ln2).abs() < 1e-15);
        let two_pairs = routine_reg_loss(&[routine(&[0, 1, 2])], &e, 0, &mut rng).unwrap();
        assert!((two_pairs - ln2).abs() < 1e-15);
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Matrix::<f64>::random_uniform(7, 4, 1.0, &mut rng);
        let routines = [routine(&[0, 1, 2]), routine(&[3, 4])];
        let mut g = Matrix::zeros(7, 4);
        routine_reg_loss_with_grad(&routines, &e, 2, &mut ChaCha8Rng::seed_from_u64(9), Some(&mut g)).unwrap();
        let f = |e: &Matrix<f64>| routine_reg_loss(&routines, e, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let eps = 1e-6;
        for i in 0..e.len() {
            let mut p = e.clone();
            p.as_mut_slice()[i] += eps;
            let mut m = e.clone();
            m.as_mut_slice()[i] -= eps;
            let num = (f(&p) - f(&m)) / (2.0 * eps);
            assert!((num - g.as_slice()[i]).abs() < 1e-8, "{i}: {num} vs {}", g.as_slice()[i]);
        }
    }

    #[test]
    fn cross_entropy_is_stable() {
        assert!((cross_entropy(&[0.0, 0.0, 0.0, 0.0], 2) - 4f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[1000.0f64, -1000.0], 1).is_finite());
    }
}
