use super::{dot, NumericsError};

fn check_pair(a: &[f64], b: &[f64]) -> Result<(f64, f64), NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::LengthMismatch(a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if !(na.is_finite() && nb.is_finite()) {
        return Err(NumericsError::NonFinite("cosine input".into()));
    }
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::ZeroNorm);
    }
    Ok((na, nb))
}

/// `aᵀb / (‖a‖‖b‖)`
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    let (na, nb) = check_pair(a, b)?;
    Ok(dot(a, b) / (na * nb))
}

/// Cosine similarity with its gradients w.r.t. both arguments.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), NumericsError> {
    let (na, nb) = check_pair(a, b)?;
    let r = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi * inv - r * ai / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| ai * inv - r * bi / (nb * nb))
        .collect();
    Ok((r, da, db))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLoss {
    /// `-log P(candidate 0)`
    pub loss: f64,
    pub probs: Vec<f64>,
    /// `dL/dR_k`
    pub d_sims: Vec<f64>,
}

/// Softmax over `beta * R_k` with candidate 0 as the correct choice, and its
/// cross-entropy loss.
pub fn candidate_softmax_loss(sims: &[f64], beta: f64) -> Result<SoftmaxLoss, NumericsError> {
    if sims.len() < 2 || !(beta > 0.0) {
        return Err(NumericsError::BadCandidates);
    }
    if sims.iter().any(|s| !s.is_finite()) || !beta.is_finite() {
        return Err(NumericsError::NonFinite("similarities".into()));
    }
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|&s| (beta * (s - max)).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let loss = z.ln() - beta * (sims[0] - max);
    let d_sims = probs
        .iter()
        .enumerate()
        .map(|(k, &p)| beta * (p - if k == 0 { 1.0 } else { 0.0 }))
        .collect();
    Ok(SoftmaxLoss { loss, probs, d_sims })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::*;

    #[test]
    fn cosine_basics() {
        assert!((cosine_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]), Err(NumericsError::ZeroNorm));
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_gradient() {
        let a = [0.4, -1.3, 2.2, 0.05];
        let b = [1.1, 0.7, -0.2, 0.9];
        let fa = |x: &[f64]| {
            let (r, da, _) = cosine_with_grad(x, &b).unwrap();
            (r, da)
        };
        assert!(grad_check(fa, &a, 1e-5) < 1e-6);
        let fb = |x: &[f64]| {
            let (r, _, db) = cosine_with_grad(&a, x).unwrap();
            (r, db)
        };
        assert!(grad_check(fb, &b, 1e-5) < 1e-6);
    }

    #[test]
    fn softmax_reference_values() {
        // P1 = e^10 / (e^10 + 4), loss = ln(1 + 4 e^-10)
        let out = candidate_softmax_loss(&[1.0, 0.0, 0.0, 0.0, 0.0], 10.0).unwrap();
        let e10 = 10f64.exp();
        assert!((out.probs[0] - e10 / (e10 + 4.0)).abs() < 1e-15);
        assert!((out.probs[0] - 0.999818).abs() < 1e-6);
        assert!((out.loss - 1.816e-4).abs() < 1e-6);

        let out = candidate_softmax_loss(&[0.3; 5], 10.0).unwrap();
        assert!(out.probs.iter().all(|p| (p - 0.2).abs() < 1e-15));
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
        assert!(candidate_softmax_loss(&[1.0], 10.0).is_err());
        assert!(candidate_softmax_loss(&[1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn softmax_gradient() {
        let sims = [0.2, -0.5, 0.9, 0.1, -0.3];
        let f = |x: &[f64]| {
            let o = candidate_softmax_loss(x, 10.0).unwrap();
            (o.loss, o.d_sims)
        };
        assert!(grad_check(f, &sims, 1e-5) < 1e-6);
    }

    proptest! {
        #[test]
        fn cosine_is_bounded(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
            if let Ok(r) = cosine_similarity(&a, &b) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            }
        }

        #[test]
        fn softmax_normalizes(sims in prop::collection::vec(-1.0f64..1.0, 2..8), beta in 0.01f64..50.0) {
            let out = candidate_softmax_loss(&sims, beta).unwrap();
            prop_assert!(out.probs.iter().all(|&p| p >= 0.0));
            prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best });
            prop_assert_eq!(argmax(&out.probs), argmax(&sims));
        }
    }
}
