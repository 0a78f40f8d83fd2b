//! Flat parameter-vector arithmetic and the Pearson correlation coefficient.
//!
//! Every model, gradient and control vector in the simulator is a
//! [`ParamVector`]: one contiguous `f64` buffer holding all weights and biases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::dims(self.len(), other.len()));
        }
        Ok(())
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        axpy(-1.0, other, self)
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Returns `a * x + y`.
pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    x.check_dim(y)?;
    if !a.is_finite() {
        return Err(Error::NonFinite);
    }
    let out: Vec<f64> = x.0.iter().zip(&y.0).map(|(xi, yi)| a * xi + yi).collect();
    finite(ParamVector(out))
}

/// Pearson correlation with population moments, clamped to `[-1, 1]`.
///
/// The computation is symmetric in its arguments term by term, so
/// `pearson_corr(a, b)` and `pearson_corr(b, a)` are bit-identical.
pub fn pearson_corr(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.check_dim(b)?;
    if a.len() < 2 {
        return Err(Error::dims(2, a.len()));
    }
    if is_constant(a.as_slice()) || is_constant(b.as_slice()) {
        return Err(Error::ZeroVariance);
    }
    let n = a.len() as f64;
    let mean_a = a.0.iter().sum::<f64>() / n;
    let mean_b = b.0.iter().sum::<f64>() / n;

    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&ai, &bi) in a.0.iter().zip(&b.0) {
        let da = ai - mean_a;
        let db = bi - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    let sigma_a = (var_a / n).sqrt();
    let sigma_b = (var_b / n).sqrt();
    if sigma_a == 0.0 || sigma_b == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let r = (cov / n) / (sigma_a * sigma_b);
    if !r.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(r.clamp(-1.0, 1.0))
}

fn is_constant(values: &[f64]) -> bool {
    values.iter().all(|&v| v == values[0])
}

/// Returns `(Σ w_i v_i) / (Σ w_i)`.
pub fn weighted_mean(vectors: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if vectors.len() != weights.len() {
        return Err(Error::dims(vectors.len(), weights.len()));
    }
    let Some(first) = vectors.first() else {
        return Err(Error::AllWeightsZero);
    };
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::ConfigInvalid(
            "weights must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllWeightsZero);
    }
    let mut acc = vec![0.0; first.len()];
    for (v, &w) in vectors.iter().zip(weights) {
        first.check_dim(v)?;
        let scale = w / total;
        for (slot, &x) in acc.iter_mut().zip(&v.0) {
            *slot += scale * x;
        }
    }
    finite(ParamVector(acc))
}

fn finite(v: ParamVector) -> Result<ParamVector> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn axpy_examples() {
        assert_eq!(
            axpy(0.0, &pv(&[3., 4.]), &pv(&[1., 2.])).unwrap(),
            pv(&[1., 2.])
        );
        assert_eq!(
            axpy(1.0, &pv(&[1., 1.]), &pv(&[0., 0.])).unwrap(),
            pv(&[1., 1.])
        );
        assert_eq!(
            axpy(-0.5, &pv(&[2., 4.]), &pv(&[1., 1.])).unwrap(),
            pv(&[0., -1.])
        );
    }

    #[test]
    fn axpy_rejects_mismatched_dims() {
        let err = axpy(1.0, &pv(&[1.]), &pv(&[1., 2.])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn pearson_examples() {
        assert_eq!(
            pearson_corr(&pv(&[1., 2., 3.]), &pv(&[2., 4., 6.])).unwrap(),
            1.0
        );
        assert_eq!(
            pearson_corr(&pv(&[1., 2., 3.]), &pv(&[6., 4., 2.])).unwrap(),
            -1.0
        );
        // deviations a: -1.5,-0.5,0.5,1.5 ; b: -1.5,0.5,-0.5,1.5
        // Σ da·db = 2.25 - 0.25 - 0.25 + 2.25 = 4.0 ; Σ da² = Σ db² = 5.0 → r = 0.8
        let r = pearson_corr(&pv(&[1., 2., 3., 4.]), &pv(&[1., 3., 2., 4.])).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_zero_variance() {
        let err = pearson_corr(&pv(&[5., 5., 5.]), &pv(&[1., 2., 3.])).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance));
        let err = pearson_corr(&pv(&[1., 2., 3.]), &pv(&[0., 0., 0.])).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance));
    }

    #[test]
    fn pearson_needs_two_entries() {
        assert!(pearson_corr(&pv(&[1.]), &pv(&[2.])).is_err());
        assert!(matches!(
            pearson_corr(&pv(&[1., 2.]), &pv(&[1., 2., 3.])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn weighted_mean_examples() {
        let a = pv(&[1., 3.]);
        let b = pv(&[3., 1.]);
        assert_eq!(weighted_mean(&[&a, &b], &[1., 1.]).unwrap(), pv(&[2., 2.]));
        let r = weighted_mean(&[&pv(&[1.]), &pv(&[4.])], &[2., 1.]).unwrap();
        assert!((r.as_slice()[0] - 2.0).abs() < 1e-12);
        assert_eq!(
            weighted_mean(&[&pv(&[7., 7.])], &[5.]).unwrap(),
            pv(&[7., 7.])
        );
    }

    #[test]
    fn weighted_mean_errors() {
        let a = pv(&[1.]);
        assert!(matches!(
            weighted_mean(&[&a, &a], &[0., 0.]),
            Err(Error::AllWeightsZero)
        ));
        assert!(matches!(
            weighted_mean(&[&a, &pv(&[1., 2.])], &[1., 1.]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn nonconstant(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, len).prop_filter("non-constant", |v| {
            v.iter().any(|&x| (x - v[0]).abs() > 1e-6)
        })
    }

    proptest! {
        #[test]
        fn pearson_is_symmetric(a in nonconstant(12), b in nonconstant(12)) {
            let (a, b) = (ParamVector::new(a), ParamVector::new(b));
            prop_assert_eq!(pearson_corr(&a, &b).unwrap(), pearson_corr(&b, &a).unwrap());
        }

        #[test]
        fn pearson_affine_invariance(a in nonconstant(20), p in 0.1f64..10.0, q in -50.0f64..50.0) {
            let a = ParamVector::new(a);
            let pos = ParamVector::new(a.as_slice().iter().map(|x| p * x + q).collect());
            let neg = ParamVector::new(a.as_slice().iter().map(|x| -p * x + q).collect());
            prop_assert!((pearson_corr(&a, &pos).unwrap() - 1.0).abs() <= 1e-9);
            prop_assert!((pearson_corr(&a, &neg).unwrap() + 1.0).abs() <= 1e-9);
            prop_assert!((pearson_corr(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn weighted_mean_scale_invariant(
            vs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 5), 1..6),
            s in 0.01f64..100.0,
        ) {
            let vecs: Vec<ParamVector> = vs.into_iter().map(ParamVector::new).collect();
            let refs: Vec<&ParamVector> = vecs.iter().collect();
            let w: Vec<f64> = (1..=refs.len()).map(|i| i as f64).collect();
            let ws: Vec<f64> = w.iter().map(|x| x * s).collect();
            let m1 = weighted_mean(&refs, &w).unwrap();
            let m2 = weighted_mean(&refs, &ws).unwrap();
            for (x, y) in m1.as_slice().iter().zip(m2.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }
}
