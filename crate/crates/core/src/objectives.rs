//! Local client objectives: least squares and l1-regularized logistic loss.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{axpy, check_len, dot, ParamBlock};

/// Hessians are only formed up to this dimension.
pub const HESSIAN_MAX_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub target: f64,
}

/// Row-major sample storage shared between clients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleStore {
    m: usize,
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl SampleStore {
    pub fn new(m: usize, features: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if features.len() != m * targets.len() {
            return Err(Error::dim(format!(
                "{} feature values for {} rows of width {m}",
                features.len(),
                targets.len()
            )));
        }
        Ok(SampleStore { m, features, targets })
    }

    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let m = samples.first().map_or(0, |s| s.features.len());
        let mut features = Vec::with_capacity(m * samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != m {
                return Err(Error::dim(format!("sample {i} has {} features, expected {m}", s.features.len())));
            }
            features.extend_from_slice(&s.features);
        }
        Ok(SampleStore { m, features, targets: samples.iter().map(|s| s.target).collect() })
    }

    pub fn feature_count(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.m..(i + 1) * self.m]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample { features: self.row(i).to_vec(), target: self.targets[i] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    LeastSquares,
    LogisticL1,
}

/// One client's loss `f_i`, split into a smooth part and `l1_weight * |x|_1`.
#[derive(Debug, Clone)]
pub struct LocalObjective {
    kind: ObjectiveKind,
    store: Arc<SampleStore>,
    rows: Vec<usize>,
    global_count: usize,
    l1_weight: f64,
    normal: Arc<OnceLock<(DMatrix<f64>, DVector<f64>)>>,
}

impl LocalObjective {
    pub fn new(kind: ObjectiveKind, samples: &[Sample], global_count: usize, l1_weight: f64) -> Result<Self> {
        let store = Arc::new(SampleStore::from_samples(samples)?);
        let rows = (0..store.len()).collect();
        Self::from_store(kind, store, rows, global_count, l1_weight)
    }

    /// Objective over a subset of a shared store.
    pub fn from_store(
        kind: ObjectiveKind,
        store: Arc<SampleStore>,
        rows: Vec<usize>,
        global_count: usize,
        l1_weight: f64,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::param("objective needs at least one sample"));
        }
        if global_count < rows.len() {
            return Err(Error::param(format!(
                "global count {global_count} below local count {}",
                rows.len()
            )));
        }
        if !(l1_weight >= 0.0) || !l1_weight.is_finite() {
            return Err(Error::param("l1 weight must be finite and non-negative"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= store.len()) {
            return Err(Error::dim(format!("row {r} outside store of {} rows", store.len())));
        }
        if kind == ObjectiveKind::LogisticL1 {
            if let Some(&r) = rows.iter().find(|&&r| store.target(r) != 1.0 && store.target(r) != -1.0) {
                return Err(Error::param(format!("classification target at row {r} is not -1/+1")));
            }
        }
        Ok(LocalObjective {
            kind,
            store,
            rows,
            global_count,
            l1_weight,
            normal: Arc::new(OnceLock::new()),
        })
    }

    /// Least-squares objective `sum_r (x_r - c_r)^2`.
    pub fn separable_quadratic(center: &[f64]) -> Result<Self> {
        let m = center.len();
        let samples: Vec<Sample> = (0..m)
            .map(|r| {
                let mut a = vec![0.0; m];
                a[r] = 1.0;
                Sample { features: a, target: center[r] }
            })
            .collect();
        Self::new(ObjectiveKind::LeastSquares, &samples, m, 0.0)
    }

    /// The zero function on dimension `m`.
    pub fn zero(m: usize) -> Result<Self> {
        Self::new(ObjectiveKind::LeastSquares, &[Sample { features: vec![0.0; m], target: 0.0 }], 1, 0.0)
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.store.feature_count()
    }

    pub fn local_count(&self) -> usize {
        self.rows.len()
    }

    pub fn global_count(&self) -> usize {
        self.global_count
    }

    pub fn l1_weight(&self) -> f64 {
        self.l1_weight
    }

    pub fn with_l1_weight(&self, l1_weight: f64) -> Result<Self> {
        Self::from_store(self.kind, self.store.clone(), self.rows.clone(), self.global_count, l1_weight)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.rows.iter().map(|&r| (self.store.row(r), self.store.target(r)))
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        check_len(self.dim(), x.len())
    }

    pub fn eval_smooth(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(match self.kind {
            ObjectiveKind::LeastSquares => self.rows().map(|(a, b)| (dot(a, x) - b).powi(2)).sum(),
            ObjectiveKind::LogisticL1 => {
                let s: f64 = self.rows().map(|(a, b)| softplus(-b * dot(a, x))).sum();
                s / self.global_count as f64
            }
        })
    }

    pub fn eval_nonsmooth(&self, x: &[f64]) -> f64 {
        self.l1_weight * x.iter().map(|v| v.abs()).sum::<f64>()
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval_smooth(x)? + self.eval_nonsmooth(x))
    }

    pub fn grad_smooth(&self, x: &[f64]) -> Result<ParamBlock> {
        self.check_dim(x)?;
        let mut g = vec![0.0; self.dim()];
        self.add_grad_smooth(x, &mut g);
        Ok(ParamBlock::new(g))
    }

    /// `out += grad_smooth(x)`; dimensions unchecked.
    pub(crate) fn add_grad_smooth(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            ObjectiveKind::LeastSquares => {
                for (a, b) in self.rows() {
                    axpy(2.0 * (dot(a, x) - b), a, out);
                }
            }
            ObjectiveKind::LogisticL1 => {
                let inv_n = 1.0 / self.global_count as f64;
                for (a, b) in self.rows() {
                    let margin = b * dot(a, x);
                    axpy(-b * sigmoid(-margin) * inv_n, a, out);
                }
            }
        }
    }

    pub fn hessian_smooth(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        let m = self.dim();
        if m > HESSIAN_MAX_DIM {
            return Err(Error::Capability(format!("Hessian of dimension {m} exceeds {HESSIAN_MAX_DIM}")));
        }
        match self.kind {
            ObjectiveKind::LeastSquares => Ok(self.normal_equations().0.clone() * 2.0),
            ObjectiveKind::LogisticL1 => {
                let inv_n = 1.0 / self.global_count as f64;
                let mut h = DMatrix::zeros(m, m);
                for (a, b) in self.rows() {
                    let margin = b * dot(a, x);
                    let w = sigmoid(margin) * sigmoid(-margin) * inv_n;
                    let a = DVector::from_column_slice(a);
                    h.ger(w, &a, &a, 1.0);
                }
                Ok(h)
            }
        }
    }

    /// Cached `(A^T A, A^T b)` of the client rows.
    pub(crate) fn normal_equations(&self) -> &(DMatrix<f64>, DVector<f64>) {
        self.normal.get_or_init(|| {
            let m = self.dim();
            let mut ata = DMatrix::zeros(m, m);
            let mut atb = DVector::zeros(m);
            for (a, b) in self.rows() {
                let a = DVector::from_column_slice(a);
                ata.ger(1.0, &a, &a, 1.0);
                atb.axpy(b, &a, 1.0);
            }
            (ata, atb)
        })
    }
}

/// `ln(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn soft_threshold(beta: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::param(format!("threshold {t} must be non-negative")));
    }
    Ok(beta.iter().map(|&b| shrink(b, t)).collect())
}

#[inline]
pub(crate) fn shrink(b: f64, t: f64) -> f64 {
    b.signum() * (b.abs() - t).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub passed: bool,
    pub max_violation: f64,
}

/// First-order optimality of `Psi + l1_weight * |x|_1` given the gradient of the smooth part.
pub fn check_stationarity(
    obj: &LocalObjective,
    smooth_grad: &[f64],
    x: &[f64],
    tol: f64,
) -> Result<StationarityReport> {
    if !(tol >= 0.0) {
        return Err(Error::param("tolerance must be non-negative"));
    }
    check_len(smooth_grad.len(), x.len())?;
    let lambda = obj.l1_weight();
    let max_violation = x
        .iter()
        .zip(smooth_grad)
        .map(|(&xr, &gr)| {
            if xr != 0.0 {
                (gr + lambda * xr.signum()).abs()
            } else {
                (gr.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max);
    Ok(StationarityReport { passed: max_violation <= tol, max_violation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(a: &[f64], b: f64) -> Sample {
        Sample { features: a.to_vec(), target: b }
    }

    #[test]
    fn eval_examples() {
        let ls = LocalObjective::new(ObjectiveKind::LeastSquares, &[s(&[1., 0.], 1.)], 1, 0.).unwrap();
        assert_eq!(ls.eval_smooth(&[1., 0.]).unwrap(), 0.0);
        assert_eq!(ls.grad_smooth(&[1., 0.]).unwrap().as_slice(), &[0.0, 0.0]);

        for b in [-1.0, 1.0] {
            let lg = LocalObjective::new(ObjectiveKind::LogisticL1, &[s(&[0., 0.], b)], 1, 0.).unwrap();
            assert_relative_eq!(lg.eval_smooth(&[3., -7.]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        }

        let lg = LocalObjective::new(ObjectiveKind::LogisticL1, &[s(&[1.], 1.)], 1, 0.).unwrap();
        // ln(1 + e^{-ln 3}) = ln(4/3)
        assert_relative_eq!(lg.eval_smooth(&[3f64.ln()]).unwrap(), (4.0f64 / 3.0).ln(), epsilon = 1e-15);
        assert_relative_eq!(lg.eval_smooth(&[3f64.ln()]).unwrap(), 0.287682, epsilon = 1e-6);
        assert_eq!(lg.grad_smooth(&[0.0]).unwrap().as_slice(), &[-0.5]);
        assert!(lg.eval_smooth(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert_relative_eq!(softplus(40.0), 40.0 + (-40f64).exp(), epsilon = 1e-12);
        let lg = LocalObjective::new(ObjectiveKind::LogisticL1, &[s(&[1.], -1.)], 1, 0.).unwrap();
        assert!(lg.eval_smooth(&[1e4]).unwrap().is_finite());
        assert!(lg.grad_smooth(&[1e4]).unwrap().is_finite());
    }

    #[test]
    fn classification_targets_are_checked() {
        assert!(LocalObjective::new(ObjectiveKind::LogisticL1, &[s(&[1.], 0.)], 1, 0.).is_err());
        assert!(LocalObjective::new(ObjectiveKind::LeastSquares, &[s(&[1.], 0.)], 0, 0.).is_err());
        assert!(LocalObjective::new(ObjectiveKind::LeastSquares, &[s(&[1.], 0.)], 1, -1.).is_err());
    }

    #[test]
    fn hessian_examples() {
        let ls = LocalObjective::new(ObjectiveKind::LeastSquares, &[s(&[1., 0.], 0.), s(&[0., 1.], 0.)], 2, 0.)
            .unwrap();
        assert_eq!(ls.hessian_smooth(&[0., 0.]).unwrap(), DMatrix::identity(2, 2) * 2.0);
        assert_eq!(ls.hessian_smooth(&[1., 5.]).unwrap(), ls.hessian_smooth(&[-3., 2.]).unwrap());

        // 1-D logistic at x = 0 against a second central difference of the loss.
        let samples = [s(&[0.7], 1.), s(&[-1.3], -1.), s(&[2.0], 1.)];
        let lg = LocalObjective::new(ObjectiveKind::LogisticL1, &samples, 5, 0.).unwrap();
        let h = lg.hessian_smooth(&[0.0]).unwrap()[(0, 0)];
        let expected: f64 = samples.iter().map(|s| s.features[0].powi(2)).sum::<f64>() / 4.0 / 5.0;
        assert_relative_eq!(h, expected, epsilon = 1e-15);
        let step = 1e-4;
        let fd = (lg.eval_smooth(&[step]).unwrap() - 2.0 * lg.eval_smooth(&[0.0]).unwrap()
            + lg.eval_smooth(&[-step]).unwrap())
            / (step * step);
        assert_relative_eq!(h, fd, max_relative = 1e-6);

        let wide = LocalObjective::zero(HESSIAN_MAX_DIM + 1).unwrap();
        assert!(matches!(wide.hessian_smooth(&vec![0.0; HESSIAN_MAX_DIM + 1]), Err(Error::Capability(_))));
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(&[2.0], 1.0).unwrap(), vec![1.0]);
        assert_eq!(soft_threshold(&[-0.5], 1.0).unwrap(), vec![0.0]);
        let beta = [1.5, -2.0, 0.0];
        assert_eq!(soft_threshold(&beta, 0.0).unwrap(), beta.to_vec());
        assert!(soft_threshold(&beta, -0.1).is_err());
    }

    #[test]
    fn stationarity_examples() {
        let quiet = LocalObjective::zero(2).unwrap();
        let r = check_stationarity(&quiet, &[0.0, 0.0], &[0.3, 0.0], 0.0).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_violation, 0.0);

        let l1 = LocalObjective::zero(1).unwrap().with_l1_weight(1.0).unwrap();
        assert!(check_stationarity(&l1, &[0.5], &[0.0], 0.0).unwrap().passed);
        assert!(check_stationarity(&l1, &[-1.0], &[0.2], 1e-8).unwrap().passed);
        let r = check_stationarity(&l1, &[1.5], &[0.0], 1e-8).unwrap();
        assert!(!r.passed);
        assert_relative_eq!(r.max_violation, 0.5);
        assert!(check_stationarity(&l1, &[0.0], &[0.0], -1.0).is_err());
    }

    /// Central-difference gradient check on a random instance; returns the relative error.
    pub(crate) fn fd_relative_error(obj: &LocalObjective, x: &[f64]) -> f64 {
        let g = obj.grad_smooth(x).unwrap();
        let h = 1e-6;
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for r in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[r] += h;
            xm[r] -= h;
            let fd = (obj.eval_smooth(&xp).unwrap() - obj.eval_smooth(&xm).unwrap()) / (2.0 * h);
            num = num.max((fd - g[r]).abs());
            den = den.max(g[r].abs());
        }
        num / den.max(1e-8)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let m = rng.random_range(1..=10);
            let rows = rng.random_range(1..=20);
            let kind = if trial % 2 == 0 { ObjectiveKind::LeastSquares } else { ObjectiveKind::LogisticL1 };
            let samples: Vec<Sample> = (0..rows)
                .map(|_| {
                    let a = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let b = match kind {
                        ObjectiveKind::LeastSquares => rng.random_range(-2.0..2.0),
                        ObjectiveKind::LogisticL1 => if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                    };
                    Sample { features: a, target: b }
                })
                .collect();
            let obj = LocalObjective::new(kind, &samples, rows + 3, 0.1).unwrap();
            let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = fd_relative_error(&obj, &x);
            assert!(err < 1e-5, "trial {trial}: relative error {err}");
        }
    }

    proptest! {
        #[test]
        fn soft_threshold_is_nonexpansive(
            a in prop::collection::vec(-10.0f64..10.0, 1..8),
            shift in prop::collection::vec(-5.0f64..5.0, 8),
            t in 0.0f64..5.0,
        ) {
            let b: Vec<f64> = a.iter().zip(&shift).map(|(x, d)| x + d).collect();
            let sa = soft_threshold(&a, t).unwrap();
            let sb = soft_threshold(&b, t).unwrap();
            let lhs: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let rhs: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(lhs <= rhs + 1e-12);
        }
    }
}
