//! Central finite-difference verification of [`DiffOp`] vector-Jacobian products.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{DiffOp, Matrix};

/// Perturbation used for the central differences.
pub const FD_STEP: f64 = 1e-5;

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`, so
/// entries whose true gradient is zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

const UPSTREAM_SEED: u64 = 0x00ad_9e7c;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    /// `(input index, flat entry index)` of the worst entry.
    pub worst_entry: (usize, usize),
    pub entries_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `op.vjp` against central finite differences of the scalar
/// `<u, op.forward(inputs)>` for a fixed random upstream `u`.
pub fn finite_diff_check(op: &dyn DiffOp, inputs: &[Matrix], tolerance: f64) -> Result<GradCheckReport> {
    let output = op.forward(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(UPSTREAM_SEED);
    let upstream = Matrix::random_uniform(output.rows(), output.cols(), -1.0, 1.0, &mut rng);
    let analytic = op.vjp(inputs, &output, &upstream)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Evaluation(format!(
            "{} returned {} gradients for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }

    let scalar = |xs: &[Matrix]| -> Result<f64> {
        let out = op.forward(xs)?;
        let v = out.dot(&upstream);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!("{} forward is not finite", op.name())))
        }
    };

    let mut worst = 0.0;
    let mut worst_entry = (0, 0);
    let mut checked = 0;
    let mut probe: Vec<Matrix> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[k].shape() {
            return Err(Error::dim(format!(
                "{} gradient {k} has shape {:?}, input has {:?}",
                op.name(),
                grad.shape(),
                inputs[k].shape()
            )));
        }
        for e in 0..inputs[k].data().len() {
            let x0 = inputs[k].data()[e];
            probe[k].data_mut()[e] = x0 + FD_STEP;
            let plus = scalar(&probe)?;
            probe[k].data_mut()[e] = x0 - FD_STEP;
            let minus = scalar(&probe)?;
            probe[k].data_mut()[e] = x0;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > worst || !rel.is_finite() {
                worst = rel;
                worst_entry = (k, e);
            }
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        op: op.name(),
        max_rel_error: worst,
        worst_entry,
        entries_checked: checked,
        tolerance,
        passed: worst <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{MatMul, SoftmaxColumns};

    struct Corrupted<O>(O);

    impl<O: DiffOp> DiffOp for Corrupted<O> {
        fn name(&self) -> String {
            format!("corrupted {}", self.0.name())
        }
        fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
            self.0.forward(inputs)
        }
        fn vjp(&self, inputs: &[Matrix], output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
            Ok(self.0.vjp(inputs, output, upstream)?.into_iter().map(|g| g.scale(1.01)).collect())
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_passes() {
        let mut r = rng(1);
        let a = Matrix::random_normal(2, 3, 1.0, &mut r);
        let b = Matrix::random_normal(3, 2, 1.0, &mut r);
        let rep = finite_diff_check(&MatMul, &[a, b], 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.entries_checked, 12);
    }

    #[test]
    fn matmul_3x4_by_4x2_within_1e6() {
        let mut r = rng(2);
        let a = Matrix::random_normal(3, 4, 1.0, &mut r);
        let b = Matrix::random_normal(4, 2, 1.0, &mut r);
        let rep = finite_diff_check(&MatMul, &[a, b], 1e-6).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn softmax_columns_passes() {
        let mut r = rng(3);
        let m = Matrix::random_normal(4, 3, 1.0, &mut r);
        assert!(finite_diff_check(&SoftmaxColumns, &[m], 1e-4).unwrap().passed);
    }

    #[test]
    fn corrupted_vjp_fails() {
        let mut r = rng(4);
        let a = Matrix::random_normal(2, 3, 1.0, &mut r);
        let b = Matrix::random_normal(3, 2, 1.0, &mut r);
        let rep = finite_diff_check(&Corrupted(MatMul), &[a, b], 1e-4).unwrap();
        assert!(!rep.passed);
        assert!(rep.max_rel_error > 5e-3);
    }

    #[test]
    fn non_finite_forward_is_an_evaluation_error() {
        struct Blowup;
        impl DiffOp for Blowup {
            fn name(&self) -> String {
                "blowup".into()
            }
            fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
                Ok(inputs[0].map(|v| if v > 1.0 { 1e308 * 10.0 * v } else { v }))
            }
            fn vjp(&self, _: &[Matrix], _: &Matrix, up: &Matrix) -> Result<Vec<Matrix>> {
                Ok(vec![up.clone()])
            }
        }
        let x = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        assert!(matches!(finite_diff_check(&Blowup, &[x], 1e-4), Err(Error::Evaluation(_))));
    }
}
