//! The fixed set of differentiable primitives used by pooling, encoding and the losses.
//!
//! Each primitive is a plain function plus a matching `*_vjp` function that maps an
//! upstream gradient back onto the inputs. The [`DiffOp`] trait wraps the pair so the
//! finite-difference checker can treat every operation uniformly.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Rows with a Euclidean norm below this are rejected by normalization.
pub const MIN_NORM: f64 = 1e-12;

/// A differentiable operation: a forward map plus its vector-Jacobian product.
pub trait DiffOp {
    fn name(&self) -> String;

    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix>;

    /// Gradient of `<upstream, forward(inputs)>` with respect to each input.
    fn vjp(&self, inputs: &[Matrix], output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>>;
}

pub(crate) fn expect_inputs(op: &str, inputs: &[Matrix], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::arg(format!("{op} takes {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::dim(format!(
            "matmul of {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(p)) {
                *o += av * bv;
            }
        }
    }
    out.checked("matmul")
}

/// Returns `(g·bᵀ, aᵀ·g)`.
pub fn matmul_vjp(a: &Matrix, b: &Matrix, upstream: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((matmul(upstream, &b.transpose())?, matmul(&a.transpose(), upstream)?))
}

pub fn add_row_bias(m: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if bias.len() != m.cols() {
        return Err(Error::dim(format!(
            "bias of length {} added to a matrix with {} columns",
            bias.len(),
            m.cols()
        )));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
            *o += b;
        }
    }
    out.checked("add_row_bias")
}

/// Column sums; the bias gradient of [`add_row_bias`].
pub fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (s, v) in sums.iter_mut().zip(m.row(r)) {
            *s += v;
        }
    }
    sums
}

/// Softmax down each column, stabilized by subtracting the column maximum.
pub fn softmax_columns(m: &Matrix) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::arg("softmax_columns of an empty matrix"));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for c in 0..m.cols() {
        let col = m.column(c);
        for (r, v) in softmax_slice(&col).into_iter().enumerate() {
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// VJP of [`softmax_columns`] given its output `y`.
pub fn softmax_columns_vjp(y: &Matrix, upstream: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for c in 0..y.cols() {
        let inner: f64 = (0..y.rows()).map(|r| y.get(r, c) * upstream.get(r, c)).sum();
        for r in 0..y.rows() {
            out.set(r, c, y.get(r, c) * (upstream.get(r, c) - inner));
        }
    }
    out
}

pub fn softmax_vector(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::arg("softmax_vector of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Evaluation("softmax_vector input is not finite".into()));
    }
    Ok(softmax_slice(v))
}

pub fn softmax_vector_vjp(y: &[f64], upstream: &[f64]) -> Vec<f64> {
    let inner: f64 = y.iter().zip(upstream).map(|(a, b)| a * b).sum();
    y.iter().zip(upstream).map(|(yi, gi)| yi * (gi - inner)).collect()
}

fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-column descending order produced by [`sort_desc_per_column`].
///
/// `order[c][r]` is the input row that landed at rank `r` of column `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortPermutation {
    order: Vec<Vec<usize>>,
}

impl SortPermutation {
    pub fn column(&self, c: usize) -> &[usize] {
        &self.order[c]
    }

    pub fn cols(&self) -> usize {
        self.order.len()
    }

    /// Undoes the sort: `reconstruct(sorted) == input`.
    pub fn reconstruct(&self, sorted: &Matrix) -> Matrix {
        self.scatter(sorted)
    }

    /// Sends values at sorted positions back to their original rows. This is
    /// also the VJP of the sort, which is locally a fixed permutation.
    pub fn scatter(&self, sorted: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(sorted.rows(), sorted.cols());
        for (c, order) in self.order.iter().enumerate() {
            for (rank, &src) in order.iter().enumerate() {
                out.set(src, c, sorted.get(rank, c));
            }
        }
        out
    }
}

/// Sorts every column in descending order. Ties keep their original row order.
pub fn sort_desc_per_column(m: &Matrix) -> Result<(Matrix, SortPermutation)> {
    if m.is_empty() {
        return Err(Error::arg("sort_desc_per_column of an empty matrix"));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let mut order = Vec::with_capacity(m.cols());
    for c in 0..m.cols() {
        let mut idx: Vec<usize> = (0..m.rows()).collect();
        // stable sort, so equal values stay in index order
        idx.sort_by(|&i, &j| m.get(j, c).total_cmp(&m.get(i, c)));
        for (rank, &src) in idx.iter().enumerate() {
            out.set(rank, c, m.get(src, c));
        }
        order.push(idx);
    }
    Ok((out, SortPermutation { order }))
}

pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::arg("l2_normalize_rows of an empty matrix"));
    }
    let mut out = m.clone();
    for r in 0..m.rows() {
        let norm = row_norm(m.row(r));
        if norm < MIN_NORM {
            return Err(Error::DegenerateVector { row: r, norm });
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// VJP of [`l2_normalize_rows`]: `(g − y·(y·g)) / ‖x‖` per row.
pub fn l2_normalize_rows_vjp(x: &Matrix, y: &Matrix, upstream: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let norm = row_norm(x.row(r));
        let yr = y.row(r);
        let gr = upstream.row(r);
        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (o, (yv, gv)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
            *o = (gv - yv * proj) / norm;
        }
    }
    out
}

pub(crate) fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `S[i][j]` = cosine between row `i` of `t` and row `j` of `v`.
pub fn cosine_sim_matrix(t: &Matrix, v: &Matrix) -> Result<Matrix> {
    if t.cols() != v.cols() {
        return Err(Error::dim(format!(
            "cosine similarity between {}x{} and {}x{}",
            t.rows(),
            t.cols(),
            v.rows(),
            v.cols()
        )));
    }
    if t.rows() == 0 || v.rows() == 0 {
        return Ok(Matrix::zeros(t.rows(), v.rows()));
    }
    let tn = l2_normalize_rows(t)?;
    let vn = l2_normalize_rows(v)?;
    let mut s = matmul(&tn, &vn.transpose())?;
    s.data_mut().iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
    Ok(s)
}

/// VJP of [`cosine_sim_matrix`] with respect to both inputs.
pub fn cosine_sim_vjp(t: &Matrix, v: &Matrix, upstream: &Matrix) -> Result<(Matrix, Matrix)> {
    let tn = l2_normalize_rows(t)?;
    let vn = l2_normalize_rows(v)?;
    let g_tn = matmul(upstream, &vn)?;
    let g_vn = matmul(&upstream.transpose(), &tn)?;
    Ok((l2_normalize_rows_vjp(t, &tn, &g_tn), l2_normalize_rows_vjp(v, &vn, &g_vn)))
}

pub struct MatMul;
pub struct AddRowBias;
pub struct SoftmaxColumns;
/// Softmax of a single column vector (n×1).
pub struct SoftmaxVector;
pub struct SortDescPerColumn;
pub struct L2NormalizeRows;
pub struct CosineSim;

impl DiffOp for MatMul {
    fn name(&self) -> String {
        "matmul".into()
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("matmul", inputs, 2)?;
        matmul(&inputs[0], &inputs[1])
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let (ga, gb) = matmul_vjp(&inputs[0], &inputs[1], upstream)?;
        Ok(vec![ga, gb])
    }
}

impl DiffOp for AddRowBias {
    fn name(&self) -> String {
        "add_row_bias".into()
    }
    /// Inputs: the matrix and a 1×cols bias row.
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("add_row_bias", inputs, 2)?;
        add_row_bias(&inputs[0], inputs[1].data())
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let gb = Matrix::from_vec(1, inputs[1].cols(), column_sums(upstream))?;
        Ok(vec![upstream.clone(), gb])
    }
}

impl DiffOp for SoftmaxColumns {
    fn name(&self) -> String {
        "softmax_columns".into()
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("softmax_columns", inputs, 1)?;
        softmax_columns(&inputs[0])
    }
    fn vjp(&self, _inputs: &[Matrix], output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        Ok(vec![softmax_columns_vjp(output, upstream)])
    }
}

impl DiffOp for SoftmaxVector {
    fn name(&self) -> String {
        "softmax_vector".into()
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("softmax_vector", inputs, 1)?;
        Matrix::column_vector(&softmax_vector(inputs[0].data())?)
    }
    fn vjp(&self, _inputs: &[Matrix], output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        Ok(vec![Matrix::column_vector(&softmax_vector_vjp(output.data(), upstream.data()))?])
    }
}

impl DiffOp for SortDescPerColumn {
    fn name(&self) -> String {
        "sort_desc_per_column".into()
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("sort_desc_per_column", inputs, 1)?;
        Ok(sort_desc_per_column(&inputs[0])?.0)
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let (_, perm) = sort_desc_per_column(&inputs[0])?;
        Ok(vec![perm.scatter(upstream)])
    }
}

impl DiffOp for L2NormalizeRows {
    fn name(&self) -> String {
        "l2_normalize_rows".into()
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("l2_normalize_rows", inputs, 1)?;
        l2_normalize_rows(&inputs[0])
    }
    fn vjp(&self, inputs: &[Matrix], output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        Ok(vec![l2_normalize_rows_vjp(&inputs[0], output, upstream)])
    }
}

impl DiffOp for CosineSim {
    fn name(&self) -> String {
        "cosine_sim_matrix".into()
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("cosine_sim_matrix", inputs, 2)?;
        cosine_sim_matrix(&inputs[0], &inputs[1])
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let (gt, gv) = cosine_sim_vjp(&inputs[0], &inputs[1], upstream)?;
        Ok(vec![gt, gv])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_examples() {
        let id = Matrix::identity(2);
        let col = m(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&id, &col).unwrap(), col);
        assert_eq!(matmul(&m(&[&[1.0, 2.0]]), &col).unwrap(), m(&[&[11.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3 by 2x3"), "{msg}");
    }

    #[test]
    fn add_row_bias_examples() {
        assert_eq!(add_row_bias(&m(&[&[0.0, 0.0]]), &[1.0, 2.0]).unwrap(), m(&[&[1.0, 2.0]]));
        let x = m(&[&[1.0, 1.0], &[2.0, 2.0]]);
        assert_eq!(add_row_bias(&x, &[0.0, 0.0]).unwrap(), x);
        assert!(matches!(add_row_bias(&x, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_column_examples() {
        let s = softmax_columns(&m(&[&[0.0, 2.0, 1000.0], &[0.0, 0.0, 0.0]])).unwrap();
        assert_eq!(s.column(0), vec![0.5, 0.5]);
        let e2 = 2f64.exp();
        assert!((s.get(0, 1) - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.8808).abs() < 1e-4);
        assert!((s.get(1, 1) - 0.1192).abs() < 1e-4);
        assert_eq!(s.get(0, 2), 1.0);
        assert!(s.get(1, 2) >= 0.0 && s.get(1, 2) < 1e-300);
        assert!(matches!(softmax_columns(&Matrix::zeros(0, 0)), Err(Error::Argument(_))));
    }

    #[test]
    fn softmax_vector_examples() {
        assert_eq!(softmax_vector(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax_vector(&[3f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        assert!(softmax_vector(&[]).is_err());
    }

    #[test]
    fn sort_examples() {
        let (s, p) = sort_desc_per_column(&m(&[&[1.0], &[3.0], &[2.0]])).unwrap();
        assert_eq!(s.column(0), vec![3.0, 2.0, 1.0]);
        assert_eq!(p.column(0), &[1, 2, 0]);
        let (_, p) = sort_desc_per_column(&m(&[&[3.0], &[2.0], &[1.0]])).unwrap();
        assert_eq!(p.column(0), &[0, 1, 2]);
        // ties keep index order
        let (_, p) = sort_desc_per_column(&m(&[&[1.0], &[2.0], &[1.0], &[2.0]])).unwrap();
        assert_eq!(p.column(0), &[1, 3, 0, 2]);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize_rows(&m(&[&[3.0, 4.0]])).unwrap(), m(&[&[0.6, 0.8]]));
        let u = m(&[&[0.6, 0.8]]);
        assert_eq!(l2_normalize_rows(&u).unwrap(), u);
        assert!(matches!(
            l2_normalize_rows(&m(&[&[1.0, 0.0], &[0.0, 1e-13]])),
            Err(Error::DegenerateVector { row: 1, .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        let x = m(&[&[0.3, -1.2, 2.0]]);
        assert!((cosine_sim_matrix(&x, &x).unwrap().get(0, 0) - 1.0).abs() < 1e-15);
        let s = cosine_sim_matrix(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]])).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        assert!(matches!(
            cosine_sim_matrix(&m(&[&[0.0, 0.0]]), &m(&[&[0.0, 1.0]])),
            Err(Error::DegenerateVector { .. })
        ));
        assert!(matches!(
            cosine_sim_matrix(&Matrix::zeros(1, 2), &Matrix::zeros(1, 3)),
            Err(Error::Dimension(_))
        ));
    }
}
