//! Dense matrices and the differentiable primitives built on them.

mod gradcheck;
mod matrix;
mod ops;

pub use gradcheck::{finite_diff_check, GradCheckReport, FD_STEP, REL_FLOOR};
pub use matrix::{Matrix, SimilarityMatrix};
pub use ops::{
    add_row_bias, column_sums, cosine_sim_matrix, cosine_sim_vjp, l2_normalize_rows, l2_normalize_rows_vjp,
    matmul, matmul_vjp, softmax_columns, softmax_columns_vjp, softmax_vector, softmax_vector_vjp,
    sort_desc_per_column, AddRowBias, CosineSim, DiffOp, L2NormalizeRows, MatMul, SoftmaxColumns,
    SoftmaxVector, SortDescPerColumn, SortPermutation, MIN_NORM,
};
pub(crate) use ops::{expect_inputs, row_norm};
