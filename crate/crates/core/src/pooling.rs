//! Pooling operators that collapse a variable-length feature set (M×d) into one d-vector.
//!
//! The simple aggregators (mean, max, K-max) all follow a sort-then-weighted-sum
//! pattern. Adaptive pooling learns that weighting instead:
//!
//! * **token level**: sort each column descending, score every sorted row with
//!   `w_tok`, softmax the scores into `θ` and take `Σ θ_m u_m`;
//! * **embedding level**: a per-dimension softmax over the raw rows (`δ`), giving a
//!   soft maximum;
//! * **balance**: a learned convex combination `ω₁ t_tok + ω₂ t_emb` with
//!   `ω = softmax([t_tok·w_bal, t_emb·w_bal])`.
//!
//! Outputs are not normalized here; the encoder normalizes once after pooling.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{
    expect_inputs, softmax_columns, softmax_columns_vjp, softmax_vector, softmax_vector_vjp,
    sort_desc_per_column, DiffOp, Matrix, SortPermutation,
};

/// K used by the hand-tuned visual baseline (K-max with K = 5).
pub const MANUAL_VISUAL_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Visual => write!(f, "visual"),
            Modality::Text => write!(f, "text"),
        }
    }
}

/// Learnable pooling weights for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolParams {
    /// d×1 scorer for sorted rows.
    pub w_tok: Matrix,
    /// d×1 scorer for the balance module.
    pub w_bal: Matrix,
}

impl PoolParams {
    pub fn zeros(dim: usize) -> Self {
        Self { w_tok: Matrix::zeros(dim, 1), w_bal: Matrix::zeros(dim, 1) }
    }

    pub fn new(w_tok: Matrix, w_bal: Matrix) -> Result<Self> {
        let p = Self { w_tok, w_bal };
        p.check(p.w_tok.rows())?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.w_tok.rows()
    }

    pub(crate) fn check(&self, dim: usize) -> Result<()> {
        for (name, w) in [("w_tok", &self.w_tok), ("w_bal", &self.w_bal)] {
            if w.shape() != (dim, 1) {
                return Err(Error::dim(format!("{name} is {:?}, expected ({dim}, 1)", w.shape())));
            }
        }
        Ok(())
    }
}

/// Which aggregator to apply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolingSpec {
    Mean,
    Max,
    KMax(usize),
    AdPool,
    /// Hand-tuned baseline: 5-max for visual features, mean for text.
    Manual(Modality),
    /// Adaptive token and embedding branches mixed with fixed `(ω₁, ω₂)`.
    FixedBalance(f64, f64),
}

impl PoolingSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PoolingSpec::KMax(0) => Err(Error::config("pooling", "kmax needs K >= 1")),
            PoolingSpec::FixedBalance(a, b) => {
                if !(a.is_finite() && b.is_finite()) || a < 0.0 || b < 0.0 || ((a + b) - 1.0).abs() > 1e-9 {
                    Err(Error::config("pooling", format!("fixed balance weights ({a}, {b}) must be >= 0 and sum to 1")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// True when the spec reads `w_tok` and `w_bal` (or just `w_tok` for fixed balance).
    pub fn is_adaptive(&self) -> bool {
        matches!(self, PoolingSpec::AdPool | PoolingSpec::FixedBalance(..))
    }
}

impl fmt::Display for PoolingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolingSpec::Mean => write!(f, "mean"),
            PoolingSpec::Max => write!(f, "max"),
            PoolingSpec::KMax(k) => write!(f, "kmax:{k}"),
            PoolingSpec::AdPool => write!(f, "adpool"),
            PoolingSpec::Manual(m) => write!(f, "manual-{m}"),
            PoolingSpec::FixedBalance(a, b) => write!(f, "fixed:{a},{b}"),
        }
    }
}

impl FromStr for PoolingSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("pooling", format!("unknown pooling spec `{s}`"));
        let spec = match s.trim() {
            "mean" => PoolingSpec::Mean,
            "max" => PoolingSpec::Max,
            "adpool" => PoolingSpec::AdPool,
            "manual-visual" => PoolingSpec::Manual(Modality::Visual),
            "manual-text" => PoolingSpec::Manual(Modality::Text),
            other => {
                if let Some(k) = other.strip_prefix("kmax:") {
                    PoolingSpec::KMax(k.trim().parse().map_err(|_| bad())?)
                } else if let Some(w) = other.strip_prefix("fixed:") {
                    let (a, b) = w.split_once(',').ok_or_else(bad)?;
                    PoolingSpec::FixedBalance(
                        a.trim().parse().map_err(|_| bad())?,
                        b.trim().parse().map_err(|_| bad())?,
                    )
                } else {
                    return Err(bad());
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn nonempty(f: &Matrix, op: &str) -> Result<()> {
    if f.rows() == 0 || f.cols() == 0 {
        return Err(Error::arg(format!("{op} of an empty feature set")));
    }
    Ok(())
}

pub fn mean_pool(f: &Matrix) -> Result<Vec<f64>> {
    nonempty(f, "mean_pool")?;
    let m = f.rows() as f64;
    Ok(crate::tensor::column_sums(f).into_iter().map(|s| s / m).collect())
}

pub fn max_pool(f: &Matrix) -> Result<Vec<f64>> {
    nonempty(f, "max_pool")?;
    Ok((0..f.cols())
        .map(|c| (0..f.rows()).map(|r| f.get(r, c)).fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Mean of the K largest values of each column.
pub fn kmax_pool(f: &Matrix, k: usize) -> Result<Vec<f64>> {
    nonempty(f, "kmax_pool")?;
    if k == 0 || k > f.rows() {
        return Err(Error::arg(format!("kmax_pool K={k} outside 1..={}", f.rows())));
    }
    let (sorted, _) = sort_desc_per_column(f)?;
    Ok(top_k_mean(f, &sorted, k))
}

fn top_k_mean(f: &Matrix, sorted: &Matrix, k: usize) -> Vec<f64> {
    if k == f.rows() {
        // same summation order as mean_pool, so K = M reproduces it bit for bit
        return crate::tensor::column_sums(f).into_iter().map(|s| s / k as f64).collect();
    }
    (0..sorted.cols())
        .map(|c| (0..k).map(|r| sorted.get(r, c)).sum::<f64>() / k as f64)
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Token-level adaptive pooling. Returns the pooled vector and the row weights θ.
pub fn token_level_adpool(f: &Matrix, w_tok: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let (pooled, theta, _, _) = token_level_forward(f, w_tok)?;
    Ok((pooled, theta))
}

fn token_level_forward(f: &Matrix, w_tok: &Matrix) -> Result<(Vec<f64>, Vec<f64>, Matrix, SortPermutation)> {
    nonempty(f, "token_level_adpool")?;
    if w_tok.shape() != (f.cols(), 1) {
        return Err(Error::dim(format!("w_tok is {:?}, expected ({}, 1)", w_tok.shape(), f.cols())));
    }
    let (u, perm) = sort_desc_per_column(f)?;
    let logits: Vec<f64> = (0..u.rows()).map(|m| dot(u.row(m), w_tok.data())).collect();
    let theta = softmax_vector(&logits)?;
    let mut pooled = vec![0.0; f.cols()];
    for (m, &t) in theta.iter().enumerate() {
        for (p, v) in pooled.iter_mut().zip(u.row(m)) {
            *p += t * v;
        }
    }
    Ok((pooled, theta, u, perm))
}

/// Returns `(∂/∂F, ∂/∂w_tok)` for token-level pooling.
fn token_level_backward(
    u: &Matrix,
    perm: &SortPermutation,
    theta: &[f64],
    w_tok: &Matrix,
    g: &[f64],
) -> (Matrix, Matrix) {
    let g_theta: Vec<f64> = (0..u.rows()).map(|m| dot(u.row(m), g)).collect();
    let g_logits = softmax_vector_vjp(theta, &g_theta);
    let mut g_u = Matrix::zeros(u.rows(), u.cols());
    let mut g_w = Matrix::zeros(u.cols(), 1);
    for m in 0..u.rows() {
        let row = g_u.row_mut(m);
        for (j, r) in row.iter_mut().enumerate() {
            *r = theta[m] * g[j] + g_logits[m] * w_tok.data()[j];
        }
        for (j, uv) in u.row(m).iter().enumerate() {
            g_w.add_at(j, 0, g_logits[m] * uv);
        }
    }
    (perm.scatter(&g_u), g_w)
}

/// Embedding-level adaptive pooling. Returns the pooled vector and the M×d weights δ.
pub fn embedding_level_adpool(f: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    nonempty(f, "embedding_level_adpool")?;
    let delta = softmax_columns(f)?;
    let pooled = (0..f.cols())
        .map(|c| (0..f.rows()).map(|r| delta.get(r, c) * f.get(r, c)).sum())
        .collect();
    Ok((pooled, delta))
}

fn embedding_level_backward(f: &Matrix, delta: &Matrix, g: &[f64]) -> Matrix {
    // direct term δ·g plus the path through δ
    let mut g_delta = Matrix::zeros(f.rows(), f.cols());
    let mut direct = Matrix::zeros(f.rows(), f.cols());
    for r in 0..f.rows() {
        for c in 0..f.cols() {
            g_delta.set(r, c, g[c] * f.get(r, c));
            direct.set(r, c, g[c] * delta.get(r, c));
        }
    }
    let mut out = softmax_columns_vjp(delta, &g_delta);
    out.add_assign(&direct);
    out
}

fn check_balance_dims(t_tok: &[f64], t_emb: &[f64], w_bal: &Matrix) -> Result<()> {
    if t_tok.len() != t_emb.len() || w_bal.shape() != (t_tok.len(), 1) {
        return Err(Error::dim(format!(
            "balance inputs of length {} and {} with w_bal {:?}",
            t_tok.len(),
            t_emb.len(),
            w_bal.shape()
        )));
    }
    Ok(())
}

/// Learned convex combination of the two pooled vectors. Returns `(t, ω)`.
pub fn balance_combine(t_tok: &[f64], t_emb: &[f64], w_bal: &Matrix) -> Result<(Vec<f64>, [f64; 2])> {
    check_balance_dims(t_tok, t_emb, w_bal)?;
    let w = softmax_vector(&[dot(t_tok, w_bal.data()), dot(t_emb, w_bal.data())])?;
    let omega = [w[0], w[1]];
    Ok((mix(t_tok, t_emb, omega), omega))
}

/// Combination with caller-chosen weights, as in the fixed-weight ablation.
pub fn fixed_balance_combine(t_tok: &[f64], t_emb: &[f64], omega: [f64; 2]) -> Result<Vec<f64>> {
    if t_tok.len() != t_emb.len() {
        return Err(Error::dim(format!("balance inputs of length {} and {}", t_tok.len(), t_emb.len())));
    }
    Ok(mix(t_tok, t_emb, omega))
}

fn mix(a: &[f64], b: &[f64], omega: [f64; 2]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| omega[0] * x + omega[1] * y).collect()
}

/// Returns `(∂/∂t_tok, ∂/∂t_emb, ∂/∂w_bal)`.
fn balance_backward(
    t_tok: &[f64],
    t_emb: &[f64],
    w_bal: &Matrix,
    omega: [f64; 2],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Matrix) {
    let g_omega = [dot(g, t_tok), dot(g, t_emb)];
    let gl = softmax_vector_vjp(&omega, &g_omega);
    let w = w_bal.data();
    let g_tok = g.iter().zip(w).map(|(gi, wi)| omega[0] * gi + gl[0] * wi).collect();
    let g_emb = g.iter().zip(w).map(|(gi, wi)| omega[1] * gi + gl[1] * wi).collect();
    let g_w = t_tok.iter().zip(t_emb).map(|(a, b)| gl[0] * a + gl[1] * b).collect();
    (g_tok, g_emb, Matrix::from_vec(w.len(), 1, g_w).expect("finite balance gradient"))
}

/// Intermediate weights of one adaptive pooling call.
#[derive(Debug, Clone, PartialEq)]
pub struct AdPoolDiagnostics {
    /// Softmax weights over sorted rows (length M).
    pub theta: Vec<f64>,
    /// Per-dimension softmax weights (M×d); each column sums to 1.
    pub delta: Matrix,
    /// Balance weights for the token and embedding branches.
    pub omega: [f64; 2],
    pub t_tok: Vec<f64>,
    pub t_emb: Vec<f64>,
}

/// Full adaptive pooling: token level + embedding level + learned balance.
pub fn adpool(f: &Matrix, params: &PoolParams) -> Result<(Vec<f64>, AdPoolDiagnostics)> {
    let trace = PoolTrace::forward(f, PoolingSpec::AdPool, params)?;
    let diag = trace.diagnostics().expect("adaptive trace").clone();
    Ok((trace.output, diag))
}

/// Dispatches to the aggregator named by `spec`.
pub fn pool(f: &Matrix, spec: PoolingSpec, params: &PoolParams) -> Result<Vec<f64>> {
    Ok(PoolTrace::forward(f, spec, params)?.output)
}

#[derive(Debug, Clone)]
enum Cache {
    Mean { rows: usize },
    TopK { perm: SortPermutation, k: usize },
    Adaptive { u: Matrix, perm: SortPermutation, diag: AdPoolDiagnostics, learned: bool },
}

/// Forward result of [`pool`] together with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct PoolTrace {
    pub output: Vec<f64>,
    cache: Cache,
}

/// Gradients produced by [`PoolTrace::backward`].
#[derive(Debug, Clone)]
pub struct PoolGrads {
    pub features: Matrix,
    pub w_tok: Matrix,
    pub w_bal: Matrix,
}

impl PoolTrace {
    pub fn forward(f: &Matrix, spec: PoolingSpec, params: &PoolParams) -> Result<Self> {
        spec.validate()?;
        nonempty(f, "pool")?;
        let top_k = |k: usize| -> Result<PoolTrace> {
            if k == 0 || k > f.rows() {
                return Err(Error::arg(format!("kmax_pool K={k} outside 1..={}", f.rows())));
            }
            let (sorted, perm) = sort_desc_per_column(f)?;
            Ok(PoolTrace { output: top_k_mean(f, &sorted, k), cache: Cache::TopK { perm, k } })
        };
        match spec {
            PoolingSpec::Mean | PoolingSpec::Manual(Modality::Text) => {
                Ok(PoolTrace { output: mean_pool(f)?, cache: Cache::Mean { rows: f.rows() } })
            }
            PoolingSpec::Max => top_k(1),
            PoolingSpec::KMax(k) => top_k(k),
            // short visual sets fall back to all rows
            PoolingSpec::Manual(Modality::Visual) => top_k(MANUAL_VISUAL_K.min(f.rows())),
            PoolingSpec::AdPool | PoolingSpec::FixedBalance(..) => {
                params.check(f.cols())?;
                let (t_tok, theta, u, perm) = token_level_forward(f, &params.w_tok)?;
                let (t_emb, delta) = embedding_level_adpool(f)?;
                let (output, omega, learned) = match spec {
                    PoolingSpec::FixedBalance(a, b) => (fixed_balance_combine(&t_tok, &t_emb, [a, b])?, [a, b], false),
                    _ => {
                        let (t, w) = balance_combine(&t_tok, &t_emb, &params.w_bal)?;
                        (t, w, true)
                    }
                };
                let diag = AdPoolDiagnostics { theta, delta, omega, t_tok, t_emb };
                Ok(PoolTrace { output, cache: Cache::Adaptive { u, perm, diag, learned } })
            }
        }
    }

    pub fn diagnostics(&self) -> Option<&AdPoolDiagnostics> {
        match &self.cache {
            Cache::Adaptive { diag, .. } => Some(diag),
            _ => None,
        }
    }

    /// Pulls `g = ∂L/∂output` back onto the features and pooling weights.
    pub fn backward(&self, f: &Matrix, params: &PoolParams, g: &[f64]) -> PoolGrads {
        let d = f.cols();
        let zeros = || Matrix::zeros(params.w_tok.rows(), 1);
        match &self.cache {
            Cache::Mean { rows } => {
                let mut gf = Matrix::zeros(*rows, d);
                for r in 0..*rows {
                    for (o, gv) in gf.row_mut(r).iter_mut().zip(g) {
                        *o = gv / *rows as f64;
                    }
                }
                PoolGrads { features: gf, w_tok: zeros(), w_bal: zeros() }
            }
            Cache::TopK { perm, k } => {
                let mut gs = Matrix::zeros(f.rows(), d);
                for r in 0..*k {
                    for (o, gv) in gs.row_mut(r).iter_mut().zip(g) {
                        *o = gv / *k as f64;
                    }
                }
                PoolGrads { features: perm.scatter(&gs), w_tok: zeros(), w_bal: zeros() }
            }
            Cache::Adaptive { u, perm, diag, learned } => {
                let (g_tok, g_emb, g_wbal) = if *learned {
                    balance_backward(&diag.t_tok, &diag.t_emb, &params.w_bal, diag.omega, g)
                } else {
                    let scaled = |w: f64| g.iter().map(|v| w * v).collect::<Vec<_>>();
                    (scaled(diag.omega[0]), scaled(diag.omega[1]), zeros())
                };
                let (mut gf, g_wtok) = token_level_backward(u, perm, &diag.theta, &params.w_tok, &g_tok);
                gf.add_assign(&embedding_level_backward(f, &diag.delta, &g_emb));
                PoolGrads { features: gf, w_tok: g_wtok, w_bal: g_wbal }
            }
        }
    }
}

fn as_row(v: Vec<f64>) -> Result<Matrix> {
    Matrix::row_vector(&v)
}

/// Pooling with a non-learned spec (mean, max, kmax, manual) as a [`DiffOp`] on `[F]`.
pub struct SimplePoolOp(pub PoolingSpec);

impl DiffOp for SimplePoolOp {
    fn name(&self) -> String {
        format!("pool[{}]", self.0)
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("pool", inputs, 1)?;
        as_row(pool(&inputs[0], self.0, &PoolParams::zeros(inputs[0].cols()))?)
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let params = PoolParams::zeros(inputs[0].cols());
        let trace = PoolTrace::forward(&inputs[0], self.0, &params)?;
        Ok(vec![trace.backward(&inputs[0], &params, upstream.data()).features])
    }
}

/// Token-level pooling on `[F, w_tok]`.
pub struct TokenLevelOp;

impl DiffOp for TokenLevelOp {
    fn name(&self) -> String {
        "token_level_adpool".into()
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("token_level_adpool", inputs, 2)?;
        as_row(token_level_adpool(&inputs[0], &inputs[1])?.0)
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let (_, theta, u, perm) = token_level_forward(&inputs[0], &inputs[1])?;
        let (gf, gw) = token_level_backward(&u, &perm, &theta, &inputs[1], upstream.data());
        Ok(vec![gf, gw])
    }
}

/// Embedding-level pooling on `[F]`.
pub struct EmbeddingLevelOp;

impl DiffOp for EmbeddingLevelOp {
    fn name(&self) -> String {
        "embedding_level_adpool".into()
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("embedding_level_adpool", inputs, 1)?;
        as_row(embedding_level_adpool(&inputs[0])?.0)
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let (_, delta) = embedding_level_adpool(&inputs[0])?;
        Ok(vec![embedding_level_backward(&inputs[0], &delta, upstream.data())])
    }
}

/// Balance module on `[t_tok (1×d), t_emb (1×d), w_bal (d×1)]`.
pub struct BalanceOp;

impl DiffOp for BalanceOp {
    fn name(&self) -> String {
        "balance_combine".into()
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("balance_combine", inputs, 3)?;
        as_row(balance_combine(inputs[0].data(), inputs[1].data(), &inputs[2])?.0)
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let (_, omega) = balance_combine(inputs[0].data(), inputs[1].data(), &inputs[2])?;
        let (gt, ge, gw) = balance_backward(inputs[0].data(), inputs[1].data(), &inputs[2], omega, upstream.data());
        Ok(vec![as_row(gt)?, as_row(ge)?, gw])
    }
}

/// Adaptive pooling (`AdPool` or `FixedBalance`) on `[F, w_tok, w_bal]`.
pub struct AdPoolOp(pub PoolingSpec);

impl DiffOp for AdPoolOp {
    fn name(&self) -> String {
        format!("pool[{}]", self.0)
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("adpool", inputs, 3)?;
        let params = PoolParams::new(inputs[1].clone(), inputs[2].clone())?;
        as_row(pool(&inputs[0], self.0, &params)?)
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let params = PoolParams::new(inputs[1].clone(), inputs[2].clone())?;
        let g = PoolTrace::forward(&inputs[0], self.0, &params)?.backward(&inputs[0], &params, upstream.data());
        Ok(vec![g.features, g.w_tok, g.w_bal])
    }
}
