//! Training objectives over a batch similarity matrix `S` (rows = texts, columns = images).
//!
//! Every loss returns its value together with `∂L/∂S`, so the trainer can push the
//! gradient back through the encoders.

use std::f64::consts::FRAC_PI_4;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{expect_inputs, DiffOp, Matrix, SimilarityMatrix};

pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Hinge loss against the hardest in-batch negative.
    HardTriplet,
    /// InfoNCE over the hardest K negatives, K chosen per batch from alignment and uniformity.
    InfoNceAdaptive,
    /// InfoNCE over the hardest K negatives with a fixed K.
    InfoNceFixed(usize),
}

impl LossMode {
    pub fn is_adaptive(&self) -> bool {
        matches!(self, LossMode::InfoNceAdaptive)
    }

    pub fn label(&self) -> &'static str {
        match self {
            LossMode::HardTriplet => "hard-triplet",
            LossMode::InfoNceAdaptive => "infonce-adaptive",
            LossMode::InfoNceFixed(_) => "infonce-fixed",
        }
    }

    /// Parses a mode name; `k` is required for `infonce-fixed` and ignored otherwise.
    pub fn parse(name: &str, k: Option<usize>) -> Result<Self> {
        match name {
            "hard-triplet" => Ok(LossMode::HardTriplet),
            "infonce-adaptive" => Ok(LossMode::InfoNceAdaptive),
            "infonce-fixed" => match k {
                Some(k) if k >= 1 => Ok(LossMode::InfoNceFixed(k)),
                Some(_) => Err(Error::config("k", "fixed negative count must be >= 1")),
                None => Err(Error::config("k", "infonce-fixed needs a negative count")),
            },
            other => Err(Error::config("loss", format!("unknown loss mode `{other}`"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossMode::InfoNceFixed(k) => write!(f, "infonce-fixed({k})"),
            other => f.write_str(other.label()),
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LossMode::parse(s, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub temperature: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { margin: DEFAULT_MARGIN, temperature: DEFAULT_TEMPERATURE, mode: LossMode::InfoNceAdaptive }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", format!("must be > 0, got {}", self.temperature)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config("margin", format!("must be >= 0, got {}", self.margin)));
        }
        if let LossMode::InfoNceFixed(0) = self.mode {
            return Err(Error::config("k", "fixed negative count must be >= 1"));
        }
        Ok(())
    }
}

/// Batch statistics that drive the adaptive negative count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMaturity {
    /// Mean positive-pair similarity, clamped to [0, 1].
    pub gamma_align: f64,
    /// Log-mean-exp of all similarities, clamped to [0, 1].
    pub gamma_uniform: f64,
    pub k_selected: usize,
}

/// Hardest-K negatives for every anchor in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSelection {
    /// For text anchor `i` (row), image columns `j != i`.
    pub text_to_image: Vec<Vec<usize>>,
    /// For image anchor `j` (column), text rows `i != j`.
    pub image_to_text: Vec<Vec<usize>>,
}

impl NegativeSelection {
    pub fn k(&self) -> usize {
        self.text_to_image.first().map_or(0, Vec::len)
    }
}

fn square(s: &Matrix, op: &str) -> Result<usize> {
    if s.rows() != s.cols() {
        return Err(Error::dim(format!("{op} needs a square similarity matrix, got {}x{}", s.rows(), s.cols())));
    }
    Ok(s.rows())
}

/// Hardest-negative hinge loss, summed over the batch. Returns `(loss, ∂L/∂S)`.
///
/// For each positive `(i, i)` it adds `[α − S_ii + S_ij*]⁺ + [α − S_ii + S_i*i]⁺` with
/// `j*` the hardest image for text `i` and `i*` the hardest text for image `i`.
/// Ties resolve to the smaller index; a hinge at exactly zero contributes no gradient.
pub fn hard_triplet_loss(s: &SimilarityMatrix, margin: f64) -> Result<(f64, Matrix)> {
    let n = square(s, "hard_triplet_loss")?;
    if n < 2 {
        return Err(Error::arg("hard_triplet_loss needs a batch of at least 2"));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, n);
    for i in 0..n {
        let pos = s.get(i, i);
        let hardest_image = argmax_excluding((0..n).map(|j| s.get(i, j)), i);
        let hardest_text = argmax_excluding((0..n).map(|r| s.get(r, i)), i);

        let row_hinge = margin - pos + s.get(i, hardest_image);
        if row_hinge > 0.0 {
            loss += row_hinge;
            grad.add_at(i, i, -1.0);
            grad.add_at(i, hardest_image, 1.0);
        }
        let col_hinge = margin - pos + s.get(hardest_text, i);
        if col_hinge > 0.0 {
            loss += col_hinge;
            grad.add_at(i, i, -1.0);
            grad.add_at(hardest_text, i, 1.0);
        }
    }
    Ok((loss, grad))
}

fn argmax_excluding(values: impl Iterator<Item = f64>, skip: usize) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (idx, v) in values.enumerate() {
        if idx != skip && (best.0 == usize::MAX || v > best.1) {
            best = (idx, v);
        }
    }
    best.0
}

/// Mean of the diagonal (positive-pair similarity).
pub fn alignment(s: &SimilarityMatrix) -> Result<f64> {
    let n = square(s, "alignment")?;
    if n == 0 {
        return Err(Error::arg("alignment of an empty batch"));
    }
    Ok((0..n).map(|i| s.get(i, i)).sum::<f64>() / n as f64)
}

/// `log mean exp(S_ij)` over every entry.
pub fn uniformity(s: &SimilarityMatrix) -> Result<f64> {
    square(s, "uniformity")?;
    if s.is_empty() {
        return Err(Error::arg("uniformity of an empty batch"));
    }
    let max = s.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = s.data().iter().map(|v| (v - max).exp()).sum::<f64>() / s.data().len() as f64;
    Ok(max + mean.ln())
}

/// Negative count for a batch: `K' = ⌊|B|·cos((γa + γu)·π/4)⌋`, clamped to `[1, |B|−1]`.
/// Both statistics are clamped to [0, 1] first.
pub fn adaptive_k(gamma_align: f64, gamma_uniform: f64, batch_size: usize) -> usize {
    assert!(batch_size >= 2, "adaptive_k needs a batch of at least 2");
    let ga = clamp_unit(gamma_align);
    let gu = clamp_unit(gamma_uniform);
    let raw = (batch_size as f64 * ((ga + gu) * FRAC_PI_4).cos()).floor();
    // raw is in [0, |B|], so the cast is exact
    let k = if raw > 0.0 { raw as usize } else { 0 };
    k.clamp(1, batch_size - 1)
}

fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Alignment, uniformity and the resulting K for one batch.
pub fn batch_maturity(s: &SimilarityMatrix) -> Result<BatchMaturity> {
    let n = square(s, "batch_maturity")?;
    if n < 2 {
        return Err(Error::arg("batch_maturity needs a batch of at least 2"));
    }
    let ga = clamp_unit(alignment(s)?);
    let gu = clamp_unit(uniformity(s)?);
    Ok(BatchMaturity { gamma_align: ga, gamma_uniform: gu, k_selected: adaptive_k(ga, gu, n) })
}

/// For every anchor, the K most similar non-matching candidates (ties to smaller index).
pub fn select_negatives(s: &SimilarityMatrix, k: usize) -> Result<NegativeSelection> {
    let n = square(s, "select_negatives")?;
    if k == 0 || k + 1 > n {
        return Err(Error::arg(format!("select_negatives K={k} outside 1..={}", n.saturating_sub(1))));
    }
    let hardest = |anchor: usize, score: &dyn Fn(usize) -> f64| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).filter(|&j| j != anchor).collect();
        // stable: equal scores keep ascending index order
        idx.sort_by(|&a, &b| score(b).total_cmp(&score(a)));
        idx.truncate(k);
        idx
    };
    Ok(NegativeSelection {
        text_to_image: (0..n).map(|i| hardest(i, &|j| s.get(i, j))).collect(),
        image_to_text: (0..n).map(|j| hardest(j, &|i| s.get(i, j))).collect(),
    })
}

/// Accumulates one InfoNCE term: `logsumexp(l) − l₀` over `[positive, negatives...]`,
/// adding `scale·(softmax − onehot₀)/τ` into the gradient.
fn nce_term(
    positive: (usize, usize),
    negatives: &[(usize, usize)],
    s: &Matrix,
    tau: f64,
    scale: f64,
    grad: &mut Matrix,
) -> f64 {
    let l0 = s.get(positive.0, positive.1) / tau;
    let logits: Vec<f64> = negatives.iter().map(|&(r, c)| s.get(r, c) / tau).collect();
    let max = logits.iter().copied().fold(l0, f64::max);
    let e0 = (l0 - max).exp();
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total = e0 + exps.iter().sum::<f64>();
    let term = if max == l0 {
        // loss = ln(1 + Σ e^{l_k − l₀}), kept accurate near saturation
        exps.iter().sum::<f64>().ln_1p()
    } else {
        (max - l0) + total.ln()
    };
    grad.add_at(positive.0, positive.1, scale * (e0 / total - 1.0) / tau);
    for (&(r, c), e) in negatives.iter().zip(&exps) {
        grad.add_at(r, c, scale * (e / total) / tau);
    }
    term
}

/// Two-directional InfoNCE over the selected negatives, each direction averaged over
/// the batch. The denominator holds the positive as well as the negatives.
pub fn info_nce_loss(s: &SimilarityMatrix, sel: &NegativeSelection, tau: f64) -> Result<(f64, Matrix)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config("temperature", format!("must be > 0, got {tau}")));
    }
    let n = square(s, "info_nce_loss")?;
    if n == 0 || sel.text_to_image.len() != n || sel.image_to_text.len() != n {
        return Err(Error::dim(format!("negative selection does not match a batch of {n}")));
    }
    let scale = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, n);
    let mut loss = 0.0;
    for i in 0..n {
        // text anchor i against image negatives (row i)
        let negs: Vec<(usize, usize)> = sel.text_to_image[i].iter().map(|&j| (i, j)).collect();
        loss += scale * nce_term((i, i), &negs, s, tau, scale, &mut grad);
        // image anchor i against text negatives (column i)
        let negs: Vec<(usize, usize)> = sel.image_to_text[i].iter().map(|&r| (r, i)).collect();
        loss += scale * nce_term((i, i), &negs, s, tau, scale, &mut grad);
    }
    Ok((loss, grad))
}

/// Adaptive objective: measure batch maturity, pick K, select the hardest K
/// negatives and apply InfoNCE. The statistics carry no gradient.
pub fn adopt_loss(s: &SimilarityMatrix, tau: f64) -> Result<(f64, BatchMaturity, Matrix)> {
    let maturity = batch_maturity(s)?;
    let sel = select_negatives(s, maturity.k_selected)?;
    let (loss, grad) = info_nce_loss(s, &sel, tau)?;
    Ok((loss, maturity, grad))
}

/// Result of [`compute_loss`].
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Matrix,
    pub maturity: BatchMaturity,
    /// Set only in adaptive mode.
    pub k: Option<usize>,
}

/// Dispatches on the configured loss mode. Maturity statistics are always reported.
pub fn compute_loss(s: &SimilarityMatrix, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    match cfg.mode {
        LossMode::HardTriplet => {
            let maturity = batch_maturity(s)?;
            let (loss, grad) = hard_triplet_loss(s, cfg.margin)?;
            Ok(LossOutput { loss, grad, maturity, k: None })
        }
        LossMode::InfoNceAdaptive => {
            let (loss, maturity, grad) = adopt_loss(s, cfg.temperature)?;
            Ok(LossOutput { loss, grad, maturity, k: Some(maturity.k_selected) })
        }
        LossMode::InfoNceFixed(k) => {
            let maturity = batch_maturity(s)?;
            let k = k.min(s.rows() - 1);
            let sel = select_negatives(s, k)?;
            let (loss, grad) = info_nce_loss(s, &sel, cfg.temperature)?;
            Ok(LossOutput { loss, grad, maturity, k: None })
        }
    }
}

fn scalar(v: f64) -> Result<Matrix> {
    Matrix::from_vec(1, 1, vec![v])
}

/// Hard triplet loss on `[S]`.
pub struct HardTripletOp(pub f64);

/// InfoNCE on `[S]` with a frozen negative selection.
pub struct InfoNceOp {
    pub selection: NegativeSelection,
    pub temperature: f64,
}

/// Adaptive objective on `[S]`; K and the negatives are recomputed at every evaluation.
pub struct AdOptOp(pub f64);

impl DiffOp for HardTripletOp {
    fn name(&self) -> String {
        "hard_triplet_loss".into()
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("hard_triplet_loss", inputs, 1)?;
        scalar(hard_triplet_loss(&inputs[0], self.0)?.0)
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        Ok(vec![hard_triplet_loss(&inputs[0], self.0)?.1.scale(upstream.get(0, 0))])
    }
}

impl DiffOp for InfoNceOp {
    fn name(&self) -> String {
        format!("info_nce_loss(K={})", self.selection.k())
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("info_nce_loss", inputs, 1)?;
        scalar(info_nce_loss(&inputs[0], &self.selection, self.temperature)?.0)
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let (_, g) = info_nce_loss(&inputs[0], &self.selection, self.temperature)?;
        Ok(vec![g.scale(upstream.get(0, 0))])
    }
}

impl DiffOp for AdOptOp {
    fn name(&self) -> String {
        "adopt_loss".into()
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("adopt_loss", inputs, 1)?;
        scalar(adopt_loss(&inputs[0], self.0)?.0)
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        Ok(vec![adopt_loss(&inputs[0], self.0)?.2.scale(upstream.get(0, 0))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn triplet_worked_examples() {
        let (l, g) = hard_triplet_loss(&m(&[&[0.9, 0.2], &[0.3, 0.8]]), 0.2).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, Matrix::zeros(2, 2));
        let (l, _) = hard_triplet_loss(&m(&[&[0.5, 0.6], &[0.4, 0.7]]), 0.2).unwrap();
        assert!((l - 0.5).abs() < 1e-15, "{l}");
        let (l, _) = hard_triplet_loss(&Matrix::identity(3), 0.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(matches!(hard_triplet_loss(&m(&[&[1.0]]), 0.2), Err(Error::Argument(_))));
    }

    #[test]
    fn alignment_and_uniformity_examples() {
        assert_eq!(alignment(&Matrix::identity(2)).unwrap(), 1.0);
        assert!((alignment(&m(&[&[0.2, 0.9], &[0.1, 0.4]])).unwrap() - 0.3).abs() < 1e-15);
        assert!((uniformity(&Matrix::filled(3, 3, 0.37)).unwrap() - 0.37).abs() < 1e-15);
        let e = std::f64::consts::E;
        let u = uniformity(&Matrix::identity(2)).unwrap();
        assert!((u - ((2.0 * e + 2.0) / 4.0).ln()).abs() < 1e-15);
        assert!((u - 0.6201).abs() < 1e-4);
    }

    #[test]
    fn adaptive_k_examples() {
        assert_eq!(adaptive_k(1.0, 1.0, 128), 1);
        assert_eq!(adaptive_k(0.0, 0.0, 128), 127);
        assert_eq!(adaptive_k(0.5, 0.5, 128), 90);
        assert_eq!(adaptive_k(1.0, 0.0, 128), 90);
        // clamping absorbs out-of-range statistics
        assert_eq!(adaptive_k(-3.0, -1.0, 16), 15);
        assert_eq!(adaptive_k(7.0, 2.0, 16), 1);
        assert_eq!(adaptive_k(f64::NAN, 0.0, 16), 15);
    }

    #[test]
    fn select_negatives_examples() {
        let s = m(&[&[0.5, 0.6, 0.1], &[0.2, 0.9, 0.3], &[0.0, 0.4, 0.8]]);
        let sel = select_negatives(&s, 1).unwrap();
        assert_eq!(sel.text_to_image[0], vec![1]);
        let all = select_negatives(&s, 2).unwrap();
        for i in 0..3 {
            let mut t2i = all.text_to_image[i].clone();
            t2i.sort();
            assert_eq!(t2i, (0..3).filter(|&j| j != i).collect::<Vec<_>>());
        }
        assert!(select_negatives(&s, 0).is_err());
        assert!(select_negatives(&s, 3).is_err());
        // ties go to the smaller index
        let flat = Matrix::filled(4, 4, 0.1);
        assert_eq!(select_negatives(&flat, 2).unwrap().text_to_image[2], vec![0, 1]);
    }

    #[test]
    fn info_nce_identity_example() {
        let s = Matrix::identity(2);
        let sel = select_negatives(&s, 1).unwrap();
        let (l, _) = info_nce_loss(&s, &sel, 1.0).unwrap();
        let want = 2.0 * (-1f64).exp().ln_1p();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.6266).abs() < 1e-4);
        assert!(matches!(info_nce_loss(&s, &sel, 0.0), Err(Error::Config { .. })));
        assert!(matches!(info_nce_loss(&s, &sel, -1.0), Err(Error::Config { .. })));
    }

    #[test]
    fn info_nce_saturates() {
        let mut s = Matrix::filled(4, 4, -1.0);
        for i in 0..4 {
            s.set(i, i, 1.0);
        }
        // (1 - (-1)) / 0.05 = 40
        let sel = select_negatives(&s, 3).unwrap();
        let (l, _) = info_nce_loss(&s, &sel, 0.05).unwrap();
        assert!((0.0..=1e-12).contains(&l), "{l}");
    }

    #[test]
    fn adopt_endpoints() {
        let (_, mat, _) = adopt_loss(&Matrix::zeros(6, 6), 0.05).unwrap();
        assert_eq!(mat.gamma_align, 0.0);
        assert_eq!(mat.gamma_uniform, 0.0);
        assert_eq!(mat.k_selected, 5);

        let (l, mat, _) = adopt_loss(&Matrix::identity(4), 0.05).unwrap();
        let e = std::f64::consts::E;
        let gu: f64 = ((4.0 * e + 12.0) / 16.0).ln();
        assert_eq!(mat.gamma_align, 1.0);
        assert!((mat.gamma_uniform - gu).abs() < 1e-15);
        let k = ((4.0 * ((1.0 + gu) * std::f64::consts::FRAC_PI_4).cos()).floor() as usize).clamp(1, 3);
        assert_eq!(k, 1);
        assert_eq!(mat.k_selected, k);
        // two directions of ln(1 + e^{-20})
        assert!((l - 2.0 * (-20f64).exp().ln_1p()).abs() < 1e-15);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig { temperature: 0.0, ..LossConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "temperature"));
        let bad = LossConfig { margin: -0.1, ..LossConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!(LossMode::parse("infonce-fixed", Some(3)).unwrap(), LossMode::InfoNceFixed(3));
        assert!(LossMode::parse("infonce-fixed", None).is_err());
        assert!("hinge".parse::<LossMode>().is_err());
    }
}
