//! Bi-encoder: linear projection into the shared space, pooling, L2 normalization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::pooling::{Modality, PoolParams, PoolTrace, PoolingSpec};
use crate::tensor::{add_row_bias, column_sums, expect_inputs, matmul, row_norm, DiffOp, Matrix, MIN_NORM};

/// One image (a set of object/patch vectors) or one caption (a set of token vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct RawInstance {
    pub modality: Modality,
    pub features: Matrix,
    pub id: String,
    /// Links an image with its captions.
    pub group: usize,
}

/// Trainable state of one modality's encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// d_in×d projection.
    pub w_proj: Matrix,
    /// 1×d bias.
    pub b_proj: Matrix,
    pub pool: PoolParams,
    pub spec: PoolingSpec,
}

impl EncoderParams {
    /// Gaussian projection with variance `1/d_in`, zero bias, zero pooling weights.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, dim: usize, spec: PoolingSpec, rng: &mut R) -> Self {
        Self {
            w_proj: Matrix::random_normal(input_dim, dim, 1.0 / (input_dim as f64).sqrt(), rng),
            b_proj: Matrix::zeros(1, dim),
            pool: PoolParams::zeros(dim),
            spec,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_proj.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_proj.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.b_proj.shape() != (1, d) {
            return Err(Error::dim(format!("b_proj is {:?}, expected (1, {d})", self.b_proj.shape())));
        }
        self.pool.check(d)?;
        self.spec.validate()
    }
}

/// `raw·w_proj + b_proj` applied to every row.
pub fn project(raw: &Matrix, w_proj: &Matrix, b_proj: &Matrix) -> Result<Matrix> {
    if raw.cols() != w_proj.rows() {
        return Err(Error::dim(format!(
            "features of width {} projected by a {}x{} matrix",
            raw.cols(),
            w_proj.rows(),
            w_proj.cols()
        )));
    }
    add_row_bias(&matmul(raw, w_proj)?, b_proj.data())
}

/// Unit-norm embedding of one instance.
pub fn encode(raw: &RawInstance, params: &EncoderParams) -> Result<Vec<f64>> {
    Ok(EncodeTrace::forward(&raw.features, params)?.output)
}

/// Embeds every instance; row `i` of the result belongs to `instances[i]`.
pub fn encode_all(instances: &[RawInstance], params: &EncoderParams) -> Result<Matrix> {
    let mut data = Vec::with_capacity(instances.len() * params.dim());
    for inst in instances {
        data.extend(encode(inst, params)?);
    }
    Matrix::from_vec(instances.len(), params.dim(), data)
}

/// Forward state of [`encode`] kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    projected: Matrix,
    pool: PoolTrace,
    norm: f64,
    pub output: Vec<f64>,
}

/// Gradients for every tensor of [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub w_proj: Matrix,
    pub b_proj: Matrix,
    pub w_tok: Matrix,
    pub w_bal: Matrix,
}

impl EncoderGrads {
    pub fn zeros(params: &EncoderParams) -> Self {
        Self {
            w_proj: Matrix::zeros(params.w_proj.rows(), params.w_proj.cols()),
            b_proj: Matrix::zeros(1, params.dim()),
            w_tok: Matrix::zeros(params.dim(), 1),
            w_bal: Matrix::zeros(params.dim(), 1),
        }
    }
}

impl EncodeTrace {
    pub fn forward(raw: &Matrix, params: &EncoderParams) -> Result<Self> {
        let projected = project(raw, &params.w_proj, &params.b_proj)?;
        let pool = PoolTrace::forward(&projected, params.spec, &params.pool)?;
        let norm = row_norm(&pool.output);
        if !(norm >= MIN_NORM) {
            return Err(Error::DegenerateVector { row: 0, norm });
        }
        let output = pool.output.iter().map(|v| v / norm).collect();
        Ok(Self { projected, pool, norm, output })
    }

    /// Accumulates the gradient of `g·output` into `grads` and returns the
    /// gradient with respect to the projected features.
    pub fn backward(&self, raw: &Matrix, params: &EncoderParams, g: &[f64], grads: &mut EncoderGrads) -> Result<Matrix> {
        let proj: f64 = self.output.iter().zip(g).map(|(y, gv)| y * gv).sum();
        let g_pooled: Vec<f64> = self.output.iter().zip(g).map(|(y, gv)| (gv - y * proj) / self.norm).collect();
        let pg = self.pool.backward(&self.projected, &params.pool, &g_pooled);
        grads.w_tok.add_assign(&pg.w_tok);
        grads.w_bal.add_assign(&pg.w_bal);
        grads.b_proj.add_assign(&Matrix::from_vec(1, params.dim(), column_sums(&pg.features))?);
        grads.w_proj.add_assign(&matmul(&raw.transpose(), &pg.features)?);
        Ok(pg.features)
    }
}

/// [`project`] as a [`DiffOp`] on `[raw, w_proj, b_proj]`.
pub struct ProjectOp;

impl DiffOp for ProjectOp {
    fn name(&self) -> String {
        "project".into()
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        expect_inputs("project", inputs, 3)?;
        project(&inputs[0], &inputs[1], &inputs[2])
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let g_raw = matmul(upstream, &inputs[1].transpose())?;
        let g_w = matmul(&inputs[0].transpose(), upstream)?;
        let g_b = Matrix::from_vec(1, upstream.cols(), column_sums(upstream))?;
        Ok(vec![g_raw, g_w, g_b])
    }
}

/// Whole-instance encoding on `[raw, w_proj, b_proj, w_tok, w_bal]` with a fixed spec.
pub struct EncodeOp(pub PoolingSpec);

impl EncodeOp {
    fn params(&self, inputs: &[Matrix]) -> Result<EncoderParams> {
        expect_inputs("encode", inputs, 5)?;
        Ok(EncoderParams {
            w_proj: inputs[1].clone(),
            b_proj: inputs[2].clone(),
            pool: PoolParams::new(inputs[3].clone(), inputs[4].clone())?,
            spec: self.0,
        })
    }
}

impl DiffOp for EncodeOp {
    fn name(&self) -> String {
        format!("encode[{}]", self.0)
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        let p = self.params(inputs)?;
        Matrix::row_vector(&EncodeTrace::forward(&inputs[0], &p)?.output)
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let p = self.params(inputs)?;
        let trace = EncodeTrace::forward(&inputs[0], &p)?;
        let mut g = EncoderGrads::zeros(&p);
        let g_projected = trace.backward(&inputs[0], &p, upstream.data(), &mut g)?;
        let g_raw = matmul(&g_projected, &p.w_proj.transpose())?;
        Ok(vec![g_raw, g.w_proj, g.b_proj, g.w_tok, g.w_bal])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn project_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = Matrix::random_normal(4, 3, 1.0, &mut rng);
        assert_eq!(project(&raw, &Matrix::identity(3), &Matrix::zeros(1, 3)).unwrap(), raw);
        let b = Matrix::row_vector(&[0.5, -1.0]).unwrap();
        let out = project(&raw, &Matrix::zeros(3, 2), &b).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), b.row(0));
        }
        assert!(matches!(project(&raw, &Matrix::zeros(2, 2), &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn encode_is_unit_norm_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = EncoderParams::init(6, 4, PoolingSpec::AdPool, &mut rng);
        let inst = RawInstance {
            modality: Modality::Text,
            features: Matrix::random_normal(5, 6, 1.0, &mut rng),
            id: "t".into(),
            group: 0,
        };
        let a = encode(&inst, &params).unwrap();
        let b = encode(&inst.clone(), &params).unwrap();
        assert_eq!(a, b);
        assert!((row_norm(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_pooled_vector_is_reported() {
        let params = EncoderParams {
            w_proj: Matrix::zeros(3, 2),
            b_proj: Matrix::zeros(1, 2),
            pool: PoolParams::zeros(2),
            spec: PoolingSpec::Mean,
        };
        let inst = RawInstance { modality: Modality::Visual, features: Matrix::filled(2, 3, 1.0), id: "v".into(), group: 0 };
        assert!(matches!(encode(&inst, &params), Err(Error::DegenerateVector { .. })));
    }
}
