//! Finite-difference checks over every differentiable operation in the crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncodeOp, ProjectOp};
use crate::error::Result;
use crate::objectives::{select_negatives, AdOptOp, HardTripletOp, InfoNceOp, LossConfig, LossMode};
use crate::pooling::{AdPoolOp, BalanceOp, EmbeddingLevelOp, Modality, PoolingSpec, SimplePoolOp, TokenLevelOp};
use crate::tensor::{
    finite_diff_check, AddRowBias, CosineSim, DiffOp, L2NormalizeRows, MatMul, Matrix, SoftmaxColumns, SoftmaxVector,
    SortDescPerColumn,
};
use crate::training::PipelineOp;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome for one operation across all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub op: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<(Box<dyn DiffOp>, Vec<Matrix>)>>;

fn normal(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::random_normal(r, c, 1.0, rng)
}

fn similarity(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::random_uniform(n, n, -1.0, 1.0, rng)
}

fn batch(n: usize, d_in: usize, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
    (0..n).map(|i| normal(3 + i % 3, d_in, rng)).collect()
}

fn model_tensors(d_in: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(8);
    for _ in 0..2 {
        out.push(Matrix::random_normal(d_in, d, 0.6, rng));
        out.push(Matrix::random_normal(1, d, 0.3, rng));
        out.push(Matrix::random_normal(d, 1, 0.5, rng));
        out.push(Matrix::random_normal(d, 1, 0.5, rng));
    }
    out
}

fn pipeline(visual: PoolingSpec, text: PoolingSpec, mode: LossMode) -> Case {
    Box::new(move |rng| {
        let (n, d_in, d) = (5, 4, 3);
        let op = PipelineOp {
            images: batch(n, d_in, rng),
            captions: batch(n, d_in, rng),
            visual_spec: visual,
            text_spec: text,
            loss: LossConfig { mode, ..LossConfig::default() },
        };
        Ok((Box::new(op) as Box<dyn DiffOp>, model_tensors(d_in, d, rng)))
    })
}

fn cases() -> Vec<Case> {
    fn op<O: DiffOp + 'static>(o: O) -> Box<dyn DiffOp> {
        Box::new(o)
    }
    vec![
        Box::new(|r| Ok((op(MatMul), vec![normal(3, 4, r), normal(4, 2, r)]))),
        Box::new(|r| Ok((op(AddRowBias), vec![normal(3, 4, r), normal(1, 4, r)]))),
        Box::new(|r| Ok((op(SoftmaxColumns), vec![normal(4, 3, r)]))),
        Box::new(|r| Ok((op(SoftmaxVector), vec![normal(5, 1, r)]))),
        Box::new(|r| Ok((op(SortDescPerColumn), vec![normal(5, 3, r)]))),
        Box::new(|r| Ok((op(L2NormalizeRows), vec![normal(3, 4, r)]))),
        Box::new(|r| Ok((op(CosineSim), vec![normal(3, 4, r), normal(4, 4, r)]))),
        Box::new(|r| Ok((op(SimplePoolOp(PoolingSpec::Mean)), vec![normal(5, 3, r)]))),
        Box::new(|r| Ok((op(SimplePoolOp(PoolingSpec::Max)), vec![normal(5, 3, r)]))),
        Box::new(|r| Ok((op(SimplePoolOp(PoolingSpec::KMax(2))), vec![normal(5, 3, r)]))),
        Box::new(|r| Ok((op(SimplePoolOp(PoolingSpec::Manual(Modality::Visual))), vec![normal(7, 3, r)]))),
        Box::new(|r| Ok((op(TokenLevelOp), vec![normal(5, 3, r), normal(3, 1, r)]))),
        Box::new(|r| Ok((op(EmbeddingLevelOp), vec![normal(5, 3, r)]))),
        Box::new(|r| Ok((op(BalanceOp), vec![normal(1, 3, r), normal(1, 3, r), normal(3, 1, r)]))),
        Box::new(|r| Ok((op(AdPoolOp(PoolingSpec::AdPool)), vec![normal(5, 3, r), normal(3, 1, r), normal(3, 1, r)]))),
        Box::new(|r| {
            Ok((op(AdPoolOp(PoolingSpec::FixedBalance(0.75, 0.25))), vec![normal(5, 3, r), normal(3, 1, r), normal(3, 1, r)]))
        }),
        Box::new(|r| Ok((op(ProjectOp), vec![normal(5, 4, r), normal(4, 3, r), normal(1, 3, r)]))),
        Box::new(|r| {
            let t = model_tensors(4, 3, r);
            Ok((op(EncodeOp(PoolingSpec::AdPool)), vec![normal(5, 4, r), t[0].clone(), t[1].clone(), t[2].clone(), t[3].clone()]))
        }),
        Box::new(|r| Ok((op(HardTripletOp(0.2)), vec![similarity(5, r)]))),
        Box::new(|r| {
            let s = similarity(5, r);
            let selection = select_negatives(&s, 2)?;
            Ok((op(InfoNceOp { selection, temperature: 0.05 }), vec![s]))
        }),
        Box::new(|r| Ok((op(AdOptOp(0.05)), vec![similarity(6, r)]))),
        pipeline(PoolingSpec::AdPool, PoolingSpec::AdPool, LossMode::InfoNceAdaptive),
        pipeline(PoolingSpec::AdPool, PoolingSpec::AdPool, LossMode::HardTriplet),
        pipeline(PoolingSpec::Manual(Modality::Visual), PoolingSpec::Manual(Modality::Text), LossMode::InfoNceFixed(2)),
    ]
}

/// Runs every operation on `seeds` random draws starting at `base_seed`.
pub fn run_suite(base_seed: u64, seeds: usize, tolerance: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (idx, case) in cases().iter().enumerate() {
        let mut worst = 0.0f64;
        let mut name = String::new();
        for s in 0..seeds {
            let seed = base_seed.wrapping_add(s as u64).wrapping_mul(1_000).wrapping_add(idx as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (op, inputs) = case(&mut rng)?;
            let report = finite_diff_check(op.as_ref(), &inputs, tolerance)?;
            worst = worst.max(report.max_rel_error);
            name = report.op;
        }
        out.push(SuiteEntry { op: name, seeds, max_rel_error: worst, passed: worst <= tolerance });
    }
    Ok(out)
}
