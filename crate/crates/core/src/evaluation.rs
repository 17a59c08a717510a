//! Recall@K in both retrieval directions, RSUM, and similarity ensembling.
//!
//! Direction names: *caption retrieval* takes a caption as the query and ranks
//! images; *image retrieval* takes an image and ranks captions.

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::tensor::{cosine_sim_matrix, Matrix, SimilarityMatrix};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// For every query (by index), the indices of its relevant candidates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    relevant: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn new(relevant: Vec<Vec<usize>>) -> Self {
        Self { relevant }
    }

    /// Caption `t` is relevant to the image of its group.
    pub fn captions_to_images(corpus: &Corpus) -> Result<Self> {
        let pos: std::collections::HashMap<usize, usize> =
            corpus.visual.iter().enumerate().map(|(k, v)| (v.group, k)).collect();
        let relevant = corpus
            .text
            .iter()
            .map(|t| {
                pos.get(&t.group)
                    .map(|&k| vec![k])
                    .ok_or_else(|| Error::Data(format!("caption {} has no image in the corpus", t.id)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { relevant })
    }

    pub fn num_queries(&self) -> usize {
        self.relevant.len()
    }

    pub fn relevant(&self, query: usize) -> &[usize] {
        &self.relevant[query]
    }

    /// Swaps the roles of queries and candidates.
    pub fn inverse(&self, num_candidates: usize) -> Self {
        let mut relevant = vec![Vec::new(); num_candidates];
        for (q, cands) in self.relevant.iter().enumerate() {
            for &c in cands {
                if c < num_candidates {
                    relevant[c].push(q);
                }
            }
        }
        Self { relevant }
    }
}

/// Retrieval scores in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ir_r1: f64,
    pub ir_r5: f64,
    pub ir_r10: f64,
    pub cr_r1: f64,
    pub cr_r5: f64,
    pub cr_r10: f64,
    pub rsum: f64,
}

impl RetrievalResult {
    fn from_parts(ir: [f64; 3], cr: [f64; 3]) -> Self {
        Self {
            ir_r1: ir[0],
            ir_r5: ir[1],
            ir_r10: ir[2],
            cr_r1: cr[0],
            cr_r5: cr[1],
            cr_r10: cr[2],
            rsum: ir[0] + ir[1] + ir[2] + cr[0] + cr[1] + cr[2],
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [self.ir_r1, self.ir_r5, self.ir_r10, self.cr_r1, self.cr_r5, self.cr_r10]
    }

    pub const CSV_HEADER: &'static str = "ir_r1,ir_r5,ir_r10,cr_r1,cr_r5,cr_r10,rsum";

    pub fn to_csv_row(&self) -> String {
        let v = self.values();
        format!("{},{},{},{},{},{},{}", v[0], v[1], v[2], v[3], v[4], v[5], self.rsum)
    }
}

/// Zero-based rank of `candidate` in a row sorted by descending score, ties by index.
fn rank_of(row: &[f64], candidate: usize) -> usize {
    let s = row[candidate];
    row.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < candidate)).count()
}

/// Best rank of any relevant candidate, per query.
fn first_relevant_ranks(scores: &Matrix, truth: &GroundTruth) -> Result<Vec<usize>> {
    if !scores.all_finite() {
        return Err(Error::Data("score matrix is not finite".into()));
    }
    (0..scores.rows())
        .map(|q| {
            let rel = truth
                .relevant
                .get(q)
                .filter(|r| !r.is_empty())
                .ok_or_else(|| Error::Data(format!("query {q} has no ground truth")))?;
            rel.iter()
                .map(|&c| {
                    if c >= scores.cols() {
                        Err(Error::Data(format!("query {q} references candidate {c} outside the index")))
                    } else {
                        Ok(rank_of(scores.row(q), c))
                    }
                })
                .try_fold(usize::MAX, |best, r| r.map(|r| best.min(r)))
        })
        .collect()
}

fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// Percent of queries (rows of `scores`) with a relevant candidate in their top K.
pub fn recall_at_k(scores: &Matrix, truth: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::arg("recall_at_k needs K >= 1"));
    }
    Ok(recall_from_ranks(&first_relevant_ranks(scores, truth)?, k))
}

fn recalls(scores: &Matrix, truth: &GroundTruth) -> Result<[f64; 3]> {
    let ranks = first_relevant_ranks(scores, truth)?;
    Ok(RECALL_KS.map(|k| recall_from_ranks(&ranks, k)))
}

/// Both directions from a caption×image score matrix and caption→image truth.
pub fn evaluate_scores(scores: &SimilarityMatrix, truth: &GroundTruth) -> Result<RetrievalResult> {
    if truth.num_queries() != scores.rows() {
        return Err(Error::Data(format!(
            "{} captions scored but ground truth covers {}",
            scores.rows(),
            truth.num_queries()
        )));
    }
    let cr = recalls(scores, truth)?;
    let ir = recalls(&scores.transpose(), &truth.inverse(scores.cols()))?;
    Ok(RetrievalResult::from_parts(ir, cr))
}

/// Evaluates unit-norm caption and image embeddings.
pub fn evaluate(text_emb: &Matrix, image_emb: &Matrix, truth: &GroundTruth) -> Result<RetrievalResult> {
    evaluate_scores(&cosine_sim_matrix(text_emb, image_emb)?, truth)
}

/// Averages results over `folds` equal contiguous blocks of images, each scored
/// only against its own captions.
pub fn evaluate_folds(scores: &SimilarityMatrix, truth: &GroundTruth, folds: usize) -> Result<RetrievalResult> {
    if folds == 0 || scores.cols() % folds != 0 {
        return Err(Error::config("eval.folds", format!("{} images do not split into {folds} folds", scores.cols())));
    }
    let size = scores.cols() / folds;
    let mut acc = [0.0; 6];
    for f in 0..folds {
        let images = f * size..(f + 1) * size;
        let captions: Vec<usize> = (0..scores.rows())
            .filter(|&q| truth.relevant(q).iter().any(|c| images.contains(c)))
            .collect();
        let mut sub = Matrix::zeros(captions.len(), size);
        for (r, &q) in captions.iter().enumerate() {
            for c in 0..size {
                sub.set(r, c, scores.get(q, images.start + c));
            }
        }
        let sub_truth = GroundTruth::new(
            captions
                .iter()
                .map(|&q| truth.relevant(q).iter().filter(|c| images.contains(c)).map(|c| c - images.start).collect())
                .collect(),
        );
        for (a, v) in acc.iter_mut().zip(evaluate_scores(&sub, &sub_truth)?.values()) {
            *a += v / folds as f64;
        }
    }
    Ok(RetrievalResult::from_parts([acc[0], acc[1], acc[2]], [acc[3], acc[4], acc[5]]))
}

/// Element-wise mean of similarity matrices from several encoders.
pub fn ensemble_similarity(mats: &[SimilarityMatrix]) -> Result<SimilarityMatrix> {
    let first = mats.first().ok_or_else(|| Error::arg("ensemble of zero matrices"))?;
    if mats.len() == 1 {
        return Ok(first.clone());
    }
    let mut sum = Matrix::zeros(first.rows(), first.cols());
    for m in mats {
        if m.shape() != first.shape() {
            return Err(Error::dim(format!("ensemble members of shape {:?} and {:?}", first.shape(), m.shape())));
        }
        sum.add_assign(m);
    }
    Ok(sum.scale(1.0 / mats.len() as f64))
}
