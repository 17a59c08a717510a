//! Seeded synthetic paired corpus.
//!
//! Each group `g` draws a latent `z_g ~ N(0, I)`. Its image is `N` rows of
//! `A_v z_g + noise` and each of its captions is `M` rows of `A_t z_g + noise`, with
//! the mixing matrices `A_v`, `A_t` drawn once per corpus. All randomness comes from
//! a ChaCha8 stream seeded with `seed`, so a config always yields the same corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoder::RawInstance;
use crate::error::{Error, Result};
use crate::pooling::Modality;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusConfig {
    /// Total number of image groups across all splits.
    pub num_groups: usize,
    pub val_groups: usize,
    pub test_groups: usize,
    pub captions_per_image: usize,
    pub latent_dim: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    /// Shared embedding dimension of the encoders.
    pub embed_dim: usize,
    /// Inclusive range of image sequence lengths.
    pub visual_len: (usize, usize),
    /// Inclusive range of caption sequence lengths.
    pub text_len: (usize, usize),
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    /// Desk-scale default: 1000 train / 200 validation / 200 test groups.
    fn default() -> Self {
        Self {
            num_groups: 1400,
            val_groups: 200,
            test_groups: 200,
            captions_per_image: 5,
            latent_dim: 16,
            visual_dim: 32,
            text_dim: 32,
            embed_dim: 32,
            visual_len: (4, 12),
            text_len: (5, 15),
            noise_scale: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn train_groups(&self) -> usize {
        self.num_groups.saturating_sub(self.val_groups + self.test_groups)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("captions_per_image", self.captions_per_image),
            ("latent_dim", self.latent_dim),
            ("visual_dim", self.visual_dim),
            ("text_dim", self.text_dim),
            ("embed_dim", self.embed_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        for (field, (lo, hi)) in [("visual_len", self.visual_len), ("text_len", self.text_len)] {
            if lo == 0 || lo > hi {
                return Err(Error::config(field, format!("invalid length range [{lo}, {hi}]")));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("noise_scale", "must be finite and >= 0"));
        }
        if self.val_groups + self.test_groups > self.num_groups {
            return Err(Error::config("num_groups", "smaller than val_groups + test_groups"));
        }
        Ok(())
    }
}

/// Images and captions of a set of groups. `visual[k]` belongs to group `groups[k]`;
/// captions are stored group by group in the same order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub visual: Vec<RawInstance>,
    pub text: Vec<RawInstance>,
}

impl Corpus {
    pub fn num_groups(&self) -> usize {
        self.visual.len()
    }

    /// Captions of each image, indexed like `visual`.
    pub fn captions_by_image(&self) -> Vec<Vec<usize>> {
        let pos: std::collections::HashMap<usize, usize> =
            self.visual.iter().enumerate().map(|(k, v)| (v.group, k)).collect();
        let mut out = vec![Vec::new(); self.visual.len()];
        for (t, inst) in self.text.iter().enumerate() {
            if let Some(&k) = pos.get(&inst.group) {
                out[k].push(t);
            }
        }
        out
    }

    /// Keeps the groups at positions `range` of `visual`.
    fn slice_groups(&self, range: std::ops::Range<usize>) -> Corpus {
        let visual: Vec<RawInstance> = self.visual[range].to_vec();
        let keep: std::collections::HashSet<usize> = visual.iter().map(|v| v.group).collect();
        let text = self.text.iter().filter(|t| keep.contains(&t.group)).cloned().collect();
        Corpus { visual, text }
    }

    /// Splits into `(train, validation, test)`, taking the last groups for validation and test.
    pub fn split(&self, val_groups: usize, test_groups: usize) -> Result<(Corpus, Corpus, Corpus)> {
        let n = self.num_groups();
        if val_groups + test_groups > n {
            return Err(Error::config("num_groups", "smaller than val_groups + test_groups"));
        }
        let train_end = n - val_groups - test_groups;
        let val_end = train_end + val_groups;
        Ok((self.slice_groups(0..train_end), self.slice_groups(train_end..val_end), self.slice_groups(val_end..n)))
    }
}

pub fn visual_id(group: usize) -> String {
    format!("g{group:06}/v")
}

pub fn text_id(group: usize, caption: usize) -> String {
    format!("g{group:06}/t{caption}")
}

/// Parses the group number out of an id produced by [`visual_id`] or [`text_id`].
pub fn group_of(id: &str) -> Option<usize> {
    id.strip_prefix('g')?.split('/').next()?.parse().ok()
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::random_normal(rows, cols, std, rng)
}

fn instance_rows(mixing: &Matrix, z: &[f64], len: usize, noise: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let dim = mixing.rows();
    let signal: Vec<f64> = (0..dim).map(|r| mixing.row(r).iter().zip(z).map(|(a, b)| a * b).sum()).collect();
    let mut data = Vec::with_capacity(len * dim);
    for _ in 0..len {
        for s in &signal {
            data.push(s + noise * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Matrix::from_vec(len, dim, data).expect("finite synthetic features")
}

/// Generates all `num_groups` groups; use [`Corpus::split`] to carve out splits.
pub fn generate_corpus(cfg: &SyntheticCorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mix_std = 1.0 / (cfg.latent_dim as f64).sqrt();
    let a_v = gaussian(cfg.visual_dim, cfg.latent_dim, mix_std, &mut rng);
    let a_t = gaussian(cfg.text_dim, cfg.latent_dim, mix_std, &mut rng);

    let mut corpus = Corpus::default();
    for g in 0..cfg.num_groups {
        let z: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = rng.random_range(cfg.visual_len.0..=cfg.visual_len.1);
        corpus.visual.push(RawInstance {
            modality: Modality::Visual,
            features: instance_rows(&a_v, &z, n, cfg.noise_scale, &mut rng),
            id: visual_id(g),
            group: g,
        });
        for c in 0..cfg.captions_per_image {
            let m = rng.random_range(cfg.text_len.0..=cfg.text_len.1);
            corpus.text.push(RawInstance {
                modality: Modality::Text,
                features: instance_rows(&a_t, &z, m, cfg.noise_scale, &mut rng),
                id: text_id(g, c),
                group: g,
            });
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticCorpusConfig {
        SyntheticCorpusConfig { num_groups: 12, val_groups: 3, test_groups: 2, seed: 9, ..Default::default() }
    }

    #[test]
    fn counts() {
        let cfg = SyntheticCorpusConfig { num_groups: 100, val_groups: 0, test_groups: 0, ..small() };
        let c = generate_corpus(&cfg).unwrap();
        assert_eq!(c.visual.len(), 100);
        assert_eq!(c.text.len(), 500);
        for v in &c.visual {
            assert!((4..=12).contains(&v.features.rows()));
            assert_eq!(v.features.cols(), 32);
        }
        for t in &c.text {
            assert!((5..=15).contains(&t.features.rows()));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(generate_corpus(&small()).unwrap(), generate_corpus(&small()).unwrap());
        let other = SyntheticCorpusConfig { seed: 10, ..small() };
        assert_ne!(generate_corpus(&small()).unwrap(), generate_corpus(&other).unwrap());
    }

    #[test]
    fn noiseless_single_caption_rows_share_the_signal() {
        let cfg = SyntheticCorpusConfig { noise_scale: 0.0, captions_per_image: 1, ..small() };
        let c = generate_corpus(&cfg).unwrap();
        for t in &c.text {
            for r in 1..t.features.rows() {
                assert_eq!(t.features.row(r), t.features.row(0));
            }
        }
    }

    #[test]
    fn split_partitions_groups() {
        let c = generate_corpus(&small()).unwrap();
        let (tr, va, te) = c.split(3, 2).unwrap();
        assert_eq!((tr.num_groups(), va.num_groups(), te.num_groups()), (7, 3, 2));
        assert_eq!(tr.text.len(), 35);
        assert_eq!(te.visual[0].group, 10);
        assert!(te.text.iter().all(|t| t.group >= 10));
        assert!(c.split(10, 3).is_err());
    }

    #[test]
    fn ids_round_trip_group() {
        assert_eq!(group_of(&visual_id(42)), Some(42));
        assert_eq!(group_of(&text_id(7, 3)), Some(7));
        assert_eq!(group_of("nope"), None);
    }

    #[test]
    fn config_validation_names_field() {
        let bad = SyntheticCorpusConfig { noise_scale: -1.0, ..small() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "noise_scale"));
        let bad = SyntheticCorpusConfig { text_len: (6, 5), ..small() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "text_len"));
    }
}
