//! On-disk layout of corpora, parameters and embeddings.
//!
//! ```text
//! <output_dir>/corpus/visual.bin   one record per image, id `g000123/v`
//! <output_dir>/corpus/text.bin     one record per caption, id `g000123/t0`
//! <output_dir>/corpus/truth.bin    captions×1 matrix of image group indices
//! <output_dir>/params.bin          `pooling` record, then one record per tensor
//! <output_dir>/train_log.csv, metrics.json, results.json, results.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use adret::cache::{decode_records, encode_record};
use adret::data::{group_of, Corpus};
use adret::encoder::RawInstance;
use adret::pooling::{Modality, PoolingSpec};
use adret::training::{ModelParams, TENSOR_NAMES};
use adret::{Error, Matrix, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("cannot create {}: {e}", dir.display())))?;
    let name = path.file_name().ok_or_else(|| Error::Io(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::Io(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| Error::Io(format!("cannot rename onto {}: {e}", path.display())))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))
}

pub struct CorpusFiles {
    pub visual: PathBuf,
    pub text: PathBuf,
    pub truth: PathBuf,
}

impl CorpusFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self { visual: dir.join("visual.bin"), text: dir.join("text.bin"), truth: dir.join("truth.bin") }
    }
}

fn instances_bytes(instances: &[RawInstance]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for inst in instances {
        out.extend(encode_record(&inst.features, std::slice::from_ref(&inst.id))?);
    }
    Ok(out)
}

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let files = CorpusFiles::in_dir(dir);
    write_atomic(&files.visual, &instances_bytes(&corpus.visual)?)?;
    write_atomic(&files.text, &instances_bytes(&corpus.text)?)?;
    let groups: Vec<f64> = corpus.text.iter().map(|t| t.group as f64).collect();
    let ids: Vec<String> = corpus.text.iter().map(|t| t.id.clone()).collect();
    let truth = Matrix::from_vec(groups.len(), 1, groups)?;
    write_atomic(&files.truth, &encode_record(&truth, &ids)?)
}

fn load_instances(path: &Path, modality: Modality) -> Result<Vec<RawInstance>> {
    decode_records(&read_bytes(path)?)?
        .into_iter()
        .map(|(features, ids)| {
            let id = match ids.as_slice() {
                [id] => id.clone(),
                _ => return Err(Error::Data(format!("{}: every record must carry one instance id", path.display()))),
            };
            let group = group_of(&id).ok_or_else(|| Error::Data(format!("{}: malformed id `{id}`", path.display())))?;
            Ok(RawInstance { modality, features, id, group })
        })
        .collect()
}

/// Loads a generated corpus and checks it against its ground-truth file.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let files = CorpusFiles::in_dir(dir);
    if !files.visual.exists() {
        return Err(Error::Data(format!("no corpus in {}; run `adret generate` first", dir.display())));
    }
    let corpus = Corpus { visual: load_instances(&files.visual, Modality::Visual)?, text: load_instances(&files.text, Modality::Text)? };
    let (truth, ids) = adret::cache::cache_read(&files.truth)?;
    if ids.len() != corpus.text.len() || truth.rows() != ids.len() || truth.cols() != 1 {
        return Err(Error::Data("ground truth does not cover every caption".into()));
    }
    for (k, (inst, id)) in corpus.text.iter().zip(&ids).enumerate() {
        if &inst.id != id || truth.get(k, 0) != inst.group as f64 {
            return Err(Error::Data(format!("ground truth disagrees with caption {}", inst.id)));
        }
    }
    Ok(corpus)
}

/// Serialized parameters: a zero-sized `pooling` record naming both specs, then
/// one record per tensor labelled with its name.
pub fn params_bytes(model: &ModelParams) -> Result<Vec<u8>> {
    let specs = vec![format!("visual={}", model.visual.spec), format!("text={}", model.text.spec)];
    let mut out = encode_record(&Matrix::zeros(0, 0), &specs)?;
    for (name, m) in TENSOR_NAMES.iter().zip(model.tensors()) {
        out.extend(encode_record(m, &[name.to_string()])?);
    }
    Ok(out)
}

pub fn save_params(path: &Path, model: &ModelParams) -> Result<()> {
    write_atomic(path, &params_bytes(model)?)
}

pub fn parse_params(bytes: &[u8]) -> Result<ModelParams> {
    let mut records = decode_records(bytes)?.into_iter();
    let (_, specs) = records.next().ok_or_else(|| Error::Data("empty parameter file".into()))?;
    let spec = |prefix: &str| -> Result<PoolingSpec> {
        specs
            .iter()
            .find_map(|s| s.strip_prefix(prefix))
            .ok_or_else(|| Error::Data(format!("parameter file lacks the `{prefix}` pooling entry")))?
            .parse()
    };
    let (visual, text) = (spec("visual=")?, spec("text=")?);
    let mut tensors = Vec::with_capacity(TENSOR_NAMES.len());
    for name in TENSOR_NAMES {
        let (m, ids) = records.next().ok_or_else(|| Error::Data(format!("parameter file lacks `{name}`")))?;
        if ids.len() != 1 || ids[0] != name {
            return Err(Error::Data(format!("expected tensor `{name}`, found {ids:?}")));
        }
        tensors.push(m);
    }
    if records.next().is_some() {
        return Err(Error::Data("parameter file has extra records".into()));
    }
    ModelParams::from_tensors(tensors, visual, text)
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    parse_params(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use adret::data::SyntheticCorpusConfig;

    #[test]
    fn params_round_trip() {
        let cfg = SyntheticCorpusConfig::default();
        let model = ModelParams::init(&cfg, PoolingSpec::KMax(3), PoolingSpec::Manual(Modality::Text), 4);
        let back = parse_params(&params_bytes(&model).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn params_with_missing_tensor_fail() {
        let model = ModelParams::init(&SyntheticCorpusConfig::default(), PoolingSpec::Mean, PoolingSpec::Mean, 0);
        let bytes = params_bytes(&model).unwrap();
        let records = decode_records(&bytes).unwrap();
        let mut short = Vec::new();
        for (m, ids) in &records[..records.len() - 1] {
            short.extend(encode_record(m, ids).unwrap());
        }
        assert!(matches!(parse_params(&short), Err(Error::Data(_))));
    }
}
