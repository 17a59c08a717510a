use std::io::Write;
use std::path::{Path, PathBuf};

use adret::cache::{decode_records, encode_record, read_records};
use adret::data::{generate_corpus, Corpus};
use adret::encoder::{encode_all, project};
use adret::evaluation::{ensemble_similarity, evaluate_folds, evaluate_scores, GroundTruth, RetrievalResult};
use adret::gradcheck::run_suite;
use adret::pooling::{PoolParams, PoolTrace, PoolingSpec};
use adret::tensor::{column_sums, cosine_sim_matrix};
use adret::training::{train, ModelParams};
use adret::{Error, Matrix, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::artifacts::{load_corpus, parse_params, read_bytes, save_corpus, save_params, write_atomic, CorpusFiles};
use crate::config::{ExperimentConfig, Split};
use crate::InspectArgs;

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(Error::from)
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let dir = cfg.corpus_dir();
    save_corpus(&dir, &corpus)?;
    let c = &cfg.corpus;
    say(
        out,
        format!(
            "generated {} groups ({} train / {} val / {} test), {} images, {} captions in {}",
            c.num_groups,
            c.train_groups(),
            c.val_groups,
            c.test_groups,
            corpus.visual.len(),
            corpus.text.len(),
            dir.display()
        ),
    )
}

/// Loads the corpus and checks its feature widths against the configuration.
fn load_checked_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let corpus = load_corpus(&cfg.corpus_dir())?;
    if corpus.num_groups() != cfg.corpus.num_groups {
        return Err(Error::config(
            "corpus.num_groups",
            format!("configured {} but the stored corpus has {}", cfg.corpus.num_groups, corpus.num_groups()),
        ));
    }
    for (field, instances, want) in [
        ("corpus.visual_dim", &corpus.visual, cfg.corpus.visual_dim),
        ("corpus.text_dim", &corpus.text, cfg.corpus.text_dim),
    ] {
        if let Some(bad) = instances.iter().find(|i| i.features.cols() != want) {
            return Err(Error::config(field, format!("configured {want} but {} has {}", bad.id, bad.features.cols())));
        }
    }
    Ok(corpus)
}

#[derive(Serialize)]
struct EpochMetrics {
    epoch: usize,
    #[serde(flatten)]
    result: RetrievalResult,
}

#[derive(Serialize)]
struct TrainMetrics {
    loss: String,
    visual_pooling: String,
    text_pooling: String,
    epochs: usize,
    iterations: usize,
    validation: Vec<EpochMetrics>,
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<()> {
    let corpus = load_checked_corpus(cfg)?;
    let (train_split, val_split, _) = corpus.split(cfg.corpus.val_groups, cfg.corpus.test_groups)?;
    let model = ModelParams::init(&cfg.corpus, cfg.visual_pooling, cfg.text_pooling, cfg.train.seed);
    log::info!(
        "training {} epochs on {} images with {} (batch {})",
        cfg.train.epochs,
        train_split.num_groups(),
        cfg.train.loss.mode,
        cfg.train.batch_size
    );
    let val = (val_split.num_groups() > 0).then_some(&val_split);
    let (model, log) = train(&train_split, val, model, &cfg.train)?;
    for v in &log.validation {
        log::info!("epoch {}: validation rsum {:.2}", v.epoch, v.result.rsum);
    }

    let metrics = TrainMetrics {
        loss: cfg.train.loss.mode.to_string(),
        visual_pooling: cfg.visual_pooling.to_string(),
        text_pooling: cfg.text_pooling.to_string(),
        epochs: cfg.train.epochs,
        iterations: log.records.len(),
        validation: log.validation.iter().map(|v| EpochMetrics { epoch: v.epoch, result: v.result }).collect(),
    };
    let dir = &cfg.output_dir;
    write_atomic(&dir.join("train_log.csv"), log.to_csv().as_bytes())?;
    save_params(&dir.join("params.bin"), &model)?;
    write_atomic(&dir.join("metrics.json"), json(&metrics)?.as_bytes())?;

    match log.validation.last() {
        Some(v) => say(out, format!("trained {} iterations; validation rsum {:.2} after epoch {}", log.records.len(), v.result.rsum, v.epoch)),
        None => say(out, format!("trained {} iterations", log.records.len())),
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Data(e.to_string()))
}

fn split_of(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Corpus> {
    let (_, val, test) = corpus.split(cfg.corpus.val_groups, cfg.corpus.test_groups)?;
    let chosen = match cfg.eval.split {
        Split::Validation => val,
        Split::Test => test,
    };
    if chosen.num_groups() == 0 {
        return Err(Error::config(format!("corpus.{}_groups", cfg.eval.split.name()), "the evaluated split is empty"));
    }
    Ok(chosen)
}

fn check_model_fits(model: &ModelParams, corpus: &Corpus, path: &Path) -> Result<()> {
    for (what, enc, inst) in [("visual", &model.visual, corpus.visual.first()), ("text", &model.text, corpus.text.first())] {
        if let Some(inst) = inst {
            if enc.input_dim() != inst.features.cols() {
                return Err(Error::config(
                    "params",
                    format!(
                        "{}: {what} encoder expects {} input features, corpus has {}",
                        path.display(),
                        enc.input_dim(),
                        inst.features.cols()
                    ),
                ));
            }
        }
    }
    Ok(())
}

fn cache_key(params: &[u8], corpus_files: &CorpusFiles, split: Split) -> Result<String> {
    let mut h = Sha256::new();
    h.update(params);
    for p in [&corpus_files.visual, &corpus_files.text] {
        h.update(read_bytes(p)?);
    }
    h.update(split.name().as_bytes());
    Ok(h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect())
}

/// Caption and image embeddings of `corpus`, optionally through the on-disk cache.
fn embeddings(
    cfg: &ExperimentConfig,
    params_path: &Path,
    corpus: &Corpus,
    use_cache: bool,
    out: &mut dyn Write,
) -> Result<(Matrix, Matrix)> {
    let bytes = read_bytes(params_path)?;
    let model = parse_params(&bytes)?;
    check_model_fits(&model, corpus, params_path)?;
    let compute = || -> Result<(Matrix, Matrix)> { Ok((encode_all(&corpus.text, &model.text)?, encode_all(&corpus.visual, &model.visual)?)) };
    if !use_cache {
        return compute();
    }

    let key = cache_key(&bytes, &CorpusFiles::in_dir(&cfg.corpus_dir()), cfg.eval.split)?;
    let path = cfg.output_dir.join("cache").join(format!("emb-{key}.bin"));
    if path.exists() {
        if let [(t, _), (v, _)] = decode_records(&read_bytes(&path)?)?.as_slice() {
            log::info!("embedding cache hit: {}", path.display());
            say(out, format!("embeddings for {}: cache hit", params_path.display()))?;
            return Ok((t.clone(), v.clone()));
        }
        log::warn!("ignoring malformed embedding cache {}", path.display());
    }
    let (t, v) = compute()?;
    let t_ids: Vec<String> = corpus.text.iter().map(|i| i.id.clone()).collect();
    let v_ids: Vec<String> = corpus.visual.iter().map(|i| i.id.clone()).collect();
    let mut buf = encode_record(&t, &t_ids)?;
    buf.extend(encode_record(&v, &v_ids)?);
    write_atomic(&path, &buf)?;
    say(out, format!("embeddings for {}: cached as {}", params_path.display(), path.display()))?;
    Ok((t, v))
}

pub fn cmd_eval(cfg: &ExperimentConfig, models: &[PathBuf], use_cache: bool, out: &mut dyn Write) -> Result<()> {
    if models.is_empty() {
        return Err(Error::config("--ensemble", "no parameter files given"));
    }
    let corpus = split_of(cfg, &load_checked_corpus(cfg)?)?;
    let truth = GroundTruth::captions_to_images(&corpus)?;
    let mut sims = Vec::with_capacity(models.len());
    for path in models {
        let (t, v) = embeddings(cfg, path, &corpus, use_cache, out)?;
        sims.push(cosine_sim_matrix(&t, &v)?);
    }
    let scores = ensemble_similarity(&sims)?;
    let result = if cfg.eval.folds > 1 {
        evaluate_folds(&scores, &truth, cfg.eval.folds)?
    } else {
        evaluate_scores(&scores, &truth)?
    };

    let dir = &cfg.output_dir;
    write_atomic(&dir.join("results.json"), json(&result)?.as_bytes())?;
    let csv = format!("{}\n{}\n", RetrievalResult::CSV_HEADER, result.to_csv_row());
    write_atomic(&dir.join("results.csv"), csv.as_bytes())?;
    say(
        out,
        format!(
            "{} split, {} model(s): cr R@1/5/10 {:.2}/{:.2}/{:.2}  ir R@1/5/10 {:.2}/{:.2}/{:.2}  rsum {:.2}",
            cfg.eval.split.name(),
            models.len(),
            result.cr_r1,
            result.cr_r5,
            result.cr_r10,
            result.ir_r1,
            result.ir_r5,
            result.ir_r10,
            result.rsum
        ),
    )
}

pub fn cmd_gradcheck(seed: u64, seeds: usize, tolerance: f64, out: &mut dyn Write) -> Result<()> {
    if seeds == 0 {
        return Err(Error::config("--seeds", "must be >= 1"));
    }
    let entries = run_suite(seed, seeds, tolerance)?;
    for e in &entries {
        say(out, format!("{:<56} max rel err {:.3e}  {}", e.op, e.max_rel_error, if e.passed { "PASS" } else { "FAIL" }))?;
    }
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.op.as_str()).collect();
    say(out, format!("{} operations checked on {seeds} seeds at tolerance {tolerance:e}", entries.len()))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Evaluation(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

#[derive(Serialize)]
struct WeightSums {
    theta: Option<f64>,
    delta: Option<Vec<f64>>,
    omega: Option<f64>,
}

#[derive(Serialize)]
struct PoolDump {
    spec: String,
    rows: usize,
    cols: usize,
    pooled: Vec<f64>,
    theta: Option<Vec<f64>>,
    delta: Option<Vec<Vec<f64>>>,
    omega: Option<[f64; 2]>,
    sums: WeightSums,
}

pub fn cmd_inspect_pool(args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let raw = read_records(&args.input)?
        .into_iter()
        .next()
        .map(|(m, _)| m)
        .ok_or_else(|| Error::Data(format!("{} holds no matrix", args.input.display())))?;
    let (features, default_spec, params) = match &args.params {
        Some(path) => {
            let model = parse_params(&read_bytes(path)?)?;
            let enc = if args.modality == "text" { model.text } else { model.visual };
            if enc.input_dim() != raw.cols() {
                return Err(Error::config(
                    "--input",
                    format!("{} encoder expects {} columns, input has {}", args.modality, enc.input_dim(), raw.cols()),
                ));
            }
            (project(&raw, &enc.w_proj, &enc.b_proj)?, enc.spec, enc.pool)
        }
        None => {
            let cols = raw.cols();
            (raw, PoolingSpec::AdPool, PoolParams::zeros(cols))
        }
    };
    let spec = match &args.spec {
        Some(s) => s.parse().map_err(|e: Error| Error::config("--spec", e.to_string()))?,
        None => default_spec,
    };
    let trace = PoolTrace::forward(&features, spec, &params)?;
    let diag = trace.diagnostics();
    let delta_rows =
        diag.map(|d| (0..d.delta.rows()).map(|r| d.delta.row(r).to_vec()).collect::<Vec<_>>());
    let dump = PoolDump {
        spec: spec.to_string(),
        rows: features.rows(),
        cols: features.cols(),
        pooled: trace.output.clone(),
        theta: diag.map(|d| d.theta.clone()),
        delta: delta_rows,
        omega: diag.map(|d| d.omega),
        sums: WeightSums {
            theta: diag.map(|d| d.theta.iter().sum()),
            delta: diag.map(|d| column_sums(&d.delta)),
            omega: diag.map(|d| d.omega[0] + d.omega[1]),
        },
    };
    write!(out, "{}", json(&dump)?).map_err(Error::from)
}
