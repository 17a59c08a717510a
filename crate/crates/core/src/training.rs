//! Mini-batch training of both encoders with Adam and a step learning-rate schedule.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Corpus, SyntheticCorpusConfig};
use crate::encoder::{encode_all, EncodeTrace, EncoderGrads, EncoderParams};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, GroundTruth, RetrievalResult};
use crate::objectives::{compute_loss, LossConfig, LossOutput};
use crate::pooling::{PoolParams, PoolingSpec};
use crate::tensor::{cosine_sim_matrix, cosine_sim_vjp, expect_inputs, DiffOp, Matrix};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Decay period in epochs; 0 disables decay.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Score the validation split before training and after every epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    /// Full-size settings: batch 128, 25 epochs, lr 5e-4 decayed ×0.1 every 15 epochs.
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 25,
            lr: 5e-4,
            lr_decay_every: 15,
            lr_decay_factor: 0.1,
            loss: LossConfig::default(),
            seed: 0,
            validate: true,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings: batch 64, 10 epochs.
    pub fn desk() -> Self {
        Self { batch_size: 64, epochs: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be >= 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be > 0"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor", "must be in (0, 1]"));
        }
        self.loss.validate()
    }
}

/// Learning rate for zero-based `epoch`: `lr · factor^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.lr_decay_every == 0 {
        return cfg.lr;
    }
    let steps = (epoch / cfg.lr_decay_every) as i32;
    cfg.lr * cfg.lr_decay_factor.powi(steps)
}

/// Both encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub visual: EncoderParams,
    pub text: EncoderParams,
}

pub const TENSOR_NAMES: [&str; 8] = [
    "visual.w_proj",
    "visual.b_proj",
    "visual.w_tok",
    "visual.w_bal",
    "text.w_proj",
    "text.b_proj",
    "text.w_tok",
    "text.w_bal",
];

impl ModelParams {
    pub fn init(corpus: &SyntheticCorpusConfig, visual: PoolingSpec, text: PoolingSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // stream 0 drives batching in `train`
        rng.set_stream(1);
        Self {
            visual: EncoderParams::init(corpus.visual_dim, corpus.embed_dim, visual, &mut rng),
            text: EncoderParams::init(corpus.text_dim, corpus.embed_dim, text, &mut rng),
        }
    }

    /// Tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&Matrix; 8] {
        let (v, t) = (&self.visual, &self.text);
        [&v.w_proj, &v.b_proj, &v.pool.w_tok, &v.pool.w_bal, &t.w_proj, &t.b_proj, &t.pool.w_tok, &t.pool.w_bal]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 8] {
        let (v, t) = (&mut self.visual, &mut self.text);
        [
            &mut v.w_proj,
            &mut v.b_proj,
            &mut v.pool.w_tok,
            &mut v.pool.w_bal,
            &mut t.w_proj,
            &mut t.b_proj,
            &mut t.pool.w_tok,
            &mut t.pool.w_bal,
        ]
    }

    /// Rebuilds a model from tensors in [`TENSOR_NAMES`] order.
    pub fn from_tensors(tensors: Vec<Matrix>, visual: PoolingSpec, text: PoolingSpec) -> Result<Self> {
        let [vw, vb, vt, vbal, tw, tb, tt, tbal]: [Matrix; 8] = tensors
            .try_into()
            .map_err(|v: Vec<Matrix>| Error::Data(format!("expected 8 tensors, got {}", v.len())))?;
        let model = Self {
            visual: EncoderParams { w_proj: vw, b_proj: vb, pool: PoolParams::new(vt, vbal)?, spec: visual },
            text: EncoderParams { w_proj: tw, b_proj: tb, pool: PoolParams::new(tt, tbal)?, spec: text },
        };
        model.visual.validate()?;
        model.text.validate()?;
        if model.visual.dim() != model.text.dim() {
            return Err(Error::dim(format!(
                "visual embeds into {} dimensions, text into {}",
                model.visual.dim(),
                model.text.dim()
            )));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub visual: EncoderGrads,
    pub text: EncoderGrads,
}

impl ModelGrads {
    pub fn zeros(model: &ModelParams) -> Self {
        Self { visual: EncoderGrads::zeros(&model.visual), text: EncoderGrads::zeros(&model.text) }
    }

    pub fn tensors(&self) -> [&Matrix; 8] {
        let (v, t) = (&self.visual, &self.text);
        [&v.w_proj, &v.b_proj, &v.w_tok, &v.w_bal, &t.w_proj, &t.b_proj, &t.w_tok, &t.w_bal]
    }
}

/// First and second moment estimates for every tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Matrix::zeros(p.rows(), p.cols()), Matrix::zeros(p.rows(), p.cols())))
            .unzip();
        Self { m, v, step: 0 }
    }
}

/// One bias-corrected Adam update over named tensors.
pub fn adam_step(params: &mut [(&str, &mut Matrix)], grads: &[&Matrix], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim(format!("gradient for {name} is {:?}, parameter is {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::Divergence { iteration: state.step as usize, what: format!("non-finite gradient for {name}") });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gv;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gv * gv;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Encodes a batch of (image, caption) pairs, applies the loss and backpropagates.
pub fn batch_loss_and_grads(
    model: &ModelParams,
    images: &[&Matrix],
    captions: &[&Matrix],
    loss: &LossConfig,
) -> Result<(LossOutput, ModelGrads)> {
    if images.len() != captions.len() {
        return Err(Error::dim(format!("{} images paired with {} captions", images.len(), captions.len())));
    }
    let vis: Vec<EncodeTrace> = images.iter().map(|f| EncodeTrace::forward(f, &model.visual)).collect::<Result<_>>()?;
    let txt: Vec<EncodeTrace> = captions.iter().map(|f| EncodeTrace::forward(f, &model.text)).collect::<Result<_>>()?;
    let t = Matrix::from_rows(&txt.iter().map(|e| e.output.as_slice()).collect::<Vec<_>>())?;
    let v = Matrix::from_rows(&vis.iter().map(|e| e.output.as_slice()).collect::<Vec<_>>())?;
    let s = cosine_sim_matrix(&t, &v)?;
    let out = compute_loss(&s, loss)?;
    let (g_t, g_v) = cosine_sim_vjp(&t, &v, &out.grad)?;

    let mut grads = ModelGrads::zeros(model);
    for (i, trace) in txt.iter().enumerate() {
        trace.backward(captions[i], &model.text, g_t.row(i), &mut grads.text)?;
    }
    for (i, trace) in vis.iter().enumerate() {
        trace.backward(images[i], &model.visual, g_v.row(i), &mut grads.visual)?;
    }
    Ok((out, grads))
}

/// One logged optimization step. `epoch` is 1-based; `iter` counts from 0 across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub epoch: usize,
    pub iter: usize,
    pub loss: f64,
    pub gamma_align: f64,
    pub gamma_uniform: f64,
    pub k: Option<usize>,
    pub lr: f64,
}

/// Validation score after `epoch` epochs (0 = before training).
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub result: RetrievalResult,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub adaptive: bool,
    pub records: Vec<IterRecord>,
    pub validation: Vec<ValidationRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,iter,loss,gamma_align,gamma_uniform,k,lr";

    /// Iteration rows in order, then one `epoch,-1,rsum,,,,` row per validation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let k = r.k.map(|k| k.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{},{},{}", r.epoch, r.iter, r.loss, r.gamma_align, r.gamma_uniform, k, r.lr);
        }
        for v in &self.validation {
            let _ = writeln!(out, "{},-1,{},,,,", v.epoch, v.result.rsum);
        }
        out
    }

    pub fn validation_rsum(&self, epoch: usize) -> Option<f64> {
        self.validation.iter().find(|v| v.epoch == epoch).map(|v| v.result.rsum)
    }

    pub fn records_in_epoch(&self, epoch: usize) -> impl Iterator<Item = &IterRecord> {
        self.records.iter().filter(move |r| r.epoch == epoch)
    }
}

/// `(iteration, K)` pairs of an adaptive-mode log.
pub fn k_history(log: &TrainLog) -> Result<Vec<(usize, usize)>> {
    if !log.adaptive {
        return Err(Error::config("loss", "K history is only recorded in infonce-adaptive mode"));
    }
    log.records
        .iter()
        .map(|r| r.k.map(|k| (r.iter, k)).ok_or_else(|| Error::Data(format!("iteration {} has no K", r.iter))))
        .collect()
}

/// Scores `model` on a held-out corpus.
pub fn evaluate_model(model: &ModelParams, corpus: &Corpus) -> Result<RetrievalResult> {
    let truth = GroundTruth::captions_to_images(corpus)?;
    let t = encode_all(&corpus.text, &model.text)?;
    let v = encode_all(&corpus.visual, &model.visual)?;
    evaluate(&t, &v, &truth)
}

/// Trains `model` on `train`; when `cfg.validate` is set and `val` is given, scores
/// the validation split before the first epoch and after each one.
pub fn train(train: &Corpus, val: Option<&Corpus>, mut model: ModelParams, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let mut log = TrainLog { adaptive: cfg.loss.mode.is_adaptive(), ..TrainLog::default() };
    if cfg.epochs == 0 {
        return Ok((model, log));
    }
    if train.num_groups() < cfg.batch_size {
        return Err(Error::config(
            "batch_size",
            format!("{} exceeds the {} training images", cfg.batch_size, train.num_groups()),
        ));
    }
    let captions = train.captions_by_image();
    if let Some(k) = captions.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("image {} has no caption", train.visual[k].id)));
    }

    let validate = |model: &ModelParams, epoch: usize, log: &mut TrainLog| -> Result<()> {
        if let (true, Some(val)) = (cfg.validate, val) {
            log.validation.push(ValidationRecord { epoch, result: evaluate_model(model, val)? });
        }
        Ok(())
    };
    validate(&model, 0, &mut log)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.tensors());
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train.num_groups()).collect();
        order.shuffle(&mut rng);
        let picks: Vec<usize> = order.iter().map(|&k| captions[k][rng.random_range(0..captions[k].len())]).collect();

        for (batch_imgs, batch_caps) in order.chunks(cfg.batch_size).zip(picks.chunks(cfg.batch_size)) {
            if batch_imgs.len() < 2 {
                continue;
            }
            let imgs: Vec<&Matrix> = batch_imgs.iter().map(|&k| &train.visual[k].features).collect();
            let caps: Vec<&Matrix> = batch_caps.iter().map(|&t| &train.text[t].features).collect();
            let (out, grads) = batch_loss_and_grads(&model, &imgs, &caps, &cfg.loss).map_err(|e| match e {
                Error::Evaluation(what) => Error::Divergence { iteration: iter, what },
                other => other,
            })?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence { iteration: iter, what: format!("loss is {}", out.loss) });
            }
            let mut named: Vec<(&str, &mut Matrix)> = TENSOR_NAMES.iter().copied().zip(model.tensors_mut()).collect();
            adam_step(&mut named, &grads.tensors(), &mut adam, lr).map_err(|e| match e {
                Error::Divergence { what, .. } => Error::Divergence { iteration: iter, what },
                other => other,
            })?;
            log.records.push(IterRecord {
                epoch: epoch + 1,
                iter,
                loss: out.loss,
                gamma_align: out.maturity.gamma_align,
                gamma_uniform: out.maturity.gamma_uniform,
                k: out.k,
                lr,
            });
            iter += 1;
        }
        validate(&model, epoch + 1, &mut log)?;
    }
    Ok((model, log))
}

/// The composed encode → similarity → loss pipeline on a fixed batch, as a
/// [`DiffOp`] over the eight model tensors.
pub struct PipelineOp {
    pub images: Vec<Matrix>,
    pub captions: Vec<Matrix>,
    pub visual_spec: PoolingSpec,
    pub text_spec: PoolingSpec,
    pub loss: LossConfig,
}

impl PipelineOp {
    fn model(&self, inputs: &[Matrix]) -> Result<ModelParams> {
        expect_inputs("pipeline", inputs, 8)?;
        ModelParams::from_tensors(inputs.to_vec(), self.visual_spec, self.text_spec)
    }
}

impl DiffOp for PipelineOp {
    fn name(&self) -> String {
        format!("pipeline[{}/{} -> {}]", self.visual_spec, self.text_spec, self.loss.mode)
    }
    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        let model = self.model(inputs)?;
        let imgs: Vec<&Matrix> = self.images.iter().collect();
        let caps: Vec<&Matrix> = self.captions.iter().collect();
        let (out, _) = batch_loss_and_grads(&model, &imgs, &caps, &self.loss)?;
        Matrix::from_vec(1, 1, vec![out.loss])
    }
    fn vjp(&self, inputs: &[Matrix], _output: &Matrix, upstream: &Matrix) -> Result<Vec<Matrix>> {
        let model = self.model(inputs)?;
        let imgs: Vec<&Matrix> = self.images.iter().collect();
        let caps: Vec<&Matrix> = self.captions.iter().collect();
        let (_, grads) = batch_loss_and_grads(&model, &imgs, &caps, &self.loss)?;
        Ok(grads.tensors().iter().map(|g| g.scale(upstream.get(0, 0))).collect())
    }
}
