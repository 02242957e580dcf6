//! Deterministic optimization loop: Adam/AdamW, linear warmup with cosine
//! decay, logit-scale clamping, seeded batching and validation-based
//! checkpoint selection.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{feature_matrix, nli_sentences, NliRecord, PairedRecord, Vocab};
use crate::encoders::{EncoderParams, ForwardTrace, TextInput};
use crate::error::{Error, Result};
use crate::model::{DualEncoder, ModelConfig, ModelGrads};
use crate::objectives::{
    composite_loss, CompositeInputs, NliViews, ObjectiveConfig, SentenceViews, Variant,
};
use crate::retrieval::{paired_retrieval, PairIndex, RetrievalResult};
use crate::tensor::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adamw,
}

impl OptimizerKind {
    pub fn default_weight_decay(self) -> f64 {
        match self {
            OptimizerKind::Adam => 0.0,
            OptimizerKind::Adamw => 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub optimizer: OptimizerKind,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Defaults to 0 for adam and 0.01 for adamw when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    /// Evaluate every this many steps in addition to every epoch end; 0
    /// disables step-based evaluation.
    pub eval_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            peak_lr: 5e-4,
            warmup_steps: 100,
            optimizer: OptimizerKind::Adam,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: None,
            seed: 0,
            objective: ObjectiveConfig::new(Variant::Clip),
            eval_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
            .unwrap_or_else(|| self.optimizer.default_weight_decay())
    }

    /// Copy with every defaulted field written out.
    pub fn resolved(&self) -> Self {
        Self {
            weight_decay: Some(self.weight_decay()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size",
                format!("must be >= 2, got {}", self.batch_size),
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config(
                "peak_lr",
                format!("must be > 0, got {}", self.peak_lr),
            ));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config(
                "betas",
                format!("({b1}, {b2}) must lie in [0, 1)"),
            ));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(
                "eps",
                format!("must be > 0, got {}", self.eps),
            ));
        }
        let wd = self.weight_decay();
        if !(wd >= 0.0 && wd.is_finite()) {
            return Err(Error::config(
                "weight_decay",
                format!("must be >= 0, got {wd}"),
            ));
        }
        if self.optimizer == OptimizerKind::Adam && wd != 0.0 {
            return Err(Error::config(
                "weight_decay",
                "only applies to the adamw optimizer",
            ));
        }
        self.objective.validate()?;
        self.model.validate()
    }

    fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay(),
        }
    }
}

/// Learning rate after `step` of `total_steps` updates: linear ramp from 0 to
/// the peak over the warmup, then cosine decay to 0.
pub fn lr_at(config: &TrainConfig, step: usize, total_steps: usize) -> Result<f64> {
    let warmup = config.warmup_steps;
    if warmup >= total_steps {
        return Err(Error::InvalidSchedule {
            warmup,
            total: total_steps,
        });
    }
    if step > total_steps {
        return Err(Error::config(
            "step",
            format!("{step} exceeds total_steps {total_steps}"),
        ));
    }
    let peak = config.peak_lr;
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

/// First and second moments per parameter slice, allocated on first use.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// One bias-corrected Adam update, with decoupled weight decay
/// `p ← p·(1 − lr·wd)` applied first when `weight_decay > 0`.
pub fn adam_update(
    state: &mut OptimizerState,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config(
            "lr",
            format!("must be a finite value >= 0, got {lr}"),
        ));
    }
    let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let grad_shapes: Vec<usize> = grads.iter().map(|g| g.len()).collect();
    if shapes != grad_shapes {
        return Err(Error::ShapeMismatch(format!(
            "parameter slices {shapes:?} vs gradient slices {grad_shapes:?}"
        )));
    }
    if state.m.is_empty() && state.step == 0 {
        state.m = shapes.iter().map(|&n| vec![0.0; n]).collect();
        state.v = state.m.clone();
    }
    let moment_shapes: Vec<usize> = state.m.iter().map(Vec::len).collect();
    if moment_shapes != shapes || state.v.iter().map(Vec::len).ne(shapes.iter().copied()) {
        return Err(Error::ShapeMismatch(format!(
            "optimizer moments {moment_shapes:?} vs parameter slices {shapes:?}"
        )));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..p.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            if hp.weight_decay != 0.0 {
                p[i] *= decay;
            }
            p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Updates every model parameter, then clamps the logit scale (or restores
/// it when it is not trainable).
pub fn optimizer_step(
    state: &mut OptimizerState,
    model: &mut DualEncoder,
    grads: &ModelGrads,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let fixed = (!model.logit_scale.trainable).then_some(model.logit_scale.value);
    adam_update(
        state,
        &mut model.param_slices_mut(),
        &grads.slices(),
        lr,
        &config.adam(),
    )?;
    if let Some(v) = fixed {
        model.logit_scale.value = v;
    }
    model.logit_scale.clamp();
    Ok(())
}

/// Training data: paired records plus an optional NLI corpus, with the
/// vocabulary used to tokenize both.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub pairs: Vec<PairedRecord>,
    pub nli: Option<Vec<NliRecord>>,
    pub vocab: Vocab,
}

/// Per-step losses (unweighted per-term values, weighted total).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    pub logit_scale: f64,
}

/// One validation evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    /// Number of optimizer steps taken so far.
    pub step: usize,
    pub epoch: usize,
    /// Mean of the two directional R@1 values.
    pub score: f64,
    pub text_retrieval: RetrievalResult,
    pub other_retrieval: RetrievalResult,
    pub logit_scale: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Highest-scoring snapshot; the initial model when nothing was evaluated.
    pub best: DualEncoder,
    pub best_entry: Option<EvalEntry>,
    pub final_model: DualEncoder,
    pub history: Vec<EvalEntry>,
    pub log: Vec<StepLog>,
    pub total_steps: usize,
}

/// Validation split encoded once for repeated evaluation.
pub struct Validator {
    text: TextInput,
    features: Matrix,
    index: PairIndex,
}

impl Validator {
    pub fn new(model: &DualEncoder, val: &[PairedRecord]) -> Result<Self> {
        if val.is_empty() {
            return Err(Error::EmptyDataset(
                "validation split has no records".into(),
            ));
        }
        let captions: Vec<&str> = val.iter().map(|r| r.caption.as_str()).collect();
        let features = feature_matrix(val)?;
        model.check_feature_dim(features.cols())?;
        Ok(Self {
            text: model.tokenize(&captions)?,
            features,
            index: PairIndex::from_records(val),
        })
    }

    /// `(text-retrieval, other-retrieval, score)` with dropout disabled.
    pub fn evaluate(&self, model: &DualEncoder) -> Result<(RetrievalResult, RetrievalResult, f64)> {
        let text = model.embed_text(&self.text)?;
        let other = model.embed_other(&self.features)?;
        let (t, o) = paired_retrieval(&self.index, &text, &other)?;
        let score = (t.recall_at_1 + o.recall_at_1) / 2.0;
        Ok((t, o, score))
    }
}

/// Steps per epoch: full batches plus a final short batch when it has at
/// least two rows.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n / batch_size + usize::from(n % batch_size >= 2)
}

fn batch_ranges(n: usize, batch_size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..batches_per_epoch(n, batch_size))
        .map(move |b| b * batch_size..((b + 1) * batch_size).min(n))
}

fn masks_for(params: &EncoderParams, rng: &mut Rng, n: usize) -> Result<Option<Vec<Matrix>>> {
    if params.dropout_rate == 0.0 || params.hidden_dims().is_empty() {
        return Ok(None);
    }
    params.sample_masks(rng, n).map(Some)
}

/// Endless reshuffled pass over `0..n`, one fresh permutation per cycle.
struct Cycler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Cycler {
    fn new(n: usize, rng: Rng) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k.min(self.n) {
            if self.pos == self.order.len() {
                self.order = self.rng.permutation(self.n);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Tokenized auxiliary corpora for the sentence objectives.
enum Auxiliary {
    None,
    Sentences {
        text: TextInput,
        cycler: Cycler,
    },
    Nli {
        premise: TextInput,
        entail: TextInput,
        contra: TextInput,
        cycler: Cycler,
    },
}

fn tokenize_all(model: &DualEncoder, texts: &[&str]) -> Result<TextInput> {
    model.tokenize(texts)
}

fn check_overlap(train: &[PairedRecord], val: &[PairedRecord]) -> Result<()> {
    let ids: HashSet<&str> = train.iter().map(|r| r.id.as_str()).collect();
    match val.iter().find(|r| ids.contains(r.id.as_str())) {
        Some(r) => Err(Error::OverlapLeak(r.id.clone())),
        None => Ok(()),
    }
}

/// Attributes a degenerate embedding (zero or non-finite norm) to the step.
fn at_step(err: Error, step: usize) -> Error {
    match err {
        Error::ZeroRow(_) => non_finite(step, "embedding"),
        other => other,
    }
}

fn non_finite(step: usize, term: &str) -> Error {
    Error::NonFinite {
        step,
        term: term.to_string(),
    }
}

/// Trains a fresh model on `data`, selecting the snapshot with the best
/// validation score on `val`.
pub fn train(
    config: &TrainConfig,
    data: &TrainingSet,
    val: &[PairedRecord],
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.pairs.is_empty() {
        return Err(Error::EmptyDataset("training split has no records".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset(
            "validation split has no records".into(),
        ));
    }
    check_overlap(&data.pairs, val)?;
    let variant = config.objective.variant;
    let nli = data.nli.as_deref().filter(|n| !n.is_empty());
    if variant.needs_nli_file() && nli.is_none() {
        return Err(Error::MissingInput(format!(
            "{variant} needs an NLI corpus"
        )));
    }

    let root = Rng::new(config.seed);
    let features = feature_matrix(&data.pairs)?;
    let mut model = DualEncoder::init(
        &config.model,
        data.vocab.clone(),
        features.cols(),
        &mut root.fork(0),
    )?;
    let validator = Validator::new(&model, val)?;
    let n = data.pairs.len();
    let per_epoch = batches_per_epoch(n, config.batch_size);
    let total_steps = config.epochs * per_epoch;

    let mut outcome = TrainOutcome {
        best: model.clone(),
        best_entry: None,
        final_model: model.clone(),
        history: Vec::new(),
        log: Vec::new(),
        total_steps,
    };
    if config.epochs == 0 {
        return Ok(outcome);
    }
    if per_epoch == 0 {
        return Err(Error::BatchTooSmall { got: n, min: 2 });
    }
    lr_at(config, 0, total_steps)?;

    let captions: Vec<&str> = data.pairs.iter().map(|r| r.caption.as_str()).collect();
    let text_all = tokenize_all(&model, &captions)?;
    let mut aux = match (variant.uses_external_sentences(), variant.uses_nli(), nli) {
        (true, _, Some(nli)) => {
            let sentences = nli_sentences(nli);
            let refs: Vec<&str> = sentences.iter().map(String::as_str).collect();
            Auxiliary::Sentences {
                text: tokenize_all(&model, &refs)?,
                cycler: Cycler::new(refs.len(), root.fork(3)),
            }
        }
        (_, true, Some(nli)) => {
            let col = |f: fn(&NliRecord) -> &str| -> Result<TextInput> {
                let v: Vec<&str> = nli.iter().map(f).collect();
                tokenize_all(&model, &v)
            };
            Auxiliary::Nli {
                premise: col(|r| &r.premise)?,
                entail: col(|r| &r.entailment)?,
                contra: col(|r| &r.contradiction)?,
                cycler: Cycler::new(nli.len(), root.fork(3)),
            }
        }
        _ => Auxiliary::None,
    };
    let twin = variant.uses_unsup_sentences() && !variant.uses_external_sentences();

    let mut shuffle_rng = root.fork(1);
    let mut drop_rng = root.fork(2);
    let mut opt = OptimizerState::default();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let perm = shuffle_rng.permutation(n);
        for (b, range) in batch_ranges(n, config.batch_size).enumerate() {
            let idx = &perm[range];
            let k = idx.len();
            let txt_in = text_all.select(idx);
            let feats = features.select_rows(idx);

            let tm = masks_for(&model.text, &mut drop_rng, k)?;
            let (txt, txt_trace) = model
                .forward_text(&txt_in, tm.as_deref())
                .map_err(|e| at_step(e, step))?;
            let om = masks_for(&model.other, &mut drop_rng, k)?;
            let (img, img_trace) = model
                .forward_other(&feats, om.as_deref())
                .map_err(|e| at_step(e, step))?;
            let plus = if twin {
                let m = masks_for(&model.text, &mut drop_rng, k)?;
                Some(
                    model
                        .forward_text(&txt_in, m.as_deref())
                        .map_err(|e| at_step(e, step))?,
                )
            } else {
                None
            };

            let mut aux_fwd: Vec<(crate::encoders::EmbeddingBatch, ForwardTrace)> = Vec::new();
            match &mut aux {
                Auxiliary::None => {}
                Auxiliary::Sentences { text, cycler } => {
                    let input = text.select(&cycler.take(config.batch_size));
                    for _ in 0..2 {
                        let m = masks_for(&model.text, &mut drop_rng, input.len())?;
                        aux_fwd.push(
                            model
                                .forward_text(&input, m.as_deref())
                                .map_err(|e| at_step(e, step))?,
                        );
                    }
                }
                Auxiliary::Nli {
                    premise,
                    entail,
                    contra,
                    cycler,
                } => {
                    let sel = cycler.take(config.batch_size);
                    for part in [&*premise, &*entail, &*contra] {
                        let input = part.select(&sel);
                        let m = masks_for(&model.text, &mut drop_rng, input.len())?;
                        aux_fwd.push(
                            model
                                .forward_text(&input, m.as_deref())
                                .map_err(|e| at_step(e, step))?,
                        );
                    }
                }
            }

            let mut inputs = CompositeInputs::new(img.matrix(), txt.matrix());
            inputs.txt_plus = plus.as_ref().map(|(e, _)| e.matrix());
            match aux_fwd.len() {
                2 => {
                    inputs.sentences = Some(SentenceViews {
                        anchor: aux_fwd[0].0.matrix(),
                        positive: aux_fwd[1].0.matrix(),
                    })
                }
                3 => {
                    inputs.nli = Some(NliViews {
                        premise: aux_fwd[0].0.matrix(),
                        entail: aux_fwd[1].0.matrix(),
                        contra: aux_fwd[2].0.matrix(),
                    })
                }
                _ => {}
            }
            let loss = composite_loss(&config.objective, &model.logit_scale, &inputs)?;
            for t in &loss.breakdown {
                if !t.value.is_finite() {
                    return Err(non_finite(step, t.term.key()));
                }
            }
            if !loss.value.is_finite() {
                return Err(non_finite(step, "total"));
            }

            let mut grads = ModelGrads::zeros(&model);
            grads.add_text(&model, &txt_trace, &loss.grad_txt)?;
            grads.add_other(&model, &img_trace, &loss.grad_img)?;
            if let (Some((_, trace)), Some(g)) = (&plus, &loss.grad_txt_plus) {
                grads.add_text(&model, trace, g)?;
            }
            if let Some((ga, gp)) = &loss.grad_sentences {
                grads.add_text(&model, &aux_fwd[0].1, ga)?;
                grads.add_text(&model, &aux_fwd[1].1, gp)?;
            }
            if let Some(g) = &loss.grad_nli {
                for (fwd, gk) in aux_fwd.iter().zip(g) {
                    grads.add_text(&model, &fwd.1, gk)?;
                }
            }
            grads.logit_scale = if model.logit_scale.trainable {
                loss.grad_logit_scale
            } else {
                0.0
            };
            if !grads.is_finite() {
                return Err(non_finite(step, "gradient"));
            }

            let lr = lr_at(config, step + 1, total_steps)?;
            optimizer_step(&mut opt, &mut model, &grads, lr, config)?;
            step += 1;
            outcome.log.push(StepLog {
                step,
                epoch,
                lr,
                loss: loss.value,
                terms: loss
                    .breakdown
                    .iter()
                    .map(|t| (t.term.key().to_string(), t.value))
                    .collect(),
                logit_scale: model.logit_scale.value,
            });

            let epoch_end = b + 1 == per_epoch;
            let scheduled = config.eval_every > 0 && step.is_multiple_of(config.eval_every);
            if epoch_end || scheduled {
                let (t, o, score) = validator.evaluate(&model)?;
                if !score.is_finite() {
                    return Err(non_finite(step, "validation"));
                }
                let entry = EvalEntry {
                    step,
                    epoch,
                    score,
                    text_retrieval: t,
                    other_retrieval: o,
                    logit_scale: model.logit_scale.value,
                };
                if outcome.best_entry.as_ref().is_none_or(|e| score > e.score) {
                    outcome.best = model.clone();
                    outcome.best_entry = Some(entry.clone());
                }
                outcome.history.push(entry);
            }
        }
    }
    outcome.final_model = model;
    Ok(outcome)
}
