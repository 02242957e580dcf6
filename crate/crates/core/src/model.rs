//! The trainable dual encoder: a token-table text tower, a feature tower for
//! the other modality, and the shared logit scale. Serializes as a single JSON
//! checkpoint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PairedRecord, Vocab};
use crate::encoders::{
    backward, embed_features, embed_text, Dense, EmbeddingBatch, EncoderParams, ForwardTrace,
    Modality, ParamGrads, TextInput,
};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::objectives::{LogitScale, MAX_LOGIT_SCALE, MIN_LOGIT_SCALE};
use crate::tensor::{Matrix, Rng};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub text_dropout: f64,
    pub other_dropout: f64,
    pub modality: Modality,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            token_dim: 32,
            hidden_dims: vec![64],
            embed_dim: 32,
            text_dropout: 0.1,
            other_dropout: 0.0,
            modality: Modality::Image,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 {
            return Err(Error::config("model.token_dim", "must be positive"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("model.embed_dim", "must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config(
                "model.hidden_dims",
                "widths must be positive",
            ));
        }
        for (field, rate) in [
            ("model.text_dropout", self.text_dropout),
            ("model.other_dropout", self.other_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(field, format!("{rate} is outside [0, 1)")));
            }
        }
        if self.modality == Modality::Text {
            return Err(Error::config(
                "model.modality",
                "the paired modality cannot be text",
            ));
        }
        Ok(())
    }

    fn tower_dims(&self, input: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims
    }
}

/// Input and output widths recorded in the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub token_dim: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualEncoder {
    pub dims: ModelDims,
    pub modality: Modality,
    pub vocab: Vocab,
    pub token_table: Matrix,
    pub text: EncoderParams,
    pub other: EncoderParams,
    pub logit_scale: LogitScale,
}

impl DualEncoder {
    /// Random initialization: `N(0, 1)` token table, `N(0, 1/fan_in)` layers,
    /// logit scale at `ln(1/0.07)`.
    pub fn init(
        config: &ModelConfig,
        vocab: Vocab,
        feature_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() {
            return Err(Error::config("vocab", "vocabulary is empty"));
        }
        if feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        let token_table = rng.normal_matrix(vocab.len(), config.token_dim, 1.0);
        let text = EncoderParams::init(
            &config.tower_dims(config.token_dim),
            config.text_dropout,
            rng,
        )?;
        let other =
            EncoderParams::init(&config.tower_dims(feature_dim), config.other_dropout, rng)?;
        Ok(Self {
            dims: ModelDims {
                vocab_size: vocab.len(),
                token_dim: config.token_dim,
                feature_dim,
                embed_dim: config.embed_dim,
            },
            modality: config.modality,
            vocab,
            token_table,
            text,
            other,
            logit_scale: LogitScale::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let mismatch = |what: &str, expected: usize, got: usize| {
            Error::DimensionMismatch(format!(
                "{what}: checkpoint declares {expected}, found {got}"
            ))
        };
        if self.vocab.len() != d.vocab_size {
            return Err(mismatch("vocab_size", d.vocab_size, self.vocab.len()));
        }
        if self.token_table.shape() != (d.vocab_size, d.token_dim) {
            return Err(Error::DimensionMismatch(format!(
                "token table is {}x{}, expected {}x{}",
                self.token_table.rows(),
                self.token_table.cols(),
                d.vocab_size,
                d.token_dim
            )));
        }
        self.text.validate()?;
        self.other.validate()?;
        let text_in = self.text.input_dim().unwrap_or(d.token_dim);
        if text_in != d.token_dim {
            return Err(mismatch("text encoder input", d.token_dim, text_in));
        }
        let other_in = self.other.input_dim().unwrap_or(d.feature_dim);
        if other_in != d.feature_dim {
            return Err(mismatch("feature encoder input", d.feature_dim, other_in));
        }
        let text_out = self.text.output_dim().unwrap_or(d.token_dim);
        let other_out = self.other.output_dim().unwrap_or(d.feature_dim);
        if text_out != d.embed_dim {
            return Err(mismatch("text embedding", d.embed_dim, text_out));
        }
        if other_out != d.embed_dim {
            return Err(mismatch("feature embedding", d.embed_dim, other_out));
        }
        let s = self.logit_scale.value;
        if !(MIN_LOGIT_SCALE..=MAX_LOGIT_SCALE).contains(&s) {
            return Err(Error::config(
                "logit_scale",
                format!("{s} is outside [{MIN_LOGIT_SCALE}, {MAX_LOGIT_SCALE}]"),
            ));
        }
        Ok(())
    }

    /// Errors unless the data's feature width matches the checkpoint.
    pub fn check_feature_dim(&self, feature_dim: usize) -> Result<()> {
        if feature_dim != self.dims.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint expects feature_dim {} but data has feature_dim {feature_dim}",
                self.dims.feature_dim
            )));
        }
        Ok(())
    }

    /// Strict tokenization of captions (unknown words are an error).
    pub fn tokenize(&self, captions: &[&str]) -> Result<TextInput> {
        let ids = captions
            .iter()
            .map(|c| self.vocab.encode(c))
            .collect::<Result<Vec<_>>>()?;
        TextInput::new(ids, self.vocab.len())
    }

    /// Lenient tokenization for free text such as prompts: unknown words are
    /// skipped.
    pub fn tokenize_known(&self, texts: &[String]) -> Result<TextInput> {
        let ids = texts
            .iter()
            .map(|c| self.vocab.encode_known(c))
            .collect::<Result<Vec<_>>>()?;
        TextInput::new(ids, self.vocab.len())
    }

    pub fn forward_text(
        &self,
        input: &TextInput,
        masks: Option<&[Matrix]>,
    ) -> Result<(EmbeddingBatch, ForwardTrace)> {
        embed_text(&self.text, &self.token_table, input, masks)
    }

    pub fn forward_other(
        &self,
        features: &Matrix,
        masks: Option<&[Matrix]>,
    ) -> Result<(EmbeddingBatch, ForwardTrace)> {
        self.check_feature_dim(features.cols())?;
        embed_features(&self.other, features, masks, self.modality)
    }

    /// Text embeddings with dropout disabled.
    pub fn embed_text(&self, input: &TextInput) -> Result<Matrix> {
        Ok(self.forward_text(input, None)?.0.into_matrix())
    }

    /// Other-modality embeddings with dropout disabled.
    pub fn embed_other(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.forward_other(features, None)?.0.into_matrix())
    }

    /// `(text, other)` embeddings of every record, dropout disabled.
    pub fn embed_records(&self, records: &[PairedRecord]) -> Result<(Matrix, Matrix)> {
        if records.is_empty() {
            return Err(Error::EmptyInput("no records to embed".into()));
        }
        let captions: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
        let text = self.embed_text(&self.tokenize(&captions)?)?;
        let other = self.embed_other(&crate::data::feature_matrix(records)?)?;
        Ok((text, other))
    }

    /// Mutable views of every trainable parameter, in the order used by
    /// [`ModelGrads::slices`]. The logit scale comes last.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        push_layers_mut(&mut out, &mut self.text.layers);
        out.push(self.token_table.as_mut_slice());
        push_layers_mut(&mut out, &mut self.other.layers);
        out.push(std::slice::from_mut(&mut self.logit_scale.value));
        out
    }

    pub fn num_params(&self) -> usize {
        self.text.num_params() + self.token_table.as_slice().len() + self.other.num_params() + 1
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: DualEncoder = read_json(path)?;
        model.validate()?;
        Ok(model)
    }
}

fn push_layers_mut<'a>(out: &mut Vec<&'a mut [f64]>, layers: &'a mut [Dense]) {
    for l in layers {
        out.push(l.weight.as_mut_slice());
        out.push(&mut l.bias);
    }
}

fn push_layers<'a>(out: &mut Vec<&'a [f64]>, layers: &'a [Dense]) {
    for l in layers {
        out.push(l.weight.as_slice());
        out.push(&l.bias);
    }
}

fn add_layers(acc: &mut [Dense], g: &[Dense]) -> Result<()> {
    if acc.len() != g.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient layers for {} parameter layers",
            g.len(),
            acc.len()
        )));
    }
    for (a, b) in acc.iter_mut().zip(g) {
        a.weight.add_assign(&b.weight)?;
        for (x, y) in a.bias.iter_mut().zip(&b.bias) {
            *x += y;
        }
    }
    Ok(())
}

/// Gradient of the training loss w.r.t. every [`DualEncoder`] parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub text: Vec<Dense>,
    pub table: Matrix,
    pub other: Vec<Dense>,
    pub logit_scale: f64,
}

impl ModelGrads {
    pub fn zeros(model: &DualEncoder) -> Self {
        Self {
            text: model.text.zero_grads(),
            table: Matrix::zeros(model.token_table.rows(), model.token_table.cols()),
            other: model.other.zero_grads(),
            logit_scale: 0.0,
        }
    }

    /// Backpropagates `grad_out` through a text forward pass and accumulates.
    pub fn add_text(
        &mut self,
        model: &DualEncoder,
        trace: &ForwardTrace,
        grad_out: &Matrix,
    ) -> Result<()> {
        let g: ParamGrads = backward(&model.text, trace, grad_out)?;
        add_layers(&mut self.text, &g.layers)?;
        if let Some(t) = &g.table {
            self.table.add_assign(t)?;
        }
        Ok(())
    }

    /// Backpropagates `grad_out` through an other-modality forward pass and
    /// accumulates.
    pub fn add_other(
        &mut self,
        model: &DualEncoder,
        trace: &ForwardTrace,
        grad_out: &Matrix,
    ) -> Result<()> {
        let g = backward(&model.other, trace, grad_out)?;
        add_layers(&mut self.other, &g.layers)
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        push_layers(&mut out, &self.text);
        out.push(self.table.as_slice());
        push_layers(&mut out, &self.other);
        out.push(std::slice::from_ref(&self.logit_scale));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}
