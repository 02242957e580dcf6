//! Small MLP encoders with hand-written backward passes.
//!
//! Text goes through a learned token table, is mean-pooled over the caption,
//! and then through the MLP. Other modalities feed their feature vectors to
//! the MLP directly. Both paths end in row L2 normalization so that outputs
//! live on the unit sphere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dropout_mask, l2_normalize_rows, norm, Matrix, Rng};

/// Tolerance on row norms accepted by [`EmbeddingBatch::new`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Audio,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Audio => "audio",
        })
    }
}

/// Row-normalized embeddings tagged with the modality they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    matrix: Matrix,
    modality: Modality,
}

impl EmbeddingBatch {
    /// Wraps an already-normalized matrix.
    pub fn new(matrix: Matrix, modality: Modality) -> Result<Self> {
        for (i, n) in matrix.row_norms().into_iter().enumerate() {
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} of {modality} embeddings has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self { matrix, modality })
    }

    /// Normalizes the rows of `matrix` and wraps the result.
    pub fn normalized(matrix: &Matrix, modality: Modality) -> Result<Self> {
        Ok(Self {
            matrix: l2_normalize_rows(matrix)?,
            modality,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

impl std::ops::Deref for EmbeddingBatch {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.matrix
    }
}

/// One affine layer, `y = x Wᵀ + b` with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn zeros_like(&self) -> Dense {
        Dense {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_t(&self.weight)?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }
}

/// MLP parameters: tanh between layers, nothing after the last one, dropout
/// on hidden activations only. An empty layer list is the identity map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Dense>,
    pub dropout_rate: f64,
}

impl EncoderParams {
    /// Random initialization with `N(0, 1/fan_in)` weights and zero biases.
    /// `dims` lists the input width followed by every layer's output width.
    pub fn init(dims: &[usize], dropout_rate: f64, rng: &mut Rng) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::config("dims", "layer widths must be positive"));
        }
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weight: rng.normal_matrix(w[1], w[0], 1.0 / (w[0] as f64).sqrt()),
                bias: vec![0.0; w[1]],
            })
            .collect();
        let p = Self {
            layers,
            dropout_rate,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Self {
            layers: Vec::new(),
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidRate(self.dropout_rate));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {k} bias has {} entries for {} outputs",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.first().map(Dense::in_dim)
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.last().map(Dense::out_dim)
    }

    /// Widths of the activations that dropout applies to.
    pub fn hidden_dims(&self) -> Vec<usize> {
        let n = self.layers.len().saturating_sub(1);
        self.layers[..n].iter().map(Dense::out_dim).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Draws one fresh dropout mask per hidden layer for a batch of `n` rows.
    pub fn sample_masks(&self, rng: &mut Rng, n: usize) -> Result<Vec<Matrix>> {
        self.hidden_dims()
            .into_iter()
            .map(|w| dropout_mask(rng, n, w, self.dropout_rate))
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<Dense> {
        self.layers.iter().map(Dense::zeros_like).collect()
    }
}

/// Token-id captions for the text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TextInput {
    pub token_ids: Vec<Vec<usize>>,
    pub vocab_size: usize,
}

impl TextInput {
    pub fn new(token_ids: Vec<Vec<usize>>, vocab_size: usize) -> Result<Self> {
        let t = Self {
            token_ids,
            vocab_size,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, caption) in self.token_ids.iter().enumerate() {
            if caption.is_empty() {
                return Err(Error::EmptyInput(format!("caption {i} has no tokens")));
            }
            if let Some(&id) = caption.iter().find(|&&id| id >= self.vocab_size) {
                return Err(Error::UnknownToken {
                    id,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> TextInput {
        TextInput {
            token_ids: idx.iter().map(|&i| self.token_ids[i].clone()).collect(),
            vocab_size: self.vocab_size,
        }
    }
}

/// Everything backward needs from a forward call.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input to each layer (hidden inputs are post-dropout).
    layer_inputs: Vec<Matrix>,
    /// tanh outputs of each hidden layer, before dropout.
    activations: Vec<Matrix>,
    masks: Option<Vec<Matrix>>,
    pre_norm: Matrix,
    output: Matrix,
    tokens: Option<Vec<Vec<usize>>>,
    table_shape: Option<(usize, usize)>,
    layer_shapes: Vec<(usize, usize)>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

/// Gradients of a scalar w.r.t. every encoder parameter, plus the token
/// table for text encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Dense>,
    pub table: Option<Matrix>,
}

impl ParamGrads {
    /// All gradient entries in a fixed order: layers (weight then bias), then
    /// the table.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        if let Some(t) = &self.table {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

fn mean_pool(table: &Matrix, input: &TextInput) -> Result<Matrix> {
    if input.vocab_size != table.rows() {
        return Err(Error::DimensionMismatch(format!(
            "token table has {} rows but vocabulary size is {}",
            table.rows(),
            input.vocab_size
        )));
    }
    input.validate()?;
    let mut pooled = Matrix::zeros(input.len(), table.cols());
    for (i, caption) in input.token_ids.iter().enumerate() {
        let w = 1.0 / caption.len() as f64;
        let row = pooled.row_mut(i);
        for &t in caption {
            for (p, v) in row.iter_mut().zip(table.row(t)) {
                *p += w * v;
            }
        }
    }
    Ok(pooled)
}

fn run_mlp(
    params: &EncoderParams,
    input: Matrix,
    masks: Option<&[Matrix]>,
    modality: Modality,
) -> Result<(EmbeddingBatch, ForwardTrace)> {
    params.validate()?;
    let hidden = params.hidden_dims();
    if let Some(m) = masks {
        if m.len() != hidden.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} dropout masks supplied for {} hidden layers",
                m.len(),
                hidden.len()
            )));
        }
        for (k, (mask, &w)) in m.iter().zip(&hidden).enumerate() {
            if mask.shape() != (input.rows(), w) {
                return Err(Error::DimensionMismatch(format!(
                    "mask {k} is {}x{}, expected {}x{w}",
                    mask.rows(),
                    mask.cols(),
                    input.rows()
                )));
            }
        }
    }
    if let Some(d) = params.input_dim() {
        if d != input.cols() {
            return Err(Error::DimensionMismatch(format!(
                "encoder expects {d} input features, got {}",
                input.cols()
            )));
        }
    }

    let last = params.layers.len().saturating_sub(1);
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut activations = Vec::with_capacity(hidden.len());
    let mut h = input;
    for (k, layer) in params.layers.iter().enumerate() {
        let z = layer.forward(&h)?;
        layer_inputs.push(h);
        if k == last {
            h = z;
        } else {
            let a = z.map(f64::tanh);
            let mut dropped = a.clone();
            if let Some(m) = masks {
                dropped.hadamard_assign(&m[k])?;
            }
            activations.push(a);
            h = dropped;
        }
    }
    let output = l2_normalize_rows(&h)?;
    let trace = ForwardTrace {
        layer_inputs,
        activations,
        masks: masks.map(<[Matrix]>::to_vec),
        pre_norm: h,
        output: output.clone(),
        tokens: None,
        table_shape: None,
        layer_shapes: params.layers.iter().map(|l| l.weight.shape()).collect(),
    };
    Ok((
        EmbeddingBatch {
            matrix: output,
            modality,
        },
        trace,
    ))
}

/// Encodes token-bag captions: mean of token-table rows, MLP, normalize.
pub fn embed_text(
    params: &EncoderParams,
    table: &Matrix,
    input: &TextInput,
    masks: Option<&[Matrix]>,
) -> Result<(EmbeddingBatch, ForwardTrace)> {
    let pooled = mean_pool(table, input)?;
    let (batch, mut trace) = run_mlp(params, pooled, masks, Modality::Text)?;
    trace.tokens = Some(input.token_ids.clone());
    trace.table_shape = Some(table.shape());
    Ok((batch, trace))
}

/// Encodes raw feature rows: MLP, normalize.
pub fn embed_features(
    params: &EncoderParams,
    features: &Matrix,
    masks: Option<&[Matrix]>,
    modality: Modality,
) -> Result<(EmbeddingBatch, ForwardTrace)> {
    run_mlp(params, features.clone(), masks, modality)
}

/// Gradient of `sum(grad_out ∘ output)` w.r.t. every parameter.
pub fn backward(
    params: &EncoderParams,
    trace: &ForwardTrace,
    grad_out: &Matrix,
) -> Result<ParamGrads> {
    let shapes: Vec<_> = params.layers.iter().map(|l| l.weight.shape()).collect();
    if shapes != trace.layer_shapes {
        return Err(Error::TraceMismatch(format!(
            "trace recorded layers {:?}, parameters have {:?}",
            trace.layer_shapes, shapes
        )));
    }
    if grad_out.shape() != trace.output.shape() {
        return Err(Error::TraceMismatch(format!(
            "output gradient is {}x{}, forward produced {}x{}",
            grad_out.rows(),
            grad_out.cols(),
            trace.output.rows(),
            trace.output.cols()
        )));
    }

    // Through the normalization: (I - x̂x̂ᵀ) g / ‖x‖.
    let mut delta = Matrix::zeros(grad_out.rows(), grad_out.cols());
    for i in 0..grad_out.rows() {
        let x_hat = trace.output.row(i);
        let g = grad_out.row(i);
        let n = norm(trace.pre_norm.row(i));
        let radial: f64 = x_hat.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((d, &gi), &xi) in delta.row_mut(i).iter_mut().zip(g).zip(x_hat) {
            *d = (gi - radial * xi) / n;
        }
    }

    let mut layers = params.zero_grads();
    for k in (0..params.layers.len()).rev() {
        let h = &trace.layer_inputs[k];
        layers[k].weight = delta.t_matmul(h)?;
        for i in 0..delta.rows() {
            for (b, d) in layers[k].bias.iter_mut().zip(delta.row(i)) {
                *b += d;
            }
        }
        let mut dh = delta.matmul(&params.layers[k].weight)?;
        if k > 0 {
            if let Some(m) = &trace.masks {
                dh.hadamard_assign(&m[k - 1])?;
            }
            let a = &trace.activations[k - 1];
            for (d, &av) in dh.as_mut_slice().iter_mut().zip(a.as_slice()) {
                *d *= 1.0 - av * av;
            }
        }
        delta = dh;
    }

    let table = match (&trace.tokens, trace.table_shape) {
        (Some(tokens), Some((rows, cols))) => {
            let mut t = Matrix::zeros(rows, cols);
            for (i, caption) in tokens.iter().enumerate() {
                let w = 1.0 / caption.len() as f64;
                let d = delta.row(i);
                for &tok in caption {
                    for (tv, dv) in t.row_mut(tok).iter_mut().zip(d) {
                        *tv += w * dv;
                    }
                }
            }
            Some(t)
        }
        _ => None,
    };
    Ok(ParamGrads { layers, table })
}

/// Encoder input for gradient checking.
#[derive(Clone, Copy, Debug)]
pub enum EncoderInput<'a> {
    Text {
        table: &'a Matrix,
        input: &'a TextInput,
    },
    Features(&'a Matrix),
}

/// Scalar loss of an embedding batch, returning the value and its gradient
/// w.r.t. the embeddings.
pub type LossFn<'a> = dyn Fn(&Matrix) -> Result<(f64, Matrix)> + 'a;

fn forward_plain(
    params: &EncoderParams,
    input: EncoderInput<'_>,
) -> Result<(EmbeddingBatch, ForwardTrace)> {
    match input {
        EncoderInput::Text { table, input } => embed_text(params, table, input, None),
        EncoderInput::Features(f) => embed_features(params, f, None, Modality::Image),
    }
}

/// Backprop gradients of `loss_fn ∘ encoder` with dropout disabled.
pub fn analytic_gradients(
    params: &EncoderParams,
    input: EncoderInput<'_>,
    loss_fn: &LossFn<'_>,
) -> Result<ParamGrads> {
    let (emb, trace) = forward_plain(params, input)?;
    let (_, g) = loss_fn(emb.matrix())?;
    backward(params, &trace, &g)
}

/// Central finite differences of `loss_fn ∘ encoder` w.r.t. every parameter.
pub fn numeric_gradients(
    params: &EncoderParams,
    input: EncoderInput<'_>,
    loss_fn: &LossFn<'_>,
    h: f64,
) -> Result<ParamGrads> {
    let eval = |p: &EncoderParams, inp: EncoderInput<'_>| -> Result<f64> {
        let (emb, _) = forward_plain(p, inp)?;
        Ok(loss_fn(emb.matrix())?.0)
    };
    let mut work = params.clone();
    let mut layers = params.zero_grads();
    for k in 0..params.layers.len() {
        for idx in 0..params.layers[k].weight.as_slice().len() {
            let orig = params.layers[k].weight.as_slice()[idx];
            work.layers[k].weight.as_mut_slice()[idx] = orig + h;
            let up = eval(&work, input)?;
            work.layers[k].weight.as_mut_slice()[idx] = orig - h;
            let down = eval(&work, input)?;
            work.layers[k].weight.as_mut_slice()[idx] = orig;
            layers[k].weight.as_mut_slice()[idx] = (up - down) / (2.0 * h);
        }
        for idx in 0..params.layers[k].bias.len() {
            let orig = params.layers[k].bias[idx];
            work.layers[k].bias[idx] = orig + h;
            let up = eval(&work, input)?;
            work.layers[k].bias[idx] = orig - h;
            let down = eval(&work, input)?;
            work.layers[k].bias[idx] = orig;
            layers[k].bias[idx] = (up - down) / (2.0 * h);
        }
    }
    let table = match input {
        EncoderInput::Text { table, input: text } => {
            let mut t = table.clone();
            let mut grad = Matrix::zeros(table.rows(), table.cols());
            for idx in 0..table.as_slice().len() {
                let orig = table.as_slice()[idx];
                t.as_mut_slice()[idx] = orig + h;
                let up = eval(
                    &work,
                    EncoderInput::Text {
                        table: &t,
                        input: text,
                    },
                )?;
                t.as_mut_slice()[idx] = orig - h;
                let down = eval(
                    &work,
                    EncoderInput::Text {
                        table: &t,
                        input: text,
                    },
                )?;
                t.as_mut_slice()[idx] = orig;
                grad.as_mut_slice()[idx] = (up - down) / (2.0 * h);
            }
            Some(grad)
        }
        EncoderInput::Features(_) => None,
    };
    Ok(ParamGrads { layers, table })
}

/// `max |a - n| / max(|a|, |n|, 1e-8)` over all entries; 0 when there are none.
pub fn max_relative_error(analytic: &ParamGrads, numeric: &ParamGrads) -> f64 {
    let a = analytic.flatten();
    let n = numeric.flatten();
    assert_eq!(a.len(), n.len(), "gradient sets differ in size");
    a.iter()
        .zip(&n)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares backprop against central differences with step [`FD_STEP`].
pub fn gradient_check(
    params: &EncoderParams,
    input: EncoderInput<'_>,
    loss_fn: &LossFn<'_>,
) -> Result<f64> {
    let analytic = analytic_gradients(params, input, loss_fn)?;
    let numeric = numeric_gradients(params, input, loss_fn, FD_STEP)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer(n: usize) -> EncoderParams {
        EncoderParams {
            layers: vec![Dense {
                weight: Matrix::identity(n),
                bias: vec![0.0; n],
            }],
            dropout_rate: 0.0,
        }
    }

    fn random_net(rng: &mut Rng, dims: &[usize]) -> EncoderParams {
        let mut p = EncoderParams::init(dims, 0.0, rng).unwrap();
        for l in &mut p.layers {
            for b in &mut l.bias {
                *b = 0.3 * rng.normal();
            }
        }
        p
    }

    /// Random linear functional of the embeddings.
    fn linear_loss(w: Matrix) -> impl Fn(&Matrix) -> Result<(f64, Matrix)> {
        move |e: &Matrix| {
            let v: f64 = e
                .as_slice()
                .iter()
                .zip(w.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            Ok((v, w.clone()))
        }
    }

    #[test]
    fn identity_text_network_normalizes_table_row() {
        let table = Matrix::from_rows(&[[3.0, 4.0], [1.0, 0.0]]).unwrap();
        let input = TextInput::new(vec![vec![0]], 2).unwrap();
        let (emb, _) = embed_text(&identity_layer(2), &table, &input, None).unwrap();
        assert!((emb[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((emb[(0, 1)] - 0.8).abs() < 1e-15);
        assert_eq!(emb.modality(), Modality::Text);
    }

    #[test]
    fn bag_of_tokens_is_averaged() {
        let mut rng = Rng::new(3);
        let table = rng.normal_matrix(5, 4, 1.0);
        let params = random_net(&mut rng, &[4, 6, 3]);
        let input = TextInput::new(vec![vec![1, 3]], 5).unwrap();
        let (emb, _) = embed_text(&params, &table, &input, None).unwrap();

        let mut mean = Matrix::zeros(1, 4);
        for j in 0..4 {
            mean[(0, j)] = 0.5 * (table[(1, j)] + table[(3, j)]);
        }
        let (direct, _) = embed_features(&params, &mean, None, Modality::Text).unwrap();
        assert!(emb.max_abs_diff(&direct) < 1e-15);
    }

    #[test]
    fn unknown_tokens_are_rejected() {
        let table = Matrix::zeros(3, 2);
        let input = TextInput {
            token_ids: vec![vec![0, 3]],
            vocab_size: 3,
        };
        assert!(matches!(
            embed_text(&identity_layer(2), &table, &input, None),
            Err(Error::UnknownToken { id: 3, .. })
        ));
    }

    #[test]
    fn twin_dropout_views_differ() {
        let mut rng = Rng::new(11);
        let table = rng.normal_matrix(20, 16, 1.0);
        let mut params = EncoderParams::init(&[16, 32, 8], 0.1, &mut rng).unwrap();
        params.dropout_rate = 0.1;
        let input = TextInput::new(vec![vec![1, 2, 7]], 20).unwrap();
        let mut differing = 0;
        for _ in 0..100 {
            let m1 = params.sample_masks(&mut rng, 1).unwrap();
            let m2 = params.sample_masks(&mut rng, 1).unwrap();
            let (a, _) = embed_text(&params, &table, &input, Some(&m1)).unwrap();
            let (b, _) = embed_text(&params, &table, &input, Some(&m2)).unwrap();
            let cos: f64 = a.row(0).iter().zip(b.row(0)).map(|(x, y)| x * y).sum();
            if cos < 1.0 - 1e-6 {
                differing += 1;
            }
        }
        assert!(differing >= 95, "only {differing} of 100 twin views differ");
    }

    #[test]
    fn all_ones_masks_equal_no_dropout() {
        let mut rng = Rng::new(12);
        let params = random_net(&mut rng, &[5, 7, 6, 3]);
        let x = rng.normal_matrix(4, 5, 1.0);
        let ones: Vec<Matrix> = params
            .hidden_dims()
            .iter()
            .map(|&w| Matrix::filled(4, w, 1.0))
            .collect();
        let (a, _) = embed_features(&params, &x, None, Modality::Image).unwrap();
        let (b, _) = embed_features(&params, &x, Some(&ones), Modality::Image).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feature_encoder_examples() {
        let mut rng = Rng::new(4);
        let x = rng.normal_matrix(3, 4, 1.0);
        let (emb, _) = embed_features(&identity_layer(4), &x, None, Modality::Audio).unwrap();
        assert!(emb.max_abs_diff(&l2_normalize_rows(&x).unwrap()) < 1e-15);

        let constant = EncoderParams {
            layers: vec![
                Dense {
                    weight: Matrix::zeros(3, 4),
                    bias: vec![0.0; 3],
                },
                Dense {
                    weight: Matrix::zeros(2, 3),
                    bias: vec![3.0, 4.0],
                },
            ],
            dropout_rate: 0.0,
        };
        let (emb, _) = embed_features(&constant, &x, None, Modality::Image).unwrap();
        for r in emb.iter_rows() {
            assert!((r[0] - 0.6).abs() < 1e-15 && (r[1] - 0.8).abs() < 1e-15);
        }

        let params = random_net(&mut Rng::new(8), &[4, 6, 2]);
        let a = embed_features(&params, &x, None, Modality::Image)
            .unwrap()
            .0;
        let b = embed_features(&params, &x, None, Modality::Image)
            .unwrap()
            .0;
        assert_eq!(a, b);
    }

    #[test]
    fn bad_shapes_are_rejected() {
        let mut rng = Rng::new(1);
        let params = random_net(&mut rng, &[4, 6, 2]);
        let x = rng.normal_matrix(3, 5, 1.0);
        assert!(matches!(
            embed_features(&params, &x, None, Modality::Image),
            Err(Error::DimensionMismatch(_))
        ));
        let x = rng.normal_matrix(3, 4, 1.0);
        let bad_mask = vec![Matrix::filled(2, 6, 1.0)];
        assert!(matches!(
            embed_features(&params, &x, Some(&bad_mask), Modality::Image),
            Err(Error::DimensionMismatch(_))
        ));

        let broken = EncoderParams {
            layers: vec![
                Dense {
                    weight: Matrix::zeros(3, 4),
                    bias: vec![0.0; 3],
                },
                Dense {
                    weight: Matrix::zeros(2, 5),
                    bias: vec![0.0; 2],
                },
            ],
            dropout_rate: 0.0,
        };
        assert!(broken.validate().is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let mut rng = Rng::new(21);
        let params = random_net(&mut rng, &[4, 5, 3]);
        let x = rng.normal_matrix(6, 4, 1.0);
        let (_, trace) = embed_features(&params, &x, None, Modality::Image).unwrap();
        let g = backward(&params, &trace, &Matrix::zeros(6, 3)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_kills_radial_gradient() {
        let params = identity_layer(1);
        let x = Matrix::from_rows(&[[2.0]]).unwrap();
        let (out, trace) = embed_features(&params, &x, None, Modality::Image).unwrap();
        assert_eq!(out[(0, 0)], 1.0);
        let g = backward(&params, &trace, &Matrix::filled(1, 1, 1.0)).unwrap();
        assert_eq!(g.layers[0].weight[(0, 0)], 0.0);
    }

    #[test]
    fn trace_mismatch_is_detected() {
        let mut rng = Rng::new(2);
        let a = random_net(&mut rng, &[4, 5, 3]);
        let b = random_net(&mut rng, &[4, 6, 3]);
        let x = rng.normal_matrix(2, 4, 1.0);
        let (_, trace) = embed_features(&a, &x, None, Modality::Image).unwrap();
        assert!(matches!(
            backward(&b, &trace, &Matrix::zeros(2, 3)),
            Err(Error::TraceMismatch(_))
        ));
        assert!(matches!(
            backward(&a, &trace, &Matrix::zeros(3, 3)),
            Err(Error::TraceMismatch(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..3 {
            let mut rng = Rng::new(100 + seed);
            let params = random_net(&mut rng, &[5, 8, 4]);
            let x = rng.normal_matrix(6, 5, 1.0);
            let loss = linear_loss(rng.normal_matrix(6, 4, 1.0));
            let err = gradient_check(&params, EncoderInput::Features(&x), &loss).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");

            let table = rng.normal_matrix(7, 5, 1.0);
            let text =
                TextInput::new(vec![vec![0, 2], vec![3], vec![1, 1, 6], vec![4, 5]], 7).unwrap();
            let loss = linear_loss(rng.normal_matrix(4, 4, 1.0));
            let err = gradient_check(
                &params,
                EncoderInput::Text {
                    table: &table,
                    input: &text,
                },
                &loss,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed} text: {err}");
        }
    }

    #[test]
    fn backward_with_dropout_matches_masked_forward() {
        // Fixed masks make the forward deterministic, so FD applies.
        let mut rng = Rng::new(31);
        let mut params = random_net(&mut rng, &[4, 6, 6, 3]);
        params.dropout_rate = 0.25;
        let x = rng.normal_matrix(5, 4, 1.0);
        let masks = params.sample_masks(&mut rng, 5).unwrap();
        let w = rng.normal_matrix(5, 3, 1.0);
        let (_, trace) = embed_features(&params, &x, Some(&masks), Modality::Image).unwrap();
        let analytic = backward(&params, &trace, &w).unwrap();

        let eval = |p: &EncoderParams| {
            let (e, _) = embed_features(p, &x, Some(&masks), Modality::Image).unwrap();
            e.as_slice()
                .iter()
                .zip(w.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut work = params.clone();
        let h = 1e-5;
        for k in 0..params.layers.len() {
            for idx in 0..params.layers[k].weight.as_slice().len() {
                let orig = params.layers[k].weight.as_slice()[idx];
                work.layers[k].weight.as_mut_slice()[idx] = orig + h;
                let up = eval(&work);
                work.layers[k].weight.as_mut_slice()[idx] = orig - h;
                let down = eval(&work);
                work.layers[k].weight.as_mut_slice()[idx] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = analytic.layers[k].weight.as_slice()[idx];
                assert!((num - ana).abs() / num.abs().max(ana.abs()).max(1e-8) < 1e-6);
            }
        }
    }

    #[test]
    fn fault_injection_is_caught() {
        let mut rng = Rng::new(41);
        let params = random_net(&mut rng, &[4, 5, 3]);
        let x = rng.normal_matrix(4, 4, 1.0);
        let loss = linear_loss(rng.normal_matrix(4, 3, 1.0));
        let mut analytic = analytic_gradients(&params, EncoderInput::Features(&x), &loss).unwrap();
        let numeric =
            numeric_gradients(&params, EncoderInput::Features(&x), &loss, FD_STEP).unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-6);
        analytic.layers[0].weight[(1, 2)] += 1.0;
        assert!(max_relative_error(&analytic, &numeric) > 1e-2);
    }

    #[test]
    fn identity_encoder_has_nothing_to_check() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
        let loss = linear_loss(Matrix::filled(2, 2, 1.0));
        let err = gradient_check(
            &EncoderParams::identity(),
            EncoderInput::Features(&x),
            &loss,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
