//! Independent reference implementations shared by the integration tests.
//! Everything here is written with plain loops so it does not share code
//! paths with the library.

#![allow(dead_code)]

use sentalign::encoders::{embed_features, embed_text, EncoderParams, Modality, TextInput};
use sentalign::objectives::{
    contrastive_loss, cross_cyclic_loss, in_modal_cyclic_loss, nli_sup_loss, simcse_unsup_loss,
    LogitScale, DEFAULT_TAU_S,
};
use sentalign::tensor::{Matrix, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const BATCH_SIZES: [usize; 3] = [2, 5, 8];
pub const DIMS: [usize; 2] = [4, 16];

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` over a whole gradient tensor.
pub fn tensor_rel_err(a: &[f64], n: &[f64]) -> f64 {
    assert_eq!(a.len(), n.len());
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    dot(&diff, &diff).sqrt() / dot(a, a).sqrt().max(dot(n, n).sqrt()).max(1e-8)
}

/// Worst errors of a set of gradient tensors: the tensor-level relative error
/// and, for reporting, the entry-level one.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradError {
    pub tensor: f64,
    pub entry: f64,
}

impl GradError {
    pub fn of(a: &[f64], n: &[f64]) -> Self {
        Self {
            tensor: tensor_rel_err(a, n),
            entry: max_rel_err(a, n),
        }
    }

    pub fn max(self, other: Self) -> Self {
        Self {
            tensor: self.tensor.max(other.tensor),
            entry: self.entry.max(other.entry),
        }
    }
}

pub fn max_rel_err(a: &[f64], n: &[f64]) -> f64 {
    assert_eq!(a.len(), n.len());
    a.iter()
        .zip(n)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Central differences of `f` w.r.t. every entry of `x`.
pub fn central_diff(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + FD_STEP;
            let up = f(&work);
            work[i] = x[i] - FD_STEP;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn with_data(m: &Matrix, data: &[f64]) -> Matrix {
    Matrix::from_vec(m.rows(), m.cols(), data.to_vec()).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Row norm used for the sentence-loss gradient checks.
pub const SENTENCE_ROW_SCALE: f64 = 0.25;

pub fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Matrix {
    let mut m = rng.normal_matrix(n, d, 1.0);
    for i in 0..n {
        let norm = dot(m.row(i), m.row(i)).sqrt();
        for v in m.row_mut(i) {
            *v /= norm;
        }
    }
    m
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE over `exp(scale)·⟨I_j, T_k⟩`, written from the
/// definition.
pub fn naive_contrastive(img: &Matrix, txt: &Matrix, scale: f64) -> f64 {
    let n = img.rows();
    let s = scale.exp();
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for j in 0..n {
        let row: Vec<f64> = (0..n).map(|k| s * dot(img.row(j), txt.row(k))).collect();
        let col: Vec<f64> = (0..n).map(|k| s * dot(img.row(k), txt.row(j))).collect();
        i2t += log_sum_exp(&row) - row[j];
        t2i += log_sum_exp(&col) - col[j];
    }
    (i2t + t2i) / (2.0 * n as f64)
}

/// `(1/N²) Σ_{j,k} (⟨I_j,T_k⟩ − ⟨I_k,T_j⟩)²`.
pub fn naive_cross_cyclic(img: &Matrix, txt: &Matrix) -> f64 {
    let n = img.rows();
    let mut s = 0.0;
    for j in 0..n {
        for k in 0..n {
            let d = dot(img.row(j), txt.row(k)) - dot(img.row(k), txt.row(j));
            s += d * d;
        }
    }
    s / (n * n) as f64
}

/// `(1/N²) Σ_{j,k} (⟨I_j,I_k⟩ − ⟨T_k,T_j⟩)²`.
pub fn naive_in_modal_cyclic(img: &Matrix, txt: &Matrix) -> f64 {
    let n = img.rows();
    let mut s = 0.0;
    for j in 0..n {
        for k in 0..n {
            let d = dot(img.row(j), img.row(k)) - dot(txt.row(k), txt.row(j));
            s += d * d;
        }
    }
    s / (n * n) as f64
}

/// Row-wise cross-entropy with `⟨t_j, t⁺_k⟩/τ` logits and diagonal targets.
pub fn naive_simcse(t: &Matrix, t_plus: &Matrix, tau: f64) -> f64 {
    let n = t.rows();
    let mut s = 0.0;
    for j in 0..n {
        let row: Vec<f64> = (0..n).map(|k| dot(t.row(j), t_plus.row(k)) / tau).collect();
        s += log_sum_exp(&row) - row[j];
    }
    s / n as f64
}

/// Premise `j` against all entailments and contradictions, target `j`.
pub fn naive_nli(p: &Matrix, e: &Matrix, c: &Matrix, tau: f64) -> f64 {
    let n = p.rows();
    let mut s = 0.0;
    for j in 0..n {
        let mut row: Vec<f64> = (0..n).map(|k| dot(p.row(j), e.row(k)) / tau).collect();
        row.extend((0..n).map(|k| dot(p.row(j), c.row(k)) / tau));
        s += log_sum_exp(&row) - row[j];
    }
    s / n as f64
}

/// Checks every input gradient (and the logit-scale gradient for the
/// contrastive term) of one loss against central differences of its
/// reference formula. Returns the worst relative error.
fn check_inputs(
    inputs: &[Matrix],
    analytic: &[Matrix],
    reference: impl Fn(&[Matrix]) -> f64,
) -> GradError {
    let mut worst = GradError::default();
    for (slot, (x, g)) in inputs.iter().zip(analytic).enumerate() {
        let numeric = central_diff(x.as_slice(), |data| {
            let mut args = inputs.to_vec();
            args[slot] = with_data(x, data);
            reference(&args)
        });
        worst = worst.max(GradError::of(g.as_slice(), &numeric));
    }
    worst
}

/// Worst relative error per loss for one `(seed, N, d)` configuration.
pub fn loss_gradient_errors(seed: u64, n: usize, d: usize) -> Vec<(&'static str, GradError)> {
    let mut rng = Rng::new(1000 + seed);
    let img = unit_rows(&mut rng, n, d);
    let txt = unit_rows(&mut rng, n, d);
    let third = unit_rows(&mut rng, n, d);
    let scale_value = 1.0 + rng.uniform();
    let scale = LogitScale {
        value: scale_value,
        trainable: true,
    };
    let tau = DEFAULT_TAU_S;
    let mut out = Vec::new();

    let lt = contrastive_loss(&img, &txt, &scale).unwrap();
    let mut e = check_inputs(&[img.clone(), txt.clone()], &lt.grads, |a| {
        naive_contrastive(&a[0], &a[1], scale_value)
    });
    let g_scale = central_diff(&[scale_value], |s| naive_contrastive(&img, &txt, s[0]));
    e = e.max(GradError::of(&[lt.grad_logit_scale.unwrap()], &g_scale));
    out.push(("contra", e));

    let lt = cross_cyclic_loss(&img, &txt).unwrap();
    out.push((
        "c_cyclic",
        check_inputs(&[img.clone(), txt.clone()], &lt.grads, |a| {
            naive_cross_cyclic(&a[0], &a[1])
        }),
    ));

    let lt = in_modal_cyclic_loss(&img, &txt).unwrap();
    out.push((
        "i_cyclic",
        check_inputs(&[img.clone(), txt.clone()], &lt.grads, |a| {
            naive_in_modal_cyclic(&a[0], &a[1])
        }),
    ));

    // At unit norm and tau_s = 0.05 logits span +-20, so small batches can
    // saturate to a loss near 1e-8 where central differences are dominated by
    // round-off. Shrinking the rows keeps logits in the same range as the
    // contrastive check.
    let (img, txt, third) = (
        img.scaled(SENTENCE_ROW_SCALE),
        txt.scaled(SENTENCE_ROW_SCALE),
        third.scaled(SENTENCE_ROW_SCALE),
    );
    let lt = simcse_unsup_loss(&txt, &third, tau).unwrap();
    out.push((
        "s",
        check_inputs(&[txt.clone(), third.clone()], &lt.grads, |a| {
            naive_simcse(&a[0], &a[1], tau)
        }),
    ));

    let lt = nli_sup_loss(&img, &txt, &third, tau).unwrap();
    out.push((
        "n",
        check_inputs(&[img.clone(), txt.clone(), third.clone()], &lt.grads, |a| {
            naive_nli(&a[0], &a[1], &a[2], tau)
        }),
    ));
    out
}

/// `Σ W∘Y` for a fixed random weighting `W`; its gradient w.r.t. `Y` is `W`.
fn weighted_sum(w: &Matrix, y: &Matrix) -> f64 {
    dot(w.as_slice(), y.as_slice())
}

fn flatten(params: &EncoderParams) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &params.layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out
}

fn unflatten(template: &EncoderParams, data: &[f64]) -> EncoderParams {
    let mut p = template.clone();
    let mut pos = 0;
    for l in &mut p.layers {
        let w = l.weight.as_mut_slice();
        w.copy_from_slice(&data[pos..pos + w.len()]);
        pos += w.len();
        let b = l.bias.len();
        l.bias.copy_from_slice(&data[pos..pos + b]);
        pos += b;
    }
    p
}

/// Per-tensor comparison of analytic layer gradients with numeric ones laid
/// out in the same structure.
fn layer_errors(analytic: &[sentalign::encoders::Dense], numeric: &EncoderParams) -> GradError {
    let mut worst = GradError::default();
    for (a, n) in analytic.iter().zip(&numeric.layers) {
        worst = worst
            .max(GradError::of(a.weight.as_slice(), n.weight.as_slice()))
            .max(GradError::of(&a.bias, &n.bias));
    }
    worst
}

/// Worst relative error of the text and feature encoders' backward passes
/// for one `(seed, N, d)` configuration, dropout disabled.
pub fn encoder_gradient_errors(seed: u64, n: usize, d: usize) -> Vec<(&'static str, GradError)> {
    use sentalign::encoders::backward;
    let mut rng = Rng::new(2000 + seed);
    let (vocab, token_dim, feat_dim, hidden) = (10, 5, 6, 8);
    let w = rng.normal_matrix(n, d, 1.0);

    let table = rng.normal_matrix(vocab, token_dim, 1.0);
    let ids = (0..n)
        .map(|_| (0..1 + rng.below(4)).map(|_| rng.below(vocab)).collect())
        .collect();
    let text_in = TextInput::new(ids, vocab).unwrap();
    let text = EncoderParams::init(&[token_dim, hidden, d], 0.1, &mut rng).unwrap();
    let (y, trace) = embed_text(&text, &table, &text_in, None).unwrap();
    let g = backward(&text, &trace, &w).unwrap();
    let numeric = central_diff(&flatten(&text), |data| {
        let p = unflatten(&text, data);
        weighted_sum(
            &w,
            embed_text(&p, &table, &text_in, None).unwrap().0.matrix(),
        )
    });
    let numeric_table = central_diff(table.as_slice(), |data| {
        let t = with_data(&table, data);
        weighted_sum(
            &w,
            embed_text(&text, &t, &text_in, None).unwrap().0.matrix(),
        )
    });
    assert_eq!(y.len(), n);
    let text_err = layer_errors(&g.layers, &unflatten(&text, &numeric)).max(GradError::of(
        g.table.as_ref().unwrap().as_slice(),
        &numeric_table,
    ));

    let features = rng.normal_matrix(n, feat_dim, 1.0);
    let other = EncoderParams::init(&[feat_dim, hidden, d], 0.0, &mut rng).unwrap();
    let (_, trace) = embed_features(&other, &features, None, Modality::Image).unwrap();
    let g = backward(&other, &trace, &w).unwrap();
    let numeric = central_diff(&flatten(&other), |data| {
        let p = unflatten(&other, data);
        weighted_sum(
            &w,
            embed_features(&p, &features, None, Modality::Image)
                .unwrap()
                .0
                .matrix(),
        )
    });
    let other_err = layer_errors(&g.layers, &unflatten(&other, &numeric));
    vec![("text_encoder", text_err), ("feature_encoder", other_err)]
}
