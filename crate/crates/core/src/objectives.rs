//! Training objectives and their analytic gradients.
//!
//! Five terms are available: the symmetric cross-modal InfoNCE loss, the
//! cross-modal and in-modal cyclic consistency penalties, the unsupervised
//! dropout-twin sentence loss and the supervised NLI sentence loss. A
//! [`Variant`] decides which terms are active; [`composite_loss`] combines
//! them with their weights.
//!
//! Conventions: InfoNCE terms average over rows (and over the two retrieval
//! directions for the cross-modal term). Cyclic terms operate on raw cosine
//! similarities and are divided by `N²`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, Matrix};

/// Upper clamp of the logit scale, `ln(100)`.
pub const MAX_LOGIT_SCALE: f64 = 4.6052;
pub const MIN_LOGIT_SCALE: f64 = 0.0;
pub const INIT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_TAU_S: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "CLIP")]
    Clip,
    #[serde(rename = "CLIPs")]
    ClipS,
    #[serde(rename = "CLIPn")]
    ClipN,
    #[serde(rename = "CLIPe")]
    ClipE,
    #[serde(rename = "CyCLIP")]
    CyClip,
    #[serde(rename = "CyCLIPs")]
    CyClipS,
    #[serde(rename = "CyCLIPn")]
    CyClipN,
    #[serde(rename = "CyCLIPe")]
    CyClipE,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Clip,
        Variant::ClipS,
        Variant::ClipN,
        Variant::ClipE,
        Variant::CyClip,
        Variant::CyClipS,
        Variant::CyClipN,
        Variant::CyClipE,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Clip => "CLIP",
            Variant::ClipS => "CLIPs",
            Variant::ClipN => "CLIPn",
            Variant::ClipE => "CLIPe",
            Variant::CyClip => "CyCLIP",
            Variant::CyClipS => "CyCLIPs",
            Variant::CyClipN => "CyCLIPn",
            Variant::CyClipE => "CyCLIPe",
        }
    }

    pub fn is_cyclic(self) -> bool {
        matches!(
            self,
            Variant::CyClip | Variant::CyClipS | Variant::CyClipN | Variant::CyClipE
        )
    }

    /// Trains the unsupervised sentence loss (on captions or on an external corpus).
    pub fn uses_unsup_sentences(self) -> bool {
        matches!(
            self,
            Variant::ClipS | Variant::ClipE | Variant::CyClipS | Variant::CyClipE
        )
    }

    pub fn uses_external_sentences(self) -> bool {
        matches!(self, Variant::ClipE | Variant::CyClipE)
    }

    pub fn uses_nli(self) -> bool {
        matches!(self, Variant::ClipN | Variant::CyClipN)
    }

    /// Needs NLI triples on disk: "n" variants for supervision, "e" variants
    /// for their sentence corpus.
    pub fn needs_nli_file(self) -> bool {
        self.uses_nli() || self.uses_external_sentences()
    }

    pub fn active_terms(self) -> Vec<Term> {
        let mut terms = vec![Term::Contrastive];
        if self.is_cyclic() {
            terms.push(Term::CrossCyclic);
            terms.push(Term::InModalCyclic);
        }
        if self.uses_unsup_sentences() {
            terms.push(Term::SentenceUnsup);
        }
        if self.uses_nli() {
            terms.push(Term::SentenceNli);
        }
        terms
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(v) = Variant::ALL.iter().find(|v| v.name() == s) {
            return Ok(*v);
        }
        let base = s.strip_prefix("Cy").unwrap_or(s);
        if base.starts_with("CLIP") && base[4..].contains('s') && base[4..].contains('n') {
            return Err(Error::config(
                "variant",
                format!("{s:?} combines the unsupervised and NLI sentence objectives, which is not supported"),
            ));
        }
        Err(Error::config(
            "variant",
            format!(
                "unknown variant {s:?}; expected one of {}",
                Variant::ALL.map(Variant::name).join(", ")
            ),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    #[serde(rename = "contra")]
    Contrastive,
    #[serde(rename = "c_cyclic")]
    CrossCyclic,
    #[serde(rename = "i_cyclic")]
    InModalCyclic,
    #[serde(rename = "s")]
    SentenceUnsup,
    #[serde(rename = "n")]
    SentenceNli,
}

impl Term {
    pub fn key(self) -> &'static str {
        match self {
            Term::Contrastive => "contra",
            Term::CrossCyclic => "c_cyclic",
            Term::InModalCyclic => "i_cyclic",
            Term::SentenceUnsup => "s",
            Term::SentenceNli => "n",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceCorpus {
    Captions,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    #[serde(default = "defaults::lambda_contra")]
    pub lambda_contra: f64,
    #[serde(default = "defaults::lambda_cyclic")]
    pub lambda_c_cyclic: f64,
    #[serde(default = "defaults::lambda_cyclic")]
    pub lambda_i_cyclic: f64,
    #[serde(default = "defaults::lambda_sentence")]
    pub lambda_s: f64,
    #[serde(default = "defaults::lambda_sentence")]
    pub lambda_n: f64,
    #[serde(default = "defaults::tau_s")]
    pub tau_s: f64,
    /// Derived from the variant when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_corpus: Option<SentenceCorpus>,
}

mod defaults {
    pub fn lambda_contra() -> f64 {
        1.0
    }
    pub fn lambda_cyclic() -> f64 {
        0.25
    }
    pub fn lambda_sentence() -> f64 {
        0.1
    }
    pub fn tau_s() -> f64 {
        super::DEFAULT_TAU_S
    }
}

impl ObjectiveConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            lambda_contra: defaults::lambda_contra(),
            lambda_c_cyclic: defaults::lambda_cyclic(),
            lambda_i_cyclic: defaults::lambda_cyclic(),
            lambda_s: defaults::lambda_sentence(),
            lambda_n: defaults::lambda_sentence(),
            tau_s: defaults::tau_s(),
            sentence_corpus: None,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            sentence_corpus: None,
            ..self.clone()
        }
    }

    pub fn corpus(&self) -> SentenceCorpus {
        self.sentence_corpus
            .unwrap_or(if self.variant.uses_external_sentences() {
                SentenceCorpus::External
            } else {
                SentenceCorpus::Captions
            })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_contra", self.lambda_contra),
            ("lambda_c_cyclic", self.lambda_c_cyclic),
            ("lambda_i_cyclic", self.lambda_i_cyclic),
            ("lambda_s", self.lambda_s),
            ("lambda_n", self.lambda_n),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    name,
                    format!("must be a finite value >= 0, got {v}"),
                ));
            }
        }
        if !(self.tau_s > 0.0 && self.tau_s.is_finite()) {
            return Err(Error::config(
                "tau_s",
                format!("must be > 0, got {}", self.tau_s),
            ));
        }
        let external = self.corpus() == SentenceCorpus::External;
        if external != self.variant.uses_external_sentences() {
            return Err(Error::config(
                "sentence_corpus",
                format!(
                    "{:?} corpus is inconsistent with variant {}",
                    self.corpus(),
                    self.variant
                ),
            ));
        }
        Ok(())
    }

    /// Weight of `term` under this variant; inactive terms weigh 0.
    pub fn weight(&self, term: Term) -> f64 {
        if !self.variant.active_terms().contains(&term) {
            return 0.0;
        }
        match term {
            Term::Contrastive => self.lambda_contra,
            Term::CrossCyclic => self.lambda_c_cyclic,
            Term::InModalCyclic => self.lambda_i_cyclic,
            Term::SentenceUnsup => self.lambda_s,
            Term::SentenceNli => self.lambda_n,
        }
    }
}

/// Trainable log inverse temperature: logits are `exp(value) · cosine`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitScale {
    pub value: f64,
    pub trainable: bool,
}

impl Default for LogitScale {
    fn default() -> Self {
        Self {
            value: (1.0 / INIT_TEMPERATURE).ln(),
            trainable: true,
        }
    }
}

impl LogitScale {
    pub fn fixed(value: f64) -> Self {
        Self {
            value,
            trainable: false,
        }
    }

    pub fn clamp(&mut self) {
        self.value = self.value.clamp(MIN_LOGIT_SCALE, MAX_LOGIT_SCALE);
    }

    pub fn multiplier(&self) -> f64 {
        self.value.exp()
    }
}

/// A loss value with gradients w.r.t. each matrix argument, in argument order.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grads: Vec<Matrix>,
    pub grad_logit_scale: Option<f64>,
}

fn same_shape(name: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "{name}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

fn min_batch(n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(Error::BatchTooSmall { got: n, min });
    }
    Ok(())
}

/// Cross-entropy of each row of `logits` against target column `targets[i]`,
/// averaged over rows. Returns the value and `∂/∂logits`.
pub fn cross_entropy_rows(logits: &Matrix, targets: &[usize]) -> (f64, Matrix) {
    let n = logits.rows();
    let logp = log_softmax_rows(logits);
    let mut grad = logp.map(f64::exp);
    let mut value = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        value -= logp[(i, t)];
        grad[(i, t)] -= 1.0;
    }
    grad.scale(1.0 / n as f64);
    (value / n as f64, grad)
}

/// Symmetric InfoNCE on a square logit matrix whose diagonal holds the
/// positives: the mean of the row-wise and column-wise cross-entropies.
pub fn symmetric_infonce_from_logits(logits: &Matrix) -> (f64, Matrix) {
    let n = logits.rows();
    let diag: Vec<usize> = (0..n).collect();
    let (row_loss, row_grad) = cross_entropy_rows(logits, &diag);
    let (col_loss, col_grad) = cross_entropy_rows(&logits.transpose(), &diag);
    let mut grad = row_grad;
    grad.add_assign(&col_grad.transpose()).expect("square");
    grad.scale(0.5);
    (0.5 * (row_loss + col_loss), grad)
}

/// Cross-modal InfoNCE with logits `exp(scale) · ⟨img_j, txt_k⟩`.
pub fn contrastive_loss(img: &Matrix, txt: &Matrix, scale: &LogitScale) -> Result<LossTerm> {
    same_shape("contrastive_loss", img, txt)?;
    min_batch(img.rows(), 2)?;
    let sim = img.matmul_t(txt)?;
    let s = scale.multiplier();
    let logits = sim.scaled(s);
    let (value, g_logits) = symmetric_infonce_from_logits(&logits);
    let g_sim = g_logits.scaled(s);
    let grad_img = g_sim.matmul(txt)?;
    let grad_txt = g_sim.t_matmul(img)?;
    let grad_scale: f64 = g_logits
        .as_slice()
        .iter()
        .zip(logits.as_slice())
        .map(|(g, z)| g * z)
        .sum();
    Ok(LossTerm {
        value,
        grads: vec![grad_img, grad_txt],
        grad_logit_scale: Some(if scale.trainable { grad_scale } else { 0.0 }),
    })
}

/// `(1/N²) Σ_{j,k} (⟨I_j,T_k⟩ − ⟨I_k,T_j⟩)²`.
pub fn cross_cyclic_loss(img: &Matrix, txt: &Matrix) -> Result<LossTerm> {
    same_shape("cross_cyclic_loss", img, txt)?;
    let n = img.rows();
    min_batch(n, 1)?;
    let sim = img.matmul_t(txt)?;
    let mut diff = sim.clone();
    diff.add_scaled(&sim.transpose(), -1.0)?;
    let n2 = (n * n) as f64;
    let value = diff.frobenius_sq() / n2;
    // diff is antisymmetric, so ∂/∂S = 2(D − Dᵀ)/N² = 4D/N².
    let g_sim = diff.scaled(4.0 / n2);
    Ok(LossTerm {
        value,
        grads: vec![g_sim.matmul(txt)?, g_sim.t_matmul(img)?],
        grad_logit_scale: None,
    })
}

/// `(1/N²) Σ_{j,k} (⟨I_j,I_k⟩ − ⟨T_k,T_j⟩)²`.
pub fn in_modal_cyclic_loss(img: &Matrix, txt: &Matrix) -> Result<LossTerm> {
    same_shape("in_modal_cyclic_loss", img, txt)?;
    let n = img.rows();
    min_batch(n, 1)?;
    let mut diff = img.matmul_t(img)?;
    diff.add_scaled(&txt.matmul_t(txt)?, -1.0)?;
    let n2 = (n * n) as f64;
    let value = diff.frobenius_sq() / n2;
    // diff is symmetric: ∂/∂I = 4 E I / N², ∂/∂T = −4 E T / N².
    let grad_img = diff.matmul(img)?.scaled(4.0 / n2);
    let grad_txt = diff.matmul(txt)?.scaled(-4.0 / n2);
    Ok(LossTerm {
        value,
        grads: vec![grad_img, grad_txt],
        grad_logit_scale: None,
    })
}

/// Unsupervised sentence loss: row `j` of `t` must pick row `j` of `t_plus`
/// among all rows of `t_plus`, logits `⟨t_j, t⁺_k⟩ / τ`.
pub fn simcse_unsup_loss(t: &Matrix, t_plus: &Matrix, tau_s: f64) -> Result<LossTerm> {
    same_shape("simcse_unsup_loss", t, t_plus)?;
    min_batch(t.rows(), 2)?;
    let logits = t.matmul_t(t_plus)?.scaled(1.0 / tau_s);
    let targets: Vec<usize> = (0..t.rows()).collect();
    let (value, g_logits) = cross_entropy_rows(&logits, &targets);
    let g_sim = g_logits.scaled(1.0 / tau_s);
    Ok(LossTerm {
        value,
        grads: vec![g_sim.matmul(t_plus)?, g_sim.t_matmul(t)?],
        grad_logit_scale: None,
    })
}

/// Supervised NLI loss: premise `j` must pick entailment `j` among all
/// entailments and all contradictions of the batch.
pub fn nli_sup_loss(
    premise: &Matrix,
    entail: &Matrix,
    contra: &Matrix,
    tau_s: f64,
) -> Result<LossTerm> {
    same_shape("nli_sup_loss premise/entailment", premise, entail)?;
    same_shape("nli_sup_loss premise/contradiction", premise, contra)?;
    let n = premise.rows();
    min_batch(n, 1)?;
    let se = premise.matmul_t(entail)?;
    let sc = premise.matmul_t(contra)?;
    let mut logits = Matrix::zeros(n, 2 * n);
    for i in 0..n {
        let row = logits.row_mut(i);
        row[..n].copy_from_slice(se.row(i));
        row[n..].copy_from_slice(sc.row(i));
    }
    logits.scale(1.0 / tau_s);
    let targets: Vec<usize> = (0..n).collect();
    let (value, g_logits) = cross_entropy_rows(&logits, &targets);
    let mut g_e = Matrix::zeros(n, n);
    let mut g_c = Matrix::zeros(n, n);
    for i in 0..n {
        let row = g_logits.row(i);
        g_e.row_mut(i).copy_from_slice(&row[..n]);
        g_c.row_mut(i).copy_from_slice(&row[n..]);
    }
    g_e.scale(1.0 / tau_s);
    g_c.scale(1.0 / tau_s);
    let mut grad_p = g_e.matmul(entail)?;
    grad_p.add_assign(&g_c.matmul(contra)?)?;
    Ok(LossTerm {
        value,
        grads: vec![grad_p, g_e.t_matmul(premise)?, g_c.t_matmul(premise)?],
        grad_logit_scale: None,
    })
}

/// Dropout-twin views of an external sentence corpus.
#[derive(Clone, Copy, Debug)]
pub struct SentenceViews<'a> {
    pub anchor: &'a Matrix,
    pub positive: &'a Matrix,
}

#[derive(Clone, Copy, Debug)]
pub struct NliViews<'a> {
    pub premise: &'a Matrix,
    pub entail: &'a Matrix,
    pub contra: &'a Matrix,
}

/// Embeddings available in one training step. Which ones are required
/// depends on the variant.
#[derive(Clone, Copy, Debug)]
pub struct CompositeInputs<'a> {
    pub img: &'a Matrix,
    pub txt: &'a Matrix,
    /// Second dropout view of `txt` ("s" variants).
    pub txt_plus: Option<&'a Matrix>,
    /// External-corpus twin views ("e" variants).
    pub sentences: Option<SentenceViews<'a>>,
    /// NLI triples ("n" variants).
    pub nli: Option<NliViews<'a>>,
}

impl<'a> CompositeInputs<'a> {
    pub fn new(img: &'a Matrix, txt: &'a Matrix) -> Self {
        Self {
            img,
            txt,
            txt_plus: None,
            sentences: None,
            nli: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TermValue {
    pub term: Term,
    /// Unweighted value.
    pub value: f64,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct CompositeLoss {
    pub value: f64,
    pub breakdown: Vec<TermValue>,
    pub grad_img: Matrix,
    pub grad_txt: Matrix,
    pub grad_txt_plus: Option<Matrix>,
    /// Gradients w.r.t. (anchor, positive) of the external sentence views.
    pub grad_sentences: Option<(Matrix, Matrix)>,
    /// Gradients w.r.t. (premise, entailment, contradiction).
    pub grad_nli: Option<[Matrix; 3]>,
    pub grad_logit_scale: f64,
    /// Inputs that were supplied but ignored by the variant.
    pub warnings: Vec<String>,
}

impl CompositeLoss {
    pub fn term(&self, term: Term) -> Option<f64> {
        self.breakdown
            .iter()
            .find(|t| t.term == term)
            .map(|t| t.value)
    }
}

/// Weighted sum of the variant's active terms, evaluated in a fixed order.
pub fn composite_loss(
    config: &ObjectiveConfig,
    scale: &LogitScale,
    inputs: &CompositeInputs<'_>,
) -> Result<CompositeLoss> {
    config.validate()?;
    let v = config.variant;
    let mut warnings = Vec::new();

    let wants_twin = v.uses_unsup_sentences() && !v.uses_external_sentences();
    if wants_twin && inputs.txt_plus.is_none() {
        return Err(Error::MissingInput(format!(
            "{v} needs a second dropout view of the captions (txt_plus)"
        )));
    }
    if v.uses_external_sentences() && inputs.sentences.is_none() {
        return Err(Error::MissingInput(format!(
            "{v} needs external sentence views"
        )));
    }
    if v.uses_nli() && inputs.nli.is_none() {
        return Err(Error::MissingInput(format!(
            "{v} needs an NLI triple batch"
        )));
    }
    if !wants_twin && inputs.txt_plus.is_some() {
        warnings.push(format!("txt_plus supplied but unused by {v}"));
    }
    if !v.uses_external_sentences() && inputs.sentences.is_some() {
        warnings.push(format!(
            "external sentence views supplied but unused by {v}"
        ));
    }
    if !v.uses_nli() && inputs.nli.is_some() {
        warnings.push(format!("NLI batch supplied but unused by {v}"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let (rows, cols) = inputs.img.shape();
    let mut out = CompositeLoss {
        value: 0.0,
        breakdown: Vec::new(),
        grad_img: Matrix::zeros(rows, cols),
        grad_txt: Matrix::zeros(inputs.txt.rows(), inputs.txt.cols()),
        grad_txt_plus: None,
        grad_sentences: None,
        grad_nli: None,
        grad_logit_scale: 0.0,
        warnings,
    };

    for term in v.active_terms() {
        let w = config.weight(term);
        let lt = match term {
            Term::Contrastive => {
                let lt = contrastive_loss(inputs.img, inputs.txt, scale)?;
                out.grad_logit_scale += w * lt.grad_logit_scale.unwrap_or(0.0);
                out.grad_img.add_scaled(&lt.grads[0], w)?;
                out.grad_txt.add_scaled(&lt.grads[1], w)?;
                lt
            }
            Term::CrossCyclic => {
                let lt = cross_cyclic_loss(inputs.img, inputs.txt)?;
                out.grad_img.add_scaled(&lt.grads[0], w)?;
                out.grad_txt.add_scaled(&lt.grads[1], w)?;
                lt
            }
            Term::InModalCyclic => {
                let lt = in_modal_cyclic_loss(inputs.img, inputs.txt)?;
                out.grad_img.add_scaled(&lt.grads[0], w)?;
                out.grad_txt.add_scaled(&lt.grads[1], w)?;
                lt
            }
            Term::SentenceUnsup => match inputs.sentences.filter(|_| v.uses_external_sentences()) {
                Some(views) => {
                    let lt = simcse_unsup_loss(views.anchor, views.positive, config.tau_s)?;
                    out.grad_sentences = Some((lt.grads[0].scaled(w), lt.grads[1].scaled(w)));
                    lt
                }
                None => {
                    let plus = inputs.txt_plus.expect("checked above");
                    let lt = simcse_unsup_loss(inputs.txt, plus, config.tau_s)?;
                    out.grad_txt.add_scaled(&lt.grads[0], w)?;
                    out.grad_txt_plus = Some(lt.grads[1].scaled(w));
                    lt
                }
            },
            Term::SentenceNli => {
                let nli = inputs.nli.expect("checked above");
                let lt = nli_sup_loss(nli.premise, nli.entail, nli.contra, config.tau_s)?;
                out.grad_nli = Some([
                    lt.grads[0].scaled(w),
                    lt.grads[1].scaled(w),
                    lt.grads[2].scaled(w),
                ]);
                lt
            }
        };
        out.value += w * lt.value;
        out.breakdown.push(TermValue {
            term,
            value: lt.value,
            weight: w,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    const LN_1P_EM1: f64 = 0.313_261_687_518_222_8; // ln(1 + e^-1)
    const LN_1P_E: f64 = 1.313_261_687_518_222_8; // ln(1 + e)

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn fixed(value: f64) -> LogitScale {
        LogitScale {
            value,
            trainable: true,
        }
    }

    #[test]
    fn logit_scale_defaults() {
        let s = LogitScale::default();
        assert!((s.value - 2.659_260_036_932_778_4).abs() < 1e-12);
        let mut s = fixed(9.0);
        s.clamp();
        assert_eq!(s.value, MAX_LOGIT_SCALE);
        let mut s = fixed(-1.0);
        s.clamp();
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn contrastive_examples() {
        let eye = Matrix::identity(2);
        let aligned = contrastive_loss(&eye, &eye, &fixed(0.0)).unwrap();
        assert!((aligned.value - LN_1P_EM1).abs() < 1e-12);

        let crossed = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let l = contrastive_loss(&eye, &crossed, &fixed(0.0)).unwrap();
        assert!((l.value - LN_1P_E).abs() < 1e-12);

        let one = m(&[&[1.0, 0.0]]);
        assert!(matches!(
            contrastive_loss(&one, &one, &fixed(0.0)),
            Err(Error::BatchTooSmall { got: 1, .. })
        ));
        let three = Matrix::identity(3);
        assert!(matches!(
            contrastive_loss(&eye, &three, &fixed(0.0)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn contrastive_scale_matches_prescaled_logits() {
        let mut rng = Rng::new(3);
        let a = rng.unit_rows(5, 4);
        let b = rng.unit_rows(5, 4);
        let l = 1.7;
        let via_scale = contrastive_loss(&a, &b, &fixed(l)).unwrap().value;
        let logits = a.matmul_t(&b).unwrap().scaled(l.exp());
        let (direct, _) = symmetric_infonce_from_logits(&logits);
        assert!((via_scale - direct).abs() < 1e-12);
    }

    #[test]
    fn frozen_scale_has_no_gradient() {
        let mut rng = Rng::new(4);
        let a = rng.unit_rows(3, 4);
        let b = rng.unit_rows(3, 4);
        let lt = contrastive_loss(&a, &b, &LogitScale::fixed(1.0)).unwrap();
        assert_eq!(lt.grad_logit_scale, Some(0.0));
    }

    #[test]
    fn cross_cyclic_examples() {
        let mut rng = Rng::new(5);
        let a = rng.unit_rows(4, 3);
        assert_eq!(cross_cyclic_loss(&a, &a).unwrap().value, 0.0);

        // img = (e1, e2), txt = (e3, e1): S = [[0,1],[0,0]].
        let img = m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let txt = m(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]);
        let s = img.matmul_t(&txt).unwrap();
        assert_eq!(s, m(&[&[0.0, 1.0], &[0.0, 0.0]]));
        assert!((cross_cyclic_loss(&img, &txt).unwrap().value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn in_modal_cyclic_examples() {
        let mut rng = Rng::new(6);
        let a = rng.unit_rows(4, 3);
        assert_eq!(in_modal_cyclic_loss(&a, &a).unwrap().value, 0.0);

        // Any orthogonal map of txt leaves the Gram matrix unchanged.
        let q = random_orthogonal(&mut rng, 3);
        let rotated = a.matmul(&q).unwrap();
        assert!(in_modal_cyclic_loss(&rotated, &a).unwrap().value < 1e-28);

        let img = Matrix::identity(2);
        let txt = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert!((in_modal_cyclic_loss(&img, &txt).unwrap().value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn simcse_examples() {
        let eye = Matrix::identity(2);
        let v = simcse_unsup_loss(&eye, &eye, 0.05).unwrap().value;
        let expected = (-20.0f64).exp().ln_1p();
        assert!((v - expected).abs() < 1e-15, "{v} vs {expected}");
        assert!((v - 2.06e-9).abs() < 1e-11);

        let collapsed = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let v = simcse_unsup_loss(&collapsed, &collapsed, 0.05)
            .unwrap()
            .value;
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

        let one = m(&[&[1.0, 0.0]]);
        assert!(matches!(
            simcse_unsup_loss(&one, &one, 0.05),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn nli_examples() {
        let p = m(&[&[1.0, 0.0]]);
        let orth = m(&[&[0.0, 1.0]]);
        let v = nli_sup_loss(&p, &p, &orth, 0.05).unwrap().value;
        assert!((v - (-20.0f64).exp().ln_1p()).abs() < 1e-15);

        let v = nli_sup_loss(&p, &orth, &p, 0.05).unwrap().value;
        assert!((v - 20.0f64.exp().ln_1p()).abs() < 1e-12);
        assert!((v - 20.0).abs() < 1e-8);

        let bad = m(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(
            nli_sup_loss(&p, &p, &bad, 0.05),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!(matches!(
            "CyCLIPsn".parse::<Variant>(),
            Err(Error::InvalidConfig { .. })
        ));
        assert!(matches!(
            "CLIPns".parse::<Variant>(),
            Err(Error::InvalidConfig { .. })
        ));
        assert!("clip".parse::<Variant>().is_err());
    }

    #[test]
    fn active_terms_follow_the_table() {
        use Term::*;
        assert_eq!(Variant::Clip.active_terms(), vec![Contrastive]);
        assert_eq!(
            Variant::ClipS.active_terms(),
            vec![Contrastive, SentenceUnsup]
        );
        assert_eq!(
            Variant::ClipN.active_terms(),
            vec![Contrastive, SentenceNli]
        );
        assert_eq!(
            Variant::ClipE.active_terms(),
            vec![Contrastive, SentenceUnsup]
        );
        assert_eq!(
            Variant::CyClip.active_terms(),
            vec![Contrastive, CrossCyclic, InModalCyclic]
        );
        assert_eq!(
            Variant::CyClipS.active_terms(),
            vec![Contrastive, CrossCyclic, InModalCyclic, SentenceUnsup]
        );
        assert_eq!(
            Variant::CyClipN.active_terms(),
            vec![Contrastive, CrossCyclic, InModalCyclic, SentenceNli]
        );
        let cfg = ObjectiveConfig::new(Variant::Clip);
        assert_eq!(cfg.weight(Term::CrossCyclic), 0.0);
        assert_eq!(cfg.weight(Term::Contrastive), 1.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ObjectiveConfig::new(Variant::ClipS);
        cfg.validate().unwrap();
        cfg.sentence_corpus = Some(SentenceCorpus::External);
        assert!(cfg.validate().is_err());
        let mut cfg = ObjectiveConfig::new(Variant::CyClipE);
        assert_eq!(cfg.corpus(), SentenceCorpus::External);
        cfg.tau_s = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ObjectiveConfig::new(Variant::Clip);
        cfg.lambda_n = -1.0;
        assert!(cfg.validate().is_err());

        let parsed: ObjectiveConfig = serde_json::from_str(r#"{"variant":"CyCLIPn"}"#).unwrap();
        assert_eq!(parsed, ObjectiveConfig::new(Variant::CyClipN));
    }

    #[test]
    fn composite_requires_inputs() {
        let eye = Matrix::identity(2);
        let scale = LogitScale::default();
        let inputs = CompositeInputs::new(&eye, &eye);
        for (v, needle) in [
            (Variant::ClipS, "txt_plus"),
            (Variant::CyClipE, "external"),
            (Variant::ClipN, "NLI"),
        ] {
            match composite_loss(&ObjectiveConfig::new(v), &scale, &inputs) {
                Err(Error::MissingInput(msg)) => assert!(msg.contains(needle), "{msg}"),
                other => panic!("{v}: expected MissingInput, got {other:?}"),
            }
        }

        let mut extra = inputs;
        extra.txt_plus = Some(&eye);
        let out = composite_loss(&ObjectiveConfig::new(Variant::Clip), &scale, &extra).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(out.grad_txt_plus.is_none());
    }

    #[test]
    fn composite_clip_is_the_contrastive_term() {
        let mut rng = Rng::new(8);
        let a = rng.unit_rows(6, 5);
        let b = rng.unit_rows(6, 5);
        let scale = LogitScale::default();
        let out = composite_loss(
            &ObjectiveConfig::new(Variant::Clip),
            &scale,
            &CompositeInputs::new(&a, &b),
        )
        .unwrap();
        let direct = contrastive_loss(&a, &b, &scale).unwrap();
        assert_eq!(out.value, direct.value);
        assert_eq!(out.breakdown.len(), 1);
    }

    #[test]
    fn cyclic_terms_vanish_at_alignment() {
        let mut rng = Rng::new(9);
        let a = rng.unit_rows(5, 4);
        let scale = LogitScale::default();
        let out = composite_loss(
            &ObjectiveConfig::new(Variant::CyClip),
            &scale,
            &CompositeInputs::new(&a, &a),
        )
        .unwrap();
        assert_eq!(out.term(Term::CrossCyclic), Some(0.0));
        assert_eq!(out.term(Term::InModalCyclic), Some(0.0));
        assert_eq!(out.value, contrastive_loss(&a, &a, &scale).unwrap().value);
    }

    pub(crate) fn random_orthogonal(rng: &mut Rng, d: usize) -> Matrix {
        // Gram-Schmidt on a Gaussian matrix.
        let g = rng.normal_matrix(d, d, 1.0);
        let mut q = Matrix::zeros(d, d);
        for i in 0..d {
            let mut v = g.row(i).to_vec();
            for j in 0..i {
                let p: f64 = v.iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
                for (vk, qk) in v.iter_mut().zip(q.row(j)) {
                    *vk -= p * qk;
                }
            }
            let n = crate::tensor::norm(&v);
            for (dst, vk) in q.row_mut(i).iter_mut().zip(&v) {
                *dst = vk / n;
            }
        }
        q
    }
}
