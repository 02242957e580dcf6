//! Synthetic paired datasets, NLI triples, prompt templates and the
//! vocabulary that ties captions to token ids.
//!
//! Generated captions are bags of tokens. Each class owns a band of tokens
//! whose first entry (the anchor) is the class label itself, so prompts like
//! `"a photo of a {label}"` land on a token the text encoder has seen. The
//! remaining band tokens and the shared filler tokens are picked according
//! to the item's latent offset from its class center, which makes captions
//! item-specific and not just class-specific.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_atomic, write_jsonl};
use crate::tensor::{dot, l2_normalize_rows, Matrix, Rng};

/// Separates an item key from a caption index in record ids (`item#k`).
pub const CAPTION_SEP: char = '#';

/// Sharpness of token selection from latent offsets.
const TOKEN_SHARPNESS: f64 = 12.0;

const LABEL_WORDS: [&str; 10] = [
    "plane", "car", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedRecord {
    pub id: String,
    pub caption: String,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
}

impl PairedRecord {
    /// Key of the underlying item; captions of one item share it.
    pub fn item_key(&self) -> &str {
        item_key(&self.id)
    }
}

pub fn item_key(id: &str) -> &str {
    id.split(CAPTION_SEP).next().unwrap_or(id)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NliRecord {
    pub premise: String,
    pub entailment: String,
    pub contradiction: String,
}

impl NliRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("premise", &self.premise),
            ("entailment", &self.entailment),
            ("contradiction", &self.contradiction),
        ] {
            if s.trim().is_empty() {
                return Err(Error::EmptyInput(format!("NLI {name} is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub n_classes: usize,
    pub pairs_per_class: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub caption_len: usize,
    pub noise_sigma: f64,
    pub captions_per_item: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            pairs_per_class: 64,
            latent_dim: 16,
            feature_dim: 32,
            vocab_size: 128,
            caption_len: 8,
            noise_sigma: 0.5,
            captions_per_item: 1,
            seed: 0,
        }
    }
}

impl GenSpec {
    /// Tokens reserved per class, the anchor included.
    pub fn band_size(&self) -> usize {
        self.vocab_size / (2 * self.n_classes.max(1))
    }

    pub fn filler_count(&self) -> usize {
        self.vocab_size - self.band_size() * self.n_classes
    }

    /// How many caption tokens come from the class band (anchor included).
    fn band_tokens_per_caption(&self) -> usize {
        self.caption_len.div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Error::SpecInvalid {
            field: field.to_string(),
            reason,
        };
        if self.n_classes < 2 {
            return Err(bad(
                "n_classes",
                format!("need at least 2 classes, got {}", self.n_classes),
            ));
        }
        if self.pairs_per_class == 0 {
            return Err(bad("pairs_per_class", "must be positive".into()));
        }
        if self.latent_dim < 2 {
            return Err(bad(
                "latent_dim",
                format!("must be >= 2, got {}", self.latent_dim),
            ));
        }
        if self.feature_dim < 2 {
            return Err(bad(
                "feature_dim",
                format!("must be >= 2, got {}", self.feature_dim),
            ));
        }
        if self.caption_len < 2 {
            return Err(bad(
                "caption_len",
                format!("must be >= 2, got {}", self.caption_len),
            ));
        }
        if self.band_size() < 2 {
            return Err(bad(
                "vocab_size",
                format!(
                    "{} tokens leave fewer than 2 per class band; need >= {}",
                    self.vocab_size,
                    4 * self.n_classes
                ),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(bad(
                "noise_sigma",
                format!("must be finite and >= 0, got {}", self.noise_sigma),
            ));
        }
        if self.captions_per_item == 0 {
            return Err(bad("captions_per_item", "must be >= 1".into()));
        }
        if self.n_classes * self.pairs_per_class < 2 {
            return Err(bad(
                "pairs_per_class",
                "need at least two items to split".into(),
            ));
        }
        Ok(())
    }

    pub fn class_labels(&self) -> Vec<String> {
        (0..self.n_classes)
            .map(|c| {
                if self.n_classes <= LABEL_WORDS.len() {
                    LABEL_WORDS[c].to_string()
                } else {
                    format!("class{c}")
                }
            })
            .collect()
    }

    /// The generator's vocabulary: class bands in class order, then fillers.
    pub fn vocab(&self) -> Vocab {
        let mut tokens = Vec::with_capacity(self.vocab_size);
        for label in self.class_labels() {
            tokens.push(label.clone());
            for k in 1..self.band_size() {
                tokens.push(format!("{label}_{k}"));
            }
        }
        for k in 0..self.filler_count() {
            tokens.push(format!("w{k}"));
        }
        Vocab::new(tokens).expect("generated tokens are unique")
    }
}

/// Fixed word list mapping whitespace-separated words to token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &tokens {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::config("vocab", format!("invalid token {t:?}")));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::config("vocab", format!("duplicate token {t:?}")));
            }
        }
        Ok(Self::from(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Whitespace tokenization; every word must be in the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let ids = text
            .split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownWord(w.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::EmptyInput(format!("{text:?} has no tokens")));
        }
        Ok(ids)
    }

    /// Like [`Vocab::encode`] but skips unknown words; errors only when
    /// nothing is left.
    pub fn encode_known(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = text.split_whitespace().filter_map(|w| self.id(w)).collect();
        if ids.is_empty() {
            return Err(Error::EmptyInput(format!(
                "{text:?} has no in-vocabulary tokens"
            )));
        }
        Ok(ids)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Vocab::new(tokens).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        write_atomic(path, s.as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub train: Vec<PairedRecord>,
    pub val: Vec<PairedRecord>,
    pub classes: Vec<String>,
    pub vocab: Vocab,
}

struct TokenSpace {
    /// Unit "meaning" vector per token, in latent space.
    meanings: Matrix,
    bands: Vec<Vec<usize>>,
    fillers: Vec<usize>,
}

impl TokenSpace {
    fn new(spec: &GenSpec, rng: &mut Rng) -> Self {
        let meanings = rng.unit_rows(spec.vocab_size, spec.latent_dim);
        let b = spec.band_size();
        let bands = (0..spec.n_classes)
            .map(|c| (c * b..(c + 1) * b).collect())
            .collect();
        let fillers = (spec.n_classes * b..spec.vocab_size).collect();
        Self {
            meanings,
            bands,
            fillers,
        }
    }

    /// Picks `k` tokens from `pool` by Gumbel-top-k on `sharpness·⟨meaning, dir⟩`;
    /// samples with replacement once the pool is exhausted.
    fn pick(&self, pool: &[usize], dir: &[f64], k: usize, rng: &mut Rng) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = pool
            .iter()
            .map(|&t| {
                let gumbel = -(-(rng.uniform().max(1e-300)).ln()).ln();
                (TOKEN_SHARPNESS * dot(self.meanings.row(t), dir) + gumbel, t)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut out: Vec<usize> = scored.iter().take(k).map(|&(_, t)| t).collect();
        while out.len() < k {
            out.push(pool[rng.below(pool.len())]);
        }
        out
    }
}

fn caption_text(vocab: &Vocab, ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| vocab.tokens()[i].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates a labeled paired dataset and splits it 90/10 by item.
pub fn generate(spec: &GenSpec) -> Result<GeneratedData> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut world = root.fork(0);
    let centers = world.unit_rows(spec.n_classes, spec.latent_dim);
    let projection = world.normal_matrix(
        spec.feature_dim,
        spec.latent_dim,
        1.0 / (spec.latent_dim as f64).sqrt(),
    );
    let space = TokenSpace::new(spec, &mut world);
    let vocab = spec.vocab();
    let classes = spec.class_labels();

    let mut sampler = root.fork(1);
    let n_items = spec.n_classes * spec.pairs_per_class;
    let band_k = spec.band_tokens_per_caption() - 1;
    let filler_k = spec.caption_len - spec.band_tokens_per_caption();
    let mut items: Vec<Vec<PairedRecord>> = Vec::with_capacity(n_items);
    for item in 0..n_items {
        let class = item / spec.pairs_per_class;
        let noise: Vec<f64> = (0..spec.latent_dim)
            .map(|_| spec.noise_sigma * sampler.normal())
            .collect();
        let latent: Vec<f64> = centers
            .row(class)
            .iter()
            .zip(&noise)
            .map(|(c, n)| c + n)
            .collect();
        let features: Vec<f64> = projection.iter_rows().map(|r| dot(r, &latent)).collect();
        // Direction of the item's offset from its center (arbitrary when noise is zero).
        let offset = Matrix::from_vec(1, spec.latent_dim, noise.clone())?;
        let dir = match l2_normalize_rows(&offset) {
            Ok(d) => d.row(0).to_vec(),
            Err(_) => vec![0.0; spec.latent_dim],
        };
        let band = &space.bands[class];
        let mut records = Vec::with_capacity(spec.captions_per_item);
        for cap in 0..spec.captions_per_item {
            let mut ids = vec![band[0]];
            ids.extend(space.pick(&band[1..], &dir, band_k, &mut sampler));
            ids.extend(space.pick(&space.fillers, &dir, filler_k, &mut sampler));
            let id = if spec.captions_per_item == 1 {
                format!("p{item:05}")
            } else {
                format!("p{item:05}{CAPTION_SEP}{cap}")
            };
            records.push(PairedRecord {
                id,
                caption: caption_text(&vocab, &ids),
                features: features.clone(),
                class_label: Some(classes[class].clone()),
            });
        }
        items.push(records);
    }

    let mut order = root.fork(2).permutation(n_items);
    let n_val = ((n_items as f64) * 0.1).round().max(1.0) as usize;
    let mut val_items: Vec<usize> = order.drain(..n_val).collect();
    let mut train_items = order;
    val_items.sort_unstable();
    train_items.sort_unstable();
    let collect = |idx: &[usize]| -> Vec<PairedRecord> {
        idx.iter().flat_map(|&i| items[i].clone()).collect()
    };
    Ok(GeneratedData {
        train: collect(&train_items),
        val: collect(&val_items),
        classes,
        vocab,
    })
}

/// Builds one NLI triple per base record: the caption, a same-class variant
/// with resampled band tokens, and a caption from another class.
pub fn generate_nli(spec: &GenSpec, base: &[PairedRecord]) -> Result<Vec<NliRecord>> {
    if base.is_empty() {
        return Err(Error::EmptyDataset(
            "NLI generation needs base records".into(),
        ));
    }
    let labels: Vec<&str> = base
        .iter()
        .map(|r| r.class_label.as_deref().unwrap_or(""))
        .collect();
    let distinct: HashSet<&str> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::NeedTwoClasses);
    }
    let band_of = |word: &str| -> Option<String> {
        spec.class_labels().into_iter().find(|l| {
            word == l
                || word
                    .strip_prefix(l.as_str())
                    .is_some_and(|rest| rest.starts_with('_'))
        })
    };
    let mut rng = Rng::new(spec.seed).fork(3);
    let mut out = Vec::with_capacity(base.len());
    for (i, rec) in base.iter().enumerate() {
        let entailment = rec
            .caption
            .split_whitespace()
            .map(|w| match band_of(w) {
                Some(label) if w != label && spec.band_size() > 1 => {
                    let k = 1 + rng.below(spec.band_size() - 1);
                    format!("{label}_{k}")
                }
                _ => w.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ");
        let contradiction = loop {
            let j = rng.below(base.len());
            if labels[j] != labels[i] {
                break base[j].caption.clone();
            }
        };
        out.push(NliRecord {
            premise: rec.caption.clone(),
            entailment,
            contradiction,
        });
    }
    Ok(out)
}

fn check_pairs(path: &Path, records: &[PairedRecord]) -> Result<()> {
    let mut ids = HashSet::new();
    let dim = records.first().map(|r| r.features.len());
    for (i, r) in records.iter().enumerate() {
        let fail = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if !ids.insert(r.id.as_str()) {
            return Err(fail(format!("duplicate id {:?}", r.id)));
        }
        if Some(r.features.len()) != dim {
            return Err(fail(format!(
                "features have {} entries, expected {}",
                r.features.len(),
                dim.unwrap_or(0)
            )));
        }
        if r.features.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite feature".into()));
        }
        if r.caption.split_whitespace().next().is_none() {
            return Err(fail("empty caption".into()));
        }
    }
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairedRecord>> {
    let records: Vec<PairedRecord> = read_jsonl(path)?;
    check_pairs(path, &records)?;
    Ok(records)
}

pub fn save_pairs(path: &Path, records: &[PairedRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn load_nli(path: &Path) -> Result<Vec<NliRecord>> {
    let records: Vec<NliRecord> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(records)
}

pub fn save_nli(path: &Path, records: &[NliRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Distinct sentences of an NLI corpus in first-seen order.
pub fn nli_sentences(records: &[NliRecord]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for r in records {
        for s in [&r.premise, &r.entailment, &r.contradiction] {
            if seen.insert(s.as_str()) {
                out.push(s.clone());
            }
        }
    }
    out
}

pub const LABEL_PLACEHOLDER: &str = "{label}";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(template: &str) -> Result<Self> {
        if template.matches(LABEL_PLACEHOLDER).count() != 1 {
            return Err(Error::MissingPlaceholder(template.to_string()));
        }
        Ok(Self(template.to_string()))
    }

    pub fn expand(&self, label: &str) -> String {
        self.0.replace(LABEL_PLACEHOLDER, label)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Plain-text prompt file: one template per line, `#` starts a comment line.
pub fn parse_prompts(path: &Path, text: &str) -> Result<Vec<PromptTemplate>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(PromptTemplate::new(t).map_err(|e| match e {
            Error::MissingPlaceholder(_) => e,
            other => Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: other.to_string(),
            },
        })?);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "no prompt templates".into(),
        });
    }
    Ok(out)
}

pub fn load_prompts(path: &Path) -> Result<Vec<PromptTemplate>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prompts(path, &text)
}

/// Every template expanded for every class: `out[class][template]`.
pub fn expand_prompts(templates: &[PromptTemplate], classes: &[String]) -> Vec<Vec<String>> {
    classes
        .iter()
        .map(|c| templates.iter().map(|t| t.expand(c)).collect())
        .collect()
}

pub fn load_classes(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn save_classes(path: &Path, classes: &[String]) -> Result<()> {
    let mut s = classes.join("\n");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Feature rows of `records` as a matrix.
pub fn feature_matrix(records: &[PairedRecord]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.features.as_slice()).collect();
    Matrix::from_rows(&rows)
}
