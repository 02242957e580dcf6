//! Cross-modal retrieval metrics and prompt-ensemble zero-shot
//! classification.
//!
//! Rankings sort gallery items by descending cosine and break ties by
//! ascending gallery index, so every report is bit-reproducible.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::PairedRecord;
use crate::error::{Error, Result};
use crate::tensor::{l2_normalize_rows, Matrix};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Other-modality queries retrieving captions.
    TextRetrieval,
    /// Caption queries retrieving other-modality items.
    OtherRetrieval,
}

/// Relevant gallery indices per query.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    relevant: Vec<Vec<usize>>,
}

impl RelevanceMap {
    pub fn new(relevant: Vec<Vec<usize>>, gallery_size: usize) -> Result<Self> {
        for (q, rel) in relevant.iter().enumerate() {
            if rel.is_empty() {
                return Err(Error::EmptyInput(format!(
                    "query {q} has no relevant items"
                )));
            }
            if let Some(&g) = rel.iter().find(|&&g| g >= gallery_size) {
                return Err(Error::DimensionMismatch(format!(
                    "query {q} marks gallery item {g} relevant, gallery has {gallery_size}"
                )));
            }
        }
        Ok(Self { relevant })
    }

    /// Query `i` is relevant to gallery item `i` only.
    pub fn diagonal(n: usize) -> Self {
        Self {
            relevant: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.relevant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevant.is_empty()
    }

    pub fn relevant(&self, query: usize) -> &[usize] {
        &self.relevant[query]
    }
}

/// Gallery indices per query, best first.
pub type Ranking = Vec<Vec<usize>>;

pub fn rank_gallery(queries: &Matrix, gallery: &Matrix) -> Result<Ranking> {
    if gallery.rows() == 0 {
        return Err(Error::EmptyInput("gallery is empty".into()));
    }
    let scores = queries.matmul_t(gallery)?;
    Ok(scores
        .iter_rows()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx
        })
        .collect())
}

/// Fraction of queries with at least one relevant item in the top `k`.
pub fn recall_at_k(ranking: &Ranking, relevance: &RelevanceMap, k: usize) -> f64 {
    if ranking.is_empty() {
        return 0.0;
    }
    let hits = ranking
        .iter()
        .enumerate()
        .filter(|(q, order)| {
            let rel = relevance.relevant(*q);
            order.iter().take(k).any(|g| rel.contains(g))
        })
        .count();
    hits as f64 / ranking.len() as f64
}

/// Average precision over the top 10 ranks, normalized by
/// `min(|relevant|, 10)`, averaged over queries.
pub fn map_at_10(ranking: &Ranking, relevance: &RelevanceMap) -> f64 {
    if ranking.is_empty() {
        return 0.0;
    }
    let total: f64 = ranking
        .iter()
        .enumerate()
        .map(|(q, order)| {
            let rel = relevance.relevant(q);
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (r, g) in order.iter().take(10).enumerate() {
                if rel.contains(g) {
                    hits += 1;
                    sum += hits as f64 / (r + 1) as f64;
                }
            }
            sum / rel.len().min(10) as f64
        })
        .sum();
    total / ranking.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub direction: Direction,
    #[serde(rename = "recall@1")]
    pub recall_at_1: f64,
    #[serde(rename = "recall@5")]
    pub recall_at_5: f64,
    #[serde(rename = "recall@10")]
    pub recall_at_10: f64,
    #[serde(rename = "map@10")]
    pub map_at_10: f64,
    pub n_queries: usize,
    pub n_gallery: usize,
}

pub fn evaluate_retrieval(
    queries: &Matrix,
    gallery: &Matrix,
    relevance: &RelevanceMap,
    direction: Direction,
) -> Result<RetrievalResult> {
    if relevance.len() != queries.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} queries but relevance covers {}",
            queries.rows(),
            relevance.len()
        )));
    }
    let ranking = rank_gallery(queries, gallery)?;
    Ok(RetrievalResult {
        direction,
        recall_at_1: recall_at_k(&ranking, relevance, 1),
        recall_at_5: recall_at_k(&ranking, relevance, 5),
        recall_at_10: recall_at_k(&ranking, relevance, 10),
        map_at_10: map_at_10(&ranking, relevance),
        n_queries: queries.rows(),
        n_gallery: gallery.rows(),
    })
}

/// Groups caption records into items by id key.
#[derive(Clone, Debug, PartialEq)]
pub struct PairIndex {
    /// Index of the first record of each item, in first-seen order.
    pub item_first_record: Vec<usize>,
    /// Item index of each record.
    pub record_item: Vec<usize>,
}

impl PairIndex {
    pub fn from_records(records: &[PairedRecord]) -> Self {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut item_first_record = Vec::new();
        let mut record_item = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let next = item_first_record.len();
            let item = *seen.entry(r.item_key()).or_insert(next);
            if item == next {
                item_first_record.push(i);
            }
            record_item.push(item);
        }
        Self {
            item_first_record,
            record_item,
        }
    }

    pub fn n_items(&self) -> usize {
        self.item_first_record.len()
    }

    /// Item queries against caption gallery.
    pub fn text_relevance(&self) -> RelevanceMap {
        let mut rel = vec![Vec::new(); self.n_items()];
        for (rec, &item) in self.record_item.iter().enumerate() {
            rel[item].push(rec);
        }
        RelevanceMap { relevant: rel }
    }

    /// Caption queries against item gallery.
    pub fn other_relevance(&self) -> RelevanceMap {
        RelevanceMap {
            relevant: self.record_item.iter().map(|&i| vec![i]).collect(),
        }
    }
}

/// Both retrieval directions for paired embeddings. `text` has one row per
/// record; `other` one row per record too, of which one per item is used.
pub fn paired_retrieval(
    index: &PairIndex,
    text: &Matrix,
    other: &Matrix,
) -> Result<(RetrievalResult, RetrievalResult)> {
    let items = other.select_rows(&index.item_first_record);
    let t = evaluate_retrieval(
        &items,
        text,
        &index.text_relevance(),
        Direction::TextRetrieval,
    )?;
    let o = evaluate_retrieval(
        text,
        &items,
        &index.other_relevance(),
        Direction::OtherRetrieval,
    )?;
    Ok((t, o))
}

/// Mean of each class's prompt embeddings, renormalized to unit length.
pub fn class_vectors(class_prompts: &[Matrix]) -> Result<Matrix> {
    let d = class_prompts.first().map_or(0, Matrix::cols);
    let mut out = Matrix::zeros(class_prompts.len(), d);
    for (c, prompts) in class_prompts.iter().enumerate() {
        if prompts.rows() == 0 {
            return Err(Error::EmptyClass(c));
        }
        if prompts.cols() != d {
            return Err(Error::DimensionMismatch(format!(
                "class {c} prompts have dimension {}, expected {d}",
                prompts.cols()
            )));
        }
        let row = out.row_mut(c);
        for p in prompts.iter_rows() {
            for (o, v) in row.iter_mut().zip(p) {
                *o += v;
            }
        }
        let inv = 1.0 / prompts.rows() as f64;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    l2_normalize_rows(&out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotResult {
    pub predictions: Vec<usize>,
    pub accuracy: Option<f64>,
}

/// Predicts the class whose averaged prompt vector has the highest cosine
/// with each item; ties go to the lowest class index.
pub fn zero_shot_classify(
    items: &Matrix,
    class_prompts: &[Matrix],
    labels: Option<&[usize]>,
) -> Result<ZeroShotResult> {
    if class_prompts.is_empty() {
        return Err(Error::EmptyInput("no classes".into()));
    }
    let classes = class_vectors(class_prompts)?;
    let scores = items.matmul_t(&classes)?;
    let predictions: Vec<usize> = scores
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &s) in row.iter().enumerate().skip(1) {
                if s > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    let accuracy = match labels {
        Some(l) if l.len() != predictions.len() => {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} items",
                l.len(),
                predictions.len()
            )))
        }
        Some(l) if !l.is_empty() => {
            Some(l.iter().zip(&predictions).filter(|(a, b)| a == b).count() as f64 / l.len() as f64)
        }
        _ => None,
    };
    Ok(ZeroShotResult {
        predictions,
        accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub accuracy: f64,
    pub n_items: usize,
    pub n_classes: usize,
    pub prompts_per_class: usize,
}
