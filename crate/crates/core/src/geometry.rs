//! Hypersphere geometry diagnostics for paired embeddings: alignment,
//! per-modality uniformity, similarity-matrix asymmetry and mean pairwise
//! cosine.
//!
//! Expectations over pairs are exact averages over all ordered distinct
//! pairs up to [`EXACT_PAIR_LIMIT`] rows; larger batches use a seeded sample
//! of `EXACT_PAIR_LIMIT²` pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix, Rng};

pub const EXACT_PAIR_LIMIT: usize = 4096;
const SUBSAMPLE_SEED: u64 = 0x0005_eed0_fa11;
const SUBSAMPLE_CHUNK: usize = 1 << 16;

fn check_same(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "paired embeddings are {}x{} and {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance between aligned rows.
pub fn alignment(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_same(a, b)?;
    if a.rows() == 0 {
        return Err(Error::EmptyInput(
            "alignment needs at least one pair".into(),
        ));
    }
    let total: f64 = (0..a.rows()).map(|i| sq_dist(a.row(i), b.row(i))).sum();
    Ok(total / a.rows() as f64)
}

/// Streaming `(max, Σ exp(v − max), count)` accumulator for log-mean-exp.
#[derive(Clone, Copy)]
struct LogMeanExp {
    max: f64,
    sum: f64,
    count: usize,
}

impl LogMeanExp {
    const EMPTY: Self = Self {
        max: f64::NEG_INFINITY,
        sum: 0.0,
        count: 0,
    };

    fn of(values: impl Iterator<Item = f64>) -> Self {
        let values: Vec<f64> = values.collect();
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum = values.iter().map(|v| (v - max).exp()).sum();
        Self {
            max,
            sum,
            count: values.len(),
        }
    }

    fn merge(self, other: Self) -> Self {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other;
        }
        let max = self.max.max(other.max);
        Self {
            max,
            sum: self.sum * (self.max - max).exp() + other.sum * (other.max - max).exp(),
            count: self.count + other.count,
        }
    }

    /// Exact (`== max`) when all values are equal.
    fn value(self) -> f64 {
        self.max + (self.sum / self.count as f64).ln()
    }
}

/// `log` of the mean of `exp(−2‖x_i − x_j‖²)` over ordered pairs `i ≠ j`.
pub fn uniformity(batch: &Matrix) -> Result<f64> {
    let n = batch.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall { got: n, min: 2 });
    }
    let kernel = |i: usize, j: usize| -2.0 * sq_dist(batch.row(i), batch.row(j));
    // Per-chunk partial results are merged in chunk order, so the value does
    // not depend on thread scheduling.
    let parts: Vec<LogMeanExp> = if n <= EXACT_PAIR_LIMIT {
        (0..n)
            .into_par_iter()
            .map(|i| LogMeanExp::of((0..n).filter(|&j| j != i).map(|j| kernel(i, j))))
            .collect()
    } else {
        let total = EXACT_PAIR_LIMIT * EXACT_PAIR_LIMIT;
        let base = Rng::new(SUBSAMPLE_SEED);
        (0..total.div_ceil(SUBSAMPLE_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut rng = base.fork(c as u64);
                let len = SUBSAMPLE_CHUNK.min(total - c * SUBSAMPLE_CHUNK);
                LogMeanExp::of((0..len).map(|_| {
                    let i = rng.below(n);
                    let mut j = rng.below(n - 1);
                    if j >= i {
                        j += 1;
                    }
                    kernel(i, j)
                }))
            })
            .collect()
    };
    Ok(parts
        .into_iter()
        .fold(LogMeanExp::EMPTY, LogMeanExp::merge)
        .value())
}

/// Frobenius norm of `S − Sᵀ` for the cross-modal cosine matrix, over `N`.
pub fn asymmetry(img: &Matrix, txt: &Matrix) -> Result<f64> {
    check_same(img, txt)?;
    let n = img.rows();
    if n == 0 {
        return Err(Error::EmptyInput(
            "asymmetry needs at least one pair".into(),
        ));
    }
    let s = img.matmul_t(txt)?;
    let mut acc = 0.0;
    for j in 0..n {
        for k in 0..n {
            let d = s[(j, k)] - s[(k, j)];
            acc += d * d;
        }
    }
    Ok(acc.sqrt() / n as f64)
}

/// Mean of `⟨x_i, x_j⟩` over ordered pairs `i ≠ j`.
pub fn mean_pairwise_cosine(batch: &Matrix) -> Result<f64> {
    let n = batch.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall { got: n, min: 2 });
    }
    let mut total = vec![0.0; batch.cols()];
    let mut self_sq = 0.0;
    for r in batch.iter_rows() {
        for (t, v) in total.iter_mut().zip(r) {
            *t += v;
        }
        self_sq += dot(r, r);
    }
    Ok((dot(&total, &total) - self_sq) / (n * (n - 1)) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub align: f64,
    pub uniform_text: f64,
    pub uniform_other: f64,
    pub asymmetry: f64,
    /// Mean pairwise cosine of the text embeddings.
    pub mean_pairwise_cosine: f64,
    pub mean_pairwise_cosine_other: f64,
    pub n_pairs: usize,
}

/// All diagnostics for aligned text/other embedding rows.
pub fn geometry_report(text: &Matrix, other: &Matrix) -> Result<GeometryReport> {
    check_same(text, other)?;
    Ok(GeometryReport {
        align: alignment(other, text)?,
        uniform_text: uniformity(text)?,
        uniform_other: uniformity(other)?,
        asymmetry: asymmetry(other, text)?,
        mean_pairwise_cosine: mean_pairwise_cosine(text)?,
        mean_pairwise_cosine_other: mean_pairwise_cosine(other)?,
        n_pairs: text.rows(),
    })
}

/// One row of the geometry CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryRow {
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub align: f64,
    pub uniform_text: f64,
    pub uniform_other: f64,
    pub asymmetry: f64,
    pub mean_cos: f64,
}

impl GeometryRow {
    pub fn new(
        run_id: impl Into<String>,
        variant: impl Into<String>,
        seed: u64,
        r: &GeometryReport,
    ) -> Self {
        Self {
            run_id: run_id.into(),
            variant: variant.into(),
            seed,
            align: r.align,
            uniform_text: r.uniform_text,
            uniform_other: r.uniform_other,
            asymmetry: r.asymmetry,
            mean_cos: r.mean_pairwise_cosine,
        }
    }
}

pub fn geometry_csv(rows: &[GeometryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "run_id",
            "variant",
            "seed",
            "align",
            "uniform_text",
            "uniform_other",
            "asymmetry",
            "mean_cos",
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m<R: AsRef<[f64]>>(rows: &[R]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn alignment_examples() {
        let mut rng = Rng::new(1);
        let a = rng.unit_rows(5, 3);
        assert_eq!(alignment(&a, &a).unwrap(), 0.0);
        assert_eq!(
            alignment(&m(&[[1.0, 0.0]]), &m(&[[0.0, 1.0]])).unwrap(),
            2.0
        );
        assert_eq!(
            alignment(&m(&[[1.0, 0.0]]), &m(&[[-1.0, 0.0]])).unwrap(),
            4.0
        );
        assert!(matches!(
            alignment(&Matrix::zeros(0, 2), &Matrix::zeros(0, 2)),
            Err(Error::EmptyInput(_))
        ));
        let b = rng.unit_rows(5, 3);
        assert_eq!(alignment(&a, &b).unwrap(), alignment(&b, &a).unwrap());
    }

    #[test]
    fn uniformity_examples() {
        let collapsed = m(&[[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]]);
        assert_eq!(uniformity(&collapsed).unwrap(), 0.0);
        assert_eq!(uniformity(&m(&[[1.0, 0.0], [-1.0, 0.0]])).unwrap(), -8.0);
        assert!(matches!(
            uniformity(&m(&[[1.0, 0.0]])),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn uniformity_is_non_positive() {
        let mut rng = Rng::new(2);
        for n in [2, 3, 10, 40] {
            assert!(uniformity(&rng.unit_rows(n, 4)).unwrap() < 0.0);
        }
    }

    #[test]
    fn asymmetry_examples() {
        let mut rng = Rng::new(3);
        let a = rng.unit_rows(6, 4);
        assert_eq!(asymmetry(&a, &a).unwrap(), 0.0);

        let img = m(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let txt = m(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        assert!((asymmetry(&img, &txt).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);

        let b = rng.unit_rows(6, 4);
        let p = rng.permutation(6);
        let before = asymmetry(&a, &b).unwrap();
        let after = asymmetry(&a.select_rows(&p), &b.select_rows(&p)).unwrap();
        assert!((before - after).abs() < 1e-12);
        assert!((asymmetry(&b, &a).unwrap() - before).abs() < 1e-12);
    }

    #[test]
    fn mean_cosine_examples() {
        assert!((mean_pairwise_cosine(&m(&[[0.6, 0.8]; 4])).unwrap() - 1.0).abs() < 1e-15);
        assert!(mean_pairwise_cosine(&Matrix::identity(5)).unwrap().abs() < 1e-15);

        let mut rng = Rng::new(4);
        let x = rng.unit_rows(30, 5);
        let mut brute = 0.0;
        for i in 0..30 {
            for j in 0..30 {
                if i != j {
                    brute += dot(x.row(i), x.row(j));
                }
            }
        }
        assert!((mean_pairwise_cosine(&x).unwrap() - brute / 870.0).abs() < 1e-12);
    }

    #[test]
    fn report_matches_direct_calls() {
        let mut rng = Rng::new(5);
        let t = rng.unit_rows(12, 6);
        let o = rng.unit_rows(12, 6);
        let r = geometry_report(&t, &o).unwrap();
        assert_eq!(r.align, alignment(&o, &t).unwrap());
        assert_eq!(r.uniform_text, uniformity(&t).unwrap());
        assert_eq!(r.uniform_other, uniformity(&o).unwrap());
        assert_eq!(r.asymmetry, asymmetry(&o, &t).unwrap());
        assert_eq!(r.mean_pairwise_cosine, mean_pairwise_cosine(&t).unwrap());
        assert_eq!(r.n_pairs, 12);
    }

    #[test]
    fn subsampled_uniformity_is_deterministic() {
        let mut rng = Rng::new(6);
        let x = rng.unit_rows(EXACT_PAIR_LIMIT + 10, 3);
        let a = uniformity(&x).unwrap();
        let b = uniformity(&x).unwrap();
        assert_eq!(a, b);
        assert!(a < 0.0);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let r = geometry_report(&Matrix::identity(3), &Matrix::identity(3)).unwrap();
        let rows = vec![
            GeometryRow::new("a", "CLIP", 1, &r),
            GeometryRow::new("b", "CLIPs", 2, &r),
        ];
        let s = geometry_csv(&rows).unwrap();
        let lines: Vec<_> = s.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[0],
            "run_id,variant,seed,align,uniform_text,uniform_other,asymmetry,mean_cos"
        );
    }
}
