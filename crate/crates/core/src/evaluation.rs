//! Retrieval evaluation (ranks, median rank, recall-at-K, the sampled
//! group protocol in both directions) and Fréchet distance between
//! image feature distributions, with pluggable feature extractors.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{image_stat_features, ImageTensor};
use crate::error::{Result, XmodalError};
use crate::generation::ImageClassifier;
use crate::rng::{seeded, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToRecipe,
    RecipeToImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMetric {
    Euclidean,
    CosineDistance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingResult {
    /// 1-based rank of the true match for each query.
    pub ranks: Vec<usize>,
    pub direction: Direction,
    pub group_size: usize,
}

fn row(m: &Array2<f64>, i: usize) -> Vec<f64> {
    m.index_axis(Axis(0), i).iter().copied().collect()
}

fn distance(metric: RankMetric, a: &[f64], b: &[f64]) -> Result<f64> {
    match metric {
        RankMetric::Euclidean => Ok(crate::losses::euclidean_distance(a, b)),
        RankMetric::CosineDistance => Ok(1.0 - crate::losses::cosine_similarity(a, b)?),
    }
}

/// Rank of each query's true match (at the same index in the gallery),
/// streaming over gallery items. Ties count against the query: anything
/// exactly as close as the true match is treated as closer.
pub fn rank_matrix(
    queries: &Array2<f64>,
    gallery: &Array2<f64>,
    metric: RankMetric,
    direction: Direction,
) -> Result<RankingResult> {
    if queries.dim() != gallery.dim() {
        return Err(XmodalError::validation(
            "rank_matrix",
            format!("queries {:?} and gallery {:?} must be index-aligned", queries.dim(), gallery.dim()),
        ));
    }
    if queries.iter().any(|v| !v.is_finite()) || gallery.iter().any(|v| !v.is_finite()) {
        return Err(XmodalError::validation("rank_matrix", "embeddings must be finite"));
    }
    let n = queries.nrows();
    if n == 0 {
        return Err(XmodalError::validation("rank_matrix", "empty embedding batch"));
    }
    let mut ranks = Vec::with_capacity(n);
    for i in 0..n {
        let q = row(queries, i);
        let d_true = distance(metric, &q, &row(gallery, i))?;
        let mut rank = 1;
        for j in 0..n {
            if j != i && distance(metric, &q, &row(gallery, j))? <= d_true {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    Ok(RankingResult { ranks, direction, group_size: n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    #[serde(rename = "medR")]
    pub med_r: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

/// Median rank (mean of the central pair for even counts) and
/// recall-at-K percentages.
pub fn retrieval_metrics(r: &RankingResult) -> RetrievalMetrics {
    assert!(!r.ranks.is_empty(), "metrics need at least one rank");
    let mut sorted = r.ranks.clone();
    sorted.sort_unstable();
    let n = sorted.len();
    let med_r = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let recall = |k: usize| 100.0 * sorted.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    RetrievalMetrics { med_r, r1: recall(1), r5: recall(5), r10: recall(10) }
}

fn mean_metrics(groups: &[RetrievalMetrics]) -> RetrievalMetrics {
    let n = groups.len() as f64;
    RetrievalMetrics {
        med_r: groups.iter().map(|g| g.med_r).sum::<f64>() / n,
        r1: groups.iter().map(|g| g.r1).sum::<f64>() / n,
        r5: groups.iter().map(|g| g.r5).sum::<f64>() / n,
        r10: groups.iter().map(|g| g.r10).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub per_group: Vec<RetrievalMetrics>,
    pub mean: RetrievalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub image_to_recipe: DirectionReport,
    pub recipe_to_image: DirectionReport,
    pub group_size: usize,
    pub n_groups: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fid: Option<f64>,
}

/// Samples `n_groups` random subsets of index-aligned embedding pairs
/// (groups may overlap) and averages both retrieval directions over
/// them.
pub fn sampled_protocol(
    test_v: &Array2<f64>,
    test_r: &Array2<f64>,
    group_size: usize,
    n_groups: usize,
    seed: u64,
    metric: RankMetric,
) -> Result<MetricsReport> {
    if test_v.dim() != test_r.dim() {
        return Err(XmodalError::validation(
            "sampled_protocol",
            format!("embedding shapes differ: {:?} vs {:?}", test_v.dim(), test_r.dim()),
        ));
    }
    let n = test_v.nrows();
    if group_size == 0 || n_groups == 0 {
        return Err(XmodalError::validation("sampled_protocol", "group_size and n_groups must be positive"));
    }
    if group_size > n {
        return Err(XmodalError::validation(
            "sampled_protocol",
            format!("group_size {group_size} exceeds split size {n}"),
        ));
    }
    let mut rng = seeded(seed, stream::EVAL_GROUPS);
    let d = test_v.ncols();
    let mut i2r_groups = Vec::with_capacity(n_groups);
    let mut r2i_groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let idx = rand::seq::index::sample(&mut rng, n, group_size).into_vec();
        let sub = |m: &Array2<f64>| {
            Array2::from_shape_fn((group_size, d), |(i, j)| m[[idx[i], j]])
        };
        let (v, r) = (sub(test_v), sub(test_r));
        let i2r = rank_matrix(&v, &r, metric, Direction::ImageToRecipe)?;
        let r2i = rank_matrix(&r, &v, metric, Direction::RecipeToImage)?;
        i2r_groups.push(retrieval_metrics(&i2r));
        r2i_groups.push(retrieval_metrics(&r2i));
    }
    Ok(MetricsReport {
        image_to_recipe: DirectionReport { mean: mean_metrics(&i2r_groups), per_group: i2r_groups },
        recipe_to_image: DirectionReport { mean: mean_metrics(&r2i_groups), per_group: r2i_groups },
        group_size,
        n_groups,
        seed,
        fid: None,
    })
}

// ----- Fréchet distance -----

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// eigenvalues and the orthogonal matrix of column eigenvectors.
fn jacobi_eigen(m: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[[i, i]]).collect();
    (vals, v)
}

/// Symmetric PSD square root; eigenvalues slightly below zero (numeric
/// noise) are clamped, anything worse is an error.
fn sym_sqrt(m: &Array2<f64>, context: &'static str) -> Result<Array2<f64>> {
    let sym = (m + &m.t()) * 0.5;
    let (vals, vecs) = jacobi_eigen(&sym);
    let mut roots = Vec::with_capacity(vals.len());
    for &l in &vals {
        if l < -1e-6 {
            return Err(XmodalError::validation(
                context,
                format!("matrix square root failed: eigenvalue {l} below tolerance"),
            ));
        }
        roots.push(l.max(0.0).sqrt());
    }
    let n = vals.len();
    let mut out = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for (k, &r) in roots.iter().enumerate() {
                s += vecs[[i, k]] * r * vecs[[j, k]];
            }
            out[[i, j]] = s;
        }
    }
    Ok(out)
}

fn mean_and_cov(features: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let (n, d) = features.dim();
    let mu: Vec<f64> = (0..d).map(|j| features.column(j).sum() / n as f64).collect();
    let mut cov = Array2::<f64>::zeros((d, d));
    for i in 0..n {
        for a in 0..d {
            let da = features[[i, a]] - mu[a];
            for b in a..d {
                cov[[a, b]] += da * (features[[i, b]] - mu[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            cov[[a, b]] /= denom;
            cov[[b, a]] = cov[[a, b]];
        }
    }
    (mu, cov)
}

/// Fréchet distance between Gaussian fits of the two feature sets:
/// ||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2}).
pub fn fid(real: &Array2<f64>, generated: &Array2<f64>) -> Result<f64> {
    if real.ncols() != generated.ncols() {
        return Err(XmodalError::validation(
            "fid",
            format!("feature dims differ: {} vs {}", real.ncols(), generated.ncols()),
        ));
    }
    if real.nrows() < 2 || generated.nrows() < 2 {
        return Err(XmodalError::validation("fid", "need at least two samples per side"));
    }
    if real.iter().any(|v| !v.is_finite()) || generated.iter().any(|v| !v.is_finite()) {
        return Err(XmodalError::validation("fid", "features must be finite"));
    }
    // The distance is symmetric; pinning the argument order makes the
    // two call orders run the identical float sequence, so symmetry
    // holds bitwise instead of only up to eigensolver noise.
    let (real, generated) = if canonical_le(real, generated) {
        (real, generated)
    } else {
        (generated, real)
    };
    let (mu_r, cov_r) = mean_and_cov(real);
    let (mu_g, cov_g) = mean_and_cov(generated);

    // Tr((S_r S_g)^{1/2}) computed via the symmetric product
    // A S_g A with A = S_r^{1/2}, which shares its spectrum.
    let a = sym_sqrt(&cov_r, "fid")?;
    let prod = a.dot(&cov_g).dot(&a);
    let s = sym_sqrt(&prod, "fid")?;

    let mean_term: f64 = mu_r.iter().zip(&mu_g).map(|(r, g)| (r - g) * (r - g)).sum();
    let trace = |m: &Array2<f64>| (0..m.nrows()).map(|i| m[[i, i]]).sum::<f64>();
    let value = mean_term + trace(&cov_r) + trace(&cov_g) - 2.0 * trace(&s);
    if value < -1e-6 {
        return Err(XmodalError::validation("fid", format!("negative distance {value} beyond tolerance")));
    }
    Ok(value.max(0.0))
}

fn canonical_le(a: &Array2<f64>, b: &Array2<f64>) -> bool {
    if a.nrows() != b.nrows() {
        return a.nrows() < b.nrows();
    }
    for (x, y) in a.iter().zip(b.iter()) {
        if x != y {
            return x < y;
        }
    }
    true
}

// ----- feature extraction -----

pub enum FeatureExtractor<'a> {
    /// Channelwise mean and (biased) variance; training-free.
    RawPool,
    /// Penultimate pooled features of a trained category classifier.
    TrainedClassifierHead(&'a ImageClassifier),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub extractor_id: String,
}

pub fn extract_features(images: &[ImageTensor], extractor: &FeatureExtractor) -> Result<FeatureSet> {
    if images.len() < 2 {
        return Err(XmodalError::validation(
            "extract_features",
            format!("need at least two images, got {}", images.len()),
        ));
    }
    match extractor {
        FeatureExtractor::RawPool => {
            let mut features = Array2::<f64>::zeros((images.len(), 6));
            for (i, img) in images.iter().enumerate() {
                let f = image_stat_features(img);
                for (j, &v) in f.iter().enumerate() {
                    features[[i, j]] = v;
                }
            }
            Ok(FeatureSet { features, extractor_id: "raw_pool".to_string() })
        }
        FeatureExtractor::TrainedClassifierHead(cls) => {
            let (_, s0, s1) = images[0].pixels.dim();
            if images.iter().any(|im| im.pixels.dim() != (3, s0, s1)) {
                return Err(XmodalError::validation("extract_features", "images must share one size"));
            }
            let mut batch = ndarray::Array4::<f64>::zeros((images.len(), 3, s0, s1));
            for (i, img) in images.iter().enumerate() {
                batch.index_axis_mut(Axis(0), i).assign(&img.pixels);
            }
            Ok(FeatureSet {
                features: cls.features_batch(&batch),
                extractor_id: "trained_classifier_head".to_string(),
            })
        }
    }
}

// ----- embedding export -----

/// Writes `id` plus the embedding row per record; floats use the
/// shortest representation that parses back exactly.
pub fn export_embeddings_csv(path: &Path, ids: &[String], embeddings: &Array2<f64>) -> Result<()> {
    if ids.len() != embeddings.nrows() {
        return Err(XmodalError::validation(
            "export_embeddings",
            format!("{} ids for {} embedding rows", ids.len(), embeddings.nrows()),
        ));
    }
    let mut w = csv::Writer::from_path(path).map_err(io_like)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..embeddings.ncols()).map(|j| format!("e{j}")));
    w.write_record(&header).map_err(io_like)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(embeddings.row(i).iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(io_like)?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_embeddings_csv(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(io_like)?;
    let d = r.headers().map_err(io_like)?.len().saturating_sub(1);
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(io_like)?;
        if rec.len() != d + 1 {
            return Err(XmodalError::Parse {
                line: line + 2,
                msg: format!("expected {} fields, got {}", d + 1, rec.len()),
            });
        }
        ids.push(rec[0].to_string());
        for j in 0..d {
            let v: f64 = rec[j + 1].parse().map_err(|e| XmodalError::Parse {
                line: line + 2,
                msg: format!("bad float `{}`: {e}", &rec[j + 1]),
            })?;
            values.push(v);
        }
    }
    let n = ids.len();
    let m = Array2::from_shape_vec((n, d), values)
        .map_err(|e| XmodalError::validation("import_embeddings", e.to_string()))?;
    Ok((ids, m))
}

fn io_like(e: csv::Error) -> XmodalError {
    XmodalError::validation("csv", e.to_string())
}
