//! Generated quality metric: how close a generated signature sits to the
//! influential points of the genuine versus the forged reference sets.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Cholesky, Matrix};
use crate::sigdata::SignatureImage;
use crate::stats::chi2_quantile;

/// Upper bound on the PCA dimension.
pub const MAX_DIM: usize = 16;
pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const DEFAULT_QUANTILE: f64 = 0.95;
pub const DEFAULT_MIN_MEMBERS: usize = 3;

/// Turns an image into the vector GQM works with.
pub trait FeatureExtractor {
    fn extract(&self, image: &SignatureImage) -> Result<Vec<f64>>;
}

/// Flattened pixel intensities.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelFeatures;

impl FeatureExtractor for PixelFeatures {
    fn extract(&self, image: &SignatureImage) -> Result<Vec<f64>> {
        Ok(image.pixels().iter().map(|&p| p as f64).collect())
    }
}

impl<F: FeatureExtractor + ?Sized> FeatureExtractor for &F {
    fn extract(&self, image: &SignatureImage) -> Result<Vec<f64>> {
        (**self).extract(image)
    }
}

/// PCA basis fitted on the union of both reference sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    /// `d × D`, orthonormal rows ordered by decreasing variance.
    pub projection: Matrix,
    pub mean: Vec<f64>,
    /// Variance of the data along each direction.
    pub variances: Vec<f64>,
    pub d: usize,
    pub ridge: f64,
}

impl FeatureSpace {
    /// Fits the top-`d` principal directions of the rows of `data`.
    pub fn fit(data: &Matrix, d: usize, ridge: f64) -> Result<Self> {
        let (n, dim) = (data.rows(), data.cols());
        if d == 0 {
            return Err(Error::InvalidConfig("feature dimension must be at least 1".into()));
        }
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::InvalidConfig(format!("ridge must be finite and non-negative, got {ridge}")));
        }
        if n < d + 2 {
            return Err(Error::InsufficientData(format!("PCA to {d} dimensions needs {} samples, got {n}", d + 2)));
        }
        if d > MAX_DIM || d > dim {
            return Err(Error::InvalidConfig(format!(
                "feature dimension {d} exceeds min({MAX_DIM}, input dimension {dim})"
            )));
        }
        let mean = data.column_means();
        let mut centered = data.clone();
        for i in 0..n {
            for (x, m) in centered.row_mut(i).iter_mut().zip(&mean) {
                *x -= m;
            }
        }
        let denom = (n - 1) as f64;
        let (variances, mut directions) = if n < dim {
            // Eigenvectors of Xc·Xcᵀ map to those of Xcᵀ·Xc through Xcᵀ.
            let gram = centered.matmul(&centered.transpose())?;
            let eig = symmetric_eigen(&gram)?;
            let mut dirs = Matrix::zeros(d, dim);
            let mut vars = Vec::with_capacity(d);
            for r in 0..d {
                let lambda = eig.values[r].max(0.0);
                vars.push(lambda / denom);
                let u = eig.vectors.row(r);
                let row = dirs.row_mut(r);
                for (i, &ui) in u.iter().enumerate() {
                    if ui != 0.0 {
                        for (o, &x) in row.iter_mut().zip(centered.row(i)) {
                            *o += ui * x;
                        }
                    }
                }
                normalize(row);
            }
            (vars, dirs)
        } else {
            let cov = centered.transpose().matmul(&centered)?;
            let eig = symmetric_eigen(&cov)?;
            let mut dirs = Matrix::zeros(d, dim);
            for r in 0..d {
                dirs.row_mut(r).copy_from_slice(eig.vectors.row(r));
            }
            let vars = eig.values[..d].iter().map(|v| v.max(0.0) / denom).collect();
            (vars, dirs)
        };
        orthonormalize(&mut directions);
        for r in 0..d {
            fix_sign(directions.row_mut(r));
        }
        Ok(FeatureSpace {
            projection: directions,
            mean,
            variances,
            d,
            ridge,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::shape("feature vector length", self.mean.len(), x.len()));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.projection.mat_vec(&centered)
    }

    pub fn project_rows(&self, data: &Matrix) -> Result<Matrix> {
        let rows = (0..data.rows())
            .map(|i| self.project(data.row(i)))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Matrix::zeros(data.rows(), self.d);
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(r);
        }
        Ok(out)
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Modified Gram-Schmidt; directions that vanish (rank-deficient data) are
/// replaced by the first standard basis vector that is still independent.
fn orthonormalize(m: &mut Matrix) {
    let (rows, cols) = (m.rows(), m.cols());
    let mut next_basis = 0;
    for r in 0..rows {
        loop {
            for p in 0..r {
                let proj: f64 = m.row(r).iter().zip(m.row(p)).map(|(a, b)| a * b).sum();
                let prev = m.row(p).to_vec();
                for (x, b) in m.row_mut(r).iter_mut().zip(&prev) {
                    *x -= proj * b;
                }
            }
            if normalize(m.row_mut(r)) > 1e-8 {
                break;
            }
            let row = m.row_mut(r);
            row.iter_mut().for_each(|x| *x = 0.0);
            row[next_basis % cols] = 1.0;
            next_basis += 1;
        }
    }
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Stacks extracted features of `images` into rows.
pub fn feature_matrix<F: FeatureExtractor + ?Sized>(extractor: &F, images: &[SignatureImage]) -> Result<Matrix> {
    let rows = images.iter().map(|im| extractor.extract(im)).collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// PCA on the flattened pixels of `genuine ∪ forged`.
pub fn fit_feature_space(
    genuine: &[SignatureImage],
    forged: &[SignatureImage],
    d: usize,
    ridge: f64,
) -> Result<FeatureSpace> {
    let all: Vec<SignatureImage> = genuine.iter().chain(forged).cloned().collect();
    check_same_side(&all)?;
    FeatureSpace::fit(&feature_matrix(&PixelFeatures, &all)?, d, ridge)
}

fn check_same_side(images: &[SignatureImage]) -> Result<()> {
    if let Some(first) = images.first() {
        if let Some(bad) = images.iter().find(|im| im.side() != first.side()) {
            return Err(Error::shape("reference image side", first.side(), bad.side()));
        }
    }
    Ok(())
}

/// `sqrt((p−μ)ᵀ Σ⁻¹ (p−μ))` through a Cholesky factor of `scatter`.
pub fn mahalanobis(point: &[f64], location: &[f64], scatter: &Matrix) -> Result<f64> {
    let chol = Cholesky::new(scatter)?;
    mahalanobis_with(&chol, point, location)
}

fn mahalanobis_with(chol: &Cholesky, point: &[f64], location: &[f64]) -> Result<f64> {
    let d = chol.factor().rows();
    if point.len() != d || location.len() != d {
        return Err(Error::shape("mahalanobis dimension", d, point.len().max(location.len())));
    }
    let diff: Vec<f64> = point.iter().zip(location).map(|(p, m)| p - m).collect();
    Ok(libm::sqrt(chol.quad_form_inv(&diff)))
}

/// Outlying rows of a reference set together with its location and scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceSet {
    pub features: Matrix,
    pub location: Vec<f64>,
    pub scatter: Matrix,
    /// Squared-distance cut-off `χ²_d(quantile)`.
    pub threshold: f64,
    /// Sorted ascending.
    pub member_indices: Vec<usize>,
    pub min_members: usize,
    /// Mahalanobis distance of every row.
    pub distances: Vec<f64>,
}

impl InfluenceSet {
    pub fn members(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.member_indices.iter().map(|&i| self.features.row(i)).collect();
        Matrix::from_rows(&rows).expect("rows share a width")
    }

    pub fn distance(&self, point: &[f64]) -> Result<f64> {
        mahalanobis(point, &self.location, &self.scatter)
    }
}

pub fn extract_influential(features: &Matrix, quantile: f64, ridge: f64, min_members: usize) -> Result<InfluenceSet> {
    let (n, d) = (features.rows(), features.cols());
    if d == 0 {
        return Err(Error::InvalidInput("features have no columns".into()));
    }
    if n < d + 2 {
        return Err(Error::InsufficientData(format!("{n} rows cannot support {d} dimensions (need {})", d + 2)));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidConfig(format!("ridge must be finite and non-negative, got {ridge}")));
    }
    let threshold = chi2_quantile(quantile, d)?;
    let location = features.column_means();
    let mut scatter = features.covariance()?;
    for j in 0..d {
        scatter[(j, j)] += ridge;
    }
    let chol = Cholesky::new(&scatter)?;
    let distances = (0..n)
        .map(|i| mahalanobis_with(&chol, features.row(i), &location))
        .collect::<Result<Vec<f64>>>()?;
    let mut member_indices: Vec<usize> = (0..n).filter(|&i| distances[i] * distances[i] >= threshold).collect();
    let want = min_members.min(n);
    if member_indices.len() < want {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
        member_indices = order[..want].to_vec();
        member_indices.sort_unstable();
    }
    Ok(InfluenceSet {
        features: features.clone(),
        location,
        scatter,
        threshold,
        member_indices,
        min_members,
        distances,
    })
}

/// Per-dimension variance below which the location model is degenerate.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooksDistance {
    pub value: f64,
    pub per_dimension: Vec<f64>,
    /// Dimensions with zero spread where the candidate is off the mean; they
    /// are left out of `value`.
    pub degenerate: Vec<usize>,
}

/// Cook's distance of `candidate` when appended to `reference`, using an
/// intercept-only fit per dimension and averaging over dimensions.
pub fn cooks_distance(reference: &Matrix, candidate: &[f64]) -> Result<f64> {
    cooks_distance_detailed(reference, candidate).map(|c| c.value)
}

pub fn cooks_distance_detailed(reference: &Matrix, candidate: &[f64]) -> Result<CooksDistance> {
    let (n, d) = (reference.rows(), reference.cols());
    if n < 2 {
        return Err(Error::InsufficientData(format!("Cook's distance needs 2 reference rows, got {n}")));
    }
    if candidate.len() != d {
        return Err(Error::shape("candidate dimension", d, candidate.len()));
    }
    let big_n = (n + 1) as f64;
    let mut per_dimension = Vec::with_capacity(d);
    let mut degenerate = Vec::new();
    let mut total = 0.0;
    let mut counted = 0usize;
    for j in 0..d {
        let column = (0..n).map(|i| reference[(i, j)]).chain(core::iter::once(candidate[j]));
        let mean = column.clone().sum::<f64>() / big_n;
        let s2 = column.map(|y| (y - mean) * (y - mean)).sum::<f64>() / (big_n - 1.0);
        let e = candidate[j] - mean;
        let dj = if s2 < DEGENERATE_VARIANCE {
            if e.abs() > 1e-9 * mean.abs().max(1.0) {
                degenerate.push(j);
                per_dimension.push(f64::NAN);
                continue;
            }
            0.0
        } else {
            // Dropping the candidate moves every fitted value by e/(N−1).
            e * e * big_n / ((big_n - 1.0) * (big_n - 1.0) * s2)
        };
        per_dimension.push(dj);
        total += dj;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::DegenerateModel(
            "every dimension has zero spread and the candidate is off the mean".into(),
        ));
    }
    Ok(CooksDistance {
        value: total / counted as f64,
        per_dimension,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grade {
    /// Closer to the genuine references.
    O,
    F,
}

impl Grade {
    pub fn as_str(self) -> &'static str {
        match self {
            Grade::O => "O",
            Grade::F => "F",
        }
    }
}

pub fn grade_scores(score_genuine: f64, score_forged: f64) -> Result<Grade> {
    if !(score_genuine >= 0.0 && score_forged >= 0.0) || ((score_genuine + score_forged) - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "scores must be non-negative and sum to 1, got ({score_genuine}, {score_forged})"
        )));
    }
    Ok(if score_genuine < score_forged { Grade::O } else { Grade::F })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GqmConfig {
    /// `None` picks `min(16, n_genuine − 2, n_forged − 2, D)`.
    pub d: Option<usize>,
    pub ridge: f64,
    pub quantile: f64,
    pub min_members: usize,
}

impl Default for GqmConfig {
    fn default() -> Self {
        GqmConfig {
            d: None,
            ridge: DEFAULT_RIDGE,
            quantile: DEFAULT_QUANTILE,
            min_members: DEFAULT_MIN_MEMBERS,
        }
    }
}

impl GqmConfig {
    pub fn resolve_dim(&self, n_genuine: usize, n_forged: usize, input_dim: usize) -> Result<usize> {
        let smallest = n_genuine.min(n_forged);
        if smallest < 3 {
            return Err(Error::InsufficientData(format!(
                "each reference set needs at least 3 samples, got {n_genuine} genuine and {n_forged} forged"
            )));
        }
        let cap = MAX_DIM.min(smallest - 2).min(input_dim);
        match self.d {
            None => Ok(cap),
            Some(d) if d >= 1 && d <= cap => Ok(d),
            Some(d) => Err(Error::InsufficientData(format!(
                "feature dimension {d} is outside [1, {cap}] for these reference sets"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GqmReport {
    pub score_genuine: f64,
    pub score_forged: f64,
    pub cooks_genuine: f64,
    pub cooks_forged: f64,
    pub grade: Grade,
    pub d: usize,
    pub quantile: f64,
    pub n_influential_genuine: usize,
    pub n_influential_forged: usize,
}

/// Distance-normalized closeness scores and their grade.
pub fn normalized_scores(m_genuine: f64, m_forged: f64) -> (f64, f64, Grade) {
    let sum = m_genuine + m_forged;
    if sum <= 0.0 {
        return (0.5, 0.5, Grade::F);
    }
    let g = m_genuine / sum;
    let f = m_forged / sum;
    (g, f, if g < f { Grade::O } else { Grade::F })
}

/// Scores one image on pixel features.
pub fn evaluate(
    generated: &SignatureImage,
    genuine: &[SignatureImage],
    forged: &[SignatureImage],
    cfg: &GqmConfig,
) -> Result<GqmReport> {
    evaluate_with(&PixelFeatures, generated, genuine, forged, cfg)
}

pub fn evaluate_with<F: FeatureExtractor + ?Sized>(
    extractor: &F,
    generated: &SignatureImage,
    genuine: &[SignatureImage],
    forged: &[SignatureImage],
    cfg: &GqmConfig,
) -> Result<GqmReport> {
    if let Some(r) = genuine.first().or(forged.first()) {
        if generated.side() != r.side() {
            return Err(Error::shape("generated image side", r.side(), generated.side()));
        }
    }
    let all: Vec<SignatureImage> = genuine.iter().chain(forged).cloned().collect();
    check_same_side(&all)?;
    let g = feature_matrix(extractor, genuine)?;
    let f = feature_matrix(extractor, forged)?;
    let x = extractor.extract(generated)?;
    evaluate_features(&x, &g, &f, cfg)
}

/// The metric on precomputed feature vectors.
pub fn evaluate_features(generated: &[f64], genuine: &Matrix, forged: &Matrix, cfg: &GqmConfig) -> Result<GqmReport> {
    if genuine.cols() != forged.cols() || generated.len() != genuine.cols() {
        return Err(Error::shape(
            "feature dimension",
            genuine.cols(),
            if genuine.cols() != forged.cols() { forged.cols() } else { generated.len() },
        ));
    }
    let d = cfg.resolve_dim(genuine.rows(), forged.rows(), genuine.cols())?;
    let mut union_rows: Vec<&[f64]> = (0..genuine.rows()).map(|i| genuine.row(i)).collect();
    union_rows.extend((0..forged.rows()).map(|i| forged.row(i)));
    let space = FeatureSpace::fit(&Matrix::from_rows(&union_rows)?, d, cfg.ridge)?;
    let pg = space.project_rows(genuine)?;
    let pf = space.project_rows(forged)?;
    let px = space.project(generated)?;
    let inf_g = extract_influential(&pg, cfg.quantile, cfg.ridge, cfg.min_members)?;
    let inf_f = extract_influential(&pf, cfg.quantile, cfg.ridge, cfg.min_members)?;
    let cooks_genuine = cooks_distance(&inf_g.members(), &px)?;
    let cooks_forged = cooks_distance(&inf_f.members(), &px)?;
    let m_g = inf_g.distance(&px)?;
    let m_f = inf_f.distance(&px)?;
    let (score_genuine, score_forged, grade) = normalized_scores(m_g, m_f);
    Ok(GqmReport {
        score_genuine,
        score_forged,
        cooks_genuine,
        cooks_forged,
        grade,
        d,
        quantile: cfg.quantile,
        n_influential_genuine: inf_g.member_indices.len(),
        n_influential_forged: inf_f.member_indices.len(),
    })
}
