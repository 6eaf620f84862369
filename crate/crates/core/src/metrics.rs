//! Fréchet and kernel distances between two sets of image embeddings.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{is_image_path, load_image};
use crate::error::{invalid, Error, Result};
use crate::features::Embedder;
use crate::image_tensor::ImageTensor;

/// n×d embedding matrix, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(pub DMatrix<f64>);

impl FeatureMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if n < 2 {
            return Err(invalid(format!("need at least 2 feature rows, got {n}")));
        }
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(invalid("feature rows must share a nonzero width"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature matrix".into()));
        }
        Ok(Self(DMatrix::from_fn(n, d, |i, j| rows[i][j])))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.0.row_mean().transpose()
    }

    /// Unbiased (n − 1) covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.0.row_mean();
        let mut centered = self.0.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mu;
        }
        (centered.transpose() * &centered) / (self.n() as f64 - 1.0)
    }
}

/// Embeds at least two images.
pub fn extract_features(images: &[&ImageTensor], extractor: &dyn Embedder) -> Result<FeatureMatrix> {
    if images.len() < 2 {
        return Err(invalid(format!("need at least 2 images, got {}", images.len())));
    }
    let mut rows = Vec::with_capacity(images.len());
    // bounded batches keep peak memory flat for large sets
    for chunk in images.chunks(16) {
        rows.extend(extractor.embed(chunk)?);
    }
    if rows.iter().any(|r| r.len() != extractor.dim()) {
        return Err(invalid("extractor returned rows of the wrong width"));
    }
    FeatureMatrix::from_rows(&rows)
}

const SYMMETRY_TOL: f64 = 1e-6;

/// Principal square root of a symmetric PSD matrix via eigendecomposition,
/// with small negative eigenvalues clipped to zero.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(invalid("matrix square root needs a square matrix"));
    }
    let scale = m.abs().max().max(1.0);
    let asym = (m - m.transpose()).abs().max();
    if asym > SYMMETRY_TOL * scale {
        return Err(invalid(format!("matrix is not symmetric (max |M - Mᵀ| = {asym:e})")));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let floor = -SYMMETRY_TOL * scale;
    if let Some(&min) = eig.eigenvalues.iter().min_by(|a, b| a.total_cmp(b)) {
        if min < floor {
            log::warn!("clipping eigenvalue {min:e} of a matrix expected to be PSD");
        }
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// ‖μ_r − μ_f‖² + tr(Σ_r + Σ_f − 2 (Σ_r Σ_f)^{1/2}), clipped at 0.
///
/// The trace of (Σ_r Σ_f)^{1/2} equals that of (S Σ_f S)^{1/2} with
/// S = Σ_r^{1/2}; the latter only needs symmetric square roots.
pub fn fid(real: &FeatureMatrix, fake: &FeatureMatrix) -> Result<f64> {
    if real.d() != fake.d() {
        return Err(invalid(format!(
            "feature widths differ: {} vs {}",
            real.d(),
            fake.d()
        )));
    }
    let dmu = real.mean() - fake.mean();
    let cov_r = real.covariance();
    let cov_f = fake.covariance();
    let s = matrix_sqrt_psd(&cov_r)?;
    let inner = &s * &cov_f * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?;
    let value = dmu.norm_squared() + cov_r.trace() + cov_f.trace() - 2.0 * cross.trace();
    if value < -1e-6 {
        log::warn!("negative Fréchet distance {value:e} clipped to 0");
    }
    Ok(value.max(0.0))
}

fn poly_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.ncols() as f64;
    (a * b.transpose()).map(|v| (v / d + 1.0).powi(3))
}

/// Unbiased MMD² between two equal-size samples under k(a, b) = (aᵀb/d + 1)³:
/// the U-statistic averaging k(x_i,x_j) + k(y_i,y_j) − k(x_i,y_j) − k(x_j,y_i)
/// over i ≠ j.
pub fn mmd2_unbiased(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    let m = x.nrows();
    if m != y.nrows() || m < 2 {
        return Err(invalid("MMD² needs two samples of equal size >= 2"));
    }
    let kxx = poly_kernel(x, x);
    let kyy = poly_kernel(y, y);
    let kxy = poly_kernel(x, y);
    let off = |k: &DMatrix<f64>| k.sum() - k.trace();
    let total = off(&kxx) + off(&kyy) - 2.0 * off(&kxy);
    Ok(total / (m as f64 * (m as f64 - 1.0)))
}

/// Mean and standard deviation of MMD² over random equal-size subsets,
/// drawn without replacement within each subset.
pub fn kid(
    real: &FeatureMatrix,
    fake: &FeatureMatrix,
    subset_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if real.d() != fake.d() {
        return Err(invalid("feature widths differ"));
    }
    if n_subsets == 0 {
        return Err(invalid("n_subsets must be at least 1"));
    }
    if subset_size < 2 || subset_size > real.n().min(fake.n()) {
        return Err(invalid(format!(
            "subset size {subset_size} must be in [2, {}]",
            real.n().min(fake.n())
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_subsets);
    for _ in 0..n_subsets {
        // Sorted so that identical sets yield identical subsets and an exact zero.
        let mut ri = sample(&mut rng, real.n(), subset_size).into_vec();
        let mut fi = sample(&mut rng, fake.n(), subset_size).into_vec();
        ri.sort_unstable();
        fi.sort_unstable();
        let xs = real.0.select_rows(&ri);
        let ys = fake.0.select_rows(&fi);
        values.push(mmd2_unbiased(&xs, &ys)?);
    }
    let mean = values.iter().sum::<f64>() / n_subsets as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_subsets as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub image_size: (usize, usize),
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            image_size: (300, 300),
            kid_subset_size: 100,
            kid_subsets: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub fid: f64,
    pub kid_mean: f64,
    pub kid_std: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub skipped_real: usize,
    pub skipped_fake: usize,
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub feature_dim: usize,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fid={}", self.fid)?;
        writeln!(f, "kid_mean={}", self.kid_mean)?;
        writeln!(f, "kid_std={}", self.kid_std)?;
        writeln!(f, "n_real={}", self.n_real)?;
        writeln!(f, "n_fake={}", self.n_fake)?;
        writeln!(f, "skipped_real={}", self.skipped_real)?;
        writeln!(f, "skipped_fake={}", self.skipped_fake)?;
        writeln!(f, "kid_subset_size={}", self.kid_subset_size)?;
        writeln!(f, "kid_subsets={}", self.kid_subsets)?;
        writeln!(f, "feature_dim={}", self.feature_dim)
    }
}

impl FromStr for MetricReport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for (i, line) in s.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: PathBuf::from("<report>"),
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: FromStr>(map: &std::collections::HashMap<String, String>, k: &str) -> Result<T> {
            map.get(k)
                .ok_or_else(|| invalid(format!("report lacks {k}")))?
                .parse::<T>()
                .map_err(|_| invalid(format!("report field {k} is malformed")))
        }
        Ok(Self {
            fid: get(&map, "fid")?,
            kid_mean: get(&map, "kid_mean")?,
            kid_std: get(&map, "kid_std")?,
            n_real: get(&map, "n_real")?,
            n_fake: get(&map, "n_fake")?,
            skipped_real: get(&map, "skipped_real").unwrap_or(0),
            skipped_fake: get(&map, "skipped_fake").unwrap_or(0),
            kid_subset_size: get(&map, "kid_subset_size").unwrap_or(0),
            kid_subsets: get(&map, "kid_subsets").unwrap_or(0),
            feature_dim: get(&map, "feature_dim").unwrap_or(0),
        })
    }
}

/// Images of a directory (non-recursive, sorted by name). Unreadable files
/// are skipped with a warning and counted.
pub fn load_image_dir(dir: &Path, size: (usize, usize)) -> Result<(Vec<ImageTensor>, usize)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| Error::Load {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    paths.sort();
    let mut images = Vec::with_capacity(paths.len());
    let mut skipped = 0;
    for p in paths {
        match load_image(&p, size) {
            Ok(img) => images.push(img),
            Err(e) => {
                log::warn!("skipping unreadable image {}: {e}", p.display());
                skipped += 1;
            }
        }
    }
    Ok((images, skipped))
}

/// FID and KID between two image directories. The KID subset size is capped
/// at the smaller set size.
pub fn evaluate_pair(
    real_dir: &Path,
    fake_dir: &Path,
    extractor: &dyn Embedder,
    config: &EvalConfig,
) -> Result<MetricReport> {
    let (real, skipped_real) = load_image_dir(real_dir, config.image_size)?;
    let (fake, skipped_fake) = load_image_dir(fake_dir, config.image_size)?;
    for (imgs, dir) in [(&real, real_dir), (&fake, fake_dir)] {
        if imgs.len() < 2 {
            return Err(invalid(format!(
                "{} has {} readable images, need at least 2",
                dir.display(),
                imgs.len()
            )));
        }
    }
    evaluate_images(&real, &fake, extractor, config, (skipped_real, skipped_fake))
}

pub fn evaluate_images(
    real: &[ImageTensor],
    fake: &[ImageTensor],
    extractor: &dyn Embedder,
    config: &EvalConfig,
    skipped: (usize, usize),
) -> Result<MetricReport> {
    let rf = extract_features(&real.iter().collect::<Vec<_>>(), extractor)?;
    let ff = extract_features(&fake.iter().collect::<Vec<_>>(), extractor)?;
    let subset = config.kid_subset_size.min(rf.n()).min(ff.n());
    let fid_value = fid(&rf, &ff)?;
    let (kid_mean, kid_std) = kid(&rf, &ff, subset, config.kid_subsets, config.seed)?;
    Ok(MetricReport {
        fid: fid_value,
        kid_mean,
        kid_std,
        n_real: rf.n(),
        n_fake: ff.n(),
        skipped_real: skipped.0,
        skipped_fake: skipped.1,
        kid_subset_size: subset,
        kid_subsets: config.kid_subsets,
        feature_dim: rf.d(),
    })
}
