//! Synthetic data generators: sparse binary-factor datasets, the
//! four-corner binary-images benchmark, and holdout masks.
//!
//! All generators are deterministic functions of their spec (including the
//! seed). Generation and holdout-mask draws use distinct RNG sub-streams so
//! that masking a dataset never perturbs its values.

use crate::error::{Error, Result};
use crate::model::{Dataset, HoldoutMask, PreprocessScheme};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Sub-stream of the seed used for data generation.
pub const STREAM_GENERATOR: u64 = 3;
/// Sub-stream of the seed used for holdout-mask draws.
pub const STREAM_MASK: u64 = 4;

// ---------------------------------------------------------------------------
// Sparse binary factors
// ---------------------------------------------------------------------------

/// Spec for `X = Z·A + noise` with Bernoulli assignments and random binary
/// factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseFactorSpec {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Number of true latent features.
    pub k: usize,
    /// Per-entry probability that a row uses a feature.
    pub density: f64,
    /// Per-entry probability that a factor loads on a dimension.
    pub p_factor: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub sigma_noise: f64,
    pub seed: u64,
}

impl SparseFactorSpec {
    fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 || self.k == 0 {
            return Err(Error::Shape(format!(
                "generator shape {}x{} with {} features must be nonzero",
                self.n_rows, self.n_cols, self.k
            )));
        }
        for (name, p) in [("density", self.density), ("p_factor", self.p_factor)] {
            if !(p >= 0.0 && p <= 1.0) {
                return Err(Error::Domain(format!("{name} = {p} must lie in [0, 1]")));
            }
        }
        if !(self.sigma_noise.is_finite() && self.sigma_noise >= 0.0) {
            return Err(Error::Domain(format!(
                "sigma_noise = {} must be finite and nonnegative",
                self.sigma_noise
            )));
        }
        Ok(())
    }
}

/// Draw `(dataset, true Z, true A)` from a sparse-factor spec. The dataset
/// is returned unpreprocessed; callers pick a scheme via
/// [`Dataset::with_preprocessing`].
pub fn gen_sparse_factor_data(
    spec: &SparseFactorSpec,
) -> Result<(Dataset, Array2<bool>, Array2<f64>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(STREAM_GENERATOR);

    let z = Array2::from_shape_simple_fn((spec.n_rows, spec.k), || rng.gen_bool(spec.density));
    let a =
        Array2::from_shape_simple_fn((spec.k, spec.n_cols), || {
            if rng.gen_bool(spec.p_factor) {
                1.0
            } else {
                0.0
            }
        });
    let x = assemble(&z, &a, spec.sigma_noise, &mut rng);
    let dataset = Dataset::new(x, None, PreprocessScheme::None)?;
    Ok((dataset, z, a))
}

fn assemble(z: &Array2<bool>, a: &Array2<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, k) = z.dim();
    let d = a.ncols();
    let mut x = Array2::zeros((n, d));
    for i in 0..n {
        for f in 0..k {
            if z[[i, f]] {
                for j in 0..d {
                    x[[i, j]] += a[[f, j]];
                }
            }
        }
    }
    if sigma > 0.0 {
        for v in x.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += sigma * e;
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Binary images
// ---------------------------------------------------------------------------

/// Side length of the square images.
pub const IMAGE_SIDE: usize = 6;
/// Flattened image dimension.
pub const IMAGE_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;

/// The four corner-block features on a 6×6 grid, flattened row-major to 36
/// dimensions. Non-overlapping blocks are 3×3 (disjoint supports); the
/// overlapping variant uses 4×4 blocks that share the central 2×2 region
/// pairwise along each edge.
pub fn corner_block_features(overlapping: bool) -> Array2<f64> {
    let s = if overlapping { 4 } else { 3 };
    let corners = [(0, 0), (0, IMAGE_SIDE - s), (IMAGE_SIDE - s, 0), (IMAGE_SIDE - s, IMAGE_SIDE - s)];
    let mut f = Array2::zeros((4, IMAGE_DIM));
    for (k, &(r0, c0)) in corners.iter().enumerate() {
        for r in r0..r0 + s {
            for c in c0..c0 + s {
                f[[k, r * IMAGE_SIDE + c]] = 1.0;
            }
        }
    }
    f
}

/// Spec for the binary-images benchmark: superpositions of corner-block
/// features plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryImagesSpec {
    pub n_rows: usize,
    pub sigma_noise: f64,
    pub seed: u64,
    /// Per-entry probability that an image contains a feature.
    pub active_prob: f64,
    /// Use 4×4 corner blocks with shared support instead of disjoint 3×3.
    pub overlapping: bool,
    /// Override the feature bitmaps (rows are flattened 36-dim binary
    /// images). `None` selects the corner blocks.
    #[serde(skip)]
    pub features: Option<Array2<f64>>,
}

impl BinaryImagesSpec {
    pub fn new(n_rows: usize, sigma_noise: f64, seed: u64) -> Self {
        BinaryImagesSpec {
            n_rows,
            sigma_noise,
            seed,
            active_prob: 0.5,
            overlapping: false,
            features: None,
        }
    }
}

/// Draw `(dataset, true Z, true A)` from a binary-images spec.
pub fn gen_binary_images(spec: &BinaryImagesSpec) -> Result<(Dataset, Array2<bool>, Array2<f64>)> {
    if spec.n_rows == 0 {
        return Err(Error::Shape("image count must be nonzero".into()));
    }
    if !(spec.active_prob >= 0.0 && spec.active_prob <= 1.0) {
        return Err(Error::Domain(format!(
            "active_prob = {} must lie in [0, 1]",
            spec.active_prob
        )));
    }
    if !(spec.sigma_noise.is_finite() && spec.sigma_noise >= 0.0) {
        return Err(Error::Domain(format!(
            "sigma_noise = {} must be finite and nonnegative",
            spec.sigma_noise
        )));
    }
    let a = match &spec.features {
        Some(f) => {
            if f.nrows() == 0 || f.ncols() != IMAGE_DIM {
                return Err(Error::Shape(format!(
                    "supplied feature bitmaps must be Kx{IMAGE_DIM}, got {}x{}",
                    f.nrows(),
                    f.ncols()
                )));
            }
            if f.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Domain(
                    "supplied feature bitmaps must be binary (entries 0 or 1)".into(),
                ));
            }
            f.clone()
        }
        None => corner_block_features(spec.overlapping),
    };
    let k = a.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(STREAM_GENERATOR);
    let z = Array2::from_shape_simple_fn((spec.n_rows, k), || rng.gen_bool(spec.active_prob));
    let x = assemble(&z, &a, spec.sigma_noise, &mut rng);
    let dataset = Dataset::new(x, None, PreprocessScheme::None)?;
    Ok((dataset, z, a))
}

// ---------------------------------------------------------------------------
// Holdout masks
// ---------------------------------------------------------------------------

/// Hold out `⌈frac·n_cols⌉` columns — one subset drawn uniformly without
/// replacement, shared by every test row — for the test rows
/// `n_rows/2 .. n_rows`. The remaining columns of test rows stay observed,
/// which is what lets the fitted model infer their assignments.
///
/// Errors if `frac` is outside `(0, 1)` or the column count rounds to `0`
/// or to all columns.
pub fn make_holdout_mask(n_rows: usize, n_cols: usize, frac: f64, seed: u64) -> Result<HoldoutMask> {
    if n_rows == 0 || n_cols == 0 {
        return Err(Error::Shape(format!("mask shape {n_rows}x{n_cols} must be nonzero")));
    }
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Domain(format!("holdout fraction {frac} must lie in (0, 1)")));
    }
    let held_cols = (frac * n_cols as f64).ceil() as usize;
    if held_cols == 0 || held_cols >= n_cols {
        return Err(Error::Domain(format!(
            "holdout fraction {frac} of {n_cols} columns rounds to {held_cols}; nothing would \
             remain to {}",
            if held_cols == 0 { "test on" } else { "train on" }
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_MASK);
    let mut cols: Vec<u32> =
        rand::seq::index::sample(&mut rng, n_cols, held_cols).iter().map(|c| c as u32).collect();
    cols.sort_unstable();

    let first_test_row = n_rows / 2;
    let mut entries = Vec::with_capacity((n_rows - first_test_row) * held_cols);
    for row in first_test_row..n_rows {
        for &col in &cols {
            entries.push((row as u32, col));
        }
    }
    HoldoutMask::new(n_rows, n_cols, entries)
}
