//! Shared test support: an independent adaptive-quadrature oracle for
//! truncated-Gaussian integrals, and helpers for building random model states.
//!
//! The oracle here deliberately avoids every closed form under test. Moments
//! and entropy are computed by adaptive Simpson integration of the raw
//! (exponent-shifted) Gaussian density, so agreement with the library is
//! evidence, not circularity.

#![allow(dead_code)] // each integration-test binary uses a different subset

use meibp::engine::{EngineConfig, ModelState};
use meibp::model::{Dataset, GammaPrior, GammaPriors, Hyperparams, PreprocessScheme};
use meibp::variational::GammaPosteriors;
use meibp::synth::{gen_sparse_factor_data, SparseFactorSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Adaptive Simpson quadrature on `[a, b]`.
///
/// Classic recursive bisection with the Richardson error estimate
/// `|S_left + S_right - S_whole| / 15`. `tol` is an absolute tolerance on the
/// final integral; smooth Gaussian-type integrands converge far inside it.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let err = left + right - whole;
        if depth == 0 || err.abs() <= 15.0 * tol {
            left + right + err / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 48)
}

/// Moments of the Gaussian N(mu, sigma^2) truncated to `[0, ∞)`, computed by
/// quadrature only. Returns `(mean, second_moment, entropy)`.
///
/// The density is exponent-shifted by its maximum over the integration range
/// so the unnormalized integrals stay O(1) even when almost all Gaussian mass
/// lies below zero; the shift cancels in every ratio.
/// Adaptive integration over explicit panels. Plain adaptive Simpson over one
/// wide interval can terminate before ever sampling a narrow boundary layer
/// or interior bump; forcing panel edges near the mass prevents that.
fn integrate_panels<F: Fn(f64) -> f64>(f: &F, cuts: &[f64], tol: f64) -> f64 {
    let per = tol / cuts.len().max(1) as f64;
    cuts.windows(2).map(|w| integrate(f, w[0], w[1], per)).sum()
}

pub fn tg_oracle(mu: f64, sigma: f64) -> (f64, f64, f64) {
    // Work in the standardized variable t = a/sigma so every integrand is
    // O(1) and a single absolute tolerance yields uniform relative accuracy
    // whatever the scale of sigma. The location in t-space is r = mu/sigma.
    let r = mu / sigma;
    let upper = r.max(0.0) + 12.0;
    // Peak of the exponent over [0, upper]: at r if r >= 0, else at 0.
    let peak = if r >= 0.0 { 0.0 } else { r * r / 2.0 };
    let g = |t: f64| (-(t - r) * (t - r) / 2.0 + peak).exp();

    // Panel edges: dyadic steps out of the left boundary layer (for r << 0
    // the density is ~exponential with scale 1/|r|), plus unit-spaced edges
    // around an interior peak when r > 0.
    let scale = if r < -1.0 { -1.0 / r } else { 1.0 };
    let mut cuts = vec![0.0, upper];
    let mut c = scale;
    while c < upper {
        cuts.push(c);
        c *= 2.0;
    }
    if r > 0.0 {
        for k in [-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0] {
            let p = r + k;
            if p > 0.0 && p < upper {
                cuts.push(p);
            }
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();

    let tol = 1e-14;
    let z = integrate_panels(&g, &cuts, tol);
    let m1 = integrate_panels(&|t| t * g(t), &cuts, tol);
    let m2 = integrate_panels(&|t| t * t * g(t), &cuts, tol);
    let mean = sigma * m1 / z;
    let second = sigma * sigma * m2 / z;
    // Entropy in t-space with q = g / (z_unshifted): the e^{-peak} factors
    // cancel inside q, so q = g / z directly; converting the density back to
    // a-space divides it by sigma, adding ln(sigma) to the entropy.
    let h_t = integrate_panels(
        &|t| {
            let gt = g(t);
            if gt == 0.0 {
                0.0 // lim x->0 of x ln x
            } else {
                let lnq = gt.ln() - z.ln();
                -(gt / z) * lnq
            }
        },
        &cuts,
        tol * 10.0,
    );
    (mean, second, h_t + sigma.ln())
}

/// erfcx oracle for moderate arguments: erfc via the non-alternating confluent
/// hypergeometric series for erf (all terms positive, no cancellation), then
/// scale by `exp(x^2)`. Accurate to ~1e-13 relative for |x| <= 2.5; for larger
/// positive x the tests use `tg_oracle`-based identities instead.
pub fn erfcx_series_oracle(x: f64) -> f64 {
    // erf(x) = 2x/sqrt(pi) * e^{-x^2} * sum_{n>=0} (2x^2)^n / (1*3*...*(2n+1))
    let two_x2 = 2.0 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut n = 0u32;
    while term > 1e-20 * sum && n < 400 {
        n += 1;
        term *= two_x2 / (2.0 * n as f64 + 1.0);
        sum += term;
    }
    let erf = 2.0 * x / std::f64::consts::PI.sqrt() * (-x * x).exp() * sum;
    (x * x).exp() * (1.0 - erf)
}

/// Deterministic sub-seed derivation for test grids.
pub fn grid_seed(master: u64, a: u64, b: u64) -> u64 {
    // SplitMix64-style mix; good dispersion, reproducible everywhere.
    let mut z = master ^ a.wrapping_mul(0x9e3779b97f4a7c15) ^ b.wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A small random-but-realistic model state: synthetic sparse-factor data,
/// random initialization, caches consistent. Used to generate row objectives
/// and bound states for invariant tests.
pub fn random_small_state(seed: u64, n: usize, d: usize, k_max: usize) -> ModelState {
    let spec = SparseFactorSpec {
        n_rows: n,
        n_cols: d,
        k: k_max.min(6).max(1),
        density: 0.4,
        p_factor: 0.5,
        sigma_noise: 0.7,
        seed,
    };
    let (data, _, _) = gen_sparse_factor_data(&spec).expect("synth data");
    let data = data.with_preprocessing(PreprocessScheme::ZeroMin).expect("preprocess");
    let hyper = Hyperparams::fixed(2.0, 1.0, 1.0).expect("hyper");
    let cfg = EngineConfig::default();
    ModelState::init(data, k_max, hyper, &cfg, seed ^ 0x5eed).expect("init")
}

/// Perturb the factor posterior of a state with random but valid parameters,
/// then refresh all caches. Produces states far from any update fixed point.
/// A hyper-inference state with randomized gamma posteriors and scrambled
/// factors, for exercising the extended bound.
pub fn random_gamma_state(seed: u64, rng: &mut ChaCha8Rng) -> ModelState {
    let mut state = random_small_state(seed, 10, 6, 4);
    let priors = GammaPriors {
        tau_x: GammaPrior::new(1.3, 0.8).unwrap(),
        tau_a: GammaPrior::new(2.0, 1.1).unwrap(),
        alpha: GammaPrior::new(1.0, 1.0).unwrap(),
    };
    state.hyper = Hyperparams::with_gamma(2.0, 1.0, 1.0, priors).unwrap();
    let mut g = GammaPosteriors::from_priors(&priors);
    for q in [&mut g.tau_x, &mut g.tau_a, &mut g.alpha] {
        q.shape = rng.gen_range(0.6..6.0);
        q.rate = rng.gen_range(0.4..4.0);
    }
    state.gamma = Some(g);
    scramble_factors(&mut state, rng);
    state
}

pub fn scramble_factors(state: &mut ModelState, rng: &mut ChaCha8Rng) {
    let k_plus = state.z.k_plus();
    let d = state.dataset.n_cols();
    for k in 0..k_plus {
        for j in 0..d {
            let mu = rng.gen_range(-2.0..2.5);
            let sigma = rng.gen_range(0.05..1.5);
            state.factors.mu_tilde[[k, j]] = mu;
            state.factors.sigma2_tilde[[k, j]] = sigma * sigma;
        }
    }
    state.refresh_factor_moments();
    state.rebuild_prediction_cache();
}

/// Relative-difference helper used by oracle comparisons.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// A tolerance check that degrades gracefully near zero.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= abs + rel * b.abs()
}

/// Build a `Dataset` from a plain row-major vector (test convenience).
pub fn dataset_from_rows(rows: &[&[f64]]) -> Dataset {
    let n = rows.len();
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let x = ndarray::Array2::from_shape_vec((n, d), flat).unwrap();
    Dataset::new(x, None, PreprocessScheme::None).expect("dataset")
}

/// Draw a valid random `(mu, sigma)` pair spanning the regimes the moment
/// kernels must survive: mu/sigma in [-8, 8], sigma log-uniform in
/// [1e-3, 1e3].
pub fn random_tg_params(rng: &mut impl Rng) -> (f64, f64) {
    let log_sigma = rng.gen_range(-3.0..3.0);
    let sigma = 10f64.powf(log_sigma);
    let ratio = rng.gen_range(-8.0..8.0);
    (ratio * sigma, sigma)
}
