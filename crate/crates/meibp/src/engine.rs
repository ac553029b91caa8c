//! The inference engine: initialization, alternating sweeps, convergence,
//! compaction, and checkpointing.
//!
//! A sweep runs in a fixed order: (a) coordinate updates of every active
//! factor row — done first so the row objectives are built from a current,
//! nonnegative factor posterior; (b) one optimization per data row with an
//! accept-only-if-strictly-better guard; (c) optional gamma posterior
//! updates; (d) column compaction. Every phase is an ascent step on the
//! (extended) bound, and a final guard verifies the bound moved the right
//! way — a violating sweep is rolled back and reported as a numerical
//! error, never silently kept.
//!
//! Randomness is split into named sub-streams of one seed so that
//! initialization and fitting draws never interleave.

use crate::bitset::BitSet;
use crate::error::{Error, Result};
use crate::model::{BinaryFeatureMatrix, Dataset, Hyperparams, PreprocessScheme};
use crate::rowopt::{
    brute_force_maximize, double_greedy_maximize, ls_maximize, LsConfig, RowObjectiveBuilder,
};
use crate::variational::{
    compute_elbo, gamma_posterior_alpha, gamma_posterior_tau_a, gamma_posterior_tau_x,
    update_factor_row, ElboBreakdown, FactorPosterior, GammaPosteriors, HyperView,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

/// Sub-stream of the run seed used for state initialization.
pub const STREAM_INIT: u64 = 1;
/// Sub-stream of the run seed used during fitting (double greedy draws).
pub const STREAM_FIT: u64 = 2;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which maximizer handles the per-row set problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowOptimizer {
    /// Deterministic approximate local search (default).
    LocalSearch,
    /// Randomized double greedy.
    DoubleGreedy,
    /// Exact enumeration — only viable for small `k_max`.
    BruteForce,
}

/// Engine knobs. The initialization defaults follow the usual protocol:
/// assignments from `Bernoulli(1/3)`, `μ̃ ~ |Normal(0, 0.05)|`,
/// `σ̃ ~ |Normal(0, 0.1)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub optimizer: RowOptimizer,
    pub ls: LsConfig,
    /// Bernoulli probability for initial assignments.
    pub init_density: f64,
    /// Standard deviation of the folded-normal draw for initial `μ̃`.
    pub init_mu_scale: f64,
    /// Standard deviation of the folded-normal draw for initial `σ̃`
    /// (clamped below at 1e-6 before squaring).
    pub init_sigma_scale: f64,
    /// Recompute maintained statistics from scratch after every sweep and
    /// fail loudly on drift.
    pub debug_recompute: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            optimizer: RowOptimizer::LocalSearch,
            ls: LsConfig::default(),
            init_density: 1.0 / 3.0,
            init_mu_scale: 0.05,
            init_sigma_scale: 0.1,
            debug_recompute: false,
        }
    }
}

impl EngineConfig {
    fn validate(&self) -> Result<()> {
        if !(self.init_density >= 0.0 && self.init_density <= 1.0) {
            return Err(Error::Domain(format!(
                "init_density = {} must lie in [0, 1]",
                self.init_density
            )));
        }
        for (name, v) in [
            ("init_mu_scale", self.init_mu_scale),
            ("init_sigma_scale", self.init_sigma_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        if !(self.ls.epsilon > 0.0 && self.ls.epsilon.is_finite()) {
            return Err(Error::Domain(format!("ls epsilon = {} must be positive", self.ls.epsilon)));
        }
        if self.ls.max_passes == 0 {
            return Err(Error::Domain("ls max_passes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stopping rule: the per-entry training log-likelihood is averaged over
/// blocks of sweeps, and fitting stops when consecutive block means agree
/// to a relative tolerance — or when the iteration/time caps hit (reported
/// distinctly).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceConfig {
    pub tol: f64,
    pub block: usize,
    pub max_iters: usize,
    pub max_seconds: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig { tol: 1e-4, block: 5, max_iters: 1000, max_seconds: f64::INFINITY }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Domain(format!("convergence tol = {} must be positive", self.tol)));
        }
        if self.block == 0 {
            return Err(Error::Domain("convergence block must be at least 1".into()));
        }
        Ok(())
    }
}

/// Block-mean convergence test over the training log-likelihood history.
/// Needs at least two full blocks; identical block means converge even at
/// zero (the multiplicative rule treats an exact tie as converged).
pub fn has_converged(train_ll_history: &[f64], cfg: &ConvergenceConfig) -> bool {
    let b = cfg.block;
    if train_ll_history.len() < 2 * b {
        return false;
    }
    let tail = &train_ll_history[train_ll_history.len() - 2 * b..];
    let prev: f64 = tail[..b].iter().sum::<f64>() / b as f64;
    let last: f64 = tail[b..].iter().sum::<f64>() / b as f64;
    if last == prev {
        return true;
    }
    (last - prev).abs() / prev.abs() < cfg.tol
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Per-sweep metrics (one CSV row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepReport {
    /// Iteration number after this sweep (1-based).
    pub iteration: usize,
    /// Wall-clock duration of the sweep in seconds.
    pub seconds: f64,
    pub elbo: f64,
    /// Mean per-observed-entry log density at the posterior-mean
    /// reconstruction.
    pub train_ll_mean: f64,
    /// Same for held-out entries; `None` without a holdout mask.
    pub test_ll_mean: Option<f64>,
    pub k_plus: usize,
    /// Rows whose assignment changed.
    pub rows_changed: usize,
    /// Marginal-gain evaluations spent by the row optimizers.
    pub gain_evals: u64,
}

/// Why a fit stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Converged,
    IterationCap,
    TimeCap,
}

/// A completed fit: stopping reason plus the per-sweep metric stream.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub status: FitStatus,
    pub reports: Vec<SweepReport>,
}

// ---------------------------------------------------------------------------
// Model state
// ---------------------------------------------------------------------------

/// Everything a run owns: data, assignments, posteriors, caches, and the
/// fitting RNG.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub dataset: Arc<Dataset>,
    pub z: BinaryFeatureMatrix,
    pub factors: FactorPosterior,
    pub hyper: Hyperparams,
    pub gamma: Option<GammaPosteriors>,
    /// Cache of `Z · E[A]`, kept current by every mutation.
    pub prediction: Array2<f64>,
    pub cfg: EngineConfig,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
}

impl ModelState {
    /// Fresh random state: assignments from `Bernoulli(init_density)`,
    /// active factor rows from folded normals, inactive rows at rest,
    /// columns compacted, caches built.
    pub fn init(
        dataset: Dataset,
        k_max: usize,
        hyper: Hyperparams,
        cfg: &EngineConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if k_max == 0 {
            return Err(Error::Shape("k_max must be at least 1".into()));
        }
        let (n, d) = (dataset.n_rows(), dataset.n_cols());
        let dataset = Arc::new(dataset);

        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        init_rng.set_stream(STREAM_INIT);

        let mut z = BinaryFeatureMatrix::new(n, k_max)?;
        for i in 0..n {
            for k in 0..k_max {
                if init_rng.gen_bool(cfg.init_density) {
                    z.set(i, k, true);
                }
            }
        }
        z.compact_columns();

        let gamma = hyper.gamma_priors.map(|p| GammaPosteriors::from_priors(&p));
        let hv = HyperView::of(&hyper, gamma.as_ref());
        let mut factors = FactorPosterior::new_at_rest(k_max, d, hv.sigma_a2());
        let mu_dist = Normal::new(0.0, cfg.init_mu_scale)
            .map_err(|e| Error::Domain(format!("init mu scale: {e}")))?;
        let sigma_dist = Normal::new(0.0, cfg.init_sigma_scale)
            .map_err(|e| Error::Domain(format!("init sigma scale: {e}")))?;
        for k in 0..z.k_plus() {
            for j in 0..d {
                factors.mu_tilde[[k, j]] = mu_dist.sample(&mut init_rng).abs();
                let s = sigma_dist.sample(&mut init_rng).abs().max(1e-6);
                factors.sigma2_tilde[[k, j]] = s * s;
            }
        }
        factors.refresh_all();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_FIT);

        let mut state = ModelState {
            dataset,
            z,
            factors,
            hyper,
            gamma,
            prediction: Array2::zeros((n, d)),
            cfg: cfg.clone(),
            rng,
            iteration: 0,
        };
        state.rebuild_prediction_cache();
        Ok(state)
    }

    /// Expectation view of the hyperparameters for the current state.
    pub fn hyper_view(&self) -> HyperView {
        HyperView::of(&self.hyper, self.gamma.as_ref())
    }

    /// Recompute all cached truncated-Gaussian moments from the raw factor
    /// parameters.
    pub fn refresh_factor_moments(&mut self) {
        self.factors.refresh_all();
    }

    /// Recompute `P = Z · E[A]` from scratch.
    pub fn rebuild_prediction_cache(&mut self) {
        let d = self.dataset.n_cols();
        self.prediction.fill(0.0);
        for i in 0..self.dataset.n_rows() {
            for k in self.z.iter_row(i) {
                for j in 0..d {
                    self.prediction[[i, j]] += self.factors.e_a[[k, j]];
                }
            }
        }
    }

    /// Current bound.
    pub fn compute_elbo(&self) -> ElboBreakdown {
        let hv = self.hyper_view();
        let gamma = match (&self.gamma, &self.hyper.gamma_priors) {
            (Some(g), Some(p)) => Some((g, p)),
            _ => None,
        };
        compute_elbo(&self.dataset, &self.z, &self.factors, &self.prediction, &hv, gamma)
    }

    /// Gaussian log density of observed entries at the posterior-mean
    /// reconstruction: `(total, per-entry mean)`.
    pub fn train_log_likelihood(&self) -> (f64, f64) {
        let hv = self.hyper_view();
        let per_entry_const = 0.5 * (hv.tau_x.ln() - LN_2PI);
        let mut total = 0.0;
        let fully = self.dataset.fully_observed();
        for ((i, j), &x) in self.dataset.x.indexed_iter() {
            if fully || self.dataset.observed[[i, j]] {
                let r = x - self.prediction[[i, j]];
                total += per_entry_const - 0.5 * hv.tau_x * r * r;
            }
        }
        (total, total / self.dataset.n_observed as f64)
    }

    /// Same plug-in density over held-out entries; `None` when the dataset
    /// is fully observed.
    pub fn heldout_log_likelihood(&self) -> Option<(f64, f64)> {
        if self.dataset.fully_observed() {
            return None;
        }
        let hv = self.hyper_view();
        let per_entry_const = 0.5 * (hv.tau_x.ln() - LN_2PI);
        let mut total = 0.0;
        let mut count = 0usize;
        for ((i, j), &x) in self.dataset.x.indexed_iter() {
            if !self.dataset.observed[[i, j]] {
                let r = x - self.prediction[[i, j]];
                total += per_entry_const - 0.5 * hv.tau_x * r * r;
                count += 1;
            }
        }
        Some((total, total / count as f64))
    }

    /// Verify the truncated bound against the full-slot computation: with
    /// every inactive column at rest, summing factor terms over all `k_max`
    /// slots must equal the active-column sum plus the analytic rest-column
    /// contribution (zero with fixed hyperparameters).
    fn check_truncation_consistency(&self) -> Result<()> {
        let hv = self.hyper_view();
        let d = self.dataset.n_cols();
        let per_dim_const = std::f64::consts::LN_2 - 0.5 * LN_2PI + 0.5 * hv.ln_tau_a;
        let mut active = 0.0;
        let mut all = 0.0;
        for k in 0..self.z.k_max() {
            let term = d as f64 * per_dim_const - 0.5 * hv.tau_a * self.factors.e_a2.row(k).sum()
                + self.factors.entropy.row(k).sum();
            all += term;
            if self.z.m(k) > 0 {
                active += term;
            }
        }
        let rest_per_column = 0.5 * d as f64 * (hv.ln_tau_a - hv.tau_a.ln());
        let expect = active + (self.z.k_max() - self.z.k_plus()) as f64 * rest_per_column;
        let scale = all.abs().max(expect.abs()).max(1.0);
        if (all - expect).abs() > 1e-9 * scale {
            return Err(Error::Numerical(format!(
                "truncation mismatch: full-slot factor terms {all} vs active-plus-rest {expect}"
            )));
        }
        Ok(())
    }

    fn verify_caches(&self) -> Result<()> {
        self.z.verify_consistency()?;
        let mut rebuilt = self.clone();
        rebuilt.rebuild_prediction_cache();
        let mut worst = 0.0f64;
        for (a, b) in self.prediction.iter().zip(rebuilt.prediction.iter()) {
            worst = worst.max((a - b).abs());
        }
        if worst > 1e-8 {
            return Err(Error::Numerical(format!(
                "prediction cache drifted by {worst} from Z·E[A]"
            )));
        }
        Ok(())
    }

    fn rebuild_prediction_row(&mut self, n: usize) {
        let d = self.dataset.n_cols();
        for j in 0..d {
            self.prediction[[n, j]] = 0.0;
        }
        let row: Vec<usize> = self.z.iter_row(n).collect();
        for k in row {
            for j in 0..d {
                self.prediction[[n, j]] += self.factors.e_a[[k, j]];
            }
        }
    }

    /// One full sweep. On any error — including a bound decrease beyond
    /// arithmetic tolerance — the state is rolled back to the sweep start
    /// and the error returned.
    pub fn sweep(&mut self) -> Result<SweepReport> {
        let t0 = Instant::now();
        let before = self.compute_elbo().total;
        let snapshot = self.clone();

        match self.sweep_phases() {
            Ok((rows_changed, gain_evals)) => {
                let after = self.compute_elbo().total;
                let slack = 1e-9 * before.abs().max(1.0);
                if after < before - slack {
                    *self = snapshot;
                    return Err(Error::Numerical(format!(
                        "bound decreased across sweep: {before} -> {after}"
                    )));
                }
                self.iteration += 1;
                let (_, train_mean) = self.train_log_likelihood();
                let test_mean = self.heldout_log_likelihood().map(|(_, m)| m);
                Ok(SweepReport {
                    iteration: self.iteration,
                    seconds: t0.elapsed().as_secs_f64(),
                    elbo: after,
                    train_ll_mean: train_mean,
                    test_ll_mean: test_mean,
                    k_plus: self.z.k_plus(),
                    rows_changed,
                    gain_evals,
                })
            }
            Err(e) => {
                *self = snapshot;
                Err(e)
            }
        }
    }

    fn sweep_phases(&mut self) -> Result<(usize, u64)> {
        let ds = Arc::clone(&self.dataset);
        let hv = self.hyper_view();

        // (a) Factor updates over active columns, Gauss-Seidel order.
        for k in 0..self.z.k_max() {
            if self.z.m(k) > 0 {
                update_factor_row(&mut self.factors, &mut self.prediction, &ds, &self.z, k, &hv);
            }
        }

        // (b) Row optimizations with the strictly-better guard.
        let mut builder = RowObjectiveBuilder::new(&ds, &self.factors, &hv);
        let mut rows_changed = 0usize;
        let mut gain_evals = 0u64;
        for n in 0..ds.n_rows() {
            let obj = builder.build(&ds, &self.z, &self.factors, &hv, n);
            let current_bits = self.z.row(n);
            let current_value = obj.eval(&current_bits);

            let (cand_bits, evals): (BitSet, u64) = match self.cfg.optimizer {
                RowOptimizer::LocalSearch => {
                    let out = ls_maximize(&obj, &self.cfg.ls);
                    (out.solution, out.gain_evals)
                }
                RowOptimizer::DoubleGreedy => {
                    let out = double_greedy_maximize(&obj, &mut self.rng);
                    (out.solution, out.gain_evals)
                }
                RowOptimizer::BruteForce => {
                    let out = brute_force_maximize(&obj)?;
                    (out.best, 1u64 << obj.ground())
                }
            };
            gain_evals += evals;

            // Exact re-evaluation keeps the guard free of incremental drift.
            let cand_value = obj.eval(&cand_bits);
            if cand_value > current_value {
                let changed = self.z.set_row(n, &cand_bits);
                if !changed.is_empty() {
                    rows_changed += 1;
                    for &k in &changed {
                        if self.z.m(k) == 0 {
                            // The emptied feature leaves the bound entirely;
                            // pin it back to rest so later rows see a clean
                            // candidate.
                            self.factors.reset_row_to_rest(k, hv.sigma_a2());
                            builder.refresh_feature(&ds, &self.factors, &hv, k);
                        }
                    }
                    self.rebuild_prediction_row(n);
                }
            }
        }

        // (c) Gamma posterior updates (each an exact coordinate step), then
        // re-pin inactive factor rows to the updated rest scale.
        if let Some(priors) = self.hyper.gamma_priors {
            let g = self.gamma.as_mut().expect("gamma posteriors exist when priors do");
            g.alpha = gamma_posterior_alpha(&priors.alpha, self.z.k_plus(), ds.n_rows());
            g.tau_a = gamma_posterior_tau_a(&priors.tau_a, &self.z, &self.factors);
            g.tau_x =
                gamma_posterior_tau_x(&priors.tau_x, &ds, &self.z, &self.factors, &self.prediction);
            let hv_new = self.hyper_view();
            for k in 0..self.z.k_max() {
                if self.z.m(k) == 0 {
                    self.factors.reset_row_to_rest(k, hv_new.sigma_a2());
                }
            }
        }

        // (d) Compaction: active columns to the front, factor rows in step.
        let perm = self.z.compact_columns();
        if perm.iter().enumerate().any(|(j, &k)| j != k) {
            self.factors.permute_rows(&perm);
        }
        self.check_truncation_consistency()?;
        if self.cfg.debug_recompute {
            self.verify_caches()?;
        }
        Ok((rows_changed, gain_evals))
    }

    /// Sweep until the block rule converges or a cap hits.
    pub fn fit(
        &mut self,
        conv: &ConvergenceConfig,
        mut on_sweep: impl FnMut(&SweepReport),
    ) -> Result<FitOutcome> {
        conv.validate()?;
        let start = Instant::now();
        let mut reports: Vec<SweepReport> = Vec::new();
        let mut ll_history: Vec<f64> = Vec::new();
        let status = loop {
            if self.iteration >= conv.max_iters {
                break FitStatus::IterationCap;
            }
            if start.elapsed().as_secs_f64() >= conv.max_seconds {
                break FitStatus::TimeCap;
            }
            let report = self.sweep()?;
            ll_history.push(report.train_ll_mean);
            on_sweep(&report);
            reports.push(report);
            if has_converged(&ll_history, conv) {
                break FitStatus::Converged;
            }
        };
        Ok(FitOutcome { status, reports })
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

/// Magic bytes of the checkpoint format.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MECK";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Parse("checkpoint truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn scheme_to_byte(s: PreprocessScheme) -> u8 {
    match s {
        PreprocessScheme::None => 0,
        PreprocessScheme::ZeroMin => 1,
        PreprocessScheme::ZeroMean => 2,
    }
}

fn scheme_from_byte(b: u8) -> Result<PreprocessScheme> {
    match b {
        0 => Ok(PreprocessScheme::None),
        1 => Ok(PreprocessScheme::ZeroMin),
        2 => Ok(PreprocessScheme::ZeroMean),
        other => Err(Error::Parse(format!("unknown preprocessing byte {other}"))),
    }
}

impl ModelState {
    /// Serialize the mutable state (not the data) with a trailing SHA-256.
    /// Loading requires the same dataset; the checkpoint records its shape
    /// and preprocessing for verification.
    pub fn save_checkpoint<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        push_u64(&mut buf, self.dataset.n_rows() as u64);
        push_u64(&mut buf, self.dataset.n_cols() as u64);
        push_u64(&mut buf, self.z.k_max() as u64);
        push_u64(&mut buf, self.z.k_plus() as u64);
        push_u64(&mut buf, self.iteration as u64);

        push_f64(&mut buf, self.hyper.alpha);
        push_f64(&mut buf, self.hyper.sigma_x);
        push_f64(&mut buf, self.hyper.sigma_a);
        match (&self.hyper.gamma_priors, &self.gamma) {
            (Some(p), Some(g)) => {
                buf.push(1);
                for gp in [&p.tau_x, &p.tau_a, &p.alpha] {
                    push_f64(&mut buf, gp.shape);
                    push_f64(&mut buf, gp.rate);
                }
                for gp in [&g.tau_x, &g.tau_a, &g.alpha] {
                    push_f64(&mut buf, gp.shape);
                    push_f64(&mut buf, gp.rate);
                }
            }
            _ => buf.push(0),
        }

        buf.push(scheme_to_byte(self.dataset.preprocessing.scheme));
        push_f64(&mut buf, self.dataset.preprocessing.shift_applied);

        buf.extend_from_slice(&self.rng.get_seed());
        push_u64(&mut buf, self.rng.get_stream());
        buf.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());

        for &w in self.z.raw_words() {
            push_u64(&mut buf, w);
        }
        for &v in self.factors.mu_tilde.iter() {
            push_f64(&mut buf, v);
        }
        for &v in self.factors.sigma2_tilde.iter() {
            push_f64(&mut buf, v);
        }

        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        std::fs::write(path.as_ref(), &buf)?;
        Ok(())
    }

    /// Restore a state saved by [`save_checkpoint`]. The dataset must match
    /// the one the checkpoint was written against (shape and preprocessing);
    /// the engine configuration is supplied by the caller, as it is not part
    /// of the persisted state.
    pub fn load_checkpoint<P: AsRef<Path>>(
        path: P,
        dataset: Dataset,
        cfg: &EngineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut raw = Vec::new();
        std::fs::File::open(path.as_ref())?.read_to_end(&mut raw)?;
        if raw.len() < 40 {
            return Err(Error::Parse("checkpoint shorter than header + checksum".into()));
        }
        let (body, stored_digest) = raw.split_at(raw.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != stored_digest {
            return Err(Error::Checksum("checkpoint SHA-256 mismatch".into()));
        }

        let mut c = Cursor { data: body, pos: 0 };
        if c.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(version));
        }
        let n = c.u64()? as usize;
        let d = c.u64()? as usize;
        let k_max = c.u64()? as usize;
        let k_plus = c.u64()? as usize;
        let iteration = c.u64()? as usize;
        if n != dataset.n_rows() || d != dataset.n_cols() {
            return Err(Error::Shape(format!(
                "checkpoint is for {n}x{d} data but dataset is {}x{}",
                dataset.n_rows(),
                dataset.n_cols()
            )));
        }

        let alpha = c.f64()?;
        let sigma_x = c.f64()?;
        let sigma_a = c.f64()?;
        let mut hyper = Hyperparams::fixed(alpha, sigma_x, sigma_a)?;
        let gamma = if c.u8()? == 1 {
            let mut vals = [0.0; 12];
            for v in &mut vals {
                *v = c.f64()?;
            }
            let prior = |s: f64, r: f64| crate::model::GammaPrior::new(s, r);
            hyper.gamma_priors = Some(crate::model::GammaPriors {
                tau_x: prior(vals[0], vals[1])?,
                tau_a: prior(vals[2], vals[3])?,
                alpha: prior(vals[4], vals[5])?,
            });
            Some(GammaPosteriors {
                tau_x: crate::variational::GammaPosterior { shape: vals[6], rate: vals[7] },
                tau_a: crate::variational::GammaPosterior { shape: vals[8], rate: vals[9] },
                alpha: crate::variational::GammaPosterior { shape: vals[10], rate: vals[11] },
            })
        } else {
            None
        };

        let scheme = scheme_from_byte(c.u8()?)?;
        let shift = c.f64()?;
        if scheme != dataset.preprocessing.scheme
            || shift.to_bits() != dataset.preprocessing.shift_applied.to_bits()
        {
            return Err(Error::Shape(format!(
                "checkpoint preprocessing ({scheme:?}, shift {shift}) does not match dataset ({:?}, shift {})",
                dataset.preprocessing.scheme, dataset.preprocessing.shift_applied
            )));
        }

        let seed: [u8; 32] = c.take(32)?.try_into().unwrap();
        let stream = c.u64()?;
        let word_pos = c.u128()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let words_per_row = BitSet::words_for(k_max);
        let mut words = Vec::with_capacity(n * words_per_row);
        for _ in 0..n * words_per_row {
            words.push(c.u64()?);
        }
        let z = BinaryFeatureMatrix::from_raw_words(n, k_max, words)?;
        if z.k_plus() != k_plus {
            return Err(Error::Parse(format!(
                "checkpoint stores K+ = {k_plus} but assignments contain {}",
                z.k_plus()
            )));
        }

        let mut mu = Array2::zeros((k_max, d));
        for v in mu.iter_mut() {
            *v = c.f64()?;
        }
        let mut sigma2 = Array2::zeros((k_max, d));
        for v in sigma2.iter_mut() {
            *v = c.f64()?;
        }
        if c.pos != body.len() {
            return Err(Error::Parse("checkpoint has trailing bytes".into()));
        }

        let mut factors = FactorPosterior {
            mu_tilde: mu,
            sigma2_tilde: sigma2,
            e_a: Array2::zeros((k_max, d)),
            e_a2: Array2::zeros((k_max, d)),
            entropy: Array2::zeros((k_max, d)),
        };
        factors.refresh_all();

        let mut state = ModelState {
            dataset: Arc::new(dataset),
            z,
            factors,
            hyper,
            gamma,
            prediction: Array2::zeros((n, d)),
            cfg: cfg.clone(),
            rng,
            iteration,
        };
        state.rebuild_prediction_cache();
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PreprocessScheme;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn toy_dataset() -> Dataset {
        let x = array![
            [1.2, 0.1, 0.9],
            [0.0, 1.1, 1.0],
            [1.1, 1.2, 1.9],
            [0.1, 0.0, 0.2],
        ];
        Dataset::new(x, None, PreprocessScheme::None).unwrap()
    }

    fn toy_state(seed: u64) -> ModelState {
        let hyper = Hyperparams::fixed(2.0, 0.7, 1.0).unwrap();
        ModelState::init(toy_dataset(), 5, hyper, &EngineConfig::default(), seed).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = toy_state(42);
        let b = toy_state(42);
        assert_eq!(a.z, b.z);
        assert_eq!(a.factors.mu_tilde, b.factors.mu_tilde);
        assert_eq!(a.factors.sigma2_tilde, b.factors.sigma2_tilde);
        let c = toy_state(43);
        assert!(a.z != c.z || a.factors.mu_tilde != c.factors.mu_tilde);
    }

    #[test]
    fn init_density_zero_gives_rest_state() {
        let cfg = EngineConfig { init_density: 0.0, ..EngineConfig::default() };
        let hyper = Hyperparams::fixed(2.0, 1.0, 2.0).unwrap();
        let state = ModelState::init(toy_dataset(), 4, hyper, &cfg, 7).unwrap();
        assert_eq!(state.z.k_plus(), 0);
        for k in 0..4 {
            for j in 0..3 {
                assert_eq!(state.factors.mu_tilde[[k, j]], 0.0);
                assert_relative_eq!(state.factors.sigma2_tilde[[k, j]], 4.0);
            }
        }
        assert!(state.prediction.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convergence_rule_examples() {
        let cfg = ConvergenceConfig { tol: 1e-4, block: 5, ..ConvergenceConfig::default() };
        // Constant history converges.
        assert!(has_converged(&[-1.0; 10], &cfg));
        // Short history cannot decide.
        assert!(!has_converged(&[-1.0; 9], &cfg));
        // Block means −10 and −9: multiplicative difference 0.1.
        let mut h = vec![-10.0; 5];
        h.extend_from_slice(&[-9.0; 5]);
        assert!(!has_converged(&h, &cfg));
        // Tiny relative change converges.
        let mut h = vec![-10.0; 5];
        h.extend_from_slice(&[-10.0000001; 5]);
        assert!(has_converged(&h, &cfg));
    }

    #[test]
    fn sweeps_do_not_decrease_the_bound() {
        let mut state = toy_state(3);
        let mut last = state.compute_elbo().total;
        for _ in 0..6 {
            let rep = state.sweep().unwrap();
            assert!(
                rep.elbo >= last - 1e-9 * last.abs().max(1.0),
                "bound fell: {last} -> {}",
                rep.elbo
            );
            last = rep.elbo;
        }
    }

    #[test]
    fn fixed_point_elbo_is_stable() {
        let mut state = toy_state(9);
        for _ in 0..30 {
            state.sweep().unwrap();
        }
        let a = state.sweep().unwrap().elbo;
        let b = state.sweep().unwrap().elbo;
        assert_relative_eq!(a, b, max_relative = 1e-10);
    }

    #[test]
    fn train_ll_of_perfect_prediction() {
        let mut state = toy_state(1);
        // Force a perfect reconstruction with unit noise.
        state.hyper = Hyperparams::fixed(2.0, 1.0, 1.0).unwrap();
        let x = state.dataset.x.clone();
        state.prediction.assign(&x);
        let (_, mean) = state.train_log_likelihood();
        assert_relative_eq!(mean, -0.918_938_533_204_672_7, max_relative = 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ck");
        let p2 = dir.path().join("b.ck");
        let mut state = toy_state(5);
        state.sweep().unwrap();
        state.save_checkpoint(&p1).unwrap();
        let loaded =
            ModelState::load_checkpoint(&p1, toy_dataset(), &EngineConfig::default()).unwrap();
        loaded.save_checkpoint(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(loaded.z, state.z);
        assert_eq!(loaded.iteration, state.iteration);
        assert_eq!(loaded.factors.mu_tilde, state.factors.mu_tilde);
    }

    #[test]
    fn checkpoint_detects_corruption_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ck");
        let state = toy_state(6);
        state.save_checkpoint(&p).unwrap();

        // Flip one payload byte.
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            ModelState::load_checkpoint(&p, toy_dataset(), &EngineConfig::default()),
            Err(Error::Checksum(_))
        ));

        // Wrong dataset shape.
        state.save_checkpoint(&p).unwrap();
        let small = Dataset::new(array![[1.0], [2.0]], None, PreprocessScheme::None).unwrap();
        assert!(matches!(
            ModelState::load_checkpoint(&p, small, &EngineConfig::default()),
            Err(Error::Shape(_))
        ));
    }
}
