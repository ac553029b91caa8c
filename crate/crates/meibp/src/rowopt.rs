//! Per-row assignment optimization.
//!
//! Fixing everything except one row of the assignment matrix, the bound as a
//! function of that row's feature set `S` is
//!
//! ```text
//! F(S) = Σ_{i∈S} ω_i − ½ Σ_{i,j∈S} w_ij − ln (K_base + #new(S))!
//! ```
//!
//! up to an additive constant, where `w_ij = τ_X Σ_d E[a_id] E[a_jd] ≥ 0`
//! (observed dimensions of the row), `ω_i` collects the linear likelihood
//! part, a variance correction compensating the diagonal of `w`, and the
//! prior gain of the feature, `K_base` counts features used by other rows,
//! and `#new(S)` counts selected features no other row uses. All three parts
//! have decreasing marginal gains, so `F` is submodular — generally
//! non-monotone and of arbitrary sign.
//!
//! Three maximizers are provided: deterministic approximate local search
//! (add/remove passes with a relative improvement threshold, returning the
//! better of the local optimum and its complement), randomized double
//! greedy, and exact brute force over small ground sets. The guarantees of
//! the first two are stated for nonnegative functions; both transfer here
//! relative to the normalization `F − min_S F` — local search because its
//! acceptance threshold uses a reference value that is itself an attained
//! value of `F`, double greedy because its decisions depend only on gains,
//! which any constant shift leaves unchanged.

use crate::bitset::BitSet;
use crate::error::{Error, Result};
use crate::model::{BinaryFeatureMatrix, Dataset};
use crate::numerics::log_factorial;
use crate::variational::{FactorPosterior, HyperView};
use rand::Rng;

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// One row's set function, materialized with dense pairwise weights.
#[derive(Debug, Clone)]
pub struct RowObjective {
    ground: usize,
    /// Symmetric nonnegative pairwise weights, row-major `ground × ground`,
    /// diagonal included.
    w: Vec<f64>,
    /// Modular weights (likelihood linear term + variance correction +
    /// prior gain).
    omega: Vec<f64>,
    /// `true` for features no other row uses (selecting one opens a feature).
    is_new: Vec<bool>,
    /// `ln (K_base + c)!` for `c = 0..=number of new candidates`.
    lf_new: Vec<f64>,
}

impl RowObjective {
    /// Assemble an objective from raw parts; `existing_count` is the number
    /// of features in use by other rows (`K_base`).
    pub fn from_parts(
        w: Vec<f64>,
        omega: Vec<f64>,
        is_new: Vec<bool>,
        existing_count: usize,
    ) -> Result<Self> {
        let k = omega.len();
        if k == 0 {
            return Err(Error::Shape("row objective needs a nonempty ground set".into()));
        }
        if w.len() != k * k || is_new.len() != k {
            return Err(Error::Shape(format!(
                "row objective parts disagree: |ω|={k}, |w|={}, |new|={}",
                w.len(),
                is_new.len()
            )));
        }
        let scale = w.iter().fold(1.0f64, |m, &v| m.max(v.abs()));
        for i in 0..k {
            for j in 0..i {
                if (w[i * k + j] - w[j * k + i]).abs() > 1e-9 * scale {
                    return Err(Error::Shape(format!("pairwise weights not symmetric at ({i}, {j})")));
                }
            }
        }
        if let Some(v) = w.iter().find(|&&v| v < -1e-9 * scale) {
            return Err(Error::Domain(format!("negative pairwise weight {v}")));
        }
        let n_new = is_new.iter().filter(|&&b| b).count();
        let lf_new: Vec<f64> =
            (0..=n_new).map(|c| log_factorial((existing_count + c) as u64)).collect();
        Ok(RowObjective { ground: k, w, omega, is_new, lf_new })
    }

    pub fn ground(&self) -> usize {
        self.ground
    }

    pub fn is_new(&self, k: usize) -> bool {
        self.is_new[k]
    }

    /// Pairwise interaction weight `w_ij` (inspection and property tests).
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w(i, j)
    }

    #[inline]
    fn w(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.ground + j]
    }

    /// Evaluate `F` at an arbitrary set, from scratch.
    pub fn eval(&self, bits: &BitSet) -> f64 {
        debug_assert_eq!(bits.capacity(), self.ground);
        let members: Vec<usize> = bits.iter().collect();
        let mut value = 0.0;
        let mut new_count = 0usize;
        for &i in &members {
            value += self.omega[i];
            if self.is_new[i] {
                new_count += 1;
            }
        }
        let mut quad = 0.0;
        for &i in &members {
            for &j in &members {
                quad += self.w(i, j);
            }
        }
        value - 0.5 * quad - self.lf_new[new_count]
    }
}

// ---------------------------------------------------------------------------
// Incremental solution state
// ---------------------------------------------------------------------------

/// A candidate set with the running sums needed for O(1) marginal gains:
/// `aux[j] = Σ_{i∈S} w_ij` and the current value of `F`.
#[derive(Debug, Clone)]
pub struct SolutionSet {
    pub members: BitSet,
    aux: Vec<f64>,
    pub value: f64,
    new_count: usize,
}

impl SolutionSet {
    pub fn empty(obj: &RowObjective) -> Self {
        SolutionSet {
            members: BitSet::new(obj.ground),
            aux: vec![0.0; obj.ground],
            value: -obj.lf_new[0],
            new_count: 0,
        }
    }

    pub fn full(obj: &RowObjective) -> Self {
        let mut s = Self::empty(obj);
        for k in 0..obj.ground {
            s.apply_add(obj, k);
        }
        s
    }

    pub fn from_bits(obj: &RowObjective, bits: &BitSet) -> Self {
        let mut s = Self::empty(obj);
        for k in bits.iter() {
            s.apply_add(obj, k);
        }
        s
    }

    /// Marginal gain of adding `k ∉ S`.
    #[inline]
    pub fn gain_add(&self, obj: &RowObjective, k: usize) -> f64 {
        debug_assert!(!self.members.contains(k));
        let mut g = obj.omega[k] - 0.5 * obj.w(k, k) - self.aux[k];
        if obj.is_new[k] {
            g -= obj.lf_new[self.new_count + 1] - obj.lf_new[self.new_count];
        }
        g
    }

    /// Marginal gain of removing `k ∈ S`.
    #[inline]
    pub fn gain_remove(&self, obj: &RowObjective, k: usize) -> f64 {
        debug_assert!(self.members.contains(k));
        let mut g = -obj.omega[k] + self.aux[k] - 0.5 * obj.w(k, k);
        if obj.is_new[k] {
            g += obj.lf_new[self.new_count] - obj.lf_new[self.new_count - 1];
        }
        g
    }

    pub fn apply_add(&mut self, obj: &RowObjective, k: usize) {
        let g = self.gain_add(obj, k);
        self.members.insert(k);
        for j in 0..obj.ground {
            self.aux[j] += obj.w(k, j);
        }
        if obj.is_new[k] {
            self.new_count += 1;
        }
        self.value += g;
    }

    pub fn apply_remove(&mut self, obj: &RowObjective, k: usize) {
        let g = self.gain_remove(obj, k);
        self.members.remove(k);
        for j in 0..obj.ground {
            self.aux[j] -= obj.w(k, j);
        }
        if obj.is_new[k] {
            self.new_count -= 1;
        }
        self.value += g;
    }
}

// ---------------------------------------------------------------------------
// Approximate local search
// ---------------------------------------------------------------------------

/// Which qualifying move a local-search scan applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanOrder {
    /// Apply the first move (lowest element index) whose gain clears the
    /// threshold. Cheapest per accepted move, but can commit to a small
    /// gain while a much larger one sits later in the scan.
    AscendingIndex,
    /// Evaluate every candidate move and apply the one with the largest
    /// gain, provided it clears the threshold. Costs a full scan per move
    /// but is far less likely to stall in a poor local optimum.
    BestFirst,
}

/// Tuning knobs of the local search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsConfig {
    /// Relative improvement threshold: a move must gain more than
    /// `ε/|V|² · (value − ref)` to be accepted. Smaller is slower and more
    /// precise; the approximation bound degrades by a factor `(1 − ε/|V|)`.
    pub epsilon: f64,
    /// Move-selection rule for the add and removal scans.
    pub scan_order: ScanOrder,
    /// Hard cap on removal rounds (each removal restarts the add phase).
    pub max_passes: usize,
}

impl Default for LsConfig {
    fn default() -> Self {
        LsConfig { epsilon: 0.1, scan_order: ScanOrder::BestFirst, max_passes: 64 }
    }
}

/// Result of one local-search maximization.
#[derive(Debug, Clone)]
pub struct LsOutcome {
    pub solution: BitSet,
    pub value: f64,
    /// Number of marginal-gain / full evaluations performed.
    pub gain_evals: u64,
    /// True if the pass cap stopped the search before a local optimum.
    pub pass_capped: bool,
}

/// Deterministic approximate local search: start from the best singleton,
/// repeatedly add an element whose gain exceeds the relative threshold
/// (the scan order decides whether the first or the best qualifying add is
/// taken; the scan restarts after each accept), then try one removal under
/// the same rule, and return the better of the local optimum and its
/// complement.
///
/// The threshold reference is the smaller of `F(∅)` and the worst singleton
/// value — an attained value of `F`, hence at least `min_S F`. Termination
/// at threshold `δ = ε/|V|²` therefore certifies an approximate local
/// optimum of the nonnegative normalization `F − min_S F` with the same
/// `δ`, which is what the `⅓(1−ε/|V|)` guarantee needs.
pub fn ls_maximize(obj: &RowObjective, cfg: &LsConfig) -> LsOutcome {
    let n = obj.ground();
    let mut evals: u64 = 0;

    // Singleton scan: initializer and normalization reference in one pass.
    let empty_value = -obj.lf_new[0];
    let probe = SolutionSet::empty(obj);
    let mut best_k = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    let mut worst_v = f64::INFINITY;
    for k in 0..n {
        let v = empty_value + probe.gain_add(obj, k);
        evals += 1;
        if v > best_v {
            best_v = v;
            best_k = k;
        }
        if v < worst_v {
            worst_v = v;
        }
    }
    let reference = empty_value.min(worst_v);
    let delta = cfg.epsilon / (n * n) as f64;

    let mut sol = SolutionSet::empty(obj);
    sol.apply_add(obj, best_k);

    let mut passes = 0usize;
    let mut pass_capped = false;
    loop {
        passes += 1;
        if passes > cfg.max_passes {
            pass_capped = true;
            break;
        }
        // Add phase: restart the scan after each accepted add. Each accept
        // grows the set, so this phase performs at most |V| adds.
        loop {
            let threshold = delta * (sol.value - reference);
            let mut chosen: Option<usize> = None;
            let mut chosen_gain = f64::NEG_INFINITY;
            for k in 0..n {
                if sol.members.contains(k) {
                    continue;
                }
                let g = sol.gain_add(obj, k);
                evals += 1;
                if g > threshold && g > chosen_gain {
                    chosen = Some(k);
                    chosen_gain = g;
                    if cfg.scan_order == ScanOrder::AscendingIndex {
                        break;
                    }
                }
            }
            match chosen {
                Some(k) => sol.apply_add(obj, k),
                None => break,
            }
        }
        // Removal phase: an accepted removal sends us back to adds.
        let threshold = delta * (sol.value - reference);
        let mut chosen: Option<usize> = None;
        let mut chosen_gain = f64::NEG_INFINITY;
        for k in 0..n {
            if !sol.members.contains(k) {
                continue;
            }
            let g = sol.gain_remove(obj, k);
            evals += 1;
            if g > threshold && g > chosen_gain {
                chosen = Some(k);
                chosen_gain = g;
                if cfg.scan_order == ScanOrder::AscendingIndex {
                    break;
                }
            }
        }
        match chosen {
            Some(k) => sol.apply_remove(obj, k),
            None => break,
        }
    }

    // The guarantee is for the better of the local optimum and its
    // complement.
    let complement = sol.members.complement();
    let comp_value = obj.eval(&complement);
    evals += 1;
    if comp_value > sol.value {
        LsOutcome { solution: complement, value: comp_value, gain_evals: evals, pass_capped }
    } else {
        LsOutcome { solution: sol.members, value: sol.value, gain_evals: evals, pass_capped }
    }
}

// ---------------------------------------------------------------------------
// Double greedy
// ---------------------------------------------------------------------------

/// Result of a double-greedy maximization.
#[derive(Debug, Clone)]
pub struct DgOutcome {
    pub solution: BitSet,
    pub value: f64,
    pub gain_evals: u64,
}

/// Randomized double greedy: sweep the ground set once, keeping a growing
/// lower set and a shrinking upper set, and include each element with
/// probability proportional to its clipped add gain versus its clipped
/// remove gain. In expectation the result attains half the optimum of the
/// nonnegative normalization; both clipped gains zero means either choice
/// is free and the element is excluded.
pub fn double_greedy_maximize<R: Rng>(obj: &RowObjective, rng: &mut R) -> DgOutcome {
    let n = obj.ground();
    let mut lower = SolutionSet::empty(obj);
    let mut upper = SolutionSet::full(obj);
    let mut evals: u64 = 0;
    for k in 0..n {
        let a = lower.gain_add(obj, k).max(0.0);
        let b = upper.gain_remove(obj, k).max(0.0);
        evals += 2;
        let include = if a + b <= 0.0 {
            false
        } else {
            rng.gen_range(0.0..1.0) < a / (a + b)
        };
        if include {
            lower.apply_add(obj, k);
        } else {
            upper.apply_remove(obj, k);
        }
    }
    debug_assert_eq!(lower.members, upper.members);
    DgOutcome { solution: lower.members, value: lower.value, gain_evals: evals }
}

// ---------------------------------------------------------------------------
// Brute force
// ---------------------------------------------------------------------------

/// Largest ground set brute force will enumerate.
pub const BRUTE_FORCE_MAX_GROUND: usize = 25;

/// Exact maximum (and minimum, for normalization) by Gray-code enumeration.
#[derive(Debug, Clone)]
pub struct BruteForceResult {
    pub best: BitSet,
    pub best_value: f64,
    /// `min_S F(S)` — the normalization constant in approximation bounds.
    pub min_value: f64,
}

pub fn brute_force_maximize(obj: &RowObjective) -> Result<BruteForceResult> {
    let n = obj.ground();
    if n > BRUTE_FORCE_MAX_GROUND {
        return Err(Error::Capacity(format!(
            "brute force over {n} features would enumerate 2^{n} sets (cap {BRUTE_FORCE_MAX_GROUND})"
        )));
    }
    let mut sol = SolutionSet::empty(obj);
    let mut best_bits = sol.members.clone();
    let mut best_value = sol.value;
    let mut min_value = sol.value;
    // Gray code: step i flips the number of trailing ones of i-1... more
    // simply, flip bit = trailing zeros of i, visiting every subset once.
    let total: u64 = 1 << n;
    for i in 1..total {
        let k = i.trailing_zeros() as usize;
        if sol.members.contains(k) {
            sol.apply_remove(obj, k);
        } else {
            sol.apply_add(obj, k);
        }
        if sol.value > best_value {
            best_value = sol.value;
            best_bits = sol.members.clone();
        }
        if sol.value < min_value {
            min_value = sol.value;
        }
    }
    // Re-evaluate the winner from scratch so the reported value carries no
    // incremental drift.
    let best_value = obj.eval(&best_bits);
    Ok(BruteForceResult { best: best_bits, best_value, min_value })
}

/// Uniformly random subset (baseline in benchmark comparisons).
pub fn random_solution<R: Rng>(obj: &RowObjective, rng: &mut R) -> (BitSet, f64) {
    let mut bits = BitSet::new(obj.ground());
    for k in 0..obj.ground() {
        if rng.gen_bool(0.5) {
            bits.insert(k);
        }
    }
    let v = obj.eval(&bits);
    (bits, v)
}

// ---------------------------------------------------------------------------
// Building objectives from model state
// ---------------------------------------------------------------------------

/// Per-sweep caches for assembling row objectives: one pairwise-weight
/// matrix and one variance-correction vector per observation pattern. Factor
/// moments only change between row updates when a feature is reset, so the
/// engine builds this once per sweep and refreshes single features as
/// needed.
#[derive(Debug, Clone)]
pub struct RowObjectiveBuilder {
    k_max: usize,
    /// Per pattern: `τ_X Φ Φᵀ` over the pattern's observed dimensions.
    grams: Vec<Vec<f64>>,
    /// Per pattern, per feature: `½ τ_X Σ_d (E[a]² − E[a²])`.
    corrections: Vec<Vec<f64>>,
}

impl RowObjectiveBuilder {
    pub fn new(dataset: &Dataset, factors: &FactorPosterior, hyper: &HyperView) -> Self {
        let k_max = factors.k_max();
        let mut b = RowObjectiveBuilder {
            k_max,
            grams: vec![vec![0.0; k_max * k_max]; dataset.patterns.len()],
            corrections: vec![vec![0.0; k_max]; dataset.patterns.len()],
        };
        for p in 0..dataset.patterns.len() {
            b.rebuild_pattern(dataset, factors, hyper, p);
        }
        b
    }

    fn rebuild_pattern(
        &mut self,
        dataset: &Dataset,
        factors: &FactorPosterior,
        hyper: &HyperView,
        p: usize,
    ) {
        let dims = &dataset.patterns[p].dims;
        let k_max = self.k_max;
        let gram = &mut self.grams[p];
        for i in 0..k_max {
            for j in 0..=i {
                let mut dot = 0.0;
                for &d in dims {
                    dot += factors.e_a[[i, d]] * factors.e_a[[j, d]];
                }
                let v = hyper.tau_x * dot;
                gram[i * k_max + j] = v;
                gram[j * k_max + i] = v;
            }
        }
        let corr = &mut self.corrections[p];
        for (k, c) in corr.iter_mut().enumerate() {
            let mut s = 0.0;
            for &d in dims {
                s += factors.e_a[[k, d]] * factors.e_a[[k, d]] - factors.e_a2[[k, d]];
            }
            *c = 0.5 * hyper.tau_x * s;
        }
    }

    /// Refresh the cached weights of one feature after its posterior changed
    /// mid-sweep (feature reset).
    pub fn refresh_feature(
        &mut self,
        dataset: &Dataset,
        factors: &FactorPosterior,
        hyper: &HyperView,
        k: usize,
    ) {
        let k_max = self.k_max;
        for p in 0..dataset.patterns.len() {
            let dims = &dataset.patterns[p].dims;
            let gram = &mut self.grams[p];
            for j in 0..k_max {
                let mut dot = 0.0;
                for &d in dims {
                    dot += factors.e_a[[k, d]] * factors.e_a[[j, d]];
                }
                let v = hyper.tau_x * dot;
                gram[k * k_max + j] = v;
                gram[j * k_max + k] = v;
            }
            let mut s = 0.0;
            for &d in dims {
                s += factors.e_a[[k, d]] * factors.e_a[[k, d]] - factors.e_a2[[k, d]];
            }
            self.corrections[p][k] = 0.5 * hyper.tau_x * s;
        }
    }

    /// Assemble row `n`'s objective from the current assignments. Column
    /// counts exclude the row itself (leave-one-out by arithmetic).
    pub fn build(
        &self,
        dataset: &Dataset,
        zm: &BinaryFeatureMatrix,
        factors: &FactorPosterior,
        hyper: &HyperView,
        n: usize,
    ) -> RowObjective {
        let k_max = self.k_max;
        let p = dataset.pattern_of_row[n];
        let dims = &dataset.patterns[p].dims;
        let n_rows = dataset.n_rows() as f64;
        let eta = hyper.new_feature_bonus(dataset.n_cols());

        let mut omega = vec![0.0; k_max];
        let mut is_new = vec![false; k_max];
        let mut existing = 0usize;
        for k in 0..k_max {
            let m_without = zm.m(k) - u32::from(zm.get(n, k));
            let mut o = self.corrections[p][k];
            let mut dot = 0.0;
            for &d in dims {
                dot += factors.e_a[[k, d]] * dataset.x[[n, d]];
            }
            o += hyper.tau_x * dot;
            if m_without > 0 {
                o += (m_without as f64).ln() - (n_rows - m_without as f64).ln();
                existing += 1;
            } else {
                o += -n_rows.ln() + eta;
                is_new[k] = true;
            }
            omega[k] = o;
        }

        RowObjective::from_parts(self.grams[p].clone(), omega, is_new, existing)
            .expect("builder always produces consistent parts")
    }
}
