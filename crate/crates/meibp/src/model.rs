//! Data containers and the feature-assignment prior.
//!
//! A [`Dataset`] holds the observation matrix together with an observation
//! mask (held-out entries are *present* in the file but excluded from every
//! likelihood sum) and records the preprocessing shift applied to it. The
//! binary feature assignments live in a [`BinaryFeatureMatrix`]: row bitsets
//! plus maintained column counts, so leave-one-out statistics and column
//! compaction stay cheap.
//!
//! Two log priors over feature matrices are provided, both exchangeable over
//! rows and invariant to column order:
//!
//! * [`log_prior_shifted`] — equivalence classes that keep only the active
//!   columns in their original relative order:
//!   `K+ ln α − ln K+! − α H_N + Σ_k ln[(N−m_k)! (m_k−1)! / N!]`.
//! * [`log_prior_lof`] — the left-ordered-form class, which replaces
//!   `ln K+!` by `Σ_h ln K_h!` where `K_h` counts identical columns.

use crate::bitset::BitSet;
use crate::error::{Error, Result};
use crate::numerics::{harmonic, log_factorial};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// How raw data is shifted before fitting. The nonnegative factor model wants
/// data whose support starts at zero, hence the default `ZeroMin`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PreprocessScheme {
    /// Use values as-is.
    None,
    /// Subtract the minimum over observed entries (observed minimum becomes 0).
    ZeroMin,
    /// Subtract the mean over observed entries.
    ZeroMean,
}

impl std::str::FromStr for PreprocessScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PreprocessScheme::None),
            "zero-min" => Ok(PreprocessScheme::ZeroMin),
            "zero-mean" => Ok(PreprocessScheme::ZeroMean),
            other => Err(Error::Parse(format!(
                "unknown preprocessing scheme '{other}' (expected none|zero-min|zero-mean)"
            ))),
        }
    }
}

/// Record of the preprocessing applied to a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub scheme: PreprocessScheme,
    /// Value subtracted from every entry (0 for `None`).
    pub shift_applied: f64,
}

/// Rows sharing an observation pattern, so per-pattern caches (gram matrices,
/// variance corrections) are computed once instead of per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedPattern {
    /// Observed column indices, ascending.
    pub dims: Vec<usize>,
    /// Number of rows with this pattern.
    pub row_count: usize,
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Observation matrix plus mask, preprocessing record, and derived caches.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// N×D data values after preprocessing. Held-out entries keep their
    /// values (used only for held-out evaluation, never for fitting).
    pub x: Array2<f64>,
    /// `true` where the entry participates in likelihood sums.
    pub observed: Array2<bool>,
    pub preprocessing: Preprocessing,
    /// Count of observed entries.
    pub n_observed: usize,
    /// Pattern id per row.
    pub pattern_of_row: Vec<usize>,
    /// Distinct observation patterns, in first-seen row order.
    pub patterns: Vec<ObservedPattern>,
}

impl Dataset {
    /// Build a dataset. `observed = None` means fully observed. The scheme is
    /// applied here; raw values must be finite on observed entries.
    pub fn new(
        x: Array2<f64>,
        observed: Option<Array2<bool>>,
        scheme: PreprocessScheme,
    ) -> Result<Self> {
        let (n, d) = x.dim();
        if n == 0 || d == 0 {
            return Err(Error::Shape(format!("dataset must be nonempty, got {n}x{d}")));
        }
        let observed = match observed {
            Some(o) => {
                if o.dim() != (n, d) {
                    return Err(Error::Shape(format!(
                        "mask shape {:?} does not match data shape {:?}",
                        o.dim(),
                        x.dim()
                    )));
                }
                o
            }
            None => Array2::from_elem((n, d), true),
        };
        let n_observed = observed.iter().filter(|&&o| o).count();
        if n_observed == 0 {
            return Err(Error::Domain("dataset has no observed entries".into()));
        }
        for ((i, j), &v) in x.indexed_iter() {
            if observed[[i, j]] && !v.is_finite() {
                return Err(Error::Domain(format!("non-finite value {v} at observed entry ({i}, {j})")));
            }
        }

        let mut ds = Dataset {
            x,
            observed,
            preprocessing: Preprocessing { scheme: PreprocessScheme::None, shift_applied: 0.0 },
            n_observed,
            pattern_of_row: Vec::new(),
            patterns: Vec::new(),
        };
        ds.rebuild_patterns();
        ds.apply_scheme(scheme);
        Ok(ds)
    }

    fn apply_scheme(&mut self, scheme: PreprocessScheme) {
        let shift = match scheme {
            PreprocessScheme::None => 0.0,
            PreprocessScheme::ZeroMin => {
                let mut min = f64::INFINITY;
                for ((i, j), &v) in self.x.indexed_iter() {
                    if self.observed[[i, j]] && v < min {
                        min = v;
                    }
                }
                min
            }
            PreprocessScheme::ZeroMean => {
                let mut sum = 0.0;
                for ((i, j), &v) in self.x.indexed_iter() {
                    if self.observed[[i, j]] {
                        sum += v;
                    }
                }
                sum / self.n_observed as f64
            }
        };
        if shift != 0.0 {
            self.x.mapv_inplace(|v| v - shift);
        }
        self.preprocessing = Preprocessing { scheme, shift_applied: shift };
    }

    /// Re-derive the dataset under a different scheme (undoes the current
    /// shift first, so schemes compose correctly).
    pub fn with_preprocessing(mut self, scheme: PreprocessScheme) -> Result<Self> {
        let old = self.preprocessing.shift_applied;
        if old != 0.0 {
            self.x.mapv_inplace(|v| v + old);
        }
        self.preprocessing = Preprocessing { scheme: PreprocessScheme::None, shift_applied: 0.0 };
        self.apply_scheme(scheme);
        Ok(self)
    }

    fn rebuild_patterns(&mut self) {
        let (n, _d) = self.x.dim();
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        self.pattern_of_row = Vec::with_capacity(n);
        self.patterns = Vec::new();
        for i in 0..n {
            let dims: Vec<usize> = self
                .observed
                .row(i)
                .iter()
                .enumerate()
                .filter_map(|(j, &o)| if o { Some(j) } else { None })
                .collect();
            let id = match index.get(&dims) {
                Some(&id) => {
                    self.patterns[id].row_count += 1;
                    id
                }
                None => {
                    let id = self.patterns.len();
                    index.insert(dims.clone(), id);
                    self.patterns.push(ObservedPattern { dims, row_count: 1 });
                    id
                }
            };
            self.pattern_of_row.push(id);
        }
    }

    /// Apply a holdout mask (marks listed entries unobserved) and rebuild the
    /// derived caches. Fails if any index is out of range.
    pub fn apply_holdout(&mut self, mask: &HoldoutMask) -> Result<()> {
        let (n, d) = self.x.dim();
        if mask.n_rows != n || mask.n_cols != d {
            return Err(Error::Shape(format!(
                "mask is for {}x{} data but dataset is {n}x{d}",
                mask.n_rows, mask.n_cols
            )));
        }
        for &(i, j) in &mask.entries {
            self.observed[[i as usize, j as usize]] = false;
        }
        self.n_observed = self.observed.iter().filter(|&&o| o).count();
        if self.n_observed == 0 {
            return Err(Error::Domain("holdout mask leaves no observed entries".into()));
        }
        self.rebuild_patterns();
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn fully_observed(&self) -> bool {
        self.n_observed == self.x.len()
    }

    /// Population standard deviation over observed entries (used by the
    /// `¾·σ` automatic scale rule).
    pub fn observed_std(&self) -> f64 {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for ((i, j), &v) in self.x.indexed_iter() {
            if self.observed[[i, j]] {
                sum += v;
                sumsq += v * v;
            }
        }
        let n = self.n_observed as f64;
        let mean = sum / n;
        (sumsq / n - mean * mean).max(0.0).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Holdout mask + file I/O
// ---------------------------------------------------------------------------

/// Explicit list of held-out entries (zero-based `(row, col)` pairs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoldoutMask {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Sorted row-major, no duplicates.
    pub entries: Vec<(u32, u32)>,
}

impl HoldoutMask {
    pub fn new(n_rows: usize, n_cols: usize, mut entries: Vec<(u32, u32)>) -> Result<Self> {
        entries.sort_unstable();
        for w in entries.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Domain(format!("duplicate mask entry {:?}", w[0])));
            }
        }
        for &(i, j) in &entries {
            if i as usize >= n_rows || j as usize >= n_cols {
                return Err(Error::Shape(format!(
                    "mask entry ({i}, {j}) outside {n_rows}x{n_cols}"
                )));
            }
        }
        Ok(HoldoutMask { n_rows, n_cols, entries })
    }

    /// Write as CSV with a `row,col` header.
    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_record(["row", "col"])?;
        for &(i, j) in &self.entries {
            w.write_record([i.to_string(), j.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a `(row, col)` CSV; a non-numeric first line is treated as a
    /// header. Dimensions are supplied by the caller (the data file knows
    /// them, the mask file does not).
    pub fn load_csv<P: AsRef<Path>>(path: P, n_rows: usize, n_cols: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(false)
            .from_path(path.as_ref())
            .map_err(|e| Error::Parse(e.to_string()))?;
        let mut entries = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::Parse(format!(
                    "mask line {}: expected 2 fields, got {}",
                    line + 1,
                    rec.len()
                )));
            }
            let parsed: std::result::Result<Vec<u32>, _> =
                rec.iter().map(|f| f.trim().parse::<u32>()).collect();
            match parsed {
                Ok(v) => entries.push((v[0], v[1])),
                Err(e) => {
                    if line == 0 {
                        continue; // header line
                    }
                    return Err(Error::Parse(format!("mask line {}: {e}", line + 1)));
                }
            }
        }
        HoldoutMask::new(n_rows, n_cols, entries)
    }
}

/// Magic bytes of the raw binary matrix format.
pub const MATRIX_MAGIC: &[u8; 4] = b"MEIB";

/// Write a matrix in the raw binary format: a 16-byte header (magic `MEIB`,
/// u32 row count, u32 column count, 4 reserved zero bytes, little-endian)
/// followed by row-major little-endian f64 values.
pub fn save_matrix_bin<P: AsRef<Path>>(path: P, x: &Array2<f64>) -> Result<()> {
    let f = std::fs::File::create(path.as_ref())?;
    let mut w = BufWriter::new(f);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(x.nrows() as u32).to_le_bytes())?;
    w.write_all(&(x.ncols() as u32).to_le_bytes())?;
    w.write_all(&[0u8; 4])?;
    for &v in x.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read the raw binary matrix format written by [`save_matrix_bin`].
pub fn load_matrix_bin<P: AsRef<Path>>(path: P) -> Result<Array2<f64>> {
    let f = std::fs::File::open(path.as_ref())?;
    let mut r = BufReader::new(f);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| Error::Parse("binary matrix: file shorter than 16-byte header".into()))?;
    if &header[0..4] != MATRIX_MAGIC {
        return Err(Error::Parse(format!(
            "binary matrix: bad magic {:?} (expected {:?})",
            &header[0..4],
            MATRIX_MAGIC
        )));
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; n * d * 8];
    r.read_exact(&mut buf).map_err(|_| {
        Error::Parse(format!("binary matrix: expected {n}x{d} f64 payload, file truncated"))
    })?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Parse("binary matrix: trailing bytes after payload".into()));
    }
    let vals: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((n, d), vals)
        .map_err(|e| Error::Shape(format!("binary matrix: {e}")))
}

/// Write a matrix as CSV with a generated `x0,x1,...` header.
pub fn save_matrix_csv<P: AsRef<Path>>(path: P, x: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Parse(e.to_string()))?;
    let header: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
    w.write_record(&header)?;
    for row in x.rows() {
        let rec: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a CSV matrix: one observation per row, all rows the same width. A
/// first line that fails numeric parsing is treated as a header.
pub fn load_matrix_csv<P: AsRef<Path>>(path: P) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path.as_ref())
        .map_err(|e| Error::Parse(e.to_string()))?;
    let mut vals: Vec<f64> = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0usize;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> =
            rec.iter().map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => {
                match width {
                    None => width = Some(v.len()),
                    Some(w) if w != v.len() => {
                        return Err(Error::Parse(format!(
                            "csv line {}: expected {w} fields, got {}",
                            line + 1,
                            v.len()
                        )));
                    }
                    _ => {}
                }
                vals.extend_from_slice(&v);
                rows += 1;
            }
            Err(e) => {
                if line == 0 {
                    continue; // header
                }
                return Err(Error::Parse(format!("csv line {}: {e}", line + 1)));
            }
        }
    }
    let width = width.ok_or_else(|| Error::Parse("csv matrix: no data rows".into()))?;
    Array2::from_shape_vec((rows, width), vals).map_err(|e| Error::Shape(format!("csv matrix: {e}")))
}

/// Load a data matrix, dispatching on the binary magic (anything else is
/// parsed as CSV).
pub fn load_matrix_auto<P: AsRef<Path>>(path: P) -> Result<Array2<f64>> {
    let mut f = std::fs::File::open(path.as_ref())?;
    let mut magic = [0u8; 4];
    let read = f.read(&mut magic)?;
    drop(f);
    if read == 4 && &magic == MATRIX_MAGIC {
        load_matrix_bin(path)
    } else {
        load_matrix_csv(path)
    }
}

// ---------------------------------------------------------------------------
// Binary feature matrix
// ---------------------------------------------------------------------------

/// N×K binary feature assignments: row bitsets plus maintained column counts
/// `m_k` and the number of active columns `K+`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryFeatureMatrix {
    n_rows: usize,
    k_max: usize,
    words_per_row: usize,
    bits: Vec<u64>,
    m: Vec<u32>,
    k_plus: usize,
}

impl BinaryFeatureMatrix {
    pub fn new(n_rows: usize, k_max: usize) -> Result<Self> {
        if n_rows == 0 || k_max == 0 {
            return Err(Error::Shape(format!(
                "feature matrix must be nonempty, got {n_rows}x{k_max}"
            )));
        }
        let words_per_row = BitSet::words_for(k_max);
        Ok(BinaryFeatureMatrix {
            n_rows,
            k_max,
            words_per_row,
            bits: vec![0; n_rows * words_per_row],
            m: vec![0; k_max],
            k_plus: 0,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Number of active (nonempty) columns.
    pub fn k_plus(&self) -> usize {
        self.k_plus
    }

    /// Column count `m_k`.
    #[inline]
    pub fn m(&self, k: usize) -> u32 {
        self.m[k]
    }

    pub fn m_slice(&self) -> &[u32] {
        &self.m
    }

    #[inline]
    pub fn get(&self, n: usize, k: usize) -> bool {
        debug_assert!(n < self.n_rows && k < self.k_max);
        self.bits[n * self.words_per_row + k / 64] >> (k % 64) & 1 == 1
    }

    /// Set one assignment, keeping `m` and `K+` consistent.
    pub fn set(&mut self, n: usize, k: usize, value: bool) {
        let old = self.get(n, k);
        if old == value {
            return;
        }
        let word = &mut self.bits[n * self.words_per_row + k / 64];
        if value {
            *word |= 1 << (k % 64);
            self.m[k] += 1;
            if self.m[k] == 1 {
                self.k_plus += 1;
            }
        } else {
            *word &= !(1 << (k % 64));
            self.m[k] -= 1;
            if self.m[k] == 0 {
                self.k_plus -= 1;
            }
        }
    }

    /// Copy of row `n` as a bit set over `0..k_max`.
    pub fn row(&self, n: usize) -> BitSet {
        let start = n * self.words_per_row;
        BitSet::from_words(self.bits[start..start + self.words_per_row].to_vec(), self.k_max)
    }

    /// Iterate active feature indices of row `n` in increasing order.
    pub fn iter_row(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        let start = n * self.words_per_row;
        self.bits[start..start + self.words_per_row]
            .iter()
            .enumerate()
            .flat_map(|(wi, &w)| {
                let mut w = w;
                std::iter::from_fn(move || {
                    if w == 0 {
                        None
                    } else {
                        let b = w.trailing_zeros() as usize;
                        w &= w - 1;
                        Some(wi * 64 + b)
                    }
                })
            })
    }

    /// Number of active features in row `n`.
    pub fn row_len(&self, n: usize) -> usize {
        let start = n * self.words_per_row;
        self.bits[start..start + self.words_per_row]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    /// Overwrite row `n` from a bit set, returning the changed columns.
    pub fn set_row(&mut self, n: usize, new_row: &BitSet) -> Vec<usize> {
        debug_assert_eq!(new_row.capacity(), self.k_max);
        let mut changed = Vec::new();
        for k in 0..self.k_max {
            let nv = new_row.contains(k);
            if self.get(n, k) != nv {
                self.set(n, k, nv);
                changed.push(k);
            }
        }
        changed
    }

    /// Column bit pattern of feature `k` across rows (row 0 in the lowest
    /// bit of word 0). Used to group identical columns.
    fn column_pattern(&self, k: usize) -> Vec<u64> {
        let mut words = vec![0u64; BitSet::words_for(self.n_rows)];
        for n in 0..self.n_rows {
            if self.get(n, k) {
                words[n / 64] |= 1 << (n % 64);
            }
        }
        words
    }

    /// Reorder columns so active ones come first, each group keeping its
    /// original relative order. Returns the applied permutation `perm`, where
    /// new column `j` is old column `perm[j]` — callers must apply the same
    /// row permutation to any per-feature state (factor posteriors).
    pub fn compact_columns(&mut self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.k_max).filter(|&k| self.m[k] > 0).collect();
        perm.extend((0..self.k_max).filter(|&k| self.m[k] == 0));
        let identity = perm.iter().enumerate().all(|(j, &k)| j == k);
        if !identity {
            let mut new_bits = vec![0u64; self.bits.len()];
            for n in 0..self.n_rows {
                let base = n * self.words_per_row;
                for (j, &k) in perm.iter().enumerate() {
                    if self.get(n, k) {
                        new_bits[base + j / 64] |= 1 << (j % 64);
                    }
                }
            }
            self.bits = new_bits;
            self.m = perm.iter().map(|&k| self.m[k]).collect();
        }
        debug_assert!(self.m[..self.k_plus].iter().all(|&m| m > 0));
        debug_assert!(self.m[self.k_plus..].iter().all(|&m| m == 0));
        perm
    }

    /// Recount `m` and `K+` from the raw bits; errors if the maintained
    /// statistics drifted (used by the engine's debug recompute mode).
    pub fn verify_consistency(&self) -> Result<()> {
        let mut m = vec![0u32; self.k_max];
        for n in 0..self.n_rows {
            for k in self.iter_row(n) {
                m[k] += 1;
            }
        }
        if m != self.m {
            return Err(Error::Numerical("feature matrix column counts drifted".into()));
        }
        let k_plus = m.iter().filter(|&&c| c > 0).count();
        if k_plus != self.k_plus {
            return Err(Error::Numerical("feature matrix K+ drifted".into()));
        }
        Ok(())
    }

    /// Dense copy (tests and reports).
    pub fn to_dense(&self) -> Array2<bool> {
        let mut out = Array2::from_elem((self.n_rows, self.k_max), false);
        for n in 0..self.n_rows {
            for k in self.iter_row(n) {
                out[[n, k]] = true;
            }
        }
        out
    }

    /// Build from a dense boolean matrix (tests and generators).
    pub fn from_dense(dense: &Array2<bool>) -> Result<Self> {
        let (n, k) = dense.dim();
        let mut zm = Self::new(n, k)?;
        for ((i, j), &v) in dense.indexed_iter() {
            if v {
                zm.set(i, j, true);
            }
        }
        Ok(zm)
    }

    /// Raw row-major bit words (checkpoint serialization).
    pub fn raw_words(&self) -> &[u64] {
        &self.bits
    }

    /// Rebuild from raw bit words, recounting `m` and `K+`. Errors if the
    /// word count does not match the shape or a row has bits beyond `k_max`.
    pub fn from_raw_words(n_rows: usize, k_max: usize, bits: Vec<u64>) -> Result<Self> {
        if n_rows == 0 || k_max == 0 {
            return Err(Error::Shape(format!(
                "feature matrix must be nonempty, got {n_rows}x{k_max}"
            )));
        }
        let words_per_row = BitSet::words_for(k_max);
        if bits.len() != n_rows * words_per_row {
            return Err(Error::Shape(format!(
                "expected {} bit words for a {n_rows}x{k_max} matrix, got {}",
                n_rows * words_per_row,
                bits.len()
            )));
        }
        let tail_bits = k_max % 64;
        if tail_bits != 0 {
            let tail_mask = !0u64 << tail_bits;
            for n in 0..n_rows {
                if bits[n * words_per_row + words_per_row - 1] & tail_mask != 0 {
                    return Err(Error::Parse(format!(
                        "row {n} has assignment bits beyond column {k_max}"
                    )));
                }
            }
        }
        let mut zm = BinaryFeatureMatrix {
            n_rows,
            k_max,
            words_per_row,
            bits,
            m: vec![0; k_max],
            k_plus: 0,
        };
        for n in 0..n_rows {
            let start = n * zm.words_per_row;
            for (wi, &w) in zm.bits[start..start + zm.words_per_row].iter().enumerate() {
                let mut w = w;
                while w != 0 {
                    let k = wi * 64 + w.trailing_zeros() as usize;
                    w &= w - 1;
                    zm.m[k] += 1;
                }
            }
        }
        zm.k_plus = zm.m.iter().filter(|&&c| c > 0).count();
        Ok(zm)
    }
}

// ---------------------------------------------------------------------------
// Feature-assignment log priors
// ---------------------------------------------------------------------------

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Domain(format!("alpha = {alpha} must be finite and positive")));
    }
    Ok(())
}

/// Shared column-count part of both priors:
/// `Σ_{k active} ln[(N−m_k)! (m_k−1)! / N!]`.
fn column_terms(zm: &BinaryFeatureMatrix) -> f64 {
    let n = zm.n_rows() as u64;
    let ln_n_fact = log_factorial(n);
    zm.m_slice()
        .iter()
        .filter(|&&m| m > 0)
        .map(|&m| log_factorial(n - m as u64) + log_factorial(m as u64 - 1) - ln_n_fact)
        .sum()
}

/// Log prior of the shifted equivalence class of `zm` (active columns keep
/// their relative order; empty columns are interchangeable).
pub fn log_prior_shifted(zm: &BinaryFeatureMatrix, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let k_plus = zm.k_plus() as u64;
    let h_n = harmonic(zm.n_rows() as u64);
    Ok(k_plus as f64 * alpha.ln() - log_factorial(k_plus) - alpha * h_n + column_terms(zm))
}

/// Log prior of the left-ordered-form equivalence class: identical columns
/// are indistinguishable, so `ln K+!` becomes `Σ_h ln K_h!` over groups of
/// equal columns.
pub fn log_prior_lof(zm: &BinaryFeatureMatrix, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let k_plus = zm.k_plus() as u64;
    let h_n = harmonic(zm.n_rows() as u64);
    // Multiplicities of identical active columns, keyed by exact column bits.
    let mut counts: HashMap<Vec<u64>, u64> = HashMap::new();
    for k in 0..zm.k_max() {
        if zm.m(k) > 0 {
            *counts.entry(zm.column_pattern(k)).or_insert(0) += 1;
        }
    }
    // Sort group sizes so the float sum has a deterministic order.
    let mut sizes: Vec<u64> = counts.into_values().collect();
    sizes.sort_unstable();
    let repeat_penalty: f64 = sizes.iter().map(|&c| log_factorial(c)).sum();
    Ok(k_plus as f64 * alpha.ln() - repeat_penalty - alpha * h_n + column_terms(zm))
}

// ---------------------------------------------------------------------------
// Hyperparameters
// ---------------------------------------------------------------------------

/// Gamma prior (shape/rate parameterization) for a precision or for `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0 && rate.is_finite() && rate > 0.0) {
            return Err(Error::Domain(format!(
                "gamma prior (shape={shape}, rate={rate}) must be positive and finite"
            )));
        }
        Ok(GammaPrior { shape, rate })
    }
}

/// Gamma priors for the noise precision, factor precision, and `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPriors {
    pub tau_x: GammaPrior,
    pub tau_a: GammaPrior,
    pub alpha: GammaPrior,
}

/// Model hyperparameters. With `gamma_priors` set, the fixed values below
/// serve only as the starting point: the engine maintains gamma posteriors
/// and substitutes their expectations everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: f64,
    pub sigma_x: f64,
    pub sigma_a: f64,
    pub gamma_priors: Option<GammaPriors>,
}

impl Hyperparams {
    pub fn fixed(alpha: f64, sigma_x: f64, sigma_a: f64) -> Result<Self> {
        check_alpha(alpha)?;
        for (name, v) in [("sigma_x", sigma_x), ("sigma_a", sigma_a)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} = {v} must be finite and positive")));
            }
        }
        Ok(Hyperparams { alpha, sigma_x, sigma_a, gamma_priors: None })
    }

    pub fn with_gamma(alpha: f64, sigma_x: f64, sigma_a: f64, priors: GammaPriors) -> Result<Self> {
        let mut h = Self::fixed(alpha, sigma_x, sigma_a)?;
        h.gamma_priors = Some(priors);
        Ok(h)
    }

    pub fn hyper_inference(&self) -> bool {
        self.gamma_priors.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn zm_from_rows(rows: &[&[bool]]) -> BinaryFeatureMatrix {
        let n = rows.len();
        let k = rows[0].len();
        let flat: Vec<bool> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        BinaryFeatureMatrix::from_dense(&Array2::from_shape_vec((n, k), flat).unwrap()).unwrap()
    }

    #[test]
    fn dataset_validation() {
        assert!(matches!(
            Dataset::new(Array2::zeros((0, 3)), None, PreprocessScheme::None),
            Err(Error::Shape(_))
        ));
        let x = array![[1.0, f64::NAN], [0.0, 2.0]];
        assert!(matches!(
            Dataset::new(x.clone(), None, PreprocessScheme::None),
            Err(Error::Domain(_))
        ));
        // The same NaN hidden behind the mask is fine.
        let mut obs = Array2::from_elem((2, 2), true);
        obs[[0, 1]] = false;
        let ds = Dataset::new(x, Some(obs), PreprocessScheme::None).unwrap();
        assert_eq!(ds.n_observed, 3);
        assert!(!ds.fully_observed());
    }

    #[test]
    fn zero_min_preprocessing_shifts_observed_minimum_to_zero() {
        let x = array![[3.0, -1.0], [2.0, 5.0]];
        let ds = Dataset::new(x, None, PreprocessScheme::ZeroMin).unwrap();
        assert_eq!(ds.preprocessing.shift_applied, -1.0);
        let min = ds.x.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_relative_eq!(min, 0.0, epsilon = 1e-12);
        // Round-trip back to raw values.
        let raw = ds.with_preprocessing(PreprocessScheme::None).unwrap();
        assert_relative_eq!(raw.x[[0, 0]], 3.0, epsilon = 1e-12);
        assert_eq!(raw.preprocessing.shift_applied, 0.0);
    }

    #[test]
    fn zero_min_ignores_held_out_entries() {
        let x = array![[3.0, -100.0], [2.0, 5.0]];
        let mut obs = Array2::from_elem((2, 2), true);
        obs[[0, 1]] = false; // the -100 is held out
        let ds = Dataset::new(x, Some(obs), PreprocessScheme::ZeroMin).unwrap();
        assert_eq!(ds.preprocessing.shift_applied, 2.0);
    }

    #[test]
    fn observation_patterns_are_grouped() {
        let x = Array2::zeros((4, 3));
        let mut obs = Array2::from_elem((4, 3), true);
        obs[[2, 1]] = false;
        obs[[3, 1]] = false;
        let ds = Dataset::new(x, Some(obs), PreprocessScheme::None).unwrap();
        assert_eq!(ds.patterns.len(), 2);
        assert_eq!(ds.pattern_of_row, vec![0, 0, 1, 1]);
        assert_eq!(ds.patterns[0].dims, vec![0, 1, 2]);
        assert_eq!(ds.patterns[1].dims, vec![0, 2]);
        assert_eq!(ds.patterns[1].row_count, 2);
    }

    #[test]
    fn holdout_mask_validation() {
        assert!(HoldoutMask::new(3, 3, vec![(0, 0), (2, 2)]).is_ok());
        assert!(matches!(
            HoldoutMask::new(3, 3, vec![(0, 0), (0, 0)]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(HoldoutMask::new(3, 3, vec![(3, 0)]), Err(Error::Shape(_))));
    }

    #[test]
    fn feature_matrix_set_maintains_counts() {
        let mut zm = BinaryFeatureMatrix::new(3, 70).unwrap();
        assert_eq!(zm.k_plus(), 0);
        zm.set(0, 0, true);
        zm.set(1, 0, true);
        zm.set(2, 69, true);
        assert_eq!(zm.m(0), 2);
        assert_eq!(zm.m(69), 1);
        assert_eq!(zm.k_plus(), 2);
        zm.set(0, 0, false);
        zm.set(1, 0, false);
        assert_eq!(zm.k_plus(), 1);
        assert_eq!(zm.m(0), 0);
        // Setting to the current value is a no-op.
        zm.set(2, 69, true);
        assert_eq!(zm.m(69), 1);
        zm.verify_consistency().unwrap();
    }

    #[test]
    fn feature_matrix_row_roundtrip() {
        let mut zm = BinaryFeatureMatrix::new(2, 5).unwrap();
        let mut row = BitSet::new(5);
        row.insert(1);
        row.insert(4);
        let changed = zm.set_row(0, &row);
        assert_eq!(changed, vec![1, 4]);
        assert_eq!(zm.row(0), row);
        assert_eq!(zm.iter_row(0).collect::<Vec<_>>(), vec![1, 4]);
        assert_eq!(zm.row_len(0), 2);
        assert_eq!(zm.row_len(1), 0);
    }

    #[test]
    fn compaction_moves_empty_columns_to_the_back() {
        let zm_dense = array![
            [false, true, false, true],
            [false, false, false, true],
        ];
        let mut zm = BinaryFeatureMatrix::from_dense(&zm_dense).unwrap();
        let perm = zm.compact_columns();
        assert_eq!(perm, vec![1, 3, 0, 2]);
        assert_eq!(zm.k_plus(), 2);
        assert_eq!(zm.m_slice(), &[1, 2, 0, 0]);
        assert!(zm.get(0, 0) && zm.get(0, 1) && !zm.get(1, 0) && zm.get(1, 1));
        zm.verify_consistency().unwrap();
        // Compacting again is the identity.
        assert_eq!(zm.compact_columns(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn shifted_prior_all_zero_matrix() {
        // No active features: K+ = 0, so only the -alpha H_N term survives.
        let zm = BinaryFeatureMatrix::new(10, 4).unwrap();
        let lp = log_prior_shifted(&zm, 3.0).unwrap();
        assert_relative_eq!(lp, -8.786_904_761_904_761_9, max_relative = 1e-13);
    }

    #[test]
    fn shifted_prior_single_full_column() {
        // N=2, one column with m=2, alpha=2:
        // ln 2 - ln 1! - 2*(3/2) + ln(0! 1! / 2!) = ln 2 - 3 - ln 2 = -3.
        let zm = zm_from_rows(&[&[true], &[true]]);
        let lp = log_prior_shifted(&zm, 2.0).unwrap();
        assert_relative_eq!(lp, -3.0, max_relative = 1e-14);
    }

    #[test]
    fn shifted_prior_singleton_delta() {
        // Adding a fresh singleton column changes the log prior by
        // ln alpha - ln(K+ + 1) - ln N.
        let alpha = 1.7;
        let before = zm_from_rows(&[&[true, false], &[true, false]]);
        let after = zm_from_rows(&[&[true, true], &[true, false]]);
        let delta =
            log_prior_shifted(&after, alpha).unwrap() - log_prior_shifted(&before, alpha).unwrap();
        let expect = alpha.ln() - 2.0f64.ln() - 2.0f64.ln();
        assert_relative_eq!(delta, expect, max_relative = 1e-13);
    }

    #[test]
    fn prior_ignores_empty_columns_and_column_order() {
        let a = zm_from_rows(&[&[true, false, false], &[true, true, false]]);
        let b = zm_from_rows(&[&[false, false, true], &[true, false, true]]);
        let pa = log_prior_shifted(&a, 1.3).unwrap();
        let pb = log_prior_shifted(&b, 1.3).unwrap();
        assert_relative_eq!(pa, pb, max_relative = 1e-14);
    }

    #[test]
    fn lof_prior_vs_shifted() {
        // Two identical columns: the repeat group has size 2, so the lof
        // penalty ln 2! equals ln K+! and the priors coincide.
        let dup = zm_from_rows(&[&[true, true], &[true, true], &[false, false]]);
        let lof = log_prior_lof(&dup, 1.0).unwrap();
        let shifted = log_prior_shifted(&dup, 1.0).unwrap();
        assert_relative_eq!(lof, shifted, max_relative = 1e-14);

        // All-distinct columns: lof = shifted + ln K+!.
        let distinct = zm_from_rows(&[&[true, false], &[true, true], &[false, true]]);
        let lof = log_prior_lof(&distinct, 1.0).unwrap();
        let shifted = log_prior_shifted(&distinct, 1.0).unwrap();
        assert_relative_eq!(lof, shifted + 2.0f64.ln(), max_relative = 1e-13);
    }

    #[test]
    fn prior_rejects_bad_alpha() {
        let zm = BinaryFeatureMatrix::new(2, 2).unwrap();
        assert!(matches!(log_prior_shifted(&zm, 0.0), Err(Error::Domain(_))));
        assert!(matches!(log_prior_shifted(&zm, -1.0), Err(Error::Domain(_))));
        assert!(matches!(log_prior_lof(&zm, f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn hyperparam_validation() {
        assert!(Hyperparams::fixed(3.0, 1.0, 1.0).is_ok());
        assert!(matches!(Hyperparams::fixed(3.0, 0.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(Hyperparams::fixed(-1.0, 1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(GammaPrior::new(0.0, 1.0), Err(Error::Domain(_))));
        let gp = GammaPrior::new(1.0, 1.0).unwrap();
        let h = Hyperparams::with_gamma(2.0, 1.0, 1.0, GammaPriors { tau_x: gp, tau_a: gp, alpha: gp })
            .unwrap();
        assert!(h.hyper_inference());
        assert!(!Hyperparams::fixed(2.0, 1.0, 1.0).unwrap().hyper_inference());
    }
}
