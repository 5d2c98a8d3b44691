//! Datasets, libsvm ingestion, synthetic generators and the seeded
//! train/validation splitting process.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::{derive_seed, rng_from_seed};

/// Learning task carried by a dataset's labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Regression,
    /// Labels in {−1, +1}.
    Binary,
    /// Labels are class indices in `[0, k)`.
    Multiclass(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Mat,
    y: Vec<f64>,
    task: Task,
}

impl Dataset {
    pub fn new(x: Mat, y: Vec<f64>, task: Task) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::dims("Dataset labels", x.rows(), y.len()));
        }
        match task {
            Task::Binary => {
                if let Some(bad) = y.iter().find(|v| **v != 1.0 && **v != -1.0) {
                    return Err(Error::Config(format!("binary label {bad} not in {{-1, +1}}")));
                }
            }
            Task::Multiclass(k) => {
                if k < 2 {
                    return Err(Error::Config(format!("multiclass task needs k >= 2, got {k}")));
                }
                if let Some(bad) = y.iter().find(|v| v.fract() != 0.0 || **v < 0.0 || **v >= k as f64) {
                    return Err(Error::Config(format!("class label {bad} outside [0, {k})")));
                }
            }
            Task::Regression => {}
        }
        Ok(Dataset { x, y, task })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn features(&self) -> &Mat {
        &self.x
    }

    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    pub fn view<'a>(&'a self, indices: &'a [usize]) -> DataView<'a> {
        DataView::new(self, indices)
    }
}

/// Read-only window onto a subset of a [`Dataset`].
#[derive(Debug, Clone, Copy)]
pub struct DataView<'a> {
    data: &'a Dataset,
    indices: &'a [usize],
}

impl<'a> DataView<'a> {
    /// Panics if an index is out of range.
    pub fn new(data: &'a Dataset, indices: &'a [usize]) -> Self {
        assert!(
            indices.iter().all(|&i| i < data.len()),
            "DataView index out of range"
        );
        DataView { data, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn indices(&self) -> &'a [usize] {
        self.indices
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.data
    }

    /// `(global index, feature row, label)` for every sample in the view.
    pub fn samples(&self) -> impl Iterator<Item = (usize, &'a [f64], f64)> + 'a {
        let data = self.data;
        self.indices
            .iter()
            .map(move |&i| (i, data.x.row(i), data.y[i]))
    }
}

/// How `read_libsvm` interprets the label column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// `{−1, +1}` or `{0, 1}` means binary, anything else regression.
    #[default]
    Auto,
    Regression,
    Binary,
    Multiclass,
}

pub fn read_libsvm(path: &Path, mode: LabelMode) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_libsvm(&text, mode).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })
}

/// Parses libsvm text (`label idx:val ...`, 1-based ascending indices) into
/// a dense dataset with missing features zero-filled.
pub fn parse_libsvm(text: &str, mode: LabelMode) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: "<input>".into(),
        line,
        message,
    };
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut dim = 0;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: f64 = label_tok
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad label {label_tok:?}")))?;
        if !label.is_finite() {
            return Err(parse_err(lineno, format!("non-finite label {label_tok:?}")));
        }
        let mut feats = Vec::new();
        let mut last = 0usize;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(lineno, format!("expected idx:val, got {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad feature index {idx:?}")))?;
            if idx == 0 || idx <= last {
                return Err(parse_err(
                    lineno,
                    format!("feature indices must be 1-based and ascending (got {idx} after {last})"),
                ));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad feature value {val:?}")))?;
            if !val.is_finite() {
                return Err(parse_err(lineno, format!("non-finite feature value {val:?}")));
            }
            last = idx;
            feats.push((idx - 1, val));
        }
        dim = dim.max(last);
        labels.push(label);
        rows.push(feats);
    }

    if labels.is_empty() {
        return Err(Error::EmptyData("libsvm input has no samples".into()));
    }

    let mut x = Mat::zeros(labels.len(), dim);
    for (i, feats) in rows.iter().enumerate() {
        for &(j, v) in feats {
            x.set(i, j, v);
        }
    }

    let (y, task) = resolve_labels(labels, mode)?;
    Dataset::new(x, y, task)
}

fn resolve_labels(labels: Vec<f64>, mode: LabelMode) -> Result<(Vec<f64>, Task)> {
    let is_pm1 = labels.iter().all(|v| *v == 1.0 || *v == -1.0);
    let is_01 = labels.iter().all(|v| *v == 0.0 || *v == 1.0);
    let to_pm1 = |ls: Vec<f64>| ls.into_iter().map(|v| if v > 0.0 { 1.0 } else { -1.0 }).collect();
    match mode {
        LabelMode::Regression => Ok((labels, Task::Regression)),
        LabelMode::Auto | LabelMode::Binary if is_pm1 || is_01 => Ok((to_pm1(labels), Task::Binary)),
        LabelMode::Auto => Ok((labels, Task::Regression)),
        LabelMode::Binary => Err(Error::Config("labels are not binary ({-1,+1} or {0,1})".into())),
        LabelMode::Multiclass => {
            if labels.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
                return Err(Error::Config("multiclass labels must be non-negative integers".into()));
            }
            let k = labels.iter().fold(0.0_f64, |m, v| m.max(*v)) as usize + 1;
            Ok((labels, Task::Multiclass(k.max(2))))
        }
    }
}

fn normal_vec(rng: &mut crate::rng::Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Linear-Gaussian regression data `y = Xβ + ε`.
///
/// `X` and `ε` come from `seed`, `β ~ N(0, I)` from `beta_seed`.
pub fn gen_linear(n: usize, d: usize, beta_seed: u64, noise_sigma: f64, seed: u64) -> Result<(Dataset, Vec<f64>)> {
    if n < 2 || d < 1 {
        return Err(Error::Config(format!("gen_linear needs n >= 2 and d >= 1 (got n={n}, d={d})")));
    }
    let beta = draw_beta(d, beta_seed);
    let ds = gen_linear_with_beta(n, &beta, noise_sigma, seed)?;
    Ok((ds, beta))
}

/// The coefficient vector `gen_linear` uses for `beta_seed`.
pub fn draw_beta(d: usize, beta_seed: u64) -> Vec<f64> {
    normal_vec(&mut rng_from_seed(beta_seed), d)
}

/// Same generator with a fixed coefficient vector.
pub fn gen_linear_with_beta(n: usize, beta: &[f64], noise_sigma: f64, seed: u64) -> Result<Dataset> {
    let d = beta.len();
    let mut rng = rng_from_seed(seed);
    let x = Mat::from_vec(n, d, normal_vec(&mut rng, n * d))?;
    let noise = normal_vec(&mut rng, n);
    let y = (0..n)
        .map(|i| crate::linalg::dot(x.row(i), beta) + noise_sigma * noise[i])
        .collect();
    Dataset::new(x, y, Task::Regression)
}

/// Gaussian class clusters: class centers drawn once from `centers_seed`
/// with scale `separation`, samples `x = center[y] + N(0, I)` with uniform
/// labels from `seed`.
pub fn gen_classes(
    n: usize,
    d: usize,
    k: usize,
    separation: f64,
    centers_seed: u64,
    seed: u64,
) -> Result<Dataset> {
    if n < 2 || d < 1 || k < 2 {
        return Err(Error::Config(format!(
            "gen_classes needs n >= 2, d >= 1, k >= 2 (got n={n}, d={d}, k={k})"
        )));
    }
    let mut crng = rng_from_seed(centers_seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| normal_vec(&mut crng, d).into_iter().map(|v| v * separation).collect())
        .collect();
    let mut rng = rng_from_seed(seed);
    let mut x = Mat::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.random_range(0..k);
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            x.set(i, j, centers[c][j] + z);
        }
        y.push(c as f64);
    }
    Dataset::new(x, y, Task::Multiclass(k))
}

/// Flips each label with probability `p` to a uniformly drawn different
/// label. Returns the corrupted dataset and the mask of untouched samples.
pub fn corrupt_labels(ds: &Dataset, p: f64, seed: u64) -> Result<(Dataset, Vec<bool>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("corruption probability {p} outside [0, 1]")));
    }
    let k = match ds.task() {
        Task::Multiclass(k) => k,
        Task::Binary => 2,
        Task::Regression => return Err(Error::Config("cannot corrupt regression targets".into())),
    };
    let mut rng = rng_from_seed(seed);
    let mut y = ds.y.clone();
    let mut clean = vec![true; y.len()];
    for (yi, ci) in y.iter_mut().zip(clean.iter_mut()) {
        let flip = rng.random::<f64>() < p;
        if !flip {
            continue;
        }
        *ci = false;
        *yi = match ds.task() {
            Task::Binary => -*yi,
            _ => {
                // uniform over the k − 1 wrong classes
                let orig = *yi as usize;
                let mut c = rng.random_range(0..k - 1);
                if c >= orig {
                    c += 1;
                }
                c as f64
            }
        };
    }
    Ok((Dataset::new(ds.x.clone(), y, ds.task())?, clean))
}

/// A train/validation partition of sample indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub seed: u64,
}

impl Split {
    /// Fails if either side is empty or the sides overlap.
    pub fn new(train_idx: Vec<usize>, val_idx: Vec<usize>, seed: u64) -> Result<Self> {
        if train_idx.is_empty() || val_idx.is_empty() {
            return Err(Error::InfeasiblePlan("split sides must be nonempty".into()));
        }
        let val: HashSet<usize> = val_idx.iter().copied().collect();
        if train_idx.iter().any(|i| val.contains(i)) {
            return Err(Error::InfeasiblePlan("train and validation indices overlap".into()));
        }
        Ok(Split {
            train_idx,
            val_idx,
            seed,
        })
    }

    fn from_val(n: usize, mut val_idx: Vec<usize>, seed: u64) -> Split {
        val_idx.sort_unstable();
        let mut is_val = vec![false; n];
        for &i in &val_idx {
            is_val[i] = true;
        }
        let train_idx = (0..n).filter(|i| !is_val[*i]).collect();
        Split {
            train_idx,
            val_idx,
            seed,
        }
    }

    /// Maps positions `0..pool.len()` onto the indices stored in `pool`.
    pub fn remap(&self, pool: &[usize]) -> Split {
        Split {
            train_idx: self.train_idx.iter().map(|&i| pool[i]).collect(),
            val_idx: self.val_idx.iter().map(|&i| pool[i]).collect(),
            seed: self.seed,
        }
    }

    pub fn train<'a>(&'a self, ds: &'a Dataset) -> DataView<'a> {
        ds.view(&self.train_idx)
    }

    pub fn val<'a>(&'a self, ds: &'a Dataset) -> DataView<'a> {
        ds.view(&self.val_idx)
    }

    /// Validation-to-train size ratio.
    pub fn gamma(&self) -> f64 {
        self.val_idx.len() as f64 / self.train_idx.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    WithReplacement,
    #[default]
    WithoutReplacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub u: usize,
    pub gamma: f64,
    pub mode: SplitMode,
    pub master_seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            u: 5,
            gamma: 0.25,
            mode: SplitMode::WithoutReplacement,
            master_seed: 0,
        }
    }
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Validation size `round(n·γ/(1+γ))`, so that `m_val / m_tr ≈ γ`.
pub fn val_size(n: usize, gamma: f64) -> Result<usize> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InfeasiblePlan(format!("gamma must be positive, got {gamma}")));
    }
    let exact = n as f64 * gamma / (1.0 + gamma);
    if exact.floor() < 1.0 {
        return Err(Error::InfeasiblePlan(format!(
            "n = {n} with gamma = {gamma} leaves no validation sample"
        )));
    }
    let m = exact.round() as usize;
    if m >= n {
        return Err(Error::InfeasiblePlan(format!(
            "n = {n} with gamma = {gamma} leaves no training sample"
        )));
    }
    Ok(m)
}

/// Draws `plan.u` seeded train/validation splits of `0..n`.
///
/// Validation indices are sampled first; the remainder is the training
/// set. In without-replacement mode duplicate partitions are redrawn.
pub fn make_splits(n: usize, plan: &SplitPlan) -> Result<Vec<Split>> {
    if plan.u == 0 {
        return Err(Error::InfeasiblePlan("U must be at least 1".into()));
    }
    let m_val = val_size(n, plan.gamma)?;
    let distinct = binomial(n, m_val);
    if plan.mode == SplitMode::WithoutReplacement && plan.u as u128 > distinct {
        return Err(Error::InfeasiblePlan(format!(
            "U = {} exceeds the {distinct} distinct partitions with {m_val} validation samples",
            plan.u
        )));
    }

    let mut splits = Vec::with_capacity(plan.u);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut counter = 0u64;
    while splits.len() < plan.u {
        let seed = derive_seed(plan.master_seed, counter);
        counter += 1;
        let mut rng = rng_from_seed(seed);
        let split = Split::from_val(n, sample(&mut rng, n, m_val).into_vec(), seed);
        if plan.mode == SplitMode::WithoutReplacement && !seen.insert(split.val_idx.clone()) {
            continue;
        }
        splits.push(split);
    }
    Ok(splits)
}

pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Every partition of `0..n` with `val_size(n, gamma)` validation samples,
/// in lexicographic order of the validation sets.
pub fn enumerate_all_splits(n: usize, gamma: f64) -> Result<Vec<Split>> {
    let m = val_size(n, gamma)?;
    let count = binomial(n, m);
    if count > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut comb: Vec<usize> = (0..m).collect();
    loop {
        out.push(Split::from_val(n, comb.clone(), out.len() as u64));
        // advance to the next combination
        let mut i = m;
        while i > 0 && comb[i - 1] == n - m + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return Ok(out);
        }
        i -= 1;
        comb[i] += 1;
        for j in i + 1..m {
            comb[j] = comb[j - 1] + 1;
        }
    }
}

/// Carves a seeded holdout of `round(n · fraction)` samples.
/// Returns `(pool, test)`, both sorted.
pub fn holdout(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("test fraction {fraction} outside [0, 1)")));
    }
    let m = (n as f64 * fraction).round() as usize;
    if m == 0 {
        return Ok(((0..n).collect(), Vec::new()));
    }
    let split = Split::from_val(n, sample(&mut rng_from_seed(seed), n, m).into_vec(), seed);
    Ok((split.train_idx, split.val_idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_partition(s: &Split, n: usize) {
        let mut all: Vec<usize> = s.train_idx.iter().chain(&s.val_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert!(!s.train_idx.is_empty() && !s.val_idx.is_empty());
    }

    #[test]
    fn libsvm_binary_example() {
        let ds = parse_libsvm("1 1:0.5 3:2.0\n-1 2:1.0", LabelMode::Auto).unwrap();
        assert_eq!(ds.features().as_slice(), &[0.5, 0.0, 2.0, 0.0, 1.0, 0.0]);
        assert_eq!(ds.labels(), &[1.0, -1.0]);
        assert_eq!(ds.task(), Task::Binary);
    }

    #[test]
    fn libsvm_regression_example() {
        let ds = parse_libsvm("2.5 1:1", LabelMode::Auto).unwrap();
        assert_eq!(ds.features().as_slice(), &[1.0]);
        assert_eq!(ds.labels(), &[2.5]);
        assert_eq!(ds.task(), Task::Regression);
    }

    #[test]
    fn libsvm_zero_one_maps_to_pm1() {
        let ds = parse_libsvm("0 1:1\n1 1:2\n", LabelMode::Auto).unwrap();
        assert_eq!(ds.labels(), &[-1.0, 1.0]);
        assert_eq!(ds.task(), Task::Binary);
        let reg = parse_libsvm("0 1:1\n1 1:2\n", LabelMode::Regression).unwrap();
        assert_eq!(reg.task(), Task::Regression);
    }

    #[test]
    fn libsvm_multiclass_override() {
        let ds = parse_libsvm("0 1:1\n2 1:2\n1 2:1\n", LabelMode::Multiclass).unwrap();
        assert_eq!(ds.task(), Task::Multiclass(3));
    }

    #[test]
    fn libsvm_empty_is_error() {
        assert!(matches!(parse_libsvm("", LabelMode::Auto), Err(Error::EmptyData(_))));
        assert!(matches!(parse_libsvm("\n  \n", LabelMode::Auto), Err(Error::EmptyData(_))));
    }

    #[test]
    fn libsvm_malformed_reports_line() {
        let err = parse_libsvm("1 1:0.5\n1 3:x\n", LabelMode::Auto).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_libsvm("1 2:1 1:1\n", LabelMode::Auto).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_libsvm("1 0:1\n", LabelMode::Auto).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn read_libsvm_from_file_names_path() {
        let dir = std::env::temp_dir().join(format!("bilevel-libsvm-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.svm");
        fs::write(&p, "1 1:1\nfoo\n").unwrap();
        let err = read_libsvm(&p, LabelMode::Auto).unwrap_err();
        assert!(err.to_string().contains("bad.svm:2"), "{err}");
        fs::write(&p, "1 1:1\n-1 2:3\n").unwrap();
        assert_eq!(read_libsvm(&p, LabelMode::Auto).unwrap().dim(), 2);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn gen_linear_zero_noise_is_exact() {
        let (ds, beta) = gen_linear(20, 3, 1, 0.0, 2).unwrap();
        let fitted = ds.features().gemv(&beta).unwrap();
        assert_eq!(fitted, ds.labels());
    }

    #[test]
    fn gen_linear_deterministic() {
        let a = gen_linear(100, 5, 3, 0.1, 4).unwrap();
        let b = gen_linear(100, 5, 3, 0.1, 4).unwrap();
        assert_eq!(a, b);
        let c = gen_linear(100, 5, 3, 0.1, 5).unwrap();
        assert_eq!(a.1, c.1);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn gen_linear_noise_scale() {
        let (ds, beta) = gen_linear(20_000, 2, 1, 0.1, 9).unwrap();
        let fitted = ds.features().gemv(&beta).unwrap();
        let var: f64 = fitted.iter().zip(ds.labels()).map(|(f, y)| (y - f).powi(2)).sum::<f64>() / 20_000.0;
        assert!((var.sqrt() - 0.1).abs() < 0.005, "{}", var.sqrt());
    }

    #[test]
    fn corrupt_none_is_identity() {
        let ds = gen_classes(50, 3, 4, 1.0, 1, 2).unwrap();
        let (c, mask) = corrupt_labels(&ds, 0.0, 3).unwrap();
        assert_eq!(c, ds);
        assert!(mask.iter().all(|m| *m));
    }

    #[test]
    fn corrupt_forced_binary_flip() {
        let ds = gen_classes(40, 2, 2, 1.0, 1, 2).unwrap();
        let (c, mask) = corrupt_labels(&ds, 1.0, 3).unwrap();
        for (a, b) in ds.labels().iter().zip(c.labels()) {
            assert_eq!(*b, 1.0 - *a);
        }
        assert!(mask.iter().all(|m| !*m));
    }

    #[test]
    fn corrupt_half_concentrates() {
        let ds = gen_classes(10_000, 2, 4, 1.0, 1, 2).unwrap();
        let (c, mask) = corrupt_labels(&ds, 0.5, 7).unwrap();
        let frac = mask.iter().filter(|m| !**m).count() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
        for ((a, b), m) in ds.labels().iter().zip(c.labels()).zip(&mask) {
            assert_eq!(a == b, *m);
        }
    }

    #[test]
    fn split_ratio_one_halves() {
        let plan = SplitPlan {
            u: 1,
            gamma: 1.0,
            mode: SplitMode::WithoutReplacement,
            master_seed: 5,
        };
        let s = make_splits(10, &plan).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].train_idx.len(), 5);
        assert_eq!(s[0].val_idx.len(), 5);
        assert_partition(&s[0], 10);
    }

    #[test]
    fn without_replacement_exhausts_partitions() {
        let plan = SplitPlan {
            u: 15,
            gamma: 0.5,
            mode: SplitMode::WithoutReplacement,
            master_seed: 1,
        };
        let mut vals: Vec<Vec<usize>> = make_splits(6, &plan).unwrap().into_iter().map(|s| s.val_idx).collect();
        vals.sort();
        let all: Vec<Vec<usize>> = enumerate_all_splits(6, 0.5).unwrap().into_iter().map(|s| s.val_idx).collect();
        assert_eq!(vals, all);

        let too_many = SplitPlan { u: 16, ..plan };
        assert!(matches!(make_splits(6, &too_many), Err(Error::InfeasiblePlan(_))));
    }

    #[test]
    fn split_without_validation_is_infeasible() {
        let plan = SplitPlan {
            u: 1,
            gamma: 0.1,
            ..SplitPlan::default()
        };
        assert!(matches!(make_splits(5, &plan), Err(Error::InfeasiblePlan(_))));
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_all_splits(4, 1.0 / 3.0).unwrap().len(), 4);
        assert_eq!(enumerate_all_splits(6, 0.5).unwrap().len(), 15);
        let s = enumerate_all_splits(22, 1.0 / 11.0).unwrap();
        assert_eq!(s.len(), 231);
        assert!(s.iter().all(|x| x.val_idx.len() == 2));
        assert_eq!(s[0].val_idx, vec![0, 1]);
        assert_eq!(s[230].val_idx, vec![20, 21]);
        assert!(s.windows(2).all(|w| w[0].val_idx < w[1].val_idx));
        assert!(matches!(enumerate_all_splits(40, 0.5), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(6, 2), 15);
        assert_eq!(binomial(22, 2), 231);
        assert_eq!(binomial(40, 13), 12_033_222_880);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(binomial(5000, 2500), u128::MAX);
    }

    #[test]
    fn holdout_partitions() {
        let (pool, test) = holdout(100, 0.3, 4).unwrap();
        assert_eq!(test.len(), 30);
        assert_eq!(pool.len(), 70);
        let (pool, test) = holdout(10, 0.0, 4).unwrap();
        assert_eq!(pool.len(), 10);
        assert!(test.is_empty());
    }

    #[test]
    fn remap_through_pool() {
        let s = Split::new(vec![0, 2], vec![1], 0).unwrap();
        let r = s.remap(&[10, 20, 30]);
        assert_eq!(r.train_idx, vec![10, 30]);
        assert_eq!(r.val_idx, vec![20]);
        assert!(Split::new(vec![0, 1], vec![1], 0).is_err());
    }

    proptest! {
        #[test]
        fn splits_are_partitions(n in 4usize..60, gamma in 0.2f64..1.0, u in 1usize..6, seed in any::<u64>(), with in any::<bool>()) {
            let plan = SplitPlan {
                u,
                gamma,
                mode: if with { SplitMode::WithReplacement } else { SplitMode::WithoutReplacement },
                master_seed: seed,
            };
            let Ok(splits) = make_splits(n, &plan) else { return Ok(()); };
            prop_assert_eq!(splits.len(), u);
            for s in &splits {
                assert_partition(s, n);
            }
            if !with {
                let distinct: HashSet<_> = splits.iter().map(|s| s.val_idx.clone()).collect();
                prop_assert_eq!(distinct.len(), u);
            }
            prop_assert_eq!(make_splits(n, &plan).unwrap(), splits);
        }
    }
}
