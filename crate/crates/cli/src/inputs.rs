//! Turns the `[data]` section into a dataset with pool and test rows.

use std::collections::BTreeMap;

use bilevel_core::data::{corrupt_labels, gen_classes, gen_linear, gen_linear_with_beta, holdout, read_libsvm};
use bilevel_core::rng::derive_seed;
use bilevel_core::{Dataset, Mat, ModelKind, Task};

use crate::config::{stream, DataSource, ExperimentConfig};
use crate::error::{at, CliError, CliResult};
use crate::output::Seeds;

#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    /// Rows available for training and validation.
    pub pool: Vec<usize>,
    pub test: Vec<usize>,
}

impl Prepared {
    pub fn classes(&self) -> Option<usize> {
        match self.data.task() {
            Task::Multiclass(k) => Some(k),
            _ => None,
        }
    }
}

fn stack(a: &Dataset, b: &Dataset) -> CliResult<Dataset> {
    let mut rows: Vec<Vec<f64>> = (0..a.len()).map(|i| a.features().row(i).to_vec()).collect();
    rows.extend((0..b.len()).map(|i| b.features().row(i).to_vec()));
    let mut y = a.labels().to_vec();
    y.extend_from_slice(b.labels());
    Ok(Dataset::new(Mat::from_rows(&rows)?, y, a.task())?)
}

/// Relabels two-class data for the loss the model expects.
fn adapt_task(ds: Dataset, kind: ModelKind) -> CliResult<Dataset> {
    let wants_binary = matches!(kind, ModelKind::LogisticL2 | ModelKind::SvmSqhinge);
    let wants_multi = matches!(kind, ModelKind::SoftmaxL2 | ModelKind::HypercleanSoftmax);
    let (y, task) = match ds.task() {
        Task::Multiclass(2) if wants_binary => (
            ds.labels().iter().map(|v| if *v > 0.5 { 1.0 } else { -1.0 }).collect(),
            Task::Binary,
        ),
        Task::Binary if wants_multi => (
            ds.labels().iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect(),
            Task::Multiclass(2),
        ),
        _ => return Ok(ds),
    };
    Ok(Dataset::new(ds.features().clone(), y, task)?)
}

pub fn data_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, stream::DATA)
}

/// Loads or generates the configured data. Test rows follow the pool rows for
/// synthetic sources; `test_fraction` carves a seeded holdout from the pool.
pub fn load(cfg: &ExperimentConfig) -> CliResult<Prepared> {
    let d = &cfg.data;
    let beta_seed = d.beta_seed.unwrap_or(derive_seed(cfg.seed, stream::BETA));
    let (ds, n_pool) = match d.source {
        DataSource::SyntheticLinear => {
            let (train, beta) = gen_linear(d.n, d.d, beta_seed, d.noise_sigma, data_seed(cfg)).map_err(at("data"))?;
            if d.n_test > 0 {
                let test = gen_linear_with_beta(d.n_test, &beta, d.noise_sigma, derive_seed(cfg.seed, stream::TEST))?;
                (stack(&train, &test)?, d.n)
            } else {
                (train, d.n)
            }
        }
        DataSource::SyntheticClasses => {
            let ds = gen_classes(d.n + d.n_test, d.d, d.classes, d.separation, beta_seed, data_seed(cfg))
                .map_err(at("data"))?;
            (ds, d.n)
        }
        DataSource::Libsvm => {
            let path = d.path.as_ref().ok_or_else(|| CliError::config("data.path", "missing"))?;
            let ds = read_libsvm(path, d.label_mode)?;
            let n = ds.len();
            (ds, n)
        }
    };
    let ds = adapt_task(ds, cfg.problem.kind)?;
    if !cfg.problem.kind.accepts(ds.task()) {
        return Err(CliError::config(
            "problem.kind",
            format!("{} cannot be fit on {:?} labels", cfg.problem.kind, ds.task()),
        ));
    }
    let mut pool: Vec<usize> = (0..n_pool).collect();
    let mut test: Vec<usize> = (n_pool..ds.len()).collect();
    if d.test_fraction > 0.0 {
        let (p, t) = holdout(pool.len(), d.test_fraction, derive_seed(cfg.seed, stream::HOLDOUT))
            .map_err(at("data.test_fraction"))?;
        test = t.iter().map(|&i| pool[i]).collect();
        pool = p.iter().map(|&i| pool[i]).collect();
    }
    Ok(Prepared { data: ds, pool, test })
}

/// Corrupts the labels of `rows` as configured, leaving all other rows
/// intact. Returns the new dataset and the per-row clean mask.
pub fn corrupt_rows(cfg: &ExperimentConfig, ds: &Dataset, rows: &[usize]) -> CliResult<Option<(Dataset, Vec<bool>)>> {
    let Some(c) = &cfg.data.corrupt else {
        return Ok(None);
    };
    let seed = c.seed.unwrap_or(derive_seed(cfg.seed, stream::CORRUPT));
    let (noisy, flipped) = corrupt_labels(ds, c.p, seed).map_err(at("data.corrupt"))?;
    let mut y = ds.labels().to_vec();
    let mut clean = vec![true; ds.len()];
    for &i in rows {
        y[i] = noisy.labels()[i];
        clean[i] = flipped[i];
    }
    Ok(Some((Dataset::new(ds.features().clone(), y, ds.task())?, clean)))
}

/// Every seed the run uses, for the manifest.
pub fn seeds(cfg: &ExperimentConfig) -> Seeds {
    let mut derived = BTreeMap::new();
    if let Some(b) = cfg.data.beta_seed {
        derived.insert("beta_seed".to_string(), b);
    }
    derived.insert("data_seed".to_string(), data_seed(cfg));
    if cfg.data.n_test > 0 {
        derived.insert("test_seed".to_string(), derive_seed(cfg.seed, stream::TEST));
    }
    if cfg.data.test_fraction > 0.0 {
        derived.insert("holdout_seed".to_string(), derive_seed(cfg.seed, stream::HOLDOUT));
    }
    if let Some(c) = cfg.data.corrupt.as_ref().and_then(|c| c.seed) {
        derived.insert("corrupt_seed".to_string(), c);
    }
    derived.insert("split_master_seed".to_string(), cfg.split_plan().master_seed);
    if let Some(s) = cfg.biasvar.as_ref().and_then(|b| b.seed) {
        derived.insert("biasvar_seed".to_string(), s);
    }
    Seeds {
        global: cfg.seed,
        derived,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        let mut c = ExperimentConfig::from_toml(text).unwrap();
        c.resolve();
        c
    }

    #[test]
    fn synthetic_test_rows_follow_pool() {
        let c = cfg("[data]\nsource = \"synthetic_linear\"\nn = 20\nd = 2\nn_test = 7\n[problem]\nkind = \"ridge\"\n");
        let p = load(&c).unwrap();
        assert_eq!(p.pool, (0..20).collect::<Vec<_>>());
        assert_eq!(p.test, (20..27).collect::<Vec<_>>());
        assert_eq!(p.data.len(), 27);
    }

    #[test]
    fn holdout_fraction() {
        let c = cfg("[data]\nsource = \"synthetic_linear\"\nn = 20\nd = 2\ntest_fraction = 0.25\n[problem]\nkind = \"ridge\"\n");
        let p = load(&c).unwrap();
        assert_eq!(p.test.len(), 5);
        assert_eq!(p.pool.len(), 15);
    }

    #[test]
    fn two_classes_become_binary_for_logistic() {
        let c = cfg("[data]\nsource = \"synthetic_classes\"\nn = 30\nd = 2\nclasses = 2\n[problem]\nkind = \"logistic_l2\"\n");
        let p = load(&c).unwrap();
        assert_eq!(p.data.task(), Task::Binary);
        assert!(p.data.labels().iter().all(|y| *y == 1.0 || *y == -1.0));
    }

    #[test]
    fn corruption_limited_to_rows() {
        let c = cfg(
            "[data]\nsource = \"synthetic_classes\"\nn = 50\nd = 2\n[data.corrupt]\np = 1.0\n[problem]\nkind = \"softmax_l2\"\n",
        );
        let p = load(&c).unwrap();
        let rows: Vec<usize> = (0..10).collect();
        let (noisy, clean) = corrupt_rows(&c, &p.data, &rows).unwrap().unwrap();
        for i in 0..50 {
            let changed = noisy.labels()[i] != p.data.labels()[i];
            assert_eq!(changed, i < 10);
            assert_eq!(clean[i], i >= 10);
        }
    }
}
