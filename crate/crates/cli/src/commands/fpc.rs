use bilevel_core::data::gen_linear;
use bilevel_core::diagnostics::{fpc_verify, FpcReport, RidgeOracle};
use bilevel_core::rng::derive_seed;

use crate::error::{at, CliError, CliResult};
use crate::output::{csv_bytes, fmt_f64, Sink};

#[derive(Debug, Clone, PartialEq)]
pub struct FpcArgs {
    pub n: usize,
    pub gamma: f64,
    pub u: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    /// Feature dimension of the synthetic ridge data.
    pub d: usize,
    /// Effective ridge strength at which split hypergradients are taken.
    pub lambda: f64,
}

pub const FPC_HEADER: [&str; 11] = [
    "n",
    "gamma",
    "V",
    "U",
    "samples",
    "sigma_sq",
    "empirical_without",
    "formula_without",
    "relative_gap_without",
    "empirical_with",
    "formula_with",
];

/// Relative gap between the sampled and predicted error; zero when both are.
pub fn relative_gap(empirical: f64, formula: f64) -> f64 {
    if formula == 0.0 {
        empirical.abs()
    } else {
        (empirical - formula).abs() / formula
    }
}

/// Checks the finite-population correction on exact ridge hypergradients of
/// every split of a seeded synthetic dataset.
pub fn run(args: &FpcArgs) -> CliResult<Vec<FpcReport>> {
    if args.u.is_empty() {
        return Err(CliError::config("--u", "at least one U is required"));
    }
    if !(args.lambda > 0.0 && args.lambda.is_finite()) {
        return Err(CliError::config("--lambda", "must be positive"));
    }
    let (ds, _) = gen_linear(args.n, args.d, derive_seed(args.seed, 0), 1.0, derive_seed(args.seed, 1))
        .map_err(at("--n"))?;
    let value = |s: &bilevel_core::Split| -> bilevel_core::Result<Vec<f64>> {
        let oracle = RidgeOracle::new(&s.train(&ds), &s.val(&ds))?;
        Ok(vec![oracle.hypergrad(args.lambda)?])
    };
    args.u
        .iter()
        .map(|&u| {
            fpc_verify(args.n, args.gamma, u, args.samples, derive_seed(args.seed, 2), value)
                .map_err(|e| at("fpc")(e))
        })
        .collect()
}

pub fn rows(reports: &[FpcReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                fmt_f64(r.gamma),
                r.population.to_string(),
                r.u.to_string(),
                r.samples.to_string(),
                fmt_f64(r.sigma_sq),
                fmt_f64(r.empirical),
                fmt_f64(r.formula_without),
                fmt_f64(relative_gap(r.empirical, r.formula_without)),
                fmt_f64(r.empirical_with),
                fmt_f64(r.formula_with),
            ]
        })
        .collect()
}

pub fn summary(r: &FpcReport) -> String {
    format!(
        "n={} gamma={} V={} U={}: without replacement {:.6e} vs formula {:.6e} (gap {:.2}%); with replacement {:.6e} vs {:.6e}",
        r.n,
        r.gamma,
        r.population,
        r.u,
        r.empirical,
        r.formula_without,
        100.0 * relative_gap(r.empirical, r.formula_without),
        r.empirical_with,
        r.formula_with
    )
}

pub fn fpc(args: &FpcArgs, sink: &mut Sink) -> CliResult<Vec<FpcReport>> {
    let reports = run(args)?;
    for r in &reports {
        println!("{}", summary(r));
    }
    sink.write("fpc.csv", &csv_bytes(&FPC_HEADER, rows(&reports)))?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(n: usize, u: Vec<usize>) -> FpcArgs {
        FpcArgs {
            n,
            gamma: 0.5,
            u,
            samples: 2000,
            seed: 3,
            d: 2,
            lambda: 1.0,
        }
    }

    #[test]
    fn full_population_has_no_error() {
        let r = run(&args(6, vec![15])).unwrap();
        assert_eq!(r[0].population, 15);
        assert_eq!(r[0].formula_without, 0.0);
        assert!(r[0].empirical < 1e-28);
    }

    #[test]
    fn oversized_enumeration_is_config_error() {
        let e = run(&args(40, vec![1])).unwrap_err();
        assert_eq!(e.exit_code(), crate::error::exit::CONFIG);
        assert!(e.to_string().contains("enumeration"), "{e}");
    }
}
