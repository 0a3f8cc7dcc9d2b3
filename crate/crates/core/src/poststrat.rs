//! Post-stratification of per-cell estimates to population totals.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::sampling::{CovariateSubset, Dataset, SamplingError};
use crate::scalar::Scalar;

/// Tolerance on the total mass of a [`CellTable`].
pub const TABLE_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PoststratError {
    #[error("cell {cell} has negative fraction {fraction}")]
    NegativeFraction { cell: u64, fraction: f64 },
    #[error("cell fractions sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("cell table is empty")]
    Empty,
    #[error("no estimate for cell {0}")]
    MissingEstimate(u64),
    #[error("cell {cell} out of range for a subset with {cells} cells")]
    CellRange { cell: u64, cells: u64 },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed cell table row {row}: {msg}")]
    Format { row: usize, msg: String },
}

/// Population fraction of every cell of a covariate cross-tabulation.
/// Cells with zero population are omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTable<T> {
    cells: BTreeMap<u64, T>,
}

impl<T: Scalar> CellTable<T> {
    pub fn new(cells: BTreeMap<u64, T>) -> Result<Self, PoststratError> {
        if cells.is_empty() {
            return Err(PoststratError::Empty);
        }
        let mut total = T::zero();
        for (&cell, &f) in &cells {
            if f < T::zero() || !f.is_finite_value() {
                return Err(PoststratError::NegativeFraction {
                    cell,
                    fraction: f.to_f64_lossy(),
                });
            }
            total = total + f;
        }
        let total = total.to_f64_lossy();
        if (total - 1.0).abs() > TABLE_SUM_TOLERANCE {
            return Err(PoststratError::NotNormalized(total));
        }
        Ok(Self { cells })
    }

    pub fn cells(&self) -> &BTreeMap<u64, T> {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn fraction(&self, cell: u64) -> T {
        self.cells.get(&cell).copied().unwrap_or_else(T::zero)
    }

    /// Rejects cells a subset cannot produce.
    pub fn check_subset(&self, subset: &CovariateSubset) -> Result<(), PoststratError> {
        let n = subset.n_cells();
        match self.cells.keys().find(|&&c| c >= n) {
            Some(&cell) => Err(PoststratError::CellRange { cell, cells: n }),
            None => Ok(()),
        }
    }

    /// Two columns, `cell_id,fraction`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PoststratError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cell_id", "fraction"])?;
        for (cell, f) in &self.cells {
            out.write_record([cell.to_string(), f.to_string()])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

impl CellTable<f64> {
    pub fn read_csv<R: Read>(r: R) -> Result<Self, PoststratError> {
        let mut reader = csv::Reader::from_reader(r);
        let header = reader.headers()?.clone();
        if header.len() != 2 || &header[0] != "cell_id" || &header[1] != "fraction" {
            return Err(PoststratError::Format {
                row: 0,
                msg: "header must be `cell_id,fraction`".into(),
            });
        }
        let mut cells = BTreeMap::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let bad = |msg: &str| PoststratError::Format {
                row: i + 1,
                msg: msg.to_string(),
            };
            let cell: u64 = rec[0].trim().parse().map_err(|_| bad("cell_id is not an integer"))?;
            let f: f64 = rec[1].trim().parse().map_err(|_| bad("fraction is not a number"))?;
            if cells.insert(cell, f).is_some() {
                return Err(bad("duplicate cell_id"));
            }
        }
        Self::new(cells)
    }
}

/// `Σ_j ỹ_j P(X = j)` over the cells of `table`.
pub fn poststratify<T: Scalar>(
    estimates: &BTreeMap<u64, T>,
    table: &CellTable<T>,
) -> Result<T, PoststratError> {
    poststratify_with(table, |cell| {
        estimates
            .get(&cell)
            .copied()
            .ok_or(PoststratError::MissingEstimate(cell))
    })
}

/// Like [`poststratify`], pulling each cell's estimate from `estimate`.
pub fn poststratify_with<T: Scalar, E>(
    table: &CellTable<T>,
    mut estimate: impl FnMut(u64) -> Result<T, E>,
) -> Result<T, E> {
    let mut acc = T::zero();
    for (&cell, &f) in &table.cells {
        acc = acc + estimate(cell)? * f;
    }
    Ok(acc)
}

/// Empirical joint frequencies of `subset` over the population rows.
pub fn build_cell_table(
    population: &Dataset,
    subset: &[String],
) -> Result<(CovariateSubset, CellTable<f64>), PoststratError> {
    let subset = population.schema.subset(subset)?;
    if population.is_empty() {
        return Err(PoststratError::Empty);
    }
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for row in &population.rows {
        *counts.entry(subset.cell_of(&row.covariates)).or_default() += 1;
    }
    let n = population.len() as f64;
    let cells = counts.into_iter().map(|(c, k)| (c, k as f64 / n)).collect();
    let table = CellTable::new(cells)?;
    Ok((subset, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{generate_population, Covariate, PopulationSpec};
    use num_rational::Rational64;
    use proptest::prelude::*;

    fn table(fr: &[f64]) -> CellTable<f64> {
        CellTable::new(fr.iter().enumerate().map(|(i, &f)| (i as u64, f)).collect()).unwrap()
    }

    fn est(v: &[f64]) -> BTreeMap<u64, f64> {
        v.iter().enumerate().map(|(i, &x)| (i as u64, x)).collect()
    }

    #[test]
    fn two_cells() {
        let y = poststratify(&est(&[0.2, 0.6]), &table(&[0.5, 0.5])).unwrap();
        assert!((y - 0.4).abs() < 1e-15);
    }

    #[test]
    fn exact_rationals() {
        let r = |a, b| Rational64::new(a, b);
        let t = CellTable::new([(0u64, r(1, 3)), (1, r(2, 3))].into()).unwrap();
        let e: BTreeMap<u64, Rational64> = [(0, r(1, 2)), (1, r(1, 4))].into();
        assert_eq!(poststratify(&e, &t).unwrap(), r(1, 3));
    }

    #[test]
    fn single_cell_and_missing_estimate() {
        assert_eq!(poststratify(&est(&[0.7]), &table(&[1.0])).unwrap(), 0.7);
        let err = poststratify(&est(&[0.7]), &table(&[0.5, 0.5])).unwrap_err();
        assert!(matches!(err, PoststratError::MissingEstimate(1)));
    }

    #[test]
    fn table_validation() {
        let bad = CellTable::new([(0u64, -0.1), (1, 1.1)].into());
        assert!(matches!(bad, Err(PoststratError::NegativeFraction { cell: 0, .. })));
        assert!(matches!(
            CellTable::new([(0u64, 0.5), (1, 0.4)].into()),
            Err(PoststratError::NotNormalized(_))
        ));
        assert!(matches!(CellTable::<f64>::new(BTreeMap::new()), Err(PoststratError::Empty)));
    }

    #[test]
    fn built_tables() {
        let spec = PopulationSpec {
            covariates: vec![
                Covariate {
                    name: "sex".into(),
                    levels: 2,
                    marginal: Some(vec![0.6, 0.4]),
                },
                Covariate::new("region", 3),
            ],
            n_population: 100_000,
            n_targets: 1,
            seed: 4,
            ..PopulationSpec::default()
        };
        let pop = generate_population(&spec).unwrap();
        let (_, one) = build_cell_table(&pop, &["sex".into()]).unwrap();
        assert!((one.fraction(0) - 0.6).abs() < 0.01);
        assert!((one.fraction(1) - 0.4).abs() < 0.01);

        let mut uniform = spec.clone();
        uniform.covariates[0].marginal = None;
        let pop = generate_population(&uniform).unwrap();
        let (sub, all) = build_cell_table(&pop, &["sex".into(), "region".into()]).unwrap();
        assert_eq!(all.len(), 6);
        all.check_subset(&sub).unwrap();
        for &f in all.cells().values() {
            assert!((f - 1.0 / 6.0).abs() < 0.01);
        }
        assert!((all.cells().values().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            build_cell_table(&pop, &["income".into()]),
            Err(PoststratError::Sampling(SamplingError::Schema(_)))
        ));
        assert!(build_cell_table(&pop, &[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = table(&[0.25, 0.5, 0.25]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"cell_id,fraction\n"));
        assert_eq!(CellTable::read_csv(&buf[..]).unwrap(), t);
        assert!(CellTable::read_csv("cell,fraction\n0,1\n".as_bytes()).is_err());
        assert!(CellTable::read_csv("cell_id,fraction\n0,0.5\n0,0.5\n".as_bytes()).is_err());
    }

    fn table_and_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(0.01f64..1.0, n),
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(-5.0f64..5.0, n),
            )
        })
    }

    fn normalize(w: &[f64]) -> Vec<f64> {
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn linear_in_estimates((w, v, u) in table_and_pair(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let t = table(&normalize(&w));
            let mix: Vec<f64> = v.iter().zip(&u).map(|(x, y)| a * x + b * y).collect();
            let lhs = poststratify(&est(&mix), &t).unwrap();
            let rhs = a * poststratify(&est(&v), &t).unwrap() + b * poststratify(&est(&u), &t).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn within_estimate_range((w, v, _) in table_and_pair()) {
            let t = table(&normalize(&w));
            let y = poststratify(&est(&v), &t).unwrap();
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        }

        #[test]
        fn constant_estimates((w, _, _) in table_and_pair(), c in -5.0f64..5.0) {
            let t = table(&normalize(&w));
            let y = poststratify(&est(&vec![c; w.len()]), &t).unwrap();
            prop_assert!((y - c).abs() < 1e-12);
        }
    }
}
