//! Per-cell accident severity sums and their 3-level discretization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geogrid::{CellId, RegionGrid};
use crate::ingest::AccidentRecord;
use crate::kmeans::{self, KMeansConfig};

pub const N_LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskLabel {
    pub severity: f64,
    pub level: usize,
}

/// Severity sum per cell (linear index); accidents outside the grid are dropped.
pub fn aggregate_severity(
    accidents: impl IntoIterator<Item = AccidentRecord>,
    grid: &RegionGrid,
) -> Vec<f64> {
    let mut sums = vec![0.0; grid.n_cells()];
    for a in accidents {
        if let Some(cell) = grid.locate_linear(a.lat, a.lon) {
            sums[cell] += a.severity;
        }
    }
    sums
}

/// 1-D K-means with k = 3; levels are assigned in ascending centroid order,
/// so a larger severity never receives a lower level.
pub fn kmeans_levels(values: &[f64], seed: u64) -> Result<Vec<RiskLabel>> {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if distinct.len() < N_LEVELS {
        return Err(Error::DegenerateLabeling(distinct.len()));
    }
    let points: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
    let cfg = KMeansConfig {
        k: N_LEVELS,
        max_iter: 1000,
        tol: 1e-9,
        n_init: 100,
        seed,
    };
    let fit = kmeans::kmeans(&points, &cfg)?;
    let mut order: Vec<usize> = (0..N_LEVELS).collect();
    order.sort_by(|&a, &b| fit.centroids[a][0].total_cmp(&fit.centroids[b][0]));
    let mut rank = [0; N_LEVELS];
    for (level, &c) in order.iter().enumerate() {
        rank[c] = level;
    }
    Ok(values
        .iter()
        .zip(&fit.assignments)
        .map(|(&v, &a)| RiskLabel {
            severity: v,
            level: rank[a],
        })
        .collect())
}

/// Fraction of positions where two labelings agree.
pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Writes `row,col,Na,y` for every cell.
pub fn write_labels(path: &Path, grid: &RegionGrid, labels: &[RiskLabel]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    for (i, l) in labels.iter().enumerate() {
        let id = grid.cell(i);
        writeln!(w, "{},{},{},{}", id.row, id.col, l.severity, l.level).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_labels(path: &Path, grid: &RegionGrid) -> Result<Vec<RiskLabel>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = vec![None; grid.n_cells()];
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = || Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: expected row,col,Na,y", lineno + 1),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(perr());
        }
        let row: usize = f[0].parse().map_err(|_| perr())?;
        let col: usize = f[1].parse().map_err(|_| perr())?;
        let severity: f64 = f[2].parse().map_err(|_| perr())?;
        let level: usize = f[3].parse().map_err(|_| perr())?;
        if level >= N_LEVELS {
            return Err(perr());
        }
        let id = CellId::new(row, col);
        grid.check(id)?;
        out[grid.linear(id)] = Some(RiskLabel { severity, level });
    }
    out.into_iter()
        .enumerate()
        .map(|(i, l)| {
            l.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                message: format!("no label for cell {:?}", grid.cell(i)),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::{make_grid_with_dims, BoundingBox};
    use proptest::prelude::*;

    fn levels(v: &[f64]) -> Vec<usize> {
        kmeans_levels(v, 42).unwrap().iter().map(|l| l.level).collect()
    }

    #[test]
    fn aggregation() {
        let g = make_grid_with_dims(BoundingBox::new(0.0, 1.0, 0.0, 1.0).unwrap(), 2, 2).unwrap();
        let acc = |lat, severity| AccidentRecord {
            lat,
            lon: 0.1,
            timestamp: 0,
            severity,
        };
        let sums = aggregate_severity([acc(0.1, 1.0), acc(0.2, 1.0), acc(0.3, 1.0)], &g);
        assert_eq!(sums, vec![3.0, 0.0, 0.0, 0.0]);
        let sums = aggregate_severity([acc(0.9, 0.5), acc(0.9, 2.5), acc(7.0, 1.0)], &g);
        assert_eq!(sums, vec![0.0, 0.0, 3.0, 0.0]);
        assert_eq!(aggregate_severity([], &g), vec![0.0; 4]);
    }

    #[test]
    fn separated_clusters() {
        assert_eq!(levels(&[0.0, 0.0, 10.0, 10.0, 100.0, 100.0]), vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(levels(&[100.0, 1.0, 11.0, 2.0, 10.0]), vec![2, 0, 1, 0, 1]);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(kmeans_levels(&[5.0; 10], 1), Err(Error::DegenerateLabeling(1))));
        assert!(matches!(kmeans_levels(&[1.0, 2.0, 1.0], 1), Err(Error::DegenerateLabeling(2))));
    }

    #[test]
    fn agreement_is_symmetric() {
        let a = [0, 1, 2, 2, 1];
        let b = [0, 2, 2, 1, 1];
        assert_eq!(agreement(&a, &b), agreement(&b, &a));
        assert_eq!(agreement(&a, &a), 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let g = make_grid_with_dims(BoundingBox::new(0.0, 1.0, 0.0, 1.0).unwrap(), 2, 2).unwrap();
        let labels = kmeans_levels(&[0.0, 3.5, 10.0, 1.0], 3).unwrap();
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("labels.csv");
        write_labels(&p, &g, &labels).unwrap();
        assert_eq!(read_labels(&p, &g).unwrap(), labels);
    }

    proptest! {
        #[test]
        fn levels_are_monotone_in_severity(
            v in proptest::collection::vec(0u32..200, 3..80),
            seed in any::<u64>(),
        ) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            if let Ok(labels) = kmeans_levels(&v, seed) {
                for a in &labels {
                    for b in &labels {
                        if a.severity >= b.severity {
                            prop_assert!(a.level >= b.level);
                        }
                    }
                }
            }
        }
    }
}
