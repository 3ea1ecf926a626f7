//! Dense per-cell feature matrices and their `row,col,f1..fD` CSV form.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geogrid::{CellId, RegionGrid};

/// One feature block over every cell of a grid, row-major by linear cell id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FeatureBlock {
    pub fn zeros(n_cells: usize, dim: usize) -> Self {
        FeatureBlock {
            dim,
            values: vec![0.0; n_cells * dim],
        }
    }

    pub fn n_cells(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Elementwise sum; accumulators from shards merge with this.
    pub fn merge(&mut self, other: &FeatureBlock) -> Result<()> {
        if self.dim != other.dim || self.values.len() != other.values.len() {
            return Err(Error::DimensionMismatch {
                context: "merge".into(),
                expected: self.values.len(),
                got: other.values.len(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    /// Column-wise concatenation of blocks over the same cells.
    pub fn concat(parts: &[(&str, &FeatureBlock, usize)]) -> Result<FeatureBlock> {
        let n = parts.first().map(|p| p.1.n_cells()).unwrap_or(0);
        for (name, block, dim) in parts {
            if block.dim != *dim {
                return Err(Error::DimensionMismatch {
                    context: format!("block `{name}`"),
                    expected: *dim,
                    got: block.dim,
                });
            }
            if block.n_cells() != n {
                return Err(Error::DimensionMismatch {
                    context: format!("cell count of block `{name}`"),
                    expected: n,
                    got: block.n_cells(),
                });
            }
        }
        let dim: usize = parts.iter().map(|p| p.2).sum();
        let mut values = Vec::with_capacity(n * dim);
        for i in 0..n {
            for (_, block, _) in parts {
                values.extend_from_slice(block.row(i));
            }
        }
        Ok(FeatureBlock { dim, values })
    }

    /// Columns `start..start + dim` as a new block.
    pub fn slice(&self, start: usize, dim: usize) -> FeatureBlock {
        let n = self.n_cells();
        let mut values = Vec::with_capacity(n * dim);
        for i in 0..n {
            values.extend_from_slice(&self.row(i)[start..start + dim]);
        }
        FeatureBlock { dim, values }
    }
}

pub fn write_block_csv(path: &Path, grid: &RegionGrid, block: &FeatureBlock) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for (i, id) in grid.cells().enumerate() {
        write!(w, "{},{}", id.row, id.col).map_err(io)?;
        for v in block.row(i) {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a block written by [`write_block_csv`]; every grid cell must appear.
pub fn read_block_csv(path: &Path, grid: &RegionGrid, dim: usize) -> Result<FeatureBlock> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut block = FeatureBlock::zeros(grid.n_cells(), dim);
    let mut seen = vec![false; grid.n_cells()];
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |m: String| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {m}", lineno + 1),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != dim + 2 {
            return Err(Error::DimensionMismatch {
                context: format!("{} line {}", path.display(), lineno + 1),
                expected: dim,
                got: f.len().saturating_sub(2),
            });
        }
        let row = f[0].parse::<usize>().map_err(|e| perr(e.to_string()))?;
        let col = f[1].parse::<usize>().map_err(|e| perr(e.to_string()))?;
        let id = CellId::new(row, col);
        grid.check(id)?;
        let li = grid.linear(id);
        for (k, s) in f[2..].iter().enumerate() {
            block.row_mut(li)[k] = s.parse::<f64>().map_err(|e| perr(e.to_string()))?;
        }
        seen[li] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let id = grid.cell(missing);
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("no row for cell ({}, {})", id.row, id.col),
        });
    }
    Ok(block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::{make_grid_with_dims, BoundingBox};

    #[test]
    fn csv_round_trip_and_slices() {
        let grid =
            make_grid_with_dims(BoundingBox::new(0.0, 1.0, 0.0, 1.0).unwrap(), 2, 3).unwrap();
        let a = FeatureBlock {
            dim: 2,
            values: (0..12).map(|v| v as f64 * 0.1).collect(),
        };
        let b = FeatureBlock {
            dim: 1,
            values: (0..6).map(|v| -(v as f64)).collect(),
        };
        let ab = FeatureBlock::concat(&[("a", &a, 2), ("b", &b, 1)]).unwrap();
        assert_eq!(ab.row(1), &[0.2, 0.30000000000000004, -1.0]);
        assert_eq!(ab.slice(0, 2), a);
        assert_eq!(ab.slice(2, 1), b);
        assert!(FeatureBlock::concat(&[("a", &a, 3)]).is_err());

        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("ab.csv");
        write_block_csv(&p, &grid, &ab).unwrap();
        assert_eq!(read_block_csv(&p, &grid, 3).unwrap(), ab);
        assert!(read_block_csv(&p, &grid, 4).is_err());
    }
}
