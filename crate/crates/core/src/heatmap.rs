//! Risk heatmaps: GeoJSON polygons per cell and a flat PNG raster.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geogrid::{CellId, RegionGrid};
use crate::labeling::N_LEVELS;

/// Low, medium, high.
pub const PALETTE: [[u8; 3]; N_LEVELS] = [[26, 150, 65], [253, 174, 97], [215, 25, 28]];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatCell {
    pub cell: CellId,
    pub risk: usize,
    /// Accident severity sum, when known.
    pub na: Option<f64>,
}

/// Orders the input row-major and checks it covers every cell exactly once.
fn arrange(grid: &RegionGrid, cells: &[HeatCell]) -> Result<Vec<HeatCell>> {
    let mut slots: Vec<Option<HeatCell>> = vec![None; grid.n_cells()];
    for c in cells {
        grid.check(c.cell)?;
        if c.risk >= N_LEVELS {
            return Err(Error::InvalidArgument(format!(
                "cell ({}, {}): risk {} is not a level",
                c.cell.row, c.cell.col, c.risk
            )));
        }
        let slot = &mut slots[grid.linear(c.cell)];
        if slot.is_some() {
            return Err(Error::InvalidArgument(format!(
                "cell ({}, {}) listed twice",
                c.cell.row, c.cell.col
            )));
        }
        *slot = Some(*c);
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| {
                let id = grid.cell(i);
                Error::InvalidArgument(format!("no risk level for cell ({}, {})", id.row, id.col))
            })
        })
        .collect()
}

/// Convenience: one [`HeatCell`] per linear cell id.
pub fn heat_cells(grid: &RegionGrid, risk: &[usize], na: Option<&[f64]>) -> Vec<HeatCell> {
    risk.iter()
        .enumerate()
        .map(|(i, &r)| HeatCell {
            cell: grid.cell(i),
            risk: r,
            na: na.map(|v| v[i]),
        })
        .collect()
}

/// A FeatureCollection with one counterclockwise, closed polygon per cell,
/// in `[lon, lat]` order.
pub fn heatmap_geojson(grid: &RegionGrid, cells: &[HeatCell]) -> Result<Value> {
    let cells = arrange(grid, cells)?;
    let mut features = Vec::with_capacity(cells.len());
    for c in cells {
        let b = grid.cell_bounds(c.cell)?;
        let ring = json!([
            [b.lon_min, b.lat_min],
            [b.lon_max, b.lat_min],
            [b.lon_max, b.lat_max],
            [b.lon_min, b.lat_max],
            [b.lon_min, b.lat_min],
        ]);
        features.push(json!({
            "type": "Feature",
            "geometry": { "type": "Polygon", "coordinates": [ring] },
            "properties": {
                "row": c.cell.row,
                "col": c.cell.col,
                "risk": c.risk,
                "na": c.na,
            },
        }));
    }
    Ok(json!({ "type": "FeatureCollection", "features": features }))
}

pub fn write_geojson(path: &Path, grid: &RegionGrid, cells: &[HeatCell]) -> Result<()> {
    let doc = heatmap_geojson(grid, cells)?;
    let mut text = serde_json::to_string(&doc).expect("json serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One pixel per cell, north up.
pub fn write_png(path: &Path, grid: &RegionGrid, cells: &[HeatCell]) -> Result<()> {
    let cells = arrange(grid, cells)?;
    let mut img = image::RgbImage::new(grid.cols as u32, grid.rows as u32);
    for c in cells {
        let y = (grid.rows - 1 - c.cell.row) as u32;
        img.put_pixel(c.cell.col as u32, y, image::Rgb(PALETTE[c.risk]));
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
