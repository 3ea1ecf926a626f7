//! City tessellation into square cells and point location.
//!
//! Kilometers are converted with an equirectangular approximation at the
//! bounding box's mid-latitude. Cells are half-open (`[lo, hi)`) except along
//! the north and east edges of the bounding box, which are closed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KM_PER_DEGREE: f64 = 111.32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let b = BoundingBox {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lat_min, self.lat_max, self.lon_min, self.lon_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBbox("non-finite coordinate".into()));
        }
        if self.lat_min < -90.0 || self.lat_max > 90.0 {
            return Err(Error::InvalidBbox("latitude outside [-90, 90]".into()));
        }
        if self.lon_min < -180.0 || self.lon_max > 180.0 {
            return Err(Error::InvalidBbox("longitude outside [-180, 180]".into()));
        }
        if self.lat_max <= self.lat_min || self.lon_max <= self.lon_min {
            return Err(Error::EmptyGrid);
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.lat_min + self.lat_max),
            0.5 * (self.lon_min + self.lon_max),
        )
    }

    /// Area in squared degrees.
    pub fn area_deg2(&self) -> f64 {
        (self.lat_max - self.lat_min) * (self.lon_max - self.lon_min)
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.lat_min && lat <= self.lat_max && lon >= self.lon_min && lon <= self.lon_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub row: usize,
    pub col: usize,
}

impl CellId {
    pub fn new(row: usize, col: usize) -> Self {
        CellId { row, col }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub bbox: BoundingBox,
    pub rows: usize,
    pub cols: usize,
    pub cell_km: f64,
    /// Cell height in degrees of latitude.
    pub cell_dlat: f64,
    /// Cell width in degrees of longitude.
    pub cell_dlon: f64,
}

/// Builds the 1 km grid covering `bbox`; the last row and column are clipped
/// at the bounding box edge.
pub fn make_grid(bbox: BoundingBox) -> Result<RegionGrid> {
    bbox.validate()?;
    let cell_km = 1.0;
    let (mid_lat, _) = bbox.center();
    let km_per_deg_lon = KM_PER_DEGREE * mid_lat.to_radians().cos();
    let lat_km = (bbox.lat_max - bbox.lat_min) * KM_PER_DEGREE;
    let lon_km = (bbox.lon_max - bbox.lon_min) * km_per_deg_lon;
    let rows = (lat_km / cell_km).ceil() as usize;
    let cols = (lon_km / cell_km).ceil() as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyGrid);
    }
    Ok(RegionGrid {
        bbox,
        rows,
        cols,
        cell_km,
        cell_dlat: cell_km / KM_PER_DEGREE,
        cell_dlon: cell_km / km_per_deg_lon,
    })
}

/// Grid with forced dimensions: the bounding box is split evenly into
/// `rows` x `cols` cells regardless of their metric size.
pub fn make_grid_with_dims(bbox: BoundingBox, rows: usize, cols: usize) -> Result<RegionGrid> {
    bbox.validate()?;
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyGrid);
    }
    let cell_dlat = (bbox.lat_max - bbox.lat_min) / rows as f64;
    let cell_dlon = (bbox.lon_max - bbox.lon_min) / cols as f64;
    Ok(RegionGrid {
        bbox,
        rows,
        cols,
        cell_km: cell_dlat * KM_PER_DEGREE,
        cell_dlat,
        cell_dlon,
    })
}

impl RegionGrid {
    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn linear(&self, id: CellId) -> usize {
        id.row * self.cols + id.col
    }

    pub fn cell(&self, linear: usize) -> CellId {
        CellId::new(linear / self.cols, linear % self.cols)
    }

    pub fn cells(&self) -> impl Iterator<Item = CellId> + '_ {
        (0..self.n_cells()).map(|i| self.cell(i))
    }

    pub fn check(&self, id: CellId) -> Result<()> {
        if id.row < self.rows && id.col < self.cols {
            Ok(())
        } else {
            Err(Error::CellOutOfRange {
                row: id.row,
                col: id.col,
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    fn row_edge(&self, r: usize) -> f64 {
        if r >= self.rows {
            self.bbox.lat_max
        } else {
            self.bbox.lat_min + r as f64 * self.cell_dlat
        }
    }

    fn col_edge(&self, c: usize) -> f64 {
        if c >= self.cols {
            self.bbox.lon_max
        } else {
            self.bbox.lon_min + c as f64 * self.cell_dlon
        }
    }

    /// Index of the half-open interval containing `v`, consistent with the
    /// edge coordinates reported by [`cell_bounds`](Self::cell_bounds).
    fn bucket(v: f64, lo: f64, step: f64, n: usize, edge: impl Fn(usize) -> f64) -> usize {
        let mut i = ((v - lo) / step).floor().max(0.0) as usize;
        i = i.min(n - 1);
        while i + 1 < n && v >= edge(i + 1) {
            i += 1;
        }
        while i > 0 && v < edge(i) {
            i -= 1;
        }
        i
    }

    /// Containing cell, or `None` for points outside the bounding box.
    pub fn locate(&self, lat: f64, lon: f64) -> Option<CellId> {
        if !lat.is_finite() || !lon.is_finite() || !self.bbox.contains(lat, lon) {
            return None;
        }
        let row = Self::bucket(lat, self.bbox.lat_min, self.cell_dlat, self.rows, |r| {
            self.row_edge(r)
        });
        let col = Self::bucket(lon, self.bbox.lon_min, self.cell_dlon, self.cols, |c| {
            self.col_edge(c)
        });
        Some(CellId::new(row, col))
    }

    pub fn locate_linear(&self, lat: f64, lon: f64) -> Option<usize> {
        self.locate(lat, lon).map(|id| self.linear(id))
    }

    pub fn cell_bounds(&self, id: CellId) -> Result<BoundingBox> {
        self.check(id)?;
        Ok(BoundingBox {
            lat_min: self.row_edge(id.row),
            lat_max: self.row_edge(id.row + 1),
            lon_min: self.col_edge(id.col),
            lon_max: self.col_edge(id.col + 1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_equator() -> RegionGrid {
        make_grid(BoundingBox::new(-0.5, 0.5, 10.0, 11.0).unwrap()).unwrap()
    }

    #[test]
    fn one_degree_at_equator_is_112_square() {
        let g = unit_equator();
        assert_eq!((g.rows, g.cols), (112, 112));
        assert_eq!(g.n_cells(), 12544);
    }

    #[test]
    fn degenerate_bbox_is_empty_grid() {
        let b = BoundingBox {
            lat_min: 31.0,
            lat_max: 31.0,
            lon_min: 121.0,
            lon_max: 122.0,
        };
        assert!(matches!(make_grid(b), Err(Error::EmptyGrid)));
    }

    #[test]
    fn shanghai_box_has_its_own_count_and_override_works() {
        let b = BoundingBox::new(30.7, 31.4, 121.1, 122.0).unwrap();
        let g = make_grid(b).unwrap();
        assert_eq!(g.rows, 78);
        assert!(g.cols > 80 && g.cols < 90);
        let forced = make_grid_with_dims(b, 82, 87).unwrap();
        assert_eq!(forced.n_cells(), 7134);
    }

    #[test]
    fn locate_corners_and_outside() {
        let g = unit_equator();
        assert_eq!(g.locate(-0.5, 10.0), Some(CellId::new(0, 0)));
        assert_eq!(g.locate(1.5, 10.0), None);
        // 0.5 deg = 55.66 km from the south-west corner.
        assert_eq!(g.locate(0.0, 10.5), Some(CellId::new(55, 55)));
        // North-east corner is closed.
        assert_eq!(g.locate(0.5, 11.0), Some(CellId::new(111, 111)));
        assert_eq!(g.locate(f64::NAN, 10.5), None);
    }

    #[test]
    fn internal_grid_lines_belong_to_larger_index() {
        let g = unit_equator();
        let b = g.cell_bounds(CellId::new(3, 7)).unwrap();
        assert_eq!(g.locate(b.lat_min, b.lon_min), Some(CellId::new(3, 7)));
        assert_eq!(g.locate(b.lat_max, b.lon_max), Some(CellId::new(4, 8)));
    }

    #[test]
    fn cell_bounds_tile_the_box() {
        let g = unit_equator();
        let sw = g.cell_bounds(CellId::new(0, 0)).unwrap();
        assert_eq!((sw.lat_min, sw.lon_min), (g.bbox.lat_min, g.bbox.lon_min));
        let a = g.cell_bounds(CellId::new(5, 5)).unwrap();
        let right = g.cell_bounds(CellId::new(5, 6)).unwrap();
        let up = g.cell_bounds(CellId::new(6, 5)).unwrap();
        assert_eq!(a.lon_max, right.lon_min);
        assert_eq!(a.lat_max, up.lat_min);
        let total: f64 = g.cells().map(|c| g.cell_bounds(c).unwrap().area_deg2()).sum();
        assert!((total - g.bbox.area_deg2()).abs() <= 1e-9 * g.bbox.area_deg2());
        assert!(g.cell_bounds(CellId::new(112, 0)).is_err());
    }

    proptest! {
        #[test]
        fn center_probe_round_trips(row in 0usize..112, col in 0usize..112) {
            let g = unit_equator();
            let id = CellId::new(row, col);
            let b = g.cell_bounds(id).unwrap();
            let (lat, lon) = b.center();
            prop_assert_eq!(g.locate(lat, lon), Some(id));
        }

        #[test]
        fn every_inside_point_has_a_cell(lat in 30.7f64..=31.4, lon in 121.1f64..=122.0) {
            let g = make_grid(BoundingBox::new(30.7, 31.4, 121.1, 122.0).unwrap()).unwrap();
            let id = g.locate(lat, lon).unwrap();
            let b = g.cell_bounds(id).unwrap();
            prop_assert!(lat >= b.lat_min && lat <= b.lat_max);
            prop_assert!(lon >= b.lon_min && lon <= b.lon_max);
        }
    }
}
