//! Seeded synthetic city with a known accident-risk rule.
//!
//! Every cell draws three latent traits uniformly from `[0, 1]`:
//! traffic intensity `tau`, road complexity `kappa` and visual clutter `nu`.
//! They surface in the raw sources as follows:
//!
//! * GPS: `Poisson(trips * tau)` round trips to a neighbouring cell, leaving
//!   in the morning and returning in the evening;
//! * OSM: an `m x m` street lattice with `m = 2 + round(4 kappa)`;
//! * tiles: `2 + round(40 nu)` bright line segments on a gray background;
//! * CNN vectors: a fixed random projection of `(nu, kappa)` plus noise;
//! * POIs: trait-independent clutter.
//!
//! Accident counts are `Poisson(max_rate * logistic(a tau + b kappa + c nu
//! - offset + noise * N(0, 1)))`, each with severity 1.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::{make_grid, BoundingBox, CellId, RegionGrid, KM_PER_DEGREE};
use crate::ingest::D_POI;
use crate::labeling::{self, RiskLabel};
use crate::seed;

/// Midnight UTC, 2017-07-14.
const EPOCH_DAY: i64 = 1_499_990_400;
const DAY: i64 = 86_400;

/// Highway values drawn for synthetic ways, spanning all width levels.
const HIGHWAYS: [&str; 8] = [
    "footway",
    "path",
    "residential",
    "service",
    "primary",
    "tertiary",
    "motorway",
    "trunk",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    /// South-west corner of the city.
    pub lat_min: f64,
    pub lon_min: f64,
    pub seed: u64,
    /// Standard deviation of the logit noise.
    pub noise: f64,
    /// Logit coefficients of traffic, roads and visual clutter.
    pub coef_traffic: f64,
    pub coef_roads: f64,
    pub coef_visual: f64,
    /// Logit offset; half the coefficient sum when absent.
    pub offset: Option<f64>,
    /// Expected accidents per cell at a saturated logistic.
    pub max_rate: f64,
    /// Expected round trips from a cell with `tau = 1`.
    pub trips_per_cell: f64,
    pub poi_per_cell: f64,
    pub tile_size: usize,
    pub cnn_dim: usize,
    pub cnn_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            rows: 40,
            cols: 50,
            lat_min: 31.0,
            lon_min: 121.0,
            seed: 42,
            noise: 0.1,
            coef_traffic: 6.0,
            coef_roads: 3.0,
            coef_visual: 6.0,
            offset: None,
            max_rate: 40.0,
            trips_per_cell: 30.0,
            poi_per_cell: 8.0,
            tile_size: 256,
            cnn_dim: crate::ingest::D_CNN,
            cnn_noise: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("synth.{key}"),
                message: message.into(),
            })
        };
        if self.rows * self.cols < 100 {
            return bad("rows", "the city needs at least 100 cells");
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad("noise", "must be in [0, 0.5)");
        }
        if self.tile_size < crate::visual::PATCH {
            return bad("tile_size", "tiles must hold one 256-pixel patch");
        }
        if self.cnn_dim == 0 {
            return bad("cnn_dim", "must be positive");
        }
        if !(self.max_rate > 0.0) || self.trips_per_cell < 0.0 || self.poi_per_cell < 0.0 {
            return bad("max_rate", "rates must be non-negative (max_rate positive)");
        }
        Ok(())
    }

    pub fn offset(&self) -> f64 {
        self.offset
            .unwrap_or(0.5 * (self.coef_traffic + self.coef_roads + self.coef_visual))
    }

    /// A box whose 1 km grid has exactly `rows x cols` cells.
    pub fn bbox(&self) -> Result<BoundingBox> {
        let lat_span = (self.rows as f64 - 1e-6) / KM_PER_DEGREE;
        let mid = self.lat_min + 0.5 * lat_span;
        let lon_span = (self.cols as f64 - 1e-6) / (KM_PER_DEGREE * mid.to_radians().cos());
        BoundingBox::new(self.lat_min, self.lat_min + lat_span, self.lon_min, self.lon_min + lon_span)
    }

    pub fn grid(&self) -> Result<RegionGrid> {
        make_grid(self.bbox()?)
    }
}

/// File names written by [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub gps: PathBuf,
    pub poi: PathBuf,
    pub osm: PathBuf,
    pub tiles: PathBuf,
    pub cnn: PathBuf,
    pub accidents: PathBuf,
    pub traits: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SynthPaths {
            gps: dir.join("gps.csv"),
            poi: dir.join("poi.csv"),
            osm: dir.join("osm.xml"),
            tiles: dir.join("tiles"),
            cnn: dir.join("cnn.csv"),
            accidents: dir.join("accidents.csv"),
            traits: dir.join("traits.csv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellTraits {
    pub tau: f64,
    pub kappa: f64,
    pub nu: f64,
}

/// In-memory ground truth of a generated city.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCity {
    pub grid: RegionGrid,
    pub traits: Vec<CellTraits>,
    /// Expected accident count per cell.
    pub rates: Vec<f64>,
    /// Generated severity sum per cell.
    pub severity: Vec<f64>,
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

fn cell_rng(spec: &SynthSpec, stream: &str, cell: usize) -> ChaCha8Rng {
    seed::rng(spec.seed, &[seed::tag(stream), cell as u64])
}

/// Uniform point in the inner 90% of a cell.
fn point_in(bounds: &BoundingBox, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u: f64 = rng.gen_range(0.05..0.95);
    let v: f64 = rng.gen_range(0.05..0.95);
    (
        bounds.lat_min + u * (bounds.lat_max - bounds.lat_min),
        bounds.lon_min + v * (bounds.lon_max - bounds.lon_min),
    )
}

fn traits_of(spec: &SynthSpec, cell: usize) -> CellTraits {
    let mut rng = cell_rng(spec, "traits", cell);
    CellTraits {
        tau: rng.gen(),
        kappa: rng.gen(),
        nu: rng.gen(),
    }
}

fn logit_of(spec: &SynthSpec, t: &CellTraits, cell: usize) -> f64 {
    let mut rng = cell_rng(spec, "risk-noise", cell);
    let eps: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
    spec.coef_traffic * t.tau + spec.coef_roads * t.kappa + spec.coef_visual * t.nu - spec.offset()
        + spec.noise * eps
}

/// Traits, rates and accident counts without writing any files.
pub fn simulate(spec: &SynthSpec) -> Result<SynthCity> {
    spec.validate()?;
    let grid = spec.grid()?;
    let n = grid.n_cells();
    let traits: Vec<CellTraits> = (0..n).map(|i| traits_of(spec, i)).collect();
    let rates: Vec<f64> = traits
        .iter()
        .enumerate()
        .map(|(i, t)| spec.max_rate * logistic(logit_of(spec, t, i)))
        .collect();
    let severity = rates
        .iter()
        .enumerate()
        .map(|(i, &r)| poisson(&mut cell_rng(spec, "accident-count", i), r) as f64)
        .collect();
    Ok(SynthCity {
        grid,
        traits,
        rates,
        severity,
    })
}

/// Risk levels of the generator's own severity sums.
pub fn planted_labels(city: &SynthCity, seed: u64) -> Result<Vec<RiskLabel>> {
    labeling::kmeans_levels(&city.severity, seed)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn neighbours(grid: &RegionGrid, id: CellId) -> Vec<CellId> {
    let mut out = Vec::with_capacity(4);
    if id.row > 0 {
        out.push(CellId::new(id.row - 1, id.col));
    }
    if id.row + 1 < grid.rows {
        out.push(CellId::new(id.row + 1, id.col));
    }
    if id.col > 0 {
        out.push(CellId::new(id.row, id.col - 1));
    }
    if id.col + 1 < grid.cols {
        out.push(CellId::new(id.row, id.col + 1));
    }
    out
}

fn write_gps(spec: &SynthSpec, city: &SynthCity, path: &Path) -> Result<()> {
    let grid = &city.grid;
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for i in 0..grid.n_cells() {
        let id = grid.cell(i);
        let home = grid.cell_bounds(id)?;
        let nbrs = neighbours(grid, id);
        let mut rng = cell_rng(spec, "gps", i);
        let trips = poisson(&mut rng, spec.trips_per_cell * city.traits[i].tau);
        for k in 0..trips {
            let dest = grid.cell_bounds(nbrs[rng.gen_range(0..nbrs.len())])?;
            let day = EPOCH_DAY + DAY * (k as i64 % 7);
            let leave = day + rng.gen_range(7 * 3600..10 * 3600);
            let back = day + rng.gen_range(16 * 3600..19 * 3600);
            let hops = [
                (leave, point_in(&home, &mut rng)),
                (leave + rng.gen_range(120..480), point_in(&dest, &mut rng)),
                (back, point_in(&dest, &mut rng)),
                (back + rng.gen_range(120..480), point_in(&home, &mut rng)),
            ];
            for (ts, (lat, lon)) in hops {
                writeln!(w, "c{i}t{k},{ts},{lat:.6},{lon:.6}").map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

fn write_poi(spec: &SynthSpec, grid: &RegionGrid, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for i in 0..grid.n_cells() {
        let b = grid.cell_bounds(grid.cell(i))?;
        let mut rng = cell_rng(spec, "poi", i);
        for _ in 0..poisson(&mut rng, spec.poi_per_cell) {
            let (lat, lon) = point_in(&b, &mut rng);
            let cat = rng.gen_range(0..D_POI);
            writeln!(w, "{lat:.6},{lon:.6},{cat}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn write_osm(spec: &SynthSpec, city: &SynthCity, path: &Path) -> Result<()> {
    let grid = &city.grid;
    let mut nodes = String::new();
    let mut ways = String::new();
    let (mut node_id, mut way_id) = (1u64, 1u64);
    for i in 0..grid.n_cells() {
        let b = grid.cell_bounds(grid.cell(i))?;
        let mut rng = cell_rng(spec, "osm", i);
        let m = 2 + (4.0 * city.traits[i].kappa).round() as usize;
        let first = node_id;
        for r in 0..m {
            for c in 0..m {
                let lat = b.lat_min + (0.1 + 0.8 * r as f64 / (m - 1) as f64) * (b.lat_max - b.lat_min);
                let lon = b.lon_min + (0.1 + 0.8 * c as f64 / (m - 1) as f64) * (b.lon_max - b.lon_min);
                let _ = writeln!(nodes, "  <node id=\"{node_id}\" lat=\"{lat:.7}\" lon=\"{lon:.7}\"/>");
                node_id += 1;
            }
        }
        let id_at = |r: usize, c: usize| first + (r * m + c) as u64;
        for line in 0..2 * m {
            let _ = writeln!(ways, "  <way id=\"{way_id}\">");
            for j in 0..m {
                let nd = if line < m { id_at(line, j) } else { id_at(j, line - m) };
                let _ = writeln!(ways, "    <nd ref=\"{nd}\"/>");
            }
            let tag = HIGHWAYS[rng.gen_range(0..HIGHWAYS.len())];
            let _ = writeln!(ways, "    <tag k=\"highway\" v=\"{tag}\"/>\n  </way>");
            way_id += 1;
        }
    }
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(b"<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<osm version=\"0.6\" generator=\"accrisk-synth\">\n")
        .map_err(io)?;
    w.write_all(nodes.as_bytes()).map_err(io)?;
    w.write_all(ways.as_bytes()).map_err(io)?;
    w.write_all(b"</osm>\n").map_err(io)?;
    w.flush().map_err(io)
}

/// Gray tile with `2 + round(40 nu)` two-pixel-wide bright segments.
pub fn render_tile(size: usize, nu: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut px = vec![64u8; size * size];
    let lines = 2 + (40.0 * nu).round() as usize;
    for _ in 0..lines {
        let x0: f64 = rng.gen_range(0.0..size as f64);
        let y0: f64 = rng.gen_range(0.0..size as f64);
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let len: f64 = rng.gen_range(40.0..160.0);
        let steps = (2.0 * len) as usize;
        for s in 0..=steps {
            let t = s as f64 * 0.5;
            let x = x0 + t * angle.cos();
            let y = y0 + t * angle.sin();
            for dx in 0..2 {
                let (xi, yi) = (x as i64 + dx, y as i64);
                if (0..size as i64).contains(&xi) && (0..size as i64).contains(&yi) {
                    px[yi as usize * size + xi as usize] = 224;
                }
            }
        }
    }
    px
}

fn write_tiles(spec: &SynthSpec, city: &SynthCity, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grid = &city.grid;
    for i in 0..grid.n_cells() {
        let id = grid.cell(i);
        let mut rng = cell_rng(spec, "tile", i);
        let px = render_tile(spec.tile_size, city.traits[i].nu, &mut rng);
        let img = image::GrayImage::from_raw(spec.tile_size as u32, spec.tile_size as u32, px)
            .expect("buffer matches tile size");
        let path = dir.join(format!("{}_{}.png", id.row, id.col));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

fn write_cnn(spec: &SynthSpec, city: &SynthCity, path: &Path) -> Result<()> {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut prng = seed::rng(spec.seed, &[seed::tag("cnn-projection")]);
    let proj: Vec<(f64, f64)> = (0..spec.cnn_dim)
        .map(|_| (std.sample(&mut prng), std.sample(&mut prng)))
        .collect();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for i in 0..city.grid.n_cells() {
        let id = city.grid.cell(i);
        let t = &city.traits[i];
        let (a, b) = (2.0 * t.nu - 1.0, 2.0 * t.kappa - 1.0);
        let mut rng = cell_rng(spec, "cnn", i);
        let mut line = format!("{},{}", id.row, id.col);
        for &(pa, pb) in &proj {
            let v = pa * a + pb * b + spec.cnn_noise * std.sample(&mut rng);
            let _ = write!(line, ",{v:.6}");
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn write_accidents(spec: &SynthSpec, city: &SynthCity, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for i in 0..city.grid.n_cells() {
        let b = city.grid.cell_bounds(city.grid.cell(i))?;
        let mut rng = cell_rng(spec, "accident-place", i);
        for _ in 0..city.severity[i] as u64 {
            let (lat, lon) = point_in(&b, &mut rng);
            let ts = EPOCH_DAY + rng.gen_range(0..365 * DAY);
            writeln!(w, "{lat:.6},{lon:.6},{ts},1").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn write_traits(city: &SynthCity, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "row,col,tau,kappa,nu,rate,accidents").map_err(io)?;
    for (i, t) in city.traits.iter().enumerate() {
        let id = city.grid.cell(i);
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            id.row, id.col, t.tau, t.kappa, t.nu, city.rates[i], city.severity[i]
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes every raw source into `dir` and returns the ground truth.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<SynthCity> {
    let city = simulate(spec)?;
    let p = SynthPaths::in_dir(dir);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_gps(spec, &city, &p.gps)?;
    write_poi(spec, &city.grid, &p.poi)?;
    write_osm(spec, &city, &p.osm)?;
    write_tiles(spec, &city, &p.tiles)?;
    write_cnn(spec, &city, &p.cnn)?;
    write_accidents(spec, &city, &p.accidents)?;
    write_traits(&city, &p.traits)?;
    Ok(city)
}

/// Average ranks (ties share their mean rank), starting at 1.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Mean of `values` within each of `q` equal-count quantile groups of `key`.
pub fn quantile_means(key: &[f64], values: &[f64], q: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..key.len()).collect();
    idx.sort_by(|&a, &b| key[a].total_cmp(&key[b]).then(a.cmp(&b)));
    (0..q)
        .map(|g| {
            let lo = g * idx.len() / q;
            let hi = (g + 1) * idx.len() / q;
            idx[lo..hi].iter().map(|&i| values[i]).sum::<f64>() / (hi - lo).max(1) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            rows: 10,
            cols: 12,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn grid_has_requested_dims() {
        for (rows, cols) in [(40, 50), (10, 12), (100, 1)] {
            let s = SynthSpec { rows, cols, ..SynthSpec::default() };
            let g = s.grid().unwrap();
            assert_eq!((g.rows, g.cols), (rows, cols));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec { rows: 5, cols: 5, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { noise: 0.5, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec::default().validate().is_ok());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn simulation_is_deterministic_and_seed_sensitive() {
        let a = simulate(&small()).unwrap();
        assert_eq!(a, simulate(&small()).unwrap());
        let b = simulate(&SynthSpec { seed: 43, ..small() }).unwrap();
        assert_ne!(a.severity, b.severity);
    }

    #[test]
    fn accidents_rise_with_traffic() {
        let city = simulate(&SynthSpec::default()).unwrap();
        let tau: Vec<f64> = city.traits.iter().map(|t| t.tau).collect();
        let means = quantile_means(&tau, &city.severity, 10);
        let deciles: Vec<f64> = (0..10).map(f64::from).collect();
        assert!(spearman(&deciles, &means) > 0.8, "{means:?}");
    }

    #[test]
    fn rendered_tiles_get_denser() {
        let mut rng = seed::rng(1, &[]);
        let sparse = render_tile(256, 0.0, &mut rng);
        let dense = render_tile(256, 1.0, &mut rng);
        let lit = |p: &[u8]| p.iter().filter(|&&v| v > 100).count();
        assert!(lit(&dense) > 5 * lit(&sparse));
    }
}
