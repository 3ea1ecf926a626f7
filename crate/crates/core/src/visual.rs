//! Fractal bag-of-words from satellite tiles.
//!
//! Each 256x256 patch goes through Canny edge detection; the edge map's
//! box-counting measure gives a generalized-dimension spectrum `D(q)` on a
//! fixed q-grid. Spectra are clustered into a dictionary and each tile
//! becomes an L1-normalized histogram of its patches' nearest centroids.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;

use crate::blocks::FeatureBlock;
use crate::error::{Error, Result};
use crate::ingest::{Gray, ImageTile};
use crate::kmeans::{self, KMeansConfig};
use crate::seed;

pub const PATCH: usize = 256;
pub const D_FRA: usize = 8;
pub const Q_GRID: [f64; 8] = [-5.0, -3.0, -2.0, -1.0, 0.0, 2.0, 3.0, 5.0];
pub const BOX_SIZES: [usize; 7] = [2, 4, 8, 16, 32, 64, 128];
pub const SIGMA: f64 = 1.4;
pub const LOW_RATIO: f64 = 0.1;
pub const HIGH_RATIO: f64 = 0.3;

pub type FractalSpectrum = [f64; 8];

/// The reserved spectrum of a patch without edges.
pub const BLANK: FractalSpectrum = [0.0; 8];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize) -> Self {
        EdgeMap {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

fn gaussian_kernel5(sigma: f64) -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 2.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable convolution with clamped borders.
fn convolve_sep(img: &Gray, kx: &[f64], ky: &[f64]) -> Gray {
    let (h, w) = (img.height, img.width);
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, k) in kx.iter().enumerate() {
                s += k * img.at(y, clamp(x as isize + i as isize - rx, w));
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, k) in ky.iter().enumerate() {
                s += k * tmp[clamp(y as isize + i as isize - ry, h) * w + x];
            }
            out[y * w + x] = s;
        }
    }
    Gray::new(h, w, out)
}

/// Canny edge detector: 5x5 Gaussian (sigma 1.4), Sobel gradients,
/// non-maximum suppression and hysteresis at 0.1 / 0.3 of the patch's
/// maximum gradient magnitude.
pub fn canny(patch: &Gray) -> Result<EdgeMap> {
    let (h, w) = (patch.height, patch.width);
    if h < 5 || w < 5 {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: 5,
        });
    }
    let g = gaussian_kernel5(SIGMA);
    let smooth = convolve_sep(patch, &g, &g);
    let gx = convolve_sep(&smooth, &[-1.0, 0.0, 1.0], &[1.0, 2.0, 1.0]);
    let gy = convolve_sep(&smooth, &[1.0, 2.0, 1.0], &[-1.0, 0.0, 1.0]);
    let mag: Vec<f64> = gx.data.iter().zip(&gy.data).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let mut edges = EdgeMap::new(h, w);
    if max <= 1e-12 {
        return Ok(edges);
    }
    let m = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = mag[y * w + x];
            if v <= 0.0 {
                continue;
            }
            let mut angle = gy.at(y, x).atan2(gx.at(y, x)).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // (dy, dx) of the neighbour along the gradient direction.
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (yi, xi) = (y as isize, x as isize);
            let before = m(yi - dy, xi - dx);
            let after = m(yi + dy, xi + dx);
            // Asymmetric comparison keeps exactly one of two equal maxima.
            if v > before && v >= after {
                thin[y * w + x] = v;
            }
        }
    }
    let (low, high) = (LOW_RATIO * max, HIGH_RATIO * max);
    let mut stack = Vec::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= high {
            edges.data[i] = true;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edges.data[j] && thin[j] >= low {
                    edges.data[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    Ok(edges)
}

/// Normalized masses of the non-empty boxes at one box size.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxMasses {
    pub size: usize,
    /// Side of the smallest box covering the whole map.
    pub extent: usize,
    pub masses: Vec<f64>,
}

pub fn box_counts(edges: &EdgeMap, sizes: &[usize]) -> Result<Vec<BoxMasses>> {
    let total = edges.count();
    if total == 0 {
        return Err(Error::EmptyMeasure);
    }
    let extent = edges.height.max(edges.width);
    let mut out = Vec::with_capacity(sizes.len());
    for &eps in sizes {
        let by = edges.height.div_ceil(eps);
        let bx = edges.width.div_ceil(eps);
        let mut counts = vec![0usize; by * bx];
        for y in 0..edges.height {
            for x in 0..edges.width {
                if edges.get(y, x) {
                    counts[(y / eps) * bx + x / eps] += 1;
                }
            }
        }
        let masses = counts
            .into_iter()
            .filter(|&c| c > 0)
            .map(|c| c as f64 / total as f64)
            .collect();
        out.push(BoxMasses { size: eps, extent, masses });
    }
    Ok(out)
}

/// Least-squares slope of a line through the origin.
fn origin_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    sxy / sxx
}

/// `ln sum_i mu_i^q`, evaluated stably.
fn log_moment(masses: &[f64], q: f64) -> f64 {
    let logs: Vec<f64> = masses.iter().map(|m| q * m.ln()).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln()
}

/// `D(q) = slope(ln sum mu^q vs ln eps) / (q - 1)` on [`Q_GRID`], slopes by
/// least squares over every box size.
///
/// The line is pinned at the box covering the whole map, where the moment
/// is exactly 1 for every q. The fit is then a positively weighted average of
/// per-scale Renyi dimensions, so the spectrum never increases in q. A free
/// intercept gives some scales negative weight and breaks that.
pub fn generalized_dimensions(tables: &[BoxMasses]) -> Result<FractalSpectrum> {
    let usable: Vec<&BoxMasses> = tables.iter().filter(|t| !t.masses.is_empty()).collect();
    let mut sizes: Vec<usize> = usable.iter().map(|t| t.size).collect();
    sizes.dedup();
    if sizes.len() < 2 {
        return Err(Error::DegenerateRegression);
    }
    let xs: Vec<f64> = usable.iter().map(|t| (t.size as f64 / t.extent as f64).ln()).collect();
    if xs.iter().all(|&x| x >= 0.0) {
        return Err(Error::DegenerateRegression);
    }
    let mut out = [0.0; 8];
    for (d, &q) in out.iter_mut().zip(Q_GRID.iter()) {
        let ys: Vec<f64> = usable.iter().map(|t| log_moment(&t.masses, q)).collect();
        *d = origin_slope(&xs, &ys) / (q - 1.0);
    }
    Ok(out)
}

/// Spectrum of one patch; edge-free patches map to [`BLANK`].
pub fn patch_spectrum(patch: &Gray) -> Result<FractalSpectrum> {
    let edges = canny(patch)?;
    match box_counts(&edges, &BOX_SIZES) {
        Ok(tables) => generalized_dimensions(&tables),
        Err(Error::EmptyMeasure) => Ok(BLANK),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractalDictionary {
    pub centroids: Vec<FractalSpectrum>,
    /// Slot reserved for edge-free patches, when any were seen in training.
    pub blank_slot: Option<usize>,
    pub seed: u64,
}

impl FractalDictionary {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn assign(&self, s: &FractalSpectrum) -> usize {
        if *s == BLANK {
            if let Some(slot) = self.blank_slot {
                return slot;
            }
        }
        let cs: Vec<Vec<f64>> = self.centroids.iter().map(|c| c.to_vec()).collect();
        kmeans::nearest(&cs, s).0
    }

    /// Text checkpoint: a header line followed by one centroid per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        let blank = self.blank_slot.map_or("none".to_string(), |s| s.to_string());
        let mut body = format!(
            "fractal-dictionary k={} len={} seed={} blank={}\n",
            self.k(),
            D_FRA,
            self.seed,
            blank
        );
        for c in &self.centroids {
            let row: Vec<String> = c.iter().map(|v| v.to_string()).collect();
            body.push_str(&row.join(","));
            body.push('\n');
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let perr = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let mut lines = BufReader::new(f).lines();
        let header = lines
            .next()
            .ok_or_else(|| perr("empty file"))?
            .map_err(|e| Error::io(path, e))?;
        let fields: BTreeMap<&str, &str> = header
            .split_whitespace()
            .skip(1)
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let k: usize = fields.get("k").and_then(|v| v.parse().ok()).ok_or_else(|| perr("bad k"))?;
        let len: usize = fields
            .get("len")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| perr("bad len"))?;
        if len != D_FRA {
            return Err(Error::DimensionMismatch {
                context: "dictionary spectrum length".into(),
                expected: D_FRA,
                got: len,
            });
        }
        let seed = fields
            .get("seed")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| perr("bad seed"))?;
        let blank_slot = match fields.get("blank") {
            Some(&"none") | None => None,
            Some(v) => Some(v.parse().map_err(|_| perr("bad blank slot"))?),
        };
        let mut centroids = Vec::with_capacity(k);
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| perr("bad centroid value")))
                .collect::<Result<_>>()?;
            let c: FractalSpectrum = vals.try_into().map_err(|_| perr("bad centroid length"))?;
            centroids.push(c);
        }
        if centroids.len() != k {
            return Err(perr("centroid count does not match header"));
        }
        Ok(FractalDictionary {
            centroids,
            blank_slot,
            seed,
        })
    }
}

/// Fits a `k`-word dictionary. When blank spectra are present one slot is
/// reserved for them and `k - 1` centroids are fitted on the rest.
pub fn build_dictionary(spectra: &[FractalSpectrum], k: usize, seed: u64) -> Result<FractalDictionary> {
    let has_blank = spectra.iter().any(|s| *s == BLANK);
    let points: Vec<Vec<f64>> = spectra
        .iter()
        .filter(|s| **s != BLANK)
        .map(|s| s.to_vec())
        .collect();
    let fit_k = if has_blank { k - 1 } else { k };
    let mut cfg = KMeansConfig::new(fit_k, seed);
    cfg.n_init = 3;
    let fit = kmeans::kmeans(&points, &cfg)?;
    let mut centroids: Vec<FractalSpectrum> = fit
        .centroids
        .into_iter()
        .map(|c| c.try_into().expect("spectrum length"))
        .collect();
    let blank_slot = if has_blank {
        centroids.insert(0, BLANK);
        Some(0)
    } else {
        None
    };
    Ok(FractalDictionary {
        centroids,
        blank_slot,
        seed,
    })
}

/// Top-left corners of the random patches of one tile.
pub fn patch_positions(tile: &ImageTile, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let (h, w) = (tile.pixels.height, tile.pixels.width);
    if h < PATCH || w < PATCH {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: PATCH,
        });
    }
    let mut rng = seed::rng(seed, &[seed::tag("patch"), tile.cell.row as u64, tile.cell.col as u64]);
    Ok((0..n)
        .map(|_| (rng.gen_range(0..=h - PATCH), rng.gen_range(0..=w - PATCH)))
        .collect())
}

/// Spectra of `n` seeded random patches; repeated positions are computed once.
pub fn tile_spectra(tile: &ImageTile, n: usize, seed: u64) -> Result<Vec<FractalSpectrum>> {
    let mut cache: BTreeMap<(usize, usize), FractalSpectrum> = BTreeMap::new();
    let mut out = Vec::with_capacity(n);
    for pos in patch_positions(tile, n, seed)? {
        let s = match cache.get(&pos) {
            Some(s) => *s,
            None => {
                let s = patch_spectrum(&tile.pixels.crop(pos.0, pos.1, PATCH, PATCH))?;
                cache.insert(pos, s);
                s
            }
        };
        out.push(s);
    }
    Ok(out)
}

pub fn bow_from_spectra(spectra: &[FractalSpectrum], dict: &FractalDictionary) -> Vec<f64> {
    let mut hist = vec![0.0; dict.k()];
    for s in spectra {
        hist[dict.assign(s)] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    if total > 0.0 {
        hist.iter_mut().for_each(|v| *v /= total);
    }
    hist
}

/// `x_fra` of one tile.
pub fn quantize_bow(
    tile: &ImageTile,
    dict: &FractalDictionary,
    patches_per_tile: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(bow_from_spectra(&tile_spectra(tile, patches_per_tile, seed)?, dict))
}

/// `X_v = [x_fra, x_cnn]`.
pub fn assemble_xv(fra: &FeatureBlock, cnn: &FeatureBlock, d_cnn: usize) -> Result<FeatureBlock> {
    FeatureBlock::concat(&[("fra", fra, D_FRA), ("cnn", cnn, d_cnn)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::CellId;

    fn step_patch() -> Gray {
        let mut g = Gray::filled(PATCH, PATCH, 0.0);
        for y in 0..PATCH {
            for x in PATCH / 2..PATCH {
                g.data[y * PATCH + x] = 1.0;
            }
        }
        g
    }

    #[test]
    fn constant_patch_has_no_edges() {
        let e = canny(&Gray::filled(64, 64, 0.7)).unwrap();
        assert_eq!(e.count(), 0);
        assert!(canny(&Gray::filled(4, 64, 0.0)).is_err());
    }

    #[test]
    fn step_edge_is_one_pixel_wide() {
        let e = canny(&step_patch()).unwrap();
        assert!(e.count() > 0);
        for y in 0..PATCH {
            let cols: Vec<usize> = (0..PATCH).filter(|&x| e.get(y, x)).collect();
            assert_eq!(cols.len(), 1, "row {y}: {cols:?}");
            assert!((127..=129).contains(&cols[0]));
        }
    }

    #[test]
    fn inverted_patch_same_edges() {
        let mut rng = seed::rng(9, &[]);
        let p = Gray::new(64, 64, (0..64 * 64).map(|_| rng.gen::<f64>()).collect());
        let inv = Gray::new(64, 64, p.data.iter().map(|v| 1.0 - v).collect());
        assert_eq!(canny(&p).unwrap(), canny(&inv).unwrap());
    }

    #[test]
    fn full_measure_boxes() {
        let mut e = EdgeMap::new(256, 256);
        e.data.iter_mut().for_each(|b| *b = true);
        let t = box_counts(&e, &[128]).unwrap();
        assert_eq!(t[0].masses, vec![0.25; 4]);
        let d = generalized_dimensions(&box_counts(&e, &BOX_SIZES).unwrap()).unwrap();
        assert!(d.iter().all(|v| (v - 2.0).abs() < 0.05), "{d:?}");
    }

    #[test]
    fn single_pixel_measure() {
        let mut e = EdgeMap::new(256, 256);
        e.set(100, 37, true);
        let t = box_counts(&e, &BOX_SIZES).unwrap();
        assert!(t.iter().all(|b| b.masses == vec![1.0]));
        let d = generalized_dimensions(&t).unwrap();
        assert!(d.iter().all(|v| v.abs() < 0.01));
        assert!(matches!(box_counts(&EdgeMap::new(8, 8), &[2]), Err(Error::EmptyMeasure)));
        assert!(matches!(
            generalized_dimensions(&t[..1]),
            Err(Error::DegenerateRegression)
        ));
    }

    #[test]
    fn line_has_dimension_one() {
        let mut e = EdgeMap::new(256, 256);
        for x in 0..256 {
            e.set(77, x, true);
        }
        let d = generalized_dimensions(&box_counts(&e, &BOX_SIZES).unwrap()).unwrap();
        assert!((d[4] - 1.0).abs() < 0.1, "{d:?}");
    }

    #[test]
    fn masses_sum_to_one() {
        let mut rng = seed::rng(4, &[]);
        let mut e = EdgeMap::new(256, 256);
        e.data.iter_mut().for_each(|b| *b = rng.gen::<f64>() < 0.05);
        for t in box_counts(&e, &BOX_SIZES).unwrap() {
            assert!((t.masses.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn lines_tile(width: usize, period: impl Fn(usize) -> usize) -> ImageTile {
        let h = 256;
        let mut g = Gray::filled(h, width, 0.2);
        for y in 0..h {
            for x in 0..width {
                let p = period(x);
                if x % p == 0 || y % p == 0 {
                    g.data[y * width + x] = 0.9;
                }
            }
        }
        ImageTile {
            cell: CellId::new(0, 0),
            pixels: g,
        }
    }

    #[test]
    fn identical_patches_give_one_hot() {
        let tile = ImageTile {
            cell: CellId::new(1, 1),
            pixels: step_patch(),
        };
        let dict = FractalDictionary {
            centroids: vec![[0.0; 8], [1.0; 8], [2.0; 8]],
            blank_slot: None,
            seed: 0,
        };
        let h = quantize_bow(&tile, &dict, 16, 3).unwrap();
        assert_eq!(h, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn two_halves_histogram_matches_direct_assignment() {
        // Sparse road grid on the left half, dense on the right.
        let tile = lines_tile(1024, |x| if x < 512 { 64 } else { 6 });
        let left = patch_spectrum(&tile.pixels.crop(0, 0, 256, 256)).unwrap();
        let right = patch_spectrum(&tile.pixels.crop(0, 768, 256, 256)).unwrap();
        let dict = build_dictionary(&[left, right], 2, 1).unwrap();
        let left_slot = dict.assign(&left);
        assert_ne!(left_slot, dict.assign(&right));
        let n = 64;
        let h = quantize_bow(&tile, &dict, n, 5).unwrap();
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Oracle: assign every sampled patch directly.
        let direct = patch_positions(&tile, n, 5)
            .unwrap()
            .into_iter()
            .filter(|&(y, x)| {
                let s = patch_spectrum(&tile.pixels.crop(y, x, 256, 256)).unwrap();
                kmeans::sq_dist(&s, &left) < kmeans::sq_dist(&s, &right)
            })
            .count();
        assert!((h[left_slot] - direct as f64 / n as f64).abs() < 1e-12);
        assert!((h[left_slot] - 0.5).abs() <= 0.15, "{h:?}");
    }

    #[test]
    fn blank_patches_take_the_reserved_slot() {
        let tile = lines_tile(512, |x| if x < 256 { 100_000 } else { 8 });
        let left = patch_spectrum(&tile.pixels.crop(0, 0, 256, 256)).unwrap();
        let right = patch_spectrum(&tile.pixels.crop(0, 256, 256, 256)).unwrap();
        assert_ne!(right, BLANK);
        let flat = patch_spectrum(&Gray::filled(256, 256, 0.3)).unwrap();
        assert_eq!(flat, BLANK);
        let dict = build_dictionary(&[flat, left, right], 2, 1).unwrap();
        assert_eq!(dict.blank_slot, Some(0));
        assert_eq!(dict.centroids[0], BLANK);
        assert_eq!(dict.assign(&BLANK), 0);
    }

    #[test]
    fn dictionary_round_trip_and_determinism() {
        let mut rng = seed::rng(2, &[]);
        let spectra: Vec<FractalSpectrum> = (0..50)
            .map(|_| std::array::from_fn(|_| rng.gen::<f64>()))
            .collect();
        let a = build_dictionary(&spectra, 8, 42).unwrap();
        let b = build_dictionary(&spectra, 8, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.k(), 8);
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("dict.txt");
        a.save(&p).unwrap();
        assert_eq!(FractalDictionary::load(&p).unwrap(), a);
        assert!(build_dictionary(&spectra[..5], 8, 1).is_err());
    }

    #[test]
    fn xv_is_53() {
        let fra = FeatureBlock::zeros(3, 8);
        let cnn = FeatureBlock::zeros(3, 45);
        let xv = assemble_xv(&fra, &cnn, 45).unwrap();
        assert_eq!(xv.dim, 53);
        assert!(xv.values.iter().all(|&v| v == 0.0));
        assert!(assemble_xv(&cnn, &fra, 45).is_err());
    }
}
