//! Readers for the raw data sources.
//!
//! CSV inputs have no header and a fixed field order:
//!
//! | source    | fields                                  |
//! |-----------|-----------------------------------------|
//! | GPS       | `taxi_id,timestamp,lat,lon`             |
//! | POI       | `lat,lon,category`                      |
//! | accidents | `lat,lon,timestamp[,severity]`          |
//! | CNN       | `row,col,v1,...,vD`                     |
//!
//! Record readers are streaming iterators. Malformed lines are skipped and
//! counted; [`Records::finish`] reports the counters and rejects files where
//! more than half the lines were malformed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use log::warn;
use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};

use crate::error::{Error, Result};
use crate::geogrid::{CellId, RegionGrid};

pub const D_POI: usize = 16;
pub const D_CNN: usize = 45;
/// Minimum tile side, needed to cut 256x256 patches.
pub const MIN_TILE_SIDE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GpsPoint {
    pub taxi_id: String,
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoiRecord {
    pub lat: f64,
    pub lon: f64,
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccidentRecord {
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
    pub severity: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseStats {
    /// Non-blank lines seen.
    pub total: usize,
    pub malformed: usize,
}

impl ParseStats {
    pub fn accepted(&self) -> usize {
        self.total - self.malformed
    }
}

/// Line-level parser for one record type.
pub trait RecordFormat {
    type Record;
    fn parse_line(&self, line: &str) -> Option<Self::Record>;
}

pub struct Records<F: RecordFormat> {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    format: F,
    stats: ParseStats,
    _marker: PhantomData<F::Record>,
}

impl<F: RecordFormat> Records<F> {
    pub fn open(path: &Path, format: F) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Records {
            path: path.to_path_buf(),
            lines: BufReader::new(file).lines(),
            format,
            stats: ParseStats::default(),
            _marker: PhantomData,
        })
    }

    pub fn stats(&self) -> ParseStats {
        self.stats
    }

    /// Final counters; errors when more than half the lines were malformed.
    pub fn finish(self) -> Result<ParseStats> {
        check_corrupt(&self.path, self.stats)
    }
}

fn check_corrupt(path: &Path, stats: ParseStats) -> Result<ParseStats> {
    if stats.malformed * 2 > stats.total {
        return Err(Error::CorruptInput {
            path: path.to_path_buf(),
            malformed: stats.malformed,
            total: stats.total,
        });
    }
    Ok(stats)
}

impl<F: RecordFormat> Iterator for Records<F> {
    type Item = Result<F::Record>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            self.stats.total += 1;
            match self.format.parse_line(line) {
                Some(r) => return Some(Ok(r)),
                None => self.stats.malformed += 1,
            }
        }
    }
}

/// Drains a reader into memory and applies the corruption check.
pub fn read_all<F: RecordFormat>(mut records: Records<F>) -> Result<(Vec<F::Record>, ParseStats)> {
    let mut out = Vec::new();
    for r in records.by_ref() {
        out.push(r?);
    }
    let stats = records.finish()?;
    Ok((out, stats))
}

fn finite(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn timestamp(s: &str) -> Option<i64> {
    s.trim().parse::<i64>().ok().filter(|&t| t >= 0)
}

pub struct GpsFormat;

impl RecordFormat for GpsFormat {
    type Record = GpsPoint;

    fn parse_line(&self, line: &str) -> Option<GpsPoint> {
        let mut it = line.split(',');
        let taxi_id = it.next()?.trim();
        if taxi_id.is_empty() {
            return None;
        }
        let timestamp = timestamp(it.next()?)?;
        let lat = finite(it.next()?)?;
        let lon = finite(it.next()?)?;
        if it.next().is_some() {
            return None;
        }
        Some(GpsPoint {
            taxi_id: taxi_id.to_string(),
            timestamp,
            lat,
            lon,
        })
    }
}

pub struct PoiFormat {
    pub n_categories: usize,
}

impl RecordFormat for PoiFormat {
    type Record = PoiRecord;

    fn parse_line(&self, line: &str) -> Option<PoiRecord> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return None;
        }
        let category = f[2].trim().parse::<usize>().ok()?;
        if category >= self.n_categories {
            return None;
        }
        Some(PoiRecord {
            lat: finite(f[0])?,
            lon: finite(f[1])?,
            category,
        })
    }
}

pub struct AccidentFormat;

impl RecordFormat for AccidentFormat {
    type Record = AccidentRecord;

    fn parse_line(&self, line: &str) -> Option<AccidentRecord> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 && f.len() != 4 {
            return None;
        }
        let severity = match f.get(3) {
            Some(s) if !s.trim().is_empty() => finite(s)?,
            _ => 1.0,
        };
        if severity <= 0.0 {
            return None;
        }
        Some(AccidentRecord {
            lat: finite(f[0])?,
            lon: finite(f[1])?,
            timestamp: timestamp(f[2])?,
            severity,
        })
    }
}

pub fn parse_gps(path: &Path) -> Result<Records<GpsFormat>> {
    Records::open(path, GpsFormat)
}

pub fn parse_poi(path: &Path, n_categories: usize) -> Result<Records<PoiFormat>> {
    Records::open(path, PoiFormat { n_categories })
}

pub fn parse_accidents(path: &Path) -> Result<Records<AccidentFormat>> {
    Records::open(path, AccidentFormat)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Way {
    pub nodes: Vec<i64>,
    pub highway: Option<String>,
}

/// Road network read from OpenStreetMap XML. Immutable after parsing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OsmGraph {
    pub nodes: BTreeMap<i64, (f64, f64)>,
    pub ways: BTreeMap<i64, Way>,
    /// Ways dropped for referencing missing nodes or having fewer than 2 nodes.
    pub dropped_ways: usize,
}

fn attrs(e: &BytesStart<'_>) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for a in e.attributes() {
        let a = a.map_err(|e| e.to_string())?;
        let key = a.key.as_ref().to_string();
        let value = a
            .normalized_value(XmlVersion::Implicit1_0)
            .map_err(|e| e.to_string())?
            .into_owned();
        out.insert(key, value);
    }
    Ok(out)
}

fn line_of(text: &str, byte: u64) -> usize {
    let end = (byte as usize).min(text.len());
    text.as_bytes()[..end].iter().filter(|&&b| b == b'\n').count() + 1
}

/// Parses an OSM XML document. Relations and unknown elements are ignored.
pub fn parse_osm(path: &Path) -> Result<OsmGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_osm_str(&text).map_err(|(line, message)| Error::Xml {
        path: path.to_path_buf(),
        line,
        message,
    })
}

pub fn parse_osm_str(text: &str) -> std::result::Result<OsmGraph, (usize, String)> {
    enum Open {
        None,
        Way(i64, Way),
        Other,
    }

    let mut reader = Reader::from_str(text);
    let mut nodes = BTreeMap::new();
    let mut raw_ways: BTreeMap<i64, Way> = BTreeMap::new();
    let mut open = Open::None;
    let mut depth = 0usize;
    let err = |reader: &Reader<&[u8]>, msg: String| (line_of(text, reader.error_position()), msg);
    let bad = |reader: &Reader<&[u8]>, msg: &str| (line_of(text, reader.buffer_position()), msg.to_string());

    loop {
        let event = match reader.read_event() {
            Ok(ev) => ev,
            Err(e) => return Err(err(&reader, e.to_string())),
        };
        match event {
            Event::Eof => {
                if depth != 0 {
                    return Err(bad(&reader, "unexpected end of document"));
                }
                break;
            }
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_empty = matches!(event, Event::Empty(_));
                let a = attrs(e).map_err(|m| bad(&reader, &m))?;
                match e.name().as_ref() {
                    "node" => {
                        let id = a.get("id").and_then(|v| v.parse::<i64>().ok());
                        let lat = a.get("lat").and_then(|v| v.parse::<f64>().ok());
                        let lon = a.get("lon").and_then(|v| v.parse::<f64>().ok());
                        match (id, lat, lon) {
                            (Some(id), Some(lat), Some(lon)) => {
                                nodes.insert(id, (lat, lon));
                            }
                            _ => return Err(bad(&reader, "node without valid id/lat/lon")),
                        }
                    }
                    "way" if depth == 1 => {
                        let id = a
                            .get("id")
                            .and_then(|v| v.parse::<i64>().ok())
                            .ok_or_else(|| bad(&reader, "way without valid id"))?;
                        let way = Way {
                            nodes: Vec::new(),
                            highway: None,
                        };
                        if is_empty {
                            raw_ways.insert(id, way);
                        } else {
                            open = Open::Way(id, way);
                        }
                    }
                    "nd" => {
                        if let Open::Way(_, w) = &mut open {
                            let r = a
                                .get("ref")
                                .and_then(|v| v.parse::<i64>().ok())
                                .ok_or_else(|| bad(&reader, "nd without valid ref"))?;
                            w.nodes.push(r);
                        }
                    }
                    "tag" => {
                        if let Open::Way(_, w) = &mut open {
                            if a.get("k").map(String::as_str) == Some("highway") {
                                w.highway = a.get("v").cloned();
                            }
                        }
                    }
                    _ => {
                        if depth == 1 && !is_empty {
                            open = Open::Other;
                        }
                    }
                }
                if !is_empty {
                    depth += 1;
                }
            }
            Event::End(ref e) => {
                depth = depth.saturating_sub(1);
                if depth == 1 {
                    if let ("way", Open::Way(..)) = (e.name().as_ref(), &open) {
                        if let Open::Way(id, w) = std::mem::replace(&mut open, Open::None) {
                            raw_ways.insert(id, w);
                        }
                    } else {
                        open = Open::None;
                    }
                }
            }
            _ => {}
        }
    }

    let mut ways = BTreeMap::new();
    let mut dropped = 0;
    for (id, w) in raw_ways {
        if w.nodes.len() < 2 || w.nodes.iter().any(|n| !nodes.contains_key(n)) {
            dropped += 1;
            continue;
        }
        ways.insert(id, w);
    }
    if dropped > 0 {
        warn!("osm: dropped {dropped} ways with dangling or too few node references");
    }
    Ok(OsmGraph {
        nodes,
        ways,
        dropped_ways: dropped,
    })
}

/// Grayscale intensity matrix in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gray {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Gray {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Gray {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Gray::new(height, width, vec![v; height * width])
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Gray {
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            let start = y * self.width + x0;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Gray::new(h, w, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    pub cell: CellId,
    pub pixels: Gray,
}

/// Luminance of an 8-bit RGB pixel scaled to `[0, 1]`.
pub fn luminance(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}

pub fn decode_tile(path: &Path) -> Result<Gray> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma8(buf) => {
            buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
        }
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| luminance(p[0], p[1], p[2]))
            .collect(),
    };
    Ok(Gray::new(h, w, data))
}

/// `row_col.png` tile files in `dir` that fall inside `grid`.
pub fn tile_paths(dir: &Path, grid: &RegionGrid) -> Result<BTreeMap<CellId, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name.strip_suffix(".png") else {
            continue;
        };
        let Some((r, c)) = stem.split_once('_') else {
            continue;
        };
        let (Ok(row), Ok(col)) = (r.parse::<usize>(), c.parse::<usize>()) else {
            continue;
        };
        let id = CellId::new(row, col);
        if grid.check(id).is_ok() {
            out.insert(id, path);
        } else {
            warn!("tile {name} lies outside the grid, ignored");
        }
    }
    Ok(out)
}

/// Loads every decodable tile; undecodable or undersized images are skipped
/// with a warning.
pub fn load_tiles(dir: &Path, grid: &RegionGrid) -> Result<BTreeMap<CellId, ImageTile>> {
    let mut out = BTreeMap::new();
    for (cell, path) in tile_paths(dir, grid)? {
        match load_tile(&path, cell) {
            Ok(t) => {
                out.insert(cell, t);
            }
            Err(e) => warn!("skipping tile: {e}"),
        }
    }
    Ok(out)
}

pub fn load_tile(path: &Path, cell: CellId) -> Result<ImageTile> {
    let pixels = decode_tile(path)?;
    if pixels.height < MIN_TILE_SIDE || pixels.width < MIN_TILE_SIDE {
        return Err(Error::ImageTooSmall {
            height: pixels.height,
            width: pixels.width,
            min: MIN_TILE_SIDE,
        });
    }
    Ok(ImageTile { cell, pixels })
}

/// Per-cell CNN vectors over the whole grid; cells without a record hold
/// zeros and are flagged absent.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnVectors {
    pub dim: usize,
    pub values: Vec<f64>,
    pub present: Vec<bool>,
}

impl CnnVectors {
    pub fn zeros(grid: &RegionGrid, dim: usize) -> Self {
        CnnVectors {
            dim,
            values: vec![0.0; grid.n_cells() * dim],
            present: vec![false; grid.n_cells()],
        }
    }

    pub fn get(&self, linear: usize) -> &[f64] {
        &self.values[linear * self.dim..(linear + 1) * self.dim]
    }
}

pub fn load_cnn_vectors(path: &Path, grid: &RegionGrid, dim: usize) -> Result<CnnVectors> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = CnnVectors::zeros(grid, dim);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {message}", lineno + 1),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 || fields.len() - 2 != dim {
            return Err(Error::DimensionMismatch {
                context: format!("{} line {}", path.display(), lineno + 1),
                expected: dim,
                got: fields.len().saturating_sub(2),
            });
        }
        let row = fields[0].trim().parse::<usize>().map_err(|e| parse_err(e.to_string()))?;
        let col = fields[1].trim().parse::<usize>().map_err(|e| parse_err(e.to_string()))?;
        let id = CellId::new(row, col);
        grid.check(id)?;
        let li = grid.linear(id);
        for (k, f) in fields[2..].iter().enumerate() {
            out.values[li * dim + k] =
                finite(f).ok_or_else(|| parse_err(format!("bad value `{f}`")))?;
        }
        out.present[li] = true;
    }
    let missing = out.present.iter().filter(|p| !**p).count();
    if missing > 0 {
        warn!("{missing} cells have no CNN vector; using zeros");
    }
    Ok(out)
}
