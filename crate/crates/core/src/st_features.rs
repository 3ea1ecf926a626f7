//! Spatio-temporal feature blocks: hourly taxi in/out flows, POI category
//! counts, road-node connectivity levels and road-width levels.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;

use crate::blocks::FeatureBlock;
use crate::error::Result;
use crate::geogrid::RegionGrid;
use crate::ingest::{GpsPoint, OsmGraph, PoiRecord};

pub const HOURS: usize = 24;
pub const D_TRA: usize = 2 * HOURS;
pub const D_CON: usize = 3;
pub const D_WID: usize = 4;
pub const D_U: usize = D_TRA + crate::ingest::D_POI + D_CON + D_WID;

/// Connectivity histogram slots.
pub const CON_HIGH: usize = 0;
pub const CON_MED: usize = 1;
pub const CON_LOW: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficOptions {
    /// Consecutive samples further apart than this break the trajectory.
    pub max_gap_s: i64,
    /// Optional `[start, end)` timestamp window; samples outside are ignored.
    pub time_range: Option<(i64, i64)>,
}

impl Default for TrafficOptions {
    fn default() -> Self {
        TrafficOptions {
            max_gap_s: 600,
            time_range: None,
        }
    }
}

/// 1-based hour of day (UTC) for a timestamp.
pub fn hour_bucket(ts: i64) -> usize {
    (ts.rem_euclid(86_400) / 3_600) as usize + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficPatterns {
    /// Per cell `[I_1..I_24, O_1..O_24]`.
    pub block: FeatureBlock,
    pub transitions: usize,
}

/// Counts cell-to-cell transitions of each taxi. A transition between
/// consecutive samples `p -> q` in different cells adds one outflow to `p`'s
/// cell and one inflow to `q`'s cell, both in the hour of `q`.
pub fn traffic_patterns(
    points: impl IntoIterator<Item = GpsPoint>,
    grid: &RegionGrid,
    opts: TrafficOptions,
) -> TrafficPatterns {
    let mut by_taxi: BTreeMap<String, Vec<(i64, Option<usize>)>> = BTreeMap::new();
    for p in points {
        if let Some((lo, hi)) = opts.time_range {
            if p.timestamp < lo || p.timestamp >= hi {
                continue;
            }
        }
        let cell = grid.locate_linear(p.lat, p.lon);
        by_taxi.entry(p.taxi_id).or_default().push((p.timestamp, cell));
    }
    let mut block = FeatureBlock::zeros(grid.n_cells(), D_TRA);
    let mut transitions = 0;
    for track in by_taxi.values_mut() {
        track.sort_by_key(|&(ts, cell)| (ts, cell));
        for w in track.windows(2) {
            let (t0, c0) = w[0];
            let (t1, c1) = w[1];
            if t1 - t0 > opts.max_gap_s {
                continue;
            }
            let (Some(from), Some(to)) = (c0, c1) else {
                continue;
            };
            if from == to {
                continue;
            }
            let h = hour_bucket(t1) - 1;
            block.row_mut(to)[h] += 1.0;
            block.row_mut(from)[HOURS + h] += 1.0;
            transitions += 1;
        }
    }
    TrafficPatterns { block, transitions }
}

/// Category counts per cell.
pub fn poi_bow(
    pois: impl IntoIterator<Item = PoiRecord>,
    grid: &RegionGrid,
    n_categories: usize,
) -> FeatureBlock {
    let mut block = FeatureBlock::zeros(grid.n_cells(), n_categories);
    for p in pois {
        if p.category >= n_categories {
            continue;
        }
        if let Some(cell) = grid.locate_linear(p.lat, p.lon) {
            block.row_mut(cell)[p.category] += 1.0;
        }
    }
    block
}

/// Number of distinct neighbours of every node that appears in a way.
pub fn node_degrees(osm: &OsmGraph) -> BTreeMap<i64, usize> {
    let mut adj: BTreeMap<i64, BTreeSet<i64>> = BTreeMap::new();
    for way in osm.ways.values() {
        for &n in &way.nodes {
            adj.entry(n).or_default();
        }
        for pair in way.nodes.windows(2) {
            if pair[0] != pair[1] {
                adj.entry(pair[0]).or_default().insert(pair[1]);
                adj.entry(pair[1]).or_default().insert(pair[0]);
            }
        }
    }
    adj.into_iter().map(|(k, v)| (k, v.len())).collect()
}

pub fn connectivity_level(degree: usize) -> usize {
    match degree {
        0..=2 => CON_LOW,
        3 => CON_MED,
        _ => CON_HIGH,
    }
}

/// `(CON_high, CON_med, CON_low)` counts of road nodes per cell.
pub fn node_connectivity(osm: &OsmGraph, grid: &RegionGrid) -> FeatureBlock {
    let mut block = FeatureBlock::zeros(grid.n_cells(), D_CON);
    for (id, degree) in node_degrees(osm) {
        let (lat, lon) = osm.nodes[&id];
        if let Some(cell) = grid.locate_linear(lat, lon) {
            block.row_mut(cell)[connectivity_level(degree)] += 1.0;
        }
    }
    block
}

/// Width level (1..=4) of an OSM `highway` value, and whether the value is
/// in the dictionary. Unknown values fall back to level 2.
pub fn highway_level(tag: &str) -> (usize, bool) {
    match tag {
        "track" | "living_street" | "crossing" | "footway" | "path" | "pedestrian" => (1, true),
        "service" | "residential" | "motorway_junction" | "unclassified" => (2, true),
        "secondary" | "primary" | "primary_link" | "secondary_link" | "tertiary"
        | "tertiary_link" => (3, true),
        "motorway" | "trunk" | "motorway_link" | "trunk_link" => (4, true),
        _ => (2, false),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadWidths {
    pub block: FeatureBlock,
    pub unknown_tags: usize,
}

/// Each highway-tagged way adds one count at its width level to every cell
/// holding at least one of its nodes.
pub fn road_width(osm: &OsmGraph, grid: &RegionGrid) -> RoadWidths {
    let mut block = FeatureBlock::zeros(grid.n_cells(), D_WID);
    let mut unknown: BTreeMap<&str, usize> = BTreeMap::new();
    for way in osm.ways.values() {
        let Some(tag) = way.highway.as_deref() else {
            continue;
        };
        let (level, known) = highway_level(tag);
        if !known {
            *unknown.entry(tag).or_default() += 1;
        }
        let cells: BTreeSet<usize> = way
            .nodes
            .iter()
            .filter_map(|n| osm.nodes.get(n))
            .filter_map(|&(lat, lon)| grid.locate_linear(lat, lon))
            .collect();
        for c in cells {
            block.row_mut(c)[level - 1] += 1.0;
        }
    }
    for (tag, n) in &unknown {
        warn!("unknown highway tag `{tag}` on {n} ways, treated as width level 2");
    }
    RoadWidths {
        block,
        unknown_tags: unknown.values().sum(),
    }
}

/// `X_u = [x_tra, x_poi, x_con, x_wid]`.
pub fn assemble_xu(
    tra: &FeatureBlock,
    poi: &FeatureBlock,
    con: &FeatureBlock,
    wid: &FeatureBlock,
) -> Result<FeatureBlock> {
    FeatureBlock::concat(&[
        ("tra", tra, D_TRA),
        ("poi", poi, crate::ingest::D_POI),
        ("con", con, D_CON),
        ("wid", wid, D_WID),
    ])
}
