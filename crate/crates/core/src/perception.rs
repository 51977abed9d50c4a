//! Simulated post-event parsing: noisy detections, scan-order ids and the
//! id-indexed object map used for grounding.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::monitor::Snapshot;
use crate::rng;
use crate::workspace::{Point, Rect, Scene, Symbol};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Rect,
    /// Footprint polygon, counter-clockwise in a y-up sense.
    pub mask: Vec<Point>,
    pub score: f64,
    pub symbol_estimate: Symbol,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    pub point: Point,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMapEntry {
    pub bbox: Rect,
    pub mask: Vec<Point>,
    pub anchor: Point,
    pub grasp: Grasp,
    pub symbol_estimate: Symbol,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMap {
    pub entries: BTreeMap<u32, ObjectMapEntry>,
    pub source_frame: u64,
}

impl ObjectMap {
    pub fn get(&self, id: u32) -> Option<&ObjectMapEntry> {
        self.entries.get(&id)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn anchors(&self) -> BTreeMap<u32, Point> {
        self.entries.iter().map(|(&id, e)| (id, e.anchor)).collect()
    }
}

impl crate::workspace::AnchorLookup for ObjectMap {
    fn anchor_of(&self, id: u32) -> Option<Point> {
        self.entries.get(&id).map(|e| e.anchor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionNoiseConfig {
    pub p_mislabel: f64,
    pub p_miss: f64,
    pub position_jitter_sigma: f64,
    pub confusion_table: BTreeMap<Symbol, Vec<Symbol>>,
    pub seed: u64,
}

impl Default for PerceptionNoiseConfig {
    fn default() -> Self {
        PerceptionNoiseConfig {
            p_mislabel: 0.0,
            p_miss: 0.0,
            position_jitter_sigma: 0.0,
            confusion_table: default_confusion_table(),
            seed: 0,
        }
    }
}

impl PerceptionNoiseConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("p_mislabel", self.p_mislabel), ("p_miss", self.p_miss)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.position_jitter_sigma >= 0.0) {
            return Err("position_jitter_sigma must be non-negative".into());
        }
        for (from, to) in &self.confusion_table {
            if to.contains(from) {
                return Err(format!("confusion table maps {from} to itself"));
            }
        }
        Ok(())
    }
}

/// Visually plausible confusions for every symbol.
pub fn default_confusion_table() -> BTreeMap<Symbol, Vec<Symbol>> {
    let pairs: [(char, &str); 15] = [
        ('0', "8"),
        ('1', "7"),
        ('2', "5"),
        ('3', "8"),
        ('4', "9"),
        ('5', "2"),
        ('6', "9"),
        ('7', "1"),
        ('8', "03"),
        ('9', "64"),
        ('+', "×"),
        ('×', "+"),
        ('−', "÷="),
        ('÷', "−"),
        ('=', "−"),
    ];
    pairs
        .iter()
        .map(|(from, to)| {
            (
                Symbol::from_char(*from).expect("table symbol"),
                to.chars().map(|c| Symbol::from_char(c).expect("table symbol")).collect(),
            )
        })
        .collect()
}

/// Detects the on-table blocks of a snapshot. Deterministic given the
/// noise seed and the snapshot frame.
pub fn detect(snapshot: &Snapshot, noise: &PerceptionNoiseConfig) -> Vec<Detection> {
    let mut rng = rng::stream(noise.seed ^ snapshot.frame_index.rotate_left(17), "detect");
    let jitter = Normal::new(0.0, noise.position_jitter_sigma.max(0.0)).ok();
    let mut out = Vec::with_capacity(snapshot.observation.len());
    for block in &snapshot.observation {
        // draw every variate so that each block consumes a fixed number
        let miss_draw: f64 = rng.random();
        let label_draw: f64 = rng.random();
        let pick_draw: f64 = rng.random();
        let (jx, jy) = match jitter {
            Some(n) if noise.position_jitter_sigma > 0.0 => (n.sample(&mut rng), n.sample(&mut rng)),
            _ => (0.0, 0.0),
        };
        if miss_draw < noise.p_miss {
            continue;
        }
        let mut symbol = block.symbol;
        if label_draw < noise.p_mislabel {
            if let Some(options) = noise.confusion_table.get(&block.symbol).filter(|o| !o.is_empty()) {
                let idx = ((pick_draw * options.len() as f64) as usize).min(options.len() - 1);
                symbol = options[idx];
            }
        }
        let center = Point::new(block.pose.x + jx, block.pose.y + jy);
        let mask = square_polygon(center, block.footprint, block.pose.theta);
        let bbox = bounding_rect(&mask);
        let offset = Point::new(jx, jy).norm();
        let score = 1.0 - (offset / block.footprint).min(1.0);
        out.push(Detection { bbox, mask, score, symbol_estimate: symbol });
    }
    out
}

fn square_polygon(center: Point, side: f64, theta: f64) -> Vec<Point> {
    let h = side / 2.0;
    let (s, c) = theta.sin_cos();
    [(-h, -h), (h, -h), (h, h), (-h, h)]
        .iter()
        .map(|&(dx, dy)| Point::new(center.x + c * dx - s * dy, center.y + s * dx + c * dy))
        .collect()
}

fn bounding_rect(points: &[Point]) -> Rect {
    let mut r = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        r.min_x = r.min_x.min(p.x);
        r.min_y = r.min_y.min(p.y);
        r.max_x = r.max_x.max(p.x);
        r.max_y = r.max_y.max(p.y);
    }
    r
}

/// Area centroid of a simple polygon.
pub fn polygon_centroid(points: &[Point]) -> Point {
    let n = points.len();
    let mut area2 = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        let cross = a.x * b.y - b.x * a.y;
        area2 += cross;
        cx += (a.x + b.x) * cross;
        cy += (a.y + b.y) * cross;
    }
    if area2.abs() < 1e-12 {
        let sum = points.iter().fold(Point::default(), |acc, &p| acc + p);
        return sum * (1.0 / n.max(1) as f64);
    }
    Point::new(cx / (3.0 * area2), cy / (3.0 * area2))
}

/// Point-in-convex-polygon test (boundary counts as inside).
pub fn polygon_contains(points: &[Point], p: Point) -> bool {
    let n = points.len();
    if n < 3 {
        return false;
    }
    let mut sign = 0.0f64;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        if cross.abs() < 1e-9 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Assigns ids in scan order (ascending y, then x, of bbox centres).
pub fn build_object_map(detections: &[Detection], source_frame: u64) -> ObjectMap {
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| {
        let (ca, cb) = (a.bbox.center(), b.bbox.center());
        ca.y.total_cmp(&cb.y)
            .then(ca.x.total_cmp(&cb.x))
            .then(a.symbol_estimate.cmp(&b.symbol_estimate))
    });
    let entries = sorted
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let entry = ObjectMapEntry {
                bbox: d.bbox,
                mask: d.mask.clone(),
                anchor: d.bbox.center(),
                grasp: Grasp { point: polygon_centroid(&d.mask), angle: 0.0 },
                symbol_estimate: d.symbol_estimate,
                score: d.score,
            };
            (i as u32, entry)
        })
        .collect();
    ObjectMap { entries, source_frame }
}

/// Detects and maps a snapshot in one step.
pub fn perceive(snapshot: &Snapshot, noise: &PerceptionNoiseConfig) -> ObjectMap {
    build_object_map(&detect(snapshot, noise), snapshot.frame_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivityModel {
    /// Added to the signal while a hand is in the workspace.
    pub hand_constant: f64,
}

impl Default for ActivityModel {
    fn default() -> Self {
        ActivityModel { hand_constant: 10.0 }
    }
}

/// Simulated activity: summed block displacement per second, plus the hand
/// term while a human is acting.
pub fn compute_activity(
    prev: &Scene,
    cur: &Scene,
    human_active: bool,
    frame_interval: f64,
    model: &ActivityModel,
) -> f64 {
    let moved: f64 = cur
        .blocks
        .values()
        .filter_map(|b| prev.blocks.get(&b.block_id).map(|p| b.anchor().distance(p.anchor())))
        .sum();
    let hand = if human_active { model.hand_constant } else { 0.0 };
    moved / frame_interval + hand
}
