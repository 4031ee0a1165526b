//! Ground-truth scenes, prediction sets, pipeline configuration, validation,
//! and JSON Lines serialization.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::geom::Point;

/// Agent class vocabulary; indices are the on-disk `class_id` values.
pub const AGENT_CLASSES: [&str; 4] = ["car", "pedestrian", "traffic_cone", "barrier"];
pub const CAR: usize = 0;
pub const PEDESTRIAN: usize = 1;
pub const TRAFFIC_CONE: usize = 2;
pub const BARRIER: usize = 3;
/// Classes that never move; they may not appear in `dynamic_classes`.
pub const STATIC_AGENT_CLASSES: [usize; 2] = [TRAFFIC_CONE, BARRIER];

/// Map class vocabulary; indices are the on-disk `class_id` values.
pub const MAP_CLASSES: [&str; 3] = ["divider", "crossing", "boundary"];
pub const DIVIDER: usize = 0;
pub const CROSSING: usize = 1;
pub const BOUNDARY: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapInstanceGT {
    pub class_id: usize,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentGT {
    pub class_id: usize,
    pub center: Point,
    /// (length, width) of the box, meters.
    pub size: [f64; 2],
    pub yaw: f64,
    /// Future positions at 0.5 s steps. Exactly `t_future` entries when
    /// `complete`, fewer when the agent leaves the range or never moves.
    pub future: Vec<Point>,
    pub complete: bool,
}

impl AgentGT {
    pub fn is_static_class(&self) -> bool {
        STATIC_AGENT_CLASSES.contains(&self.class_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub map_instances: Vec<MapInstanceGT>,
    pub agents: Vec<AgentGT>,
    /// Agent classes whose futures are forecast and scored.
    pub dynamic_classes: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredMapInstance {
    /// Per-class probabilities in [0, 1], independent (one-vs-all).
    pub scores: Vec<f64>,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredAgent {
    pub scores: Vec<f64>,
    pub center: Point,
    pub size: [f64; 2],
    pub yaw: f64,
    /// Per-mode future as per-step offsets; decode with [`crate::model::decode_offsets`]
    /// anchored at `center`.
    pub forecast: Vec<Vec<Point>>,
}

impl PredAgent {
    /// Index and score of the highest-scoring class.
    pub fn top_class(&self) -> (usize, f64) {
        top_score(&self.scores)
    }
}

impl PredMapInstance {
    pub fn top_class(&self) -> (usize, f64) {
        top_score(&self.scores)
    }
}

fn top_score(scores: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &s) in scores.iter().enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scene_id: String,
    pub map: Vec<PredMapInstance>,
    pub agents: Vec<PredAgent>,
}

/// How evaluation resolves prediction-to-GT candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpaMatching {
    /// Ascending-cost greedy with each side used at most once.
    Greedy,
    /// Globally optimal assignment; kept for sensitivity analysis.
    Hungarian,
}

/// Pipeline configuration. Serialized as a single JSON document; omitted
/// fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Points per map instance polyline.
    pub n_points: usize,
    /// Forecast modes per agent.
    pub n_modes: usize,
    /// Forecast horizon in 0.5 s steps.
    pub t_future: usize,
    /// Hidden feature width.
    pub channels: usize,
    pub heads: usize,
    /// Map-instance keep threshold on the top class score.
    pub tau: f64,
    /// Map-instance keep threshold on point distance to the agent, meters.
    pub mu: f64,
    /// Match/hit radius for end-to-end agent evaluation, meters.
    pub tau_epa: f64,
    /// False-positive penalty weight in the end-to-end score.
    pub alpha: f64,
    /// Loss weights: det cls, det reg, map cls, map reg, motion reg.
    pub lambda: [f64; 5],
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Chamfer radius for a map prediction to claim a GT instance, meters.
    pub chamfer_threshold: f64,
    /// Scene coordinates live in [-half_range, half_range]^2.
    pub half_range: f64,
    /// Minimum top score for a prediction to be counted in evaluation.
    pub score_threshold: f64,
    /// Center-distance thresholds for detection AP, meters.
    pub det_thresholds: Vec<f64>,
    /// Disable residual connections and layer norm around attention blocks.
    pub plain_blocks: bool,
    pub epa_matching: EpaMatching,
    /// Classification and geometry weights of the set-matching cost.
    pub match_cls_weight: f64,
    pub match_geo_weight: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            n_points: 10,
            n_modes: 6,
            t_future: 12,
            channels: 256,
            heads: 8,
            tau: 0.5,
            mu: 20.5,
            tau_epa: 2.0,
            alpha: 0.5,
            lambda: [0.8, 0.1, 0.8, 0.4, 0.2],
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            chamfer_threshold: 1.5,
            half_range: 51.2,
            score_threshold: 0.3,
            det_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            plain_blocks: false,
            epa_matching: EpaMatching::Greedy,
            match_cls_weight: 1.0,
            match_geo_weight: 1.0,
        }
    }
}

impl Config {
    /// Reduced geometry used by fast tests and gradient checks.
    pub fn tiny() -> Self {
        Config {
            n_points: 4,
            n_modes: 2,
            t_future: 3,
            channels: 8,
            heads: 2,
            ..Config::default()
        }
    }

    /// Configuration-level invariant violations.
    pub fn check(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut bad = |field: &str, rule: &str| {
            v.push(Violation { field: field.into(), index: None, rule: rule.into() })
        };
        if self.n_points < 2 {
            bad("n_points", "must be at least 2");
        }
        if self.n_modes == 0 {
            bad("n_modes", "must be positive");
        } else if self.n_modes > self.channels {
            bad("n_modes", "must not exceed channels (mode bank rows are orthogonal)");
        }
        if self.t_future == 0 {
            bad("t_future", "must be positive");
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            bad("channels", "must be positive and even");
        }
        if self.heads == 0 || self.channels % self.heads.max(1) != 0 {
            bad("heads", "must be positive and divide channels");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            bad("tau", "must lie in [0, 1]");
        }
        if !(self.mu > 0.0) {
            bad("mu", "must be positive");
        }
        if !(self.tau_epa > 0.0) {
            bad("tau_epa", "must be positive");
        }
        if !(self.alpha >= 0.0) {
            bad("alpha", "must be non-negative");
        }
        if self.lambda.iter().any(|l| !(*l >= 0.0)) {
            bad("lambda", "weights must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            bad("focal_alpha", "must lie in [0, 1]");
        }
        if !(self.focal_gamma >= 0.0) {
            bad("focal_gamma", "must be non-negative");
        }
        if !(self.chamfer_threshold > 0.0) {
            bad("chamfer_threshold", "must be positive");
        }
        if !(self.half_range > 0.0) {
            bad("half_range", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            bad("score_threshold", "must lie in [0, 1]");
        }
        if self.det_thresholds.is_empty() || self.det_thresholds.iter().any(|t| !(*t > 0.0)) {
            bad("det_thresholds", "must be non-empty and positive");
        }
        if !(self.match_cls_weight >= 0.0) || !(self.match_geo_weight >= 0.0) {
            bad("match_cls_weight", "matching weights must be non-negative");
        }
        v
    }
}

/// One failed data invariant: which field, which element, which rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub index: Option<usize>,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{}[{}]: {}", self.field, i, self.rule),
            None => write!(f, "{}: {}", self.field, self.rule),
        }
    }
}

/// Scene-level invariant violations. Total over arbitrary finite input.
pub fn validate_scene(scene: &Scene, config: &Config) -> Vec<Violation> {
    let mut out = Vec::new();
    let r = config.half_range;
    for (i, inst) in scene.map_instances.iter().enumerate() {
        if inst.class_id >= MAP_CLASSES.len() {
            out.push(violation("map_instances.class_id", i, "unknown map class"));
        }
        if inst.points.len() != config.n_points {
            out.push(violation(
                "map_instances.points",
                i,
                &format!("expected {} points, got {}", config.n_points, inst.points.len()),
            ));
        }
        if !points_finite(&inst.points) {
            out.push(violation("map_instances.points", i, "non-finite coordinate"));
        } else if inst.points.iter().any(|p| p[0].abs() > r || p[1].abs() > r) {
            out.push(violation("map_instances.points", i, "outside the perception range"));
        }
    }
    for (i, a) in scene.agents.iter().enumerate() {
        if a.class_id >= AGENT_CLASSES.len() {
            out.push(violation("agents.class_id", i, "unknown agent class"));
        }
        if !a.center.iter().all(|c| c.is_finite()) || !a.yaw.is_finite() {
            out.push(violation("agents.center", i, "non-finite pose"));
        } else if a.center[0].abs() > r || a.center[1].abs() > r {
            out.push(violation("agents.center", i, "outside the perception range"));
        }
        if !a.size.iter().all(|s| s.is_finite() && *s > 0.0) {
            out.push(violation("agents.size", i, "sizes must be positive"));
        }
        if !points_finite(&a.future) {
            out.push(violation("agents.future", i, "non-finite coordinate"));
        }
        if a.complete && a.future.len() != config.t_future {
            out.push(violation(
                "agents.future",
                i,
                &format!("complete agent needs exactly {} steps, got {}", config.t_future, a.future.len()),
            ));
        }
        if a.future.len() > config.t_future {
            out.push(violation("agents.future", i, "more steps than the horizon"));
        }
    }
    for &c in &scene.dynamic_classes {
        if c >= AGENT_CLASSES.len() {
            out.push(violation("dynamic_classes", c, "unknown agent class"));
        } else if STATIC_AGENT_CLASSES.contains(&c) {
            out.push(violation("dynamic_classes", c, "static classes cannot be dynamic"));
        }
    }
    out
}

/// Prediction-level invariant violations. Total over arbitrary finite input.
pub fn validate_predictions(preds: &PredictionSet, config: &Config) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, m) in preds.map.iter().enumerate() {
        if m.scores.len() != MAP_CLASSES.len() {
            out.push(violation("map.scores", i, "one score per map class required"));
        }
        if !scores_valid(&m.scores) {
            out.push(violation("map.scores", i, "scores must lie in [0, 1]"));
        }
        if m.points.len() != config.n_points {
            out.push(violation(
                "map.points",
                i,
                &format!("expected {} points, got {}", config.n_points, m.points.len()),
            ));
        }
        if !points_finite(&m.points) {
            out.push(violation("map.points", i, "non-finite coordinate"));
        }
    }
    for (i, a) in preds.agents.iter().enumerate() {
        if a.scores.len() != AGENT_CLASSES.len() {
            out.push(violation("agents.scores", i, "one score per agent class required"));
        }
        if !scores_valid(&a.scores) {
            out.push(violation("agents.scores", i, "scores must lie in [0, 1]"));
        }
        if !a.center.iter().all(|c| c.is_finite()) || !a.yaw.is_finite() {
            out.push(violation("agents.center", i, "non-finite pose"));
        }
        if !a.size.iter().all(|s| s.is_finite() && *s > 0.0) {
            out.push(violation("agents.size", i, "sizes must be positive"));
        }
        if a.forecast.len() != config.n_modes {
            out.push(violation(
                "agents.forecast",
                i,
                &format!("expected {} modes, got {}", config.n_modes, a.forecast.len()),
            ));
        }
        for mode in &a.forecast {
            if mode.len() != config.t_future {
                out.push(violation(
                    "agents.forecast",
                    i,
                    &format!("every mode needs exactly {} steps", config.t_future),
                ));
                break;
            }
        }
        if a.forecast.iter().any(|m| !points_finite(m)) {
            out.push(violation("agents.forecast", i, "non-finite offset"));
        }
    }
    out
}

fn violation(field: &str, index: usize, rule: &str) -> Violation {
    Violation { field: field.into(), index: Some(index), rule: rule.into() }
}

fn points_finite(pts: &[Point]) -> bool {
    pts.iter().all(|p| p[0].is_finite() && p[1].is_finite())
}

fn scores_valid(scores: &[f64]) -> bool {
    scores.iter().all(|s| s.is_finite() && (0.0..=1.0).contains(s))
}

/// JSON Lines parse failure with its 1-based line number.
#[derive(Debug)]
pub struct DataError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.msg)
    }
}

impl std::error::Error for DataError {}

fn read_jsonl<T: for<'de> Deserialize<'de>>(r: impl BufRead) -> Result<Vec<T>, DataError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| DataError { line: i + 1, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| DataError { line: i + 1, msg: e.to_string() })?;
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_scenes(r: impl BufRead) -> Result<Vec<Scene>, DataError> {
    read_jsonl(r)
}

pub fn write_scenes(w: impl Write, scenes: &[Scene]) -> std::io::Result<()> {
    write_jsonl(w, scenes)
}

pub fn read_predictions(r: impl BufRead) -> Result<Vec<PredictionSet>, DataError> {
    read_jsonl(r)
}

pub fn write_predictions(w: impl Write, preds: &[PredictionSet]) -> std::io::Result<()> {
    write_jsonl(w, preds)
}
