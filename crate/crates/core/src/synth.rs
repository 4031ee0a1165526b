//! Deterministic procedural scenes, noise-perturbed oracle predictions, and
//! query synthesis for the interaction pipeline.
//!
//! Every random draw comes from a stream keyed by (seed, purpose, scene,
//! item), never by call order, so any artifact regenerates independently.
//! Perturbation magnitudes scale linearly with the requested noise level
//! while the underlying unit draws stay fixed (common random numbers), which
//! makes error curves across levels comparable point by point.

use serde::{Deserialize, Serialize};

use crate::geom::{self, Point};
use crate::model::{encode_offsets, mlp_params_of, BoundParams, QueryBundle};
use crate::rng;
use crate::scene::{
    AgentGT, Config, MapInstanceGT, PredAgent, PredMapInstance, PredictionSet, Scene, BARRIER,
    BOUNDARY, CAR, CROSSING, DIVIDER, PEDESTRIAN, TRAFFIC_CONE,
};
use crate::tensor::{mlp, Result as TensorResult, Tape, Tensor};

/// Scene coordinates live on this dyadic grid so that translating a scene by
/// grid-aligned shifts stays exact in floating point.
pub const COORD_GRID: f64 = 1024.0;

pub fn snap(v: f64) -> f64 {
    (v * COORD_GRID).round() / COORD_GRID
}

pub fn snap_point(p: Point) -> Point {
    [snap(p[0]), snap(p[1])]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneFamily {
    Straight,
    Arc,
    SCurve,
}

/// Generation knobs. Serialized next to outputs so a corpus is reproducible
/// from its manifest alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub lanes: usize,
    pub lane_family: LaneFamily,
    pub agents: usize,
    /// Sampling range for car speed, m/s. Pedestrians walk at a quarter of
    /// the sampled value.
    pub speed_range: [f64; 2],
    pub crossings: usize,
    /// Std-dev of map point noise at level 1, meters.
    pub map_noise: f64,
    /// Std-dev of agent center noise at level 1, meters.
    pub center_noise: f64,
    /// Std-dev of per-step trajectory noise at level 1, meters.
    pub traj_noise: f64,
    /// Probability (at level 1) that an item's score is corrupted downward.
    pub score_corrupt_prob: f64,
    /// Per-slot probability (at level 1) of injecting a false positive.
    pub fp_rate: f64,
    /// Per-item probability (at level 1) of dropping a prediction.
    pub drop_rate: f64,
    /// Std-dev of the extra per-mode forecast jitter at level 1, meters.
    pub mode_jitter: f64,
    /// Std-dev of feature noise added to synthesized queries.
    pub query_noise: f64,
    /// Fraction of dynamic agents that leave the mapped lane mid-horizon and
    /// are marked incomplete.
    pub exit_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 7,
            lanes: 3,
            lane_family: LaneFamily::Straight,
            agents: 4,
            speed_range: [3.0, 8.0],
            crossings: 1,
            map_noise: 0.3,
            center_noise: 0.5,
            traj_noise: 0.3,
            score_corrupt_prob: 0.1,
            fp_rate: 0.15,
            drop_rate: 0.05,
            mode_jitter: 0.4,
            query_noise: 0.05,
            exit_fraction: 0.2,
        }
    }
}

impl GenConfig {
    pub fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.lanes == 0 && self.agents > 0 {
            out.push("agents require at least one lane".into());
        }
        if !(self.speed_range[0] > 0.0 && self.speed_range[1] >= self.speed_range[0]) {
            out.push("speed_range must be ordered and positive".into());
        }
        for (name, v) in [
            ("map_noise", self.map_noise),
            ("center_noise", self.center_noise),
            ("traj_noise", self.traj_noise),
            ("mode_jitter", self.mode_jitter),
            ("query_noise", self.query_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name} must be finite and >= 0"));
            }
        }
        for (name, v) in [
            ("score_corrupt_prob", self.score_corrupt_prob),
            ("fp_rate", self.fp_rate),
            ("drop_rate", self.drop_rate),
            ("exit_fraction", self.exit_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("{name} must lie in [0, 1]"));
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct GenError(pub String);

impl std::fmt::Display for GenError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "generation error: {}", self.0)
    }
}

impl std::error::Error for GenError {}

fn word(s: &str) -> u64 {
    rng::hash_str(s)
}

/// Position along a dense lane polyline; straight-line continuation past the
/// far end so followers keep a consistent heading.
fn lane_position(lane: &[Point], len: f64, s: f64) -> Point {
    if s <= len {
        geom::point_at_arc_length(lane, s)
    } else {
        let end = *lane.last().unwrap();
        let t = geom::tangent_at_arc_length(lane, len);
        geom::add(end, geom::scale(t, s - len))
    }
}

/// Dense centerline for one lane, fully inside the +-lim square. The length
/// shrinks geometrically until the curve fits, so this always terminates.
fn lane_centerline(gen: &GenConfig, index: u64, lane: u64, lim: f64) -> Vec<Point> {
    const DENSE: usize = 48;
    let mut r = rng::stream(gen.seed, &[word("lane"), index, lane]);
    let anchor = [
        rng::uniform_in(&mut r, -0.55 * lim, 0.55 * lim),
        rng::uniform_in(&mut r, -0.55 * lim, 0.55 * lim),
    ];
    let heading = rng::uniform_in(&mut r, 0.0, std::f64::consts::TAU);
    let mut length = rng::uniform_in(&mut r, 45.0, 75.0);
    let radius = rng::uniform_in(&mut r, 25.0, 60.0);
    let turn = if rng::uniform(&mut r) < 0.5 { 1.0 } else { -1.0 };
    loop {
        let pts = trace_lane(gen.lane_family, anchor, heading, length, radius, turn, DENSE);
        if pts.iter().all(|p| p[0].abs() <= lim && p[1].abs() <= lim) {
            return pts;
        }
        length *= 0.8;
    }
}

fn trace_lane(
    family: LaneFamily,
    anchor: Point,
    heading: f64,
    length: f64,
    radius: f64,
    turn: f64,
    n: usize,
) -> Vec<Point> {
    let ds = length / (n - 1) as f64;
    let mut h = heading;
    let mut p = geom::add(anchor, geom::scale([h.cos(), h.sin()], -length / 2.0));
    let mut pts = Vec::with_capacity(n);
    pts.push(p);
    for i in 1..n {
        let curvature = match family {
            LaneFamily::Straight => 0.0,
            LaneFamily::Arc => turn / radius,
            LaneFamily::SCurve => {
                if i <= n / 2 {
                    turn / radius
                } else {
                    -turn / radius
                }
            }
        };
        h += curvature * ds;
        p = geom::add(p, geom::scale([h.cos(), h.sin()], ds));
        pts.push(p);
    }
    pts
}

/// Lateral offset of a dense polyline, one normal per vertex.
fn offset_polyline(dense: &[Point], lateral: f64) -> Vec<Point> {
    let n = dense.len();
    (0..n)
        .map(|i| {
            let (a, b) = if i + 1 < n { (dense[i], dense[i + 1]) } else { (dense[i - 1], dense[i]) };
            let d = geom::sub(b, a);
            let len = geom::norm(d).max(1e-9);
            let normal = [-d[1] / len, d[0] / len];
            geom::add(dense[i], geom::scale(normal, lateral))
        })
        .collect()
}

fn snapped_instance(class_id: usize, dense: &[Point], n_points: usize) -> MapInstanceGT {
    let points = geom::resample(dense, n_points).into_iter().map(snap_point).collect();
    MapInstanceGT { class_id, points }
}

/// Procedurally builds one scene: lane centerlines as dividers, offset
/// boundaries, transverse crossings, and lane-following agents at 2 Hz.
pub fn generate_scene(gen: &GenConfig, config: &Config, index: u64) -> Result<Scene, GenError> {
    let mut problems = gen.check();
    problems.extend(config.check().iter().map(|v| v.to_string()));
    if !problems.is_empty() {
        return Err(GenError(problems.join("; ")));
    }
    let lim = config.half_range - 8.0;
    if lim <= 0.0 {
        return Err(GenError("perception range too small for the lane margin".into()));
    }

    let lanes: Vec<Vec<Point>> =
        (0..gen.lanes).map(|l| lane_centerline(gen, index, l as u64, lim)).collect();
    let lane_lengths: Vec<f64> = lanes.iter().map(|l| geom::polyline_length(l)).collect();

    let mut map_instances = Vec::new();
    for (l, dense) in lanes.iter().enumerate() {
        map_instances.push(snapped_instance(DIVIDER, dense, config.n_points));
        let side = if l % 2 == 0 { 3.5 } else { -3.5 };
        let boundary = offset_polyline(dense, side);
        if boundary.iter().all(|p| p[0].abs() <= lim && p[1].abs() <= lim) {
            map_instances.push(snapped_instance(BOUNDARY, &boundary, config.n_points));
        }
    }
    for c in 0..gen.crossings {
        if lanes.is_empty() {
            break;
        }
        let mut r = rng::stream(gen.seed, &[word("crossing"), index, c as u64]);
        let l = rng::pick(&mut r, lanes.len());
        let s = rng::uniform_in(&mut r, 0.15, 0.85) * lane_lengths[l];
        let center = geom::point_at_arc_length(&lanes[l], s);
        let t = geom::tangent_at_arc_length(&lanes[l], s);
        let normal = [-t[1], t[0]];
        let half = 4.0;
        let dense = [
            geom::add(center, geom::scale(normal, -half)),
            geom::add(center, geom::scale(normal, half)),
        ];
        if dense.iter().all(|p| p[0].abs() <= lim && p[1].abs() <= lim) {
            map_instances.push(snapped_instance(CROSSING, &dense, config.n_points));
        }
    }

    let mut agents = Vec::new();
    for a in 0..gen.agents {
        let mut r = rng::stream(gen.seed, &[word("agent"), index, a as u64]);
        let class_roll = rng::uniform(&mut r);
        let class_id = if class_roll < 0.5 {
            CAR
        } else if class_roll < 0.72 {
            PEDESTRIAN
        } else if class_roll < 0.88 {
            TRAFFIC_CONE
        } else {
            BARRIER
        };
        let l = rng::pick(&mut r, lanes.len());
        let lane = &lanes[l];
        let len = lane_lengths[l];

        if class_id == TRAFFIC_CONE || class_id == BARRIER {
            let s = rng::uniform_in(&mut r, 0.0, len);
            let lateral = rng::uniform_in(&mut r, -6.0, 6.0);
            let base = geom::point_at_arc_length(lane, s);
            let t = geom::tangent_at_arc_length(lane, s);
            let raw = geom::add(base, geom::scale([-t[1], t[0]], lateral));
            let center = snap_point([raw[0].clamp(-lim, lim), raw[1].clamp(-lim, lim)]);
            let size = if class_id == TRAFFIC_CONE { [0.4, 0.4] } else { [2.0, 0.6] };
            let yaw = rng::uniform_in(&mut r, -std::f64::consts::PI, std::f64::consts::PI);
            agents.push(AgentGT { class_id, center, size, yaw, future: vec![], complete: false });
            continue;
        }

        let speed_scale = if class_id == PEDESTRIAN { 0.25 } else { 1.0 };
        let speed =
            rng::uniform_in(&mut r, gen.speed_range[0], gen.speed_range[1]) * speed_scale;
        let step = 0.5 * speed;
        let exits = rng::uniform(&mut r) < gen.exit_fraction;
        let s0 = if exits {
            // start close enough to the end that the horizon runs off it
            let kept = 1 + rng::pick(&mut r, config.t_future.saturating_sub(1).max(1));
            (len - step * kept as f64).max(0.0)
        } else {
            rng::uniform_in(&mut r, 0.0, (len - step * config.t_future as f64).max(1.0))
        };
        let center_raw = geom::point_at_arc_length(lane, s0);
        let tangent = geom::tangent_at_arc_length(lane, s0);
        let yaw = tangent[1].atan2(tangent[0]);
        let mut future = Vec::with_capacity(config.t_future);
        for t in 1..=config.t_future {
            let s = s0 + step * t as f64;
            if exits && s > len {
                break;
            }
            future.push(snap_point(lane_position(lane, len, s)));
        }
        let complete = future.len() == config.t_future;
        let size = if class_id == PEDESTRIAN { [0.7, 0.7] } else { [4.2, 1.9] };
        agents.push(AgentGT {
            class_id,
            center: snap_point(center_raw),
            size,
            yaw,
            future,
            complete,
        });
    }

    Ok(Scene {
        scene_id: format!("s{:x}-{:04}", gen.seed, index),
        map_instances,
        agents,
        dynamic_classes: [CAR, PEDESTRIAN].into_iter().collect(),
    })
}

/// One map instance's perturbation at a noise level. The unit draws depend
/// only on (seed, scene, index), never on the level.
struct MapDraw {
    drop_u: f64,
    scores: Vec<f64>,
    points: Vec<Point>,
}

fn perturb_map_instance(
    gen: &GenConfig,
    scene_word: u64,
    k: usize,
    inst: &MapInstanceGT,
    level: f64,
) -> MapDraw {
    let mut r = rng::stream(gen.seed, &[word("p-map"), scene_word, k as u64]);
    let drop_u = rng::uniform(&mut r);
    let corrupt_u = rng::uniform(&mut r);
    let score_u = rng::uniform(&mut r);
    let top = if corrupt_u < gen.score_corrupt_prob * level {
        0.05 + 0.4 * score_u
    } else {
        0.99
    };
    let mut scores = vec![0.01; 3];
    scores[inst.class_id] = top;
    let points = inst
        .points
        .iter()
        .map(|p| {
            let z = [rng::gaussian(&mut r), rng::gaussian(&mut r)];
            geom::add(*p, geom::scale(z, gen.map_noise * level))
        })
        .collect();
    MapDraw { drop_u, scores, points }
}

struct AgentDraw {
    drop_u: f64,
    scores: Vec<f64>,
    center: Point,
    /// Absolute per-mode trajectories, already full horizon.
    modes: Vec<Vec<Point>>,
}

/// GT future padded to the horizon by constant-velocity continuation.
fn padded_future(agent: &AgentGT, t_future: usize) -> Vec<Point> {
    let mut out = agent.future.clone();
    while out.len() < t_future {
        let last = *out.last().unwrap_or(&agent.center);
        let prev = if out.len() >= 2 {
            out[out.len() - 2]
        } else {
            agent.center
        };
        out.push(geom::add(last, geom::sub(last, prev)));
    }
    out
}

fn perturb_agent(
    gen: &GenConfig,
    scene_word: u64,
    j: usize,
    agent: &AgentGT,
    level: f64,
    config: &Config,
) -> AgentDraw {
    let mut r = rng::stream(gen.seed, &[word("p-agent"), scene_word, j as u64]);
    let drop_u = rng::uniform(&mut r);
    let corrupt_u = rng::uniform(&mut r);
    let score_u = rng::uniform(&mut r);
    let top = if corrupt_u < gen.score_corrupt_prob * level {
        0.05 + 0.4 * score_u
    } else {
        0.99
    };
    let mut scores = vec![0.01; 4];
    scores[agent.class_id] = top;
    let zc = [rng::gaussian(&mut r), rng::gaussian(&mut r)];
    let center = geom::add(agent.center, geom::scale(zc, gen.center_noise * level));
    let base = padded_future(agent, config.t_future);
    let shared: Vec<Point> =
        (0..config.t_future).map(|_| [rng::gaussian(&mut r), rng::gaussian(&mut r)]).collect();
    let mut modes = Vec::with_capacity(config.n_modes);
    for k in 0..config.n_modes {
        let jitter: Vec<Point> =
            (0..config.t_future).map(|_| [rng::gaussian(&mut r), rng::gaussian(&mut r)]).collect();
        let mode: Vec<Point> = (0..config.t_future)
            .map(|t| {
                let mut q = geom::add(base[t], geom::scale(shared[t], gen.traj_noise * level));
                if k > 0 {
                    q = geom::add(q, geom::scale(jitter[t], gen.mode_jitter * level));
                }
                q
            })
            .collect();
        modes.push(mode);
    }
    AgentDraw { drop_u, scores, center, modes }
}

/// Copies the scene as its own prediction and corrupts it by `level`:
/// Gaussian noise on geometry, score degradation, dropped items, injected
/// false positives. Level 0 returns a perfect echo.
pub fn perturb_to_predictions(
    scene: &Scene,
    gen: &GenConfig,
    config: &Config,
    level: f64,
) -> Result<PredictionSet, GenError> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(GenError(format!("noise level must be finite and >= 0, got {level}")));
    }
    let scene_word = word(&scene.scene_id);

    let mut map = Vec::new();
    for (k, inst) in scene.map_instances.iter().enumerate() {
        let d = perturb_map_instance(gen, scene_word, k, inst, level);
        if d.drop_u < gen.drop_rate * level {
            continue;
        }
        map.push(PredMapInstance { scores: d.scores, points: d.points });
    }

    let mut agents = Vec::new();
    for (j, agent) in scene.agents.iter().enumerate() {
        let d = perturb_agent(gen, scene_word, j, agent, level, config);
        if d.drop_u < gen.drop_rate * level {
            continue;
        }
        let forecast = d.modes.iter().map(|m| encode_offsets(m, d.center)).collect();
        agents.push(PredAgent {
            scores: d.scores,
            center: d.center,
            size: agent.size,
            yaw: agent.yaw,
            forecast,
        });
    }

    let slots = scene.agents.len().max(4);
    for slot in 0..slots {
        let mut r = rng::stream(gen.seed, &[word("p-fp"), scene_word, slot as u64]);
        let active_u = rng::uniform(&mut r);
        let class_id = if rng::uniform(&mut r) < 0.7 { CAR } else { PEDESTRIAN };
        let center = [
            rng::uniform_in(&mut r, -0.8, 0.8) * config.half_range,
            rng::uniform_in(&mut r, -0.8, 0.8) * config.half_range,
        ];
        let dir = rng::uniform_in(&mut r, 0.0, std::f64::consts::TAU);
        let step = rng::uniform_in(&mut r, 0.25, 1.5);
        if active_u >= gen.fp_rate * level {
            continue;
        }
        let mut scores = vec![0.01; 4];
        scores[class_id] = 0.99;
        let offset = [step * dir.cos(), step * dir.sin()];
        agents.push(PredAgent {
            scores,
            center,
            size: if class_id == CAR { [4.2, 1.9] } else { [0.7, 0.7] },
            yaw: dir,
            forecast: vec![vec![offset; config.t_future]; config.n_modes],
        });
    }

    Ok(PredictionSet { scene_id: scene.scene_id.clone(), map, agents })
}

/// Learnable, information-bearing queries for one scene: class embedding plus
/// an MLP of the (perturbed) pose or point, plus seeded feature noise. The
/// positions and scores placed in the bundle reuse the level-1 perturbation
/// streams, so the interactor sees the same imperfect world the oracle
/// predictions describe.
pub fn synth_queries(
    tape: &mut Tape,
    scene: &Scene,
    params: &BoundParams,
    config: &Config,
    gen: &GenConfig,
) -> TensorResult<QueryBundle> {
    let scene_word = word(&scene.scene_id);
    let h = config.half_range;
    let c = config.channels;

    // agents
    let n_a = scene.agents.len();
    let mut classes = Vec::with_capacity(n_a);
    let mut pose_feats = Vec::with_capacity(n_a * 4);
    let mut positions = Vec::with_capacity(n_a);
    let mut feat_noise = Vec::with_capacity(n_a * c);
    for (j, agent) in scene.agents.iter().enumerate() {
        let d = perturb_agent(gen, scene_word, j, agent, 1.0, config);
        positions.push(d.center);
        classes.push(agent.class_id);
        let speed = agent
            .future
            .first()
            .map(|p| geom::dist(*p, agent.center) * 2.0)
            .unwrap_or(0.0);
        pose_feats.extend_from_slice(&[
            d.center[0] / h,
            d.center[1] / h,
            agent.yaw / std::f64::consts::PI,
            speed / 10.0,
        ]);
        let mut r = rng::stream(gen.seed, &[word("q-agent"), scene_word, j as u64]);
        feat_noise.extend((0..c).map(|_| gen.query_noise * rng::gaussian(&mut r)));
    }
    let class_emb = tape.gather_rows(params.t("agent_embed.table"), &classes)?;
    let pose = Tensor::constant(pose_feats, &[n_a, 4])?;
    let pose_emb = mlp(tape, &pose, &mlp_params_of(params, "agent_pose"))?;
    let noise = Tensor::constant(feat_noise, &[n_a, c])?;
    let with_pose = tape.add(&class_emb, &pose_emb)?;
    let agent_queries = tape.add(&with_pose, &noise)?;

    // map instances
    let n_i = scene.map_instances.len();
    let p = config.n_points;
    let mut point_classes = Vec::with_capacity(n_i * p);
    let mut point_feats = Vec::with_capacity(n_i * p * 2);
    let mut map_points = Vec::with_capacity(n_i);
    let mut map_scores = Vec::with_capacity(n_i);
    let mut point_noise = Vec::with_capacity(n_i * p * c);
    for (k, inst) in scene.map_instances.iter().enumerate() {
        let d = perturb_map_instance(gen, scene_word, k, inst, 1.0);
        for q in &d.points {
            point_classes.push(inst.class_id);
            point_feats.extend_from_slice(&[q[0] / h, q[1] / h]);
        }
        map_points.push(d.points);
        map_scores.push(d.scores);
        let mut r = rng::stream(gen.seed, &[word("q-map"), scene_word, k as u64]);
        point_noise.extend((0..p * c).map(|_| gen.query_noise * rng::gaussian(&mut r)));
    }
    let map_emb = tape.gather_rows(params.t("map_embed.table"), &point_classes)?;
    let coords = Tensor::constant(point_feats, &[n_i * p, 2])?;
    let coord_emb = mlp(tape, &coords, &mlp_params_of(params, "map_point"))?;
    let noise = Tensor::constant(point_noise, &[n_i * p, c])?;
    let with_coords = tape.add(&map_emb, &coord_emb)?;
    let flat = tape.add(&with_coords, &noise)?;
    let map_queries = tape.reshape(&flat, &[n_i, p, c])?;

    let bundle = QueryBundle {
        agent_queries,
        agent_positions: positions,
        map_queries,
        map_points,
        map_scores,
    };
    bundle.check()?;
    Ok(bundle)
}
