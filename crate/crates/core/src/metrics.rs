//! End-to-end evaluation over scene/prediction pairs: joint
//! detection-and-forecast accuracy, displacement errors, miss rate, and
//! average precision for the map and detection heads.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::geom;
use crate::matching::hungarian;
use crate::model::decode_offsets;
use crate::scene::{
    AgentGT, Config, EpaMatching, PredAgent, PredictionSet, Scene, AGENT_CLASSES, MAP_CLASSES,
};

/// Knobs the report was computed under; serialized into the report so a
/// number can never be quoted without its thresholds.
#[derive(Debug, Clone, Serialize)]
pub struct MetricOptions {
    pub tau_epa: f64,
    pub alpha: f64,
    pub score_threshold: f64,
    pub chamfer_threshold: f64,
    pub det_thresholds: Vec<f64>,
    pub epa_matching: EpaMatching,
}

impl MetricOptions {
    pub fn from_config(config: &Config) -> Self {
        MetricOptions {
            tau_epa: config.tau_epa,
            alpha: config.alpha,
            score_threshold: config.score_threshold,
            chamfer_threshold: config.chamfer_threshold,
            det_thresholds: config.det_thresholds.clone(),
            epa_matching: config.epa_matching,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    /// Ground-truth agents of forecastable classes.
    pub n_gt: usize,
    /// Predictions above the score threshold with a forecastable top class.
    pub counted_predictions: usize,
    pub n_match: usize,
    pub n_fp: usize,
    pub n_hit: usize,
    /// Matched pairs whose GT trajectory is complete.
    pub valid_trajectories: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SceneRow {
    pub scene_id: String,
    #[serde(flatten)]
    pub counts: Counts,
    pub epa: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ApReport {
    /// Classes with no ground truth anywhere are absent, not zero.
    pub per_class: BTreeMap<String, f64>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub options: MetricOptions,
    pub epa: Option<f64>,
    pub min_ade_mean: Option<f64>,
    pub min_fde_mean: Option<f64>,
    pub miss_rate: Option<f64>,
    pub map_ap: ApReport,
    pub det_ap: ApReport,
    pub counts: Counts,
    /// How per-scene numbers were combined.
    pub epa_aggregation: &'static str,
    pub per_scene: Vec<SceneRow>,
}

const EPA_AGGREGATION: &str = "micro: counts summed across scenes before dividing";

/// Pairs scenes with prediction sets by scene_id, demanding an exact 1:1
/// cover. The error message lists every offending id.
pub fn pair_by_scene_id<'a>(
    scenes: &'a [Scene],
    preds: &'a [PredictionSet],
) -> Result<Vec<(&'a Scene, &'a PredictionSet)>, String> {
    let mut by_id: BTreeMap<&str, &PredictionSet> = BTreeMap::new();
    let mut problems = Vec::new();
    for p in preds {
        if by_id.insert(&p.scene_id, p).is_some() {
            problems.push(format!("duplicate prediction set for scene '{}'", p.scene_id));
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(scenes.len());
    for s in scenes {
        if !seen.insert(s.scene_id.as_str()) {
            problems.push(format!("duplicate scene '{}'", s.scene_id));
        }
        match by_id.remove(s.scene_id.as_str()) {
            Some(p) => out.push((s, p)),
            None => problems.push(format!("no predictions for scene '{}'", s.scene_id)),
        }
    }
    for leftover in by_id.keys() {
        problems.push(format!("predictions for unknown scene '{leftover}'"));
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(problems.join("; "))
    }
}

fn cmp_keys(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.total_cmp(y);
        if o != std::cmp::Ordering::Equal {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

fn agent_key(p: &PredAgent) -> Vec<f64> {
    let mut k = vec![p.center[0], p.center[1], p.yaw, p.size[0], p.size[1]];
    k.extend_from_slice(&p.scores);
    k
}

fn gt_key(g: &AgentGT) -> Vec<f64> {
    vec![g.center[0], g.center[1], g.class_id as f64]
}

/// Evaluation-time match between counted predictions and forecastable GT.
pub struct SceneMatch {
    /// Prediction indices above the score threshold with forecastable class.
    pub counted: Vec<usize>,
    /// (prediction index, GT index), claimed at most once per side.
    pub pairs: Vec<(usize, usize)>,
}

/// Candidate cost is the center distance when within the match radius and
/// the classes agree; conflicts resolve greedily in ascending cost (or by a
/// global assignment in the Hungarian mode).
pub fn epa_match(scene: &Scene, preds: &PredictionSet, opts: &MetricOptions) -> SceneMatch {
    let dynamic = &scene.dynamic_classes;
    let counted: Vec<usize> = preds
        .agents
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let (c, s) = p.top_class();
            dynamic.contains(&c) && s >= opts.score_threshold
        })
        .map(|(i, _)| i)
        .collect();
    let gts: Vec<usize> = (0..scene.agents.len())
        .filter(|&j| dynamic.contains(&scene.agents[j].class_id))
        .collect();

    let cost_of = |i: usize, j: usize| -> Option<f64> {
        let p = &preds.agents[i];
        let g = &scene.agents[j];
        if p.top_class().0 != g.class_id {
            return None;
        }
        let d = geom::dist(p.center, g.center);
        (d <= opts.tau_epa).then_some(d)
    };

    let pairs = match opts.epa_matching {
        EpaMatching::Greedy => {
            let mut cands: Vec<(f64, Vec<f64>, Vec<f64>, usize, usize)> = Vec::new();
            for &i in &counted {
                for &j in &gts {
                    if let Some(d) = cost_of(i, j) {
                        cands.push((d, agent_key(&preds.agents[i]), gt_key(&scene.agents[j]), i, j));
                    }
                }
            }
            cands.sort_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then_with(|| cmp_keys(&a.1, &b.1))
                    .then_with(|| cmp_keys(&a.2, &b.2))
            });
            let mut used_pred = BTreeSet::new();
            let mut used_gt = BTreeSet::new();
            let mut pairs = Vec::new();
            for (_, _, _, i, j) in cands {
                if used_pred.contains(&i) || used_gt.contains(&j) {
                    continue;
                }
                used_pred.insert(i);
                used_gt.insert(j);
                pairs.push((i, j));
            }
            pairs
        }
        EpaMatching::Hungarian => {
            const SENTINEL: f64 = 1e12;
            if counted.is_empty() || gts.is_empty() {
                Vec::new()
            } else {
                let cost: Vec<Vec<f64>> = counted
                    .iter()
                    .map(|&i| gts.iter().map(|&j| cost_of(i, j).unwrap_or(SENTINEL)).collect())
                    .collect();
                hungarian(&cost)
                    .pairs
                    .iter()
                    .filter(|&&(r, c)| cost[r][c] < SENTINEL)
                    .map(|&(r, c)| (counted[r], gts[c]))
                    .collect()
            }
        }
    };
    let mut pairs = pairs;
    pairs.sort_unstable();
    SceneMatch { counted, pairs }
}

/// (minADE, minFDE) for one matched pair, trajectories anchored at the
/// predicted center. None when the GT trajectory is not complete or no mode
/// has the right length.
fn pair_displacement(pred: &PredAgent, gt: &AgentGT) -> Option<(f64, f64)> {
    if !gt.complete || gt.future.is_empty() {
        return None;
    }
    let tf = gt.future.len();
    let mut best_ade = f64::INFINITY;
    let mut best_fde = f64::INFINITY;
    for mode in &pred.forecast {
        if mode.len() != tf {
            continue;
        }
        let pos = decode_offsets(mode, pred.center);
        let ade = pos
            .iter()
            .zip(&gt.future)
            .map(|(a, b)| geom::dist(*a, *b))
            .sum::<f64>()
            / tf as f64;
        let fde = geom::dist(pos[tf - 1], gt.future[tf - 1]);
        best_ade = best_ade.min(ade);
        best_fde = best_fde.min(fde);
    }
    (best_ade.is_finite() && best_fde.is_finite()).then_some((best_ade, best_fde))
}

/// Compensated sum over values in a canonical (sorted) order, so the result
/// does not depend on input order.
fn stable_mean(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut c = 0.0;
    for &v in values.iter() {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    Some(sum / values.len() as f64)
}

/// 101-point interpolated area under the precision-recall curve of a ranked
/// true-positive flag sequence.
fn ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut curve = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut acc = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        acc += p;
    }
    acc / 101.0
}

/// Ranked candidate for one AP sweep. `key` makes equal-score order
/// independent of input permutation; it leads with the scene id so claims
/// stay within a scene.
struct Ranked<'a> {
    score: f64,
    scene_id: &'a str,
    key: Vec<f64>,
    scene: usize,
    index: usize,
}

fn rank(cands: &mut Vec<Ranked<'_>>) {
    cands.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.scene_id.cmp(b.scene_id))
            .then_with(|| cmp_keys(&a.key, &b.key))
    });
}

/// Greedy TP flags: each candidate claims the nearest unclaimed GT in its
/// scene when that distance is within `threshold`.
fn claim_flags(
    ranked: &[Ranked<'_>],
    gt_counts: &[usize],
    dist: impl Fn(usize, usize, usize) -> f64,
    threshold: f64,
) -> Vec<bool> {
    let mut claimed: Vec<Vec<bool>> = gt_counts.iter().map(|&n| vec![false; n]).collect();
    let mut flags = Vec::with_capacity(ranked.len());
    for r in ranked {
        let mut best: Option<(f64, usize)> = None;
        for g in 0..gt_counts[r.scene] {
            if claimed[r.scene][g] {
                continue;
            }
            let d = dist(r.scene, r.index, g);
            if d <= threshold && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, g));
            }
        }
        if let Some((_, g)) = best {
            claimed[r.scene][g] = true;
            flags.push(true);
        } else {
            flags.push(false);
        }
    }
    flags
}

fn map_ap(pairs: &[(&Scene, &PredictionSet)], opts: &MetricOptions) -> ApReport {
    let mut per_class = BTreeMap::new();
    for (class, name) in MAP_CLASSES.iter().enumerate() {
        // per-scene GT instance indices of this class
        let gt_idx: Vec<Vec<usize>> = pairs
            .iter()
            .map(|(s, _)| {
                (0..s.map_instances.len())
                    .filter(|&k| s.map_instances[k].class_id == class)
                    .collect()
            })
            .collect();
        let n_gt: usize = gt_idx.iter().map(Vec::len).sum();
        if n_gt == 0 {
            continue;
        }
        let mut cands = Vec::new();
        for (scene, (s, p)) in pairs.iter().enumerate() {
            let _ = s;
            for (index, inst) in p.map.iter().enumerate() {
                let (c, score) = inst.top_class();
                if c != class {
                    continue;
                }
                let key: Vec<f64> = inst.points.iter().flat_map(|q| [q[0], q[1]]).collect();
                cands.push(Ranked { score, scene_id: &p.scene_id, key, scene, index });
            }
        }
        rank(&mut cands);
        let gt_counts: Vec<usize> = gt_idx.iter().map(Vec::len).collect();
        let flags = claim_flags(
            &cands,
            &gt_counts,
            |scene, index, g| {
                let gt = &pairs[scene].0.map_instances[gt_idx[scene][g]];
                geom::chamfer(&pairs[scene].1.map[index].points, &gt.points)
            },
            opts.chamfer_threshold,
        );
        per_class.insert((*name).to_string(), ap_from_flags(&flags, n_gt));
    }
    let mut vals: Vec<f64> = per_class.values().copied().collect();
    let mean = stable_mean(&mut vals);
    ApReport { per_class, mean }
}

fn det_ap(pairs: &[(&Scene, &PredictionSet)], opts: &MetricOptions) -> ApReport {
    let mut per_class = BTreeMap::new();
    for (class, name) in AGENT_CLASSES.iter().enumerate() {
        let gt_idx: Vec<Vec<usize>> = pairs
            .iter()
            .map(|(s, _)| {
                (0..s.agents.len())
                    .filter(|&k| s.agents[k].class_id == class)
                    .collect()
            })
            .collect();
        let n_gt: usize = gt_idx.iter().map(Vec::len).sum();
        if n_gt == 0 {
            continue;
        }
        let mut cands = Vec::new();
        for (scene, (_, p)) in pairs.iter().enumerate() {
            for (index, a) in p.agents.iter().enumerate() {
                let (c, score) = a.top_class();
                if c != class {
                    continue;
                }
                cands.push(Ranked {
                    score,
                    scene_id: &p.scene_id,
                    key: agent_key(a),
                    scene,
                    index,
                });
            }
        }
        rank(&mut cands);
        let gt_counts: Vec<usize> = gt_idx.iter().map(Vec::len).collect();
        let mut over_thresholds: Vec<f64> = Vec::with_capacity(opts.det_thresholds.len());
        for &thr in &opts.det_thresholds {
            let flags = claim_flags(
                &cands,
                &gt_counts,
                |scene, index, g| {
                    let gt = &pairs[scene].0.agents[gt_idx[scene][g]];
                    geom::dist(pairs[scene].1.agents[index].center, gt.center)
                },
                thr,
            );
            over_thresholds.push(ap_from_flags(&flags, n_gt));
        }
        per_class.insert(
            (*name).to_string(),
            stable_mean(&mut over_thresholds).unwrap_or(0.0),
        );
    }
    let mut vals: Vec<f64> = per_class.values().copied().collect();
    let mean = stable_mean(&mut vals);
    ApReport { per_class, mean }
}

/// Full evaluation over aligned (scene, predictions) pairs.
pub fn evaluate(pairs: &[(&Scene, &PredictionSet)], opts: &MetricOptions) -> MetricsReport {
    let mut total = Counts::default();
    let mut rows = Vec::with_capacity(pairs.len());
    let mut ades = Vec::new();
    let mut fdes = Vec::new();
    for (scene, preds) in pairs {
        let m = epa_match(scene, preds, opts);
        let mut c = Counts {
            n_gt: scene
                .agents
                .iter()
                .filter(|g| scene.dynamic_classes.contains(&g.class_id))
                .count(),
            counted_predictions: m.counted.len(),
            n_match: m.pairs.len(),
            n_fp: m.counted.len() - m.pairs.len(),
            ..Counts::default()
        };
        for &(i, j) in &m.pairs {
            if let Some((ade, fde)) = pair_displacement(&preds.agents[i], &scene.agents[j]) {
                c.valid_trajectories += 1;
                if fde <= opts.tau_epa {
                    c.n_hit += 1;
                }
                ades.push(ade);
                fdes.push(fde);
            }
        }
        let epa = (c.n_gt > 0)
            .then(|| (c.n_hit as f64 - opts.alpha * c.n_fp as f64) / c.n_gt as f64);
        rows.push(SceneRow { scene_id: scene.scene_id.clone(), counts: c, epa });
        total.n_gt += c.n_gt;
        total.counted_predictions += c.counted_predictions;
        total.n_match += c.n_match;
        total.n_fp += c.n_fp;
        total.n_hit += c.n_hit;
        total.valid_trajectories += c.valid_trajectories;
    }
    rows.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));

    let epa = (total.n_gt > 0)
        .then(|| (total.n_hit as f64 - opts.alpha * total.n_fp as f64) / total.n_gt as f64);
    let miss_rate = (total.valid_trajectories > 0).then(|| {
        (total.valid_trajectories - total.n_hit) as f64 / total.valid_trajectories as f64
    });
    MetricsReport {
        options: opts.clone(),
        epa,
        min_ade_mean: stable_mean(&mut ades),
        min_fde_mean: stable_mean(&mut fdes),
        miss_rate,
        map_ap: map_ap(pairs, opts),
        det_ap: det_ap(pairs, opts),
        counts: total,
        epa_aggregation: EPA_AGGREGATION,
        per_scene: rows,
    }
}
