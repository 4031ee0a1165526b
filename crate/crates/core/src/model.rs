//! The motion interaction network and its decoder heads.
//!
//! Query features are differentiable; positions and scores travel beside them
//! as plain data, so every coordinate-dependent step (normalization,
//! filtering, position encoding inputs) is constant w.r.t. the tape and
//! gradients flow only through features and parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geom::{self, Point};
use crate::rng;
use crate::scene::{Config, PredAgent, PredMapInstance, PredictionSet, AGENT_CLASSES, MAP_CLASSES};
use crate::tensor::{
    mlp, multi_head_attention, AttentionParams, Gradients, Result, Tape, Tensor, TensorError,
};

/// One named parameter: shape plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named parameter store. Serializes as a flat name -> {shape, values} map;
/// serde_json emits shortest-round-trip decimals, so the f64 payload survives
/// a save/load cycle bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams {
    pub entries: BTreeMap<String, ParamTensor>,
}

/// Number of inputs to the agent pose embedding: x, y, yaw, speed.
const POSE_DIM: usize = 4;
/// Detection box vector: cx, cy, length, width, yaw.
const BOX_DIM: usize = 5;
const SUBGRAPH_LAYERS: usize = 3;

impl ModelParams {
    /// Every parameter name and shape implied by `config`, keyed in canonical
    /// (sorted) order. Binding, flattening, and checkpoints all follow it.
    pub fn schema(config: &Config) -> BTreeMap<String, Vec<usize>> {
        let c = config.channels;
        let hidden = 2 * c;
        let n_ac = AGENT_CLASSES.len();
        let n_mc = MAP_CLASSES.len();
        let mut s: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            s.insert(name, shape);
        };
        put("mode_bank".into(), vec![config.n_modes, c]);
        for blk in ["self", "cross"] {
            for w in ["wq", "wk", "wv", "wo"] {
                put(format!("{blk}_attn.{w}"), vec![c, c]);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                put(format!("{blk}_attn.{b}"), vec![c]);
            }
            put(format!("{blk}_ffn.w1"), vec![c, hidden]);
            put(format!("{blk}_ffn.b1"), vec![hidden]);
            put(format!("{blk}_ffn.w2"), vec![hidden, c]);
            put(format!("{blk}_ffn.b2"), vec![c]);
            for ln in ["ln1", "ln2"] {
                put(format!("{blk}_{ln}.gamma"), vec![c]);
                put(format!("{blk}_{ln}.beta"), vec![c]);
            }
        }
        for l in 0..SUBGRAPH_LAYERS {
            put(format!("map_subgraph.{l}.w"), vec![c, c / 2]);
            put(format!("map_subgraph.{l}.b"), vec![c / 2]);
        }
        put("pe_mlp.w1".into(), vec![2, c]);
        put("pe_mlp.b1".into(), vec![c]);
        put("pe_mlp.w2".into(), vec![c, c]);
        put("pe_mlp.b2".into(), vec![c]);
        put("motion_head.w1".into(), vec![2 * c, hidden]);
        put("motion_head.b1".into(), vec![hidden]);
        put("motion_head.w2".into(), vec![hidden, 2 * config.t_future]);
        put("motion_head.b2".into(), vec![2 * config.t_future]);
        put("map_cls.w".into(), vec![c, n_mc]);
        put("map_cls.b".into(), vec![n_mc]);
        put("map_reg.w".into(), vec![c, 2]);
        put("map_reg.b".into(), vec![2]);
        put("det_cls.w".into(), vec![c, n_ac]);
        put("det_cls.b".into(), vec![n_ac]);
        put("det_reg.w".into(), vec![c, BOX_DIM]);
        put("det_reg.b".into(), vec![BOX_DIM]);
        put("agent_embed.table".into(), vec![n_ac, c]);
        put("agent_pose.w1".into(), vec![POSE_DIM, c]);
        put("agent_pose.b1".into(), vec![c]);
        put("agent_pose.w2".into(), vec![c, c]);
        put("agent_pose.b2".into(), vec![c]);
        put("map_embed.table".into(), vec![n_mc, c]);
        put("map_point.w1".into(), vec![2, c]);
        put("map_point.b1".into(), vec![c]);
        put("map_point.w2".into(), vec![c, c]);
        put("map_point.b2".into(), vec![c]);
        s
    }

    /// Fresh parameters: weights and embedding tables uniform in
    /// +/- 1/sqrt(fan_in), biases and LN betas zero, LN gammas one, mode bank
    /// as scaled one-hot rows (exactly orthogonal). Each parameter draws from
    /// its own name-keyed stream, so init is independent of schema order.
    pub fn init(config: &Config, seed: u64) -> ModelParams {
        assert!(config.check().is_empty(), "config violates structural rules");
        let init_ctx = rng::hash_str("param-init");
        let c = config.channels;
        let mut entries = BTreeMap::new();
        for (name, shape) in Self::schema(config) {
            let len: usize = shape.iter().product();
            let values = if name == "mode_bank" {
                let scale = 1.0 / (c as f64).sqrt();
                let mut v = vec![0.0; len];
                for row in 0..shape[0] {
                    v[row * c + row] = scale;
                }
                v
            } else if name.ends_with(".gamma") {
                vec![1.0; len]
            } else if shape.len() == 1 {
                vec![0.0; len]
            } else {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                let mut r = rng::stream(seed, &[init_ctx, rng::hash_str(&name)]);
                (0..len).map(|_| rng::uniform_in(&mut r, -bound, bound)).collect()
            };
            entries.insert(name, ParamTensor { shape, values });
        }
        ModelParams { entries }
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.entries.get(name)
    }

    /// Schema mismatches against `config`: missing names, orphan names, wrong
    /// shapes. Empty means the store is loadable.
    pub fn check_against(&self, config: &Config) -> Vec<String> {
        let schema = Self::schema(config);
        let mut problems = Vec::new();
        for (name, shape) in &schema {
            match self.entries.get(name) {
                None => problems.push(format!("missing parameter {name}")),
                Some(p) if &p.shape != shape => problems.push(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    p.shape, shape
                )),
                Some(p) if p.values.len() != shape.iter().product::<usize>() => {
                    problems.push(format!("parameter {name} value count does not match shape"))
                }
                Some(p) if p.values.iter().any(|v| !v.is_finite()) => {
                    problems.push(format!("parameter {name} holds non-finite values"))
                }
                _ => {}
            }
        }
        for name in self.entries.keys() {
            if !schema.contains_key(name) {
                problems.push(format!("orphan parameter {name}"));
            }
        }
        problems
    }
}

/// Largest |dot product| between distinct mode bank rows; 0 for fresh params.
pub fn mode_bank_defect(params: &ModelParams) -> f64 {
    let Some(bank) = params.get("mode_bank") else { return f64::INFINITY };
    let [rows, c] = bank.shape[..] else { return f64::INFINITY };
    let mut worst = 0.0f64;
    for i in 0..rows {
        for j in i + 1..rows {
            let dot: f64 = (0..c)
                .map(|k| bank.values[i * c + k] * bank.values[j * c + k])
                .sum();
            worst = worst.max(dot.abs());
        }
    }
    worst
}

/// Parameters materialized as tape tensors for one forward/backward pass.
pub struct BoundParams {
    pub(crate) map: BTreeMap<String, Tensor>,
}

/// Registers every parameter as a differentiable leaf on `tape`.
pub fn bind_params(tape: &mut Tape, params: &ModelParams) -> Result<BoundParams> {
    let mut map = BTreeMap::new();
    for (name, p) in &params.entries {
        map.insert(name.clone(), tape.leaf(p.values.clone(), &p.shape)?);
    }
    Ok(BoundParams { map })
}

/// Parameters as plain constants (no tape, no gradients), for harnesses that
/// differentiate w.r.t. activations while holding weights fixed.
pub fn constant_params(params: &ModelParams) -> BoundParams {
    let map = params
        .entries
        .iter()
        .map(|(name, p)| {
            let t = Tensor::constant(p.values.clone(), &p.shape).expect("schema shape");
            (name.clone(), t)
        })
        .collect();
    BoundParams { map }
}

/// Binds the whole parameter set from one flat leaf tensor, slicing in
/// canonical schema order. Lets a finite-difference harness perturb every
/// parameter through a single vector.
pub fn bind_from_flat(tape: &mut Tape, theta: &Tensor, config: &Config) -> Result<BoundParams> {
    let schema = ModelParams::schema(config);
    let total: usize = schema.values().map(|s| s.iter().product::<usize>()).sum();
    if theta.shape() != [total] {
        return Err(TensorError::Shape {
            op: "bind_from_flat",
            detail: format!("theta {:?}, schema wants [{total}]", theta.shape()),
        });
    }
    let mut map = BTreeMap::new();
    let mut off = 0;
    for (name, shape) in schema {
        let len: usize = shape.iter().product();
        let piece = tape.slice_last(theta, off, off + len)?;
        map.insert(name, tape.reshape(&piece, &shape)?);
        off += len;
    }
    Ok(BoundParams { map })
}

/// Values of all parameters in canonical schema order, for flat binding.
pub fn flatten_params(params: &ModelParams) -> Vec<f64> {
    params.entries.values().flat_map(|p| p.values.iter().copied()).collect()
}

impl BoundParams {
    /// Lookup by schema name; absence is a caller bug, so this panics.
    pub fn t(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    fn attention(&self, prefix: &str) -> AttentionParams<'_> {
        AttentionParams {
            wq: self.t(&format!("{prefix}.wq")),
            bq: self.t(&format!("{prefix}.bq")),
            wk: self.t(&format!("{prefix}.wk")),
            bk: self.t(&format!("{prefix}.bk")),
            wv: self.t(&format!("{prefix}.wv")),
            bv: self.t(&format!("{prefix}.bv")),
            wo: self.t(&format!("{prefix}.wo")),
            bo: self.t(&format!("{prefix}.bo")),
        }
    }

    /// Gradient of each parameter after backward; zeros where a parameter
    /// never touched the loss.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.map
            .iter()
            .map(|(name, t)| (name.clone(), grads.of_or_zeros(t)))
            .collect()
    }
}

/// Weight/bias pairs of a two-layer MLP parameter group, in forward order.
pub fn mlp_params_of<'a>(p: &'a BoundParams, prefix: &str) -> [(&'a Tensor, &'a Tensor); 2] {
    [
        (p.t(&format!("{prefix}.w1")), p.t(&format!("{prefix}.b1"))),
        (p.t(&format!("{prefix}.w2")), p.t(&format!("{prefix}.b2"))),
    ]
}

/// Everything the interactor consumes for one scene: per-agent and per-map
/// query features plus their decoded positions and scores.
pub struct QueryBundle {
    /// [N_A x C]
    pub agent_queries: Tensor,
    /// Decoded agent centers, one per query.
    pub agent_positions: Vec<Point>,
    /// [N_I x N_P x C]
    pub map_queries: Tensor,
    /// Decoded map points, [N_I][N_P].
    pub map_points: Vec<Vec<Point>>,
    /// Per-instance class scores, [N_I][map classes].
    pub map_scores: Vec<Vec<f64>>,
}

impl QueryBundle {
    /// Cross-field count consistency (N_A, N_I, N_P).
    pub fn check(&self) -> Result<()> {
        let fail = |detail: String| {
            Err(TensorError::Shape { op: "query_bundle", detail })
        };
        let aq = self.agent_queries.shape();
        if aq.len() != 2 {
            return fail(format!("agent_queries rank {}", aq.len()));
        }
        if self.agent_positions.len() != aq[0] {
            return fail(format!(
                "{} agent queries vs {} positions",
                aq[0],
                self.agent_positions.len()
            ));
        }
        let mq = self.map_queries.shape();
        if mq.len() != 3 {
            return fail(format!("map_queries rank {}", mq.len()));
        }
        if mq[2] != aq[1] {
            return fail(format!("channel mismatch: agents {} vs map {}", aq[1], mq[2]));
        }
        if self.map_points.len() != mq[0] || self.map_scores.len() != mq[0] {
            return fail(format!(
                "{} map queries vs {} point lists / {} score rows",
                mq[0],
                self.map_points.len(),
                self.map_scores.len()
            ));
        }
        if self.map_points.iter().any(|pts| pts.len() != mq[1]) {
            return fail(format!("map point lists must all hold {} points", mq[1]));
        }
        Ok(())
    }
}

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(TensorError::Shape { op, detail: format!("want rank 3, got {s:?}") }),
    }
}

fn linear(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(&y, b)
}

/// Motion query per (agent, mode): the broadcast sum of an agent query and a
/// mode query, out[i][j] = agent[i] + mode[j].
pub fn form_motion_queries(tape: &mut Tape, agent_queries: &Tensor, mode_bank: &Tensor) -> Result<Tensor> {
    tape.broadcast_sum(agent_queries, mode_bank)
}

/// Attention sublayer then feed-forward sublayer over `x`, attending to `kv`.
/// Residual + layer norm wrap each sublayer unless `plain_blocks` is set, in
/// which case the result is literally ffn(attention(x)).
fn attention_block(
    tape: &mut Tape,
    x: &Tensor,
    kv: &Tensor,
    k_pos: Option<&Tensor>,
    prefix: &str,
    p: &BoundParams,
    config: &Config,
) -> Result<Tensor> {
    let attn_params = p.attention(&format!("{prefix}_attn"));
    let attn = multi_head_attention(tape, x, kv, kv, k_pos, &attn_params, config.heads)?;
    let h = if config.plain_blocks {
        attn
    } else {
        let r = tape.add(x, &attn)?;
        tape.layer_norm(
            &r,
            p.t(&format!("{prefix}_ln1.gamma")),
            p.t(&format!("{prefix}_ln1.beta")),
        )?
    };
    let ffn = mlp(
        tape,
        &h,
        &[
            (p.t(&format!("{prefix}_ffn.w1")), p.t(&format!("{prefix}_ffn.b1"))),
            (p.t(&format!("{prefix}_ffn.w2")), p.t(&format!("{prefix}_ffn.b2"))),
        ],
    )?;
    if config.plain_blocks {
        Ok(ffn)
    } else {
        let r = tape.add(&h, &ffn)?;
        tape.layer_norm(
            &r,
            p.t(&format!("{prefix}_ln2.gamma")),
            p.t(&format!("{prefix}_ln2.beta")),
        )
    }
}

/// Joint self-attention over all (agent, mode) tokens: motion intentions of
/// one agent see each other and every other agent's intentions. No positional
/// encoding, so the block is equivariant to agent order.
pub fn motion_self_block(
    tape: &mut Tape,
    q_motion: &Tensor,
    p: &BoundParams,
    config: &Config,
) -> Result<Tensor> {
    let (na, m, c) = dims3("motion_self_block", q_motion)?;
    let flat = tape.reshape(q_motion, &[na * m, c])?;
    let out = attention_block(tape, &flat, &flat, None, "self", p, config)?;
    tape.reshape(&out, &[na, m, c])
}

/// Map coordinates re-expressed in one agent's frame: p - agent.
pub fn normalize_map_for_agent(map_points: &[Vec<Point>], agent: Point) -> Vec<Vec<Point>> {
    map_points
        .iter()
        .map(|pts| pts.iter().map(|p| geom::sub(*p, agent)).collect())
        .collect()
}

/// Absolute positions to per-step offsets; offset[0] leaves the anchor.
pub fn encode_offsets(positions: &[Point], anchor: Point) -> Vec<Point> {
    let mut prev = anchor;
    positions
        .iter()
        .map(|p| {
            let d = geom::sub(*p, prev);
            prev = *p;
            d
        })
        .collect()
}

/// Per-step offsets back to absolute positions by accumulation from the
/// anchor. decode(encode(s)) == s up to rounding.
pub fn decode_offsets(offsets: &[Point], anchor: Point) -> Vec<Point> {
    let mut acc = anchor;
    offsets
        .iter()
        .map(|d| {
            acc = geom::add(acc, *d);
            acc
        })
        .collect()
}

/// Instance indices passing both keep rules: top class score >= tau and the
/// closest of its points (agent-normalized) within mu. Order preserved.
pub fn select_map_indices(
    map_scores: &[Vec<f64>],
    normalized: &[Vec<Point>],
    tau: f64,
    mu: f64,
) -> Vec<usize> {
    (0..normalized.len())
        .filter(|&i| {
            let top = map_scores[i].iter().fold(f64::NEG_INFINITY, |a, &s| a.max(s));
            let near = normalized[i]
                .iter()
                .fold(f64::INFINITY, |a, &p| a.min(geom::norm(p)));
            top >= tau && near <= mu
        })
        .collect()
}

/// One agent's view of the map after confidence/distance filtering.
pub struct MapSelection {
    pub indices: Vec<usize>,
    /// [N_sel x N_P x C]; None when nothing passed the filter.
    pub queries: Option<Tensor>,
    /// Agent-normalized points of the selected instances.
    pub normalized: Vec<Vec<Point>>,
}

/// Filters bundle map instances for one agent and gathers their queries.
pub fn filter_map_for_agent(
    tape: &mut Tape,
    bundle: &QueryBundle,
    agent_index: usize,
    tau: f64,
    mu: f64,
) -> Result<MapSelection> {
    let (ni, np, c) = dims3("filter_map_for_agent", &bundle.map_queries)?;
    let normalized_all =
        normalize_map_for_agent(&bundle.map_points, bundle.agent_positions[agent_index]);
    let indices = select_map_indices(&bundle.map_scores, &normalized_all, tau, mu);
    let queries = if indices.is_empty() {
        None
    } else {
        let flat = tape.reshape(&bundle.map_queries, &[ni, np * c])?;
        let rows = tape.gather_rows(&flat, &indices)?;
        Some(tape.reshape(&rows, &[indices.len(), np, c])?)
    };
    let normalized = indices.iter().map(|&i| normalized_all[i].clone()).collect();
    Ok(MapSelection { indices, queries, normalized })
}

/// Point-level to instance-level features: three subgraph layers, each a
/// per-point linear+ReLU to C/2 channels, an instance-wide max-pool, and the
/// pooled feature concatenated back onto every point; a final max-pool yields
/// one C-vector per instance.
pub fn encode_map_instances(tape: &mut Tape, selected: &Tensor, p: &BoundParams) -> Result<Tensor> {
    let (s, np, c) = dims3("encode_map_instances", selected)?;
    let mut cur = selected.clone();
    for l in 0..SUBGRAPH_LAYERS {
        let w = p.t(&format!("map_subgraph.{l}.w"));
        let b = p.t(&format!("map_subgraph.{l}.b"));
        let flat = tape.reshape(&cur, &[s * np, c])?;
        let lin = linear(tape, &flat, w, b)?;
        let act = tape.relu(&lin);
        let act3 = tape.reshape(&act, &[s, np, c / 2])?;
        let pooled = tape.maxpool_axis(&act3, 1)?;
        let spread = tape.expand_dim1(&pooled, np)?;
        cur = tape.concat_last(&[&act3, &spread])?;
    }
    tape.maxpool_axis(&cur, 1)
}

/// Per-instance representative point (minimum norm, first index on ties; the
/// agent sits at the origin after normalization) and its MLP embedding used
/// as key positional encoding.
pub fn map_position_encoding(
    tape: &mut Tape,
    normalized: &[Vec<Point>],
    p: &BoundParams,
) -> Result<(Vec<Point>, Tensor)> {
    let mut reps = Vec::with_capacity(normalized.len());
    for pts in normalized {
        let first = *pts.first().ok_or(TensorError::Shape {
            op: "map_position_encoding",
            detail: "instance with no points".into(),
        })?;
        let mut best = first;
        let mut best_d = geom::norm(first);
        for &pt in &pts[1..] {
            let d = geom::norm(pt);
            if d < best_d {
                best_d = d;
                best = pt;
            }
        }
        reps.push(best);
    }
    let flat: Vec<f64> = reps.iter().flat_map(|r| [r[0], r[1]]).collect();
    let input = Tensor::constant(flat, &[reps.len(), 2])?;
    let pe = mlp(
        tape,
        &input,
        &[
            (p.t("pe_mlp.w1"), p.t("pe_mlp.b1")),
            (p.t("pe_mlp.w2"), p.t("pe_mlp.b2")),
        ],
    )?;
    Ok((reps, pe))
}

/// Cross-attention of one agent's mode queries over its selected map
/// instances (keys carry the positional encoding), then feed-forward. An
/// empty selection contributes a zero feature instead of attending.
pub fn motion_map_block(
    tape: &mut Tape,
    q_modes: &Tensor,
    selection: Option<(&Tensor, &Tensor)>,
    p: &BoundParams,
    config: &Config,
) -> Result<Tensor> {
    match selection {
        None => Ok(Tensor::zeros(q_modes.shape())),
        Some((instances, pe)) => {
            attention_block(tape, q_modes, instances, Some(pe), "cross", p, config)
        }
    }
}

/// Channel concatenation of the self branch (first) and cross branch.
pub fn fuse_motion_queries(tape: &mut Tape, q_sa: &Tensor, q_ca: &Tensor) -> Result<Tensor> {
    if q_sa.shape() != q_ca.shape() {
        return Err(TensorError::Shape {
            op: "fuse_motion_queries",
            detail: format!("{:?} vs {:?}", q_sa.shape(), q_ca.shape()),
        });
    }
    tape.concat_last(&[q_sa, q_ca])
}

/// Fused motion queries to per-step offsets, [N_A x N_mode x T_f x 2].
pub fn decode_motion(
    tape: &mut Tape,
    fused: &Tensor,
    p: &BoundParams,
    config: &Config,
) -> Result<Tensor> {
    let (na, m, _c2) = dims3("decode_motion", fused)?;
    let out = mlp(
        tape,
        fused,
        &[
            (p.t("motion_head.w1"), p.t("motion_head.b1")),
            (p.t("motion_head.w2"), p.t("motion_head.b2")),
        ],
    )?;
    tape.reshape(&out, &[na, m, config.t_future, 2])
}

/// Decoded perception outputs, still on the tape.
pub struct Perception {
    /// [N_I x map classes], sigmoid scores.
    pub map_scores: Tensor,
    /// [N_I x N_P x 2], meters.
    pub map_points: Tensor,
    /// [N_A x agent classes], sigmoid scores.
    pub det_scores: Tensor,
    /// [N_A x 5]: center x/y, length, width (softplus-positive), yaw.
    pub det_boxes: Tensor,
}

/// Classification and regression heads over raw query features.
pub fn decode_perception(
    tape: &mut Tape,
    agent_queries: &Tensor,
    map_queries: &Tensor,
    p: &BoundParams,
) -> Result<Perception> {
    let (ni, np, c) = dims3("decode_perception", map_queries)?;
    let inst_sum = tape.sum_axis(map_queries, 1)?;
    let inst_mean = tape.affine(&inst_sum, 1.0 / np.max(1) as f64, 0.0);
    let map_logits = linear(tape, &inst_mean, p.t("map_cls.w"), p.t("map_cls.b"))?;
    let map_scores = tape.sigmoid(&map_logits);

    let flat = tape.reshape(map_queries, &[ni * np, c])?;
    let pt = linear(tape, &flat, p.t("map_reg.w"), p.t("map_reg.b"))?;
    let map_points = tape.reshape(&pt, &[ni, np, 2])?;

    let det_logits = linear(tape, agent_queries, p.t("det_cls.w"), p.t("det_cls.b"))?;
    let det_scores = tape.sigmoid(&det_logits);
    let raw = linear(tape, agent_queries, p.t("det_reg.w"), p.t("det_reg.b"))?;
    let center = tape.slice_last(&raw, 0, 2)?;
    let size_raw = tape.slice_last(&raw, 2, 4)?;
    let size = tape.softplus(&size_raw);
    let yaw = tape.slice_last(&raw, 4, 5)?;
    let det_boxes = tape.concat_last(&[&center, &size, &yaw])?;

    Ok(Perception { map_scores, map_points, det_scores, det_boxes })
}

/// Full differentiable outputs of one scene pass.
pub struct ForwardOutputs {
    pub perception: Perception,
    /// [N_A x N_mode x T_f x 2] per-step offsets.
    pub motion_offsets: Tensor,
}

/// The whole interaction pipeline: perception heads, mode-expanded self
/// attention, per-agent map filtering + subgraph encoding + cross attention,
/// channel fusion, and the motion head.
pub fn forward(
    tape: &mut Tape,
    bundle: &QueryBundle,
    p: &BoundParams,
    config: &Config,
) -> Result<ForwardOutputs> {
    bundle.check()?;
    let perception = decode_perception(tape, &bundle.agent_queries, &bundle.map_queries, p)?;
    let na = bundle.agent_queries.shape()[0];
    let c = bundle.agent_queries.shape()[1];
    let m = config.n_modes;
    if na == 0 {
        let motion_offsets = Tensor::zeros(&[0, m, config.t_future, 2]);
        return Ok(ForwardOutputs { perception, motion_offsets });
    }
    let q_motion = form_motion_queries(tape, &bundle.agent_queries, p.t("mode_bank"))?;
    let q_sa = motion_self_block(tape, &q_motion, p, config)?;
    let q_sa_rows = tape.reshape(&q_sa, &[na, m * c])?;
    let mut per_agent = Vec::with_capacity(na);
    for j in 0..na {
        let sel = filter_map_for_agent(tape, bundle, j, config.tau, config.mu)?;
        let row = tape.gather_rows(&q_sa_rows, &[j])?;
        let q_modes = tape.reshape(&row, &[m, c])?;
        let crossed = match &sel.queries {
            Some(q) => {
                let inst = encode_map_instances(tape, q, p)?;
                let (_reps, pe) = map_position_encoding(tape, &sel.normalized, p)?;
                motion_map_block(tape, &q_modes, Some((&inst, &pe)), p, config)?
            }
            None => motion_map_block(tape, &q_modes, None, p, config)?,
        };
        per_agent.push(crossed);
    }
    let refs: Vec<&Tensor> = per_agent.iter().collect();
    let q_ca = tape.stack_rows(&refs)?;
    let fused = fuse_motion_queries(tape, &q_sa, &q_ca)?;
    let motion_offsets = decode_motion(tape, &fused, p, config)?;
    Ok(ForwardOutputs { perception, motion_offsets })
}

/// Forward pass packaged as plain prediction data for a scene.
pub fn full_forward(
    tape: &mut Tape,
    bundle: &QueryBundle,
    p: &BoundParams,
    config: &Config,
    scene_id: &str,
) -> Result<PredictionSet> {
    let out = forward(tape, bundle, p, config)?;
    Ok(package_predictions(&out, config, scene_id))
}

/// Extracts plain prediction values from forward outputs.
pub fn package_predictions(out: &ForwardOutputs, config: &Config, scene_id: &str) -> PredictionSet {
    let n_mc = MAP_CLASSES.len();
    let n_ac = AGENT_CLASSES.len();
    let np = config.n_points;
    let (m, tf) = (config.n_modes, config.t_future);
    let ni = out.perception.map_scores.shape()[0];
    let na = out.perception.det_scores.shape()[0];
    let ms = out.perception.map_scores.data();
    let mp = out.perception.map_points.data();
    let ds = out.perception.det_scores.data();
    let db = out.perception.det_boxes.data();
    let mo = out.motion_offsets.data();

    let map = (0..ni)
        .map(|i| PredMapInstance {
            scores: ms[i * n_mc..(i + 1) * n_mc].to_vec(),
            points: (0..np)
                .map(|k| {
                    let at = (i * np + k) * 2;
                    [mp[at], mp[at + 1]]
                })
                .collect(),
        })
        .collect();
    let agents = (0..na)
        .map(|i| {
            let b = &db[i * 5..(i + 1) * 5];
            PredAgent {
                scores: ds[i * n_ac..(i + 1) * n_ac].to_vec(),
                center: [b[0], b[1]],
                size: [b[2], b[3]],
                yaw: b[4],
                forecast: (0..m)
                    .map(|k| {
                        (0..tf)
                            .map(|t| {
                                let at = ((i * m + k) * tf + t) * 2;
                                [mo[at], mo[at + 1]]
                            })
                            .collect()
                    })
                    .collect(),
            }
        })
        .collect();
    PredictionSet { scene_id: scene_id.to_string(), map, agents }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::finite_diff_check;

    fn tiny() -> Config {
        Config::tiny()
    }

    /// Deterministic non-dyadic-free test bundle. Coordinates land on the
    /// 2^-10 grid so differences are exact.
    fn toy_bundle(tape: &mut Tape, na: usize, ni: usize, cfg: &Config, seed: u64) -> QueryBundle {
        let c = cfg.channels;
        let np = cfg.n_points;
        let mut r = rng::stream(seed, &[rng::hash_str("toy-bundle")]);
        let grid = |v: f64| (v * 1024.0).round() / 1024.0;
        let aq: Vec<f64> = (0..na * c).map(|_| rng::uniform_in(&mut r, -1.0, 1.0)).collect();
        let mq: Vec<f64> = (0..ni * np * c).map(|_| rng::uniform_in(&mut r, -1.0, 1.0)).collect();
        let agent_positions: Vec<Point> = (0..na)
            .map(|_| {
                [
                    grid(rng::uniform_in(&mut r, -20.0, 20.0)),
                    grid(rng::uniform_in(&mut r, -20.0, 20.0)),
                ]
            })
            .collect();
        let map_points: Vec<Vec<Point>> = (0..ni)
            .map(|_| {
                (0..np)
                    .map(|_| {
                        [
                            grid(rng::uniform_in(&mut r, -30.0, 30.0)),
                            grid(rng::uniform_in(&mut r, -30.0, 30.0)),
                        ]
                    })
                    .collect()
            })
            .collect();
        let map_scores: Vec<Vec<f64>> = (0..ni)
            .map(|_| (0..MAP_CLASSES.len()).map(|_| rng::uniform(&mut r)).collect())
            .collect();
        QueryBundle {
            agent_queries: tape.leaf(aq, &[na, c]).unwrap(),
            agent_positions,
            map_queries: tape.leaf(mq, &[ni, np, c]).unwrap(),
            map_points,
            map_scores,
        }
    }

    #[test]
    fn init_matches_schema_with_no_orphans() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, 1);
        assert!(params.check_against(&cfg).is_empty());
        for (name, p) in &params.entries {
            if name.ends_with(".gamma") {
                assert!(p.values.iter().all(|v| *v == 1.0), "{name}");
            } else if p.shape.len() == 1 {
                assert!(p.values.iter().all(|v| *v == 0.0), "{name}");
            } else if name != "mode_bank" {
                let bound = 1.0 / (p.shape[0] as f64).sqrt();
                assert!(p.values.iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn mode_bank_rows_are_orthogonal() {
        let params = ModelParams::init(&tiny(), 7);
        assert!(mode_bank_defect(&params) < 1e-10);
        let bank = params.get("mode_bank").unwrap();
        assert!(bank.values.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny();
        assert_eq!(ModelParams::init(&cfg, 5), ModelParams::init(&cfg, 5));
        assert_ne!(ModelParams::init(&cfg, 5), ModelParams::init(&cfg, 6));
    }

    #[test]
    fn params_json_roundtrip_is_bitwise() {
        let params = ModelParams::init(&tiny(), 3);
        let text = serde_json::to_string(&params).unwrap();
        let back: ModelParams = serde_json::from_str(&text).unwrap();
        assert_eq!(params, back);
        let a = &params.get("self_attn.wq").unwrap().values;
        let b = &back.get("self_attn.wq").unwrap().values;
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn schema_shape_mismatch_is_reported() {
        let cfg = tiny();
        let mut params = ModelParams::init(&cfg, 1);
        params.entries.get_mut("map_cls.b").unwrap().shape = vec![7];
        params
            .entries
            .insert("stray".into(), ParamTensor { shape: vec![1], values: vec![0.0] });
        let problems = params.check_against(&cfg);
        assert!(problems.iter().any(|p| p.contains("map_cls.b")));
        assert!(problems.iter().any(|p| p.contains("orphan parameter stray")));
    }

    #[test]
    fn motion_queries_broadcast_both_ways() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let zero_modes = Tensor::zeros(&[3, 2]);
        let out = form_motion_queries(&mut tape, &a, &zero_modes).unwrap();
        assert_eq!(out.shape(), &[2, 3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(&out.data()[(i * 3 + j) * 2..(i * 3 + j) * 2 + 2], &a.data()[i * 2..i * 2 + 2]);
            }
        }
        let zero_agents = Tensor::zeros(&[2, 2]);
        let modes = tape.leaf(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let out = form_motion_queries(&mut tape, &zero_agents, &modes).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(&out.data()[(i * 2 + j) * 2..(i * 2 + j) * 2 + 2], &modes.data()[j * 2..j * 2 + 2]);
            }
        }
    }

    #[test]
    fn motion_queries_match_scalar_loop() {
        let (na, m, c) = (2, 3, 4);
        let mut r = rng::stream(11, &[]);
        let a: Vec<f64> = (0..na * c).map(|_| rng::uniform(&mut r)).collect();
        let b: Vec<f64> = (0..m * c).map(|_| rng::uniform(&mut r)).collect();
        let mut tape = Tape::new();
        let at = tape.leaf(a.clone(), &[na, c]).unwrap();
        let bt = tape.leaf(b.clone(), &[m, c]).unwrap();
        let out = form_motion_queries(&mut tape, &at, &bt).unwrap();
        for i in 0..na {
            for j in 0..m {
                for k in 0..c {
                    assert_eq!(out.data()[(i * m + j) * c + k], a[i * c + k] + b[j * c + k]);
                }
            }
        }
    }

    #[test]
    fn motion_query_additivity_is_exact() {
        // dyadic values keep the broadcast-sum difference exact
        let (na, m, c) = (2, 2, 4);
        let base: Vec<f64> = (0..na * c).map(|i| i as f64 * 0.25).collect();
        let delta = 0.5;
        let modes: Vec<f64> = (0..m * c).map(|i| 1.0 + i as f64 * 0.125).collect();
        let mut tape = Tape::new();
        let a0 = tape.leaf(base.clone(), &[na, c]).unwrap();
        let a1 = tape
            .leaf(base.iter().map(|v| v + delta).collect(), &[na, c])
            .unwrap();
        let mt = tape.leaf(modes, &[m, c]).unwrap();
        let o0 = form_motion_queries(&mut tape, &a0, &mt).unwrap();
        let o1 = form_motion_queries(&mut tape, &a1, &mt).unwrap();
        for (x, y) in o0.data().iter().zip(o1.data()) {
            assert_eq!(y - x, delta);
        }
    }

    #[test]
    fn single_token_self_block_ignores_query_and_key_projections() {
        let cfg = tiny();
        let mut params = ModelParams::init(&cfg, 2);
        let mut tape = Tape::new();
        let q = tape.leaf((0..cfg.channels).map(|i| 0.1 * i as f64).collect(), &[1, 1, cfg.channels]).unwrap();
        let p = bind_params(&mut tape, &params).unwrap();
        let out1 = motion_self_block(&mut tape, &q, &p, &cfg).unwrap();
        // attention over one token puts weight exactly 1 on it, so wq/wk are
        // irrelevant to the output
        for name in ["self_attn.wq", "self_attn.bq", "self_attn.wk", "self_attn.bk"] {
            for v in &mut params.entries.get_mut(name).unwrap().values {
                *v += 3.7;
            }
        }
        let p2 = bind_params(&mut tape, &params).unwrap();
        let out2 = motion_self_block(&mut tape, &q, &p2, &cfg).unwrap();
        assert_eq!(out1.data(), out2.data());
    }

    #[test]
    fn self_block_is_agent_permutation_equivariant() {
        let cfg = tiny();
        let (na, m, c) = (3, cfg.n_modes, cfg.channels);
        let params = ModelParams::init(&cfg, 4);
        let mut r = rng::stream(9, &[]);
        let q: Vec<f64> = (0..na * m * c).map(|_| rng::uniform_in(&mut r, -1.0, 1.0)).collect();
        let perm = [2usize, 0, 1];
        let mut qp = vec![0.0; q.len()];
        for (dst, &src) in perm.iter().enumerate() {
            qp[dst * m * c..(dst + 1) * m * c].copy_from_slice(&q[src * m * c..(src + 1) * m * c]);
        }
        let run = |vals: Vec<f64>| {
            let mut tape = Tape::new();
            let qt = tape.leaf(vals, &[na, m, c]).unwrap();
            let p = bind_params(&mut tape, &params).unwrap();
            motion_self_block(&mut tape, &qt, &p, &cfg).unwrap().data().to_vec()
        };
        let out = run(q);
        let out_p = run(qp);
        for (dst, &src) in perm.iter().enumerate() {
            for k in 0..m * c {
                let a = out[src * m * c + k];
                let b = out_p[dst * m * c + k];
                assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0), "{a} vs {b}");
            }
        }
    }

    /// Fixed linear functional over a block output. A squared norm would be
    /// useless here: layer norm pins the per-row norm, making sum(out^2)
    /// nearly constant and its gradient pure noise.
    fn probe_loss(tape: &mut Tape, out: &Tensor) -> Result<Tensor> {
        let w: Vec<f64> = (0..out.len()).map(|i| 0.05 * (i as f64 + 1.0)).collect();
        let probe = Tensor::constant(w, out.shape())?;
        let weighted = tape.mul(out, &probe)?;
        Ok(tape.sum(&weighted))
    }

    #[test]
    fn self_block_gradient_matches_finite_differences() {
        let cfg = tiny();
        let (na, m, c) = (2, cfg.n_modes, cfg.channels);
        let params = ModelParams::init(&cfg, 6);
        let mut r = rng::stream(13, &[]);
        let q: Vec<f64> = (0..na * m * c).map(|_| rng::uniform_in(&mut r, -1.0, 1.0)).collect();
        let err = finite_diff_check(
            |tape, theta| {
                let qt = tape.reshape(theta, &[na, m, c])?;
                let p = constant_params(&params);
                let out = motion_self_block(tape, &qt, &p, &cfg)?;
                probe_loss(tape, &out)
            },
            &q,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn offset_codec_examples() {
        assert_eq!(encode_offsets(&[[2.0, 3.0], [2.0, 3.0]], [2.0, 3.0]), vec![[0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(
            encode_offsets(&[[1.0, 0.0], [2.0, 0.0]], [0.0, 0.0]),
            vec![[1.0, 0.0], [1.0, 0.0]]
        );
        let pos = decode_offsets(&[[1.0, 0.0], [1.0, 0.0]], [0.0, 0.0]);
        assert_eq!(pos, vec![[1.0, 0.0], [2.0, 0.0]]);
    }

    #[test]
    fn offset_codec_roundtrip_stays_tight() {
        let mut r = rng::stream(21, &[]);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let anchor = [rng::uniform_in(&mut r, -50.0, 50.0), rng::uniform_in(&mut r, -50.0, 50.0)];
            let traj: Vec<Point> = (0..12)
                .map(|_| [rng::uniform_in(&mut r, -50.0, 50.0), rng::uniform_in(&mut r, -50.0, 50.0)])
                .collect();
            let back = decode_offsets(&encode_offsets(&traj, anchor), anchor);
            for (a, b) in traj.iter().zip(&back) {
                worst = worst.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
            }
        }
        assert!(worst < 1e-12, "round-trip error {worst}");
    }

    #[test]
    fn normalization_examples() {
        let pts = vec![vec![[5.0, 5.0]]];
        assert_eq!(normalize_map_for_agent(&pts, [0.0, 0.0]), pts);
        assert_eq!(normalize_map_for_agent(&pts, [2.0, 3.0]), vec![vec![[3.0, 2.0]]]);
        let shift = [4.0, -2.5];
        let shifted: Vec<Vec<Point>> = pts
            .iter()
            .map(|i| i.iter().map(|p| geom::add(*p, shift)).collect())
            .collect();
        assert_eq!(
            normalize_map_for_agent(&pts, [2.0, 3.0]),
            normalize_map_for_agent(&shifted, geom::add([2.0, 3.0], shift))
        );
    }

    #[test]
    fn filter_keeps_everything_under_permissive_thresholds() {
        let scores = vec![vec![0.1, 0.0, 0.0], vec![0.0, 0.9, 0.0]];
        let pts = vec![vec![[100.0, 0.0]], vec![[0.0, 1.0]]];
        assert_eq!(select_map_indices(&scores, &pts, 0.0, f64::INFINITY), vec![0, 1]);
        // score 0.4 under tau 0.5 loses even at distance zero
        let near = vec![vec![[0.0, 0.0]]];
        assert_eq!(select_map_indices(&[vec![0.4, 0.0, 0.0]].to_vec(), &near, 0.5, 1.0), Vec::<usize>::new());
    }

    #[test]
    fn filter_matches_brute_force_over_random_configs() {
        let mut r = rng::stream(31, &[]);
        for trial in 0..50 {
            let ni = 1 + rng::pick(&mut r, 8);
            let scores: Vec<Vec<f64>> =
                (0..ni).map(|_| (0..3).map(|_| rng::uniform(&mut r)).collect()).collect();
            let agent = [rng::uniform_in(&mut r, -10.0, 10.0), rng::uniform_in(&mut r, -10.0, 10.0)];
            let pts: Vec<Vec<Point>> = (0..ni)
                .map(|_| {
                    (0..4)
                        .map(|_| {
                            [rng::uniform_in(&mut r, -30.0, 30.0), rng::uniform_in(&mut r, -30.0, 30.0)]
                        })
                        .collect()
                })
                .collect();
            for tau in [0.0, 0.5, 0.9] {
                for mu in [5.0, 20.5, f64::INFINITY] {
                    let normalized = normalize_map_for_agent(&pts, agent);
                    let got = select_map_indices(&scores, &normalized, tau, mu);
                    let mut want = Vec::new();
                    for i in 0..ni {
                        let mut top = f64::NEG_INFINITY;
                        for &s in &scores[i] {
                            if s > top {
                                top = s;
                            }
                        }
                        let mut dmin = f64::INFINITY;
                        for p in &pts[i] {
                            let d = geom::dist(*p, agent);
                            if d < dmin {
                                dmin = d;
                            }
                        }
                        if top >= tau && dmin <= mu {
                            want.push(i);
                        }
                    }
                    assert_eq!(got, want, "trial {trial} tau {tau} mu {mu}");
                    assert!(got.windows(2).all(|w| w[0] < w[1]));
                }
            }
        }
    }

    #[test]
    fn subgraph_pooling_over_equal_points_collapses_to_one_point() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, 8);
        let c = cfg.channels;
        let mut r = rng::stream(17, &[]);
        let feature: Vec<f64> = (0..c).map(|_| rng::uniform_in(&mut r, -1.0, 1.0)).collect();
        let mut tape = Tape::new();
        let p = bind_params(&mut tape, &params).unwrap();
        let mut rep = Vec::new();
        for _ in 0..4 {
            rep.extend_from_slice(&feature);
        }
        let many = tape.leaf(rep, &[1, 4, c]).unwrap();
        let one = tape.leaf(feature, &[1, 1, c]).unwrap();
        let out_many = encode_map_instances(&mut tape, &many, &p).unwrap();
        let out_one = encode_map_instances(&mut tape, &one, &p).unwrap();
        assert_eq!(out_many.data(), out_one.data());
    }

    #[test]
    fn subgraph_is_point_permutation_invariant() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, 9);
        let (s, np, c) = (2, cfg.n_points, cfg.channels);
        let mut r = rng::stream(23, &[]);
        let vals: Vec<f64> = (0..s * np * c).map(|_| rng::uniform_in(&mut r, -1.0, 1.0)).collect();
        let perm = [3usize, 1, 0, 2];
        let mut permuted = vec![0.0; vals.len()];
        for inst in 0..s {
            for (dst, &src) in perm.iter().enumerate() {
                permuted[(inst * np + dst) * c..(inst * np + dst + 1) * c]
                    .copy_from_slice(&vals[(inst * np + src) * c..(inst * np + src + 1) * c]);
            }
        }
        let run = |v: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(v, &[s, np, c]).unwrap();
            let p = bind_params(&mut tape, &params).unwrap();
            encode_map_instances(&mut tape, &x, &p).unwrap().data().to_vec()
        };
        assert_eq!(run(vals), run(permuted));
    }

    #[test]
    fn subgraph_gradient_matches_finite_differences() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, 10);
        let (s, np, c) = (2, 4, cfg.channels);
        let mut r = rng::stream(29, &[]);
        let vals: Vec<f64> = (0..s * np * c).map(|_| rng::uniform_in(&mut r, -1.0, 1.0)).collect();
        let err = finite_diff_check(
            |tape, theta| {
                let x = tape.reshape(theta, &[s, np, c])?;
                let p = constant_params(&params);
                let enc = encode_map_instances(tape, &x, &p)?;
                let sq = tape.mul(&enc, &enc)?;
                Ok(tape.sum(&sq))
            },
            &vals,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn representative_point_picks_minimum_norm_with_first_tie() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, 11);
        let mut tape = Tape::new();
        let p = bind_params(&mut tape, &params).unwrap();
        let normalized = vec![
            vec![[1.0, 0.0], [0.0, 0.0], [3.0, 0.0], [2.0, 0.0]],
            vec![[1.0, 0.0], [3.0, 0.0], [0.5, 0.5], [4.0, 0.0]],
            vec![[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0], [0.0, -2.0]],
        ];
        let (reps, pe) = map_position_encoding(&mut tape, &normalized, &p).unwrap();
        assert_eq!(reps[0], [0.0, 0.0]);
        assert_eq!(reps[1], [0.5, 0.5]);
        assert_eq!(reps[2], [2.0, 0.0]);
        assert_eq!(pe.shape(), &[3, cfg.channels]);
    }

    #[test]
    fn single_instance_cross_attention_feeds_every_mode_identically() {
        let mut cfg = tiny();
        cfg.plain_blocks = true;
        let params = ModelParams::init(&cfg, 12);
        let c = cfg.channels;
        let mut tape = Tape::new();
        let p = bind_params(&mut tape, &params).unwrap();
        let mut r = rng::stream(37, &[]);
        let q: Vec<f64> = (0..2 * c).map(|_| rng::uniform_in(&mut r, -1.0, 1.0)).collect();
        let q_modes = tape.leaf(q, &[2, c]).unwrap();
        let inst = tape
            .leaf((0..c).map(|_| rng::uniform_in(&mut r, -1.0, 1.0)).collect(), &[1, c])
            .unwrap();
        let pe = tape
            .leaf((0..c).map(|_| rng::uniform_in(&mut r, -1.0, 1.0)).collect(), &[1, c])
            .unwrap();
        let out = motion_map_block(&mut tape, &q_modes, Some((&inst, &pe)), &p, &cfg).unwrap();
        // a single key gets softmax weight 1 for every query, so both mode
        // rows carry the same attended value
        assert_eq!(&out.data()[..c], &out.data()[c..]);
    }

    #[test]
    fn empty_selection_yields_zero_cross_feature() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, 13);
        let mut tape = Tape::new();
        let p = bind_params(&mut tape, &params).unwrap();
        let q_modes = tape
            .leaf(vec![1.0; cfg.n_modes * cfg.channels], &[cfg.n_modes, cfg.channels])
            .unwrap();
        let out = motion_map_block(&mut tape, &q_modes, None, &p, &cfg).unwrap();
        assert_eq!(out.shape(), &[cfg.n_modes, cfg.channels]);
        assert!(out.data().iter().all(|v| *v == 0.0));
        assert!(out.node().is_none());
    }

    #[test]
    fn cross_block_gradient_matches_finite_differences() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, 14);
        let (m, s, c) = (cfg.n_modes, 3, cfg.channels);
        let mut r = rng::stream(41, &[]);
        let vals: Vec<f64> = (0..(m + 2 * s) * c).map(|_| rng::uniform_in(&mut r, -1.0, 1.0)).collect();
        let err = finite_diff_check(
            |tape, theta| {
                let q = tape.slice_last(theta, 0, m * c)?;
                let q = tape.reshape(&q, &[m, c])?;
                let inst = tape.slice_last(theta, m * c, (m + s) * c)?;
                let inst = tape.reshape(&inst, &[s, c])?;
                let pe = tape.slice_last(theta, (m + s) * c, (m + 2 * s) * c)?;
                let pe = tape.reshape(&pe, &[s, c])?;
                let p = constant_params(&params);
                let out = motion_map_block(tape, &q, Some((&inst, &pe)), &p, &cfg)?;
                probe_loss(tape, &out)
            },
            &vals,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn fusion_concatenates_and_slices_back() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.5], &[1, 1, 1]).unwrap();
        let b = tape.leaf(vec![-2.5], &[1, 1, 1]).unwrap();
        let fused = fuse_motion_queries(&mut tape, &a, &b).unwrap();
        assert_eq!(fused.shape(), &[1, 1, 2]);
        assert_eq!(fused.data(), &[1.5, -2.5]);

        let (na, m, c) = (2, 3, 4);
        let mut r = rng::stream(43, &[]);
        let sa: Vec<f64> = (0..na * m * c).map(|_| rng::uniform(&mut r)).collect();
        let ca: Vec<f64> = (0..na * m * c).map(|_| rng::uniform(&mut r)).collect();
        let sat = tape.leaf(sa.clone(), &[na, m, c]).unwrap();
        let cat = tape.leaf(ca, &[na, m, c]).unwrap();
        let fused = fuse_motion_queries(&mut tape, &sat, &cat).unwrap();
        let first = tape.slice_last(&fused, 0, c).unwrap();
        assert_eq!(first.data(), &sa[..]);

        let bad = tape.leaf(vec![0.0; na * m * (c + 1)], &[na, m, c + 1]).unwrap();
        assert!(fuse_motion_queries(&mut tape, &sat, &bad).is_err());
    }

    #[test]
    fn zero_motion_head_decodes_to_standstill() {
        let cfg = tiny();
        let mut params = ModelParams::init(&cfg, 15);
        for name in ["motion_head.w1", "motion_head.b1", "motion_head.w2", "motion_head.b2"] {
            for v in &mut params.entries.get_mut(name).unwrap().values {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let p = bind_params(&mut tape, &params).unwrap();
        let fused = tape
            .leaf(vec![0.3; 3 * cfg.n_modes * 2 * cfg.channels], &[3, cfg.n_modes, 2 * cfg.channels])
            .unwrap();
        let out = decode_motion(&mut tape, &fused, &p, &cfg).unwrap();
        assert_eq!(out.shape(), &[3, cfg.n_modes, cfg.t_future, 2]);
        assert!(out.data().iter().all(|v| *v == 0.0));
        for traj in decode_offsets(
            &(0..cfg.t_future).map(|_| [0.0, 0.0]).collect::<Vec<_>>(),
            [7.0, -3.0],
        ) {
            assert_eq!(traj, [7.0, -3.0]);
        }
    }

    #[test]
    fn perception_heads_respect_codomains() {
        let cfg = tiny();
        let mut params = ModelParams::init(&cfg, 16);
        for v in &mut params.entries.get_mut("det_cls.w").unwrap().values {
            *v = 0.0;
        }
        params.entries.get_mut("det_cls.b").unwrap().values = vec![0.0; AGENT_CLASSES.len()];
        let mut tape = Tape::new();
        let bundle = toy_bundle(&mut tape, 3, 2, &cfg, 51);
        let p = bind_params(&mut tape, &params).unwrap();
        let out = decode_perception(&mut tape, &bundle.agent_queries, &bundle.map_queries, &p).unwrap();
        // zero cls head: every score is sigmoid(0) = 0.5
        assert!(out.det_scores.data().iter().all(|v| *v == 0.5));
        assert!(out.map_scores.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        let boxes = out.det_boxes.data();
        for i in 0..3 {
            assert!(boxes[i * 5 + 2] > 0.0 && boxes[i * 5 + 3] > 0.0, "sizes stay positive");
        }
        assert_eq!(out.map_points.shape(), &[2, cfg.n_points, 2]);
    }

    #[test]
    fn forward_counts_follow_the_bundle() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, 17);
        let mut tape = Tape::new();
        let bundle = toy_bundle(&mut tape, 3, 4, &cfg, 52);
        let p = bind_params(&mut tape, &params).unwrap();
        let preds = full_forward(&mut tape, &bundle, &p, &cfg, "scene-x").unwrap();
        assert_eq!(preds.scene_id, "scene-x");
        assert_eq!(preds.map.len(), 4);
        assert_eq!(preds.agents.len(), 3);
        for a in &preds.agents {
            assert_eq!(a.forecast.len(), cfg.n_modes);
            assert!(a.forecast.iter().all(|m| m.len() == cfg.t_future));
        }
    }

    #[test]
    fn empty_map_runs_on_the_self_branch_alone() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, 18);
        let mut tape = Tape::new();
        let c = cfg.channels;
        let aq = tape.leaf(vec![0.2; c], &[1, c]).unwrap();
        let empty = QueryBundle {
            agent_queries: aq.clone(),
            agent_positions: vec![[0.0, 0.0]],
            map_queries: tape.leaf(vec![], &[0, cfg.n_points, c]).unwrap(),
            map_points: vec![],
            map_scores: vec![],
        };
        let p = bind_params(&mut tape, &params).unwrap();
        let out_empty = forward(&mut tape, &empty, &p, &cfg).unwrap();
        assert!(out_empty.motion_offsets.data().iter().all(|v| v.is_finite()));

        // a map whose instances all fail the filter takes the same motion path
        let mut tape2 = Tape::new();
        let aq2 = tape2.leaf(vec![0.2; c], &[1, c]).unwrap();
        let far = QueryBundle {
            agent_queries: aq2,
            agent_positions: vec![[0.0, 0.0]],
            map_queries: tape2.leaf(vec![0.5; cfg.n_points * c], &[1, cfg.n_points, c]).unwrap(),
            map_points: vec![(0..cfg.n_points).map(|k| [1000.0 + k as f64, 0.0]).collect()],
            map_scores: vec![vec![0.0, 0.0, 0.0]],
        };
        let p2 = bind_params(&mut tape2, &params).unwrap();
        let out_far = forward(&mut tape2, &far, &p2, &cfg).unwrap();
        assert_eq!(out_empty.motion_offsets.data(), out_far.motion_offsets.data());
    }

    #[test]
    fn forecast_offsets_are_translation_invariant_bitwise() {
        let cfg = tiny();
        let params = ModelParams::init(&cfg, 19);
        let shift = [37.0, -12.5];
        let run = |translate: bool| {
            let mut tape = Tape::new();
            let mut bundle = toy_bundle(&mut tape, 3, 4, &cfg, 53);
            if translate {
                for p in &mut bundle.agent_positions {
                    *p = geom::add(*p, shift);
                }
                for inst in &mut bundle.map_points {
                    for p in inst.iter_mut() {
                        *p = geom::add(*p, shift);
                    }
                }
            }
            let p = bind_params(&mut tape, &params).unwrap();
            let out = forward(&mut tape, &bundle, &p, &cfg).unwrap();
            out.motion_offsets.data().to_vec()
        };
        let base = run(false);
        let moved = run(true);
        assert!(base.iter().zip(&moved).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn far_map_edits_never_reach_an_unrelated_agent() {
        let mut cfg = tiny();
        cfg.mu = 5.0;
        let params = ModelParams::init(&cfg, 20);
        let c = cfg.channels;
        let np = cfg.n_points;
        let build = |tape: &mut Tape, poison: bool| {
            // agent 0 near instance 0; instance 1 sits near agent 1 only
            let mut mq = vec![0.25; 2 * np * c];
            if poison {
                for v in &mut mq[..np * c] {
                    *v = -4.0;
                }
            }
            let mut pts0: Vec<Point> = (0..np).map(|k| [k as f64, 0.0]).collect();
            if poison {
                for p in &mut pts0 {
                    p[1] += 1.0;
                }
            }
            QueryBundle {
                agent_queries: tape.leaf(vec![0.1; 2 * c], &[2, c]).unwrap(),
                agent_positions: vec![[0.0, 0.0], [100.0, 0.0]],
                map_queries: tape.leaf(mq, &[2, np, c]).unwrap(),
                map_points: vec![pts0, (0..np).map(|k| [100.0 + k as f64, 0.0]).collect()],
                map_scores: vec![vec![0.9, 0.0, 0.0], vec![0.9, 0.0, 0.0]],
            }
        };
        let run = |poison: bool| {
            let mut tape = Tape::new();
            let bundle = build(&mut tape, poison);
            let p = bind_params(&mut tape, &params).unwrap();
            forward(&mut tape, &bundle, &p, &cfg).unwrap().motion_offsets.data().to_vec()
        };
        let clean = run(false);
        let poisoned = run(true);
        let per_agent = cfg.n_modes * cfg.t_future * 2;
        assert_eq!(&clean[per_agent..], &poisoned[per_agent..], "agent 1 unchanged");
        assert_ne!(&clean[..per_agent], &poisoned[..per_agent], "agent 0 sees the edit");
    }
}
