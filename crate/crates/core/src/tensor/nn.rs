//! Composite differentiable blocks: affine–ReLU chains and attention.

use super::{Result, Tape, Tensor, TensorError};

/// Projection weights for one attention block. All weight matrices are C×C,
/// all biases length C.
pub struct AttentionParams<'a> {
    pub wq: &'a Tensor,
    pub bq: &'a Tensor,
    pub wk: &'a Tensor,
    pub bk: &'a Tensor,
    pub wv: &'a Tensor,
    pub bv: &'a Tensor,
    pub wo: &'a Tensor,
    pub bo: &'a Tensor,
}

/// Scaled dot-product attention with `heads` channel groups.
///
/// `k_pos`, when present, is added to `k` before the key projection, so
/// position only influences where attention looks, not what it copies.
/// Scores scale by 1/sqrt(C/heads).
pub fn multi_head_attention(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    k_pos: Option<&Tensor>,
    p: &AttentionParams<'_>,
    heads: usize,
) -> Result<Tensor> {
    let (_lq, c) = dims2("multi_head_attention", q)?;
    let (lk, ck) = dims2("multi_head_attention", k)?;
    let (lv, cv) = dims2("multi_head_attention", v)?;
    if ck != c || cv != c || lv != lk {
        return Err(TensorError::Shape {
            op: "multi_head_attention",
            detail: format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        });
    }
    if heads == 0 || c % heads != 0 {
        return Err(TensorError::HeadSplit { channels: c, heads });
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let key_in = match k_pos {
        Some(pos) => tape.add(k, pos)?,
        None => k.clone(),
    };
    let qp = linear(tape, q, p.wq, p.bq)?;
    let kp = linear(tape, &key_in, p.wk, p.bk)?;
    let vp = linear(tape, v, p.wv, p.bv)?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_last(&qp, a, b)?;
        let kh = tape.slice_last(&kp, a, b)?;
        let vh = tape.slice_last(&vp, a, b)?;
        let kt = tape.transpose(&kh)?;
        let scores = tape.matmul(&qh, &kt)?;
        let scaled = tape.affine(&scores, scale, 0.0);
        let attn = tape.softmax_last(&scaled)?;
        head_outs.push(tape.matmul(&attn, &vh)?);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    let merged = tape.concat_last(&refs)?;
    linear(tape, &merged, p.wo, p.bo)
}

/// Affine–ReLU chain over the trailing axis; no activation after the last
/// layer. Accepts any leading shape.
pub fn mlp(tape: &mut Tape, x: &Tensor, layers: &[(&Tensor, &Tensor)]) -> Result<Tensor> {
    if layers.is_empty() {
        return Err(TensorError::Shape { op: "mlp", detail: "no layers".into() });
    }
    let lead = &x.shape()[..x.shape().len().saturating_sub(1)];
    let c_in = x.shape().last().copied().unwrap_or(1);
    let rows: usize = lead.iter().product();
    let mut h = tape.reshape(x, &[rows, c_in])?;
    for (i, (w, b)) in layers.iter().enumerate() {
        h = linear(tape, &h, w, b)?;
        if i + 1 < layers.len() {
            h = tape.relu(&h);
        }
    }
    let c_out = h.shape()[1];
    let mut out_shape = lead.to_vec();
    out_shape.push(c_out);
    tape.reshape(&h, &out_shape)
}

fn linear(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(&y, b)
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(TensorError::Shape { op, detail: format!("expected rank 2, got {:?}", t.shape()) });
    }
    Ok((t.shape()[0], t.shape()[1]))
}
