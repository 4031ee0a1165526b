//! Tape operations: forward evaluation plus the reverse rule for each op.

use super::{strides, GradSink, Rule, Tape, Tensor, TensorError};

type Result<T> = super::Result<T>;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape, b.shape),
        });
    }
    Ok(())
}

impl Tape {
    /// Elementwise op whose local derivative is known at forward time.
    fn unary(&mut self, x: &Tensor, data: Vec<f64>, deriv: Vec<f64>) -> Tensor {
        let rule = x.node.map(|nx| {
            let n = deriv.len();
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                let b = sink.buf(nx, n);
                for i in 0..n {
                    b[i] += g[i] * deriv[i];
                }
            }) as Rule
        });
        self.record(x.shape.clone(), data, rule)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        let (na, nb, n) = (a.node, b.node, a.len());
        let rule = (na.is_some() || nb.is_some()).then(|| {
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                if let Some(na) = na {
                    let buf = sink.buf(na, n);
                    for i in 0..n {
                        buf[i] += g[i];
                    }
                }
                if let Some(nb) = nb {
                    let buf = sink.buf(nb, n);
                    for i in 0..n {
                        buf[i] += g[i];
                    }
                }
            }) as Rule
        });
        Ok(self.record(a.shape.clone(), data, rule))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        let (na, nb, n) = (a.node, b.node, a.len());
        let rule = (na.is_some() || nb.is_some()).then(|| {
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                if let Some(na) = na {
                    let buf = sink.buf(na, n);
                    for i in 0..n {
                        buf[i] += g[i];
                    }
                }
                if let Some(nb) = nb {
                    let buf = sink.buf(nb, n);
                    for i in 0..n {
                        buf[i] -= g[i];
                    }
                }
            }) as Rule
        });
        Ok(self.record(a.shape.clone(), data, rule))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        let (na, nb, n) = (a.node, b.node, a.len());
        let rule = (na.is_some() || nb.is_some()).then(|| {
            let av = a.data.clone();
            let bv = b.data.clone();
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                if let Some(na) = na {
                    let buf = sink.buf(na, n);
                    for i in 0..n {
                        buf[i] += g[i] * bv[i];
                    }
                }
                if let Some(nb) = nb {
                    let buf = sink.buf(nb, n);
                    for i in 0..n {
                        buf[i] += g[i] * av[i];
                    }
                }
            }) as Rule
        });
        Ok(self.record(a.shape.clone(), data, rule))
    }

    /// y = mul * x + add, elementwise with scalar constants.
    pub fn affine(&mut self, x: &Tensor, mul: f64, add: f64) -> Tensor {
        let data = x.data.iter().map(|v| mul * v + add).collect();
        let deriv = vec![mul; x.len()];
        self.unary(x, data, deriv)
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        for &v in &x.data {
            self.margins.relu = self.margins.relu.min(v.abs());
        }
        let data = x.data.iter().map(|v| v.max(0.0)).collect();
        let deriv = x.data.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        self.unary(x, data, deriv)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        let data: Vec<f64> = x.data.iter().map(|&v| stable_sigmoid(v)).collect();
        let deriv = data.iter().map(|y| y * (1.0 - y)).collect();
        self.unary(x, data, deriv)
    }

    /// Natural log; callers must keep inputs strictly positive (see `clamp`).
    pub fn ln(&mut self, x: &Tensor) -> Tensor {
        let data = x.data.iter().map(|v| v.ln()).collect();
        let deriv = x.data.iter().map(|v| 1.0 / v).collect();
        self.unary(x, data, deriv)
    }

    /// Clamp into [lo, hi]; gradient passes through values inside the range.
    pub fn clamp(&mut self, x: &Tensor, lo: f64, hi: f64) -> Tensor {
        for &v in &x.data {
            let m = (v - lo).abs().min((v - hi).abs());
            self.margins.clamp = self.margins.clamp.min(m);
        }
        let data = x.data.iter().map(|v| v.clamp(lo, hi)).collect();
        let deriv = x
            .data
            .iter()
            .map(|&v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 })
            .collect();
        self.unary(x, data, deriv)
    }

    /// x^e with constant exponent; domain is x >= 0 as used here.
    pub fn pow_const(&mut self, x: &Tensor, e: f64) -> Tensor {
        let data = x.data.iter().map(|v| v.powf(e)).collect();
        let deriv = x
            .data
            .iter()
            .map(|&v| if e == 0.0 { 0.0 } else { e * v.powf(e - 1.0) })
            .collect();
        self.unary(x, data, deriv)
    }

    pub fn softplus(&mut self, x: &Tensor) -> Tensor {
        // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|) avoids overflow either way.
        let data = x
            .data
            .iter()
            .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        let deriv = x.data.iter().map(|&v| stable_sigmoid(v)).collect();
        self.unary(x, data, deriv)
    }

    pub fn abs(&mut self, x: &Tensor) -> Tensor {
        for &v in &x.data {
            self.margins.abs = self.margins.abs.min(v.abs());
        }
        let data = x.data.iter().map(|v| v.abs()).collect();
        let deriv = x
            .data
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        self.unary(x, data, deriv)
    }

    /// Rank-2 matrix product [m×k]·[k×n] → [m×n].
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", a.shape, b.shape),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let (na, nb) = (a.node, b.node);
        let rule = (na.is_some() || nb.is_some()).then(|| {
            let av = a.data.clone();
            let bv = b.data.clone();
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                if let Some(na) = na {
                    // dA = g · Bᵀ
                    let da = sink.buf(na, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                }
                if let Some(nb) = nb {
                    // dB = Aᵀ · g
                    let db = sink.buf(nb, k * n);
                    for p in 0..k {
                        for i in 0..m {
                            let av_ip = av[i * k + p];
                            if av_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av_ip * g[i * n + j];
                            }
                        }
                    }
                }
            }) as Rule
        });
        Ok(self.record(vec![m, n], out, rule))
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = x.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x.data[i * n + j];
            }
        }
        let rule = x.node.map(|nx| {
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                let dx = sink.buf(nx, m * n);
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] += g[j * m + i];
                    }
                }
            }) as Rule
        });
        Ok(self.record(vec![n, m], out, rule))
    }

    /// Softmax over the trailing axis, stabilized by max subtraction.
    pub fn softmax_last(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape.is_empty() {
            return Err(TensorError::Shape {
                op: "softmax_last",
                detail: "rank 0".into(),
            });
        }
        let cols = *x.shape.last().unwrap();
        let rows = if cols == 0 { 0 } else { x.len() / cols };
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xs = &x.data[r * cols..(r + 1) * cols];
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (xs[j] - m).exp();
                out[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
        let rule = x.node.map(|nx| {
            let y = out.clone();
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                let dx = sink.buf(nx, rows * cols);
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }) as Rule
        });
        Ok(self.record(x.shape.clone(), out, rule))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: &Tensor) -> Tensor {
        let total: f64 = x.data.iter().sum();
        let rule = x.node.map(|nx| {
            let n = x.len();
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                let dx = sink.buf(nx, n);
                for v in dx.iter_mut() {
                    *v += g[0];
                }
            }) as Rule
        });
        self.record(vec![], vec![total], rule)
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis("sum_axis", &x.shape, axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x.data[(o * len + t) * inner + i];
                }
            }
        }
        let mut shape = x.shape.clone();
        shape.remove(axis);
        let rule = x.node.map(|nx| {
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                let dx = sink.buf(nx, outer * len * inner);
                for o in 0..outer {
                    for t in 0..len {
                        for i in 0..inner {
                            dx[(o * len + t) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }) as Rule
        });
        Ok(self.record(shape, out, rule))
    }

    /// Running sum along one axis; shape is preserved.
    pub fn cumsum_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis("cumsum_axis", &x.shape, axis)?;
        let mut out = x.data.clone();
        for o in 0..outer {
            for t in 1..len {
                for i in 0..inner {
                    out[(o * len + t) * inner + i] += out[(o * len + t - 1) * inner + i];
                }
            }
        }
        let rule = x.node.map(|nx| {
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                // d x[t] = sum of grads at positions >= t (suffix sums).
                let dx = sink.buf(nx, outer * len * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut acc = 0.0;
                        for t in (0..len).rev() {
                            acc += g[(o * len + t) * inner + i];
                            dx[(o * len + t) * inner + i] += acc;
                        }
                    }
                }
            }) as Rule
        });
        Ok(self.record(x.shape.clone(), out, rule))
    }

    /// Max along one axis; ties resolve to the first index, which also
    /// receives the whole gradient.
    pub fn maxpool_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis("maxpool_axis", &x.shape, axis)?;
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "maxpool_axis" });
        }
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                let mut best_t = 0;
                for t in 0..len {
                    let v = x.data[(o * len + t) * inner + i];
                    if v > best {
                        second = best;
                        best = v;
                        best_t = t;
                    } else if v < best && v > second {
                        second = v;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = best_t;
                // margin to the largest strictly smaller competitor; exact
                // duplicates of the max (pooled features fanned back over
                // points, say) move with it and are not a kink
                if second > f64::NEG_INFINITY {
                    self.margins.pool_gap = self.margins.pool_gap.min(best - second);
                }
            }
        }
        let mut shape = x.shape.clone();
        shape.remove(axis);
        let rule = x.node.map(|nx| {
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                let dx = sink.buf(nx, outer * len * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let t = arg[o * inner + i];
                        dx[(o * len + t) * inner + i] += g[o * inner + i];
                    }
                }
            }) as Rule
        });
        Ok(self.record(shape, out, rule))
    }

    /// Concatenate along the trailing axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Shape {
            op: "concat_last",
            detail: "no operands".into(),
        })?;
        if first.shape.is_empty() {
            return Err(TensorError::Shape {
                op: "concat_last",
                detail: "rank 0".into(),
            });
        }
        let lead = &first.shape[..first.shape.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape.len() != first.shape.len() || &p.shape[..p.shape.len() - 1] != lead {
                return Err(TensorError::Shape {
                    op: "concat_last",
                    detail: format!("{:?} vs {:?}", first.shape, p.shape),
                });
            }
            widths.push(*p.shape.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for r in 0..rows {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&p.data[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let nodes: Vec<Option<usize>> = parts.iter().map(|p| p.node).collect();
        let rule = nodes.iter().any(Option::is_some).then(|| {
            let widths = widths.clone();
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                let mut off = 0;
                for (idx, &w) in widths.iter().enumerate() {
                    if let Some(np) = nodes[idx] {
                        let dp = sink.buf(np, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                dp[r * w + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }) as Rule
        });
        let mut shape = first.shape.clone();
        *shape.last_mut().unwrap() = total;
        Ok(self.record(shape, out, rule))
    }

    /// Trailing-axis slice [start, end).
    pub fn slice_last(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        if x.shape.is_empty() {
            return Err(TensorError::Shape { op: "slice_last", detail: "rank 0".into() });
        }
        let c = *x.shape.last().unwrap();
        if start > end || end > c {
            return Err(TensorError::Shape {
                op: "slice_last",
                detail: format!("range {start}..{end} of {c}"),
            });
        }
        let w = end - start;
        let rows = if c == 0 { 0 } else { x.len() / c };
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            out[r * w..(r + 1) * w].copy_from_slice(&x.data[r * c + start..r * c + end]);
        }
        let rule = x.node.map(|nx| {
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                let dx = sink.buf(nx, rows * c);
                for r in 0..rows {
                    for j in 0..w {
                        dx[r * c + start + j] += g[r * w + j];
                    }
                }
            }) as Rule
        });
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = w;
        Ok(self.record(shape, out, rule))
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if want != x.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", x.shape, shape),
            });
        }
        let rule = x.node.map(|nx| {
            let n = x.len();
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                let dx = sink.buf(nx, n);
                for i in 0..n {
                    dx[i] += g[i];
                }
            }) as Rule
        });
        Ok(self.record(shape.to_vec(), x.data.clone(), rule))
    }

    /// Select leading-axis slices by index; indices may repeat.
    pub fn gather_rows(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if x.shape.is_empty() {
            return Err(TensorError::Shape { op: "gather_rows", detail: "rank 0".into() });
        }
        let r = x.shape[0];
        let rest: usize = x.shape[1..].iter().product();
        for &i in idx {
            if i >= r {
                return Err(TensorError::Shape {
                    op: "gather_rows",
                    detail: format!("index {i} out of {r} rows"),
                });
            }
        }
        let mut out = vec![0.0; idx.len() * rest];
        for (o, &i) in idx.iter().enumerate() {
            out[o * rest..(o + 1) * rest].copy_from_slice(&x.data[i * rest..(i + 1) * rest]);
        }
        let rule = x.node.map(|nx| {
            let idx = idx.to_vec();
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                let dx = sink.buf(nx, r * rest);
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..rest {
                        dx[i * rest + j] += g[o * rest + j];
                    }
                }
            }) as Rule
        });
        let mut shape = x.shape.clone();
        shape[0] = idx.len();
        Ok(self.record(shape, out, rule))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Shape {
            op: "stack_rows",
            detail: "no operands".into(),
        })?;
        for p in parts {
            if p.shape != first.shape {
                return Err(TensorError::Shape {
                    op: "stack_rows",
                    detail: format!("{:?} vs {:?}", first.shape, p.shape),
                });
            }
        }
        let rest = first.len();
        let mut out = Vec::with_capacity(parts.len() * rest);
        for p in parts {
            out.extend_from_slice(&p.data);
        }
        let nodes: Vec<Option<usize>> = parts.iter().map(|p| p.node).collect();
        let rule = nodes.iter().any(Option::is_some).then(|| {
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                for (k, node) in nodes.iter().enumerate() {
                    if let Some(np) = *node {
                        let dp = sink.buf(np, rest);
                        for j in 0..rest {
                            dp[j] += g[k * rest + j];
                        }
                    }
                }
            }) as Rule
        });
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(self.record(shape, out, rule))
    }

    /// out[i, j, :] = a[i, :] + b[j, :] for rank-2 operands sharing channels.
    pub fn broadcast_sum(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, c) = a.dims2("broadcast_sum")?;
        let (n, c2) = b.dims2("broadcast_sum")?;
        if c != c2 {
            return Err(TensorError::Shape {
                op: "broadcast_sum",
                detail: format!("{:?} vs {:?}", a.shape, b.shape),
            });
        }
        let mut out = vec![0.0; m * n * c];
        for i in 0..m {
            for j in 0..n {
                for k in 0..c {
                    out[(i * n + j) * c + k] = a.data[i * c + k] + b.data[j * c + k];
                }
            }
        }
        let (na, nb) = (a.node, b.node);
        let rule = (na.is_some() || nb.is_some()).then(|| {
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                if let Some(na) = na {
                    let da = sink.buf(na, m * c);
                    for i in 0..m {
                        for j in 0..n {
                            for k in 0..c {
                                da[i * c + k] += g[(i * n + j) * c + k];
                            }
                        }
                    }
                }
                if let Some(nb) = nb {
                    let db = sink.buf(nb, n * c);
                    for i in 0..m {
                        for j in 0..n {
                            for k in 0..c {
                                db[j * c + k] += g[(i * n + j) * c + k];
                            }
                        }
                    }
                }
            }) as Rule
        });
        Ok(self.record(vec![m, n, c], out, rule))
    }

    /// Repeat a rank-2 tensor along a new middle axis: [I×C] → [I×p×C].
    pub fn expand_dim1(&mut self, x: &Tensor, p: usize) -> Result<Tensor> {
        let (i_n, c) = x.dims2("expand_dim1")?;
        let mut out = vec![0.0; i_n * p * c];
        for i in 0..i_n {
            for t in 0..p {
                out[(i * p + t) * c..(i * p + t + 1) * c]
                    .copy_from_slice(&x.data[i * c..(i + 1) * c]);
            }
        }
        let rule = x.node.map(|nx| {
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                let dx = sink.buf(nx, i_n * c);
                for i in 0..i_n {
                    for t in 0..p {
                        for k in 0..c {
                            dx[i * c + k] += g[(i * p + t) * c + k];
                        }
                    }
                }
            }) as Rule
        });
        Ok(self.record(vec![i_n, p, c], out, rule))
    }

    /// Broadcast-add a rank-1 bias over the trailing axis.
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if bias.shape.len() != 1 || x.shape.last() != Some(&bias.shape[0]) {
            return Err(TensorError::Shape {
                op: "add_bias",
                detail: format!("{:?} + {:?}", x.shape, bias.shape),
            });
        }
        let c = bias.shape[0];
        let rows = if c == 0 { 0 } else { x.len() / c };
        let mut out = x.data.clone();
        for r in 0..rows {
            for k in 0..c {
                out[r * c + k] += bias.data[k];
            }
        }
        let (nx, nb) = (x.node, bias.node);
        let rule = (nx.is_some() || nb.is_some()).then(|| {
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                if let Some(nx) = nx {
                    let dx = sink.buf(nx, rows * c);
                    for i in 0..rows * c {
                        dx[i] += g[i];
                    }
                }
                if let Some(nb) = nb {
                    let db = sink.buf(nb, c);
                    for r in 0..rows {
                        for k in 0..c {
                            db[k] += g[r * c + k];
                        }
                    }
                }
            }) as Rule
        });
        Ok(self.record(x.shape.clone(), out, rule))
    }

    /// Layer normalization over the trailing axis with affine parameters.
    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-5;
        if gamma.shape.len() != 1
            || gamma.shape != beta.shape
            || x.shape.last() != Some(&gamma.shape[0])
        {
            return Err(TensorError::Shape {
                op: "layer_norm",
                detail: format!("{:?} with affine {:?}/{:?}", x.shape, gamma.shape, beta.shape),
            });
        }
        let c = gamma.shape[0];
        if c == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        let rows = x.len() / c;
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xs = &x.data[r * c..(r + 1) * c];
            let mu: f64 = xs.iter().sum::<f64>() / c as f64;
            let var: f64 = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[r] = inv;
            for k in 0..c {
                let h = (xs[k] - mu) * inv;
                xhat[r * c + k] = h;
                out[r * c + k] = gamma.data[k] * h + beta.data[k];
            }
        }
        let (nx, ng, nb) = (x.node, gamma.node, beta.node);
        let rule = (nx.is_some() || ng.is_some() || nb.is_some()).then(|| {
            let gvals = gamma.data.clone();
            Box::new(move |g: &[f64], sink: &mut GradSink| {
                if let Some(ng) = ng {
                    let dg = sink.buf(ng, c);
                    for r in 0..rows {
                        for k in 0..c {
                            dg[k] += g[r * c + k] * xhat[r * c + k];
                        }
                    }
                }
                if let Some(nb) = nb {
                    let db = sink.buf(nb, c);
                    for r in 0..rows {
                        for k in 0..c {
                            db[k] += g[r * c + k];
                        }
                    }
                }
                if let Some(nx) = nx {
                    let dx = sink.buf(nx, rows * c);
                    for r in 0..rows {
                        let hs = &xhat[r * c..(r + 1) * c];
                        let gs = &g[r * c..(r + 1) * c];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for k in 0..c {
                            let dh = gs[k] * gvals[k];
                            mean_dh += dh;
                            mean_dh_h += dh * hs[k];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for k in 0..c {
                            let dh = gs[k] * gvals[k];
                            dx[r * c + k] += inv_std[r] * (dh - mean_dh - hs[k] * mean_dh_h);
                        }
                    }
                }
            }) as Rule
        });
        Ok(self.record(x.shape.clone(), out, rule))
    }
}

fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// (outer, axis length, inner) split of a shape around `axis`.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis { op, axis, rank: shape.len() });
    }
    let s = strides(shape);
    let outer: usize = shape[..axis].iter().product();
    Ok((outer, shape[axis], s[axis]))
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};
    use crate::tensor::check::finite_diff_check;

    fn t(tape: &mut Tape, data: &[f64], shape: &[usize]) -> Tensor {
        tape.leaf(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let i = t(&mut tape, &[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let y = tape.matmul(&x, &i).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matmul_row_by_column() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0, 2.0], &[1, 2]);
        let b = t(&mut tape, &[3.0, 4.0], &[2, 1]);
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0, 2.0], &[1, 2]);
        let b = t(&mut tape, &[1.0, 2.0, 3.0], &[3, 1]);
        assert!(tape.matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_uniform_on_equal_entries() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[0.0, 0.0, 0.0], &[3]);
        let y = tape.softmax_last(&x).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_stays_finite_under_large_gap() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1000.0, 0.0], &[2]);
        let y = tape.softmax_last(&x).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-300);
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn maxpool_rows_and_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 5.0, 3.0, 2.0], &[2, 2]);
        let y = tape.maxpool_axis(&x, 0).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
        let s = tape.sum(&y);
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.of(&x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first_index() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[7.0, 7.0, 7.0], &[3]);
        let y = tape.maxpool_axis(&x, 0).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.of(&x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_empty_axis_is_an_error() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[], &[0, 2]);
        assert!(tape.maxpool_axis(&x, 0).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = Σ x² at x = [1, 2] → grad [2, 4].
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 2.0], &[2]);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        assert_eq!(loss.value(), 5.0);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.of(&x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn cumsum_forward_and_backward() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 2.0, 3.0], &[3]);
        let y = tape.cumsum_axis(&x, 0).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 6.0]);
        // weight later prefix sums more heavily to expose the suffix rule
        let w = Tensor::constant(vec![1.0, 10.0, 100.0], &[3]).unwrap();
        let wy = tape.mul(&y, &w).unwrap();
        let loss = tape.sum(&wy);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.of(&x).unwrap(), &[111.0, 110.0, 100.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0, 2.0], &[1, 2]);
        let b = t(&mut tape, &[3.0], &[1, 1]);
        let c = tape.concat_last(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0]);
        let back = tape.slice_last(&c, 0, 2).unwrap();
        assert_eq!(back.data(), a.data());
    }

    #[test]
    fn gather_repeats_accumulate_in_backward() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 2.0], &[2, 1]);
        let y = tape.gather_rows(&x, &[0, 0, 1]).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0]);
        let s = tape.sum(&y);
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.of(&x).unwrap(), &[2.0, 1.0]);
    }

    #[test]
    fn broadcast_sum_matches_scalar_loop() {
        let mut tape = Tape::new();
        let a = t(&mut tape, &[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&mut tape, &[10.0, 20.0], &[1, 2]);
        let y = tape.broadcast_sum(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1, 2]);
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn mixed_tracked_and_constant_inputs() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1.0, 2.0], &[2]);
        let c = Tensor::constant(vec![5.0, 5.0], &[2]).unwrap();
        let y = tape.add(&x, &c).unwrap();
        let s = tape.sum(&y);
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.of(&x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || {
            let mut tape = Tape::new();
            let x = t(&mut tape, &[0.3, -1.7, 2.9, 0.01], &[2, 2]);
            let s = tape.softmax_last(&x).unwrap();
            let m = tape.matmul(&s, &x).unwrap();
            m.data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    /// Central-difference agreement across a graph touching most structural ops.
    #[test]
    fn fd_agreement_composite_graph() {
        let f = |tape: &mut Tape, theta: &Tensor| {
            let x = tape.reshape(theta, &[3, 4])?;
            let w = tape.slice_last(&x, 0, 3)?;
            let wt = tape.transpose(&w)?;
            let h = tape.matmul(&w, &wt)?;
            let h = tape.softmax_last(&h)?;
            let s = tape.sigmoid(&h);
            let p = tape.mul(&s, &s)?;
            let c = tape.cumsum_axis(&p, 1)?;
            let rest = tape.slice_last(&x, 3, 4)?;
            let pooled = tape.sum_axis(&rest, 0)?;
            let part = tape.sum(&pooled);
            let main = tape.sum(&c);
            tape.add(&main, &part)
        };
        let theta: Vec<f64> = (0..12).map(|i| 0.1 * (i as f64) - 0.55).collect();
        let err = finite_diff_check(f, &theta, 1e-5).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn fd_agreement_norm_and_pool() {
        let f = |tape: &mut Tape, theta: &Tensor| {
            let flat = tape.reshape(theta, &[14])?;
            let x0 = tape.slice_last(&flat, 0, 8)?;
            let x = tape.reshape(&x0, &[2, 4])?;
            let gamma = tape.slice_last(&flat, 8, 12)?;
            let beta = tape.slice_last(&flat, 10, 14)?;
            let y = tape.layer_norm(&x, &gamma, &beta)?;
            let pooled = tape.maxpool_axis(&y, 1)?;
            let sp = tape.softplus(&pooled);
            Ok(tape.sum(&sp))
        };
        let theta = vec![0.4, -1.2, 0.7, 2.1, -0.3, 0.9, 1.4, -0.8, 1.1, 0.6, -0.9, 1.3, 0.2, -0.4];
        let err = finite_diff_check(f, &theta, 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn fd_agreement_pointwise_chain() {
        let f = |tape: &mut Tape, theta: &Tensor| {
            let s = tape.sigmoid(theta);
            let c = tape.clamp(&s, 1e-7, 1.0 - 1e-7);
            let one_minus = tape.affine(&c, -1.0, 1.0);
            let powed = tape.pow_const(&one_minus, 2.0);
            let logp = tape.ln(&c);
            let prod = tape.mul(&powed, &logp)?;
            let a = tape.abs(&prod);
            Ok(tape.sum(&a))
        };
        let theta = vec![0.3, -0.9, 1.7, -2.2, 0.05];
        let err = finite_diff_check(f, &theta, 1e-5).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }
}
