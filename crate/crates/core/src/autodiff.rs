use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::{broadcast_shapes, strides, Tensor};

/// Numerically stable logistic function; exact on both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(op: &Op, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op: op.label().into(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Elementwise binary op under right-aligned broadcasting.
fn broadcast_apply(
    a: &Tensor,
    b: &Tensor,
    op: &Op,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out_shape =
        broadcast_shapes(&a.shape, &b.shape).ok_or_else(|| shape_err(op, &a.shape, &b.shape))?;
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    // Effective stride per output axis: 0 where the operand broadcasts.
    let eff = |shape: &[usize]| -> Vec<usize> {
        let st = strides(shape);
        let pad = rank - shape.len();
        (0..rank)
            .map(|ax| {
                if ax < pad || shape[ax - pad] == 1 {
                    0
                } else {
                    st[ax - pad]
                }
            })
            .collect()
    };
    let ea = eff(&a.shape);
    let eb = eff(&b.shape);
    let mut data = vec![0.0; numel];
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0usize, 0usize);
    for slot in data.iter_mut() {
        *slot = f(a.data[ao], b.data[bo]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ao += ea[ax];
            bo += eb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ao -= ea[ax] * out_shape[ax];
            bo -= eb[ax] * out_shape[ax];
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Sum a gradient of broadcast shape back down to an operand's shape.
fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape == target {
        return grad.clone();
    }
    let rank = grad.shape.len();
    let pad = rank - target.len();
    let tst = strides(target);
    let eff: Vec<usize> = (0..rank)
        .map(|ax| {
            if ax < pad || target[ax - pad] == 1 {
                0
            } else {
                tst[ax - pad]
            }
        })
        .collect();
    let mut out = Tensor::zeros(target);
    let mut idx = vec![0usize; rank];
    let mut to = 0usize;
    for &g in &grad.data {
        out.data[to] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            to += eff[ax];
            if idx[ax] < grad.shape[ax] {
                break;
            }
            idx[ax] = 0;
            to -= eff[ax] * grad.shape[ax];
        }
    }
    out
}

// ─── matrix kernels ──────────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ  (dot products of contiguous rows)
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C[m,n] = A[p,m]ᵀ · B[p,n]
fn mm_tn(a: &[f64], b: &[f64], p: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for q in 0..p {
        let arow = &a[q * m..(q + 1) * m];
        let brow = &b[q * n..(q + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

// ─── convolution ─────────────────────────────────────────────────────────

fn rank4(t: &Tensor, op: &Op) -> Result<(usize, usize, usize, usize)> {
    if t.shape.len() != 4 {
        return Err(shape_err(op, &t.shape, &[0, 0, 0, 0]));
    }
    Ok((t.shape[0], t.shape[1], t.shape[2], t.shape[3]))
}

/// Patch matrix [B·H·W, Ci·kh·kw] for same-padded stride-1 convolution.
fn im2col(img: &[f64], b: usize, ci: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let k = ci * kh * kw;
    let mut cols = vec![0.0; b * h * w * k];
    let mut base = 0;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut col = base;
                for c in 0..ci {
                    let plane = (bi * ci + c) * h * w;
                    for dy in 0..kh {
                        let sy = (y + dy).wrapping_sub(ph);
                        for dx in 0..kw {
                            let sx = (x + dx).wrapping_sub(pw);
                            if sy < h && sx < w {
                                cols[col] = img[plane + sy * w + sx];
                            }
                            col += 1;
                        }
                    }
                }
                base += k;
            }
        }
    }
    cols
}

/// Scatter-add the patch matrix back onto an image; adjoint of `im2col`.
fn col2im(cols: &[f64], b: usize, ci: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let k = ci * kh * kw;
    let mut img = vec![0.0; b * ci * h * w];
    let mut base = 0;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut col = base;
                for c in 0..ci {
                    let plane = (bi * ci + c) * h * w;
                    for dy in 0..kh {
                        let sy = (y + dy).wrapping_sub(ph);
                        for dx in 0..kw {
                            let sx = (x + dx).wrapping_sub(pw);
                            if sy < h && sx < w {
                                img[plane + sy * w + sx] += cols[col];
                            }
                            col += 1;
                        }
                    }
                }
                base += k;
            }
        }
    }
    img
}

fn conv_check(img: &Tensor, ker: &Tensor, op: &Op) -> Result<()> {
    let (_, ci, _, _) = rank4(img, op)?;
    let (_, ck, kh, kw) = rank4(ker, op)?;
    if ci != ck {
        return Err(shape_err(op, &img.shape, &ker.shape));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Graph(format!(
            "Conv2d kernel sides must be odd, got {kh}x{kw}"
        )));
    }
    Ok(())
}

fn conv_forward(img: &Tensor, ker: &Tensor, op: &Op) -> Result<Tensor> {
    conv_check(img, ker, op)?;
    let (b, ci, h, w) = rank4(img, op)?;
    let (co, _, kh, kw) = rank4(ker, op)?;
    let cols = im2col(&img.data, b, ci, h, w, kh, kw);
    let m = b * h * w;
    let k = ci * kh * kw;
    let out_mat = mm_nt(&cols, &ker.data, m, k, co);
    let mut out = vec![0.0; b * co * h * w];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = ((bi * h) + y) * w + x;
                for c in 0..co {
                    out[((bi * co + c) * h + y) * w + x] = out_mat[row * co + c];
                }
            }
        }
    }
    Tensor::from_vec(vec![b, co, h, w], out)
}

fn conv_backward(img: &Tensor, ker: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let (b, ci, h, w) = (img.shape[0], img.shape[1], img.shape[2], img.shape[3]);
    let (co, _, kh, kw) = (ker.shape[0], ker.shape[1], ker.shape[2], ker.shape[3]);
    let m = b * h * w;
    let k = ci * kh * kw;
    let mut gmat = vec![0.0; m * co];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = ((bi * h) + y) * w + x;
                for c in 0..co {
                    gmat[row * co + c] = gout.data[((bi * co + c) * h + y) * w + x];
                }
            }
        }
    }
    let dcols = mm_nn(&gmat, &ker.data, m, co, k);
    let dimg = col2im(&dcols, b, ci, h, w, kh, kw);
    let cols = im2col(&img.data, b, ci, h, w, kh, kw);
    let dker = mm_tn(&gmat, &cols, m, co, k);
    (
        Tensor {
            shape: img.shape.clone(),
            data: dimg,
        },
        Tensor {
            shape: ker.shape.clone(),
            data: dker,
        },
    )
}

// ─── forward ─────────────────────────────────────────────────────────────

fn axis1_layout(t: &Tensor, op: &Op) -> Result<(usize, usize, usize)> {
    if t.shape.len() < 2 {
        return Err(shape_err(op, &t.shape, &[0, 0]));
    }
    let block: usize = t.shape[2..].iter().product();
    Ok((t.shape[0], t.shape[1], block))
}

fn forward_op(
    op: &Op,
    id: NodeId,
    values: &[Tensor],
    bindings: &BTreeMap<String, Tensor>,
) -> Result<Tensor> {
    use Op::*;
    let v = |n: NodeId| &values[n];
    match op {
        Input { name, .. } => bindings
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Graph(format!("unbound input {name} (node {id})"))),
        Const(t) => Ok(t.clone()),
        Add(a, b) => broadcast_apply(v(*a), v(*b), op, |x, y| x + y),
        Sub(a, b) => broadcast_apply(v(*a), v(*b), op, |x, y| x - y),
        Mul(a, b) => broadcast_apply(v(*a), v(*b), op, |x, y| x * y),
        MatMul(a, b) => {
            let (ta, tb) = (v(*a), v(*b));
            if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
                return Err(shape_err(op, &ta.shape, &tb.shape));
            }
            let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
            Tensor::from_vec(vec![m, n], mm_nn(&ta.data, &tb.data, m, k, n))
        }
        Conv2d { image, kernel } => conv_forward(v(*image), v(*kernel), op),
        Relu(a) => Ok(v(*a).map(|x| if x > 0.0 { x } else { 0.0 })),
        Sigmoid(a) => Ok(v(*a).map(sigmoid)),
        Ln(a) => Ok(v(*a).map(f64::ln)),
        Abs(a) => Ok(v(*a).map(f64::abs)),
        PowConst { input, exponent } => Ok(v(*input).map(|x| x.powf(*exponent))),
        Sum(a) => Ok(Tensor::scalar(v(*a).data.iter().sum())),
        Mean(a) => {
            let t = v(*a);
            Ok(Tensor::scalar(
                t.data.iter().sum::<f64>() / t.numel() as f64,
            ))
        }
        L1Norm(a) => Ok(Tensor::scalar(v(*a).data.iter().map(|x| x.abs()).sum())),
        L2NormSq(a) => Ok(Tensor::scalar(v(*a).data.iter().map(|x| x * x).sum())),
        Reshape { input, shape } => {
            let t = v(*input);
            if shape.iter().product::<usize>() != t.numel() {
                return Err(shape_err(op, &t.shape, shape));
            }
            Ok(Tensor {
                shape: shape.clone(),
                data: t.data.clone(),
            })
        }
        ReshapeTail { input, tail } => {
            let t = v(*input);
            if t.shape.is_empty() {
                return Err(shape_err(op, &t.shape, tail));
            }
            let batch = t.shape[0];
            let mut shape = vec![batch];
            shape.extend_from_slice(tail);
            if shape.iter().product::<usize>() != t.numel() {
                return Err(shape_err(op, &t.shape, &shape));
            }
            Ok(Tensor {
                shape,
                data: t.data.clone(),
            })
        }
        SliceAxis1 { input, from, to } => {
            let t = v(*input);
            let (d0, d1, block) = axis1_layout(t, op)?;
            if *from >= *to || *to > d1 {
                return Err(Error::Graph(format!(
                    "SliceAxis1 range {from}..{to} out of bounds for axis of size {d1}"
                )));
            }
            let width = to - from;
            let mut data = Vec::with_capacity(d0 * width * block);
            for i in 0..d0 {
                let base = (i * d1 + from) * block;
                data.extend_from_slice(&t.data[base..base + width * block]);
            }
            let mut shape = t.shape.clone();
            shape[1] = width;
            Tensor::from_vec(shape, data)
        }
        ConcatAxis1(a, b) => {
            let (ta, tb) = (v(*a), v(*b));
            let (d0a, d1a, ba) = axis1_layout(ta, op)?;
            let (d0b, d1b, bb) = axis1_layout(tb, op)?;
            if d0a != d0b || ba != bb || ta.shape[2..] != tb.shape[2..] {
                return Err(shape_err(op, &ta.shape, &tb.shape));
            }
            let mut data = Vec::with_capacity(ta.numel() + tb.numel());
            for i in 0..d0a {
                data.extend_from_slice(&ta.data[i * d1a * ba..(i + 1) * d1a * ba]);
                data.extend_from_slice(&tb.data[i * d1b * bb..(i + 1) * d1b * bb]);
            }
            let mut shape = ta.shape.clone();
            shape[1] = d1a + d1b;
            Tensor::from_vec(shape, data)
        }
        BinarizeSte(a) => Ok(v(*a).map(|x| if x > 0.5 { 1.0 } else { 0.0 })),
        PlaneArgmaxOneHot(a) => {
            let t = v(*a);
            let (b, c, h, w) = rank4(t, op)?;
            let mut out = vec![0.0; t.numel()];
            let hw = h * w;
            for bi in 0..b {
                for pos in 0..hw {
                    let mut best = 0usize;
                    let mut best_v = t.data[bi * c * hw + pos];
                    for ch in 1..c {
                        let val = t.data[(bi * c + ch) * hw + pos];
                        if val > best_v {
                            best_v = val;
                            best = ch;
                        }
                    }
                    out[(bi * c + best) * hw + pos] = 1.0;
                }
            }
            Tensor::from_vec(t.shape.clone(), out)
        }
    }
}

/// Forward pass. Returns one value per node; fails on the first op whose
/// output contains a non-finite value.
pub fn evaluate(g: &Graph, bindings: &BTreeMap<String, Tensor>) -> Result<Vec<Tensor>> {
    let mut values: Vec<Tensor> = Vec::with_capacity(g.ops.len());
    for (id, op) in g.ops.iter().enumerate() {
        let v = forward_op(op, id, &values, bindings)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: op.label().into(),
                node: id,
            });
        }
        values.push(v);
    }
    Ok(values)
}

// ─── backward ────────────────────────────────────────────────────────────

pub struct BackpropResult {
    /// Forward value of every node.
    pub values: Vec<Tensor>,
    /// Gradient of the output w.r.t. each requested input, keyed by input
    /// name. Inputs the output does not depend on get zero tensors.
    pub grads: BTreeMap<String, Tensor>,
}

struct Adjoints {
    slots: Vec<Option<Tensor>>,
}

impl Adjoints {
    fn accumulate(&mut self, id: NodeId, grad: Tensor) {
        match &mut self.slots[id] {
            Some(existing) => {
                for (e, g) in existing.data.iter_mut().zip(&grad.data) {
                    *e += g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Reverse-mode gradients of the scalar node `output` with respect to the
/// named inputs. Work is restricted to nodes on a path from a requested
/// input to the output.
pub fn backprop(
    g: &Graph,
    bindings: &BTreeMap<String, Tensor>,
    output: NodeId,
    wrt: &[&str],
) -> Result<BackpropResult> {
    let mut leaf_ids = Vec::with_capacity(wrt.len());
    for name in wrt {
        let id = g
            .find_input(name)
            .ok_or_else(|| Error::Graph(format!("no input named {name}")))?;
        leaf_ids.push(id);
    }
    let values = evaluate(g, bindings)?;
    if output >= values.len() {
        return Err(Error::Graph(format!("no node {output} to differentiate")));
    }
    if values[output].numel() != 1 {
        return Err(Error::Graph(format!(
            "backward requires a scalar output, node {output} has shape {:?}",
            values[output].shape
        )));
    }

    // needs[i]: node i depends on at least one requested leaf.
    let mut needs = vec![false; g.ops.len()];
    for &id in &leaf_ids {
        needs[id] = true;
    }
    for (id, op) in g.ops.iter().enumerate() {
        if !needs[id] {
            needs[id] = op.operands().iter().any(|&o| needs[o]);
        }
    }

    let mut adj = Adjoints {
        slots: vec![None; g.ops.len()],
    };
    if needs[output] {
        adj.slots[output] = Some(Tensor {
            shape: values[output].shape.clone(),
            data: vec![1.0],
        });
    }

    use Op::*;
    for id in (0..=output).rev() {
        if !needs[id] {
            continue;
        }
        let grad = match adj.slots[id].take() {
            Some(gt) => gt,
            None => continue,
        };
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                op: format!("{} backward", g.ops[id].label()),
                node: id,
            });
        }
        let op = &g.ops[id];
        let v = |n: NodeId| &values[n];
        match op {
            Input { .. } | Const(_) => {
                if let Input { .. } = op {
                    adj.slots[id] = Some(grad); // leaf gradient, kept for extraction
                }
            }
            Add(a, b) => {
                if needs[*a] {
                    adj.accumulate(*a, reduce_to_shape(&grad, &v(*a).shape));
                }
                if needs[*b] {
                    adj.accumulate(*b, reduce_to_shape(&grad, &v(*b).shape));
                }
            }
            Sub(a, b) => {
                if needs[*a] {
                    adj.accumulate(*a, reduce_to_shape(&grad, &v(*a).shape));
                }
                if needs[*b] {
                    let neg = reduce_to_shape(&grad, &v(*b).shape).map(|x| -x);
                    adj.accumulate(*b, neg);
                }
            }
            Mul(a, b) => {
                if needs[*a] {
                    let ga = broadcast_apply(&grad, v(*b), op, |x, y| x * y)?;
                    adj.accumulate(*a, reduce_to_shape(&ga, &v(*a).shape));
                }
                if needs[*b] {
                    let gb = broadcast_apply(&grad, v(*a), op, |x, y| x * y)?;
                    adj.accumulate(*b, reduce_to_shape(&gb, &v(*b).shape));
                }
            }
            MatMul(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if needs[*a] {
                    let da = mm_nt(&grad.data, &tb.data, m, n, k);
                    adj.accumulate(*a, Tensor::from_vec(vec![m, k], da)?);
                }
                if needs[*b] {
                    let db = mm_tn(&ta.data, &grad.data, m, k, n);
                    adj.accumulate(*b, Tensor::from_vec(vec![k, n], db)?);
                }
            }
            Conv2d { image, kernel } => {
                let (dimg, dker) = conv_backward(v(*image), v(*kernel), &grad);
                if needs[*image] {
                    adj.accumulate(*image, dimg);
                }
                if needs[*kernel] {
                    adj.accumulate(*kernel, dker);
                }
            }
            Relu(a) => {
                if needs[*a] {
                    let x = v(*a);
                    let data = grad
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    adj.accumulate(
                        *a,
                        Tensor {
                            shape: x.shape.clone(),
                            data,
                        },
                    );
                }
            }
            Sigmoid(a) => {
                if needs[*a] {
                    let y = &values[id];
                    let data = grad
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(&g, &y)| g * y * (1.0 - y))
                        .collect();
                    adj.accumulate(
                        *a,
                        Tensor {
                            shape: y.shape.clone(),
                            data,
                        },
                    );
                }
            }
            Ln(a) => {
                if needs[*a] {
                    let x = v(*a);
                    let data = grad
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(&g, &x)| g / x)
                        .collect();
                    adj.accumulate(
                        *a,
                        Tensor {
                            shape: x.shape.clone(),
                            data,
                        },
                    );
                }
            }
            Abs(a) => {
                if needs[*a] {
                    let x = v(*a);
                    let data = grad
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(&g, &x)| g * sign_or_zero(x))
                        .collect();
                    adj.accumulate(
                        *a,
                        Tensor {
                            shape: x.shape.clone(),
                            data,
                        },
                    );
                }
            }
            PowConst { input, exponent } => {
                if needs[*input] {
                    let x = v(*input);
                    let p = *exponent;
                    let data = grad
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(&g, &x)| {
                            // Fractional powers have an infinite slope at 0;
                            // clamp to a zero subgradient there.
                            if x == 0.0 && p < 1.0 {
                                0.0
                            } else {
                                g * p * x.powf(p - 1.0)
                            }
                        })
                        .collect();
                    adj.accumulate(
                        *input,
                        Tensor {
                            shape: x.shape.clone(),
                            data,
                        },
                    );
                }
            }
            Sum(a) => {
                if needs[*a] {
                    adj.accumulate(*a, Tensor::filled(&v(*a).shape, grad.data[0]));
                }
            }
            Mean(a) => {
                if needs[*a] {
                    let x = v(*a);
                    adj.accumulate(
                        *a,
                        Tensor::filled(&x.shape, grad.data[0] / x.numel() as f64),
                    );
                }
            }
            L1Norm(a) => {
                if needs[*a] {
                    let x = v(*a);
                    let g0 = grad.data[0];
                    let data = x.data.iter().map(|&x| g0 * sign_or_zero(x)).collect();
                    adj.accumulate(
                        *a,
                        Tensor {
                            shape: x.shape.clone(),
                            data,
                        },
                    );
                }
            }
            L2NormSq(a) => {
                if needs[*a] {
                    let x = v(*a);
                    let g0 = grad.data[0];
                    let data = x.data.iter().map(|&x| 2.0 * g0 * x).collect();
                    adj.accumulate(
                        *a,
                        Tensor {
                            shape: x.shape.clone(),
                            data,
                        },
                    );
                }
            }
            Reshape { input, .. } | ReshapeTail { input, .. } => {
                if needs[*input] {
                    adj.accumulate(
                        *input,
                        Tensor {
                            shape: v(*input).shape.clone(),
                            data: grad.data,
                        },
                    );
                }
            }
            SliceAxis1 { input, from, to } => {
                if needs[*input] {
                    let x = v(*input);
                    let (d0, d1, block) = axis1_layout(x, op)?;
                    let width = to - from;
                    let mut data = vec![0.0; x.numel()];
                    for i in 0..d0 {
                        let dst = (i * d1 + from) * block;
                        let src = i * width * block;
                        data[dst..dst + width * block]
                            .copy_from_slice(&grad.data[src..src + width * block]);
                    }
                    adj.accumulate(
                        *input,
                        Tensor {
                            shape: x.shape.clone(),
                            data,
                        },
                    );
                }
            }
            ConcatAxis1(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                let (d0, d1a, block) = axis1_layout(ta, op)?;
                let d1b = tb.shape[1];
                let row = (d1a + d1b) * block;
                if needs[*a] {
                    let mut data = Vec::with_capacity(ta.numel());
                    for i in 0..d0 {
                        data.extend_from_slice(&grad.data[i * row..i * row + d1a * block]);
                    }
                    adj.accumulate(
                        *a,
                        Tensor {
                            shape: ta.shape.clone(),
                            data,
                        },
                    );
                }
                if needs[*b] {
                    let mut data = Vec::with_capacity(tb.numel());
                    for i in 0..d0 {
                        data.extend_from_slice(
                            &grad.data[i * row + d1a * block..(i + 1) * row],
                        );
                    }
                    adj.accumulate(
                        *b,
                        Tensor {
                            shape: tb.shape.clone(),
                            data,
                        },
                    );
                }
            }
            // Straight-through: the quantized forward is treated as identity
            // by the backward pass so gradients reach the raw masks.
            BinarizeSte(a) | PlaneArgmaxOneHot(a) => {
                if needs[*a] {
                    adj.accumulate(
                        *a,
                        Tensor {
                            shape: v(*a).shape.clone(),
                            data: grad.data,
                        },
                    );
                }
            }
        }
    }

    let mut grads = BTreeMap::new();
    for (name, &id) in wrt.iter().zip(&leaf_ids) {
        let g = match adj.slots[id].take() {
            Some(t) => t,
            None => Tensor::zeros(&values[id].shape),
        };
        grads.insert((*name).to_string(), g);
    }
    Ok(BackpropResult { values, grads })
}

fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Convenience wrapper resolving the output by name.
pub fn gradient(
    g: &Graph,
    bindings: &BTreeMap<String, Tensor>,
    output: &str,
    wrt: &[&str],
) -> Result<BackpropResult> {
    backprop(g, bindings, g.node(output)?, wrt)
}
