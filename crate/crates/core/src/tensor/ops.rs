use super::kernels::{self, axis_split};
use super::Tensor;
use crate::error::{shape_err, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn need(t: &Tensor) -> bool {
    t.requires_grad()
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let saved = out.clone();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, ps| {
            let xs = ps[0].data();
            vec![Some(
                g.iter()
                    .zip(xs.iter().zip(&saved))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect(),
            )]
        }),
    )
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn require_2d(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err!("{op}: expected a matrix, got shape {s:?}")),
    }
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = require_2d(self, "matmul")?;
        let (k2, n) = require_2d(other, "matmul")?;
        if k != k2 {
            return Err(shape_err!(
                "matmul: inner dimensions {m}x{k} · {k2}x{n} do not match"
            ));
        }
        let out = kernels::matmul(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g, ps| {
                let ga = need(&ps[0]).then(|| {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nt_acc(g, &ps[1].data(), &mut ga, m, n, k);
                    ga
                });
                let gb = need(&ps[1]).then(|| {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn_acc(&ps[0].data(), g, &mut gb, m, k, n);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = require_2d(self, "matmul_nt")?;
        let (n, k2) = require_2d(other, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err!("matmul_nt: {m}x{k} · ({n}x{k2})ᵀ do not match"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt_acc(&self.data(), &other.data(), &mut out, m, k, n);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g, ps| {
                let ga = need(&ps[0]).then(|| {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_acc(g, &ps[1].data(), &mut ga, m, n, k);
                    ga
                });
                let gb = need(&ps[1]).then(|| {
                    let mut gb = vec![0.0; n * k];
                    kernels::gemm_tn_acc(g, &ps[0].data(), &mut gb, m, n, k);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let out = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, ps| {
                vec![
                    need(&ps[0]).then(|| g.to_vec()),
                    need(&ps[1]).then(|| g.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let out = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, ps| {
                vec![
                    need(&ps[0]).then(|| g.to_vec()),
                    need(&ps[1]).then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let out = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, ps| {
                let prod = |o: &Tensor| -> Vec<f64> {
                    g.iter().zip(o.data().iter()).map(|(g, v)| g * v).collect()
                };
                vec![
                    need(&ps[0]).then(|| prod(&ps[1])),
                    need(&ps[1]).then(|| prod(&ps[0])),
                ]
            }),
        ))
    }

    /// Adds a length-`cols` vector to every row (bias broadcast).
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let d = self.cols();
        if bias.numel() != d {
            return Err(shape_err!(
                "add_row: bias of {} values for rows of width {d}",
                bias.numel()
            ));
        }
        let b = bias.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % d])
            .collect();
        drop(b);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |g, ps| {
                let gb = need(&ps[1]).then(|| {
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![need(&ps[0]).then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// Scales row `i` by `weights[i]`.
    pub fn mul_col(&self, weights: &Tensor) -> Result<Tensor> {
        let (n, d) = require_2d(self, "mul_col")?;
        if weights.numel() != n {
            return Err(shape_err!(
                "mul_col: {} weights for {n} rows",
                weights.numel()
            ));
        }
        let w = weights.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * w[i / d])
            .collect();
        drop(w);
        Ok(Tensor::from_op(
            out,
            vec![n, d],
            vec![self.clone(), weights.clone()],
            Box::new(move |g, ps| {
                let gx = need(&ps[0]).then(|| {
                    let w = ps[1].data();
                    g.iter().enumerate().map(|(i, g)| g * w[i / d]).collect()
                });
                let gw = need(&ps[1]).then(|| {
                    let x = ps[0].data();
                    (0..n)
                        .map(|i| kernels::dot(&g[i * d..(i + 1) * d], &x[i * d..(i + 1) * d]))
                        .collect()
                });
                vec![gx, gw]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, |v| v + c, |_, _| 1.0)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Tensor {
        unary(
            self,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            |x, _| {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            },
        )
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        Tensor::from_op(
            vec![self.data().iter().sum()],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(shape_err!(
                "sum_axis: axis {axis} of shape {:?}",
                self.shape()
            ));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| shape_err!("mean_axis: axis {axis} of shape {:?}", self.shape()))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    fn axis_checked(&self, axis: usize, op: &str) -> Result<(usize, usize, usize)> {
        if axis >= self.shape().len() {
            return Err(shape_err!("{op}: axis {axis} of shape {:?}", self.shape()));
        }
        Ok(axis_split(self.shape(), axis))
    }

    /// Normalised exponential along `axis`, with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.axis_checked(axis, "softmax")?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..len {
                    buf[a] = x[(o * len + a) * inner + i];
                }
                for (a, v) in kernels::softmax(&buf).into_iter().enumerate() {
                    out[(o * len + a) * inner + i] = v;
                }
            }
        }
        drop(x);
        let y = out.clone();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let s: f64 = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                        for a in 0..len {
                            gx[idx(a)] = y[idx(a)] * (g[idx(a)] - s);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.axis_checked(axis, "log_softmax")?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..len {
                    buf[a] = x[(o * len + a) * inner + i];
                }
                for (a, v) in kernels::log_softmax(&buf).into_iter().enumerate() {
                    out[(o * len + a) * inner + i] = v;
                }
            }
        }
        drop(x);
        let y = out.clone();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let s: f64 = (0..len).map(|a| g[idx(a)]).sum();
                        for a in 0..len {
                            gx[idx(a)] = g[idx(a)] - y[idx(a)].exp() * s;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.cols();
        if gain.numel() != d || bias.numel() != d {
            return Err(shape_err!(
                "layer_norm: affine parameters must have {d} values"
            ));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let (gm, bt) = (gain.data(), bias.data());
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mu) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gm[c] + bt[c];
            }
        }
        drop((x, gm, bt));
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, ps| {
                let gm = ps[1].data();
                let gx = need(&ps[0]).then(|| {
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..d).map(|c| g[r * d + c] * gm[c]).collect();
                        let xh = &xhat[r * d..(r + 1) * d];
                        let m1 = gh.iter().sum::<f64>() / d as f64;
                        let m2 = kernels::dot(&gh, xh) / d as f64;
                        for c in 0..d {
                            gx[r * d + c] = rstd[r] * (gh[c] - m1 - xh[c] * m2);
                        }
                    }
                    gx
                });
                let ggain = need(&ps[1]).then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            acc[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    acc
                });
                let gbias = need(&ps[2]).then(|| {
                    let mut acc = vec![0.0; d];
                    for row in g.chunks(d) {
                        acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    acc
                });
                vec![gx, ggain, gbias]
            }),
        ))
    }

    /// Cross-correlation of a `C_in×H×W` input with a `C_out×C_in×kh×kw`
    /// kernel (odd sizes), zero padding that preserves `H×W`.
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let [cin, h, w] = *self.shape() else {
            return Err(shape_err!(
                "conv2d: input must be C×H×W, got {:?}",
                self.shape()
            ));
        };
        let [cout, kcin, kh, kw] = *kernel.shape() else {
            return Err(shape_err!(
                "conv2d: kernel must be 4-D, got {:?}",
                kernel.shape()
            ));
        };
        if kcin != cin {
            return Err(shape_err!(
                "conv2d: kernel expects {kcin} input channels, input has {cin}"
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err!("conv2d: kernel size {kh}x{kw} must be odd"));
        }
        if let Some(b) = bias {
            if b.numel() != cout {
                return Err(shape_err!(
                    "conv2d: bias of {} for {cout} channels",
                    b.numel()
                ));
            }
        }
        let ckk = cin * kh * kw;
        let hw = h * w;
        let cols = im2col(&self.data(), cin, h, w, kh, kw);
        let mut out = kernels::matmul(&kernel.data(), &cols, cout, ckk, hw);
        if let Some(b) = bias {
            let b = b.data();
            for o in 0..cout {
                out[o * hw..(o + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v += b[o]);
            }
        }
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![cout, h, w],
            parents,
            Box::new(move |g, ps| {
                let gx = need(&ps[0]).then(|| {
                    let mut gcols = vec![0.0; ckk * hw];
                    kernels::gemm_tn_acc(&ps[1].data(), g, &mut gcols, cout, ckk, hw);
                    col2im(&gcols, cin, h, w, kh, kw)
                });
                let gk = need(&ps[1]).then(|| {
                    let mut gk = vec![0.0; cout * ckk];
                    kernels::gemm_nt_acc(g, &cols, &mut gk, cout, hw, ckk);
                    gk
                });
                let mut grads = vec![gx, gk];
                if ps.len() == 3 {
                    grads
                        .push(need(&ps[2]).then(|| g.chunks(hw).map(|c| c.iter().sum()).collect()));
                }
                grads
            }),
        ))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat: no inputs"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(shape_err!("concat: axis {axis} of rank {rank}"));
        }
        for p in parts {
            let ok = p.shape().len() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err!(
                    "concat: shape {:?} incompatible with {:?} along axis {axis}",
                    p.shape(),
                    first.shape()
                ));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (d, &len) in datas.iter().zip(&lens) {
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        drop(datas);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            out,
            shape,
            parts.to_vec(),
            Box::new(move |g, ps| {
                let mut grads: Vec<Option<Vec<f64>>> = ps
                    .iter()
                    .zip(&lens)
                    .map(|(p, &len)| need(p).then(|| Vec::with_capacity(outer * len * inner)))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &len) in grads.iter_mut().zip(&lens) {
                        let chunk = &g[off..off + len * inner];
                        if let Some(gp) = gp {
                            gp.extend_from_slice(chunk);
                        }
                        off += len * inner;
                    }
                }
                grads
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(shape_err!(
                "reshape: {:?} cannot become {shape:?}",
                self.shape()
            ));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = require_2d(self, "transpose")?;
        let out = transpose_raw(&self.data(), r, c);
        Ok(Tensor::from_op(
            out,
            vec![c, r],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(transpose_raw(g, c, r))]),
        ))
    }

    /// Selects rows (first-axis slices) by index; repeated indices allowed.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let n = self.rows();
        let width = self.numel() / n;
        if idx.is_empty() {
            return Err(shape_err!("gather_rows: empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err!("gather_rows: index {bad} out of {n} rows"));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&x[i * width..(i + 1) * width]);
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n * width];
                for (k, &i) in idx.iter().enumerate() {
                    gx[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[k * width..(k + 1) * width])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&idx)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = require_2d(self, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(shape_err!(
                "slice_cols: [{start}, {}) of {c} columns",
                start + len
            ));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            vec![r, len],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Divides each row by its Euclidean norm (floored at `eps`).
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Tensor> {
        let (r, c) = require_2d(self, "l2_normalize_rows")?;
        let x = self.data();
        let norms: Vec<f64> = x.chunks(c).map(|row| kernels::norm(row).max(eps)).collect();
        let out: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| v / norms[i / c])
            .collect();
        drop(x);
        let y = out.clone();
        Ok(Tensor::from_op(
            out,
            vec![r, c],
            vec![self.clone()],
            Box::new(move |g, ps| {
                let x = ps[0].data();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let yr = &y[i * c..(i + 1) * c];
                    let raw = kernels::norm(&x[i * c..(i + 1) * c]);
                    if raw < eps {
                        // Norm is clamped: the map is a plain scaling here.
                        for j in 0..c {
                            gx[i * c + j] = gr[j] / norms[i];
                        }
                    } else {
                        let s = kernels::dot(gr, yr);
                        for j in 0..c {
                            gx[i * c + j] = (gr[j] - yr[j] * s) / norms[i];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

pub(crate) fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut cols = vec![0.0; cin * kh * kw * hw];
    for c in 0..cin {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((c * kh + dy) * kw + dx) * hw;
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[row + y * w + xx] = x[c * hw + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for c in 0..cin {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((c * kh + dy) * kw + dx) * hw;
                for y in 0..h {
                    let sy = y as isize + dy as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[c * hw + sy as usize * w + sx as usize] += cols[row + y * w + xx];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity_and_values() {
        let a = t(&[1., 2., 3., 4.], &[2, 2]);
        let i = t(&[1., 0., 0., 1.], &[2, 2]);
        assert_eq!(a.matmul(&i).unwrap().to_vec(), vec![1., 2., 3., 4.]);
        let b = t(&[5., 6., 7., 8.], &[2, 2]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let s = t(&[2.5, 2.5, 2.5], &[3]).softmax(0).unwrap().to_vec();
        s.iter()
            .for_each(|v| assert!((v - 1.0 / 3.0).abs() < 1e-15));
        let s = t(&[0.0, 2f64.ln()], &[2]).softmax(0).unwrap().to_vec();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-15 && (s[1] - 2.0 / 3.0).abs() < 1e-15);
        let x = t(&[0.3, -1.2, 4.0, 0.0], &[2, 2]);
        let a = x.softmax(1).unwrap().to_vec();
        let b = x.add_scalar(5.0).softmax(1).unwrap().to_vec();
        a.iter()
            .zip(&b)
            .for_each(|(a, b)| assert!((a - b).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_cases() {
        let g = t(&[1., 1.], &[2]);
        let z = t(&[0., 0.], &[2]);
        let y = t(&[1., 3.], &[1, 2])
            .layer_norm(&g, &z, 1e-12)
            .unwrap()
            .to_vec();
        assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);
        let g3 = t(&[1., 1., 1.], &[3]);
        let z3 = t(&[0., 0., 0.], &[3]);
        let y = t(&[4., 4., 4.], &[1, 3])
            .layer_norm(&g3, &z3, 1e-5)
            .unwrap()
            .to_vec();
        assert_eq!(y, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_delta_and_constant() {
        let x = t(&(0..12).map(f64::from).collect::<Vec<_>>(), &[1, 3, 4]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let y = x.conv2d(&t(&k, &[1, 1, 3, 3]), None).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        let c = t(&[2.0; 16], &[1, 4, 4]);
        let y = c.conv2d(&t(&[1.0; 9], &[1, 1, 3, 3]), None).unwrap();
        assert_eq!(y.at_3(0, 1, 1), 18.0);
        assert_eq!(y.at_3(0, 2, 2), 18.0);
        assert_eq!(y.at_3(0, 0, 0), 8.0);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[2, 3, 3]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(x.conv2d(&k, None).is_err());
    }

    #[test]
    fn backward_square_and_disconnected() {
        let x = Tensor::param(vec![1.0, -2.0, 3.5], &[3]).unwrap();
        let unused = Tensor::param(vec![1.0, 1.0], &[2]).unwrap();
        unused.zero_grad();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 7.0]);
        assert_eq!(unused.grad_or_zeros(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(x.scale(2.0).backward().is_err());
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let y = crate::tensor::no_grad(|| x.scale(3.0));
        assert!(!y.requires_grad());
        assert!(x.scale(3.0).requires_grad());
    }

    impl Tensor {
        fn at_3(&self, c: usize, y: usize, x: usize) -> f64 {
            let s = self.shape();
            self.data()[(c * s[1] + y) * s[2] + x]
        }
    }
}
