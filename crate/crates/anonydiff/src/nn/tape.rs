use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Tensor,
    needs_grad: bool,
    back: Option<BackFn>,
}

/// Gradient accumulator passed to backward closures.
pub struct GradSink<'a> {
    grads: &'a mut Vec<Option<Tensor>>,
    needs: &'a [bool],
}

impl GradSink<'_> {
    pub fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    pub fn accumulate(&mut self, v: Var, g: Tensor) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

/// Gradients keyed by tape node, returned by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Dynamic computation graph. Ops append nodes; `backward` walks them in
/// reverse. With `grad_enabled == false` the tape records values only, which
/// is the inference fast path.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    loss_terms: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(512),
            grad_enabled: true,
            loss_terms: 0,
        }
    }

    pub fn inference() -> Self {
        Tape {
            nodes: Vec::with_capacity(512),
            grad_enabled: false,
            loss_terms: 0,
        }
    }

    /// Number of loss terms registered on this tape (see `mse_loss`).
    pub fn loss_term_count(&self) -> usize {
        self.loss_terms
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, parents: &[Var], back: Option<BackFn>) -> Var {
        let needs_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let back = if needs_grad { back } else { None };
        self.nodes.push(Node {
            value,
            needs_grad,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs = self.grad_enabled;
        self.nodes.push(Node {
            value,
            needs_grad: needs,
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: false,
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        assert!(self.grad_enabled, "backward on an inference tape");
        let needs: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[i].back {
                let g = grads[i].clone().unwrap();
                let mut sink = GradSink {
                    grads: &mut grads,
                    needs: &needs,
                };
                back(&g, &mut sink);
            }
        }
        Grads { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(
            out,
            &[a, b],
            Some(Box::new(move |g, sink| {
                if sink.needs(a) {
                    sink.accumulate(a, g.clone());
                }
                if sink.needs(b) {
                    sink.accumulate(b, g.clone());
                }
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(
            out,
            &[a, b],
            Some(Box::new(move |g, sink| {
                if sink.needs(a) {
                    sink.accumulate(a, g.clone());
                }
                if sink.needs(b) {
                    sink.accumulate(b, g.map(|v| -v));
                }
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data);
        let (ca, cb) = (va.clone(), vb.clone());
        self.push(
            out,
            &[a, b],
            Some(Box::new(move |g, sink| {
                if sink.needs(a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(cb.data().iter())
                        .map(|(x, y)| x * y)
                        .collect();
                    sink.accumulate(a, Tensor::from_vec(g.shape(), d));
                }
                if sink.needs(b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(ca.data().iter())
                        .map(|(x, y)| x * y)
                        .collect();
                    sink.accumulate(b, Tensor::from_vec(g.shape(), d));
                }
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| c * v);
        self.push(
            out,
            &[a],
            Some(Box::new(move |g, sink| {
                if sink.needs(a) {
                    sink.accumulate(a, g.map(|v| c * v));
                }
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let out = va.map(|x| x / (1.0 + (-x).exp()));
        self.push(
            out,
            &[a],
            Some(Box::new(move |g, sink| {
                if sink.needs(a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(va.data().iter())
                        .map(|(go, &x)| {
                            let s = 1.0 / (1.0 + (-x).exp());
                            go * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    sink.accumulate(a, Tensor::from_vec(g.shape(), d));
                }
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).reshaped(shape);
        let orig: Vec<usize> = self.shape(a).to_vec();
        self.push(
            out,
            &[a],
            Some(Box::new(move |g, sink| {
                if sink.needs(a) {
                    sink.accumulate(a, g.reshaped(&orig));
                }
            })),
        )
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 2);
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let src = va.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::from_vec(&[n, m], data);
        self.push(
            out,
            &[a],
            Some(Box::new(move |g, sink| {
                if sink.needs(a) {
                    let gd = g.data();
                    let mut d = vec![0.0; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            d[i * n + j] = gd[j * m + i];
                        }
                    }
                    sink.accumulate(a, Tensor::from_vec(&[m, n], d));
                }
            })),
        )
    }

    /// Concatenate along axis 0 (token rows or channel planes).
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail: Vec<usize> = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], tail.as_slice(), "concat0 tail mismatch");
            rows += v.shape()[0];
            sizes.push((p, v.shape()[0], v.numel()));
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_vec(&shape, data);
        let tail_clone = tail.clone();
        self.push(
            out,
            parts,
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let mut offset = 0;
                for &(p, r, numel) in &sizes {
                    if sink.needs(p) {
                        let mut shape = vec![r];
                        shape.extend_from_slice(&tail_clone);
                        sink.accumulate(
                            p,
                            Tensor::from_vec(&shape, gd[offset..offset + numel].to_vec()),
                        );
                    }
                    offset += numel;
                }
            })),
        )
    }

    /// Slice rows `[r0, r1)` along axis 0.
    pub fn slice0(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        assert!(r0 <= r1 && r1 <= shape[0]);
        let inner: usize = shape[1..].iter().product();
        let data = va.data()[r0 * inner..r1 * inner].to_vec();
        let mut out_shape = vec![r1 - r0];
        out_shape.extend_from_slice(&shape[1..]);
        let out = Tensor::from_vec(&out_shape, data);
        self.push(
            out,
            &[a],
            Some(Box::new(move |g, sink| {
                if sink.needs(a) {
                    let mut full = Tensor::zeros(&shape);
                    full.data_mut()[r0 * inner..r1 * inner].copy_from_slice(g.data());
                    sink.accumulate(a, full);
                }
            })),
        )
    }

    /// Slice columns `[c0, c1)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 2);
        let (t, c) = (va.shape()[0], va.shape()[1]);
        assert!(c0 <= c1 && c1 <= c);
        let w = c1 - c0;
        let src = va.data();
        let mut data = vec![0.0; t * w];
        for i in 0..t {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * c + c0..i * c + c1]);
        }
        let out = Tensor::from_vec(&[t, w], data);
        self.push(
            out,
            &[a],
            Some(Box::new(move |g, sink| {
                if sink.needs(a) {
                    let gd = g.data();
                    let mut full = Tensor::zeros(&[t, c]);
                    let fd = full.data_mut();
                    for i in 0..t {
                        fd[i * c + c0..i * c + c1].copy_from_slice(&gd[i * w..(i + 1) * w]);
                    }
                    sink.accumulate(a, full);
                }
            })),
        )
    }

    /// Concatenate 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let t = self.shape(parts[0])[0];
        let widths: Vec<(Var, usize)> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s.len(), 2);
                assert_eq!(s[0], t);
                (p, s[1])
            })
            .collect();
        let total: usize = widths.iter().map(|(_, w)| w).sum();
        let mut data = vec![0.0; t * total];
        let mut off = 0;
        for &(p, w) in &widths {
            let src = self.value(p).data();
            for i in 0..t {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::from_vec(&[t, total], data);
        self.push(
            out,
            parts,
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let mut off = 0;
                for &(p, w) in &widths {
                    if sink.needs(p) {
                        let mut d = vec![0.0; t * w];
                        for i in 0..t {
                            d[i * w..(i + 1) * w]
                                .copy_from_slice(&gd[i * total + off..i * total + off + w]);
                        }
                        sink.accumulate(p, Tensor::from_vec(&[t, w], d));
                    }
                    off += w;
                }
            })),
        )
    }

    // ---- linear algebra ----

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape().len(), 2);
        assert_eq!(vb.shape().len(), 2);
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, va.data(), vb.data(), &mut out, 0.0);
        let (ca, cb) = (va.clone(), vb.clone());
        self.push(
            Tensor::from_vec(&[m, n], out),
            &[a, b],
            Some(Box::new(move |g, sink| {
                if sink.needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, g.data(), cb.data(), &mut da, 0.0);
                    sink.accumulate(a, Tensor::from_vec(&[m, k], da));
                }
                if sink.needs(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, ca.data(), g.data(), &mut db, 0.0);
                    sink.accumulate(b, Tensor::from_vec(&[k, n], db));
                }
            })),
        )
    }

    /// `a [m,k] x b [n,k]ᵀ -> [m,n]`, optionally scaled.
    pub fn matmul_nt_scaled(&mut self, a: Var, b: Var, scale: f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (n, k2) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul_nt inner dim mismatch");
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, va.data(), vb.data(), &mut out, 0.0);
        if scale != 1.0 {
            for v in &mut out {
                *v *= scale;
            }
        }
        let (ca, cb) = (va.clone(), vb.clone());
        self.push(
            Tensor::from_vec(&[m, n], out),
            &[a, b],
            Some(Box::new(move |g, sink| {
                // y = s·a·bᵀ: da = s·g·b, db = s·gᵀ·a
                if sink.needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(m, n, k, g.data(), cb.data(), &mut da, 0.0);
                    if scale != 1.0 {
                        for v in &mut da {
                            *v *= scale;
                        }
                    }
                    sink.accumulate(a, Tensor::from_vec(&[m, k], da));
                }
                if sink.needs(b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(n, m, k, g.data(), ca.data(), &mut db, 0.0);
                    if scale != 1.0 {
                        for v in &mut db {
                            *v *= scale;
                        }
                    }
                    sink.accumulate(b, Tensor::from_vec(&[n, k], db));
                }
            })),
        )
    }

    /// Softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape().len(), 2);
        let (t, l) = (va.shape()[0], va.shape()[1]);
        let src = va.data();
        let mut data = vec![0.0; t * l];
        for i in 0..t {
            let row = &src[i * l..(i + 1) * l];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for j in 0..l {
                let e = (row[j] - m).exp();
                data[i * l + j] = e;
                sum += e;
            }
            for j in 0..l {
                data[i * l + j] /= sum;
            }
        }
        let out = Tensor::from_vec(&[t, l], data);
        let y = out.clone();
        self.push(
            out,
            &[a],
            Some(Box::new(move |g, sink| {
                if sink.needs(a) {
                    let gd = g.data();
                    let yd = y.data();
                    let mut d = vec![0.0; t * l];
                    for i in 0..t {
                        let (gr, yr) = (&gd[i * l..(i + 1) * l], &yd[i * l..(i + 1) * l]);
                        let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..l {
                            d[i * l + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    sink.accumulate(a, Tensor::from_vec(&[t, l], d));
                }
            })),
        )
    }

    /// Add a length-C bias to every row of `[T,C]`.
    pub fn row_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let (t, c) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(vb.numel(), c, "row_bias width mismatch");
        let mut out = vx.clone();
        {
            let d = out.data_mut();
            let bd = vb.data();
            for i in 0..t {
                for j in 0..c {
                    d[i * c + j] += bd[j];
                }
            }
        }
        self.push(
            out,
            &[x, b],
            Some(Box::new(move |g, sink| {
                if sink.needs(x) {
                    sink.accumulate(x, g.clone());
                }
                if sink.needs(b) {
                    let gd = g.data();
                    let mut db = vec![0.0; c];
                    for i in 0..t {
                        for j in 0..c {
                            db[j] += gd[i * c + j];
                        }
                    }
                    sink.accumulate(b, Tensor::from_vec(&[c], db));
                }
            })),
        )
    }

    /// Add a length-C vector to every spatial position of `[C,H,W]`.
    pub fn chan_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let sh = vx.shape().to_vec();
        assert_eq!(sh.len(), 3);
        let (c, hw) = (sh[0], sh[1] * sh[2]);
        assert_eq!(vb.numel(), c, "chan_bias width mismatch");
        let mut out = vx.clone();
        {
            let d = out.data_mut();
            let bd = vb.data();
            for ch in 0..c {
                for i in 0..hw {
                    d[ch * hw + i] += bd[ch];
                }
            }
        }
        self.push(
            out,
            &[x, b],
            Some(Box::new(move |g, sink| {
                if sink.needs(x) {
                    sink.accumulate(x, g.clone());
                }
                if sink.needs(b) {
                    let gd = g.data();
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        db[ch] = gd[ch * hw..(ch + 1) * hw].iter().sum();
                    }
                    sink.accumulate(b, Tensor::from_vec(&[c], db));
                }
            })),
        )
    }

    // ---- conv / resampling ----

    /// 3x3 (or any kh=kw) convolution over `[C,H,W]` with weight
    /// `[C_out, C_in, kh, kw]` and bias `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let xs = vx.shape().to_vec();
        let ws = vw.shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d expects [C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight [Cout,Cin,kh,kw]");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        let (c_in, h, w_) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        assert_eq!(vb.numel(), c_out);
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w_ + 2 * pad - kw) / stride + 1;
        let mut cols = vec![0.0; c_in * kh * kw * out_h * out_w];
        im2col(vx.data(), c_in, h, w_, kh, kw, stride, pad, &mut cols);
        let mut y = vec![0.0; c_out * out_h * out_w];
        gemm_nn(c_out, c_in * kh * kw, out_h * out_w, vw.data(), &cols, &mut y, 0.0);
        let bd = vb.data();
        for co in 0..c_out {
            let plane = &mut y[co * out_h * out_w..(co + 1) * out_h * out_w];
            let bias = bd[co];
            for v in plane {
                *v += bias;
            }
        }
        let (cx, cw) = (vx.clone(), vw.clone());
        self.push(
            Tensor::from_vec(&[c_out, out_h, out_w], y),
            &[x, w, b],
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let khw = kh * kw;
                // recompute the unfold; cheaper than holding it on the tape
                let mut cols = vec![0.0; c_in * khw * out_h * out_w];
                if sink.needs(w) {
                    im2col(cx.data(), c_in, h, w_, kh, kw, stride, pad, &mut cols);
                    let mut dw = vec![0.0; c_out * c_in * khw];
                    gemm_nt(c_out, out_h * out_w, c_in * khw, gd, &cols, &mut dw, 0.0);
                    sink.accumulate(w, Tensor::from_vec(&[c_out, c_in, kh, kw], dw));
                }
                if sink.needs(b) {
                    let mut db = vec![0.0; c_out];
                    for co in 0..c_out {
                        db[co] = gd[co * out_h * out_w..(co + 1) * out_h * out_w].iter().sum();
                    }
                    sink.accumulate(b, Tensor::from_vec(&[c_out], db));
                }
                if sink.needs(x) {
                    let mut dcols = vec![0.0; c_in * khw * out_h * out_w];
                    gemm_tn(c_in * khw, c_out, out_h * out_w, cw.data(), gd, &mut dcols, 0.0);
                    let mut dx = vec![0.0; c_in * h * w_];
                    col2im(&dcols, c_in, h, w_, kh, kw, stride, pad, &mut dx);
                    sink.accumulate(x, Tensor::from_vec(&[c_in, h, w_], dx));
                }
            })),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[C,H,W]`.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let src = vx.data();
        let mut data = vec![0.0; c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..oh {
                for xq in 0..ow {
                    data[ch * oh * ow + y * ow + xq] = src[ch * h * w + (y / 2) * w + xq / 2];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[c, oh, ow], data),
            &[x],
            Some(Box::new(move |g, sink| {
                if sink.needs(x) {
                    let gd = g.data();
                    let mut d = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..oh {
                            for xq in 0..ow {
                                d[ch * h * w + (y / 2) * w + xq / 2] +=
                                    gd[ch * oh * ow + y * ow + xq];
                            }
                        }
                    }
                    sink.accumulate(x, Tensor::from_vec(&[c, h, w], d));
                }
            })),
        )
    }

    /// 2x2 average pooling of `[C,H,W]` (H, W even).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0);
        let (oh, ow) = (h / 2, w / 2);
        let src = vx.data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xq in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xq;
                    data[ch * oh * ow + y * ow + xq] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        self.push(
            Tensor::from_vec(&[c, oh, ow], data),
            &[x],
            Some(Box::new(move |g, sink| {
                if sink.needs(x) {
                    let gd = g.data();
                    let mut d = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..oh {
                            for xq in 0..ow {
                                let v = 0.25 * gd[ch * oh * ow + y * ow + xq];
                                let base = ch * h * w + 2 * y * w + 2 * xq;
                                d[base] += v;
                                d[base + 1] += v;
                                d[base + w] += v;
                                d[base + w + 1] += v;
                            }
                        }
                    }
                    sink.accumulate(x, Tensor::from_vec(&[c, h, w], d));
                }
            })),
        )
    }

    /// Pixel-shuffle `[C·r², h, w] -> [C, h·r, w·r]`.
    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Var {
        let vx = self.value(x);
        let (cin, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(cin % (r * r), 0, "depth_to_space channel count");
        let c = cin / (r * r);
        let (oh, ow) = (h * r, w * r);
        let src = vx.data();
        let mut data = vec![0.0; cin * h * w];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sc = ch * r * r + (oy % r) * r + (ox % r);
                    data[ch * oh * ow + oy * ow + ox] = src[sc * h * w + (oy / r) * w + ox / r];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[c, oh, ow], data),
            &[x],
            Some(Box::new(move |g, sink| {
                if sink.needs(x) {
                    let gd = g.data();
                    let mut d = vec![0.0; cin * h * w];
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let sc = ch * r * r + (oy % r) * r + (ox % r);
                                d[sc * h * w + (oy / r) * w + ox / r] +=
                                    gd[ch * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                    sink.accumulate(x, Tensor::from_vec(&[cin, h, w], d));
                }
            })),
        )
    }

    // ---- normalization ----

    /// Group normalization over `[C,H,W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(c % groups, 0, "group_norm channels not divisible");
        assert_eq!(vg.numel(), c);
        assert_eq!(vb.numel(), c);
        let cpg = c / groups;
        let m = cpg * h * w;
        let src = vx.data();
        let mut xhat = vec![0.0; c * h * w];
        let mut inv_std = vec![0.0; groups];
        for g in 0..groups {
            let seg = &src[g * m..(g + 1) * m];
            let mean: f64 = seg.iter().sum::<f64>() / m as f64;
            let var: f64 = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[g] = is;
            for (o, &v) in xhat[g * m..(g + 1) * m].iter_mut().zip(seg.iter()) {
                *o = (v - mean) * is;
            }
        }
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        let (gd_, bd_) = (vg.data(), vb.data());
        for ch in 0..c {
            let (ga, be) = (gd_[ch], bd_[ch]);
            for i in 0..hw {
                data[ch * hw + i] = ga * xhat[ch * hw + i] + be;
            }
        }
        let xhat_t = Tensor::from_vec(&[c, h, w], xhat);
        let cg = vg.clone();
        self.push(
            Tensor::from_vec(&[c, h, w], data),
            &[x, gamma, beta],
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let xh = xhat_t.data();
                if sink.needs(gamma) {
                    let mut dg = vec![0.0; c];
                    for ch in 0..c {
                        dg[ch] = gd[ch * hw..(ch + 1) * hw]
                            .iter()
                            .zip(xh[ch * hw..(ch + 1) * hw].iter())
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                    sink.accumulate(gamma, Tensor::from_vec(&[c], dg));
                }
                if sink.needs(beta) {
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        db[ch] = gd[ch * hw..(ch + 1) * hw].iter().sum();
                    }
                    sink.accumulate(beta, Tensor::from_vec(&[c], db));
                }
                if sink.needs(x) {
                    let gm = cg.data();
                    let mut dxh = vec![0.0; c * hw];
                    for ch in 0..c {
                        for i in 0..hw {
                            dxh[ch * hw + i] = gd[ch * hw + i] * gm[ch];
                        }
                    }
                    let mut dx = vec![0.0; c * hw];
                    for grp in 0..groups {
                        let seg = &dxh[grp * m..(grp + 1) * m];
                        let xs = &xh[grp * m..(grp + 1) * m];
                        let mean_d: f64 = seg.iter().sum::<f64>() / m as f64;
                        let mean_dx: f64 =
                            seg.iter().zip(xs.iter()).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        let is = inv_std[grp];
                        for i in 0..m {
                            dx[grp * m + i] = is * (seg[i] - mean_d - xs[i] * mean_dx);
                        }
                    }
                    sink.accumulate(x, Tensor::from_vec(&[c, h, w], dx));
                }
            })),
        )
    }

    /// Layer normalization of each row of `[T,C]` with affine `[C]`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (t, c) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(vg.numel(), c);
        assert_eq!(vb.numel(), c);
        let src = vx.data();
        let mut xhat = vec![0.0; t * c];
        let mut inv_std = vec![0.0; t];
        for i in 0..t {
            let row = &src[i * c..(i + 1) * c];
            let mean: f64 = row.iter().sum::<f64>() / c as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let mut data = vec![0.0; t * c];
        let (gd_, bd_) = (vg.data(), vb.data());
        for i in 0..t {
            for j in 0..c {
                data[i * c + j] = gd_[j] * xhat[i * c + j] + bd_[j];
            }
        }
        let xhat_t = Tensor::from_vec(&[t, c], xhat);
        let cg = vg.clone();
        self.push(
            Tensor::from_vec(&[t, c], data),
            &[x, gamma, beta],
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let xh = xhat_t.data();
                if sink.needs(gamma) {
                    let mut dg = vec![0.0; c];
                    for i in 0..t {
                        for j in 0..c {
                            dg[j] += gd[i * c + j] * xh[i * c + j];
                        }
                    }
                    sink.accumulate(gamma, Tensor::from_vec(&[c], dg));
                }
                if sink.needs(beta) {
                    let mut db = vec![0.0; c];
                    for i in 0..t {
                        for j in 0..c {
                            db[j] += gd[i * c + j];
                        }
                    }
                    sink.accumulate(beta, Tensor::from_vec(&[c], db));
                }
                if sink.needs(x) {
                    let gm = cg.data();
                    let mut dx = vec![0.0; t * c];
                    for i in 0..t {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = gd[i * c + j] * gm[j];
                            mean_d += d;
                            mean_dx += d * xh[i * c + j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            let d = gd[i * c + j] * gm[j];
                            dx[i * c + j] = inv_std[i] * (d - mean_d - xh[i * c + j] * mean_dx);
                        }
                    }
                    sink.accumulate(x, Tensor::from_vec(&[t, c], dx));
                }
            })),
        )
    }

    // ---- losses ----

    /// Mean squared error; registers itself as a loss term on the tape.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let n = va.numel() as f64;
        let loss = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.loss_terms += 1;
        let (ca, cb) = (va.clone(), vb.clone());
        self.push(
            Tensor::scalar(loss),
            &[a, b],
            Some(Box::new(move |g, sink| {
                let g0 = g.item();
                let scale = 2.0 * g0 / n;
                if sink.needs(a) {
                    let d = ca
                        .data()
                        .iter()
                        .zip(cb.data().iter())
                        .map(|(x, y)| scale * (x - y))
                        .collect();
                    sink.accumulate(a, Tensor::from_vec(ca.shape(), d));
                }
                if sink.needs(b) {
                    let d = ca
                        .data()
                        .iter()
                        .zip(cb.data().iter())
                        .map(|(x, y)| -scale * (x - y))
                        .collect();
                    sink.accumulate(b, Tensor::from_vec(cb.shape(), d));
                }
            })),
        )
    }

    /// Cross-entropy of a logit vector against a class index.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Var {
        let vl = self.value(logits);
        let k = vl.numel();
        assert!(target < k);
        let ld = vl.data();
        let m = ld.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + ld.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - ld[target];
        let shape = vl.shape().to_vec();
        let probs: Vec<f64> = ld.iter().map(|&v| (v - lse).exp()).collect();
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Some(Box::new(move |g, sink| {
                if sink.needs(logits) {
                    let g0 = g.item();
                    let mut d: Vec<f64> = probs.iter().map(|&p| g0 * p).collect();
                    d[target] -= g0;
                    sink.accumulate(logits, Tensor::from_vec(&shape, d));
                }
            })),
        )
    }

    /// Weighted sum of all elements against a fixed probe vector (test hook
    /// for scalarizing a tensor output).
    pub fn dot_probe(&mut self, a: Var, probe: &Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.numel(), probe.numel());
        let s: f64 = va
            .data()
            .iter()
            .zip(probe.data().iter())
            .map(|(x, y)| x * y)
            .sum();
        let p = probe.clone();
        let shape = va.shape().to_vec();
        self.push(
            Tensor::scalar(s),
            &[a],
            Some(Box::new(move |g, sink| {
                if sink.needs(a) {
                    let g0 = g.item();
                    sink.accumulate(a, Tensor::from_vec(&shape, p.data().iter().map(|v| g0 * v).collect()));
                }
            })),
        )
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
