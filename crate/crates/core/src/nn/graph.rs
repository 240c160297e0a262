//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological order.

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    SegmentMax { x: Var, argmax: Vec<usize> },
    Scatter { x: Var, cells: Vec<usize> },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Option<Vec<f64>> },
    MaxN { xs: Vec<Var>, arg: Vec<u32> },
    Concat { a: Var, b: Var },
    Grl { x: Var, gamma: f64 },
    MulSpatial { x: Var, m: Var },
    Mul { a: Var, b: Var },
    MulConst { x: Var, c: Vec<f64> },
    MeanSpatial(Var),
    Reshape(Var),
    Add { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    BceLogits { x: Var, targets: Vec<f64> },
    WeightedCe { x: Var, label: usize, weights: Vec<f64> },
    Focal { x: Var, labels: Vec<i8>, alpha: f64, gamma: f64 },
    SmoothL1 { x: Var, targets: Vec<f64>, weights: Vec<f64>, beta: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))`, stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    /// `x [n, i] * w^T [i, o] + b [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(shape_err(format!("linear: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            out[r * o..(r + 1) * o].copy_from_slice(self.value(b).data());
        }
        gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut out);
        let t = Tensor::from_vec(&[n, o], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(t, Op::Relu(x))
    }

    /// Column-wise max over consecutive row segments `offsets[s]..offsets[s+1]` of `x [n, c]`.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || offsets.is_empty() || *offsets.last().unwrap() != xs[0] {
            return Err(shape_err(format!("segment_max: x {xs:?}, offsets end {:?}", offsets.last())));
        }
        let c = xs[1];
        let s = offsets.len() - 1;
        let xv = self.value(x).data();
        let mut out = vec![0.0; s * c];
        let mut argmax = vec![0usize; s * c];
        for seg in 0..s {
            let (lo, hi) = (offsets[seg], offsets[seg + 1]);
            if hi <= lo {
                return Err(shape_err(format!("segment_max: empty segment {seg}")));
            }
            for ch in 0..c {
                let mut best = lo;
                for r in lo + 1..hi {
                    if xv[r * c + ch] > xv[best * c + ch] {
                        best = r;
                    }
                }
                out[seg * c + ch] = xv[best * c + ch];
                argmax[seg * c + ch] = best;
            }
        }
        let t = Tensor::from_vec(&[s, c], out)?;
        Ok(self.push(t, Op::SegmentMax { x, argmax }))
    }

    /// Places row `s` of `x [n, c]` at flat cell `cells[s]` of a `[c, h, w]` canvas of zeros.
    pub fn scatter(&mut self, x: Var, cells: &[usize], h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != cells.len() {
            return Err(shape_err(format!("scatter: x {xs:?}, {} cells", cells.len())));
        }
        let c = xs[1];
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        let xv = self.value(x).data();
        for (s, &cell) in cells.iter().enumerate() {
            if cell >= hw {
                return Err(shape_err(format!("scatter: cell {cell} outside {h}x{w}")));
            }
            for ch in 0..c {
                out[ch * hw + cell] = xv[s * c + ch];
            }
        }
        let t = Tensor::from_vec(&[c, h, w], out)?;
        Ok(self.push(t, Op::Scatter { x, cells: cells.to_vec() }))
    }

    /// 2D convolution of `x [cin, h, w]` with `w [cout, cin, k, k]` and bias `b [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || self.shape(b) != [ws[0]] {
            return Err(shape_err(format!("conv2d: x {xs:?}, w {ws:?}")));
        }
        let k = ws[2];
        if stride == 0 || xs[1] + 2 * pad < k || xs[2] + 2 * pad < k {
            return Err(shape_err(format!("conv2d: kernel {k} too large for {xs:?}")));
        }
        let geom = ConvGeom {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            cout: ws[0],
            k,
            stride,
            pad,
            ho: (xs[1] + 2 * pad - k) / stride + 1,
            wo: (xs[2] + 2 * pad - k) / stride + 1,
        };
        let p = geom.ho * geom.wo;
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(im2col(self.value(x).data(), &geom))
        };
        let mut out = vec![0.0; geom.cout * p];
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.fill(self.value(b).data()[co]);
        }
        let src = cols.as_deref().unwrap_or(self.value(x).data());
        gemm(geom.cout, geom.patch(), p, self.value(w).data(), false, src, false, 1.0, &mut out);
        let t = Tensor::from_vec(&[geom.cout, geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom, cols }))
    }

    /// Element-wise maximum across same-shaped inputs; ties resolve to the earliest input.
    pub fn max_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| shape_err("max_n: no inputs".into()))?;
        let shape = self.shape(first).to_vec();
        for &v in xs {
            if self.shape(v) != shape.as_slice() {
                return Err(shape_err(format!(
                    "max_n: shape {:?} differs from {shape:?}",
                    self.shape(v)
                )));
            }
        }
        let mut out = self.value(first).clone();
        let mut arg = vec![0u32; out.len()];
        for (j, &v) in xs.iter().enumerate().skip(1) {
            let vals = self.value(v).data();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                if vals[i] > *o {
                    *o = vals[i];
                    arg[i] = j as u32;
                }
            }
        }
        Ok(self.push(out, Op::MaxN { xs: xs.to_vec(), arg }))
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(shape_err(format!("concat: {sa:?} vs {sb:?}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::from_vec(&[sa[0] + sb[0], sa[1], sa[2]], data)?;
        Ok(self.push(t, Op::Concat { a, b }))
    }

    /// Identity on the forward pass; multiplies the incoming gradient by `gamma`.
    pub fn grl(&mut self, x: Var, gamma: f64) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Grl { x, gamma })
    }

    /// `x [c, h, w] * m [h, w]` broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m).to_vec();
        if xs.len() != 3 || ms != xs[1..] {
            return Err(shape_err(format!("mul_spatial: x {xs:?}, map {ms:?}")));
        }
        let hw = xs[1] * xs[2];
        let mv = self.value(m).data().to_vec();
        let mut t = self.value(x).clone();
        for plane in t.data_mut().chunks_mut(hw) {
            for (v, s) in plane.iter_mut().zip(&mv) {
                *v *= s;
            }
        }
        Ok(self.push(t, Op::MulSpatial { x, m }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("mul: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut t = self.value(a).clone();
        for (v, s) in t.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= s;
        }
        Ok(self.push(t, Op::Mul { a, b }))
    }

    /// Multiplies by a constant of the same length (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if self.value(x).len() != c.len() {
            return Err(shape_err("mul_const: length mismatch".into()));
        }
        let mut t = self.value(x).clone();
        for (v, s) in t.data_mut().iter_mut().zip(&c) {
            *v *= s;
        }
        Ok(self.push(t, Op::MulConst { x, c }))
    }

    /// Per-channel average over all cells: `[c, h, w] -> [c]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err(format!("mean_spatial: {xs:?}")));
        }
        let hw = xs[1] * xs[2];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::from_vec(&[xs[0]], out)?;
        Ok(self.push(t, Op::MeanSpatial(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut t = self.value(x).clone();
        t.scale(s);
        self.push(t, Op::Scale { x, s })
    }

    /// Mean binary cross-entropy of logits against targets in `{0, 1}`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != targets.len() || xv.is_empty() {
            return Err(shape_err("bce_with_logits: length mismatch".into()));
        }
        let n = xv.len() as f64;
        let total: f64 = xv
            .iter()
            .zip(targets)
            .map(|(&l, &y)| -(y * log_sigmoid(l) + (1.0 - y) * log_sigmoid(-l)))
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceLogits { x, targets: targets.to_vec() },
        ))
    }

    /// `sum_u weights[u] * CE(softmax(x[:, u]), label)` for `x [k, h, w]`.
    pub fn weighted_cell_ce(&mut self, x: Var, label: usize, weights: &[f64]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || label >= xs[0] || weights.len() != xs[1] * xs[2] {
            return Err(shape_err(format!("weighted_cell_ce: x {xs:?}, label {label}")));
        }
        let (k, hw) = (xs[0], xs[1] * xs[2]);
        let xv = self.value(x).data();
        let mut total = 0.0;
        for (u, &wgt) in weights.iter().enumerate() {
            if wgt == 0.0 {
                continue;
            }
            let mx = (0..k).map(|c| xv[c * hw + u]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..k).map(|c| (xv[c * hw + u] - mx).exp()).sum::<f64>().ln();
            total += wgt * (lse - xv[label * hw + u]);
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedCe { x, label, weights: weights.to_vec() },
        ))
    }

    /// Summed sigmoid focal loss; `labels` are 1 (positive), 0 (negative) or -1 (ignored).
    pub fn focal_loss(&mut self, x: Var, labels: &[i8], alpha: f64, gamma: f64) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != labels.len() {
            return Err(shape_err("focal_loss: length mismatch".into()));
        }
        let mut total = 0.0;
        for (&l, &y) in xv.iter().zip(labels) {
            total += match y {
                1 => -alpha * (1.0 - sigmoid(l)).powf(gamma) * log_sigmoid(l),
                0 => -(1.0 - alpha) * sigmoid(l).powf(gamma) * log_sigmoid(-l),
                _ => 0.0,
            };
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::Focal { x, labels: labels.to_vec(), alpha, gamma },
        ))
    }

    /// `sum_i weights[i] * smooth_l1(x[i] - targets[i])`.
    pub fn smooth_l1(&mut self, x: Var, targets: &[f64], weights: &[f64], beta: f64) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != targets.len() || xv.len() != weights.len() {
            return Err(shape_err("smooth_l1: length mismatch".into()));
        }
        let mut total = 0.0;
        for i in 0..xv.len() {
            if weights[i] != 0.0 {
                total += weights[i] * smooth_l1_value(xv[i] - targets[i], beta);
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::SmoothL1 {
                x,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                beta,
            },
        ))
    }

    /// Backpropagates from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (n, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                let mut dx = vec![0.0; n * inp];
                gemm(n, o, inp, gd, false, self.value(*w).data(), false, 0.0, &mut dx);
                let mut dw = vec![0.0; o * inp];
                gemm(o, n, inp, gd, true, self.value(*x).data(), false, 0.0, &mut dw);
                let mut db = vec![0.0; o];
                for r in 0..n {
                    for c in 0..o {
                        db[c] += gd[r * o + c];
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&[n, inp], dx)?);
                accumulate(grads, *w, Tensor::from_vec(&[o, inp], dw)?);
                accumulate(grads, *b, Tensor::from_vec(&[o], db)?);
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                for (v, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= 0.0 {
                        *v = 0.0;
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::SegmentMax { x, argmax } => {
                let c = self.shape(*x)[1];
                let mut d = Tensor::zeros(self.shape(*x));
                let dd = d.data_mut();
                for (j, &row) in argmax.iter().enumerate() {
                    dd[row * c + j % c] += gd[j];
                }
                accumulate(grads, *x, d);
            }
            Op::Scatter { x, cells } => {
                let c = self.shape(*x)[1];
                let hw = node.value.shape()[1] * node.value.shape()[2];
                let mut d = Tensor::zeros(self.shape(*x));
                let dd = d.data_mut();
                for (s, &cell) in cells.iter().enumerate() {
                    for ch in 0..c {
                        dd[s * c + ch] = gd[ch * hw + cell];
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Conv { x, w, b, geom, cols } => {
                let p = geom.ho * geom.wo;
                let kk = geom.patch();
                let src = cols.as_deref().unwrap_or(self.value(*x).data());
                let mut dw = vec![0.0; geom.cout * kk];
                gemm(geom.cout, p, kk, gd, false, src, true, 0.0, &mut dw);
                let db: Vec<f64> = gd.chunks(p).map(|r| r.iter().sum()).collect();
                let mut dcols = vec![0.0; kk * p];
                gemm(kk, geom.cout, p, self.value(*w).data(), true, gd, false, 0.0, &mut dcols);
                let dx = if geom.is_pointwise() {
                    dcols
                } else {
                    col2im(&dcols, geom)
                };
                accumulate(grads, *x, Tensor::from_vec(&[geom.cin, geom.h, geom.w], dx)?);
                accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw)?);
                accumulate(grads, *b, Tensor::from_vec(&[geom.cout], db)?);
            }
            Op::MaxN { xs, arg } => {
                for (j, &v) in xs.iter().enumerate() {
                    let mut d = Tensor::zeros(self.shape(v));
                    let mut any = false;
                    for (e, (dv, &a)) in d.data_mut().iter_mut().zip(arg).enumerate() {
                        if a as usize == j {
                            *dv = gd[e];
                            any = true;
                        }
                    }
                    if any {
                        accumulate(grads, v, d);
                    }
                }
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).len();
                let da = Tensor::from_vec(self.shape(*a), gd[..na].to_vec())?;
                let db = Tensor::from_vec(self.shape(*b), gd[na..].to_vec())?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Grl { x, gamma } => {
                let mut d = g.clone();
                d.scale(*gamma);
                accumulate(grads, *x, d);
            }
            Op::MulSpatial { x, m } => {
                let xs = self.shape(*x);
                let hw = xs[1] * xs[2];
                let mv = self.value(*m).data();
                let xv = self.value(*x).data();
                let mut dx = g.clone();
                let mut dm = vec![0.0; hw];
                for (ch, plane) in dx.data_mut().chunks_mut(hw).enumerate() {
                    for u in 0..hw {
                        dm[u] += plane[u] * xv[ch * hw + u];
                        plane[u] *= mv[u];
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *m, Tensor::from_vec(self.shape(*m), dm)?);
            }
            Op::Mul { a, b } => {
                let mut da = g.clone();
                let mut db = g.clone();
                for (v, s) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *v *= s;
                }
                for (v, s) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *v *= s;
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MulConst { x, c } => {
                let mut d = g.clone();
                for (v, s) in d.data_mut().iter_mut().zip(c) {
                    *v *= s;
                }
                accumulate(grads, *x, d);
            }
            Op::MeanSpatial(x) => {
                let xs = self.shape(*x);
                let hw = xs[1] * xs[2];
                let mut d = Tensor::zeros(xs);
                for (ch, plane) in d.data_mut().chunks_mut(hw).enumerate() {
                    plane.fill(gd[ch] / hw as f64);
                }
                accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                let d = g.clone().reshaped(self.shape(*x))?;
                accumulate(grads, *x, d);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.clone().reshaped(self.shape(*a))?);
                accumulate(grads, *b, g.clone().reshaped(self.shape(*b))?);
            }
            Op::Scale { x, s } => {
                let mut d = g.clone();
                d.scale(*s);
                accumulate(grads, *x, d);
            }
            Op::BceLogits { x, targets } => {
                let up = gd[0] / targets.len() as f64;
                let d: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&l, &y)| up * (sigmoid(l) - y))
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(self.shape(*x), d)?);
            }
            Op::WeightedCe { x, label, weights } => {
                let xs = self.shape(*x);
                let (k, hw) = (xs[0], xs[1] * xs[2]);
                let xv = self.value(*x).data();
                let mut d = vec![0.0; k * hw];
                for (u, &wgt) in weights.iter().enumerate() {
                    if wgt == 0.0 {
                        continue;
                    }
                    let mx = (0..k).map(|c| xv[c * hw + u]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..k).map(|c| (xv[c * hw + u] - mx).exp()).sum();
                    for c in 0..k {
                        let p = (xv[c * hw + u] - mx).exp() / z;
                        let t = if c == *label { 1.0 } else { 0.0 };
                        d[c * hw + u] = gd[0] * wgt * (p - t);
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xs, d)?);
            }
            Op::Focal { x, labels, alpha, gamma } => {
                let d: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&l, &y)| {
                        let p = sigmoid(l);
                        gd[0]
                            * match y {
                                1 => alpha * (1.0 - p).powf(*gamma) * (gamma * p * log_sigmoid(l) - (1.0 - p)),
                                0 => (1.0 - alpha) * p.powf(*gamma) * (p - gamma * (1.0 - p) * log_sigmoid(-l)),
                                _ => 0.0,
                            }
                    })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(self.shape(*x), d)?);
            }
            Op::SmoothL1 { x, targets, weights, beta } => {
                let d: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        if weights[i] == 0.0 {
                            return 0.0;
                        }
                        let diff = v - targets[i];
                        let s = if diff.abs() < *beta { diff / beta } else { diff.signum() };
                        gd[0] * weights[i] * s
                    })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(self.shape(*x), d)?);
            }
        }
        Ok(())
    }
}

pub fn smooth_l1_value(diff: f64, beta: f64) -> f64 {
    let a = diff.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.ho * g.wo;
    let mut cols = vec![0.0; g.patch() * p];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &x[ci * g.h * g.w + iy as usize * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.ho * g.wo;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = ci * g.h * g.w + iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Gradients of every node reached from the root.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds `scale * dL/dparam` for every parameter node of `graph` into `into`.
    pub fn accumulate_params(&self, graph: &Graph, into: &mut Grads, scale: f64) {
        for (i, node) in graph.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    if scale == 1.0 {
                        into.accumulate(id, g);
                    } else {
                        let mut s = g.clone();
                        s.scale(scale);
                        into.accumulate(id, &s);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(build)/d(input k) against central differences for every input element.
    fn check<F>(inputs: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for e in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, u)| {
                            let mut u = u.clone();
                            if j == k {
                                u.data_mut()[e] += delta;
                            }
                            g.input(u)
                        })
                        .collect();
                    let o = build(&mut g, &vs);
                    g.value(o).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data()[e];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                    "input {k} elem {e}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let inputs = vec![
                rand_tensor(&mut rng, &[2, 5, 6]),
                rand_tensor(&mut rng, &[3, 2, k, k]),
                rand_tensor(&mut rng, &[3]),
                rand_tensor(&mut rng, &[3 * ((5 + 2 * pad - k) / stride + 1) * ((6 + 2 * pad - k) / stride + 1)]),
            ];
            check(inputs, |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
                let n = g.value(y).len();
                let y = g.reshape(y, &[n]).unwrap();
                let z = g.mul(y, v[3]).unwrap();
                let z = g.reshape(z, &[1, 1, n]).unwrap();
                let m = g.mean_spatial(z).unwrap();
                g.reshape(m, &[]).unwrap()
            });
        }
    }

    #[test]
    fn pillar_path_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            rand_tensor(&mut rng, &[7, 3]),
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[4]),
            rand_tensor(&mut rng, &[4, 3, 3]),
        ];
        check(inputs, |g, v| {
            let h = g.linear(v[0], v[1], v[2]).unwrap();
            let h = g.relu(h);
            let s = g.segment_max(h, &[0, 2, 5, 7]).unwrap();
            let bev = g.scatter(s, &[0, 4, 8], 3, 3).unwrap();
            let z = g.mul(bev, v[3]).unwrap();
            let m = g.mean_spatial(z).unwrap();
            let m = g.reshape(m, &[1, 4]).unwrap();
            let t = g.bce_with_logits(m, &[1.0, 0.0, 1.0, 0.0]).unwrap();
            t
        });
    }

    #[test]
    fn fusion_and_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 2, 3]),
            rand_tensor(&mut rng, &[2, 2, 3]),
            rand_tensor(&mut rng, &[2, 3]),
            rand_tensor(&mut rng, &[2, 2, 3]),
        ];
        check(inputs, |g, v| {
            let m = g.max_n(&[v[0], v[1]]).unwrap();
            let s = g.mul_spatial(m, v[2]).unwrap();
            let c = g.concat(s, v[3]).unwrap();
            let ce = g.weighted_cell_ce(c, 1, &[1.0, 0.5, 0.0, 2.0, 0.2, 1.0]).unwrap();
            let f = g.focal_loss(m, &[1, 0, -1, 1, 0, 0, 1, 1, 0, 0, -1, 1], 0.25, 2.0).unwrap();
            let targets: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.5).collect();
            let sl = g.smooth_l1(s, &targets, &[1.0; 12], 1.0).unwrap();
            let a = g.add(ce, f).unwrap();
            let a = g.scale(a, 0.7);
            g.add(a, sl).unwrap()
        });
    }

    #[test]
    fn grl_is_identity_forward_and_scales_backward() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.5]).unwrap());
        let y = g.grl(x, -0.05);
        assert_eq!(g.value(x), g.value(y));
        let y = g.reshape(y, &[1, 1, 3]).unwrap();
        let m = g.mean_spatial(y).unwrap();
        let grads = g.backward(m).unwrap();
        for v in grads.wrt(x).unwrap().data() {
            assert!((v - (-0.05 / 3.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}
