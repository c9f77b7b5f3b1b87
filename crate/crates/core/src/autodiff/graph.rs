//! Reverse-mode differentiation over a closed set of tensor operations.
//!
//! A [`Graph`] records every operation applied during a forward pass. Each
//! node owns its value; [`Graph::backward`] walks the record in reverse and
//! returns a [`Gradients`] table. Only the operations below exist, each with
//! a hand-written adjoint, which is all the radiance field, the patch
//! decomposer and the losses need.

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
        n: usize,
        k: usize,
        m: usize,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Scale {
        x: Var,
        s: f64,
    },
    AddScalar {
        x: Var,
    },
    MulConst {
        x: Var,
        c: Vec<f64>,
    },
    AddConst {
        x: Var,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        w: Vec<f64>,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols {
        a: Var,
        b: Var,
        n: usize,
        p: usize,
        q: usize,
    },
    SliceCols {
        x: Var,
        m: usize,
        start: usize,
        end: usize,
    },
    Reshape {
        x: Var,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        h: usize,
        wd: usize,
        cin: usize,
        cout: usize,
    },
    VolumeRender(Box<VolumeCache>),
    Chromaticity {
        x: Var,
    },
}

/// Forward quantities retained by the volume rendering node.
#[derive(Debug)]
struct VolumeCache {
    sigma: Var,
    rgb: Var,
    rays: usize,
    samples: usize,
    t: Vec<f64>,
    delta: Vec<f64>,
    background: [f64; 3],
    weights: Vec<f64>,
    trans_next: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Epsilon guarding the chromaticity denominator.
pub const CHROMA_EPS: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape), "value/shape mismatch");
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        assert_eq!(numel(shape), data.len(), "constant shape/data mismatch");
        self.push(data, shape.to_vec(), Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked but that is not bound to a store.
    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        assert_eq!(numel(shape), data.len(), "input shape/data mismatch");
        self.push(data, shape.to_vec(), Op::Leaf, true)
    }

    /// Binds a parameter block; its gradient is accumulated back by
    /// [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let block = store
            .block(name)
            .ok_or_else(|| Error::Shape(format!("parameter block `{name}` not found")))?;
        let v = self.push(block.value.clone(), block.shape.clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    /// `x [n,k] · w [k,m] + b [m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 2, "affine input must be rank 2");
        assert_eq!(ws.len(), 2, "affine weight must be rank 2");
        let (n, k, m) = (xs[0], xs[1], ws[1]);
        assert_eq!(ws[0], k, "affine inner dimension mismatch");
        assert_eq!(self.value(b).len(), m, "affine bias mismatch");
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bv);
        }
        axpy_rows(&mut out, xv, wv, n, k, m);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, vec![n, m], Op::Affine { x, w, b, n, k, m }, rg)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| match kind {
                Unary::Relu => v.max(0.0),
                Unary::Sigmoid => sigmoid(v),
                Unary::Softplus => softplus(v),
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::Square => v * v,
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Unary { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Var {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "elementwise operands differ in size"
        );
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, shape, Op::Binary { a, b, kind }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Div)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Scale { x, s }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::AddScalar { x }, rg)
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Var {
        assert_eq!(self.value(x).len(), c.len(), "mul_const size mismatch");
        let out = self.value(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::MulConst { x, c }, rg)
    }

    /// Elementwise sum with a constant array.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Var {
        assert_eq!(self.value(x).len(), c.len(), "add_const size mismatch");
        let out = self.value(x).iter().zip(c).map(|(a, b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::AddConst { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![s], vec![1], Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ wᵢ xᵢ` with constant weights; masks are weights in {0, 1}.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<f64>) -> Var {
        assert_eq!(self.value(x).len(), w.len(), "weighted_sum size mismatch");
        let s = self.value(x).iter().zip(&w).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        self.push(vec![s], vec![1], Op::WeightedSum { x, w }, rg)
    }

    /// Clamp to `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Clamp { x, lo, hi }, rg)
    }

    /// Flat gather; the output has shape `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let out = idx.iter().map(|&i| xv[i]).collect();
        let len = idx.len();
        let rg = self.rg(x);
        self.push(out, vec![len], Op::Gather { x, idx }, rg)
    }

    /// `[n,p] ++ [n,q] -> [n,p+q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[0], sb[0], "concat_cols row mismatch");
        let (n, p, q) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, vec![n, p + q], Op::ConcatCols { a, b, n, p, q }, rg)
    }

    /// Columns `start..end` of a rank-2 node.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2);
        let (n, m) = (s[0], s[1]);
        assert!(start < end && end <= m, "slice_cols range out of bounds");
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&xv[i * m + start..i * m + end]);
        }
        let rg = self.rg(x);
        self.push(out, vec![n, end - start], Op::SliceCols { x, m, start, end }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), self.value(x).len(), "reshape size mismatch");
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape.to_vec(), Op::Reshape { x }, rg)
    }

    /// Same-size 3×3 convolution with zero padding.
    ///
    /// `x` is `[h, w, cin]`, `w` is `[3, 3, cin, cout]`, `b` is `[cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "conv input must be [h, w, c]");
        let (h, wd, cin) = (xs[0], xs[1], xs[2]);
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv kernel must be [3, 3, cin, cout]");
        assert_eq!(&ws[..3], &[3, 3, cin], "conv kernel shape mismatch");
        let cout = ws[3];
        assert_eq!(self.value(b).len(), cout, "conv bias mismatch");
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; h * wd * cout];
        for y in 0..h {
            for xx in 0..wd {
                let o = &mut out[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
                o.copy_from_slice(bv);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let src = &xv[(sy as usize * wd + sx as usize) * cin..][..cin];
                        let kbase = (ky * 3 + kx) * cin * cout;
                        for (ci, &xi) in src.iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            let krow = &wv[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (oo, &kw) in o.iter_mut().zip(krow) {
                                *oo += xi * kw;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            out,
            vec![h, wd, cout],
            Op::Conv3x3 {
                x,
                w,
                b,
                h,
                wd,
                cin,
                cout,
            },
            rg,
        )
    }

    /// Quadrature of the volume rendering integral along each ray.
    ///
    /// `sigma` is `[rays, samples]`, `rgb` is `[rays, samples, 3]`, and
    /// `t`/`delta` hold per-sample distances and interval lengths. The output
    /// is `[rays, 5]`: composited color (over `background`), expected
    /// distance `Σ wᵢ tᵢ`, and accumulated opacity `Σ wᵢ`.
    pub fn volume_render(
        &mut self,
        sigma: Var,
        rgb: Var,
        t: Vec<f64>,
        delta: Vec<f64>,
        background: [f64; 3],
    ) -> Result<Var> {
        let ss = self.shape(sigma).to_vec();
        if ss.len() != 2 {
            return Err(Error::Shape("density must be [rays, samples]".into()));
        }
        let (rays, samples) = (ss[0], ss[1]);
        if self.value(rgb).len() != rays * samples * 3
            || t.len() != rays * samples
            || delta.len() != rays * samples
        {
            return Err(Error::Shape("volume render operand sizes differ".into()));
        }
        let sv = self.value(sigma);
        if let Some(i) = sv.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "density at ray {} sample {}",
                i / samples,
                i % samples
            )));
        }
        let cv = self.value(rgb);
        let mut weights = vec![0.0; rays * samples];
        let mut trans_next = vec![0.0; rays * samples];
        let mut out = vec![0.0; rays * 5];
        for r in 0..rays {
            let mut log_t: f64 = 0.0;
            let (mut cr, mut cg, mut cb, mut d, mut acc) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..samples {
                let j = r * samples + i;
                let tau = sv[j] * delta[j];
                let trans = (-log_t).exp();
                let next = (-(log_t + tau)).exp();
                let w = trans - next;
                weights[j] = w;
                trans_next[j] = next;
                log_t += tau;
                cr += w * cv[3 * j];
                cg += w * cv[3 * j + 1];
                cb += w * cv[3 * j + 2];
                d += w * t[j];
                acc += w;
            }
            let rest = 1.0 - acc;
            out[5 * r] = cr + rest * background[0];
            out[5 * r + 1] = cg + rest * background[1];
            out[5 * r + 2] = cb + rest * background[2];
            out[5 * r + 3] = d;
            out[5 * r + 4] = acc;
        }
        let rg = self.rg(sigma) || self.rg(rgb);
        let cache = VolumeCache {
            sigma,
            rgb,
            rays,
            samples,
            t,
            delta,
            background,
            weights,
            trans_next,
        };
        Ok(self.push(out, vec![rays, 5], Op::VolumeRender(Box::new(cache)), rg))
    }

    /// Per-sample weights retained by a volume render node.
    pub fn render_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::VolumeRender(c) => Some(&c.weights),
            _ => None,
        }
    }

    /// Row-wise `c / max(ε, r+g+b)` on an `[n, 3]` node.
    pub fn chromaticity(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len() % 3, 0, "chromaticity expects rgb rows");
        let mut out = Vec::with_capacity(xv.len());
        for px in xv.chunks_exact(3) {
            let s = (px[0] + px[1] + px[2]).max(CHROMA_EPS);
            out.extend(px.iter().map(|c| c / s));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Chromaticity { x }, rg)
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar loss");
        self.backward_from(&[(loss, vec![1.0])])
    }

    /// Backpropagates arbitrary upstream gradients seeded at several nodes.
    pub fn backward_from(&self, seeds: &[(Var, Vec<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(g.len(), self.value(*v).len(), "seed gradient size mismatch");
            add_into(&mut grads[v.0], g);
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b, n, k, m } => {
                let (n, k, m) = (*n, *k, *m);
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.rg(*x) {
                    let mut wt = vec![0.0; m * k];
                    transpose_into(wv, k, m, &mut wt);
                    let mut gx = vec![0.0; n * k];
                    axpy_rows(&mut gx, gy, &wt, n, m, k);
                    add_into(&mut grads[x.0], &gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; k * m];
                    for (xrow, grow) in xv.chunks_exact(k).zip(gy.chunks_exact(m)) {
                        for (kk, &xi) in xrow.iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            for (d, &g) in gw[kk * m..(kk + 1) * m].iter_mut().zip(grow) {
                                *d += xi * g;
                            }
                        }
                    }
                    add_into(&mut grads[w.0], &gw);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; m];
                    for row in gy.chunks_exact(m) {
                        for (d, &g) in gb.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x);
                let yv = &node.value;
                let gx: Vec<f64> = (0..gy.len())
                    .map(|i| {
                        let d = match kind {
                            Unary::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => yv[i] * (1.0 - yv[i]),
                            Unary::Softplus => sigmoid(xv[i]),
                            Unary::Exp => yv[i],
                            Unary::Log => 1.0 / xv[i],
                            Unary::Square => 2.0 * xv[i],
                        };
                        gy[i] * d
                    })
                    .collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Binary { a, b, kind } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.rg(*a) {
                    let ga: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => gy.to_vec(),
                        Binary::Mul => gy.iter().zip(bv).map(|(g, y)| g * y).collect(),
                        Binary::Div => gy.iter().zip(bv).map(|(g, y)| g / y).collect(),
                    };
                    add_into(&mut grads[a.0], &ga);
                }
                if self.rg(*b) {
                    let gb: Vec<f64> = match kind {
                        Binary::Add => gy.to_vec(),
                        Binary::Sub => gy.iter().map(|g| -g).collect(),
                        Binary::Mul => gy.iter().zip(av).map(|(g, x)| g * x).collect(),
                        Binary::Div => (0..gy.len())
                            .map(|i| -gy[i] * av[i] / (bv[i] * bv[i]))
                            .collect(),
                    };
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Scale { x, s } => {
                let gx: Vec<f64> = gy.iter().map(|g| g * s).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::AddScalar { x } | Op::AddConst { x } | Op::Reshape { x } => {
                add_into(&mut grads[x.0], gy);
            }
            Op::MulConst { x, c } => {
                let gx: Vec<f64> = gy.iter().zip(c).map(|(g, c)| g * c).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Sum { x } => {
                let gx = vec![gy[0]; self.value(*x).len()];
                add_into(&mut grads[x.0], &gx);
            }
            Op::WeightedSum { x, w } => {
                let gx: Vec<f64> = w.iter().map(|w| w * gy[0]).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let gx: Vec<f64> = gy
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Gather { x, idx } => {
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; self.value(*x).len()]);
                for (g, &i) in gy.iter().zip(idx) {
                    slot[i] += g;
                }
            }
            Op::ConcatCols { a, b, n, p, q } => {
                let (n, p, q) = (*n, *p, *q);
                if self.rg(*a) {
                    let mut ga = Vec::with_capacity(n * p);
                    for i in 0..n {
                        ga.extend_from_slice(&gy[i * (p + q)..i * (p + q) + p]);
                    }
                    add_into(&mut grads[a.0], &ga);
                }
                if self.rg(*b) {
                    let mut gb = Vec::with_capacity(n * q);
                    for i in 0..n {
                        gb.extend_from_slice(&gy[i * (p + q) + p..(i + 1) * (p + q)]);
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::SliceCols { x, m, start, end } => {
                let width = end - start;
                let n = gy.len() / width;
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; n * m]);
                for i in 0..n {
                    for j in 0..width {
                        slot[i * m + start + j] += gy[i * width + j];
                    }
                }
            }
            Op::Conv3x3 {
                x,
                w,
                b,
                h,
                wd,
                cin,
                cout,
            } => self.conv_backward(*x, *w, *b, (*h, *wd, *cin, *cout), gy, grads),
            Op::VolumeRender(cache) => self.volume_backward(cache, gy, grads),
            Op::Chromaticity { x } => {
                let xv = self.value(*x);
                let mut gx = vec![0.0; xv.len()];
                for ((px, g), out) in xv
                    .chunks_exact(3)
                    .zip(gy.chunks_exact(3))
                    .zip(gx.chunks_exact_mut(3))
                {
                    let raw = px[0] + px[1] + px[2];
                    if raw > CHROMA_EPS {
                        // y_j = x_j / s, s = Σx: dy_j/dx_k = δ_jk / s − x_j / s².
                        let dot: f64 = px.iter().zip(g).map(|(a, b)| a * b).sum();
                        for k in 0..3 {
                            out[k] = g[k] / raw - dot / (raw * raw);
                        }
                    } else {
                        for k in 0..3 {
                            out[k] = g[k] / CHROMA_EPS;
                        }
                    }
                }
                add_into(&mut grads[x.0], &gx);
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        dims: (usize, usize, usize, usize),
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (h, wd, cin, cout) = dims;
        let xv = self.value(x);
        let wv = self.value(w);
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        let mut gx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut gw = if need_w { vec![0.0; wv.len()] } else { Vec::new() };
        for y in 0..h {
            for xx in 0..wd {
                let g = &gy[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let sbase = (sy as usize * wd + sx as usize) * cin;
                        let kbase = (ky * 3 + kx) * cin * cout;
                        for ci in 0..cin {
                            let krange = kbase + ci * cout..kbase + (ci + 1) * cout;
                            if need_x {
                                gx[sbase + ci] += wv[krange.clone()]
                                    .iter()
                                    .zip(g)
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                            if need_w {
                                let xi = xv[sbase + ci];
                                if xi != 0.0 {
                                    for (d, &gg) in gw[krange].iter_mut().zip(g) {
                                        *d += xi * gg;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            add_into(&mut grads[x.0], &gx);
        }
        if need_w {
            add_into(&mut grads[w.0], &gw);
        }
        if self.rg(b) {
            let mut gb = vec![0.0; cout];
            for row in gy.chunks_exact(cout) {
                for (d, &g) in gb.iter_mut().zip(row) {
                    *d += g;
                }
            }
            add_into(&mut grads[b.0], &gb);
        }
    }

    fn volume_backward(&self, c: &VolumeCache, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rays, samples) = (c.rays, c.samples);
        let cv = self.value(c.rgb);
        let bg = c.background;
        if self.rg(c.rgb) {
            let mut gc = vec![0.0; rays * samples * 3];
            for r in 0..rays {
                let g = &gy[5 * r..5 * r + 3];
                for i in 0..samples {
                    let j = r * samples + i;
                    let w = c.weights[j];
                    gc[3 * j] = w * g[0];
                    gc[3 * j + 1] = w * g[1];
                    gc[3 * j + 2] = w * g[2];
                }
            }
            add_into(&mut grads[c.rgb.0], &gc);
        }
        if self.rg(c.sigma) {
            // ∂y/∂σᵢ = δᵢ (T_{i+1} uᵢ − Σ_{k>i} w_k u_k), where uᵢ is the
            // upstream-weighted per-sample value (color minus background,
            // distance, and 1 for opacity).
            let mut gs = vec![0.0; rays * samples];
            let mut u = vec![0.0; samples];
            for r in 0..rays {
                let g = &gy[5 * r..5 * r + 5];
                for (i, ui) in u.iter_mut().enumerate() {
                    let j = r * samples + i;
                    *ui = g[0] * (cv[3 * j] - bg[0])
                        + g[1] * (cv[3 * j + 1] - bg[1])
                        + g[2] * (cv[3 * j + 2] - bg[2])
                        + g[3] * c.t[j]
                        + g[4];
                }
                let mut suffix = 0.0;
                for i in (0..samples).rev() {
                    let j = r * samples + i;
                    gs[j] = c.delta[j] * (c.trans_next[j] * u[i] - suffix);
                    suffix += c.weights[j] * u[i];
                }
            }
            add_into(&mut grads[c.sigma.0], &gs);
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// Gradient table produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter-leaf gradient into the matching store block.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) {
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Some(name), Some(g)) = (&node.param, g) {
                if let Some(block) = store.block_mut(name) {
                    for (a, b) in block.grad.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// `dst [m,n] = src [n,m]ᵀ`.
fn transpose_into(src: &[f64], n: usize, m: usize, dst: &mut [f64]) {
    for i in 0..n {
        for j in 0..m {
            dst[j * n + i] = src[i * m + j];
        }
    }
}

/// `c [n,m] += a [n,k] · b [k,m]` as row axpys, skipping zero entries of
/// `a` (frequent after ReLU).
fn axpy_rows(c: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    assert!(c.len() == n * m && a.len() == n * k && b.len() == k * m);
    for (ci, ai) in c.chunks_exact_mut(m).zip(a.chunks_exact(k)) {
        for (p, &av) in ai.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bj) in ci.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bj;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_matches_hand_product() {
        let mut g = Graph::new();
        let x = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = g.constant(&[2, 1], vec![0.5, -1.0]);
        let b = g.constant(&[1], vec![0.25]);
        let y = g.affine(x, w, b);
        assert_eq!(g.value(y), &[0.5 - 2.0 + 0.25, 1.5 - 4.0 + 0.25]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.input(&[3], vec![1.0, -2.0, 0.5]);
        let sq = g.square(x);
        let s = g.sum(sq);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn gather_scatters_back() {
        let mut g = Graph::new();
        let x = g.input(&[3], vec![1.0, 2.0, 3.0]);
        let y = g.gather(x, vec![0, 0, 2]);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(&[2], vec![1.0, 2.0]);
        let x = g.input(&[2], vec![3.0, 4.0]);
        let y = g.mul(c, x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn volume_render_rejects_nan_density() {
        let mut g = Graph::new();
        let s = g.input(&[1, 2], vec![1.0, f64::NAN]);
        let c = g.input(&[1, 2, 3], vec![0.5; 6]);
        let err = g
            .volume_render(s, c, vec![0.5, 1.5], vec![1.0, 1.0], [0.0; 3])
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
