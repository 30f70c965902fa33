//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding
//! its output value and whatever the backward rule needs. [`Graph::backward`]
//! walks the nodes in reverse insertion order and accumulates gradients for
//! every node that (transitively) depends on a parameter. Constants never
//! receive gradients.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norm offset used by the cosine-style normalizations.
pub const NORM_EPS: f64 = 1e-8;

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SumAll(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    PatchEmbed {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    ChannelLayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    NormalizeChannels {
        x: Var,
        norms: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ChannelContract(Var, Var),
    SliceAxis1 {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SpatialMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SoftmaxLast(Var),
    GroupWeightedSum {
        maps: Var,
        weights: Var,
        k: usize,
    },
    MeanSpatial(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    UpsampleBilinear(Var),
    GatherPixels {
        x: Var,
        index: Vec<(usize, usize, usize)>,
    },
    ClampRenormRows {
        x: Var,
        floor: f64,
    },
    PairwiseExpNegJeffrey(Var),
    InfoNce {
        logits: Var,
        positive: Vec<bool>,
        selected: Vec<bool>,
        null_positive: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

/// Source taps for one output coordinate of half-pixel bilinear resampling.
fn bilinear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Pairwise Jeffrey divergence between two strictly positive distributions.
pub fn jeffrey(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| (a - b) * (a.ln() - b.ln())).sum()
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of scalars; an empty list yields the constant 0.
    pub fn add_scalars(&mut self, xs: &[Var]) -> Var {
        match xs.split_first() {
            None => self.constant(Tensor::scalar(0.0)),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &x| self.add(acc, x)),
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.push(out, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.ndim(), 2, "transpose expects a matrix");
        let (r, c) = (x.dim(0), x.dim(1));
        let out = Tensor::from_fn(&[c, r], |i| x.data()[(i % r) * c + i / r]);
        self.push(out, Op::Transpose(a), &[a])
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.ndim() == 2 && y.ndim() == 2, "matmul expects matrices");
        assert_eq!(x.dim(1), y.dim(0), "matmul inner dimensions differ");
        let out = matmul_raw(x.data(), y.data(), x.dim(0), x.dim(1), y.dim(1));
        let out = Tensor::new(vec![x.dim(0), y.dim(1)], out);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `(n, d) + (d)` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        let d = x.dim(1);
        assert_eq!(b.len(), d, "bias length differs from row width");
        let data = x.data().iter().enumerate().map(|(i, v)| v + b.data()[i % d]).collect();
        let out = Tensor::new(x.shape().to_vec(), data);
        self.push(out, Op::AddRowBias(a, bias), &[a, bias])
    }

    /// Non-overlapping strided convolution: kernel size equals the stride.
    ///
    /// `x: (B, Cin, H, W)`, `w: (Cout, Cin, s, s)`, `b: (Cout)` to
    /// `(B, Cout, H/s, W/s)`.
    pub fn patch_embed(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (bs, cin, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let cout = wv.dim(0);
        assert_eq!(wv.shape(), &[cout, cin, stride, stride], "patch kernel shape");
        assert_eq!(bv.len(), cout);
        assert!(h % stride == 0 && wd % stride == 0, "input not divisible by stride");
        let (oh, ow) = (h / stride, wd / stride);
        let mut out = vec![0.0; bs * cout * oh * ow];
        let (xd, wdat) = (xv.data(), wv.data());
        for n in 0..bs {
            for o in 0..cout {
                let wbase = o * cin * stride * stride;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = bv.data()[o];
                        for c in 0..cin {
                            let xbase = (n * cin + c) * h * wd;
                            let wc = wbase + c * stride * stride;
                            for di in 0..stride {
                                let row = xbase + (i * stride + di) * wd + j * stride;
                                let wr = wc + di * stride;
                                for dj in 0..stride {
                                    acc += xd[row + dj] * wdat[wr + dj];
                                }
                            }
                        }
                        out[((n * cout + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        let out = Tensor::new(vec![bs, cout, oh, ow], out);
        self.push(out, Op::PatchEmbed { x, w, b, stride }, &[x, w, b])
    }

    /// Layer normalization across the channel axis of `(B, C, H, W)`, per pixel,
    /// with per-channel affine `gamma`, `beta`.
    pub fn channel_layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xv, g, be) = (self.value(x), self.value(gamma), self.value(beta));
        let (bs, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let hw = h * w;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; bs * hw];
        let mut out = vec![0.0; xv.len()];
        let xd = xv.data();
        for n in 0..bs {
            for p in 0..hw {
                let idx = |ch: usize| (n * c + ch) * hw + p;
                let mean = (0..c).map(|ch| xd[idx(ch)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (xd[idx(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[n * hw + p] = is;
                for ch in 0..c {
                    let xh = (xd[idx(ch)] - mean) * is;
                    xhat[idx(ch)] = xh;
                    out[idx(ch)] = g.data()[ch] * xh + be.data()[ch];
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out);
        self.push(
            out,
            Op::ChannelLayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu(x).0);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Divide each channel vector of `(B, D, H, W)` by `norm + NORM_EPS`.
    pub fn normalize_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (bs, d, hw) = (xv.dim(0), xv.dim(1), xv.dim(2) * xv.dim(3));
        let xd = xv.data();
        let mut norms = vec![0.0; bs * hw];
        let mut out = vec![0.0; xv.len()];
        for n in 0..bs {
            for p in 0..hw {
                let nrm = (0..d).map(|c| xd[(n * d + c) * hw + p].powi(2)).sum::<f64>().sqrt();
                norms[n * hw + p] = nrm;
                for c in 0..d {
                    let i = (n * d + c) * hw + p;
                    out[i] = xd[i] / (nrm + NORM_EPS);
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out);
        self.push(out, Op::NormalizeChannels { x, norms }, &[x])
    }

    /// Divide each row of `(n, d)` by `norm + NORM_EPS`.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, d) = (xv.dim(0), xv.dim(1));
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..r {
            let row = xv.row(i);
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(nrm);
            out.extend(row.iter().map(|v| v / (nrm + NORM_EPS)));
        }
        let out = Tensor::new(vec![r, d], out);
        self.push(out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// `(B, D, H, W) x (N, D) -> (B, N, H, W)`: per-pixel dot products with each row.
    pub fn channel_contract(&mut self, f: Var, p: Var) -> Var {
        let (fv, pv) = (self.value(f), self.value(p));
        let (bs, d, h, w) = (fv.dim(0), fv.dim(1), fv.dim(2), fv.dim(3));
        let np = pv.dim(0);
        assert_eq!(pv.dim(1), d, "channel_contract: feature and row widths differ");
        let hw = h * w;
        let mut out = vec![0.0; bs * np * hw];
        for n in 0..bs {
            for j in 0..np {
                let dst = &mut out[(n * np + j) * hw..(n * np + j + 1) * hw];
                for c in 0..d {
                    let pc = pv.data()[j * d + c];
                    let src = &fv.data()[(n * d + c) * hw..(n * d + c + 1) * hw];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += pc * s;
                    }
                }
            }
        }
        let out = Tensor::new(vec![bs, np, h, w], out);
        self.push(out, Op::ChannelContract(f, p), &[f, p])
    }

    /// `x[:, start..start+len, ...]`.
    pub fn slice_axis1(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        assert!(start + len <= shape[1], "slice_axis1 out of range");
        let outer = shape[0];
        let inner: usize = shape[2..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[1] + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[1] = len;
        let out = Tensor::new(new_shape, data);
        self.push(out, Op::SliceAxis1 { x, start }, &[x])
    }

    /// Rows of a 2-d tensor, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let d = xv.dim(1);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], data);
        self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, &[x])
    }

    /// `(B, N, H, W) -> (B, N)` maximum over space. Ties resolve to the first position.
    pub fn spatial_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (bs, n) = (xv.dim(0), xv.dim(1));
        let hw = xv.dim(2) * xv.dim(3);
        let mut vals = Vec::with_capacity(bs * n);
        let mut argmax = Vec::with_capacity(bs * n);
        for i in 0..bs * n {
            let plane = &xv.data()[i * hw..(i + 1) * hw];
            let mut best = 0;
            for (p, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = p;
                }
            }
            vals.push(plane[best]);
            argmax.push(i * hw + best);
        }
        let out = Tensor::new(vec![bs, n], vals);
        self.push(out, Op::SpatialMax { x, argmax }, &[x])
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = *xv.shape().last().expect("softmax on a scalar");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(w) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), data);
        self.push(out, Op::SoftmaxLast(x), &[x])
    }

    /// `maps: (B, G*k, H, W)`, `weights: (B, G*k)` to `(B, G, H, W)` where
    /// output group `g` is the weighted sum of channels `g*k .. g*k+k`.
    pub fn group_weighted_sum(&mut self, maps: Var, weights: Var, k: usize) -> Var {
        let (mv, wv) = (self.value(maps), self.value(weights));
        let (bs, n, h, w) = (mv.dim(0), mv.dim(1), mv.dim(2), mv.dim(3));
        assert_eq!(wv.shape(), &[bs, n], "group weights shape");
        assert!(k > 0 && n % k == 0, "channels not divisible by group size");
        let g = n / k;
        let hw = h * w;
        let mut out = vec![0.0; bs * g * hw];
        for b in 0..bs {
            for c in 0..g {
                let dst = &mut out[(b * g + c) * hw..(b * g + c + 1) * hw];
                for u in 0..k {
                    let j = c * k + u;
                    let a = wv.data()[b * n + j];
                    let src = &mv.data()[(b * n + j) * hw..(b * n + j + 1) * hw];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += a * s;
                    }
                }
            }
        }
        let out = Tensor::new(vec![bs, g, h, w], out);
        self.push(out, Op::GroupWeightedSum { maps, weights, k }, &[maps, weights])
    }

    /// Global average pooling `(B, C, H, W) -> (B, C)`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (bs, c) = (xv.dim(0), xv.dim(1));
        let hw = xv.dim(2) * xv.dim(3);
        let data = (0..bs * c)
            .map(|i| xv.data()[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(vec![bs, c], data);
        self.push(out, Op::MeanSpatial(x), &[x])
    }

    /// Mean binary cross-entropy with logits against constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Var {
        let zv = self.value(logits);
        assert_eq!(zv.shape(), targets.shape(), "bce targets shape");
        let n = zv.len().max(1) as f64;
        let total: f64 = zv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / n);
        self.push(
            out,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
        )
    }

    /// Bilinear resampling of `(B, C, h, w)` to `(B, C, out_h, out_w)` with
    /// half-pixel centers.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x);
        let out = bilinear_forward(xv, out_h, out_w);
        self.push(out, Op::UpsampleBilinear(x), &[x])
    }

    /// Gather channel vectors of `(B, D, H, W)` at `(b, h, w)` positions into `(n, D)`.
    pub fn gather_pixels(&mut self, x: Var, index: &[(usize, usize, usize)]) -> Var {
        let xv = self.value(x);
        let (d, h, w) = (xv.dim(1), xv.dim(2), xv.dim(3));
        let mut data = Vec::with_capacity(index.len() * d);
        for &(b, i, j) in index {
            for c in 0..d {
                data.push(xv.data()[((b * d + c) * h + i) * w + j]);
            }
        }
        let out = Tensor::new(vec![index.len(), d], data);
        self.push(
            out,
            Op::GatherPixels {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Clamp each entry of `(k, n)` to `[floor, 1]`, then rescale rows to sum to one.
    pub fn clamp_renorm_rows(&mut self, x: Var, floor: f64) -> Var {
        let xv = self.value(x);
        let w = xv.dim(1);
        let mut data = xv.data().iter().map(|v| v.clamp(floor, 1.0)).collect::<Vec<_>>();
        for row in data.chunks_mut(w) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(xv.shape().to_vec(), data);
        self.push(out, Op::ClampRenormRows { x, floor }, &[x])
    }

    /// Mean of `exp(-J(row_u, row_v))` over all unordered row pairs `u < v`
    /// of a `(k, n)` matrix of strictly positive distributions. Zero when `k < 2`.
    pub fn pairwise_exp_neg_jeffrey(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let k = xv.dim(0);
        let mut terms = Vec::with_capacity(k * k.saturating_sub(1) / 2);
        for u in 0..k {
            for v in u + 1..k {
                terms.push((-jeffrey(xv.row(u), xv.row(v))).exp());
            }
        }
        // summing in sorted order makes the mean independent of row order
        terms.sort_by(f64::total_cmp);
        let val = if terms.is_empty() {
            0.0
        } else {
            terms.iter().sum::<f64>() / terms.len() as f64
        };
        self.push(Tensor::scalar(val), Op::PairwiseExpNegJeffrey(x), &[x])
    }

    /// Mean over rows of `logsumexp(selected) - logsumexp(positive)`.
    ///
    /// `positive` marks positive entries of each row, `selected` the entries
    /// entering the denominator (positives included). With `null_positive`
    /// a constant zero logit joins both sets, so a row without positives
    /// still has a well-defined loss `log(1 + sum exp(negatives))`.
    pub fn info_nce(&mut self, logits: Var, positive: Vec<bool>, selected: Vec<bool>, null_positive: bool) -> Var {
        let lv = self.value(logits);
        assert_eq!(positive.len(), lv.len());
        assert_eq!(selected.len(), lv.len());
        let (rows, cols) = (lv.dim(0), lv.dim(1));
        let mut total = 0.0;
        for r in 0..rows {
            let row = lv.row(r);
            let span = r * cols..(r + 1) * cols;
            let extra = null_positive.then_some(0.0);
            let sel = row
                .iter()
                .zip(&selected[span.clone()])
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .chain(extra);
            let pos = row
                .iter()
                .zip(&positive[span])
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .chain(extra);
            // shift both sums by the same maximum: equal logits give exactly ln N
            let m = sel.clone().fold(f64::NEG_INFINITY, f64::max);
            let sum = |it: &mut dyn Iterator<Item = f64>| it.map(|v| (v - m).exp()).sum::<f64>();
            let (s_sel, s_pos) = (sum(&mut sel.clone()), sum(&mut pos.clone()));
            total += s_sel.ln() - s_pos.ln();
        }
        let val = if rows == 0 { 0.0 } else { total / rows as f64 };
        self.push(
            Tensor::scalar(val),
            Op::InfoNce {
                logits,
                positive,
                selected,
                null_positive,
            },
            &[logits],
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let ga = gd.iter().zip(y.data()).map(|(p, q)| p * q).collect();
                let gb = gd.iter().zip(x.data()).map(|(p, q)| p * q).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), ga));
                self.accumulate(grads, *b, Tensor::new(y.shape().to_vec(), gb));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::SumAll(a) => {
                let gv = gd[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                // g is (c, r)
                let t = Tensor::from_fn(&[r, c], |i| gd[(i % c) * r + i / c]);
                self.accumulate(grads, *a, t);
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.dim(0), x.dim(1), y.dim(1));
                if self.requires_grad(*a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gd[i * n + j] * y.data()[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da));
                }
                if self.requires_grad(*b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let xv = x.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += xv * gd[i * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db));
                }
            }
            Op::AddRowBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                let d = self.value(*bias).len();
                let mut db = vec![0.0; d];
                for (i, v) in gd.iter().enumerate() {
                    db[i % d] += v;
                }
                self.accumulate(grads, *bias, Tensor::new(vec![d], db));
            }
            Op::PatchEmbed { x, w, b, stride } => self.patch_embed_backward(*x, *w, *b, *stride, g, grads),
            Op::ChannelLayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let shape = self.shape(*x).to_vec();
                let (bs, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut dx = vec![0.0; gd.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for n in 0..bs {
                    for p in 0..hw {
                        let idx = |ch: usize| (n * c + ch) * hw + p;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for ch in 0..c {
                            let dxh = gd[idx(ch)] * gv.data()[ch];
                            mean_d += dxh;
                            mean_dx += dxh * xhat[idx(ch)];
                            dg[ch] += gd[idx(ch)] * xhat[idx(ch)];
                            db[ch] += gd[idx(ch)];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        let is = inv_std[n * hw + p];
                        for ch in 0..c {
                            let dxh = gd[idx(ch)] * gv.data()[ch];
                            dx[idx(ch)] = is * (dxh - mean_d - xhat[idx(ch)] * mean_dx);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx));
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dg));
                self.accumulate(grads, *beta, Tensor::new(vec![c], db));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = x.data().iter().zip(gd).map(|(&v, &gg)| gg * gelu(v).1).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d));
            }
            Op::NormalizeChannels { x, norms } => {
                let xv = self.value(*x);
                let (bs, d, hw) = (xv.dim(0), xv.dim(1), xv.dim(2) * xv.dim(3));
                let xd = xv.data();
                let mut dx = vec![0.0; xd.len()];
                for n in 0..bs {
                    for p in 0..hw {
                        let nrm = norms[n * hw + p];
                        let s = nrm + NORM_EPS;
                        let dot: f64 = (0..d)
                            .map(|c| gd[(n * d + c) * hw + p] * xd[(n * d + c) * hw + p])
                            .sum();
                        let coef = if nrm > 0.0 { dot / (s * s * nrm) } else { 0.0 };
                        for c in 0..d {
                            let i = (n * d + c) * hw + p;
                            dx[i] = gd[i] / s - coef * xd[i];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
            }
            Op::NormalizeRows { x, norms } => {
                let xv = self.value(*x);
                let d = xv.dim(1);
                let mut dx = vec![0.0; xv.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let s = nrm + NORM_EPS;
                    let row = xv.row(r);
                    let grow = &gd[r * d..(r + 1) * d];
                    let dot: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
                    let coef = if nrm > 0.0 { dot / (s * s * nrm) } else { 0.0 };
                    for c in 0..d {
                        dx[r * d + c] = grow[c] / s - coef * row[c];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
            }
            Op::ChannelContract(f, p) => {
                let (fv, pv) = (self.value(*f), self.value(*p));
                let (bs, d, hw) = (fv.dim(0), fv.dim(1), fv.dim(2) * fv.dim(3));
                let np = pv.dim(0);
                if self.requires_grad(*f) {
                    let mut df = vec![0.0; fv.len()];
                    for n in 0..bs {
                        for j in 0..np {
                            let gplane = &gd[(n * np + j) * hw..(n * np + j + 1) * hw];
                            for c in 0..d {
                                let pc = pv.data()[j * d + c];
                                let dst = &mut df[(n * d + c) * hw..(n * d + c + 1) * hw];
                                for (o, gg) in dst.iter_mut().zip(gplane) {
                                    *o += pc * gg;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *f, Tensor::new(fv.shape().to_vec(), df));
                }
                if self.requires_grad(*p) {
                    let mut dp = vec![0.0; pv.len()];
                    for n in 0..bs {
                        for j in 0..np {
                            let gplane = &gd[(n * np + j) * hw..(n * np + j + 1) * hw];
                            for c in 0..d {
                                let fplane = &fv.data()[(n * d + c) * hw..(n * d + c + 1) * hw];
                                dp[j * d + c] += gplane.iter().zip(fplane).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), dp));
                }
            }
            Op::SliceAxis1 { x, start } => {
                let shape = self.shape(*x).to_vec();
                let len = g.shape()[1];
                let inner: usize = shape[2..].iter().product();
                let mut dx = vec![0.0; shape.iter().product()];
                for o in 0..shape[0] {
                    let dst = (o * shape[1] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx));
            }
            Op::SelectRows { x, rows } => {
                let shape = self.shape(*x).to_vec();
                let d = shape[1];
                let mut dx = vec![0.0; shape[0] * d];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        dx[r * d + c] += gd[i * d + c];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx));
            }
            Op::SpatialMax { x, argmax } => {
                let shape = self.shape(*x).to_vec();
                let mut dx = vec![0.0; shape.iter().product()];
                for (i, &pos) in argmax.iter().enumerate() {
                    dx[pos] += gd[i];
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx));
            }
            Op::SoftmaxLast(x) => {
                let y = &node.value;
                let w = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(w).zip(gd.chunks(w)).zip(dx.chunks_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..w {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::GroupWeightedSum { maps, weights, k } => {
                let (mv, wv) = (self.value(*maps), self.value(*weights));
                let (bs, n, hw) = (mv.dim(0), mv.dim(1), mv.dim(2) * mv.dim(3));
                let groups = n / k;
                let mut dm = vec![0.0; mv.len()];
                let mut dw = vec![0.0; wv.len()];
                for b in 0..bs {
                    for c in 0..groups {
                        let gplane = &gd[(b * groups + c) * hw..(b * groups + c + 1) * hw];
                        for u in 0..*k {
                            let j = c * k + u;
                            let a = wv.data()[b * n + j];
                            let off = (b * n + j) * hw;
                            let mplane = &mv.data()[off..off + hw];
                            dw[b * n + j] = gplane.iter().zip(mplane).map(|(p, q)| p * q).sum::<f64>();
                            for (o, gg) in dm[off..off + hw].iter_mut().zip(gplane) {
                                *o += a * gg;
                            }
                        }
                    }
                }
                self.accumulate(grads, *maps, Tensor::new(mv.shape().to_vec(), dm));
                self.accumulate(grads, *weights, Tensor::new(wv.shape().to_vec(), dw));
            }
            Op::MeanSpatial(x) => {
                let shape = self.shape(*x).to_vec();
                let hw = shape[2] * shape[3];
                let dx = Tensor::from_fn(&shape, |i| gd[i / hw] / hw as f64);
                self.accumulate(grads, *x, dx);
            }
            Op::BceWithLogits { logits, targets } => {
                let zv = self.value(*logits);
                let n = zv.len().max(1) as f64;
                let d = zv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| gd[0] * (sigmoid(z) - y) / n)
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(zv.shape().to_vec(), d));
            }
            Op::UpsampleBilinear(x) => {
                let shape = self.shape(*x).to_vec();
                let dx = bilinear_backward(g, &shape);
                self.accumulate(grads, *x, dx);
            }
            Op::GatherPixels { x, index } => {
                let shape = self.shape(*x).to_vec();
                let (d, h, w) = (shape[1], shape[2], shape[3]);
                let mut dx = vec![0.0; shape.iter().product()];
                for (r, &(b, i, j)) in index.iter().enumerate() {
                    for c in 0..d {
                        dx[((b * d + c) * h + i) * w + j] += gd[r * d + c];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx));
            }
            Op::ClampRenormRows { x, floor } => {
                let xv = self.value(*x);
                let w = xv.dim(1);
                let y = &node.value;
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.dim(0) {
                    let xr = xv.row(r);
                    let s: f64 = xr.iter().map(|v| v.clamp(*floor, 1.0)).sum();
                    let yr = &y.data()[r * w..(r + 1) * w];
                    let gr = &gd[r * w..(r + 1) * w];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..w {
                        let pass = xr[i] > *floor && xr[i] < 1.0;
                        if pass {
                            dx[r * w + i] = (gr[i] - dot) / s;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
            }
            Op::PairwiseExpNegJeffrey(x) => {
                let xv = self.value(*x);
                let (k, w) = (xv.dim(0), xv.dim(1));
                let pairs = k * k.saturating_sub(1) / 2;
                let mut dx = vec![0.0; xv.len()];
                if pairs > 0 {
                    let scale = gd[0] / pairs as f64;
                    for u in 0..k {
                        for v in u + 1..k {
                            let (ru, rv) = (xv.row(u), xv.row(v));
                            let e = (-jeffrey(ru, rv)).exp();
                            for i in 0..w {
                                let (a, b) = (ru[i], rv[i]);
                                let dj_da = (a / b).ln() + 1.0 - b / a;
                                let dj_db = (b / a).ln() + 1.0 - a / b;
                                dx[u * w + i] -= scale * e * dj_da;
                                dx[v * w + i] -= scale * e * dj_db;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
            }
            Op::InfoNce {
                logits,
                positive,
                selected,
                null_positive,
            } => {
                let lv = self.value(*logits);
                let (rows, cols) = (lv.dim(0), lv.dim(1));
                let mut dl = vec![0.0; lv.len()];
                if rows > 0 {
                    let scale = gd[0] / rows as f64;
                    for r in 0..rows {
                        let row = lv.row(r);
                        let span = r * cols..(r + 1) * cols;
                        let extra = null_positive.then_some(0.0);
                        let sel_m = &selected[span.clone()];
                        let pos_m = &positive[span];
                        let lse_sel =
                            log_sum_exp(row.iter().zip(sel_m).filter(|(_, &m)| m).map(|(&v, _)| v).chain(extra));
                        let lse_pos =
                            log_sum_exp(row.iter().zip(pos_m).filter(|(_, &m)| m).map(|(&v, _)| v).chain(extra));
                        for c in 0..cols {
                            let mut d = 0.0;
                            if sel_m[c] {
                                d += (row[c] - lse_sel).exp();
                            }
                            if pos_m[c] {
                                d -= (row[c] - lse_pos).exp();
                            }
                            dl[r * cols + c] = scale * d;
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dl));
            }
        }
    }

    fn patch_embed_backward(&self, x: Var, w: Var, b: Var, stride: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (bs, cin, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let cout = wv.dim(0);
        let (oh, ow) = (h / stride, wd / stride);
        let gd = g.data();
        let need_x = self.requires_grad(x);
        let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut dw = vec![0.0; wv.len()];
        let mut db = vec![0.0; cout];
        for n in 0..bs {
            for o in 0..cout {
                let wbase = o * cin * stride * stride;
                for i in 0..oh {
                    for j in 0..ow {
                        let go = gd[((n * cout + o) * oh + i) * ow + j];
                        if go == 0.0 {
                            continue;
                        }
                        db[o] += go;
                        for c in 0..cin {
                            let xbase = (n * cin + c) * h * wd;
                            let wc = wbase + c * stride * stride;
                            for di in 0..stride {
                                let row = xbase + (i * stride + di) * wd + j * stride;
                                let wr = wc + di * stride;
                                for dj in 0..stride {
                                    dw[wr + dj] += go * xv.data()[row + dj];
                                    if need_x {
                                        dx[row + dj] += go * wv.data()[wr + dj];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx));
        }
        self.accumulate(grads, w, Tensor::new(wv.shape().to_vec(), dw));
        self.accumulate(grads, b, Tensor::new(vec![cout], db));
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Bilinear resampling of a `(B, C, h, w)` tensor with half-pixel centers.
pub fn bilinear_forward(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (bs, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = vec![0.0; bs * c * out_h * out_w];
    let rows: Vec<_> = (0..out_h).map(|i| bilinear_taps(i, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| bilinear_taps(j, w, out_w)).collect();
    for p in 0..bs * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
            for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
                let top = src[r0 * w + c0] * (1.0 - fx) + src[r0 * w + c1] * fx;
                let bot = src[r1 * w + c0] * (1.0 - fx) + src[r1 * w + c1] * fx;
                dst[i * out_w + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![bs, c, out_h, out_w], out)
}

fn bilinear_backward(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let (bs, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (out_h, out_w) = (g.dim(2), g.dim(3));
    let rows: Vec<_> = (0..out_h).map(|i| bilinear_taps(i, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| bilinear_taps(j, w, out_w)).collect();
    let mut dx = vec![0.0; bs * c * h * w];
    for p in 0..bs * c {
        let gsrc = &g.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
            for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
                let gv = gsrc[i * out_w + j];
                dst[r0 * w + c0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[r0 * w + c1] += gv * (1.0 - fy) * fx;
                dst[r1 * w + c0] += gv * fy * (1.0 - fx);
                dst[r1 * w + c1] += gv * fy * fx;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `d f / d leaf` for the scalar built by `f`.
    fn check_grad(leaf: Tensor, f: impl Fn(&mut Graph, Var) -> Var, tol: f64) {
        let mut g = Graph::new();
        let v = g.param(leaf.clone());
        let out = f(&mut g, v);
        let analytic = g.backward(out).get(v).cloned().unwrap();
        let h = 1e-6;
        for i in 0..leaf.len() {
            let mut plus = leaf.clone();
            plus.data_mut()[i] += h;
            let mut minus = leaf.clone();
            minus.data_mut()[i] -= h;
            let eval = |t: Tensor| {
                let mut g = Graph::new();
                let v = g.param(t);
                let o = f(&mut g, v);
                g.value(o).item()
            };
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(err < tol, "entry {i}: analytic {a} vs numeric {numeric}");
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn matmul_transpose_gradients() {
        let mut r = rng();
        let b = Tensor::randn(&[3, 2], &mut r);
        check_grad(
            Tensor::randn(&[2, 3], &mut r),
            move |g, a| {
                let bc = g.constant(b.clone());
                let m = g.matmul(a, bc);
                let t = g.transpose(m);
                let sq = g.mul(t, t);
                g.sum_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn patch_embed_layer_norm_gelu_gradients() {
        let mut r = rng();
        let w = Tensor::randn(&[3, 2, 2, 2], &mut r);
        let x = Tensor::randn(&[1, 2, 4, 4], &mut r);
        let xc = x.clone();
        check_grad(
            w,
            move |g, w| {
                let x = g.param(xc.clone());
                let b = g.constant(Tensor::full(&[3], 0.1));
                let y = g.patch_embed(x, w, b, 2);
                let gam = g.constant(Tensor::new(vec![3], vec![1.0, 0.5, 2.0]));
                let bet = g.constant(Tensor::new(vec![3], vec![0.0, 0.1, -0.2]));
                let n = g.channel_layer_norm(y, gam, bet);
                let a = g.gelu(n);
                let sq = g.mul(a, a);
                g.sum_all(sq)
            },
            1e-5,
        );
        let wc = Tensor::randn(&[3, 2, 2, 2], &mut r);
        check_grad(
            x,
            move |g, x| {
                let w = g.constant(wc.clone());
                let b = g.constant(Tensor::zeros(&[3]));
                let y = g.patch_embed(x, w, b, 2);
                let gam = g.constant(Tensor::full(&[3], 1.0));
                let bet = g.constant(Tensor::zeros(&[3]));
                let n = g.channel_layer_norm(y, gam, bet);
                let a = g.gelu(n);
                let sq = g.mul(a, a);
                g.sum_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn cosine_pipeline_gradients() {
        let mut r = rng();
        let feats = Tensor::randn(&[2, 3, 2, 2], &mut r);
        let protos = Tensor::randn(&[4, 3], &mut r);
        let fc = feats.clone();
        check_grad(
            protos,
            move |g, p| {
                let f = g.param(fc.clone());
                let fh = g.normalize_channels(f);
                let ph = g.normalize_rows(p);
                let m = g.channel_contract(fh, ph);
                let mx = g.spatial_max(m);
                let r = g.reshape(mx, &[4, 2]);
                let a = g.softmax_last(r);
                let a = g.reshape(a, &[2, 4]);
                let gsum = g.group_weighted_sum(m, a, 2);
                let z = g.mean_spatial(gsum);
                g.bce_with_logits(z, &Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]))
            },
            1e-5,
        );
    }

    #[test]
    fn upsample_slice_gather_gradients() {
        let mut r = rng();
        check_grad(
            Tensor::randn(&[1, 3, 2, 3], &mut r),
            |g, x| {
                let u = g.upsample_bilinear(x, 5, 7);
                let s = g.slice_axis1(u, 1, 2);
                let p = g.gather_pixels(s, &[(0, 0, 0), (0, 4, 6), (0, 2, 3)]);
                let sel = g.select_rows(p, &[2, 0, 2]);
                let sq = g.mul(sel, sel);
                g.sum_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn diversity_primitive_gradients() {
        let mut r = rng();
        check_grad(
            Tensor::randn(&[3, 4], &mut r),
            |g, x| {
                let s = g.softmax_last(x);
                let c = g.clamp_renorm_rows(s, 1e-8);
                g.pairwise_exp_neg_jeffrey(c)
            },
            1e-5,
        );
    }

    #[test]
    fn info_nce_gradients() {
        let mut r = rng();
        let pos = vec![true, false, false, false, false, true, false, false];
        let sel = vec![true, true, false, true, true, true, true, false];
        check_grad(
            Tensor::randn(&[2, 4], &mut r),
            move |g, x| g.info_nce(x, pos.clone(), sel.clone(), false),
            1e-6,
        );
        let pos = vec![false; 4];
        let sel = vec![true, true, false, true];
        check_grad(
            Tensor::randn(&[1, 4], &mut r),
            move |g, x| g.info_nce(x, pos.clone(), sel.clone(), true),
            1e-6,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2, 2], 1.0));
        let p = g.param(Tensor::full(&[2, 2], 2.0));
        let m = g.mul(c, p);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn bilinear_identity_at_same_size() {
        let mut r = rng();
        let x = Tensor::randn(&[1, 2, 3, 3], &mut r);
        assert_eq!(bilinear_forward(&x, 3, 3), x);
    }
}
