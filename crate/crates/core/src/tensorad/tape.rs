use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::warp::smoothness_energy_raw;

/// Scalar element of a tensor; f32 for training, f64 for gradient checks.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::iter::Sum
    + Send
    + Sync
    + std::fmt::Debug
    + 'static
{
    fn cast_from(v: f64) -> Self;
    fn cast_f64(self) -> f64;
}

impl Real for f32 {
    fn cast_from(v: f64) -> f32 {
        v as f32
    }
    fn cast_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn cast_from(v: f64) -> f64 {
        v
    }
    fn cast_f64(self) -> f64 {
        self
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Relu {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    Conv3 {
        input: usize,
        weights: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Reshape {
        input: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        input: usize,
        perm: Vec<usize>,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    DiceLoss {
        probs: usize,
        target: usize,
    },
    CrossEntropy {
        probs: usize,
        target: usize,
    },
    Sum {
        input: usize,
    },
    /// Mean squared error between `fixed` and `moving` warped by the phi
    /// tensor; differentiable with respect to phi only.
    WarpMse {
        phi: usize,
        moving: Vec<T>,
        fixed: Vec<T>,
        channels: usize,
    },
    /// Squared-forward-difference smoothness of a (3, D, H, W) field.
    Smoothness {
        phi: usize,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

const DICE_EPS: f64 = 1e-5;

/// Gradient tape: an append-only record of tensors and the ops that
/// produced them.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, needs_grad: bool, op: Op<T>) -> TensorRef {
        debug_assert_eq!(numel(&shape), data.len());
        let n = data.len();
        self.nodes.push(Node {
            shape,
            data,
            grad: vec![T::zero(); n],
            needs_grad,
            op,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn node(&self, t: TensorRef) -> Result<&Node<T>> {
        self.nodes
            .get(t.0)
            .ok_or_else(|| CoreError::argument("tensor not recorded on this tape"))
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: TensorRef) -> &[T] {
        &self.nodes[t.0].data
    }

    pub fn grad(&self, t: TensorRef) -> &[T] {
        &self.nodes[t.0].grad
    }

    /// Records a constant: no gradient flows into it.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<TensorRef> {
        if numel(shape) != data.len() {
            return Err(CoreError::argument(format!(
                "shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Records a differentiable leaf (a parameter or probed input).
    pub fn var(&mut self, shape: &[usize], data: Vec<T>) -> Result<TensorRef> {
        if numel(shape) != data.len() {
            return Err(CoreError::argument(format!(
                "shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, true, Op::Leaf))
    }

    pub fn relu(&mut self, x: TensorRef) -> Result<TensorRef> {
        let node = self.node(x)?;
        let data: Vec<T> = node
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = node.shape.clone();
        let ng = node.needs_grad;
        Ok(self.push(shape, data, ng, Op::Relu { input: x.0 }))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(CoreError::argument(format!(
                "add: shape {:?} vs {:?}",
                na.shape, nb.shape
            )));
        }
        let data: Vec<T> = na
            .data
            .iter()
            .zip(&nb.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = na.shape.clone();
        let ng = na.needs_grad || nb.needs_grad;
        Ok(self.push(shape, data, ng, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: TensorRef, factor: T) -> Result<TensorRef> {
        let node = self.node(x)?;
        let data: Vec<T> = node.data.iter().map(|&v| v * factor).collect();
        let shape = node.shape.clone();
        let ng = node.needs_grad;
        Ok(self.push(shape, data, ng, Op::Scale { input: x.0, factor }))
    }

    pub fn sum(&mut self, x: TensorRef) -> Result<TensorRef> {
        let node = self.node(x)?;
        let total: T = node.data.iter().copied().sum();
        let ng = node.needs_grad;
        Ok(self.push(vec![1], vec![total], ng, Op::Sum { input: x.0 }))
    }

    pub fn reshape(&mut self, x: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        let node = self.node(x)?;
        if numel(shape) != node.data.len() {
            return Err(CoreError::argument(format!(
                "reshape: {:?} has {} elements, target {:?} has {}",
                node.shape,
                node.data.len(),
                shape,
                numel(shape)
            )));
        }
        let data = node.data.clone();
        let ng = node.needs_grad;
        Ok(self.push(shape.to_vec(), data, ng, Op::Reshape { input: x.0 }))
    }

    /// Cross-correlation of a (Cin, D, H, W) input with (Cout, Cin, k, k, k)
    /// weights, zero padding, optional per-output-channel bias.
    pub fn conv3(
        &mut self,
        input: TensorRef,
        weights: TensorRef,
        bias: Option<TensorRef>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorRef> {
        let ni = self.node(input)?;
        let nw = self.node(weights)?;
        if ni.shape.len() != 4 {
            return Err(CoreError::argument(format!(
                "conv3 input must be rank 4 (C, D, H, W), got {:?}",
                ni.shape
            )));
        }
        if nw.shape.len() != 5 || nw.shape[2] != nw.shape[3] || nw.shape[3] != nw.shape[4] {
            return Err(CoreError::argument(format!(
                "conv3 weights must be (Cout, Cin, k, k, k), got {:?}",
                nw.shape
            )));
        }
        let (cin, d, h, w) = (ni.shape[0], ni.shape[1], ni.shape[2], ni.shape[3]);
        let (cout, k) = (nw.shape[0], nw.shape[2]);
        if nw.shape[1] != cin {
            return Err(CoreError::argument(format!(
                "conv3: input has {} channels, weights expect {}",
                cin, nw.shape[1]
            )));
        }
        if k % 2 == 0 {
            return Err(CoreError::argument("conv3 kernel extent must be odd"));
        }
        if stride == 0 {
            return Err(CoreError::argument("conv3 stride must be >= 1"));
        }
        let out_extent = |n: usize| -> Result<usize> {
            if n + 2 * pad < k {
                Err(CoreError::argument(format!(
                    "conv3: extent {} with pad {} smaller than kernel {}",
                    n, pad, k
                )))
            } else {
                Ok((n + 2 * pad - k) / stride + 1)
            }
        };
        let (od, oh, ow) = (out_extent(d)?, out_extent(h)?, out_extent(w)?);
        let mut ng = ni.needs_grad || nw.needs_grad;
        let bias_data = match bias {
            Some(b) => {
                let nb = self.node(b)?;
                if nb.shape != [cout] {
                    return Err(CoreError::argument(format!(
                        "conv3 bias must have shape [{}], got {:?}",
                        cout, nb.shape
                    )));
                }
                ng = ng || nb.needs_grad;
                Some(nb.data.clone())
            }
            None => None,
        };

        let in_data = &self.nodes[input.0].data;
        let w_data = &self.nodes[weights.0].data;
        let out_spatial = od * oh * ow;
        let mut out = vec![T::zero(); cout * out_spatial];
        out.par_chunks_mut(out_spatial)
            .enumerate()
            .for_each(|(co, chunk)| {
                let wbase = co * cin * k * k * k;
                for zo in 0..od {
                    for yo in 0..oh {
                        for xo in 0..ow {
                            let mut acc = match &bias_data {
                                Some(b) => b[co],
                                None => T::zero(),
                            };
                            for ci in 0..cin {
                                let ibase = ci * d * h * w;
                                let wc = wbase + ci * k * k * k;
                                for kz in 0..k {
                                    let iz = (zo * stride + kz).wrapping_sub(pad);
                                    if iz >= d {
                                        continue;
                                    }
                                    for ky in 0..k {
                                        let iy = (yo * stride + ky).wrapping_sub(pad);
                                        if iy >= h {
                                            continue;
                                        }
                                        let irow = ibase + (iz * h + iy) * w;
                                        let wrow = wc + (kz * k + ky) * k;
                                        for kx in 0..k {
                                            let ix = (xo * stride + kx).wrapping_sub(pad);
                                            if ix >= w {
                                                continue;
                                            }
                                            acc += in_data[irow + ix] * w_data[wrow + kx];
                                        }
                                    }
                                }
                            }
                            chunk[(zo * oh + yo) * ow + xo] = acc;
                        }
                    }
                }
            });
        Ok(self.push(
            vec![cout, od, oh, ow],
            out,
            ng,
            Op::Conv3 {
                input: input.0,
                weights: weights.0,
                bias: bias.map(|b| b.0),
                stride,
                pad,
            },
        ))
    }

    /// 2x max pooling over the three spatial axes; gradient routes to the
    /// argmax, ties to the first element in scan order.
    pub fn downsample2(&mut self, x: TensorRef) -> Result<TensorRef> {
        let node = self.node(x)?;
        if node.shape.len() != 4 {
            return Err(CoreError::argument("downsample2 expects rank 4"));
        }
        let (c, d, h, w) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(CoreError::argument(format!(
                "downsample2 needs even spatial extents, got {:?}",
                &node.shape[1..]
            )));
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let mut out = vec![T::zero(); c * od * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for ci in 0..c {
            let base = ci * d * h * w;
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0usize;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = base
                                        + ((2 * zo + dz) * h + 2 * yo + dy) * w
                                        + 2 * xo
                                        + dx;
                                    if node.data[i] > best {
                                        best = node.data[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = ((ci * od + zo) * oh + yo) * ow + xo;
                        out[o] = best;
                        argmax[o] = best_i as u32;
                    }
                }
            }
        }
        let ng = node.needs_grad;
        Ok(self.push(
            vec![c, od, oh, ow],
            out,
            ng,
            Op::MaxPool2 { input: x.0, argmax },
        ))
    }

    /// Nearest-neighbor doubling of the three spatial axes.
    pub fn upsample2(&mut self, x: TensorRef) -> Result<TensorRef> {
        let node = self.node(x)?;
        if node.shape.len() != 4 {
            return Err(CoreError::argument("upsample2 expects rank 4"));
        }
        let (c, d, h, w) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let mut out = vec![T::zero(); c * od * oh * ow];
        for ci in 0..c {
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let i = ((ci * d + zo / 2) * h + yo / 2) * w + xo / 2;
                        out[((ci * od + zo) * oh + yo) * ow + xo] = node.data[i];
                    }
                }
            }
        }
        let ng = node.needs_grad;
        Ok(self.push(vec![c, od, oh, ow], out, ng, Op::Upsample2 { input: x.0 }))
    }

    pub fn concat(&mut self, inputs: &[TensorRef], axis: usize) -> Result<TensorRef> {
        if inputs.is_empty() {
            return Err(CoreError::argument("concat of zero tensors"));
        }
        let first = self.node(inputs[0])?.shape.clone();
        if axis >= first.len() {
            return Err(CoreError::argument(format!(
                "concat axis {} out of range for rank {}",
                axis,
                first.len()
            )));
        }
        let mut axis_total = 0usize;
        let mut ng = false;
        for &t in inputs {
            let n = self.node(t)?;
            if n.shape.len() != first.len() {
                return Err(CoreError::argument("concat: rank mismatch"));
            }
            for (d, (&a, &b)) in n.shape.iter().zip(&first).enumerate() {
                if d != axis && a != b {
                    return Err(CoreError::argument(format!(
                        "concat: shapes differ off-axis: {:?} vs {:?}",
                        n.shape, first
                    )));
                }
            }
            axis_total += n.shape[axis];
            ng = ng || n.needs_grad;
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::zero(); numel(&out_shape)];
        let mut offset = 0usize;
        for &t in inputs {
            let n = &self.nodes[t.0];
            let ax = n.shape[axis];
            for o in 0..outer {
                let src = &n.data[o * ax * inner..(o + 1) * ax * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + ax * inner].copy_from_slice(src);
            }
            offset += ax;
        }
        Ok(self.push(
            out_shape,
            out,
            ng,
            Op::Concat {
                inputs: inputs.iter().map(|t| t.0).collect(),
                axis,
            },
        ))
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape.len() != 2 || nb.shape.len() != 2 {
            return Err(CoreError::argument("matmul expects rank-2 tensors"));
        }
        let (m, ka) = (na.shape[0], na.shape[1]);
        let (kb, n) = (nb.shape[0], nb.shape[1]);
        if ka != kb {
            return Err(CoreError::argument(format!(
                "matmul: inner extents {} vs {}",
                ka, kb
            )));
        }
        let ad = &na.data;
        let bd = &nb.data;
        let mut out = vec![T::zero(); m * n];
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for kk in 0..ka {
                let av = ad[i * ka + kk];
                let brow = &bd[kk * n..(kk + 1) * n];
                for (r, &bv) in row.iter_mut().zip(brow) {
                    *r += av * bv;
                }
            }
        });
        let ng = na.needs_grad || nb.needs_grad;
        Ok(self.push(vec![m, n], out, ng, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: TensorRef, perm: &[usize]) -> Result<TensorRef> {
        let node = self.node(x)?;
        let rank = node.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(CoreError::argument(format!(
                "transpose: {:?} is not a permutation of 0..{}",
                perm, rank
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| node.shape[p]).collect();
        let data = permute_data(&node.data, &node.shape, perm);
        let ng = node.needs_grad;
        Ok(self.push(
            out_shape,
            data,
            ng,
            Op::Transpose {
                input: x.0,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: TensorRef, axis: usize) -> Result<TensorRef> {
        let node = self.node(x)?;
        if axis >= node.shape.len() {
            return Err(CoreError::argument(format!(
                "softmax axis {} out of range for rank {}",
                axis,
                node.shape.len()
            )));
        }
        let shape = node.shape.clone();
        let ax = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); node.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * ax + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..ax {
                    mx = mx.max(node.data[at(j)]);
                }
                let mut denom = T::zero();
                for j in 0..ax {
                    let e = (node.data[at(j)] - mx).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..ax {
                    out[at(j)] = out[at(j)] / denom;
                }
            }
        }
        let ng = node.needs_grad;
        Ok(self.push(shape, out, ng, Op::Softmax { input: x.0, axis }))
    }

    fn check_simplex(&self, probs: TensorRef) -> Result<(usize, usize)> {
        let node = self.node(probs)?;
        let classes = node.shape[0];
        let nvox = node.data.len() / classes;
        let tol = 1e-4;
        for v in 0..nvox {
            let mut s = 0.0f64;
            for c in 0..classes {
                let p = node.data[c * nvox + v].cast_f64();
                if p < -tol {
                    return Err(CoreError::argument(format!(
                        "probs contain negative value {} at voxel {}",
                        p, v
                    )));
                }
                s += p;
            }
            if (s - 1.0).abs() > tol {
                return Err(CoreError::argument(format!(
                    "probs at voxel {} sum to {}, not a simplex",
                    v, s
                )));
            }
        }
        Ok((classes, nvox))
    }

    /// Soft Dice loss over classes: `1 - mean_c (2*sum(p t) + eps) / (sum p + sum t + eps)`.
    /// Class axis is axis 0; `target` must be one-hot with the same shape.
    pub fn dice_loss(&mut self, probs: TensorRef, target: TensorRef) -> Result<TensorRef> {
        let nt = self.node(target)?;
        let np = self.node(probs)?;
        if np.shape != nt.shape {
            return Err(CoreError::argument(format!(
                "dice_loss: probs shape {:?} vs target {:?}",
                np.shape, nt.shape
            )));
        }
        let (classes, nvox) = self.check_simplex(probs)?;
        let np = &self.nodes[probs.0];
        let nt = &self.nodes[target.0];
        let mut loss = 0.0f64;
        for c in 0..classes {
            let mut inter = 0.0f64;
            let mut psum = 0.0f64;
            let mut tsum = 0.0f64;
            for v in 0..nvox {
                let p = np.data[c * nvox + v].cast_f64();
                let t = nt.data[c * nvox + v].cast_f64();
                inter += p * t;
                psum += p;
                tsum += t;
            }
            loss += (2.0 * inter + DICE_EPS) / (psum + tsum + DICE_EPS);
        }
        let loss = 1.0 - loss / classes as f64;
        let ng = self.nodes[probs.0].needs_grad;
        Ok(self.push(
            vec![1],
            vec![T::cast_from(loss)],
            ng,
            Op::DiceLoss {
                probs: probs.0,
                target: target.0,
            },
        ))
    }

    /// Mean negative log probability of the target class; `target` one-hot.
    pub fn cross_entropy(&mut self, probs: TensorRef, target: TensorRef) -> Result<TensorRef> {
        let nt = self.node(target)?;
        let np = self.node(probs)?;
        if np.shape != nt.shape {
            return Err(CoreError::argument(format!(
                "cross_entropy: probs shape {:?} vs target {:?}",
                np.shape, nt.shape
            )));
        }
        let (classes, nvox) = self.check_simplex(probs)?;
        let np = &self.nodes[probs.0];
        let nt = &self.nodes[target.0];
        let mut loss = 0.0f64;
        for v in 0..nvox {
            let mut p_target = 0.0f64;
            for c in 0..classes {
                p_target += np.data[c * nvox + v].cast_f64() * nt.data[c * nvox + v].cast_f64();
            }
            loss -= p_target.max(1e-12).ln();
        }
        loss /= nvox as f64;
        let ng = self.nodes[probs.0].needs_grad;
        Ok(self.push(
            vec![1],
            vec![T::cast_from(loss)],
            ng,
            Op::CrossEntropy {
                probs: probs.0,
                target: target.0,
            },
        ))
    }

    /// MSE between `fixed` and `moving` warped by the displacement tensor
    /// `phi` of shape (3, D, H, W); `moving`/`fixed` hold `channels` planes
    /// on the same grid. Differentiable with respect to `phi`.
    pub fn warp_mse(
        &mut self,
        phi: TensorRef,
        moving: Vec<T>,
        fixed: Vec<T>,
        channels: usize,
    ) -> Result<TensorRef> {
        let np = self.node(phi)?;
        if np.shape.len() != 4 || np.shape[0] != 3 {
            return Err(CoreError::argument(format!(
                "warp_mse: phi must be (3, D, H, W), got {:?}",
                np.shape
            )));
        }
        let dims = (np.shape[3], np.shape[2], np.shape[1]);
        let n = dims.0 * dims.1 * dims.2;
        if moving.len() != channels * n || fixed.len() != channels * n {
            return Err(CoreError::argument(
                "warp_mse: moving/fixed length does not match phi grid",
            ));
        }
        let loss = warp_mse_forward(&np.data, &moving, &fixed, channels, dims);
        let ng = np.needs_grad;
        Ok(self.push(
            vec![1],
            vec![T::cast_from(loss)],
            ng,
            Op::WarpMse {
                phi: phi.0,
                moving,
                fixed,
                channels,
            },
        ))
    }

    /// Smoothness energy of a (3, D, H, W) displacement tensor.
    pub fn smoothness(&mut self, phi: TensorRef) -> Result<TensorRef> {
        let np = self.node(phi)?;
        if np.shape.len() != 4 || np.shape[0] != 3 {
            return Err(CoreError::argument(format!(
                "smoothness: phi must be (3, D, H, W), got {:?}",
                np.shape
            )));
        }
        let dims = (np.shape[3], np.shape[2], np.shape[1]);
        let field: Vec<f64> = np.data.iter().map(|v| v.cast_f64()).collect();
        let (energy, _) = smoothness_energy_raw(&field, dims);
        let ng = np.needs_grad;
        Ok(self.push(
            vec![1],
            vec![T::cast_from(energy)],
            ng,
            Op::Smoothness { phi: phi.0 },
        ))
    }

    /// Reverse pass from a scalar loss; gradients accumulate into every
    /// recorded tensor that needs them.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        let node = self.node(loss)?;
        if node.data.len() != 1 {
            return Err(CoreError::argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if !node.data[0].is_finite() {
            return Err(CoreError::Numerical(format!(
                "loss is not finite: {:?}",
                node.data[0]
            )));
        }
        self.nodes[loss.0].grad[0] = T::one();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        let (left, right) = self.nodes.split_at_mut(i);
        let node = &right[0];
        match &node.op {
            Op::Leaf => {}
            Op::Relu { input } => {
                let contrib: Vec<T> = left[*input]
                    .data
                    .iter()
                    .zip(&node.grad)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(&mut left[*input], &contrib);
            }
            Op::Add { a, b } => {
                let g = node.grad.clone();
                accumulate(&mut left[*a], &g);
                accumulate(&mut left[*b], &g);
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                let contrib: Vec<T> = node.grad.iter().map(|&g| g * f).collect();
                accumulate(&mut left[*input], &contrib);
            }
            Op::Sum { input } => {
                let g = node.grad[0];
                let inp = &mut left[*input];
                if inp.needs_grad {
                    for gi in inp.grad.iter_mut() {
                        *gi += g;
                    }
                }
            }
            Op::Reshape { input } => {
                let g = node.grad.clone();
                accumulate(&mut left[*input], &g);
            }
            Op::Conv3 {
                input,
                weights,
                bias,
                stride,
                pad,
            } => {
                let (input, weights, bias, stride, pad) = (*input, *weights, *bias, *stride, *pad);
                let gi = conv3_backward_input(
                    &node.grad,
                    &node.shape,
                    &left[weights].data,
                    &left[weights].shape,
                    &left[input].shape,
                    stride,
                    pad,
                    left[input].needs_grad,
                );
                let gw = conv3_backward_weights(
                    &node.grad,
                    &node.shape,
                    &left[input].data,
                    &left[input].shape,
                    &left[weights].shape,
                    stride,
                    pad,
                    left[weights].needs_grad,
                );
                if let Some(gi) = gi {
                    accumulate(&mut left[input], &gi);
                }
                if let Some(gw) = gw {
                    accumulate(&mut left[weights], &gw);
                }
                if let Some(b) = bias {
                    if left[b].needs_grad {
                        let cout = node.shape[0];
                        let spatial = node.data.len() / cout;
                        let mut gb = vec![T::zero(); cout];
                        for co in 0..cout {
                            gb[co] = node.grad[co * spatial..(co + 1) * spatial]
                                .iter()
                                .copied()
                                .sum();
                        }
                        accumulate(&mut left[b], &gb);
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let inp = &mut left[*input];
                if inp.needs_grad {
                    for (o, &src) in argmax.iter().enumerate() {
                        inp.grad[src as usize] += node.grad[o];
                    }
                }
            }
            Op::Upsample2 { input } => {
                let inp = &mut left[*input];
                if inp.needs_grad {
                    let (c, d, h, w) = (
                        inp.shape[0],
                        inp.shape[1],
                        inp.shape[2],
                        inp.shape[3],
                    );
                    let (oh, ow) = (2 * h, 2 * w);
                    for ci in 0..c {
                        for zo in 0..2 * d {
                            for yo in 0..oh {
                                for xo in 0..ow {
                                    let o = ((ci * 2 * d + zo) * oh + yo) * ow + xo;
                                    let s = ((ci * d + zo / 2) * h + yo / 2) * w + xo / 2;
                                    inp.grad[s] += node.grad[o];
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let out_shape = node.shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let grad = node.grad.clone();
                let mut offset = 0usize;
                for idx in inputs {
                    let part = &mut left[idx];
                    let ax = part.shape[axis];
                    if part.needs_grad {
                        for o in 0..outer {
                            let src_start = (o * axis_total + offset) * inner;
                            let dst = &mut part.grad[o * ax * inner..(o + 1) * ax * inner];
                            for (dv, &gv) in dst.iter_mut().zip(&grad[src_start..src_start + ax * inner]) {
                                *dv += gv;
                            }
                        }
                    }
                    offset += ax;
                }
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let m = node.shape[0];
                let n = node.shape[1];
                let k = left[a].shape[1];
                // dA = G B^T, dB = A^T G
                let ga = if left[a].needs_grad {
                    let bd = &left[b].data;
                    let mut ga = vec![T::zero(); m * k];
                    ga.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
                        for j in 0..n {
                            let g = node.grad[i * n + j];
                            for (kk, r) in row.iter_mut().enumerate() {
                                *r += g * bd[kk * n + j];
                            }
                        }
                    });
                    Some(ga)
                } else {
                    None
                };
                let gb = if left[b].needs_grad {
                    let ad = &left[a].data;
                    let mut gb = vec![T::zero(); k * n];
                    gb.par_chunks_mut(n).enumerate().for_each(|(kk, row)| {
                        for i in 0..m {
                            let av = ad[i * k + kk];
                            for (j, r) in row.iter_mut().enumerate() {
                                *r += av * node.grad[i * n + j];
                            }
                        }
                    });
                    Some(gb)
                } else {
                    None
                };
                if let Some(ga) = ga {
                    accumulate(&mut left[a], &ga);
                }
                if let Some(gb) = gb {
                    accumulate(&mut left[b], &gb);
                }
            }
            Op::Transpose { input, perm } => {
                let inverse = invert_perm(perm);
                let contrib = permute_data(&node.grad, &node.shape, &inverse);
                accumulate(&mut left[*input], &contrib);
            }
            Op::Softmax { input, axis } => {
                let axis = *axis;
                let shape = &node.shape;
                let ax = shape[axis];
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut contrib = vec![T::zero(); node.data.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * ax + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..ax {
                            dot += node.grad[at(j)] * node.data[at(j)];
                        }
                        for j in 0..ax {
                            contrib[at(j)] = node.data[at(j)] * (node.grad[at(j)] - dot);
                        }
                    }
                }
                accumulate(&mut left[*input], &contrib);
            }
            Op::DiceLoss { probs, target } => {
                let g = node.grad[0].cast_f64();
                let np = &left[*probs];
                let nt = &left[*target];
                let classes = np.shape[0];
                let nvox = np.data.len() / classes;
                let mut contrib = vec![T::zero(); np.data.len()];
                for c in 0..classes {
                    let mut inter = 0.0f64;
                    let mut psum = 0.0f64;
                    let mut tsum = 0.0f64;
                    for v in 0..nvox {
                        inter += np.data[c * nvox + v].cast_f64() * nt.data[c * nvox + v].cast_f64();
                        psum += np.data[c * nvox + v].cast_f64();
                        tsum += nt.data[c * nvox + v].cast_f64();
                    }
                    let num = 2.0 * inter + DICE_EPS;
                    let den = psum + tsum + DICE_EPS;
                    for v in 0..nvox {
                        let t = nt.data[c * nvox + v].cast_f64();
                        // d/dp of -(1/C) * num/den
                        let d = -(2.0 * t * den - num) / (den * den) / classes as f64;
                        contrib[c * nvox + v] = T::cast_from(g * d);
                    }
                }
                accumulate(&mut left[*probs], &contrib);
            }
            Op::CrossEntropy { probs, target } => {
                let g = node.grad[0].cast_f64();
                let np = &left[*probs];
                let nt = &left[*target];
                let classes = np.shape[0];
                let nvox = np.data.len() / classes;
                let mut contrib = vec![T::zero(); np.data.len()];
                for v in 0..nvox {
                    let mut p_target = 0.0f64;
                    for c in 0..classes {
                        p_target += np.data[c * nvox + v].cast_f64() * nt.data[c * nvox + v].cast_f64();
                    }
                    let p_target = p_target.max(1e-12);
                    for c in 0..classes {
                        let t = nt.data[c * nvox + v].cast_f64();
                        if t != 0.0 {
                            contrib[c * nvox + v] =
                                T::cast_from(-g * t / (p_target * nvox as f64));
                        }
                    }
                }
                accumulate(&mut left[*probs], &contrib);
            }
            Op::WarpMse {
                phi,
                moving,
                fixed,
                channels,
            } => {
                let g = node.grad[0];
                let np = &left[*phi];
                let dims = (np.shape[3], np.shape[2], np.shape[1]);
                let contrib = warp_mse_backward(&np.data, moving, fixed, *channels, dims, g);
                accumulate(&mut left[*phi], &contrib);
            }
            Op::Smoothness { phi } => {
                let g = node.grad[0].cast_f64();
                let np = &left[*phi];
                let dims = (np.shape[3], np.shape[2], np.shape[1]);
                let field: Vec<f64> = np.data.iter().map(|v| v.cast_f64()).collect();
                let (_, grad) = smoothness_energy_raw(&field, dims);
                let contrib: Vec<T> = grad.iter().map(|&v| T::cast_from(g * v)).collect();
                accumulate(&mut left[*phi], &contrib);
            }
        }
    }
}

/// Gather-form input gradient of conv3: deterministic regardless of thread
/// count because every input element is produced by one fixed-order sum.
#[allow(clippy::too_many_arguments)]
fn conv3_backward_input<T: Real>(
    gout: &[T],
    out_shape: &[usize],
    weights: &[T],
    w_shape: &[usize],
    in_shape: &[usize],
    stride: usize,
    pad: usize,
    needed: bool,
) -> Option<Vec<T>> {
    if !needed {
        return None;
    }
    let (cout, od, oh, ow) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let (cin, k) = (w_shape[1], w_shape[2]);
    let (d, h, w) = (in_shape[1], in_shape[2], in_shape[3]);
    let mut gi = vec![T::zero(); cin * d * h * w];
    gi.par_chunks_mut(d * h * w).enumerate().for_each(|(ci, chunk)| {
        for iz in 0..d {
            for iy in 0..h {
                for ix in 0..w {
                    let mut acc = T::zero();
                    for kz in 0..k {
                        let oz = iz + pad;
                        if oz < kz || (oz - kz) % stride != 0 {
                            continue;
                        }
                        let zo = (oz - kz) / stride;
                        if zo >= od {
                            continue;
                        }
                        for ky in 0..k {
                            let oy = iy + pad;
                            if oy < ky || (oy - ky) % stride != 0 {
                                continue;
                            }
                            let yo = (oy - ky) / stride;
                            if yo >= oh {
                                continue;
                            }
                            for kx in 0..k {
                                let ox = ix + pad;
                                if ox < kx || (ox - kx) % stride != 0 {
                                    continue;
                                }
                                let xo = (ox - kx) / stride;
                                if xo >= ow {
                                    continue;
                                }
                                for co in 0..cout {
                                    let wv = weights
                                        [(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                                    let gv = gout[((co * od + zo) * oh + yo) * ow + xo];
                                    acc += wv * gv;
                                }
                            }
                        }
                    }
                    chunk[(iz * h + iy) * w + ix] = acc;
                }
            }
        }
    });
    Some(gi)
}

#[allow(clippy::too_many_arguments)]
fn conv3_backward_weights<T: Real>(
    gout: &[T],
    out_shape: &[usize],
    input: &[T],
    in_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
    needed: bool,
) -> Option<Vec<T>> {
    if !needed {
        return None;
    }
    let (cout, od, oh, ow) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let (cin, k) = (w_shape[1], w_shape[2]);
    let (d, h, w) = (in_shape[1], in_shape[2], in_shape[3]);
    let mut gw = vec![T::zero(); cout * cin * k * k * k];
    gw.par_chunks_mut(cin * k * k * k)
        .enumerate()
        .for_each(|(co, chunk)| {
            for ci in 0..cin {
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = T::zero();
                            for zo in 0..od {
                                let iz = (zo * stride + kz).wrapping_sub(pad);
                                if iz >= d {
                                    continue;
                                }
                                for yo in 0..oh {
                                    let iy = (yo * stride + ky).wrapping_sub(pad);
                                    if iy >= h {
                                        continue;
                                    }
                                    for xo in 0..ow {
                                        let ix = (xo * stride + kx).wrapping_sub(pad);
                                        if ix >= w {
                                            continue;
                                        }
                                        acc += input[((ci * d + iz) * h + iy) * w + ix]
                                            * gout[((co * od + zo) * oh + yo) * ow + xo];
                                    }
                                }
                            }
                            chunk[((ci * k + kz) * k + ky) * k + kx] = acc;
                        }
                    }
                }
            }
        });
    Some(gw)
}

fn accumulate<T: Real>(node: &mut Node<T>, contrib: &[T]) {
    if !node.needs_grad {
        return;
    }
    for (g, &c) in node.grad.iter_mut().zip(contrib) {
        *g += c;
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![data[0]; data.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[d]];
        }
        *slot = data[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Trilinear sample of one channel plane with its coordinate derivatives,
/// border-clamped; the derivative along a clamped axis is zero.
pub(crate) fn trilinear_with_grad<T: Real>(
    data: &[T],
    dims: (usize, usize, usize),
    p: (f64, f64, f64),
) -> (f64, [f64; 3]) {
    let (nx, ny, nz) = dims;
    let clamp = |v: f64, n: usize| -> (f64, bool) {
        let max = (n - 1) as f64;
        if v <= 0.0 {
            (0.0, true)
        } else if v >= max {
            (max, true)
        } else {
            (v, false)
        }
    };
    let (cx, clx) = clamp(p.0, nx);
    let (cy, cly) = clamp(p.1, ny);
    let (cz, clz) = clamp(p.2, nz);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let z0 = cz.floor() as usize;
    let x1 = (x0 + 1).min(nx - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let z1 = (z0 + 1).min(nz - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let fz = cz - z0 as f64;
    let v = |x: usize, y: usize, z: usize| data[(z * ny + y) * nx + x].cast_f64();

    let v000 = v(x0, y0, z0);
    let v100 = v(x1, y0, z0);
    let v010 = v(x0, y1, z0);
    let v110 = v(x1, y1, z0);
    let v001 = v(x0, y0, z1);
    let v101 = v(x1, y0, z1);
    let v011 = v(x0, y1, z1);
    let v111 = v(x1, y1, z1);

    let c00 = v000 * (1.0 - fx) + v100 * fx;
    let c10 = v010 * (1.0 - fx) + v110 * fx;
    let c01 = v001 * (1.0 - fx) + v101 * fx;
    let c11 = v011 * (1.0 - fx) + v111 * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    let value = c0 * (1.0 - fz) + c1 * fz;

    let dx = ((v100 - v000) * (1.0 - fy) + (v110 - v010) * fy) * (1.0 - fz)
        + ((v101 - v001) * (1.0 - fy) + (v111 - v011) * fy) * fz;
    let dy = (c10 - c00) * (1.0 - fz) + (c11 - c01) * fz;
    let dz = c1 - c0;
    (
        value,
        [
            if clx { 0.0 } else { dx },
            if cly { 0.0 } else { dy },
            if clz { 0.0 } else { dz },
        ],
    )
}

fn warp_mse_forward<T: Real>(
    phi: &[T],
    moving: &[T],
    fixed: &[T],
    channels: usize,
    dims: (usize, usize, usize),
) -> f64 {
    let (nx, ny, nz) = dims;
    let n = nx * ny * nz;
    let mut acc = 0.0f64;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                let p = (
                    x as f64 + phi[i].cast_f64(),
                    y as f64 + phi[n + i].cast_f64(),
                    z as f64 + phi[2 * n + i].cast_f64(),
                );
                for c in 0..channels {
                    let (w, _) = trilinear_with_grad(&moving[c * n..(c + 1) * n], dims, p);
                    let r = w - fixed[c * n + i].cast_f64();
                    acc += r * r;
                }
            }
        }
    }
    acc / (channels * n) as f64
}

fn warp_mse_backward<T: Real>(
    phi: &[T],
    moving: &[T],
    fixed: &[T],
    channels: usize,
    dims: (usize, usize, usize),
    gout: T,
) -> Vec<T> {
    let (nx, ny, nz) = dims;
    let n = nx * ny * nz;
    let scale = 2.0 * gout.cast_f64() / (channels * n) as f64;
    let mut grad = vec![T::zero(); 3 * n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                let p = (
                    x as f64 + phi[i].cast_f64(),
                    y as f64 + phi[n + i].cast_f64(),
                    z as f64 + phi[2 * n + i].cast_f64(),
                );
                let mut g = [0.0f64; 3];
                for c in 0..channels {
                    let (w, d) = trilinear_with_grad(&moving[c * n..(c + 1) * n], dims, p);
                    let r = w - fixed[c * n + i].cast_f64();
                    for k in 0..3 {
                        g[k] += scale * r * d[k];
                    }
                }
                grad[i] = T::cast_from(g[0]);
                grad[n + i] = T::cast_from(g[1]);
                grad[2 * n + i] = T::cast_from(g[2]);
            }
        }
    }
    grad
}
