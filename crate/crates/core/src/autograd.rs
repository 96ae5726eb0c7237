//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient
//! of a scalar root with respect to every recorded node. Feature maps are
//! `[C, H, W]` (still) or `[C, T, H, W]` (clip); row batches are `[N, D]`.

use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, Layout, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Kernel/stride/padding along (time, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Square spatial convolution with no temporal extent.
    pub fn conv2d(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: [1, kernel, kernel],
            stride: [1, stride, stride],
            padding: [0, padding, padding],
        }
    }

    pub fn conv3d(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn is_2d(&self) -> bool {
        self.kernel[0] == 1 && self.stride[0] == 1 && self.padding[0] == 0
    }

    /// Output length along `axis` (0 = time, 1 = height, 2 = width).
    pub fn output_len(&self, input: usize, axis: usize) -> usize {
        let padded = input + 2 * self.padding[axis];
        assert!(
            padded >= self.kernel[axis],
            "input length {input} too small for kernel {}",
            self.kernel[axis]
        );
        (padded - self.kernel[axis]) / self.stride[axis] + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// One RoI to be pooled from a specific pyramid level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSpec {
    /// Index into the `levels` passed to [`Graph::roi_align`].
    pub level: usize,
    /// `[x1, y1, x2, y2]` in input-image pixels.
    pub bbox: [f64; 4],
    /// Multiplier from image pixels to level pixels (1 / stride).
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiAlignConfig {
    pub output_size: usize,
    /// Bilinear samples per bin along each axis.
    pub sampling_ratio: usize,
}

enum Op {
    Input,
    Param,
    Add(Var, Var),
    Relu(Var),
    Softplus(Var),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
        in_dims: [usize; 4],
        out_dims: [usize; 3],
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    NearestLift {
        input: Var,
        frames: usize,
        src_rows: Vec<usize>,
        src_cols: Vec<usize>,
    },
    Subsample2(Var),
    GlobalAvgPool(Var),
    RepeatRows(Var),
    ConcatCols(Var, Var),
    RoiAlign {
        levels: Vec<Var>,
        taps: Vec<Vec<Tap>>,
        rois: Vec<RoiSpec>,
        bins: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        norm: f64,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<(usize, f64)>,
        norm: f64,
    },
    SmoothL1 {
        pred: Var,
        targets: Vec<(usize, f64)>,
        beta: f64,
        norm: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
    Dot {
        input: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of a backward pass, indexed by node.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }
}

/// A bilinear sampling tap: output bin, flat spatial index in the level map,
/// and its weight (already divided by the sample count).
#[derive(Clone, Copy, Debug)]
struct Tap {
    bin: usize,
    pixel: usize,
    weight: f64,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param,
            needs_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf; repeated calls for the same id share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            needs_grad: true,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x), &[x])
    }

    /// Convolution of a `[C,H,W]` map (2D geometry) or `[C,T,H,W]` clip.
    ///
    /// The weight is `[O, C, kh, kw]` or `[O, C, kt, kh, kw]`.
    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, geometry: ConvGeometry) -> Var {
        let x = self.value(input);
        let in_dims = match x.rank() {
            3 => {
                assert!(geometry.is_2d(), "conv: 3D geometry applied to a 2D map");
                let (c, h, w) = x.chw();
                [c, 1, h, w]
            }
            4 => {
                let (c, t, h, w) = x.cthw();
                [c, t, h, w]
            }
            r => panic!("conv: unsupported input rank {r}"),
        };
        let wt = self.value(weight);
        let out_ch = wt.shape()[0];
        assert_eq!(
            wt.shape()[1],
            in_dims[0],
            "conv: weight expects {} input channels, got {}",
            wt.shape()[1],
            in_dims[0]
        );
        let k = in_dims[0] * geometry.patch_len();
        assert_eq!(wt.numel(), out_ch * k, "conv: weight shape does not match geometry");
        let out_dims = [
            geometry.output_len(in_dims[1], 0),
            geometry.output_len(in_dims[2], 1),
            geometry.output_len(in_dims[3], 2),
        ];
        let n: usize = out_dims.iter().product();
        let cols = im2col(x.data(), in_dims, out_dims, &geometry);
        let mut out = vec![0.0; out_ch * n];
        gemm(out_ch, k, n, wt.data(), Layout::Normal, &cols, Layout::Normal, 0.0, &mut out);
        if let Some(b) = bias {
            let bv = self.value(b);
            assert_eq!(bv.numel(), out_ch, "conv: bias size");
            for (o, row) in out.chunks_mut(n).enumerate() {
                let bo = bv.data()[o];
                for v in row {
                    *v += bo;
                }
            }
        }
        let shape: Vec<usize> = if x.rank() == 3 {
            vec![out_ch, out_dims[1], out_dims[2]]
        } else {
            vec![out_ch, out_dims[0], out_dims[1], out_dims[2]]
        };
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Conv {
                input,
                weight,
                bias,
                geometry,
                in_dims,
                out_dims,
                cols,
            },
            &inputs,
        )
    }

    /// `y = x Wᵀ + b` with `x: [N, in]`, `W: [out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        assert_eq!(x.rank(), 2, "linear: input must be [N, in]");
        let (n, i) = (x.shape()[0], x.shape()[1]);
        let o = w.shape()[0];
        assert_eq!(w.shape(), &[o, i], "linear: weight shape {:?} vs input {:?}", w.shape(), x.shape());
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, x.data(), Layout::Normal, w.data(), Layout::Transposed, 0.0, &mut out);
        if let Some(b) = bias {
            let bv = self.value(b);
            assert_eq!(bv.numel(), o, "linear: bias size");
            for row in out.chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            Tensor::from_vec(&[n, o], out),
            Op::Linear { input, weight, bias },
            &inputs,
        )
    }

    /// Nearest-neighbour resize to `(height, width)` followed by a mean over
    /// the temporal axis when the input is a `[C,T,h,w]` clip.
    ///
    /// Source row for output row `y` is `floor(y · h / height)`.
    pub fn nearest_lift(&mut self, input: Var, height: usize, width: usize) -> Var {
        let x = self.value(input);
        let (c, t, h, w) = match x.rank() {
            3 => {
                let (c, h, w) = x.chw();
                (c, 1, h, w)
            }
            4 => x.cthw(),
            r => panic!("nearest_lift: unsupported rank {r}"),
        };
        let src_rows: Vec<usize> = (0..height).map(|y| y * h / height).collect();
        let src_cols: Vec<usize> = (0..width).map(|xx| xx * w / width).collect();
        let data = x.data();
        let inv_t = 1.0 / t as f64;
        let mut out = vec![0.0; c * height * width];
        for ch in 0..c {
            for (oy, &sy) in src_rows.iter().enumerate() {
                for (ox, &sx) in src_cols.iter().enumerate() {
                    let mut acc = 0.0;
                    for f in 0..t {
                        acc += data[((ch * t + f) * h + sy) * w + sx];
                    }
                    out[(ch * height + oy) * width + ox] = if t == 1 { acc } else { acc * inv_t };
                }
            }
        }
        self.push(
            Tensor::from_vec(&[c, height, width], out),
            Op::NearestLift {
                input,
                frames: t,
                src_rows,
                src_cols,
            },
            &[input],
        )
    }

    /// Max pooling with kernel 1 and stride 2 (i.e. every other pixel).
    pub fn subsample2(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (c, h, w) = x.chw();
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let d = x.data();
        let out = Tensor::from_fn(&[c, ho, wo], |i| {
            let ch = i / (ho * wo);
            let y = (i / wo) % ho;
            let xx = i % wo;
            d[(ch * h + 2 * y) * w + 2 * xx]
        });
        self.push(out, Op::Subsample2(input), &[input])
    }

    /// Spatial mean of a `[C,H,W]` map as a `[1, C]` row.
    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (c, h, w) = x.chw();
        let hw = (h * w) as f64;
        let d = x.data();
        let out = Tensor::from_fn(&[1, c], |ch| {
            d[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw
        });
        self.push(out, Op::GlobalAvgPool(input), &[input])
    }

    /// Repeats a `[1, D]` row `rows` times.
    pub fn repeat_rows(&mut self, input: Var, rows: usize) -> Var {
        let x = self.value(input);
        assert_eq!(x.shape()[0], 1, "repeat_rows: expected a single row");
        let d = x.shape()[1];
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(x.data());
        }
        self.push(Tensor::from_vec(&[rows, d], out), Op::RepeatRows(input), &[input])
    }

    /// `[N, a] ++ [N, b] → [N, a + b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let n = va.shape()[0];
        assert_eq!(vb.shape()[0], n, "concat_cols: row mismatch");
        let (da, db) = (va.shape()[1], vb.shape()[1]);
        let mut out = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        self.push(Tensor::from_vec(&[n, da + db], out), Op::ConcatCols(a, b), &[a, b])
    }

    /// Pixel-aligned RoIAlign over several `[C,H,W]` levels.
    ///
    /// Returns `[R, C · S · S]` rows with channel-major bins.
    pub fn roi_align(&mut self, levels: &[Var], rois: &[RoiSpec], config: RoiAlignConfig) -> Var {
        let channels = self.value(levels[0]).chw().0;
        for &l in levels {
            assert_eq!(self.value(l).chw().0, channels, "roi_align: channel mismatch across levels");
        }
        let s = config.output_size;
        let bins = s * s;
        let mut out = vec![0.0; rois.len() * channels * bins];
        let mut all_taps = Vec::with_capacity(rois.len());
        for (r, roi) in rois.iter().enumerate() {
            let map = self.value(levels[roi.level]);
            let (_, h, w) = map.chw();
            let taps = roi_taps(roi, h, w, config);
            let d = map.data();
            let dst = &mut out[r * channels * bins..(r + 1) * channels * bins];
            for ch in 0..channels {
                let plane = &d[ch * h * w..(ch + 1) * h * w];
                let orow = &mut dst[ch * bins..(ch + 1) * bins];
                for t in &taps {
                    orow[t.bin] += t.weight * plane[t.pixel];
                }
            }
            all_taps.push(taps);
        }
        self.push(
            Tensor::from_vec(&[rois.len(), channels * bins], out),
            Op::RoiAlign {
                levels: levels.to_vec(),
                taps: all_taps,
                rois: rois.to_vec(),
                bins,
            },
            levels,
        )
    }

    /// Sum of `-log softmax(logits)[label]` over rows, divided by `norm`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], norm: f64) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rank(), 2);
        let (n, k) = (x.shape()[0], x.shape()[1]);
        assert_eq!(labels.len(), n, "cross entropy: one label per row");
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = x.row(r);
            let p = softmax(row);
            assert!(labels[r] < k, "cross entropy: label out of range");
            loss -= log_softmax_at(row, labels[r]);
            probs[r * k..(r + 1) * k].copy_from_slice(&p);
        }
        let value = if n == 0 { 0.0 } else { loss / norm };
        self.push(
            Tensor::scalar(value),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                norm,
                probs,
            },
            &[logits],
        )
    }

    /// Sum of binary cross-entropy with logits at the given flat indices, over `norm`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[(usize, f64)], norm: f64) -> Var {
        let x = self.value(logits).data();
        let loss: f64 = targets
            .iter()
            .map(|&(i, t)| {
                let z = x[i];
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let value = if targets.is_empty() { 0.0 } else { loss / norm };
        self.push(
            Tensor::scalar(value),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                norm,
            },
            &[logits],
        )
    }

    /// Sum of smooth-L1 terms at the given flat indices, over `norm`.
    pub fn smooth_l1(&mut self, pred: Var, targets: &[(usize, f64)], beta: f64, norm: f64) -> Var {
        let x = self.value(pred).data();
        let loss: f64 = targets.iter().map(|&(i, t)| smooth_l1(x[i] - t, beta)).sum();
        let value = if targets.is_empty() { 0.0 } else { loss / norm };
        self.push(
            Tensor::scalar(value),
            Op::SmoothL1 {
                pred,
                targets: targets.to_vec(),
                beta,
                norm,
            },
            &[pred],
        )
    }

    /// `Σ wᵢ · xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in terms {
            let val = self.value(v);
            assert_eq!(val.numel(), 1, "weighted_sum: operands must be scalars");
            total += w * val.item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// `Σ x ⊙ w` for a constant `w` of the same size as `x`.
    pub fn dot(&mut self, input: Var, weights: &Tensor) -> Var {
        let x = self.value(input);
        assert_eq!(x.numel(), weights.numel(), "dot: size mismatch");
        let total: f64 = x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.push(
            Tensor::scalar(total),
            Op::Dot {
                input,
                weights: weights.clone().reshape(x.shape()),
            },
            &[input],
        )
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).numel(), 1, "backward: root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Grads { by_node: grads }
    }

    /// Parameter gradients of a backward pass, keyed by parameter id.
    pub fn param_grads<'a>(&'a self, grads: &'a Grads) -> impl Iterator<Item = (ParamId, &'a Tensor)> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| {
            let id = n.param?;
            grads.by_node[i].as_ref().map(|g| (id, g))
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = Tensor::from_fn(xv.shape(), |i| {
                    if xv.data()[i] > 0.0 {
                        g.data()[i]
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *x, d);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let d = Tensor::from_fn(xv.shape(), |i| g.data()[i] * sigmoid(xv.data()[i]));
                accumulate(grads, *x, d);
            }
            Op::Conv {
                input,
                weight,
                bias,
                geometry,
                in_dims,
                out_dims,
                cols,
            } => {
                let wt = self.value(*weight);
                let out_ch = wt.shape()[0];
                let n: usize = out_dims.iter().product();
                let k = in_dims[0] * geometry.patch_len();
                if self.wants(*weight) {
                    let mut dw = vec![0.0; out_ch * k];
                    gemm(out_ch, n, k, g.data(), Layout::Normal, cols, Layout::Transposed, 0.0, &mut dw);
                    accumulate(grads, *weight, Tensor::from_vec(wt.shape(), dw));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let db: Vec<f64> = g.data().chunks(n).map(|r| r.iter().sum()).collect();
                        accumulate(grads, *b, Tensor::from_vec(&[out_ch], db));
                    }
                }
                if self.wants(*input) {
                    let mut dcols = vec![0.0; k * n];
                    gemm(k, out_ch, n, wt.data(), Layout::Transposed, g.data(), Layout::Normal, 0.0, &mut dcols);
                    let dx = col2im(&dcols, *in_dims, *out_dims, geometry);
                    accumulate(grads, *input, Tensor::from_vec(self.value(*input).shape(), dx));
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, i) = (x.shape()[0], x.shape()[1]);
                let o = w.shape()[0];
                if self.wants(*input) {
                    let mut dx = vec![0.0; n * i];
                    gemm(n, o, i, g.data(), Layout::Normal, w.data(), Layout::Normal, 0.0, &mut dx);
                    accumulate(grads, *input, Tensor::from_vec(&[n, i], dx));
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; o * i];
                    gemm(o, n, i, g.data(), Layout::Transposed, x.data(), Layout::Normal, 0.0, &mut dw);
                    accumulate(grads, *weight, Tensor::from_vec(&[o, i], dw));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut db = vec![0.0; o];
                        for row in g.data().chunks(o) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, Tensor::from_vec(&[o], db));
                    }
                }
            }
            Op::NearestLift {
                input,
                frames,
                src_rows,
                src_cols,
            } => {
                let x = self.value(*input);
                let (c, t) = (x.shape()[0], *frames);
                let (h, w) = (x.shape()[x.rank() - 2], x.shape()[x.rank() - 1]);
                let (height, width) = (src_rows.len(), src_cols.len());
                let inv_t = 1.0 / t as f64;
                let mut dx = vec![0.0; x.numel()];
                for ch in 0..c {
                    for (oy, &sy) in src_rows.iter().enumerate() {
                        for (ox, &sx) in src_cols.iter().enumerate() {
                            let gv = g.data()[(ch * height + oy) * width + ox] * inv_t;
                            for f in 0..t {
                                dx[((ch * t + f) * h + sy) * w + sx] += gv;
                            }
                        }
                    }
                }
                accumulate(grads, *input, Tensor::from_vec(x.shape(), dx));
            }
            Op::Subsample2(input) => {
                let x = self.value(*input);
                let (c, h, w) = x.chw();
                let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                let mut dx = vec![0.0; x.numel()];
                for ch in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            dx[(ch * h + 2 * y) * w + 2 * xx] = g.data()[(ch * ho + y) * wo + xx];
                        }
                    }
                }
                accumulate(grads, *input, Tensor::from_vec(x.shape(), dx));
            }
            Op::GlobalAvgPool(input) => {
                let x = self.value(*input);
                let (c, h, w) = x.chw();
                let hw = h * w;
                let dx = Tensor::from_fn(&[c, h, w], |i| g.data()[i / hw] / hw as f64);
                accumulate(grads, *input, dx);
            }
            Op::RepeatRows(input) => {
                let d = self.value(*input).shape()[1];
                let mut dx = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (a, b) in dx.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                accumulate(grads, *input, Tensor::from_vec(&[1, d], dx));
            }
            Op::ConcatCols(a, b) => {
                let da = self.value(*a).shape()[1];
                let db = self.value(*b).shape()[1];
                let n = g.shape()[0];
                let mut ga = Vec::with_capacity(n * da);
                let mut gb = Vec::with_capacity(n * db);
                for r in 0..n {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::from_vec(&[n, da], ga));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::from_vec(&[n, db], gb));
                }
            }
            Op::RoiAlign {
                levels,
                taps,
                rois,
                bins,
            } => {
                let channels = self.value(levels[0]).chw().0;
                let mut dlevels: Vec<Option<Vec<f64>>> = vec![None; levels.len()];
                for (r, (roi, roi_taps)) in rois.iter().zip(taps).enumerate() {
                    let map = self.value(levels[roi.level]);
                    let (_, h, w) = map.chw();
                    let dl = dlevels[roi.level].get_or_insert_with(|| vec![0.0; map.numel()]);
                    let grow = &g.data()[r * channels * bins..(r + 1) * channels * bins];
                    for ch in 0..channels {
                        let plane = &mut dl[ch * h * w..(ch + 1) * h * w];
                        let gb = &grow[ch * bins..(ch + 1) * bins];
                        for t in roi_taps {
                            plane[t.pixel] += t.weight * gb[t.bin];
                        }
                    }
                }
                for (l, dl) in dlevels.into_iter().enumerate() {
                    if let Some(dl) = dl {
                        if self.wants(levels[l]) {
                            let shape = self.value(levels[l]).shape().to_vec();
                            accumulate(grads, levels[l], Tensor::from_vec(&shape, dl));
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                norm,
                probs,
            } => {
                let x = self.value(*logits);
                let k = x.shape()[1];
                let scale = g.item() / norm;
                let mut dx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= 1.0;
                }
                for v in &mut dx {
                    *v *= scale;
                }
                accumulate(grads, *logits, Tensor::from_vec(x.shape(), dx));
            }
            Op::BceWithLogits {
                logits,
                targets,
                norm,
            } => {
                let x = self.value(*logits);
                let scale = g.item() / norm;
                let mut dx = vec![0.0; x.numel()];
                for &(i, t) in targets {
                    dx[i] += (sigmoid(x.data()[i]) - t) * scale;
                }
                accumulate(grads, *logits, Tensor::from_vec(x.shape(), dx));
            }
            Op::SmoothL1 {
                pred,
                targets,
                beta,
                norm,
            } => {
                let x = self.value(*pred);
                let scale = g.item() / norm;
                let mut dx = vec![0.0; x.numel()];
                for &(i, t) in targets {
                    dx[i] += smooth_l1_grad(x.data()[i] - t, *beta) * scale;
                }
                accumulate(grads, *pred, Tensor::from_vec(x.shape(), dx));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        accumulate(grads, v, Tensor::scalar(g.item() * w));
                    }
                }
            }
            Op::Dot { input, weights } => {
                let scale = g.item();
                accumulate(grads, *input, weights.map(|w| w * scale));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn im2col(x: &[f64], in_dims: [usize; 4], out_dims: [usize; 3], geo: &ConvGeometry) -> Vec<f64> {
    let [c, t, h, w] = in_dims;
    let [ot, oh, ow] = out_dims;
    let [kt, kh, kw] = geo.kernel;
    let [st, sh, sw] = geo.stride;
    let [pt, ph, pw] = geo.padding;
    let n = ot * oh * ow;
    let mut cols = vec![0.0; c * kt * kh * kw * n];
    let mut row = 0;
    for ch in 0..c {
        for dt in 0..kt {
            for dy in 0..kh {
                for dx in 0..kw {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for zt in 0..ot {
                        let it = (zt * st + dt) as isize - pt as isize;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for zy in 0..oh {
                            let iy = (zy * sh + dy) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_base = ((ch * t + it as usize) * h + iy as usize) * w;
                            let dst_base = (zt * oh + zy) * ow;
                            for zx in 0..ow {
                                let ix = (zx * sw + dx) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[dst_base + zx] = x[src_base + ix as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], in_dims: [usize; 4], out_dims: [usize; 3], geo: &ConvGeometry) -> Vec<f64> {
    let [c, t, h, w] = in_dims;
    let [ot, oh, ow] = out_dims;
    let [kt, kh, kw] = geo.kernel;
    let [st, sh, sw] = geo.stride;
    let [pt, ph, pw] = geo.padding;
    let n = ot * oh * ow;
    let mut x = vec![0.0; c * t * h * w];
    let mut row = 0;
    for ch in 0..c {
        for dt in 0..kt {
            for dy in 0..kh {
                for dx in 0..kw {
                    let src = &cols[row * n..(row + 1) * n];
                    for zt in 0..ot {
                        let it = (zt * st + dt) as isize - pt as isize;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for zy in 0..oh {
                            let iy = (zy * sh + dy) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_base = ((ch * t + it as usize) * h + iy as usize) * w;
                            let src_base = (zt * oh + zy) * ow;
                            for zx in 0..ow {
                                let ix = (zx * sw + dx) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    x[dst_base + ix as usize] += src[src_base + zx];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

/// Bilinear value of a single-channel `h × w` plane at continuous `(y, x)`,
/// where integer coordinates are pixel centres. Points more than one pixel
/// outside the plane read as zero; points inside the border band clamp.
pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    bilinear_taps(h, w, y, x)
        .iter()
        .map(|&(p, wt)| wt * plane[p])
        .sum()
}

fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> Vec<(usize, f64)> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return Vec::new();
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y_low = y.floor() as usize;
    let y_high;
    if y_low >= h - 1 {
        y_low = h - 1;
        y_high = h - 1;
        y = y_low as f64;
    } else {
        y_high = y_low + 1;
    }
    let mut x_low = x.floor() as usize;
    let x_high;
    if x_low >= w - 1 {
        x_low = w - 1;
        x_high = w - 1;
        x = x_low as f64;
    } else {
        x_high = x_low + 1;
    }
    let ly = y - y_low as f64;
    let lx = x - x_low as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    vec![
        (y_low * w + x_low, hy * hx),
        (y_low * w + x_high, hy * lx),
        (y_high * w + x_low, ly * hx),
        (y_high * w + x_high, ly * lx),
    ]
}

fn roi_taps(roi: &RoiSpec, h: usize, w: usize, config: RoiAlignConfig) -> Vec<Tap> {
    let s = config.output_size;
    let grid = config.sampling_ratio.max(1);
    let [x1, y1, x2, y2] = roi.bbox;
    let start_x = x1 * roi.scale - 0.5;
    let start_y = y1 * roi.scale - 0.5;
    let bin_w = (x2 - x1) * roi.scale / s as f64;
    let bin_h = (y2 - y1) * roi.scale / s as f64;
    let inv_count = 1.0 / (grid * grid) as f64;
    let mut taps = Vec::with_capacity(s * s * grid * grid * 4);
    for by in 0..s {
        for bx in 0..s {
            let bin = by * s + bx;
            for iy in 0..grid {
                let y = start_y + by as f64 * bin_h + (iy as f64 + 0.5) * bin_h / grid as f64;
                for ix in 0..grid {
                    let x = start_x + bx as f64 * bin_w + (ix as f64 + 0.5) * bin_w / grid as f64;
                    for (pixel, wt) in bilinear_taps(h, w, y, x) {
                        taps.push(Tap {
                            bin,
                            pixel,
                            weight: wt * inv_count,
                        });
                    }
                }
            }
        }
    }
    taps
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax_at(row: &[f64], i: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[i] - lse
}

/// Smooth-L1 with transition point `beta`: `0.5 d² / β` inside, `|d| − β/2` outside.
pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if beta > 0.0 && a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if beta > 0.0 && d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(root)/d(leaf) for every leaf element.
    fn check_grads(leaves: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.variable(t.clone())).collect();
        let root = f(&mut g, &vars);
        let grads = g.backward(root);
        let eval = |ls: &[Tensor]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = ls.iter().map(|t| g.variable(t.clone())).collect();
            let r = f(&mut g, &vs);
            g.value(r).item()
        };
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.wrt(vars[li]).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape()));
            for i in 0..leaf.numel() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[i] += eps;
                let mut minus = leaves.clone();
                minus[li].data_mut()[i] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err < tol, "leaf {li} elem {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Projects an arbitrary node onto a scalar with fixed random weights.
    fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
        let shape = g.value(v).shape().to_vec();
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<(usize, f64)> = (0..n).map(|i| (i, rng.gen_range(-2.0..2.0))).collect();
        // Quadratic branch of smooth-L1 keeps the projection smooth.
        g.smooth_l1(v, &targets, 100.0, 1.0)
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        check_grads(
            vec![x, w, b],
            |g, v| {
                let y = g.conv(v[0], v[1], Some(v[2]), ConvGeometry::conv2d(3, 2, 1));
                project(g, y, 9)
            },
            1e-6,
        );
    }

    #[test]
    fn conv3d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[2, 4, 5, 4], &mut rng);
        let w = rand_tensor(&[2, 2, 3, 3, 3], &mut rng);
        check_grads(
            vec![x, w],
            |g, v| {
                let geo = ConvGeometry::conv3d([3, 3, 3], [1, 2, 2], [1, 1, 1]);
                let y = g.conv(v[0], v[1], None, geo);
                project(g, y, 2)
            },
            1e-6,
        );
    }

    #[test]
    fn conv_output_size_is_ceil_half_for_stride_two() {
        let geo = ConvGeometry::conv2d(3, 2, 1);
        for h in 1..40 {
            assert_eq!(geo.output_len(h, 1), h.div_ceil(2));
        }
    }

    #[test]
    fn linear_concat_repeat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[3, 4], &mut rng);
        let gctx = rand_tensor(&[1, 2], &mut rng);
        let w = rand_tensor(&[5, 6], &mut rng);
        let b = rand_tensor(&[5], &mut rng);
        check_grads(
            vec![x, gctx, w, b],
            |g, v| {
                let r = g.repeat_rows(v[1], 3);
                let c = g.concat_cols(r, v[0]);
                let y = g.linear(c, v[2], Some(v[3]));
                let y = g.softplus(y);
                project(g, y, 1)
            },
            1e-6,
        );
    }

    #[test]
    fn pooling_and_lift_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let clip = rand_tensor(&[2, 3, 2, 3], &mut rng);
        let map = rand_tensor(&[2, 5, 7], &mut rng);
        check_grads(
            vec![clip, map],
            |g, v| {
                let lifted = g.nearest_lift(v[0], 5, 7);
                let s = g.add(lifted, v[1]);
                let r = g.relu(s);
                let p = g.subsample2(r);
                let gap = g.global_avg_pool(p);
                let a = project(g, p, 4);
                let b = project(g, gap, 5);
                g.weighted_sum(&[(a, 1.0), (b, 0.3)])
            },
            1e-5,
        );
    }

    #[test]
    fn roi_align_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l0 = rand_tensor(&[2, 8, 8], &mut rng);
        let l1 = rand_tensor(&[2, 4, 4], &mut rng);
        let rois = vec![
            RoiSpec { level: 0, bbox: [3.0, 5.0, 20.0, 17.0], scale: 0.25 },
            RoiSpec { level: 1, bbox: [1.0, 2.0, 30.0, 28.0], scale: 0.125 },
            RoiSpec { level: 0, bbox: [25.0, 25.0, 32.0, 32.0], scale: 0.25 },
        ];
        let cfg = RoiAlignConfig { output_size: 3, sampling_ratio: 2 };
        check_grads(
            vec![l0, l1],
            |g, v| {
                let y = g.roi_align(v, &rois, cfg);
                project(g, y, 8)
            },
            1e-6,
        );
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = rand_tensor(&[4, 3], &mut rng);
        let reg = rand_tensor(&[4, 2], &mut rng);
        check_grads(
            vec![logits, reg],
            |g, v| {
                let ce = g.softmax_cross_entropy(v[0], &[0, 2, 1, 1], 4.0);
                let bce = g.bce_with_logits(v[0], &[(0, 1.0), (5, 0.0), (7, 1.0)], 3.0);
                // Mix both smooth-L1 branches.
                let sl1 = g.smooth_l1(v[1], &[(0, 3.0), (3, 0.1), (6, -0.2)], 1.0, 2.0);
                g.weighted_sum(&[(ce, 1.0), (bce, 0.5), (sl1, 2.0)])
            },
            1e-5,
        );
    }

    #[test]
    fn bilinear_at_grid_points_returns_pixel_values() {
        let plane: Vec<f64> = (0..16).map(|i| (i * i) as f64 * 0.5 - 3.0).collect();
        for y in 0..4 {
            for x in 0..4 {
                let v = bilinear_sample(&plane, 4, 4, y as f64, x as f64);
                assert_eq!(v, plane[y * 4 + x]);
            }
        }
    }

    #[test]
    fn bilinear_matches_closed_form_between_pixels() {
        let plane: Vec<f64> = (0..16).map(|i| (i as f64 * 1.7).sin()).collect();
        let (y, x) = (1.25, 2.6);
        let (y0, x0) = (1usize, 2usize);
        let (ly, lx) = (y - y0 as f64, x - x0 as f64);
        let at = |r: usize, c: usize| plane[r * 4 + c];
        let want = (1.0 - ly) * (1.0 - lx) * at(y0, x0)
            + (1.0 - ly) * lx * at(y0, x0 + 1)
            + ly * (1.0 - lx) * at(y0 + 1, x0)
            + ly * lx * at(y0 + 1, x0 + 1);
        assert!((bilinear_sample(&plane, 4, 4, y, x) - want).abs() < 1e-15);
        assert_eq!(bilinear_sample(&plane, 4, 4, -1.5, 0.0), 0.0);
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let tiny = softplus(-20.0);
        assert!(tiny > 0.0 && (tiny - 2.061_153_6e-9).abs() < 1e-15);
        assert!((softplus(40.0) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_closed_form() {
        assert_eq!(smooth_l1(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1(-2.0, 1.0), 1.5);
    }

    #[test]
    fn shared_param_gets_summed_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[1, 1], vec![2.0]));
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 1], vec![3.0]));
        let w1 = g.param(&store, id);
        let w2 = g.param(&store, id);
        assert_eq!(w1, w2);
        let a = g.linear(x, w1, None);
        let b = g.linear(x, w2, None);
        let s = g.add(a, b);
        let loss = g.smooth_l1(s, &[(0, 0.0)], 1000.0, 1.0);
        let grads = g.backward(loss);
        let pg: Vec<_> = g.param_grads(&grads).collect();
        assert_eq!(pg.len(), 1);
        // d/dw of 0.5 (6w)^2 / 1000 = 36 w / 1000
        assert!((pg[0].1.item() - 0.072).abs() < 1e-12);
    }
}
