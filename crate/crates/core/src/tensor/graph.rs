use std::fmt;

use super::kernels::{self, ConvGeom};
use super::{sum_f64, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// One gradient buffer per input (`None` when the input gets no gradient).
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[Real])
        -> Vec<Option<Vec<Real>>>;
}

enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        batch: usize,
        cout: usize,
        geom: ConvGeom,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulBcast(NodeId, NodeId),
    Scale(NodeId, Real),
    Sum(NodeId),
    MeanMasked {
        x: NodeId,
        mask: Vec<bool>,
        denom: f64,
    },
    Concat(NodeId, NodeId),
    Upsample2x(NodeId),
    PadEdge(NodeId, usize),
    GridSample {
        map: NodeId,
        coords: NodeId,
        valid: Vec<bool>,
    },
    SpatialGrad {
        x: NodeId,
        horizontal: bool,
    },
    Solve3 {
        a: NodeId,
        b: NodeId,
        inv: [[f64; 3]; 3],
        x: [f64; 3],
        tikhonov: Option<f64>,
    },
    Stack(Vec<NodeId>),
    Slice {
        x: NodeId,
        start: usize,
    },
    Reshape(NodeId),
    Channel {
        x: NodeId,
        channel: usize,
    },
    Norm(NodeId),
    Abs(NodeId),
    WrapAngle(NodeId),
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulBcast(..) => "mul_bcast",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::MeanMasked { .. } => "mean_masked",
            Op::Concat(..) => "concat_channels",
            Op::Upsample2x(_) => "upsample2x_nearest",
            Op::PadEdge(..) => "pad_edge",
            Op::GridSample { .. } => "grid_sample_bilinear",
            Op::SpatialGrad { .. } => "spatial_gradient",
            Op::Solve3 { .. } => "solve3",
            Op::Stack(_) => "stack",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Channel { .. } => "channel",
            Op::Norm(_) => "norm",
            Op::Abs(_) => "abs",
            Op::WrapAngle(_) => "wrap_angle",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in execution order,
/// so node ids are a topological order and backward walks them in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
    backward_done: bool,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("backward_done", &self.backward_done)
            .finish()
    }
}

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Wraps an angle to `(-pi, pi]`.
pub(crate) fn wrap_pi(a: f64) -> f64 {
    let mut r = a.rem_euclid(TWO_PI);
    if r > std::f64::consts::PI {
        r -= TWO_PI;
    }
    r
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Adds an input tensor. Gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Hash of which units are active in every relu node. The graph output
    /// is smooth in its inputs only while this stays fixed.
    pub fn activation_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in self.nodes.iter().filter(|n| matches!(n.op, Op::Relu(_))) {
            for &v in node.value.data() {
                (v > 0.0).hash(&mut h);
            }
        }
        h.finish()
    }

    /// Name of the operation that produced `id`.
    pub fn op_name(&self, id: NodeId) -> &str {
        self.nodes[id.0].op.name()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. `id`, shaped like its value.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].as_ref().map(|g| {
            Tensor::new(self.nodes[id.0].value.dims().to_vec(), g.clone()).expect("grad shape")
        })
    }

    /// Like [`Graph::grad`] but zeros when the node received no gradient.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        self.grad(id)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.dims()))
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(())
    }

    /// 2-D convolution. `input` is `N x Cin x H x W` (or `Cin x H x W`),
    /// `kernel` is `Cout x Cin x k x k`, `bias` has `Cout` elements.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let xd = self.value(input).dims().to_vec();
        let wd = self.value(kernel).dims().to_vec();
        let (batch, cin, h, w, batched) = match xd[..] {
            [n, c, h, w] => (n, c, h, w, true),
            [c, h, w] => (1, c, h, w, false),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be 3-D or 4-D, got {xd:?}"),
                ))
            }
        };
        let (cout, kcin, k) = match wd[..] {
            [co, ci, kh, kw] if kh == kw => (co, ci, kh),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be Cout x Cin x k x k, got {wd:?}"),
                ))
            }
        };
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has Cin={cin} (dims {xd:?}) but kernel expects Cin={kcin} (dims {wd:?})"
                ),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel size {k} must be odd"),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidArgument(format!(
                "conv2d stride {stride} not in {{1, 2}}"
            )));
        }
        if self.value(bias).numel() != cout {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias has {} elements, kernel Cout={cout}",
                    self.value(bias).numel()
                ),
            ));
        }
        let ho = kernels::conv_output_size(h, k, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {xd:?}"),
            )
        })?;
        let wo = kernels::conv_output_size(w, k, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {xd:?}"),
            )
        })?;
        let geom = ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            batch,
            cout,
            &geom,
        );
        let dims = if batched {
            vec![batch, cout, ho, wo]
        } else {
            vec![cout, ho, wo]
        };
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::new(dims, out)?,
            Op::Conv2d {
                x: input,
                w: kernel,
                b: bias,
                batch,
                cout,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| if a < 0.0 { 0.0 } else { a });
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(Real, Real) -> Real) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.dims().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Elementwise product where `b` (`1 x H x W`) is broadcast over the
    /// channels of `a` (`C x H x W`).
    pub fn mul_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(a).chw()?;
        let bd = self.value(b).dims();
        if bd != [1, h, w] {
            return Err(Error::shape(
                "mul_bcast",
                format!("broadcast operand {bd:?} does not match 1 x {h} x {w}"),
            ));
        }
        let hw = h * w;
        let bv = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % hw])
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![c, h, w], data)?, Op::MulBcast(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, s: Real) -> NodeId {
        let v = self.value(x).map(|a| a * s);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = sum_f64(self.value(x).data());
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as Real), Op::Sum(x), rg)
    }

    /// Sum over channels and masked pixels of a `C x H x W` map divided by
    /// `max(1, count(mask))`.
    pub fn mean_masked(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        if mask.len() != h * w {
            return Err(Error::shape(
                "mean_masked",
                format!("mask has {} entries, map is {c} x {h} x {w}", mask.len()),
            ));
        }
        let hw = h * w;
        let count = mask.iter().filter(|&&m| m).count();
        let denom = count.max(1) as f64;
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| mask[i % hw])
            .map(|(_, &v)| v as f64)
            .sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar((s / denom) as Real),
            Op::MeanMasked {
                x,
                mask: mask.to_vec(),
                denom,
            },
            rg,
        ))
    }

    /// Concatenates two `C x H x W` maps along channels.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, ha, wa) = self.value(a).chw()?;
        let (cb, hb, wb) = self.value(b).chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial dims {ha}x{wa} vs {hb}x{wb}"),
            ));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![ca + cb, ha, wa], data)?,
            Op::Concat(a, b),
            rg,
        ))
    }

    pub fn upsample2x_nearest(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        let data = kernels::upsample2x_forward(self.value(x).data(), c, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![c, 2 * h, 2 * w], data)?,
            Op::Upsample2x(x),
            rg,
        ))
    }

    /// Pads each side of a `C x H x W` node by `p` pixels, repeating the
    /// border values.
    pub fn pad_edge(&mut self, x: NodeId, p: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        if h == 0 || w == 0 {
            return Err(Error::shape("pad_edge", "empty spatial dims"));
        }
        let data = kernels::pad_edge_forward(self.value(x).data(), c, h, w, p);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![c, h + 2 * p, w + 2 * p], data)?,
            Op::PadEdge(x, p),
            rg,
        ))
    }

    /// Bilinear sampling of `map` (`C x H x W`) at pixel coordinates
    /// `coords` (`2 x Hg x Wg`: u then v). Returns the sampled node and the
    /// per-pixel validity mask; out-of-bounds samples are 0.
    pub fn grid_sample_bilinear(
        &mut self,
        map: NodeId,
        coords: NodeId,
    ) -> Result<(NodeId, Vec<bool>)> {
        let (c, h, w) = self.value(map).chw()?;
        let cd = self.value(coords).dims().to_vec();
        let (hg, wg) = match cd[..] {
            [2, hg, wg] => (hg, wg),
            _ => {
                return Err(Error::shape(
                    "grid_sample_bilinear",
                    format!("coords must be 2 x Hg x Wg, got {cd:?}"),
                ))
            }
        };
        let (out, valid) = kernels::grid_sample_forward(
            self.value(map).data(),
            c,
            h,
            w,
            self.value(coords).data(),
            hg * wg,
        );
        let rg = self.rg(&[map, coords]);
        let id = self.push(
            Tensor::new(vec![c, hg, wg], out)?,
            Op::GridSample {
                map,
                coords,
                valid: valid.clone(),
            },
            rg,
        );
        Ok((id, valid))
    }

    /// Image gradients `(d/du, d/dv)` of a `C x H x W` map.
    pub fn spatial_gradient(&mut self, x: NodeId) -> Result<(NodeId, NodeId)> {
        let (c, h, w) = self.value(x).chw()?;
        if h < 2 || w < 2 {
            return Err(Error::shape(
                "spatial_gradient",
                format!("need H, W >= 2, got {h} x {w}"),
            ));
        }
        let rg = self.rg(&[x]);
        let du = kernels::spatial_gradient_forward(self.value(x).data(), c, h, w, true);
        let dv = kernels::spatial_gradient_forward(self.value(x).data(), c, h, w, false);
        let du = self.push(
            Tensor::new(vec![c, h, w], du)?,
            Op::SpatialGrad {
                x,
                horizontal: true,
            },
            rg,
        );
        let dv = self.push(
            Tensor::new(vec![c, h, w], dv)?,
            Op::SpatialGrad {
                x,
                horizontal: false,
            },
            rg,
        );
        Ok((du, dv))
    }

    /// Solves `A x = b` for a symmetric 3x3 `A` via the adjugate.
    ///
    /// `A` is symmetrized first. When `|det| < 1e-12 * max|A|^3` a Tikhonov
    /// floor `1e-6 * trace(A)/3 * I` is added once; a system that is still
    /// singular yields [`Error::SingularSystem`].
    pub fn solve3(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).numel() != 9 || self.value(b).numel() != 3 {
            return Err(Error::shape(
                "solve3",
                format!(
                    "need 3x3 and 3, got {:?} and {:?}",
                    self.value(a).dims(),
                    self.value(b).dims()
                ),
            ));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        if !ad.iter().chain(bd).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("solve3 input".into()));
        }
        let mut s = [[0.0f64; 3]; 3];
        let mut asym = 0.0f64;
        let mut amax = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let (x, y) = (ad[3 * i + j] as f64, ad[3 * j + i] as f64);
                s[i][j] = 0.5 * (x + y);
                asym = asym.max((x - y).abs());
                amax = amax.max(x.abs());
            }
        }
        if asym > 1e-5 * amax.max(Real::EPSILON as f64) {
            return Err(Error::NotSymmetric(asym));
        }
        let (inv, tikhonov) = invert_sym3(s)?;
        let bv = [bd[0] as f64, bd[1] as f64, bd[2] as f64];
        let mut x = [0.0f64; 3];
        for i in 0..3 {
            x[i] = (0..3).map(|j| inv[i][j] * bv[j]).sum();
        }
        let rg = self.rg(&[a, b]);
        let out = Tensor::new(vec![3], x.iter().map(|&v| v as Real).collect())?;
        Ok(self.push(
            out,
            Op::Solve3 {
                a,
                b,
                inv,
                x,
                tikhonov,
            },
            rg,
        ))
    }

    /// Collects one-element tensors into a vector.
    pub fn stack(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = self.value(x);
            if v.numel() != 1 {
                return Err(Error::shape(
                    "stack",
                    format!("element has dims {:?}", v.dims()),
                ));
            }
            data.push(v.item());
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::from_vec(data), Op::Stack(xs.to_vec()), rg))
    }

    /// Contiguous flat range `[start, start+len)` as a 1-D tensor.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.value(x).numel();
        if start + len > n {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} of {n}", start + len),
            ));
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(data), Op::Slice { x, start }, rg))
    }

    pub fn index(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let s = self.slice(x, i, 1)?;
        self.reshape(s, &[])
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(dims)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Channel `c` of a `C x H x W` map as `1 x H x W`.
    pub fn channel(&mut self, x: NodeId, channel: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        if channel >= c {
            return Err(Error::shape("channel", format!("channel {channel} of {c}")));
        }
        let data = self.value(x).data()[channel * h * w..(channel + 1) * h * w].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![1, h, w], data)?,
            Op::Channel { x, channel },
            rg,
        ))
    }

    /// Euclidean norm of all elements. The gradient at 0 is taken as 0.
    pub fn norm(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s.sqrt() as Real), Op::Norm(x), rg)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.abs());
        let rg = self.rg(&[x]);
        self.push(v, Op::Abs(x), rg)
    }

    /// Wraps every element to `(-pi, pi]`; the gradient passes through.
    pub fn wrap_angle(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| wrap_pi(a as f64) as Real);
        let rg = self.rg(&[x]);
        self.push(v, Op::WrapAngle(x), rg)
    }

    pub fn custom(&mut self, inputs: &[NodeId], output: Tensor, op: Box<dyn CustomOp>) -> NodeId {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.dims().to_vec()));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Vec<Real>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, id: usize, g: &[Real]) {
        let node = &self.nodes[id];
        let mut out: Vec<(NodeId, Vec<Real>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                batch,
                cout,
                geom,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    *batch,
                    *cout,
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                );
                if self.needs(*x) {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::Relu(x) => {
                let v = &node.value;
                out.push((
                    *x,
                    g.iter()
                        .zip(v.data())
                        .map(|(&gi, &y)| if y > 0.0 { gi } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, g.iter().zip(vb).map(|(x, y)| x * y).collect()));
                out.push((*b, g.iter().zip(va).map(|(x, y)| x * y).collect()));
            }
            Op::MulBcast(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let hw = vb.len();
                out.push((
                    *a,
                    g.iter().enumerate().map(|(i, x)| x * vb[i % hw]).collect(),
                ));
                let mut db = vec![0.0f64; hw];
                for (i, (&gi, &ai)) in g.iter().zip(va).enumerate() {
                    db[i % hw] += (gi * ai) as f64;
                }
                out.push((*b, db.into_iter().map(|v| v as Real).collect()));
            }
            Op::Scale(x, s) => out.push((*x, g.iter().map(|v| v * s).collect())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::MeanMasked { x, mask, denom } => {
                let hw = mask.len();
                let gv = (g[0] as f64 / denom) as Real;
                let n = self.value(*x).numel();
                out.push((
                    *x,
                    (0..n)
                        .map(|i| if mask[i % hw] { gv } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).numel();
                out.push((*a, g[..na].to_vec()));
                out.push((*b, g[na..].to_vec()));
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = self.value(*x).chw().expect("3-D");
                out.push((*x, kernels::upsample2x_backward(g, c, h, w)));
            }
            Op::PadEdge(x, p) => {
                let (c, h, w) = self.value(*x).chw().expect("3-D");
                out.push((*x, kernels::pad_edge_backward(g, c, h, w, *p)));
            }
            Op::GridSample { map, coords, valid } => {
                let (c, h, w) = self.value(*map).chw().expect("3-D");
                let (dmap, dcoords) = kernels::grid_sample_backward(
                    self.value(*map).data(),
                    c,
                    h,
                    w,
                    self.value(*coords).data(),
                    valid.len(),
                    valid,
                    g,
                );
                out.push((*map, dmap));
                out.push((*coords, dcoords));
            }
            Op::SpatialGrad { x, horizontal } => {
                let (c, h, w) = self.value(*x).chw().expect("3-D");
                out.push((
                    *x,
                    kernels::spatial_gradient_backward(g, c, h, w, *horizontal),
                ));
            }
            Op::Solve3 {
                a,
                b,
                inv,
                x,
                tikhonov,
            } => {
                // x = S^-1 b with S symmetric: b_bar = S^-1 g, S_bar = -b_bar x^T.
                let gv = [g[0] as f64, g[1] as f64, g[2] as f64];
                let mut bbar = [0.0f64; 3];
                for i in 0..3 {
                    bbar[i] = (0..3).map(|j| inv[i][j] * gv[j]).sum();
                }
                let mut sbar = [[0.0f64; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        sbar[i][j] = -bbar[i] * x[j];
                    }
                }
                if let Some(c) = tikhonov {
                    let tr = sbar[0][0] + sbar[1][1] + sbar[2][2];
                    for (i, row) in sbar.iter_mut().enumerate() {
                        row[i] += c / 3.0 * tr;
                    }
                }
                let mut abar = vec![0.0 as Real; 9];
                for i in 0..3 {
                    for j in 0..3 {
                        abar[3 * i + j] = (0.5 * (sbar[i][j] + sbar[j][i])) as Real;
                    }
                }
                out.push((*a, abar));
                out.push((*b, bbar.iter().map(|&v| v as Real).collect()));
            }
            Op::Stack(xs) => {
                for (i, x) in xs.iter().enumerate() {
                    out.push((*x, vec![g[i]]));
                }
            }
            Op::Slice { x, start } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                d[*start..*start + g.len()].copy_from_slice(g);
                out.push((*x, d));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Channel { x, channel } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                let n = g.len();
                d[channel * n..(channel + 1) * n].copy_from_slice(g);
                out.push((*x, d));
            }
            Op::Norm(x) => {
                let y = node.value.item();
                let xv = self.value(*x).data();
                if y > 0.0 {
                    out.push((*x, xv.iter().map(|&v| g[0] * v / y).collect()));
                } else {
                    out.push((*x, vec![0.0; xv.len()]));
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                out.push((
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gi, &v)| {
                            if v > 0.0 {
                                gi
                            } else if v < 0.0 {
                                -gi
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                ));
            }
            Op::WrapAngle(x) => out.push((*x, g.to_vec())),
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|i| self.value(*i)).collect();
                let grads = op.vjp(&ins, &node.value, g);
                debug_assert_eq!(
                    grads.len(),
                    inputs.len(),
                    "custom op {} vjp arity",
                    op.name()
                );
                for (i, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        debug_assert_eq!(gi.len(), self.value(*i).numel());
                        out.push((*i, gi));
                    }
                }
            }
        }
        for (i, gi) in out {
            self.accumulate(i, gi);
        }
    }
}

fn det3(s: &[[f64; 3]; 3]) -> f64 {
    s[0][0] * (s[1][1] * s[2][2] - s[1][2] * s[2][1])
        - s[0][1] * (s[1][0] * s[2][2] - s[1][2] * s[2][0])
        + s[0][2] * (s[1][0] * s[2][1] - s[1][1] * s[2][0])
}

fn max_abs3(s: &[[f64; 3]; 3]) -> f64 {
    s.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
}

const DET_FLOOR: f64 = 1e-12;
const TIKHONOV: f64 = 1e-6;

/// Inverse of a symmetric 3x3 matrix via adjugate / determinant, with a
/// single Tikhonov fallback. Returns the inverse and the Tikhonov
/// coefficient when it was applied.
fn invert_sym3(mut s: [[f64; 3]; 3]) -> Result<([[f64; 3]; 3], Option<f64>)> {
    let singular = |s: &[[f64; 3]; 3]| {
        let m = max_abs3(s);
        let d = det3(s);
        (m == 0.0 || d.abs() < DET_FLOOR * m * m * m, d)
    };
    let mut tikhonov = None;
    let (bad, _) = singular(&s);
    if bad {
        let tr = s[0][0] + s[1][1] + s[2][2];
        for (i, row) in s.iter_mut().enumerate() {
            row[i] += TIKHONOV * tr / 3.0;
        }
        tikhonov = Some(TIKHONOV);
        let (still_bad, d) = singular(&s);
        if still_bad {
            return Err(Error::SingularSystem { det: d });
        }
    }
    let d = det3(&s);
    let mut inv = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // Cofactor of (j, i) for the adjugate transpose.
            let (r0, r1) = other_two(j);
            let (c0, c1) = other_two(i);
            let minor = s[r0][c0] * s[r1][c1] - s[r0][c1] * s[r1][c0];
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            inv[i][j] = sign * minor / d;
        }
    }
    Ok((inv, tikhonov))
}

fn other_two(i: usize) -> (usize, usize) {
    match i {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}
