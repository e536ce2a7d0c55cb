//! Forward ops and their backward passes.

use super::{debug_assert_finite, GraphNode, Tensor};
use crate::error::{Error, Result};

/// Weights, bias, and geometry of one convolution layer.
///
/// Weights are laid out (outC, inC, kH, kW); depthwise layers use
/// (C, 1, kH, kW). Kernels are square and strides are limited to 1
/// (same-size) and 2 (halving), which is all the detector needs.
#[derive(Clone)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<ConvParams> {
        if weights.rank() != 4 {
            return Err(Error::Shape(format!(
                "conv weights must be rank 4 (outC, inC, kH, kW), got {:?}",
                weights.shape()
            )));
        }
        let (out_c, _, kh, kw) = dims4(&weights);
        if kh != kw {
            return Err(Error::Shape(format!("conv kernels must be square, got {kh}x{kw}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("conv stride must be 1 or 2, got {stride}")));
        }
        if bias.shape() != [out_c] {
            return Err(Error::Shape(format!(
                "conv bias must have shape [{out_c}], got {:?}",
                bias.shape()
            )));
        }
        Ok(ConvParams { weights, bias, stride, padding })
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn conv_out_size(in_size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (in_size + 2 * padding - kernel) / stride + 1
}

/// Valid output range `[lo, hi)` such that `ox·stride + kx − pad` stays
/// inside `[0, in_size)`.
fn ox_range(in_size: usize, out_size: usize, stride: usize, pad: usize, kx: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo_num = pad as isize - kx as isize;
    let lo = if lo_num > 0 { ((lo_num + s - 1) / s) as usize } else { 0 };
    let hi_num = in_size as isize - 1 + pad as isize - kx as isize;
    let hi = if hi_num < 0 { 0 } else { ((hi_num / s) as usize + 1).min(out_size) };
    (lo.min(hi), hi)
}

/// 2-D convolution over an NCHW tensor.
///
/// Output spatial size is `floor((H + 2·pad − k)/stride) + 1` per axis.
/// The backward pass accumulates gradients into the input, weights, and
/// bias.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let geom = ConvGeometry::check(input, params, false)?;
    let out = conv_forward(input, params, &geom);
    if input.requires_grad() || params.weights.requires_grad() || params.bias.requires_grad() {
        Ok(Tensor::from_op(
            geom.out_shape(),
            out,
            Box::new(Conv2dNode { input: input.clone(), params: params.clone(), geom }),
        ))
    } else {
        Ok(Tensor::from_value(geom.out_shape(), out))
    }
}

/// Depthwise 2-D convolution: channel `c` of the input is convolved with
/// its own (1, kH, kW) filter. Weights are (C, 1, kH, kW).
pub fn conv2d_depthwise(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let geom = ConvGeometry::check(input, params, true)?;
    let out = conv_forward(input, params, &geom);
    if input.requires_grad() || params.weights.requires_grad() || params.bias.requires_grad() {
        Ok(Tensor::from_op(
            geom.out_shape(),
            out,
            Box::new(Conv2dNode { input: input.clone(), params: params.clone(), geom }),
        ))
    } else {
        Ok(Tensor::from_value(geom.out_shape(), out))
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    depthwise: bool,
}

impl ConvGeometry {
    fn check(input: &Tensor, params: &ConvParams, depthwise: bool) -> Result<ConvGeometry> {
        if input.rank() != 4 {
            return Err(Error::Shape(format!(
                "conv input must be rank 4 (N, C, H, W), got {:?}",
                input.shape()
            )));
        }
        let (batch, in_c, h, w) = dims4(input);
        let (out_c, w_in_c, k, _) = dims4(&params.weights);
        if depthwise {
            if w_in_c != 1 || out_c != in_c {
                return Err(Error::Shape(format!(
                    "depthwise weights must be ({in_c}, 1, k, k), got {:?}",
                    params.weights.shape()
                )));
            }
        } else if w_in_c != in_c {
            return Err(Error::Shape(format!(
                "conv expects {w_in_c} input channels, image has {in_c}"
            )));
        }
        if h + 2 * params.padding < k || w + 2 * params.padding < k {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} with padding {} is smaller than kernel {k}",
                params.padding
            )));
        }
        Ok(ConvGeometry {
            batch,
            in_c,
            h,
            w,
            out_c,
            k,
            stride: params.stride,
            pad: params.padding,
            oh: conv_out_size(h, k, params.stride, params.padding),
            ow: conv_out_size(w, k, params.stride, params.padding),
            depthwise,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_c, self.oh, self.ow]
    }
}

fn conv_forward(input: &Tensor, params: &ConvParams, g: &ConvGeometry) -> Vec<f64> {
    let x = input.values();
    let wt = params.weights.values();
    let bias = params.bias.values();
    let mut out = vec![0.0; g.batch * g.out_c * g.oh * g.ow];
    let (k, s, p) = (g.k, g.stride, g.pad);
    for n in 0..g.batch {
        for oc in 0..g.out_c {
            let out_plane = &mut out[(n * g.out_c + oc) * g.oh * g.ow..][..g.oh * g.ow];
            out_plane.fill(bias[oc]);
            let ics: &[usize] = &ic_list(g, oc);
            for (wi, &ic) in ics.iter().enumerate() {
                let x_plane = &x[(n * g.in_c + ic) * g.h * g.w..][..g.h * g.w];
                let w_k = &wt[(oc * ics.len() + wi) * k * k..][..k * k];
                for ky in 0..k {
                    for oy in 0..g.oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * g.w..][..g.w];
                        let o_row = &mut out_plane[oy * g.ow..][..g.ow];
                        for kx in 0..k {
                            let wv = w_k[ky * k + kx];
                            let (lo, hi) = ox_range(g.w, g.ow, s, p, kx);
                            if s == 1 {
                                let base = (lo + kx) as isize - p as isize;
                                let xs = &x_row[base as usize..][..hi - lo];
                                for (o, xv) in o_row[lo..hi].iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in lo..hi {
                                    o_row[ox] += wv * x_row[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Input channels feeding output channel `oc` (all of them, or just `oc`
/// for depthwise).
fn ic_list(g: &ConvGeometry, oc: usize) -> Vec<usize> {
    if g.depthwise {
        vec![oc]
    } else {
        (0..g.in_c).collect()
    }
}

struct Conv2dNode {
    input: Tensor,
    params: ConvParams,
    geom: ConvGeometry,
}

impl GraphNode for Conv2dNode {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone(), self.params.weights.clone(), self.params.bias.clone()]
    }

    fn backward(&self, _out: &[f64], grad_out: &[f64]) {
        let g = &self.geom;
        let (k, s, p) = (g.k, g.stride, g.pad);
        let need_dx = self.input.requires_grad();
        let need_dw = self.params.weights.requires_grad();
        let need_db = self.params.bias.requires_grad();

        if need_db {
            let mut db = vec![0.0; g.out_c];
            for n in 0..g.batch {
                for oc in 0..g.out_c {
                    let go = &grad_out[(n * g.out_c + oc) * g.oh * g.ow..][..g.oh * g.ow];
                    db[oc] += go.iter().sum::<f64>();
                }
            }
            self.params.bias.accumulate_grad(&db);
        }

        if !(need_dx || need_dw) {
            return;
        }
        let x = self.input.values();
        let wt = self.params.weights.values();
        let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
        let mut dw = if need_dw { vec![0.0; wt.len()] } else { Vec::new() };

        for n in 0..g.batch {
            for oc in 0..g.out_c {
                let go_plane = &grad_out[(n * g.out_c + oc) * g.oh * g.ow..][..g.oh * g.ow];
                let ics = ic_list(g, oc);
                for (wi, &ic) in ics.iter().enumerate() {
                    let x_plane = &x[(n * g.in_c + ic) * g.h * g.w..][..g.h * g.w];
                    let w_k = &wt[(oc * ics.len() + wi) * k * k..][..k * k];
                    for ky in 0..k {
                        for oy in 0..g.oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let row_off = iy as usize * g.w;
                            let go_row = &go_plane[oy * g.ow..][..g.ow];
                            for kx in 0..k {
                                let (lo, hi) = ox_range(g.w, g.ow, s, p, kx);
                                if lo >= hi {
                                    continue;
                                }
                                if need_dw {
                                    let x_row = &x_plane[row_off..][..g.w];
                                    let mut acc = 0.0;
                                    if s == 1 {
                                        let base = (lo + kx) as isize - p as isize;
                                        let xs = &x_row[base as usize..][..hi - lo];
                                        for (gv, xv) in go_row[lo..hi].iter().zip(xs) {
                                            acc += gv * xv;
                                        }
                                    } else {
                                        for ox in lo..hi {
                                            acc += go_row[ox] * x_row[ox * s + kx - p];
                                        }
                                    }
                                    dw[(oc * ics.len() + wi) * k * k + ky * k + kx] += acc;
                                }
                                if need_dx {
                                    let wv = w_k[ky * k + kx];
                                    let dx_plane =
                                        &mut dx[(n * g.in_c + ic) * g.h * g.w..][..g.h * g.w];
                                    let dx_row = &mut dx_plane[row_off..][..g.w];
                                    if s == 1 {
                                        let base = (lo + kx) as isize - p as isize;
                                        let ds = &mut dx_row[base as usize..][..hi - lo];
                                        for (d, gv) in ds.iter_mut().zip(&go_row[lo..hi]) {
                                            *d += wv * gv;
                                        }
                                    } else {
                                        for ox in lo..hi {
                                            dx_row[ox * s + kx - p] += wv * go_row[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(x);
        drop(wt);
        if need_dw {
            self.params.weights.accumulate_grad(&dw);
        }
        if need_dx {
            self.input.accumulate_grad(&dx);
        }
    }
}

/// Elementwise max(0, x); the gradient passes where x > 0.
pub fn relu(input: &Tensor) -> Tensor {
    let out: Vec<f64> = input.values().iter().map(|&v| v.max(0.0)).collect();
    if input.requires_grad() {
        Tensor::from_op(input.shape().to_vec(), out, Box::new(ReluNode { input: input.clone() }))
    } else {
        Tensor::from_value(input.shape().to_vec(), out)
    }
}

struct ReluNode {
    input: Tensor,
}

impl GraphNode for ReluNode {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &[f64], grad_out: &[f64]) {
        let x = self.input.values();
        let dx: Vec<f64> = x.iter().zip(grad_out).map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 }).collect();
        drop(x);
        self.input.accumulate_grad(&dx);
    }
}

/// Elementwise logistic function 1/(1+e^(−x)), stable across the full
/// f64 exponent range.
pub fn sigmoid(input: &Tensor) -> Tensor {
    let out: Vec<f64> = input.values().iter().map(|&v| sigmoid_scalar(v)).collect();
    if input.requires_grad() {
        Tensor::from_op(input.shape().to_vec(), out, Box::new(SigmoidNode { input: input.clone() }))
    } else {
        Tensor::from_value(input.shape().to_vec(), out)
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct SigmoidNode {
    input: Tensor,
}

impl GraphNode for SigmoidNode {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, out: &[f64], grad_out: &[f64]) {
        let dx: Vec<f64> = out.iter().zip(grad_out).map(|(&y, &g)| g * y * (1.0 - y)).collect();
        self.input.accumulate_grad(&dx);
    }
}

/// Nearest-neighbor 2x spatial upsampling of an NCHW tensor: each cell is
/// replicated into a 2x2 block. Backward sums the block gradients.
pub fn upsample_nearest_2x(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::Shape(format!(
            "upsample_nearest_2x needs an NCHW tensor, got {:?}",
            input.shape()
        )));
    }
    let (n, c, h, w) = dims4(input);
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.values();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let xp = &x[plane * h * w..][..h * w];
        let op = &mut out[plane * oh * ow..][..oh * ow];
        for i in 0..h {
            for j in 0..w {
                let v = xp[i * w + j];
                op[(2 * i) * ow + 2 * j] = v;
                op[(2 * i) * ow + 2 * j + 1] = v;
                op[(2 * i + 1) * ow + 2 * j] = v;
                op[(2 * i + 1) * ow + 2 * j + 1] = v;
            }
        }
    }
    drop(x);
    let shape = vec![n, c, oh, ow];
    if input.requires_grad() {
        Ok(Tensor::from_op(shape, out, Box::new(Upsample2xNode { input: input.clone() })))
    } else {
        Ok(Tensor::from_value(shape, out))
    }
}

struct Upsample2xNode {
    input: Tensor,
}

impl GraphNode for Upsample2xNode {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &[f64], grad_out: &[f64]) {
        let s = self.input.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut dx = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            let gp = &grad_out[plane * oh * ow..][..oh * ow];
            let dp = &mut dx[plane * h * w..][..h * w];
            for i in 0..h {
                for j in 0..w {
                    dp[i * w + j] = gp[(2 * i) * ow + 2 * j]
                        + gp[(2 * i) * ow + 2 * j + 1]
                        + gp[(2 * i + 1) * ow + 2 * j]
                        + gp[(2 * i + 1) * ow + 2 * j + 1];
                }
            }
        }
        self.input.accumulate_grad(&dx);
    }
}

/// Elementwise sum. Shapes must match, except that an NCHW `b` may exceed
/// `a` by one row and/or column; the excess bottom/right edge of `b` is
/// then cropped away. That is exactly the case produced by upsampling an
/// odd-sized pyramid level.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let out: Vec<f64> = a.values().iter().zip(b.values().iter()).map(|(x, y)| x + y).collect();
        return Ok(make_add(a, b, None, a.shape().to_vec(), out));
    }
    // crop rule: rank 4, same N and C, b at most 1 larger per spatial axis
    if a.rank() == 4 && b.rank() == 4 {
        let (an, ac, ah, aw) = dims4(a);
        let (bn, bc, bh, bw) = dims4(b);
        let dh = bh as isize - ah as isize;
        let dw = bw as isize - aw as isize;
        if an == bn && ac == bc && (0..=1).contains(&dh) && (0..=1).contains(&dw) {
            let av = a.values();
            let bv = b.values();
            let mut out = vec![0.0; a.len()];
            for plane in 0..an * ac {
                let ap = &av[plane * ah * aw..][..ah * aw];
                let bp = &bv[plane * bh * bw..][..bh * bw];
                let op = &mut out[plane * ah * aw..][..ah * aw];
                for i in 0..ah {
                    for j in 0..aw {
                        op[i * aw + j] = ap[i * aw + j] + bp[i * bw + j];
                    }
                }
            }
            drop(av);
            drop(bv);
            return Ok(make_add(a, b, Some((bh, bw)), a.shape().to_vec(), out));
        }
    }
    Err(Error::Shape(format!(
        "add: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    )))
}

fn make_add(a: &Tensor, b: &Tensor, b_full: Option<(usize, usize)>, shape: Vec<usize>, out: Vec<f64>) -> Tensor {
    if a.requires_grad() || b.requires_grad() {
        Tensor::from_op(shape, out, Box::new(AddNode { a: a.clone(), b: b.clone(), b_full }))
    } else {
        Tensor::from_value(shape, out)
    }
}

struct AddNode {
    a: Tensor,
    b: Tensor,
    /// Spatial size of `b` when it was cropped to `a`'s size.
    b_full: Option<(usize, usize)>,
}

impl GraphNode for AddNode {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn backward(&self, _out: &[f64], grad_out: &[f64]) {
        if self.a.requires_grad() {
            self.a.accumulate_grad(grad_out);
        }
        if self.b.requires_grad() {
            match self.b_full {
                None => self.b.accumulate_grad(grad_out),
                Some((bh, bw)) => {
                    // grad lands on the kept region; the cropped edge gets zero
                    let s = self.a.shape();
                    let (n, c, ah, aw) = (s[0], s[1], s[2], s[3]);
                    let mut db = vec![0.0; self.b.len()];
                    for plane in 0..n * c {
                        let gp = &grad_out[plane * ah * aw..][..ah * aw];
                        let dp = &mut db[plane * bh * bw..][..bh * bw];
                        for i in 0..ah {
                            for j in 0..aw {
                                dp[i * bw + j] = gp[i * aw + j];
                            }
                        }
                    }
                    self.b.accumulate_grad(&db);
                }
            }
        }
    }
}

/// Sum of all elements, as a scalar tensor.
pub fn sum(input: &Tensor) -> Tensor {
    let total: f64 = input.values().iter().sum();
    if input.requires_grad() {
        Tensor::from_op(vec![1], vec![total], Box::new(SumNode { input: input.clone() }))
    } else {
        Tensor::from_value(vec![1], vec![total])
    }
}

struct SumNode {
    input: Tensor,
}

impl GraphNode for SumNode {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &[f64], grad_out: &[f64]) {
        let g = grad_out[0];
        self.input.accumulate_grad(&vec![g; self.input.len()]);
    }
}

/// Elementwise product of same-shape tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mul: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let out: Vec<f64> = a.values().iter().zip(b.values().iter()).map(|(x, y)| x * y).collect();
    if a.requires_grad() || b.requires_grad() {
        Ok(Tensor::from_op(
            a.shape().to_vec(),
            out,
            Box::new(MulNode { a: a.clone(), b: b.clone() }),
        ))
    } else {
        Ok(Tensor::from_value(a.shape().to_vec(), out))
    }
}

struct MulNode {
    a: Tensor,
    b: Tensor,
}

impl GraphNode for MulNode {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn backward(&self, _out: &[f64], grad_out: &[f64]) {
        if self.a.requires_grad() {
            let bv = self.b.values();
            let da: Vec<f64> = grad_out.iter().zip(bv.iter()).map(|(g, y)| g * y).collect();
            drop(bv);
            self.a.accumulate_grad(&da);
        }
        if self.b.requires_grad() {
            let av = self.a.values();
            let db: Vec<f64> = grad_out.iter().zip(av.iter()).map(|(g, x)| g * x).collect();
            drop(av);
            self.b.accumulate_grad(&db);
        }
    }
}

/// Same values, new shape. The element count must match; gradients pass
/// through unchanged.
pub fn reshape(input: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != input.len() {
        return Err(Error::Shape(format!(
            "cannot reshape {:?} ({} values) to {:?}",
            input.shape(),
            input.len(),
            shape
        )));
    }
    let out = input.to_vec();
    if input.requires_grad() {
        Ok(Tensor::from_op(shape.to_vec(), out, Box::new(ReshapeNode { input: input.clone() })))
    } else {
        Ok(Tensor::from_value(shape.to_vec(), out))
    }
}

struct ReshapeNode {
    input: Tensor,
}

impl GraphNode for ReshapeNode {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &[f64], grad_out: &[f64]) {
        self.input.accumulate_grad(grad_out);
    }
}

/// Multiply every element by a constant.
pub fn scale(input: &Tensor, factor: f64) -> Tensor {
    let out: Vec<f64> = input.values().iter().map(|&v| v * factor).collect();
    debug_assert_finite(&out);
    if input.requires_grad() {
        Tensor::from_op(
            input.shape().to_vec(),
            out,
            Box::new(ScaleNode { input: input.clone(), factor }),
        )
    } else {
        Tensor::from_value(input.shape().to_vec(), out)
    }
}

struct ScaleNode {
    input: Tensor,
    factor: f64,
}

impl GraphNode for ScaleNode {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.input.clone()]
    }

    fn backward(&self, _out: &[f64], grad_out: &[f64]) {
        let dx: Vec<f64> = grad_out.iter().map(|g| g * self.factor).collect();
        self.input.accumulate_grad(&dx);
    }
}
