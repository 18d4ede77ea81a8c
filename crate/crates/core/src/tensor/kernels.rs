//! Raw loops behind the differentiable ops.
//!
//! `conv3d_forward_naive` is the reference kernel: one dot product per output
//! voxel. `conv3d_forward` reorders the same sum so the innermost loop runs
//! over contiguous memory (whole padded planes at stride 1, rows otherwise);
//! it must agree with the reference within 1e-12.

use crate::error::{Error, Result};

/// Shape bookkeeping for a 3D convolution with a cubic kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeometry {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        bias_len: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if x_shape.len() != 5 {
            return Err(Error::Shape(format!(
                "conv3d input must be [N,C,D,H,W], got {x_shape:?}"
            )));
        }
        if w_shape.len() != 5 {
            return Err(Error::Shape(format!(
                "conv3d weight must be [Cout,Cin,k,k,k], got {w_shape:?}"
            )));
        }
        let k = w_shape[2];
        if w_shape[3] != k || w_shape[4] != k {
            return Err(Error::Config(format!(
                "conv3d kernel must be cubic, got {:?}",
                &w_shape[2..]
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv3d kernel size {k} is not odd")));
        }
        if stride == 0 {
            return Err(Error::Config("conv3d stride must be >= 1".into()));
        }
        if x_shape[1] != w_shape[1] {
            return Err(Error::Shape(format!(
                "conv3d input has {} channels but weight {w_shape:?} expects {}",
                x_shape[1], w_shape[1]
            )));
        }
        if bias_len != w_shape[0] {
            return Err(Error::Shape(format!(
                "conv3d bias has {bias_len} entries for {} output channels",
                w_shape[0]
            )));
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            let padded = x_shape[2 + axis] + 2 * padding;
            if padded < k {
                return Err(Error::Shape(format!(
                    "conv3d padded extent {padded} on axis {axis} is smaller than kernel {k}"
                )));
            }
            output[axis] = (padded - k) / stride + 1;
        }
        Ok(Conv3dGeometry {
            batch: x_shape[0],
            in_channels: x_shape[1],
            out_channels: w_shape[0],
            kernel: k,
            stride,
            padding,
            input: [x_shape[2], x_shape[3], x_shape[4]],
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_channels,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Output indices `o` along `axis` for which `o*stride + offset - padding`
    /// lands inside the unpadded input.
    fn valid_range(&self, axis: usize, offset: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let extent = self.input[axis] as isize;
        let kk = offset as isize;
        let lo = if p > kk { (p - kk + s - 1) / s } else { 0 };
        let hi = if extent - 1 + p - kk >= 0 {
            (extent - 1 + p - kk) / s + 1
        } else {
            0
        };
        let hi = hi.min(self.output[axis] as isize);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    #[inline]
    fn input_index(&self, o: usize, offset: usize) -> usize {
        o * self.stride + offset - self.padding
    }
}

/// Visits every (kernel offset, output row) pair that touches the unpadded
/// input, handing the callback the weight index, the output row start, the
/// input row start and the row length. Rows are contiguous in `w` only when
/// stride is 1; otherwise the callback receives the stride to step with.
#[inline]
fn for_each_row(
    g: &Conv3dGeometry,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let k = g.kernel;
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    for kd in 0..k {
        let (d0, d1) = g.valid_range(0, kd);
        for kh in 0..k {
            let (h0, h1) = g.valid_range(1, kh);
            for kw in 0..k {
                let (w0, w1) = g.valid_range(2, kw);
                if w1 <= w0 {
                    continue;
                }
                let widx = (kd * k + kh) * k + kw;
                let iw0 = g.input_index(w0, kw);
                for od in d0..d1 {
                    let id = g.input_index(od, kd);
                    for oh_i in h0..h1 {
                        let ih_i = g.input_index(oh_i, kh);
                        let out_start = (od * oh + oh_i) * ow + w0;
                        let in_start = (id * ih + ih_i) * iw + iw0;
                        f(widx, out_start, in_start, w1 - w0);
                    }
                }
            }
        }
    }
}

/// Forward convolution, one output row at a time.
fn conv3d_forward_rows(g: &Conv3dGeometry, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let ivol = g.in_volume();
    let ovol = g.out_volume();
    let k3 = g.kernel.pow(3);
    let s = g.stride;
    let mut out = vec![0.0; g.batch * g.out_channels * ovol];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let o_plane = &mut out[(n * g.out_channels + co) * ovol..][..ovol];
            o_plane.fill(bias[co]);
            for ci in 0..g.in_channels {
                let x_plane = &x[(n * g.in_channels + ci) * ivol..][..ivol];
                let w_kernel = &w[(co * g.in_channels + ci) * k3..][..k3];
                for_each_row(g, |widx, o0, i0, len| {
                    let wv = w_kernel[widx];
                    let orow = &mut o_plane[o0..o0 + len];
                    if s == 1 {
                        for (o, xi) in orow.iter_mut().zip(&x_plane[i0..i0 + len]) {
                            *o += wv * xi;
                        }
                    } else {
                        for (j, o) in orow.iter_mut().enumerate() {
                            *o += wv * x_plane[i0 + j * s];
                        }
                    }
                });
            }
        }
    }
    out
}

/// Direct evaluation: every output voxel as one explicit sum over the window.
pub fn conv3d_forward_naive(g: &Conv3dGeometry, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let mut out = Vec::with_capacity(g.batch * g.out_channels * od * oh * ow);
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..g.in_channels {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let pz = (z * g.stride + kd) as isize - g.padding as isize;
                                        let py = (y * g.stride + kh) as isize - g.padding as isize;
                                        let px = (xo * g.stride + kw) as isize - g.padding as isize;
                                        if pz < 0
                                            || py < 0
                                            || px < 0
                                            || pz >= id as isize
                                            || py >= ih as isize
                                            || px >= iw as isize
                                        {
                                            continue;
                                        }
                                        let xi = (((n * g.in_channels + ci) * id + pz as usize) * ih
                                            + py as usize)
                                            * iw
                                            + px as usize;
                                        let wi = (((co * g.in_channels + ci) * k + kd) * k + kh) * k + kw;
                                        acc += w[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    out
}

/// Input gradient, one output row at a time.
fn conv3d_backward_input_rows(g: &Conv3dGeometry, grad_out: &[f64], w: &[f64]) -> Vec<f64> {
    let ivol = g.in_volume();
    let ovol = g.out_volume();
    let k3 = g.kernel.pow(3);
    let s = g.stride;
    let mut gx = vec![0.0; g.batch * g.in_channels * ivol];
    for n in 0..g.batch {
        for ci in 0..g.in_channels {
            let gx_plane = &mut gx[(n * g.in_channels + ci) * ivol..][..ivol];
            for co in 0..g.out_channels {
                let go_plane = &grad_out[(n * g.out_channels + co) * ovol..][..ovol];
                let w_kernel = &w[(co * g.in_channels + ci) * k3..][..k3];
                for_each_row(g, |widx, o0, i0, len| {
                    let wv = w_kernel[widx];
                    let grow = &go_plane[o0..o0 + len];
                    if s == 1 {
                        for (xg, go) in gx_plane[i0..i0 + len].iter_mut().zip(grow) {
                            *xg += wv * go;
                        }
                    } else {
                        for (j, go) in grow.iter().enumerate() {
                            gx_plane[i0 + j * s] += wv * go;
                        }
                    }
                });
            }
        }
    }
    gx
}

/// Gradients with respect to weight and bias, accumulated over the batch in
/// ascending sample order.
fn conv3d_backward_params_rows(
    g: &Conv3dGeometry,
    grad_out: &[f64],
    x: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let ivol = g.in_volume();
    let ovol = g.out_volume();
    let k3 = g.kernel.pow(3);
    let s = g.stride;
    let mut gw = vec![0.0; g.out_channels * g.in_channels * k3];
    let mut gb = vec![0.0; g.out_channels];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let go_plane = &grad_out[(n * g.out_channels + co) * ovol..][..ovol];
            gb[co] += go_plane.iter().sum::<f64>();
            for ci in 0..g.in_channels {
                let x_plane = &x[(n * g.in_channels + ci) * ivol..][..ivol];
                let gw_kernel = &mut gw[(co * g.in_channels + ci) * k3..][..k3];
                for_each_row(g, |widx, o0, i0, len| {
                    let grow = &go_plane[o0..o0 + len];
                    let acc: f64 = if s == 1 {
                        grow.iter().zip(&x_plane[i0..i0 + len]).map(|(a, b)| a * b).sum()
                    } else {
                        grow.iter()
                            .enumerate()
                            .map(|(j, a)| a * x_plane[i0 + j * s])
                            .sum()
                    };
                    gw_kernel[widx] += acc;
                });
            }
        }
    }
    (gw, gb)
}

/// Stride-1 layout: each input plane is copied into a zero-padded buffer and
/// each output plane is computed with the padded row pitch. One kernel
/// offset then becomes a single shift over the whole plane, so the inner
/// loops run over thousands of contiguous values instead of one row.
struct PaddedPlanes {
    /// Padded extents.
    dims: [usize; 3],
    /// Length of an output plane in the padded pitch, up to its last valid
    /// voxel.
    span: usize,
    /// Plane shift of every kernel offset, in weight order.
    shifts: Vec<usize>,
}

impl PaddedPlanes {
    fn new(g: &Conv3dGeometry) -> Self {
        let p = g.padding;
        let dims = [g.input[0] + 2 * p, g.input[1] + 2 * p, g.input[2] + 2 * p];
        let [od, oh, ow] = g.output;
        let span = ((od - 1) * dims[1] + (oh - 1)) * dims[2] + ow;
        let k = g.kernel;
        let mut shifts = Vec::with_capacity(k * k * k);
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    shifts.push((kd * dims[1] + kh) * dims[2] + kw);
                }
            }
        }
        PaddedPlanes { dims, span, shifts }
    }

    fn volume(&self) -> usize {
        self.dims.iter().product()
    }

    /// Copies `[planes, D, H, W]` into zero-padded planes.
    fn pad(&self, g: &Conv3dGeometry, x: &[f64], planes: usize) -> Vec<f64> {
        let [d, h, w] = g.input;
        let p = g.padding;
        let [_, hp, wp] = self.dims;
        let pv = self.volume();
        let mut out = vec![0.0; planes * pv];
        for (src, dst) in x.chunks_exact(d * h * w).zip(out.chunks_exact_mut(pv)) {
            for z in 0..d {
                for y in 0..h {
                    let s = (z * h + y) * w;
                    let t = ((z + p) * hp + y + p) * wp + p;
                    dst[t..t + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        out
    }

    /// Moves `[planes, Do, Ho, Wo]` into the padded pitch; gaps stay zero.
    fn spread(&self, g: &Conv3dGeometry, y: &[f64], planes: usize) -> Vec<f64> {
        let [od, oh, ow] = g.output;
        let [_, hp, wp] = self.dims;
        let mut out = vec![0.0; planes * self.span];
        for (src, dst) in y.chunks_exact(od * oh * ow).zip(out.chunks_exact_mut(self.span)) {
            for z in 0..od {
                for r in 0..oh {
                    let s = (z * oh + r) * ow;
                    let t = (z * hp + r) * wp;
                    dst[t..t + ow].copy_from_slice(&src[s..s + ow]);
                }
            }
        }
        out
    }

    /// Inverse of [`Self::spread`] for one plane, appending to `out`.
    fn gather(&self, g: &Conv3dGeometry, plane: &[f64], out: &mut Vec<f64>) {
        let [od, oh, ow] = g.output;
        let [_, hp, wp] = self.dims;
        for z in 0..od {
            for r in 0..oh {
                let t = (z * hp + r) * wp;
                out.extend_from_slice(&plane[t..t + ow]);
            }
        }
    }

    /// Inverse of [`Self::pad`] for one plane, appending to `out`.
    fn crop(&self, g: &Conv3dGeometry, plane: &[f64], out: &mut Vec<f64>) {
        let [d, h, w] = g.input;
        let p = g.padding;
        let [_, hp, wp] = self.dims;
        for z in 0..d {
            for y in 0..h {
                let t = ((z + p) * hp + y + p) * wp + p;
                out.extend_from_slice(&plane[t..t + w]);
            }
        }
    }
}

/// `acc[i] += sum_j ws[j] * src[shifts[j] + i]`, fusing up to nine terms per
/// pass so `acc` is read and written once per group instead of per term.
fn shifted_axpy(acc: &mut [f64], src: &[f64], ws: &[f64], shifts: &[usize]) {
    let n = acc.len();
    match (ws, shifts) {
        (&[w0, w1, w2, w3, w4, w5, w6, w7, w8], &[s0, s1, s2, s3, s4, s5, s6, s7, s8]) => {
            let (x0, x1, x2) = (&src[s0..s0 + n], &src[s1..s1 + n], &src[s2..s2 + n]);
            let (x3, x4, x5) = (&src[s3..s3 + n], &src[s4..s4 + n], &src[s5..s5 + n]);
            let (x6, x7, x8) = (&src[s6..s6 + n], &src[s7..s7 + n], &src[s8..s8 + n]);
            for i in 0..n {
                acc[i] += (w0 * x0[i] + w1 * x1[i] + w2 * x2[i])
                    + (w3 * x3[i] + w4 * x4[i] + w5 * x5[i])
                    + (w6 * x6[i] + w7 * x7[i] + w8 * x8[i]);
            }
        }
        (&[w0, w1, w2], &[s0, s1, s2]) => {
            let (x0, x1, x2) = (&src[s0..s0 + n], &src[s1..s1 + n], &src[s2..s2 + n]);
            for i in 0..n {
                acc[i] += w0 * x0[i] + w1 * x1[i] + w2 * x2[i];
            }
        }
        (&[w0, w1], &[s0, s1]) => {
            let (x0, x1) = (&src[s0..s0 + n], &src[s1..s1 + n]);
            for i in 0..n {
                acc[i] += w0 * x0[i] + w1 * x1[i];
            }
        }
        _ => {
            for (&wv, &s) in ws.iter().zip(shifts) {
                for (a, xi) in acc.iter_mut().zip(&src[s..s + n]) {
                    *a += wv * xi;
                }
            }
        }
    }
}

/// `out[j] += sum_i a[i] * src[shifts[j] + i]`, three shifts per pass with
/// four partial sums each so the reduction vectorizes.
fn shifted_dots(a: &[f64], src: &[f64], shifts: &[usize], out: &mut [f64]) {
    const LANES: usize = 4;
    let n = a.len();
    let body = n - n % LANES;
    for (outs, group) in out.chunks_mut(3).zip(shifts.chunks(3)) {
        let mut sums = [0.0; 3];
        if let &[s0, s1, s2] = group {
            let mut l0 = [0.0; LANES];
            let mut l1 = [0.0; LANES];
            let mut l2 = [0.0; LANES];
            let chunks = a[..body]
                .chunks_exact(LANES)
                .zip(src[s0..s0 + body].chunks_exact(LANES))
                .zip(src[s1..s1 + body].chunks_exact(LANES))
                .zip(src[s2..s2 + body].chunks_exact(LANES));
            for (((ac, x0), x1), x2) in chunks {
                for l in 0..LANES {
                    l0[l] += ac[l] * x0[l];
                    l1[l] += ac[l] * x1[l];
                    l2[l] += ac[l] * x2[l];
                }
            }
            sums = [l0.iter().sum(), l1.iter().sum(), l2.iter().sum()];
        } else {
            for (sum, &s) in sums.iter_mut().zip(group) {
                let mut lane = [0.0; LANES];
                for (ac, x) in a[..body].chunks_exact(LANES).zip(src[s..s + body].chunks_exact(LANES)) {
                    for l in 0..LANES {
                        lane[l] += ac[l] * x[l];
                    }
                }
                *sum = lane.iter().sum();
            }
        }
        for ((o, sum), &s) in outs.iter_mut().zip(sums).zip(group) {
            let tail: f64 = (body..n).map(|i| a[i] * src[s + i]).sum();
            *o += sum + tail;
        }
    }
}

fn conv3d_forward_planes(g: &Conv3dGeometry, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let pp = PaddedPlanes::new(g);
    let xp = pp.pad(g, x, g.batch * g.in_channels);
    let pv = pp.volume();
    let k3 = g.kernel.pow(3);
    let mut acc = vec![0.0; pp.span];
    let mut out = Vec::with_capacity(g.batch * g.out_channels * g.out_volume());
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            acc.fill(bias[co]);
            for ci in 0..g.in_channels {
                let plane = &xp[(n * g.in_channels + ci) * pv..][..pv];
                let w_kernel = &w[(co * g.in_channels + ci) * k3..][..k3];
                for (ws, shifts) in w_kernel.chunks(9).zip(pp.shifts.chunks(9)) {
                    shifted_axpy(&mut acc, plane, ws, shifts);
                }
            }
            pp.gather(g, &acc, &mut out);
        }
    }
    out
}

fn conv3d_backward_input_planes(g: &Conv3dGeometry, grad_out: &[f64], w: &[f64]) -> Vec<f64> {
    // Gather form: gx[j] = sum_s w[s] * go[j - s], read from a copy of each
    // gradient plane placed `reach` zeros in so that `j - s` never underflows.
    let pp = PaddedPlanes::new(g);
    let pv = pp.volume();
    let k3 = g.kernel.pow(3);
    let reach = *pp.shifts.last().expect("kernel has at least one tap");
    let flipped: Vec<usize> = pp.shifts.iter().rev().map(|&s| reach - s).collect();
    let gop = pp.spread(g, grad_out, g.batch * g.out_channels);
    let mut padded = vec![0.0; pv + reach];
    let mut acc = vec![0.0; pv];
    let mut w_flipped = vec![0.0; k3];
    let mut gx = Vec::with_capacity(g.batch * g.in_channels * g.in_volume());
    for n in 0..g.batch {
        for ci in 0..g.in_channels {
            acc.fill(0.0);
            for co in 0..g.out_channels {
                padded[reach..reach + pp.span].copy_from_slice(&gop[(n * g.out_channels + co) * pp.span..][..pp.span]);
                let w_kernel = &w[(co * g.in_channels + ci) * k3..][..k3];
                for (dst, src) in w_flipped.iter_mut().zip(w_kernel.iter().rev()) {
                    *dst = *src;
                }
                for (ws, shifts) in w_flipped.chunks(9).zip(flipped.chunks(9)) {
                    shifted_axpy(&mut acc, &padded, ws, shifts);
                }
            }
            pp.crop(g, &acc, &mut gx);
        }
    }
    gx
}

fn conv3d_backward_params_planes(g: &Conv3dGeometry, grad_out: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pp = PaddedPlanes::new(g);
    let xp = pp.pad(g, x, g.batch * g.in_channels);
    let gop = pp.spread(g, grad_out, g.batch * g.out_channels);
    let pv = pp.volume();
    let k3 = g.kernel.pow(3);
    let mut gw = vec![0.0; g.out_channels * g.in_channels * k3];
    let mut gb = vec![0.0; g.out_channels];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let go = &gop[(n * g.out_channels + co) * pp.span..][..pp.span];
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..g.in_channels {
                let plane = &xp[(n * g.in_channels + ci) * pv..][..pv];
                let gw_kernel = &mut gw[(co * g.in_channels + ci) * k3..][..k3];
                shifted_dots(go, plane, &pp.shifts, gw_kernel);
            }
        }
    }
    (gw, gb)
}

/// Fast forward convolution; agrees with [`conv3d_forward_naive`] to
/// rounding.
pub fn conv3d_forward(g: &Conv3dGeometry, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    if g.stride == 1 {
        conv3d_forward_planes(g, x, w, bias)
    } else {
        conv3d_forward_rows(g, x, w, bias)
    }
}

/// Gradient of the convolution with respect to its input.
pub fn conv3d_backward_input(g: &Conv3dGeometry, grad_out: &[f64], w: &[f64]) -> Vec<f64> {
    if g.stride == 1 {
        conv3d_backward_input_planes(g, grad_out, w)
    } else {
        conv3d_backward_input_rows(g, grad_out, w)
    }
}

/// Gradients with respect to weight and bias, accumulated over the batch in
/// ascending sample order.
pub fn conv3d_backward_params(g: &Conv3dGeometry, grad_out: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    if g.stride == 1 {
        conv3d_backward_params_planes(g, grad_out, x)
    } else {
        conv3d_backward_params_rows(g, grad_out, x)
    }
}

/// Non-overlapping max pooling with a cubic window. Returns pooled values and,
/// for each output, the flat input index it came from. Ties keep the lowest
/// index.
pub fn maxpool3d_forward(shape: &[usize], x: &[f64], window: usize) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let (n, c) = (shape[0], shape[1]);
    let [d, h, w] = [shape[2], shape[3], shape[4]];
    let [od, oh, ow] = [d / window, h / window, w / window];
    let mut vals = Vec::with_capacity(n * c * od * oh * ow);
    let mut arg = Vec::with_capacity(vals.capacity());
    for plane in 0..n * c {
        let base = plane * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for dz in 0..window {
                        for dy in 0..window {
                            for dx in 0..window {
                                let idx = base
                                    + ((z * window + dz) * h + y * window + dy) * w
                                    + xo * window
                                    + dx;
                                if best_idx == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    vals.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    (vec![n, c, od, oh, ow], vals, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect()
    }

    #[test]
    fn fast_kernel_matches_reference() {
        for &(stride, padding, k, extent) in &[(1, 1, 3, 5), (2, 1, 3, 6), (1, 0, 3, 4), (2, 2, 5, 7), (1, 0, 1, 3)] {
            let x_shape = [2, 3, extent, extent + 1, extent];
            let w_shape = [4, 3, k, k, k];
            let x = ramp(x_shape.iter().product());
            let w = ramp(w_shape.iter().product());
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let g = Conv3dGeometry::new(&x_shape, &w_shape, 4, stride, padding).unwrap();
            let fast = conv3d_forward(&g, &x, &w, &b);
            let slow = conv3d_forward_naive(&g, &x, &w, &b);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn plane_backward_matches_row_backward() {
        for &(padding, k, extent) in &[(1, 3, 5), (0, 3, 4), (2, 5, 6), (0, 1, 3), (1, 3, 2)] {
            let x_shape = [2, 3, extent, extent + 1, extent + 2];
            let w_shape = [4, 3, k, k, k];
            let x = ramp(x_shape.iter().product());
            let w = ramp(w_shape.iter().product());
            let g = Conv3dGeometry::new(&x_shape, &w_shape, 4, 1, padding).unwrap();
            let go: Vec<f64> = ramp(g.batch * g.out_channels * g.out_volume()).iter().map(|v| v * 0.7 + 0.1).collect();
            let close = |a: &[f64], b: &[f64]| {
                assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
                }
            };
            close(&conv3d_backward_input(&g, &go, &w), &conv3d_backward_input_rows(&g, &go, &w));
            let (gw, gb) = conv3d_backward_params(&g, &go, &x);
            let (rw, rb) = conv3d_backward_params_rows(&g, &go, &x);
            close(&gw, &rw);
            close(&gb, &rb);
        }
    }

    #[test]
    fn geometry_rejects_bad_configs() {
        assert!(matches!(
            Conv3dGeometry::new(&[1, 1, 4, 4, 4], &[1, 1, 2, 2, 2], 1, 1, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Conv3dGeometry::new(&[1, 2, 4, 4, 4], &[1, 1, 3, 3, 3], 1, 1, 1),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Conv3dGeometry::new(&[1, 1, 2, 2, 2], &[1, 1, 3, 3, 3], 1, 1, 0),
            Err(Error::Shape(_))
        ));
        assert!(Conv3dGeometry::new(&[1, 1, 4, 4, 4], &[1, 1, 3, 3, 3], 2, 1, 1).is_err());
    }

    #[test]
    fn output_extent_formula() {
        let g = Conv3dGeometry::new(&[1, 1, 9, 8, 7], &[2, 1, 3, 3, 3], 2, 2, 1).unwrap();
        assert_eq!(g.output, [5, 4, 4]);
    }

    #[test]
    fn maxpool_ties_keep_first() {
        let x = vec![1.0; 8];
        let (_, vals, arg) = maxpool3d_forward(&[1, 1, 2, 2, 2], &x, 2);
        assert_eq!(vals, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
