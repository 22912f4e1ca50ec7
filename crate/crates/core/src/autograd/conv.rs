//! 2-D and 3-D cross-correlation through a shared im2col + GEMM path.
//! A 2-D convolution is the depth-1 case of the 3-D kernel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::tape::{GradSink, Op, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    /// input extents (depth, height, width)
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl ConvGeom {
    fn in_len(&self) -> usize {
        self.c_in * self.input.iter().product::<usize>()
    }

    fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    pub(crate) fn macs(&self) -> u64 {
        (self.batch * self.c_out * self.col_rows() * self.out_positions()) as u64
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvNode {
    x: usize,
    w: usize,
    bias: Option<usize>,
    geom: ConvGeom,
}

/// Output extent of one axis, or `None` when the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel > padded || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Writes sample `x` into columns `offset..offset+P` of a `[rows, ld]` matrix.
fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], cols: &mut [S], ld: usize, offset: usize) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = g.out_positions();
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * ld + offset..row * ld + offset + p];
                    let mut o = 0;
                    for zd in 0..od {
                        let zi = (zd * sd + a) as isize - pd as isize;
                        for yh in 0..oh {
                            let yi = (yh * sh + b) as isize - ph as isize;
                            let valid_zy = zi >= 0 && (zi as usize) < id && yi >= 0 && (yi as usize) < ih;
                            for xw in 0..ow {
                                let xi = (xw * sw + e) as isize - pw as isize;
                                dst[o] = if valid_zy && xi >= 0 && (xi as usize) < iw {
                                    xc[(zi as usize * ih + yi as usize) * iw + xi as usize]
                                } else {
                                    S::zero()
                                };
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<S: Scalar>(g: &ConvGeom, cols: &[S], ld: usize, offset: usize, dx: &mut [S]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = g.out_positions();
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * ld + offset..row * ld + offset + p];
                    let mut o = 0;
                    for zd in 0..od {
                        let zi = (zd * sd + a) as isize - pd as isize;
                        for yh in 0..oh {
                            let yi = (yh * sh + b) as isize - ph as isize;
                            let valid_zy = zi >= 0 && (zi as usize) < id && yi >= 0 && (yi as usize) < ih;
                            for xw in 0..ow {
                                let xi = (xw * sw + e) as isize - pw as isize;
                                if valid_zy && xi >= 0 && (xi as usize) < iw {
                                    xc[(zi as usize * ih + yi as usize) * iw + xi as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Parameters of one convolution call. `stride` and `padding` are per
/// spatial axis: two entries for 2-D, three for 3-D.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec<'a> {
    pub stride: &'a [usize],
    pub padding: &'a [usize],
}

impl<'t, S: Scalar> Var<'t, S> {
    /// 2-D cross-correlation. `self` is `[C_in,H,W]` or `[B,C_in,H,W]`,
    /// `w` is `[C_out,C_in,kh,kw]`, `bias` is `[C_out]`.
    pub fn conv2d(self, w: Var<'t, S>, bias: Option<Var<'t, S>>, spec: ConvSpec<'_>) -> Result<Var<'t, S>> {
        self.conv_impl(w, bias, spec, 2)
    }

    /// 3-D cross-correlation. `self` is `[C_in,S,H,W]` or `[B,C_in,S,H,W]`,
    /// `w` is `[C_out,C_in,ks,kh,kw]`.
    pub fn conv3d(self, w: Var<'t, S>, bias: Option<Var<'t, S>>, spec: ConvSpec<'_>) -> Result<Var<'t, S>> {
        self.conv_impl(w, bias, spec, 3)
    }

    fn conv_impl(
        self,
        w: Var<'t, S>,
        bias: Option<Var<'t, S>>,
        spec: ConvSpec<'_>,
        dims: usize,
    ) -> Result<Var<'t, S>> {
        let name = if dims == 2 { "conv2d" } else { "conv3d" };
        self.same_tape(&w)?;
        if let Some(b) = &bias {
            self.same_tape(b)?;
        }
        let x = self.value();
        let wv = w.value();
        let xs = x.shape().to_vec();
        let ws = wv.shape().to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: name,
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        let batched = match xs.len() {
            r if r == dims + 1 => false,
            r if r == dims + 2 => true,
            _ => return Err(mismatch()),
        };
        if ws.len() != dims + 2 || spec.stride.len() != dims || spec.padding.len() != dims {
            return Err(mismatch());
        }
        let (batch, rest) = if batched { (xs[0], &xs[1..]) } else { (1, &xs[..]) };
        let c_in = rest[0];
        if ws[1] != c_in {
            return Err(mismatch());
        }
        let c_out = ws[0];
        let lift = |v: &[usize], fill: usize| -> [usize; 3] {
            if dims == 2 {
                [fill, v[0], v[1]]
            } else {
                [v[0], v[1], v[2]]
            }
        };
        let input = lift(&rest[1..], 1);
        let kernel = lift(&ws[2..], 1);
        let stride = lift(spec.stride, 1);
        let pad = lift(spec.padding, 0);
        let mut output = [0; 3];
        for i in 0..3 {
            output[i] = conv_out_extent(input[i], kernel[i], stride[i], pad[i]).ok_or_else(|| {
                Error::InvalidShape {
                    op: name,
                    detail: format!(
                        "kernel {:?} does not fit padded input {:?} (padding {:?})",
                        &ws[2..],
                        &rest[1..],
                        spec.padding
                    ),
                }
            })?;
        }
        if let Some(b) = &bias {
            if b.shape() != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: vec![c_out],
                    rhs: b.shape(),
                });
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            input,
            kernel,
            stride,
            pad,
            output,
        };
        let p = geom.out_positions();
        let rows = geom.col_rows();
        // one GEMM over the whole batch: [c_out, rows] · [rows, batch·P]
        let ld = batch * p;
        let mut cols = vec![S::zero(); rows * ld];
        for bi in 0..batch {
            im2col(&geom, &x.data()[bi * geom.in_len()..(bi + 1) * geom.in_len()], &mut cols, ld, bi * p);
        }
        let mut wide = vec![S::zero(); c_out * ld];
        gemm_nn(c_out, rows, ld, wv.data(), &cols, &mut wide);
        drop(cols);
        let mut out = vec![S::zero(); batch * c_out * p];
        let bias_v = bias.map(|b| b.value());
        for bi in 0..batch {
            for o in 0..c_out {
                let src = &wide[o * ld + bi * p..o * ld + (bi + 1) * p];
                let dst = &mut out[(bi * c_out + o) * p..(bi * c_out + o + 1) * p];
                match &bias_v {
                    Some(bv) => {
                        let b = bv.data()[o];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + b);
                    }
                    None => dst.copy_from_slice(src),
                }
            }
        }
        self.tape.count(|c| c.macs += geom.macs());
        let mut out_shape = Vec::with_capacity(xs.len());
        if batched {
            out_shape.push(batch);
        }
        out_shape.push(c_out);
        if dims == 2 {
            out_shape.extend_from_slice(&output[1..]);
        } else {
            out_shape.extend_from_slice(&output);
        }
        let rg = self.requires_grad() || w.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        self.tape.push(
            name,
            Tensor::from_parts(out_shape, out),
            Op::Conv(ConvNode {
                x: self.id,
                w: w.id,
                bias: bias.map(|b| b.id),
                geom,
            }),
            rg,
        )
    }
}

pub(crate) fn backward<S: Scalar>(sink: &mut GradSink<'_, S>, node: &ConvNode, g: &[S]) {
    let geom = &node.geom;
    let p = geom.out_positions();
    let rows = geom.col_rows();
    let c_out = geom.c_out;
    if let Some(b) = node.bias {
        if sink.wants(b) {
            let mut gb = vec![S::zero(); c_out];
            for bi in 0..geom.batch {
                let gbatch = &g[bi * c_out * p..(bi + 1) * c_out * p];
                for (o, chunk) in gbatch.chunks(p).enumerate() {
                    gb[o] += chunk.iter().copied().sum();
                }
            }
            sink.add_owned(b, gb);
        }
    }
    let want_w = sink.wants(node.w);
    let want_x = sink.wants(node.x);
    if !want_w && !want_x {
        return;
    }
    let x = sink.value(node.x).data();
    let w = sink.value(node.w).data();
    let in_len = geom.in_len();
    let ld = geom.batch * p;
    // gradient rearranged to [c_out, batch·P]
    let mut gwide = vec![S::zero(); c_out * ld];
    for bi in 0..geom.batch {
        for o in 0..c_out {
            gwide[o * ld + bi * p..o * ld + (bi + 1) * p]
                .copy_from_slice(&g[(bi * c_out + o) * p..(bi * c_out + o + 1) * p]);
        }
    }
    let mut gw = vec![S::zero(); c_out * rows];
    if want_w {
        let mut cols = vec![S::zero(); rows * ld];
        for bi in 0..geom.batch {
            im2col(geom, &x[bi * in_len..(bi + 1) * in_len], &mut cols, ld, bi * p);
        }
        // gw[c_out, rows] = g[c_out, ld] · cols[rows, ld]ᵀ
        gemm_nt(c_out, ld, rows, &gwide, &cols, &mut gw);
    }
    let mut gx = Vec::new();
    if want_x {
        let mut dcols = vec![S::zero(); rows * ld];
        // dcols[rows, ld] = wᵀ[rows, c_out] · g[c_out, ld]
        gemm_tn(rows, c_out, ld, w, &gwide, &mut dcols);
        gx = vec![S::zero(); x.len()];
        for bi in 0..geom.batch {
            col2im(geom, &dcols, ld, bi * p, &mut gx[bi * in_len..(bi + 1) * in_len]);
        }
    }
    if want_w {
        sink.add_owned(node.w, gw);
    }
    if want_x {
        sink.add_owned(node.x, gx);
    }
}
