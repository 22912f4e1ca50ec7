use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::tape::{GradSink, Op, Var};

const MR: usize = 4;
const NR: usize = 8;

/// `c[m,n] += a[m,k] · b[k,n]`, all row-major.
///
/// Works on `MR x NR` register tiles over packed column panels of `b`. Every
/// entry sums its `k` products in index order starting from zero and is then
/// added to `c` once, so an entry's value does not depend on the tiling or on
/// the other rows and columns of the call.
///
/// On x86-64 with AVX the same code is compiled for 256-bit vectors. Only
/// the vector width changes (no fused multiply-add), so both paths round
/// identically.
pub(crate) fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the feature was detected at runtime.
        unsafe { gemm_nn_avx(m, k, n, a, b, c) };
        return;
    }
    gemm_nn_body(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn gemm_nn_avx<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    gemm_nn_body(m, k, n, a, b, c);
}

#[inline(always)]
fn gemm_nn_body<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    let mb = m - m % MR;
    let nb = n - n % NR;
    let mut panel = vec![S::zero(); k * NR];
    for j in (0..nb).step_by(NR) {
        for p in 0..k {
            panel[p * NR..(p + 1) * NR].copy_from_slice(&b[p * n + j..p * n + j + NR]);
        }
        for i in (0..mb).step_by(MR) {
            let a0 = &a[i * k..(i + 1) * k];
            let a1 = &a[(i + 1) * k..(i + 2) * k];
            let a2 = &a[(i + 2) * k..(i + 3) * k];
            let a3 = &a[(i + 3) * k..(i + 4) * k];
            let mut acc = [[S::zero(); NR]; MR];
            for (p, bp) in panel.chunks_exact(NR).enumerate() {
                let bp: &[S; NR] = bp.try_into().unwrap();
                let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
                for q in 0..NR {
                    acc[0][q] += x0 * bp[q];
                    acc[1][q] += x1 * bp[q];
                    acc[2][q] += x2 * bp[q];
                    acc[3][q] += x3 * bp[q];
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let cr = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for q in 0..NR {
                    cr[q] += row[q];
                }
            }
        }
        for i in mb..m {
            let ar = &a[i * k..(i + 1) * k];
            let mut acc = [S::zero(); NR];
            for (p, bp) in panel.chunks_exact(NR).enumerate() {
                let bp: &[S; NR] = bp.try_into().unwrap();
                let x = ar[p];
                for q in 0..NR {
                    acc[q] += x * bp[q];
                }
            }
            let cr = &mut c[i * n + j..i * n + j + NR];
            for q in 0..NR {
                cr[q] += acc[q];
            }
        }
    }
    for j in nb..n {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            let mut acc = S::zero();
            for (p, &x) in ar.iter().enumerate() {
                acc += x * b[p * n + j];
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`.
pub(crate) fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    gemm_nn(m, k, n, &transpose(k, m, a), b, c);
}

pub(crate) fn transpose<S: Scalar>(rows: usize, cols: usize, a: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`.
pub(crate) fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

impl<'t, S: Scalar> Var<'t, S> {
    /// `[M,K] · [K,N] → [M,N]`.
    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.same_tape(&other)?;
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        gemm_nn(m, k, n, a.data(), b.data(), &mut out);
        self.tape.count(|c| c.macs += (m * k * n) as u64);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::Matmul(self.id, other.id),
            rg,
        )
    }

    /// Batched product `[B,M,K] · [B,K,N]`, or `[B,M,K] · [B,N,K]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(self, other: Var<'t, S>, trans_b: bool) -> Result<Var<'t, S>> {
        self.same_tape(&other)?;
        let a = self.value();
        let b = other.value();
        let bad = || Error::ShapeMismatch {
            op: "bmm",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bk, n) = if trans_b {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![S::zero(); batch * m * n];
        for i in 0..batch {
            let ab = &a.data()[i * m * k..(i + 1) * m * k];
            let bb = &b.data()[i * k * n..(i + 1) * k * n];
            let cb = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(m, k, n, ab, bb, cb);
            } else {
                gemm_nn(m, k, n, ab, bb, cb);
            }
        }
        self.tape.count(|c| c.macs += (batch * m * k * n) as u64);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(
            "bmm",
            Tensor::from_parts(vec![batch, m, n], out),
            Op::Bmm {
                a: self.id,
                b: other.id,
                trans_b,
            },
            rg,
        )
    }
}

pub(crate) fn backward_matmul<S: Scalar>(sink: &mut GradSink<'_, S>, a: usize, b: usize, g: &[S]) {
    let (m, k) = (sink.value(a).shape()[0], sink.value(a).shape()[1]);
    let n = sink.value(b).shape()[1];
    if sink.wants(a) {
        let mut ga = vec![S::zero(); m * k];
        gemm_nt(m, n, k, g, sink.value(b).data(), &mut ga);
        sink.add_owned(a, ga);
    }
    if sink.wants(b) {
        let mut gb = vec![S::zero(); k * n];
        gemm_tn(k, m, n, sink.value(a).data(), g, &mut gb);
        sink.add_owned(b, gb);
    }
}

pub(crate) fn backward_bmm<S: Scalar>(
    sink: &mut GradSink<'_, S>,
    a: usize,
    b: usize,
    trans_b: bool,
    g: &[S],
) {
    let ashape = sink.value(a).shape().to_vec();
    let (batch, m, k) = (ashape[0], ashape[1], ashape[2]);
    let n = if trans_b {
        sink.value(b).shape()[1]
    } else {
        sink.value(b).shape()[2]
    };
    if sink.wants(a) {
        let bv = sink.value(b).data();
        let mut ga = vec![S::zero(); batch * m * k];
        for i in 0..batch {
            let gb = &g[i * m * n..(i + 1) * m * n];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let out = &mut ga[i * m * k..(i + 1) * m * k];
            if trans_b {
                // b is [n,k]: ga = g · b
                gemm_nn(m, n, k, gb, bb, out);
            } else {
                // b is [k,n]: ga = g · bᵀ
                gemm_nt(m, n, k, gb, bb, out);
            }
        }
        sink.add_owned(a, ga);
    }
    if sink.wants(b) {
        let av = sink.value(a).data();
        let mut gbv = vec![S::zero(); batch * k * n];
        for i in 0..batch {
            let gb = &g[i * m * n..(i + 1) * m * n];
            let ab = &av[i * m * k..(i + 1) * m * k];
            let out = &mut gbv[i * k * n..(i + 1) * k * n];
            if trans_b {
                // gb[n,k] = gᵀ · a
                gemm_tn(n, m, k, gb, ab, out);
            } else {
                // gb[k,n] = aᵀ · g
                gemm_tn(k, m, n, ab, gb, out);
            }
        }
        sink.add_owned(b, gbv);
    }
}
