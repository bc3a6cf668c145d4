//! Accumulating dense kernels. All loops are written in axpy form so the inner
//! loop runs over contiguous memory and vectorizes without reassociation.

use super::Real;

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != T::zero() {
                axpy(aik, &b[kk * n..(kk + 1) * n], crow);
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        let arow = &a[kk * m..(kk + 1) * m];
        for (i, &aki) in arow.iter().enumerate() {
            if aki != T::zero() {
                axpy(aki, brow, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a valid (unpadded) 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds `x[B,C,H,W]` into `[B·OH·OW, C·kh·kw]` patch rows.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let pl = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * pl];
    let plane = g.height * g.width;
    for b in 0..g.batch {
        let img = &x[b * g.in_ch * plane..(b + 1) * g.in_ch * plane];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let r = (b * g.out_h + oy) * g.out_w + ox;
                let dst = &mut cols[r * pl..(r + 1) * pl];
                let mut p = 0;
                for c in 0..g.in_ch {
                    for ky in 0..g.kh {
                        let iy = oy * g.stride + ky;
                        let src = &img[c * plane + iy * g.width + ox * g.stride..];
                        dst[p..p + g.kw].copy_from_slice(&src[..g.kw]);
                        p += g.kw;
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto `dx[B,C,H,W]`.
pub fn col2im_acc<T: Real>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let pl = g.patch_len();
    let plane = g.height * g.width;
    for b in 0..g.batch {
        let img = &mut dx[b * g.in_ch * plane..(b + 1) * g.in_ch * plane];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let r = (b * g.out_h + oy) * g.out_w + ox;
                let src = &dcols[r * pl..(r + 1) * pl];
                let mut p = 0;
                for c in 0..g.in_ch {
                    for ky in 0..g.kh {
                        let iy = oy * g.stride + ky;
                        let off = c * plane + iy * g.width + ox * g.stride;
                        for kx in 0..g.kw {
                            img[off + kx] += src[p + kx];
                        }
                        p += g.kw;
                    }
                }
            }
        }
    }
}
