//! 3x3 stride-1 zero-padded convolution kernels over padded planes.
//!
//! Every activation plane is stored with a one-pixel zero border, so a plane of
//! an `h x w` image occupies `(h + 2) * (w + 2)` slots. With that layout a
//! kernel tap is a constant flat offset and each tap becomes a single long
//! axpy. Border slots of outputs pick up wrapped garbage during the axpy and
//! are re-zeroed afterwards.

use std::ops::{Add, AddAssign, Mul, Sub};

pub trait Real:
    Copy
    + Default
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + AddAssign
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

pub const KERNEL: usize = 3;
pub const TAPS: usize = KERNEL * KERNEL;

/// Geometry of one padded plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
}

impl Plane {
    pub fn stride(&self) -> usize {
        self.width + 2
    }

    pub fn padded_len(&self) -> usize {
        (self.height + 2) * (self.width + 2)
    }

    /// Flat range of the padded plane covering every interior pixel and
    /// keeping every tap offset in bounds.
    fn sweep(&self) -> (usize, usize) {
        let s = self.stride();
        (s + 1, (self.height + 1) * s - 1)
    }

    fn tap_offset(&self, tap: usize) -> isize {
        let ky = (tap / KERNEL) as isize - 1;
        let kx = (tap % KERNEL) as isize - 1;
        ky * self.stride() as isize + kx
    }

    pub fn pad<T: Real>(&self, image: &[T], out: &mut [T]) {
        let s = self.stride();
        out.iter_mut().for_each(|v| *v = T::ZERO);
        for y in 0..self.height {
            let dst = (y + 1) * s + 1;
            out[dst..dst + self.width].copy_from_slice(&image[y * self.width..(y + 1) * self.width]);
        }
    }

    pub fn unpad<T: Real>(&self, padded: &[T], out: &mut [T]) {
        let s = self.stride();
        for y in 0..self.height {
            let src = (y + 1) * s + 1;
            out[y * self.width..(y + 1) * self.width].copy_from_slice(&padded[src..src + self.width]);
        }
    }

    /// Zeroes the border ring of every channel in `planes`.
    pub fn clear_border<T: Real>(&self, planes: &mut [T]) {
        let s = self.stride();
        let len = self.padded_len();
        for plane in planes.chunks_exact_mut(len) {
            plane[..s].iter_mut().for_each(|v| *v = T::ZERO);
            plane[len - s..].iter_mut().for_each(|v| *v = T::ZERO);
            for y in 1..=self.height {
                plane[y * s] = T::ZERO;
                plane[y * s + s - 1] = T::ZERO;
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::ZERO;
    for (&xa, &xb) in ca.remainder().iter().zip(cb.remainder()) {
        tail += xa * xb;
    }
    let s0 = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let s1 = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

/// Weight layout: `[cout][cin][3][3]`, bias `[cout]`.
pub fn forward<T: Real>(plane: Plane, input: &[T], cin: usize, weight: &[T], bias: &[T], cout: usize, out: &mut [T]) {
    let len = plane.padded_len();
    let (lo, hi) = plane.sweep();
    debug_assert_eq!(input.len(), cin * len);
    debug_assert_eq!(out.len(), cout * len);
    for co in 0..cout {
        let dst = &mut out[co * len..(co + 1) * len];
        dst.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..cin {
            let src = &input[ci * len..(ci + 1) * len];
            let kernel = &weight[(co * cin + ci) * TAPS..(co * cin + ci + 1) * TAPS];
            for (tap, &wv) in kernel.iter().enumerate() {
                let off = plane.tap_offset(tap);
                let s_lo = (lo as isize + off) as usize;
                let s_hi = (hi as isize + off) as usize;
                axpy(wv, &src[s_lo..s_hi], &mut dst[lo..hi]);
            }
        }
    }
    plane.clear_border(out);
}

/// Accumulates weight and bias gradients into `dweight`/`dbias` and, when
/// requested, writes the input gradient into `dinput` (overwriting it).
///
/// `dout` must have a zero border.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Real>(
    plane: Plane,
    input: &[T],
    cin: usize,
    weight: &[T],
    dout: &[T],
    cout: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    dinput: Option<&mut [T]>,
) {
    let len = plane.padded_len();
    let (lo, hi) = plane.sweep();
    for co in 0..cout {
        let g = &dout[co * len..(co + 1) * len];
        dbias[co] += g.iter().fold(T::ZERO, |a, &v| a + v);
        for ci in 0..cin {
            let src = &input[ci * len..(ci + 1) * len];
            let base = (co * cin + ci) * TAPS;
            for tap in 0..TAPS {
                let off = plane.tap_offset(tap);
                let s_lo = (lo as isize + off) as usize;
                let s_hi = (hi as isize + off) as usize;
                dweight[base + tap] += dot(&g[lo..hi], &src[s_lo..s_hi]);
            }
        }
    }
    if let Some(din) = dinput {
        din.iter_mut().for_each(|v| *v = T::ZERO);
        for ci in 0..cin {
            let dst = &mut din[ci * len..(ci + 1) * len];
            for co in 0..cout {
                let g = &dout[co * len..(co + 1) * len];
                let base = (co * cin + ci) * TAPS;
                for tap in 0..TAPS {
                    let off = plane.tap_offset(tap);
                    let s_lo = (lo as isize + off) as usize;
                    let s_hi = (hi as isize + off) as usize;
                    axpy(weight[base + tap], &g[lo..hi], &mut dst[s_lo..s_hi]);
                }
            }
        }
        plane.clear_border(din);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(h: usize, w: usize, input: &[f64], cin: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = x as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += weight[((co * cin + ci) * 3 + ky) * 3 + kx]
                                    * input[ci * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[co * h * w + y * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn padded_forward_matches_naive() {
        let (h, w, cin, cout) = (5, 7, 2, 3);
        let plane = Plane { height: h, width: w };
        let input: Vec<f64> = (0..cin * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let weight: Vec<f64> = (0..cout * cin * 9)
            .map(|i| ((i * 13 % 17) as f64 - 8.0) / 9.0)
            .collect();
        let bias = vec![0.25, -0.5, 1.0];
        let mut padded = vec![0.0; cin * plane.padded_len()];
        for ci in 0..cin {
            plane.pad(
                &input[ci * h * w..(ci + 1) * h * w],
                &mut padded[ci * plane.padded_len()..(ci + 1) * plane.padded_len()],
            );
        }
        let mut out = vec![0.0; cout * plane.padded_len()];
        forward(plane, &padded, cin, &weight, &bias, cout, &mut out);
        let expect = naive(h, w, &input, cin, &weight, &bias, cout);
        for co in 0..cout {
            let mut got = vec![0.0; h * w];
            plane.unpad(&out[co * plane.padded_len()..(co + 1) * plane.padded_len()], &mut got);
            for (a, b) in got.iter().zip(&expect[co * h * w..(co + 1) * h * w]) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
        // border ring stays zero
        let s = plane.stride();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[s], 0.0);
        assert_eq!(out[2 * s - 1], 0.0);
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..13).map(f64::from).collect();
        let b = vec![1.0; 13];
        assert_eq!(dot(&a, &b), 78.0);
    }
}
