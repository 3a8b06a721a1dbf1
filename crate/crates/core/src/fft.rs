//! Discrete Fourier transforms over `Complex64` slices.
//!
//! Power-of-two lengths use an iterative radix-2 kernel whose twiddles are
//! evaluated directly (no recurrence), so round-off stays near machine
//! precision. Other lengths go through Bluestein's chirp-z algorithm.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;

/// A reusable transform plan for one length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    len: usize,
    kind: PlanKind,
}

#[derive(Debug, Clone)]
enum PlanKind {
    Radix2 {
        // e^{-j 2 pi k / n}, k < n/2
        twiddles: Vec<Complex64>,
        rev: Vec<usize>,
    },
    Bluestein {
        // chirp[k] = e^{-j pi k^2 / n}
        chirp: Vec<Complex64>,
        // forward transform of the conjugate chirp, zero-padded to m
        kernel_hat: Vec<Complex64>,
        inner: Box<FftPlan>,
    },
}

impl FftPlan {
    pub fn new(len: usize) -> Self {
        assert!(len >= 1, "transform length must be positive");
        if len.is_power_of_two() {
            let half = len / 2;
            let twiddles = (0..half)
                .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / len as f64))
                .collect();
            let bits = len.trailing_zeros();
            let rev = (0..len)
                .map(|i| {
                    if bits == 0 {
                        0
                    } else {
                        i.reverse_bits() >> (usize::BITS - bits)
                    }
                })
                .collect();
            return FftPlan {
                len,
                kind: PlanKind::Radix2 { twiddles, rev },
            };
        }
        let m = (2 * len - 1).next_power_of_two();
        // k^2 mod 2n keeps the phase argument small for large k.
        let chirp: Vec<Complex64> = (0..len)
            .map(|k| {
                let k2 = (k as u128 * k as u128 % (2 * len as u128)) as f64;
                Complex64::from_polar(1.0, -PI * k2 / len as f64)
            })
            .collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); m];
        kernel[0] = chirp[0].conj();
        for k in 1..len {
            kernel[k] = chirp[k].conj();
            kernel[m - k] = chirp[k].conj();
        }
        let inner = FftPlan::new(m);
        inner.forward(&mut kernel);
        FftPlan {
            len,
            kind: PlanKind::Bluestein {
                chirp,
                kernel_hat: kernel,
                inner: Box::new(inner),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Unnormalized forward transform, `X[k] = sum_n x[n] e^{-j 2 pi n k / N}`.
    pub fn forward(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.len, "buffer length does not match plan");
        match &self.kind {
            PlanKind::Radix2 { twiddles, rev } => radix2(buf, twiddles, rev),
            PlanKind::Bluestein {
                chirp,
                kernel_hat,
                inner,
            } => {
                let m = kernel_hat.len();
                let mut a = vec![Complex64::new(0.0, 0.0); m];
                for k in 0..self.len {
                    a[k] = buf[k] * chirp[k];
                }
                inner.forward(&mut a);
                for (x, h) in a.iter_mut().zip(kernel_hat) {
                    *x *= h;
                }
                inner.inverse(&mut a);
                for k in 0..self.len {
                    buf[k] = a[k] * chirp[k];
                }
            }
        }
    }

    /// Inverse transform including the `1/N` factor.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        for x in buf.iter_mut() {
            *x = x.conj();
        }
        self.forward(buf);
        let scale = 1.0 / self.len as f64;
        for x in buf.iter_mut() {
            *x = x.conj() * scale;
        }
    }
}

fn radix2(buf: &mut [Complex64], twiddles: &[Complex64], rev: &[usize]) {
    let n = buf.len();
    for i in 0..n {
        let j = rev[i];
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let step = n / size;
        for start in (0..n).step_by(size) {
            for k in 0..half {
                let w = twiddles[k * step];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        size *= 2;
    }
}

/// One-shot unnormalized forward transform.
pub fn fft(buf: &mut [Complex64]) {
    FftPlan::new(buf.len()).forward(buf);
}

/// One-shot inverse transform (with `1/N`).
pub fn ifft(buf: &mut [Complex64]) {
    FftPlan::new(buf.len()).inverse(buf);
}
