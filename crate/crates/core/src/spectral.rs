//! Discrete Fourier machinery: the O(M²) reference transform, an iterative
//! radix-2 FFT, and the parameter-free 2-D token mixer.
//!
//! All transforms use the unnormalized forward convention
//! `X_k = Σ_m x_m · e^{-i·2π·m·k/M}`. The mixer keeps only the real part of the
//! composed 2-D transform; any global scale is absorbed by the layer norm that
//! follows it in a block.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token-mixing sublayer used inside each IFT block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MixerKind {
    /// `Re(F_seq(F_hidden(x)))`, parameter-free.
    FourierMix,
    /// Multi-head self-attention with Q/K/V/O projections.
    SelfAttention,
}

/// Complex vector stored as split real and imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVector {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexVector {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::shape("complex vector", &[re.len()], &[im.len()]));
        }
        Ok(Self { re, im })
    }

    pub fn from_real(re: Vec<f64>) -> Self {
        let im = vec![0.0; re.len()];
        Self { re, im }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    /// Σ |x_m|²
    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(a, b)| a * a + b * b).sum()
    }
}

/// Direct evaluation of the DFT sum. Works for any length; used as the oracle
/// for [`fft`].
pub fn dft_naive(x: &ComplexVector) -> ComplexVector {
    let m = x.len();
    let mut out = ComplexVector::from_real(vec![0.0; m]);
    for k in 0..m {
        let (mut sr, mut si) = (0.0, 0.0);
        for j in 0..m {
            // reduce the phase index first so large M keeps full accuracy
            let angle = -2.0 * PI * ((j * k) % m) as f64 / m as f64;
            let (s, c) = angle.sin_cos();
            sr += x.re[j] * c - x.im[j] * s;
            si += x.re[j] * s + x.im[j] * c;
        }
        out.re[k] = sr;
        out.im[k] = si;
    }
    out
}

/// Precomputed twiddles and bit-reversal permutation for one transform length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    rev: Vec<usize>,
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::contract(alloc::format!(
                "fft length {n} is not a power of two; pad the input or use dft_naive"
            )));
        }
        let half = n / 2;
        let (cos, sin) = (0..half)
            .map(|j| {
                let angle = -2.0 * PI * j as f64 / n as f64;
                (angle.cos(), angle.sin())
            })
            .unzip();
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        Ok(Self { n, cos, sin, rev })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform of split-complex data.
    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        assert!(re.len() == n && im.len() == n, "fft buffer length mismatch");
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for j in 0..half {
                    let (wr, wi) = (self.cos[j * stride], self.sin[j * stride]);
                    let (a, b) = (start + j, start + j + half);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

/// Radix-2 FFT. The length must be a power of two.
pub fn fft(x: &ComplexVector) -> Result<ComplexVector> {
    let plan = FftPlan::new(x.len())?;
    let mut out = x.clone();
    plan.forward(&mut out.re, &mut out.im);
    Ok(out)
}

/// Plans for mixing `[seq × hidden]` blocks.
#[derive(Debug, Clone)]
pub struct MixPlan {
    seq: FftPlan,
    hidden: FftPlan,
}

impl MixPlan {
    pub fn new(seq: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            seq: FftPlan::new(seq)?,
            hidden: FftPlan::new(hidden)?,
        })
    }

    /// Applies the mixer to every consecutive `[seq × hidden]` block of
    /// `input`, writing the result to `out`.
    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        let (s, h) = (self.seq.n, self.hidden.n);
        let block = s * h;
        assert!(input.len() % block == 0 && out.len() == input.len());
        let mut re = vec![0.0; block];
        let mut im = vec![0.0; block];
        let mut col_re = vec![0.0; s];
        let mut col_im = vec![0.0; s];
        for (x, y) in input.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
            re.copy_from_slice(x);
            im.iter_mut().for_each(|v| *v = 0.0);
            for (r, i) in re.chunks_exact_mut(h).zip(im.chunks_exact_mut(h)) {
                self.hidden.forward(r, i);
            }
            for c in 0..h {
                for t in 0..s {
                    col_re[t] = re[t * h + c];
                    col_im[t] = im[t * h + c];
                }
                self.seq.forward(&mut col_re, &mut col_im);
                for t in 0..s {
                    y[t * h + c] = col_re[t];
                }
            }
        }
    }
}

/// `Re(F_seq(F_hidden(x)))` for a single `[seq × hidden]` matrix.
pub fn fourier_mix(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::shape("fourier_mix", x.shape(), &[]));
    }
    let plan = MixPlan::new(x.shape()[0], x.shape()[1])?;
    let mut out = vec![0.0; x.len()];
    plan.apply(x.data(), &mut out);
    Tensor::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn impulse_gives_flat_spectrum() {
        let x = ComplexVector::from_real(vec![1.0, 0.0, 0.0, 0.0]);
        let y = dft_naive(&x);
        assert_eq!(y.re, vec![1.0; 4]);
        assert_eq!(y.im, vec![0.0; 4]);
        let mut imp = vec![0.0; 16];
        imp[0] = 1.0;
        let y = fft(&ComplexVector::from_real(imp)).unwrap();
        assert_eq!(y.re, vec![1.0; 16]);
    }

    #[test]
    fn constant_concentrates_at_dc() {
        let y = dft_naive(&ComplexVector::from_real(vec![1.0; 4]));
        assert!(close(&y.re, &[4.0, 0.0, 0.0, 0.0], 1e-12));
        assert!(close(&y.im, &[0.0; 4], 1e-12));
    }

    #[test]
    fn shifted_impulse_at_m4() {
        let y = dft_naive(&ComplexVector::from_real(vec![0.0, 1.0, 0.0, 0.0]));
        assert!(close(&y.re, &[1.0, 0.0, -1.0, 0.0], 1e-12));
        assert!(close(&y.im, &[0.0, -1.0, 0.0, 1.0], 1e-12));
        let z = fft(&ComplexVector::from_real(vec![0.0, 1.0, 0.0, 0.0])).unwrap();
        assert!(close(&z.re, &y.re, 1e-12) && close(&z.im, &y.im, 1e-12));
    }

    #[test]
    fn non_power_of_two_is_rejected() {
        let err = fft(&ComplexVector::from_real(vec![0.0; 6])).unwrap_err();
        assert!(matches!(err, Error::Contract(ref m) if m.contains("dft_naive")));
        assert!(fourier_mix(&Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn length_one_is_identity() {
        let y = fft(&ComplexVector::new(vec![2.5], vec![-1.0]).unwrap()).unwrap();
        assert_eq!((y.re[0], y.im[0]), (2.5, -1.0));
    }

    #[test]
    fn all_ones_mix() {
        let y = fourier_mix(&Tensor::full(&[4, 4], 1.0)).unwrap();
        assert!((y.get(&[0, 0]) - 16.0).abs() < 1e-12);
        let rest: f64 = y.data()[1..].iter().map(|v| v.abs()).sum();
        assert!(rest < 1e-12);
    }
}
