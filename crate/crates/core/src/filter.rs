//! Band-limited ramp filters for filtered backprojection.
//!
//! Taps are the Ram-Lak samples `h(0) = 1/4`, `h(k odd) = −1/(π²k²)`,
//! `h(k even ≠ 0) = 0` (unit sample spacing). Rows are filtered by linear
//! convolution through a zero-padded FFT. The circularly wrapped taps sum to
//! a small positive number, so the Nyquist lag `P/2` absorbs the difference:
//! the DC response is then exactly zero (the ramp `|ω|` vanishes there)
//! while every lag a linear convolution of padded rows can reach keeps its
//! Ram-Lak value. The Hamming variant additionally multiplies the response
//! by `0.54 + 0.46·cos(π·ω/ω_max)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampFilter {
    #[default]
    HammingRamp,
    PureRamp,
}

impl RampFilter {
    /// Apodization window at normalized frequency `|ω|/ω_max ∈ [0, 1]`.
    pub fn window(self, normalized: f64) -> f64 {
        match self {
            RampFilter::PureRamp => 1.0,
            RampFilter::HammingRamp => 0.54 + 0.46 * (PI * normalized).cos(),
        }
    }
}

impl std::str::FromStr for RampFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hamming_ramp" | "hamming" => Ok(RampFilter::HammingRamp),
            "pure_ramp" | "ramp" | "ram_lak" => Ok(RampFilter::PureRamp),
            other => Err(Error::InvalidConfig(format!("unknown filter '{other}'"))),
        }
    }
}

/// Ram-Lak tap at integer offset `k`, unit sample spacing.
pub fn ram_lak(k: i64) -> f64 {
    if k == 0 {
        0.25
    } else if k % 2 == 0 {
        0.0
    } else {
        -1.0 / (PI * PI * (k * k) as f64)
    }
}

/// A ramp filter ready to be applied to rows of a fixed length.
#[derive(Clone)]
pub struct FilterKernel {
    filter: RampFilter,
    row_len: usize,
    response: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for FilterKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FilterKernel")
            .field("filter", &self.filter)
            .field("row_len", &self.row_len)
            .field("padded_len", &self.response.len())
            .finish()
    }
}

/// Kernel for rows of length `n` with `n` zeros of padding.
pub fn fbp_filter_kernel(n: usize, filter: RampFilter) -> Result<FilterKernel> {
    FilterKernel::new(n, n, filter)
}

impl FilterKernel {
    /// The FFT length is the next power of two `≥ row_len + padding`.
    pub fn new(row_len: usize, padding: usize, filter: RampFilter) -> Result<Self> {
        if row_len < 1 {
            return Err(Error::InvalidConfig("filter length must be at least 1".into()));
        }
        if padding < row_len {
            return Err(Error::InvalidConfig(format!(
                "padding {padding} must be at least the row length {row_len}"
            )));
        }
        let padded = (row_len + padding).next_power_of_two().max(2);
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(padded);
        let inverse = planner.plan_fft_inverse(padded);

        let half = padded as i64 / 2;
        let mut buf: Vec<Complex<f64>> = (0..padded as i64)
            .map(|i| {
                let k = if i <= half { i } else { i - padded as i64 };
                Complex::new(ram_lak(k), 0.0)
            })
            .collect();
        let excess: f64 = buf.iter().map(|c| c.re).sum();
        buf[half as usize].re -= excess;
        forward.process(&mut buf);
        let response = buf
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    return 0.0;
                }
                let freq = i.min(padded - i) as f64 / half as f64;
                c.re * filter.window(freq)
            })
            .collect();
        Ok(Self {
            filter,
            row_len,
            response,
            forward,
            inverse,
        })
    }

    pub fn filter(&self) -> RampFilter {
        self.filter
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn padded_len(&self) -> usize {
        self.response.len()
    }

    /// Real frequency response over the DFT bins `0..padded_len`.
    pub fn response(&self) -> &[f64] {
        &self.response
    }

    /// Unwindowed ramp response (DFT of the Ram-Lak taps) at bin `i`.
    pub fn ramp_response(&self, i: usize) -> f64 {
        let w = self
            .filter
            .window(i.min(self.padded_len() - i) as f64 / (self.padded_len() / 2) as f64);
        if w == 0.0 {
            f64::NAN
        } else {
            self.response[i] / w
        }
    }

    /// Spatial taps actually applied, indexed circularly (`k` and `k − P`
    /// coincide).
    pub fn taps(&self) -> Vec<f64> {
        let p = self.padded_len();
        let mut buf: Vec<Complex<f64>> =
            self.response.iter().map(|&r| Complex::new(r, 0.0)).collect();
        self.inverse.process(&mut buf);
        buf.iter().map(|c| c.re / p as f64).collect()
    }

    /// Linear convolution of `row` with the kernel, same length as `row`.
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        debug_assert_eq!(row.len(), self.row_len);
        let mut buf = vec![Complex::new(0.0, 0.0); self.padded_len()];
        for (b, &v) in buf.iter_mut().zip(row) {
            b.re = v;
        }
        self.convolve_in_place(&mut buf);
        buf[..row.len()].iter().map(|c| c.re).collect()
    }

    /// Linear convolution of `row` sampled at positions `-margin ..
    /// row.len() + margin`, i.e. including the filter response beyond both
    /// ends of the row. Needs `padded_len() >= 2 * (row.len() + margin)`.
    pub fn apply_extended(&self, row: &[f64], margin: usize) -> Vec<f64> {
        debug_assert_eq!(row.len(), self.row_len);
        let p = self.padded_len();
        assert!(p >= 2 * (row.len() + margin), "FFT length too short for margin");
        let mut buf = vec![Complex::new(0.0, 0.0); p];
        for (b, &v) in buf.iter_mut().zip(row) {
            b.re = v;
        }
        self.convolve_in_place(&mut buf);
        (0..row.len() + 2 * margin)
            .map(|i| buf[(i + p - margin) % p].re)
            .collect()
    }

    /// Circular convolution over a full padded-length row.
    pub fn apply_circular(&self, row: &[f64]) -> Vec<f64> {
        assert_eq!(row.len(), self.padded_len());
        let mut buf: Vec<Complex<f64>> = row.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.convolve_in_place(&mut buf);
        buf.iter().map(|c| c.re).collect()
    }

    fn convolve_in_place(&self, buf: &mut [Complex<f64>]) {
        self.forward.process(buf);
        for (b, &h) in buf.iter_mut().zip(&self.response) {
            *b *= h;
        }
        self.inverse.process(buf);
        let norm = 1.0 / buf.len() as f64;
        for b in buf.iter_mut() {
            *b *= norm;
        }
    }
}
