//! Bivariate trigonometric polynomials and piecewise Hermite interpolation.
//!
//! A [`TrigPoly`] stores Fourier coefficients indexed over the asymmetric set
//! `Z*_N = {-N/2 <= m1, m2 < N/2}` (for even `N` the mode `-N/2` is kept and
//! `+N/2` is not). Interpolation of grid values, Fourier truncation, point
//! and grid-line evaluation, spectral differentiation and periodic Sobolev
//! norms are all provided here, together with the univariate piecewise
//! Hermite interpolant used by the accelerated singular-operator variant.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use once_cell::sync::Lazy;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::{Vec2, C64};

static FFT_CACHE: Lazy<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

fn plan(n: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    let mut cache = FFT_CACHE.lock().unwrap();
    cache
        .entry((n, forward))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if forward {
                planner.plan_fft_forward(n)
            } else {
                planner.plan_fft_inverse(n)
            }
        })
        .clone()
}

/// In-place 2D DFT on a row-major `n1 x n2` array.
///
/// Forward uses `e^{-2 pi i}` and no normalization; inverse uses `e^{+2 pi i}`
/// and no normalization.
fn fft2(data: &mut [C64], n1: usize, n2: usize, direction: FftDirection) {
    assert_eq!(data.len(), n1 * n2);
    let forward = direction == FftDirection::Forward;
    let row_fft = plan(n2, forward);
    for row in data.chunks_exact_mut(n2) {
        row_fft.process(row);
    }
    let col_fft = plan(n1, forward);
    let mut col = vec![C64::new(0.0, 0.0); n1];
    for j in 0..n2 {
        for i in 0..n1 {
            col[i] = data[i * n2 + j];
        }
        col_fft.process(&mut col);
        for i in 0..n1 {
            data[i * n2 + j] = col[i];
        }
    }
}

/// Map a storage index `0..n` to its frequency in `Z*_n`.
#[inline]
pub fn index_to_freq(i: usize, n: usize) -> i64 {
    let i = i as i64;
    let n = n as i64;
    if 2 * i < n + n % 2 {
        i
    } else {
        i - n
    }
}

/// Map a frequency in `Z*_n` to its storage index.
#[inline]
pub fn freq_to_index(m: i64, n: usize) -> usize {
    m.rem_euclid(n as i64) as usize
}

/// Complex values on the uniform `n x n` grid `x_m = m/n`, row-major in
/// `(m1, m2)`.
#[derive(Debug, Clone)]
pub struct GridValues {
    pub n: usize,
    pub values: Vec<C64>,
}

impl GridValues {
    pub fn new(n: usize, values: Vec<C64>) -> Self {
        assert_eq!(values.len(), n * n, "grid value count must be n^2");
        GridValues { n, values }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(f64, f64) -> C64) -> Self {
        let h = 1.0 / n as f64;
        let mut values = Vec::with_capacity(n * n);
        for m1 in 0..n {
            for m2 in 0..n {
                values.push(f(m1 as f64 * h, m2 as f64 * h));
            }
        }
        GridValues { n, values }
    }

    #[inline]
    pub fn at(&self, m1: usize, m2: usize) -> C64 {
        self.values[m1 * self.n + m2]
    }
}

/// Bivariate trigonometric polynomial with coefficients on `Z*_N`.
///
/// Coefficients are stored row-major with the FFT index layout, i.e. the
/// coefficient of `exp(2 pi i m . u)` lives at `[m1 mod N, m2 mod N]`.
#[derive(Debug, Clone)]
pub struct TrigPoly {
    pub n: usize,
    pub coeffs: Vec<C64>,
}

/// Grid line along which a polynomial is restricted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Line {
    /// `u1 = q h`; the restriction varies in `u2`.
    Vertical(usize),
    /// `u2 = q h`; the restriction varies in `u1`.
    Horizontal(usize),
}

/// Coordinate direction of a parameter square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    U1,
    U2,
}

impl TrigPoly {
    pub fn zero(n: usize) -> Self {
        TrigPoly {
            n,
            coeffs: vec![C64::new(0.0, 0.0); n * n],
        }
    }

    /// Polynomial with a single unit coefficient at frequency `m`.
    pub fn unit_mode(n: usize, m: (i64, i64)) -> Self {
        let mut p = TrigPoly::zero(n);
        let i1 = freq_to_index(m.0, n);
        let i2 = freq_to_index(m.1, n);
        p.coeffs[i1 * n + i2] = C64::new(1.0, 0.0);
        p
    }

    #[inline]
    pub fn coeff(&self, m: (i64, i64)) -> C64 {
        self.coeffs[freq_to_index(m.0, self.n) * self.n + freq_to_index(m.1, self.n)]
    }

    /// Trigonometric interpolation `Q_N`: the unique element of `T_N` that
    /// matches the given grid values.
    pub fn interpolate(values: &GridValues) -> Self {
        let n = values.n;
        let mut coeffs = values.values.clone();
        fft2(&mut coeffs, n, n, FftDirection::Forward);
        let scale = 1.0 / (n * n) as f64;
        for c in coeffs.iter_mut() {
            *c *= scale;
        }
        TrigPoly { n, coeffs }
    }

    /// Values on the coefficient grid (inverse of [`TrigPoly::interpolate`]).
    pub fn grid_values(&self) -> GridValues {
        let mut values = self.coeffs.clone();
        fft2(&mut values, self.n, self.n, FftDirection::Inverse);
        GridValues {
            n: self.n,
            values,
        }
    }

    /// Fourier projection `P_N` onto `T_{n_target}`.
    pub fn project(&self, n_target: usize) -> Result<TrigPoly> {
        if n_target > self.n {
            return Err(Error::Parameter(format!(
                "projection target {} exceeds source order {}",
                n_target, self.n
            )));
        }
        let mut out = TrigPoly::zero(n_target);
        let lo = -(n_target as i64) / 2;
        let hi = (n_target as i64 + 1) / 2; // exclusive
        for m1 in lo..hi {
            for m2 in lo..hi {
                let c = self.coeff((m1, m2));
                out.coeffs[freq_to_index(m1, n_target) * n_target + freq_to_index(m2, n_target)] =
                    c;
            }
        }
        Ok(out)
    }

    /// Evaluate at an arbitrary point of the plane (biperiodic).
    pub fn eval(&self, u: Vec2) -> C64 {
        let n = self.n;
        // Reduce to [0,1) so that evaluation is exactly 1-periodic.
        let u1 = u[0].rem_euclid(1.0);
        let u2 = u[1].rem_euclid(1.0);
        // Contract the u2 direction per u1-index, then finish in u1.
        let mut partial = vec![C64::new(0.0, 0.0); n];
        for i1 in 0..n {
            partial[i1] = eval_1d_fft_order(&self.coeffs[i1 * n..(i1 + 1) * n], u2);
        }
        eval_1d_fft_order(&partial, u1)
    }

    /// Restriction to a grid line as a univariate coefficient vector (FFT
    /// index layout, length `N`).
    ///
    /// For a vertical line `u1 = q h` the result represents a polynomial in
    /// `u2`, and conversely.
    pub fn line_restriction(&self, line: Line) -> Vec<C64> {
        let n = self.n;
        let mut out = vec![C64::new(0.0, 0.0); n];
        match line {
            Line::Vertical(q) => {
                // c(m2) = sum_{m1} coeff(m1,m2) e^{2 pi i m1 q / N}
                let w = C64::from_polar(1.0, 2.0 * PI * q as f64 / n as f64);
                let mut wp = C64::new(1.0, 0.0);
                for i1 in 0..n {
                    for i2 in 0..n {
                        out[i2] += self.coeffs[i1 * n + i2] * wp;
                    }
                    wp *= w;
                }
            }
            Line::Horizontal(q) => {
                let w = C64::from_polar(1.0, 2.0 * PI * q as f64 / n as f64);
                for i1 in 0..n {
                    let mut acc = C64::new(0.0, 0.0);
                    let mut wp = C64::new(1.0, 0.0);
                    for i2 in 0..n {
                        acc += self.coeffs[i1 * n + i2] * wp;
                        wp *= w;
                    }
                    out[i1] = acc;
                }
            }
        }
        out
    }

    /// Restrictions to all `N` vertical (resp. horizontal) lines at once,
    /// via one batched length-`N` FFT contraction of the coefficients.
    ///
    /// Entry `[q]` is the coefficient vector of the restriction to line `q`.
    pub fn all_line_restrictions(&self, axis_of_line: Axis) -> Vec<Vec<C64>> {
        let n = self.n;
        let mut data = self.coeffs.clone();
        match axis_of_line {
            // Vertical lines u1 = q h: inverse transform over the m1 index.
            Axis::U1 => {
                let fft = plan(n, false);
                let mut col = vec![C64::new(0.0, 0.0); n];
                let mut out = vec![vec![C64::new(0.0, 0.0); n]; n];
                for i2 in 0..n {
                    for i1 in 0..n {
                        col[i1] = data[i1 * n + i2];
                    }
                    fft.process(&mut col);
                    for q in 0..n {
                        out[q][i2] = col[q];
                    }
                }
                out
            }
            // Horizontal lines u2 = q h: inverse transform over the m2 index.
            Axis::U2 => {
                let fft = plan(n, false);
                let mut out = vec![vec![C64::new(0.0, 0.0); n]; n];
                for i1 in 0..n {
                    let row = &mut data[i1 * n..(i1 + 1) * n];
                    fft.process(row);
                    for q in 0..n {
                        out[q][i1] = row[q];
                    }
                }
                out
            }
        }
    }

    /// Evaluate the restriction of the polynomial to a grid line at the given
    /// 1D coordinates.
    pub fn eval_radial_line(&self, line: Line, offsets: &[f64]) -> Vec<C64> {
        let coeffs = self.line_restriction(line);
        offsets
            .iter()
            .map(|&x| eval_1d_fft_order(&coeffs, x.rem_euclid(1.0)))
            .collect()
    }

    /// Periodic Sobolev norm of order `s`.
    pub fn sobolev_norm(&self, s: f64) -> f64 {
        let n = self.n;
        let mut sum = 0.0;
        for i1 in 0..n {
            let m1 = index_to_freq(i1, n) as f64;
            for i2 in 0..n {
                let m2 = index_to_freq(i2, n) as f64;
                let a = self.coeffs[i1 * n + i2].norm_sqr();
                if m1 == 0.0 && m2 == 0.0 {
                    sum += a;
                } else {
                    sum += (m1 * m1 + m2 * m2).powf(s) * a;
                }
            }
        }
        sum.sqrt()
    }

    /// Spectral derivative of order `r` in the given direction, as exact
    /// values on a mesh refined by a factor `m` along that direction.
    ///
    /// Result is indexed `[line][fine]`: entry `[q][p]` is the value of
    /// `d^r xi / d u^r` at `(p h / m, q h)` for `Axis::U1` lines `u2 = q h`,
    /// and at `(q h, p h / m)` for `Axis::U2` lines `u1 = q h`.
    pub fn derivative_values_fine(&self, direction: Axis, order: u32, m: usize) -> Vec<Vec<C64>> {
        assert!(m >= 1);
        let n = self.n;
        let nf = n * m;
        let mut padded = vec![C64::new(0.0, 0.0); nf * n];
        for i1 in 0..n {
            let m1 = index_to_freq(i1, n);
            for i2 in 0..n {
                let m2 = index_to_freq(i2, n);
                let c = self.coeffs[i1 * n + i2];
                let factor = match direction {
                    Axis::U1 => C64::new(0.0, 2.0 * PI * m1 as f64).powu(order),
                    Axis::U2 => C64::new(0.0, 2.0 * PI * m2 as f64).powu(order),
                };
                // Zero-pad the differentiated direction to nf points.
                let (j1, j2, n2len) = match direction {
                    Axis::U1 => (freq_to_index(m1, nf), freq_to_index(m2, n), n),
                    Axis::U2 => (freq_to_index(m1, n), freq_to_index(m2, nf), nf),
                };
                padded[j1 * n2len + j2] = c * factor;
            }
        }
        match direction {
            Axis::U1 => {
                fft2(&mut padded, nf, n, FftDirection::Inverse);
                // padded[p * n + q] = value at (p/(n m), q/n); regroup by line q.
                let mut out = vec![vec![C64::new(0.0, 0.0); nf]; n];
                for p in 0..nf {
                    for q in 0..n {
                        out[q][p] = padded[p * n + q];
                    }
                }
                out
            }
            Axis::U2 => {
                fft2(&mut padded, n, nf, FftDirection::Inverse);
                let mut out = vec![vec![C64::new(0.0, 0.0); nf]; n];
                for q in 0..n {
                    out[q].copy_from_slice(&padded[q * nf..(q + 1) * nf]);
                }
                out
            }
        }
    }
}

/// Evaluate a univariate trigonometric polynomial given by FFT-ordered
/// coefficients at `x`, by a Horner recurrence over ascending frequencies.
pub fn eval_1d_fft_order(coeffs: &[C64], x: f64) -> C64 {
    let n = coeffs.len();
    let lo = -(n as i64) / 2;
    let hi = (n as i64 - 1) / 2; // inclusive
    let w = C64::from_polar(1.0, 2.0 * PI * x);
    let mut acc = C64::new(0.0, 0.0);
    let mut m = hi;
    while m >= lo {
        acc = acc * w + coeffs[freq_to_index(m, n)];
        m -= 1;
    }
    acc * C64::from_polar(1.0, 2.0 * PI * x * lo as f64)
}

// ---------------------------------------------------------------------------
// Piecewise Hermite interpolation
// ---------------------------------------------------------------------------

/// Piecewise-polynomial Hermite interpolant on a uniform mesh of `[0, 1]`.
///
/// On each interval the polynomial has degree `2d+1` and matches the supplied
/// derivative data of orders `0..=d` at both interval ends, which makes the
/// interpolant globally `C^d`.
#[derive(Debug, Clone)]
pub struct HermiteInterpolant {
    /// Number of mesh intervals.
    pub intervals: usize,
    /// Derivative matching order.
    pub d: usize,
    /// Newton-form coefficients, `2d+2` per interval.
    newton: Vec<Vec<C64>>,
    periodic: bool,
}

impl HermiteInterpolant {
    /// Build an interpolant from derivative data at the breakpoints
    /// `p/intervals`, `p = 0..=intervals`.
    ///
    /// `data[r][p]` holds the derivative of order `r` at breakpoint `p`;
    /// orders `0..=d` must all be present (length `intervals + 1` each).
    pub fn new(data: &[Vec<C64>], intervals: usize, d: usize) -> Result<Self> {
        if data.len() != d + 1 {
            return Err(Error::Parameter(format!(
                "need derivative orders 0..={}, got {} rows",
                d,
                data.len()
            )));
        }
        for (r, row) in data.iter().enumerate() {
            if row.len() != intervals + 1 {
                return Err(Error::Parameter(format!(
                    "order-{} data has {} entries, expected {}",
                    r,
                    row.len(),
                    intervals + 1
                )));
            }
        }
        let newton = (0..intervals)
            .map(|p| {
                let left: Vec<C64> = (0..=d).map(|r| data[r][p]).collect();
                let right: Vec<C64> = (0..=d).map(|r| data[r][p + 1]).collect();
                interval_newton_coeffs(&left, &right, 1.0 / intervals as f64, d)
            })
            .collect();
        Ok(HermiteInterpolant {
            intervals,
            d,
            newton,
            periodic: false,
        })
    }

    /// Periodic variant: data rows have length `intervals`, breakpoint
    /// `intervals` is identified with breakpoint `0`.
    pub fn new_periodic(data: &[Vec<C64>], intervals: usize, d: usize) -> Result<Self> {
        if data.len() != d + 1 {
            return Err(Error::Parameter(format!(
                "need derivative orders 0..={}, got {} rows",
                d,
                data.len()
            )));
        }
        let newton = (0..intervals)
            .map(|p| {
                let pn = (p + 1) % intervals;
                let left: Vec<C64> = (0..=d).map(|r| data[r][p]).collect();
                let right: Vec<C64> = (0..=d).map(|r| data[r][pn]).collect();
                interval_newton_coeffs(&left, &right, 1.0 / intervals as f64, d)
            })
            .collect();
        Ok(HermiteInterpolant {
            intervals,
            d,
            newton,
            periodic: true,
        })
    }

    /// Evaluate at `x`. Non-periodic interpolants require `x` in `[0, 1]`;
    /// periodic ones wrap.
    pub fn eval(&self, x: f64) -> Result<C64> {
        let x = if self.periodic {
            x.rem_euclid(1.0)
        } else {
            if !(0.0..=1.0 + 1e-14).contains(&x) {
                return Err(Error::Domain(format!(
                    "hermite evaluation point {x} outside [0, 1]"
                )));
            }
            x.min(1.0)
        };
        let k = 1.0 / self.intervals as f64;
        let mut p = (x / k) as usize;
        if p >= self.intervals {
            p = self.intervals - 1;
        }
        Ok(self.eval_in_interval(p, x - p as f64 * k))
    }

    /// Evaluate inside interval `p` at local offset `t in [0, k]`.
    #[inline]
    pub fn eval_in_interval(&self, p: usize, t: f64) -> C64 {
        let k = 1.0 / self.intervals as f64;
        let d = self.d;
        let coeffs = &self.newton[p];
        // Newton nodes: 0 repeated d+1 times, then k repeated d+1 times.
        let mut acc = coeffs[2 * d + 1];
        for i in (0..=2 * d).rev() {
            let node = if i <= d { 0.0 } else { k };
            acc = acc * (t - node) + coeffs[i];
        }
        acc
    }
}

/// Newton divided-difference coefficients for two-point Hermite data on an
/// interval of length `k`, with derivatives of orders `0..=d` at both ends.
fn interval_newton_coeffs(left: &[C64], right: &[C64], k: f64, d: usize) -> Vec<C64> {
    let n = 2 * d + 2;
    let nodes: Vec<f64> = (0..n).map(|i| if i <= d { 0.0 } else { k }).collect();
    // factorials
    let mut fact = vec![1.0f64; d + 1];
    for r in 1..=d {
        fact[r] = fact[r - 1] * r as f64;
    }
    // column 0: function values at (repeated) nodes
    let mut table: Vec<Vec<C64>> = Vec::with_capacity(n);
    for i in 0..n {
        let side = if i <= d { left } else { right };
        table.push(vec![side[0]; 1]);
        let _ = side;
    }
    let mut coeffs = vec![C64::new(0.0, 0.0); n];
    coeffs[0] = table[0][0];
    // build columns; confluent entries come from the supplied derivatives
    for j in 1..n {
        for i in 0..n - j {
            let v = if nodes[i + j] == nodes[i] {
                let side = if i <= d { left } else { right };
                side[j] / fact[j]
            } else {
                let hi = table[i + 1][j - 1];
                let lo = table[i][j - 1];
                (hi - lo) / (nodes[i + j] - nodes[i])
            };
            table[i].push(v);
        }
        coeffs[j] = table[0][j];
    }
    coeffs
}
