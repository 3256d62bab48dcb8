//! Spectral primitives: windowing, centered FFT magnitude, radial high-pass,
//! log-polar resampling, phase correlation and soft-argmax decoding.
//!
//! Every differentiable operation has a matching `*_vjp` that maps an
//! upstream gradient on the output back onto the input (vector-Jacobian
//! product). Those are what the irrelevance loss chains together.
//!
//! Temperatures act as inverse temperatures: a map `c` is normalized as
//! `softmax(temperature * c)`, so larger values give sharper distributions.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;
use crate::image::{ImageBuf, Plane};

/// Floor on the cross-power magnitude before normalization.
pub const CROSS_POWER_EPS: f64 = 1e-12;
/// Sharpness used when decoding a displacement from a correlation surface.
pub const DEFAULT_EXPECTATION_TEMPERATURE: f64 = 10.0;
/// Sharpness used when turning a correlation surface into a distribution.
pub const DEFAULT_DISTRIBUTION_TEMPERATURE: f64 = 1.0;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A correlation surface. Raw surfaces from [`phase_correlate`] are the real
/// part of the inverse transform and may dip below zero; normalized surfaces
/// carry the temperature they were normalized with and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMap {
    pub map: Plane,
    pub temperature: Option<f64>,
}

impl CorrMap {
    pub fn raw(map: Plane) -> Self {
        Self {
            map,
            temperature: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.map.height()
    }

    pub fn cols(&self) -> usize {
        self.map.width()
    }

    pub fn is_normalized(&self) -> bool {
        self.temperature.is_some()
    }

    /// Sum over the radial (row) axis: one value per column.
    pub fn column_marginal(&self) -> Vec<f64> {
        let (h, w) = self.map.shape();
        let mut out = vec![0.0; w];
        for r in 0..h {
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.map.get(r, c);
            }
        }
        out
    }
}

/// Log-polar sampling grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogPolarParams {
    /// Columns; together they cover [0°, 360°).
    pub angular_bins: usize,
    /// Rows; radii are spaced geometrically from `r_min` to `r_max`.
    pub radial_bins: usize,
    pub r_min: f64,
    pub r_max: f64,
    /// (row, col) of the pole.
    pub center: (f64, f64),
}

impl LogPolarParams {
    /// Defaults for an H×W plane: 256×256 bins, radii 1..min(H,W)/2,
    /// pole at the zero-frequency bin of a centered spectrum.
    pub fn for_shape(height: usize, width: usize) -> Self {
        Self {
            angular_bins: 256,
            radial_bins: 256,
            r_min: 1.0,
            r_max: height.min(width) as f64 / 2.0,
            center: ((height / 2) as f64, (width / 2) as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.angular_bins < 8 || self.radial_bins < 8 {
            return Err(Error::InvalidArgument(format!(
                "log-polar needs at least 8 bins per axis, got {}x{}",
                self.radial_bins, self.angular_bins
            )));
        }
        if !(self.r_min > 0.0 && self.r_min < self.r_max && self.r_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "log-polar radii must satisfy 0 < r_min < r_max, got {} and {}",
                self.r_min, self.r_max
            )));
        }
        if !(self.center.0.is_finite() && self.center.1.is_finite()) {
            return Err(Error::InvalidArgument("log-polar center must be finite".into()));
        }
        Ok(())
    }

    /// Multiplicative step between consecutive radial bins.
    pub fn radial_ratio(&self) -> f64 {
        (self.r_max / self.r_min).powf(1.0 / (self.radial_bins - 1) as f64)
    }

    /// Rows a scale change of `s` moves the log-polar image by.
    pub fn rows_per_log_scale(&self) -> f64 {
        (self.radial_bins - 1) as f64 / (self.r_max / self.r_min).ln()
    }

    pub fn radius(&self, row: f64) -> f64 {
        self.r_min * (self.r_max / self.r_min).powf(row / (self.radial_bins - 1) as f64)
    }
}

pub fn is_pow2(n: usize) -> bool {
    n > 0 && n & (n - 1) == 0
}

fn ensure_pow2(p: &Plane, what: &str) -> Result<()> {
    if !is_pow2(p.height()) || !is_pow2(p.width()) {
        return Err(Error::InvalidArgument(format!(
            "{what} requires power-of-two dimensions, got {:?}",
            p.shape()
        )));
    }
    Ok(())
}

fn ensure_finite(p: &Plane, what: &str) -> Result<()> {
    if !p.is_finite() {
        return Err(Error::NonFinite(format!("{what} input")));
    }
    Ok(())
}

pub fn to_grayscale(image: &ImageBuf) -> Result<Plane> {
    match image.channels() {
        1 => Plane::new(image.height(), image.width(), image.data().to_vec()),
        3 => Ok(Plane::from_fn(image.height(), image.width(), |r, c| {
            LUMA[0] * image.get(r, c, 0) + LUMA[1] * image.get(r, c, 1) + LUMA[2] * image.get(r, c, 2)
        })),
        n => Err(Error::UnsupportedChannels(n)),
    }
}

/// Symmetric Hann window of length `n`; endpoints are zero.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / (n - 1) as f64).cos()))
        .collect()
}

/// Multiplies by the separable Hann window.
pub fn apodize(p: &Plane) -> Plane {
    let wr = hann(p.height());
    let wc = hann(p.width());
    Plane::from_fn(p.height(), p.width(), |r, c| p.get(r, c) * wr[r] * wc[c])
}

/// Centered magnitude of the 2-D DFT (zero frequency at `(H/2, W/2)`).
pub fn fft_magnitude(p: &Plane) -> Result<Plane> {
    ensure_pow2(p, "fft_magnitude")?;
    ensure_finite(p, "fft_magnitude")?;
    let (h, w) = p.shape();
    let spec = fft::forward_real(p.data(), h, w);
    let mag: Vec<f64> = spec.iter().map(|z| z.norm()).collect();
    Plane::new(h, w, fft::fftshift(&mag, h, w))
}

/// Adjoint of [`fft_magnitude`] at `p`.
pub fn fft_magnitude_vjp(p: &Plane, grad_out: &Plane) -> Plane {
    let (h, w) = p.shape();
    let spec = fft::forward_real(p.data(), h, w);
    let g = fft::ifftshift(grad_out.data(), h, w);
    let mut gz: Vec<Complex64> = spec
        .iter()
        .zip(&g)
        .map(|(z, &gm)| {
            let n = z.norm();
            if n > 0.0 {
                z * (gm / n)
            } else {
                Complex64::default()
            }
        })
        .collect();
    fft::inverse_unnormalized(&mut gz, h, w);
    Plane::new(h, w, gz.into_iter().map(|z| z.re).collect()).expect("shape preserved")
}

/// Radial raised-cosine high-pass gain: 0 at DC, rising monotonically to 1
/// at normalized radius 1 and beyond.
pub fn highpass_gain(rho: f64) -> f64 {
    let rho = rho.clamp(0.0, 1.0);
    let u = 0.5 * (1.0 - (PI * rho).cos());
    u * (2.0 - u)
}

/// Gain mask of the high-pass for a centered H×W spectrum.
pub fn highpass_mask(height: usize, width: usize) -> Plane {
    let cy = (height / 2) as f64;
    let cx = (width / 2) as f64;
    let hy = (height as f64 / 2.0).max(1.0);
    let hx = (width as f64 / 2.0).max(1.0);
    Plane::from_fn(height, width, |r, c| {
        let dy = (r as f64 - cy) / hy;
        let dx = (c as f64 - cx) / hx;
        highpass_gain((dy * dy + dx * dx).sqrt())
    })
}

pub fn highpass(spectrum: &Plane) -> Plane {
    let mask = highpass_mask(spectrum.height(), spectrum.width());
    let data = spectrum
        .data()
        .iter()
        .zip(mask.data())
        .map(|(a, b)| a * b)
        .collect();
    Plane::new(spectrum.height(), spectrum.width(), data).expect("shape preserved")
}

/// Precomputed bilinear taps for a log-polar grid over a fixed input size.
/// Taps falling outside the input read as zero.
#[derive(Debug, Clone)]
pub struct LogPolarSampler {
    params: LogPolarParams,
    in_shape: (usize, usize),
    // Per output sample: four (input index, weight) taps; weight 0 marks an unused tap.
    taps: Vec<[(u32, f64); 4]>,
}

impl LogPolarSampler {
    pub fn new(params: LogPolarParams, height: usize, width: usize) -> Result<Self> {
        params.validate()?;
        let (nr, na) = (params.radial_bins, params.angular_bins);
        let mut taps = Vec::with_capacity(nr * na);
        let (cy, cx) = params.center;
        for i in 0..nr {
            let r = params.radius(i as f64);
            for j in 0..na {
                let phi = 2.0 * PI * j as f64 / na as f64;
                let y = cy + r * phi.sin();
                let x = cx + r * phi.cos();
                taps.push(bilinear_taps(y, x, height, width));
            }
        }
        Ok(Self {
            params,
            in_shape: (height, width),
            taps,
        })
    }

    pub fn params(&self) -> &LogPolarParams {
        &self.params
    }

    pub fn apply(&self, p: &Plane) -> Result<Plane> {
        if p.shape() != self.in_shape {
            return Err(Error::ShapeMismatch(format!(
                "log-polar sampler built for {:?}, got {:?}",
                self.in_shape,
                p.shape()
            )));
        }
        let src = p.data();
        let data = self
            .taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * src[i as usize]).sum())
            .collect();
        Plane::new(self.params.radial_bins, self.params.angular_bins, data)
    }

    /// Transpose of [`apply`](Self::apply).
    pub fn adjoint(&self, grad_out: &Plane) -> Plane {
        let (h, w) = self.in_shape;
        let mut out = vec![0.0; h * w];
        for (t, &g) in self.taps.iter().zip(grad_out.data()) {
            for &(i, wt) in t {
                out[i as usize] += wt * g;
            }
        }
        Plane::new(h, w, out).expect("shape preserved")
    }
}

fn bilinear_taps(y: f64, x: f64, height: usize, width: usize) -> [(u32, f64); 4] {
    let mut taps = [(0u32, 0.0); 4];
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let corners = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1.0, (1.0 - fy) * fx),
        (y0 + 1.0, x0, fy * (1.0 - fx)),
        (y0 + 1.0, x0 + 1.0, fy * fx),
    ];
    for (k, &(yy, xx, wt)) in corners.iter().enumerate() {
        if yy >= 0.0 && xx >= 0.0 && (yy as usize) < height && (xx as usize) < width && wt != 0.0 {
            taps[k] = ((yy as usize * width + xx as usize) as u32, wt);
        }
    }
    taps
}

/// Bilinear sample with zero outside the grid.
pub fn sample_bilinear(p: &Plane, y: f64, x: f64) -> f64 {
    bilinear_taps(y, x, p.height(), p.width())
        .iter()
        .map(|&(i, w)| w * p.data()[i as usize])
        .sum()
}

/// Resamples `p` on a log-polar grid: row i sits at radius
/// `r_min * (r_max/r_min)^(i/(R-1))`, column j at angle `360°·j/A`.
pub fn log_polar(p: &Plane, params: &LogPolarParams) -> Result<Plane> {
    ensure_finite(p, "log_polar")?;
    LogPolarSampler::new(*params, p.height(), p.width())?.apply(p)
}

/// Multiplies every log-polar row by a Hann weight over the radial axis.
///
/// The radial axis is not periodic; without the taper, the jump between the
/// innermost and outermost rings is shared by every pair of maps and
/// dominates their correlation at zero shift.
pub fn radial_taper(lp_map: &Plane) -> Plane {
    let window = hann(lp_map.height());
    let cols = lp_map.width();
    let mut out = lp_map.clone();
    for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
        for v in row {
            *v *= window[r];
        }
    }
    out
}

/// Places `p` in the top-left corner of a grid `factor` times larger.
pub fn zero_pad(p: &Plane, factor: usize) -> Plane {
    let (h, w) = p.shape();
    Plane::from_fn(h * factor, w * factor, |r, c| if r < h && c < w { p.get(r, c) } else { 0.0 })
}

/// Padding factor applied before the magnitude spectrum in
/// [`spectral_log_polar`]. A 2x oversampled spectrum keeps bilinear
/// interpolation error from leaving a common pattern in both maps.
pub const SPECTRAL_PAD: usize = 2;

/// `apodize → zero_pad → fft_magnitude → highpass → log_polar → radial_taper`.
/// `params` refer to the padded grid, e.g. `LogPolarParams::for_shape(2h, 2w)`.
pub fn spectral_log_polar(p: &Plane, params: &LogPolarParams) -> Result<Plane> {
    let mag = fft_magnitude(&zero_pad(&apodize(p), SPECTRAL_PAD))?;
    Ok(radial_taper(&log_polar(&highpass(&mag), params)?))
}

/// Intermediates of a phase correlation, kept for the adjoint pass.
#[derive(Debug, Clone)]
pub struct PhaseCorrTape {
    height: usize,
    width: usize,
    spec_a: Vec<Complex64>,
    spec_b: Vec<Complex64>,
    cross: Vec<Complex64>,
}

/// Phase correlation of `a` and `b`: real inverse FFT of the normalized
/// cross-power spectrum, shifted so zero displacement lands on `(H/2, W/2)`.
/// If `b` is `a` circularly shifted by `(dy, dx)`, the peak is at
/// `(H/2 + dy, W/2 + dx)`.
pub fn phase_correlate(a: &Plane, b: &Plane) -> Result<CorrMap> {
    Ok(phase_correlate_taped(a, b)?.0)
}

pub fn phase_correlate_taped(a: &Plane, b: &Plane) -> Result<(CorrMap, PhaseCorrTape)> {
    a.ensure_same_shape(b, "phase_correlate")?;
    ensure_pow2(a, "phase_correlate")?;
    ensure_finite(a, "phase_correlate")?;
    ensure_finite(b, "phase_correlate")?;
    let (h, w) = a.shape();
    let spec_a = fft::forward_real(a.data(), h, w);
    let spec_b = fft::forward_real(b.data(), h, w);
    let cross: Vec<Complex64> = spec_a.iter().zip(&spec_b).map(|(x, y)| x.conj() * y).collect();
    let mut z: Vec<Complex64> = cross
        .iter()
        .map(|c| c / c.norm().max(CROSS_POWER_EPS))
        .collect();
    fft::inverse(&mut z, h, w);
    let re: Vec<f64> = z.iter().map(|v| v.re).collect();
    let map = Plane::new(h, w, fft::fftshift(&re, h, w))?;
    Ok((
        CorrMap::raw(map),
        PhaseCorrTape {
            height: h,
            width: w,
            spec_a,
            spec_b,
            cross,
        },
    ))
}

/// Adjoint of [`phase_correlate`]: gradients with respect to `a` and `b`.
pub fn phase_correlate_vjp(tape: &PhaseCorrTape, grad_map: &Plane) -> (Plane, Plane) {
    let (h, w) = (tape.height, tape.width);
    let n = (h * w) as f64;
    let g = fft::ifftshift(grad_map.data(), h, w);
    let gz = fft::forward_real(&g, h, w);
    let mut ga = Vec::with_capacity(h * w);
    let mut gb = Vec::with_capacity(h * w);
    for k in 0..h * w {
        let gz_k = gz[k] / n;
        let cross = tape.cross[k];
        let mag = cross.norm();
        let gw = if mag > CROSS_POWER_EPS {
            let u = cross / mag;
            let along = gz_k.re * u.re + gz_k.im * u.im;
            (gz_k - u * along) / mag
        } else {
            gz_k / CROSS_POWER_EPS
        };
        ga.push(gw.conj() * tape.spec_b[k]);
        gb.push(gw * tape.spec_a[k]);
    }
    fft::inverse_unnormalized(&mut ga, h, w);
    fft::inverse_unnormalized(&mut gb, h, w);
    (
        Plane::new(h, w, ga.into_iter().map(|z| z.re).collect()).expect("shape preserved"),
        Plane::new(h, w, gb.into_iter().map(|z| z.re).collect()).expect("shape preserved"),
    )
}

fn softmax_scaled(values: &[f64], temperature: f64) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|&v| ((v - m) * temperature).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

fn ensure_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

/// `softmax(temperature * c)` over all bins.
pub fn normalize_to_distribution(c: &CorrMap, temperature: f64) -> Result<CorrMap> {
    ensure_temperature(temperature)?;
    ensure_finite(&c.map, "normalize_to_distribution")?;
    let (h, w) = c.map.shape();
    Ok(CorrMap {
        map: Plane::new(h, w, softmax_scaled(c.map.data(), temperature))?,
        temperature: Some(temperature),
    })
}

/// Adjoint of [`normalize_to_distribution`] given the normalized output.
pub fn normalize_to_distribution_vjp(normalized: &CorrMap, grad_out: &Plane) -> Plane {
    let t = normalized.temperature.unwrap_or(1.0);
    let p = normalized.map.data();
    let dot: f64 = p.iter().zip(grad_out.data()).map(|(a, b)| a * b).sum();
    let data = p
        .iter()
        .zip(grad_out.data())
        .map(|(&pi, &gi)| t * pi * (gi - dot))
        .collect();
    Plane::new(normalized.map.height(), normalized.map.width(), data).expect("shape preserved")
}

/// Coordinate of `index` on a circular axis of length `n`, expressed as the
/// representative closest to `anchor`. The antipodal bin of an even axis is
/// split evenly between its two representatives, which averages to `anchor`.
#[inline]
fn circular_coord(index: usize, anchor: usize, n: usize) -> f64 {
    let d = (index + n - anchor) % n;
    if 2 * d < n {
        (anchor + d) as f64
    } else if 2 * d > n {
        anchor as f64 + d as f64 - n as f64
    } else {
        anchor as f64
    }
}

struct Expectation {
    probs: Vec<f64>,
    row_coords: Vec<f64>,
    col_coords: Vec<f64>,
    row: f64,
    col: f64,
}

fn expectation(c: &CorrMap, temperature: f64) -> Result<Expectation> {
    ensure_temperature(temperature)?;
    ensure_finite(&c.map, "soft_expectation")?;
    let (h, w) = c.map.shape();
    let (ar, ac) = c.map.argmax();
    let probs = softmax_scaled(c.map.data(), temperature);
    let row_coords: Vec<f64> = (0..h).map(|i| circular_coord(i, ar, h)).collect();
    let col_coords: Vec<f64> = (0..w).map(|j| circular_coord(j, ac, w)).collect();
    let mut row = 0.0;
    let mut col = 0.0;
    for r in 0..h {
        for cc in 0..w {
            let p = probs[r * w + cc];
            row += p * row_coords[r];
            col += p * col_coords[cc];
        }
    }
    Ok(Expectation {
        probs,
        row_coords,
        col_coords,
        row,
        col,
    })
}

/// Probability-weighted mean bin of `softmax(temperature * c)`, computed on
/// coordinates unwrapped around the argmax and wrapped back into `[0, N)`.
pub fn soft_expectation(c: &CorrMap, temperature: f64) -> Result<(f64, f64)> {
    let e = expectation(c, temperature)?;
    let (h, w) = c.map.shape();
    Ok((e.row.rem_euclid(h as f64), e.col.rem_euclid(w as f64)))
}

/// Gradient of `g_row * row + g_col * col` with respect to every map entry.
pub fn soft_expectation_vjp(c: &CorrMap, temperature: f64, g_row: f64, g_col: f64) -> Result<Plane> {
    let e = expectation(c, temperature)?;
    let (h, w) = c.map.shape();
    let mut grad = vec![0.0; h * w];
    for r in 0..h {
        for cc in 0..w {
            let i = r * w + cc;
            let p = e.probs[i];
            grad[i] = temperature
                * p
                * (g_row * (e.row_coords[r] - e.row) + g_col * (e.col_coords[cc] - e.col));
        }
    }
    Plane::new(h, w, grad)
}
