//! SIM(2) registration of a template onto a source image.
//!
//! Rotation and scale come from phase-correlating log-polar resamplings of
//! the high-passed magnitude spectra; translation from phase-correlating the
//! rotated template against the source. The translation peak is decoded with
//! the soft expectation.
//!
//! The stage is not trained: nothing downstream propagates gradients into it.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::{ImageBuf, Plane};
use crate::spectral::{
    self, CorrMap, LogPolarParams, DEFAULT_DISTRIBUTION_TEMPERATURE,
    DEFAULT_EXPECTATION_TEMPERATURE,
};

pub const MIN_SCALE: f64 = 0.5;
pub const MAX_SCALE: f64 = 2.0;

/// Similarity transform: rotate by `theta` and scale by `scale` about the
/// image center, then translate by `(tx, ty)` pixels (x = column, y = row).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseSim2 {
    pub theta: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for PoseSim2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSim2 {
    pub fn identity() -> Self {
        Self {
            theta: 0.0,
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn new(theta: f64, scale: f64, tx: f64, ty: f64) -> Self {
        Self {
            theta: wrap_angle(theta),
            scale,
            tx,
            ty,
        }
    }

    pub fn from_degrees(theta_deg: f64, scale: f64, tx: f64, ty: f64) -> Self {
        Self::new(theta_deg.to_radians(), scale, tx, ty)
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta.to_degrees()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && self.tx.is_finite() && self.ty.is_finite())
            || !(self.scale > 0.0 && self.scale.is_finite())
        {
            return Err(Error::InvalidArgument(format!("invalid pose {self:?}")));
        }
        Ok(())
    }

    /// The pose undoing this one.
    pub fn inverse(&self) -> Self {
        let inv_s = 1.0 / self.scale;
        let (sin, cos) = (-self.theta).sin_cos();
        let tx = -inv_s * (cos * self.tx - sin * self.ty);
        let ty = -inv_s * (sin * self.tx + cos * self.ty);
        Self::new(-self.theta, inv_s, tx, ty)
    }

    /// Rotation and scale only.
    pub fn rotation_scale(&self) -> Self {
        Self::new(self.theta, self.scale, 0.0, 0.0)
    }

    /// Smallest absolute angular difference in radians.
    pub fn angle_error(&self, other: &PoseSim2) -> f64 {
        let d = wrap_angle(self.theta - other.theta);
        d.min(2.0 * PI - d)
    }
}

/// Maps an angle into `[0, 2π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(2.0 * PI);
    if t >= 2.0 * PI {
        0.0
    } else {
        t
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub pose: PoseSim2,
    /// Normalized rotation/scale surface of the template–source pair.
    pub angle_scale_map: CorrMap,
    /// Normalized translation surface after rotation/scale compensation.
    pub translation_map: CorrMap,
    /// Template resampled into the source frame.
    pub aligned_template: ImageBuf,
}

/// Decodes a (possibly fractional) log-polar correlation bin into the
/// relative rotation (radians, `[0, 2π)`) and scale it encodes. The center bin
/// `(R/2, A/2)` is the identity.
pub fn bins_to_pose(row: f64, col: f64, lp: &LogPolarParams) -> Result<(f64, f64)> {
    let (nr, na) = (lp.radial_bins as f64, lp.angular_bins as f64);
    if !(row >= 0.0 && row < nr && col >= 0.0 && col < na) {
        return Err(Error::InvalidArgument(format!(
            "bin ({row}, {col}) outside {nr}x{na} surface"
        )));
    }
    let theta_deg = (col - na / 2.0) * 360.0 / na;
    let scale = (lp.r_max / lp.r_min).powf((row - nr / 2.0) / (nr - 1.0));
    Ok((wrap_angle(theta_deg.to_radians()), scale))
}

fn gray_plane(image: &ImageBuf) -> Result<Plane> {
    spectral::to_grayscale(image)
}


/// One rotation/scale hypothesis read off a local maximum of the surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotScaleCandidate {
    /// Modulo π: magnitude spectra cannot tell θ from θ + π.
    pub theta: f64,
    pub scale: f64,
    pub peak: f64,
}

/// Rotation/scale estimate of `source` relative to `template`.
#[derive(Debug, Clone)]
pub struct RotScaleEstimate {
    /// Modulo π, from the highest peak.
    pub theta: f64,
    pub scale: f64,
    /// Strongest local maxima first; `candidates[0]` matches `theta`/`scale`.
    pub candidates: Vec<RotScaleCandidate>,
    pub angle_scale_map: CorrMap,
}

/// Local maxima kept as rotation/scale hypotheses.
pub const ROT_SCALE_CANDIDATES: usize = 5;

pub fn estimate_rot_scale(template: &ImageBuf, source: &ImageBuf) -> Result<RotScaleEstimate> {
    template.ensure_same_shape(source, "estimate_rot_scale")?;
    let t = gray_plane(template)?;
    let s = gray_plane(source)?;
    let (h, w) = t.shape();
    let lp = LogPolarParams::for_shape(h * spectral::SPECTRAL_PAD, w * spectral::SPECTRAL_PAD);
    let lp_t = spectral::spectral_log_polar(&t, &lp)?;
    let lp_s = spectral::spectral_log_polar(&s, &lp)?;
    let raw = spectral::phase_correlate(&lp_t, &lp_s)?;
    let candidates = local_maxima(&raw.map, ROT_SCALE_CANDIDATES)
        .into_iter()
        .map(|(row, col, peak)| {
            let (theta, spectral_scale) = bins_to_pose(row, col, &lp)?;
            // Enlarging an image shrinks its spectrum, so the spectral scale is inverted.
            let scale = (1.0 / spectral_scale).clamp(MIN_SCALE, MAX_SCALE);
            Ok(RotScaleCandidate { theta, scale, peak })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = candidates[0];
    Ok(RotScaleEstimate {
        theta: best.theta,
        scale: best.scale,
        candidates,
        angle_scale_map: spectral::normalize_to_distribution(&raw, DEFAULT_DISTRIBUTION_TEMPERATURE)?,
    })
}

/// Up to `k` strongest 3x3 local maxima, refined to sub-bin precision by a
/// parabola through each axis. Columns wrap. Only the first half of the
/// columns is searched since the surface repeats with period `cols / 2`.
fn local_maxima(m: &Plane, k: usize) -> Vec<(f64, f64, f64)> {
    let (h, w) = m.shape();
    let at = |r: usize, c: isize| m.get(r, c.rem_euclid(w as isize) as usize);
    let mut peaks = Vec::new();
    for r in 0..h {
        for c in 0..(w / 2) as isize {
            let v = at(r, c);
            let is_max = (r.saturating_sub(1)..(r + 2).min(h))
                .all(|rr| (c - 1..=c + 1).all(|cc| (rr == r && cc == c) || at(rr, cc) < v));
            if is_max {
                peaks.push((r, c, v));
            }
        }
    }
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2));
    peaks.truncate(k.max(1));
    peaks
        .into_iter()
        .map(|(r, c, v)| {
            let dr = if r > 0 && r + 1 < h {
                parabola_offset(m.get(r - 1, c as usize), v, m.get(r + 1, c as usize))
            } else {
                0.0
            };
            let dc = parabola_offset(at(r, c - 1), v, at(r, c + 1));
            // A tiny negative offset at column 0 rounds up to exactly w.
            let col = (c as f64 + dc).rem_euclid(w as f64);
            (r as f64 + dr, if col >= w as f64 { 0.0 } else { col }, v)
        })
        .collect()
}

fn parabola_offset(left: f64, mid: f64, right: f64) -> f64 {
    let denom = left - 2.0 * mid + right;
    if denom < 0.0 {
        (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Translation estimate with its raw surface peak (used to rank candidates).
#[derive(Debug, Clone)]
pub struct TranslationEstimate {
    pub tx: f64,
    pub ty: f64,
    pub peak: f64,
    pub translation_map: CorrMap,
}

/// Displacement of `reference` relative to `rotated_template`, in pixels.
pub fn estimate_translation(
    reference: &ImageBuf,
    rotated_template: &ImageBuf,
) -> Result<TranslationEstimate> {
    estimate_translation_with(reference, rotated_template, DEFAULT_EXPECTATION_TEMPERATURE)
}

pub fn estimate_translation_with(
    reference: &ImageBuf,
    rotated_template: &ImageBuf,
    temperature: f64,
) -> Result<TranslationEstimate> {
    reference.ensure_same_shape(rotated_template, "estimate_translation")?;
    let a = spectral::apodize(&gray_plane(rotated_template)?);
    let b = spectral::apodize(&gray_plane(reference)?);
    let raw = spectral::phase_correlate(&a, &b)?;
    let (row, col) = spectral::soft_expectation(&raw, temperature)?;
    let (h, w) = a.shape();
    let ty = wrap_displacement(row - (h / 2) as f64, h);
    let tx = wrap_displacement(col - (w / 2) as f64, w);
    Ok(TranslationEstimate {
        tx,
        ty,
        peak: raw.map.max(),
        translation_map: spectral::normalize_to_distribution(&raw, DEFAULT_DISTRIBUTION_TEMPERATURE)?,
    })
}

fn wrap_displacement(d: f64, n: usize) -> f64 {
    let n = n as f64;
    (d + n / 2.0).rem_euclid(n) - n / 2.0
}

/// Estimates the pose taking `template` onto `source` and resamples the
/// template into the source frame. Every rotation/scale candidate is tried
/// as θ and θ + π; each gets its translation, and the pose whose aligned
/// template best matches the source (normalized cross-correlation over the
/// covered pixels) wins.
pub fn register(template: &ImageBuf, source: &ImageBuf) -> Result<RegistrationResult> {
    register_with(template, source, DEFAULT_EXPECTATION_TEMPERATURE)
}

/// [`register`] with an explicit translation-decoding temperature.
pub fn register_with(
    template: &ImageBuf,
    source: &ImageBuf,
    temperature: f64,
) -> Result<RegistrationResult> {
    template.ensure_same_shape(source, "register")?;
    let rs = estimate_rot_scale(template, source)?;
    let src_gray = gray_plane(source)?;
    let tpl_gray = gray_plane(template)?;
    let (h, w) = tpl_gray.shape();
    let ones = Plane::filled(h, w, 1.0);
    let mut best: Option<(f64, PoseSim2, TranslationEstimate)> = None;
    for cand in &rs.candidates {
        for flip in [0.0, PI] {
            let rot = PoseSim2::new(cand.theta + flip, cand.scale, 0.0, 0.0);
            let rotated = ImageBuf::from_plane(warp_plane(&tpl_gray, &rot)?);
            let tr = estimate_translation_with(source, &rotated, temperature)?;
            let pose = PoseSim2::new(rot.theta, rot.scale, tr.tx, tr.ty);
            let aligned = warp_plane(&tpl_gray, &pose)?;
            let covered = warp_plane(&ones, &pose)?;
            let score = masked_ncc(&aligned, &src_gray, &covered);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, pose, tr));
            }
        }
    }
    let (_, pose, tr) = best.expect("at least one candidate");
    let aligned_template = warp_sim2(template, &pose)?;
    Ok(RegistrationResult {
        pose,
        angle_scale_map: rs.angle_scale_map,
        translation_map: tr.translation_map,
        aligned_template,
    })
}

/// Pixels whose coverage is below this do not count toward the match score.
const COVERAGE_MIN: f64 = 0.999;

/// Normalized cross-correlation of `a` and `b` over pixels where `coverage`
/// is full. Too small an overlap scores `-1`.
fn masked_ncc(a: &Plane, b: &Plane, coverage: &Plane) -> f64 {
    let idx: Vec<usize> = (0..a.len()).filter(|&i| coverage.data()[i] >= COVERAGE_MIN).collect();
    if idx.len() * 8 < a.len() {
        return -1.0;
    }
    let n = idx.len() as f64;
    let (ad, bd) = (a.data(), b.data());
    let ma = idx.iter().map(|&i| ad[i]).sum::<f64>() / n;
    let mb = idx.iter().map(|&i| bd[i]).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let (x, y) = (ad[i] - ma, bd[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Inverse-maps every output pixel through `pose` and samples bilinearly;
/// pixels whose preimage leaves the input read as zero.
pub fn warp_plane(p: &Plane, pose: &PoseSim2) -> Result<Plane> {
    pose.validate()?;
    let (h, w) = p.shape();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = pose.theta.sin_cos();
    let inv_s = 1.0 / pose.scale;
    Ok(Plane::from_fn(h, w, |r, c| {
        let dx = c as f64 - cx - pose.tx;
        let dy = r as f64 - cy - pose.ty;
        // R(-θ) (p - c - t) / s + c
        let sx = (cos * dx + sin * dy) * inv_s + cx;
        let sy = (-sin * dx + cos * dy) * inv_s + cy;
        spectral::sample_bilinear(p, sy, sx)
    }))
}

pub fn warp_sim2(image: &ImageBuf, pose: &PoseSim2) -> Result<ImageBuf> {
    let planes: Vec<Plane> = (0..image.channels())
        .map(|ch| warp_plane(&image.channel(ch), pose))
        .collect::<Result<_>>()?;
    if planes.len() == 1 {
        return Ok(ImageBuf::from_plane(planes.into_iter().next().expect("one plane")));
    }
    let (h, w) = image.shape();
    let n = planes.len();
    let mut data = vec![0.0; h * w * n];
    for (ch, p) in planes.iter().enumerate() {
        for (i, &v) in p.data().iter().enumerate() {
            data[i * n + ch] = v;
        }
    }
    ImageBuf::new(h, w, n, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64, n: usize) -> Plane {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<(f64, f64, f64, f64)> = (0..40)
            .map(|_| {
                (
                    rng.gen_range(0.0..n as f64),
                    rng.gen_range(0.0..n as f64),
                    rng.gen_range(2.0..8.0),
                    rng.gen_range(-0.4..0.4),
                )
            })
            .collect();
        Plane::from_fn(n, n, |r, c| {
            let v: f64 = centers
                .iter()
                .map(|&(y, x, s, a)| {
                    a * (-((r as f64 - y).powi(2) + (c as f64 - x).powi(2)) / (2.0 * s * s)).exp()
                })
                .sum();
            (0.5 + v).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn bins_decode_center_and_quarter_turn() {
        let lp = LogPolarParams::for_shape(256, 256);
        let (t, s) = bins_to_pose(128.0, 128.0, &lp).unwrap();
        assert_eq!((t, s), (0.0, 1.0));
        let (t, s) = bins_to_pose(128.0, 192.0, &lp).unwrap();
        assert!((t.to_degrees() - 90.0).abs() < 1e-9 && (s - 1.0).abs() < 1e-12);
        let (_, s) = bins_to_pose(128.0 + 7.0, 128.0, &lp).unwrap();
        assert!((s - lp.radial_ratio().powi(7)).abs() < 1e-12);
        assert!(bins_to_pose(256.0, 0.0, &lp).is_err());
        assert!(bins_to_pose(0.0, -0.5, &lp).is_err());
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let p = PoseSim2::from_degrees(33.0, 1.15, 4.0, -7.5);
        let q = p.inverse();
        let img = blobs(1, 64);
        let there = warp_plane(&img, &p).unwrap();
        let back = warp_plane(&there, &q).unwrap();
        let mut err: f64 = 0.0;
        // points farther out land outside the grid after the forward warp
        for r in 22..42 {
            for c in 22..42 {
                err = err.max((back.get(r, c) - img.get(r, c)).abs());
            }
        }
        assert!(err < 0.1, "interior round-trip error {err}");
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = blobs(2, 32);
        let w = warp_plane(&img, &PoseSim2::identity()).unwrap();
        assert!(img.max_abs_diff(&w) < 1e-6);
    }

    #[test]
    fn translation_moves_impulse() {
        let mut p = Plane::zeros(32, 32);
        p.set(10, 12, 1.0);
        let w = warp_plane(&p, &PoseSim2::new(0.0, 1.0, 5.0, 0.0)).unwrap();
        assert!((w.get(10, 17) - 1.0).abs() < 1e-9);
        assert!((w.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn warp_keeps_unit_range() {
        let img = blobs(3, 64);
        let w = warp_plane(&img, &PoseSim2::from_degrees(17.0, 0.85, 3.3, -2.1)).unwrap();
        assert!(w.min() >= 0.0 && w.max() <= 1.0);
    }

    #[test]
    fn self_registration_is_identity() {
        let img = ImageBuf::from_plane(blobs(4, 128));
        let res = register(&img, &img).unwrap();
        let p = res.pose;
        assert!(p.angle_error(&PoseSim2::identity()).to_degrees() < 360.0 / 256.0);
        assert!((p.scale - 1.0).abs() < 0.01);
        assert!(p.tx.abs() < 0.1 && p.ty.abs() < 0.1, "{p:?}");
        assert!(res.aligned_template.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn peak_refinement_stays_inside_the_surface() {
        let mut m = Plane::zeros(8, 8);
        m.set(4, 0, 1.0);
        m.set(4, 7, 0.5 + 1e-15);
        m.set(4, 1, 0.5);
        let peaks = local_maxima(&m, 1);
        assert_eq!(peaks.len(), 1);
        assert!(peaks[0].1 >= 0.0 && peaks[0].1 < 8.0, "{peaks:?}");
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = ImageBuf::from_plane(Plane::zeros(32, 32));
        let b = ImageBuf::from_plane(Plane::zeros(64, 64));
        assert!(matches!(register(&a, &b), Err(Error::ShapeMismatch(_))));
        assert!(estimate_translation(&a, &b).is_err());
    }
}
