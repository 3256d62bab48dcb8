//! Training objectives and a finite-difference gradient checker.
//!
//! The irrelevance loss reads the rotation marginal of the log-polar phase
//! correlation between the two difference maps. The marginal is indexed by
//! relative angle, bin `k` covering `k·360°/A`, so bin 0 is "same content" and
//! bin `A/2` is the 180° mode the target asks for.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DefectMap, Plane};
use crate::spectral::{self, CorrMap, LogPolarParams, LogPolarSampler};

pub const DEFAULT_SIGMA_BINS: f64 = 2.0;
pub const DEFAULT_IRRELEVANCE_TEMPERATURE: f64 = 1.0;
/// Pixels excluded along every border by [`defect_loss`].
pub const DEFAULT_BORDER_MARGIN: usize = 8;
const Q_FLOOR: f64 = 1e-12;

/// Circular Gaussian over angle bins with its mode at 180°.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    pub data: Vec<f64>,
    pub sigma_bins: f64,
}

impl TargetDistribution {
    pub fn bins(&self) -> usize {
        self.data.len()
    }
}

pub fn target_one_peak(angular_bins: usize, sigma_bins: f64) -> Result<TargetDistribution> {
    if angular_bins < 8 {
        return Err(Error::InvalidArgument(format!(
            "need at least 8 angular bins, got {angular_bins}"
        )));
    }
    if !(sigma_bins >= 0.0 && sigma_bins.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma_bins must be finite and nonnegative, got {sigma_bins}"
        )));
    }
    let center = angular_bins / 2;
    let mut data = vec![0.0; angular_bins];
    if sigma_bins == 0.0 {
        data[center] = 1.0;
    } else {
        for (k, v) in data.iter_mut().enumerate() {
            let d = circular_distance(k, center, angular_bins) as f64;
            *v = (-d * d / (2.0 * sigma_bins * sigma_bins)).exp();
        }
        let z: f64 = data.iter().sum();
        for v in &mut data {
            *v /= z;
        }
    }
    Ok(TargetDistribution { data, sigma_bins })
}

fn circular_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

/// KL(target ‖ q) with q floored at 1e-12; terms with zero target mass vanish.
pub fn kl_divergence(target: &[f64], q: &[f64]) -> f64 {
    target
        .iter()
        .zip(q)
        .filter(|(t, _)| **t > 0.0)
        .map(|(&t, &qk)| t * (t / qk.max(Q_FLOOR)).ln())
        .sum()
}

/// Reusable irrelevance objective for a fixed map size. The log-polar
/// sampling taps and high-pass mask are built once.
#[derive(Debug, Clone)]
pub struct IrrelevanceLoss {
    sampler: LogPolarSampler,
    mask: Plane,
    target: TargetDistribution,
    temperature: f64,
}

/// Forward quantities of one evaluation.
#[derive(Debug, Clone)]
pub struct IrrelevanceEval {
    pub loss: f64,
    /// Angle marginal indexed by relative rotation (bin 0 = 0°).
    pub q: Vec<f64>,
    pub distribution: CorrMap,
}

impl IrrelevanceLoss {
    pub fn new(
        height: usize,
        width: usize,
        target: TargetDistribution,
        temperature: f64,
    ) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if !spectral::is_pow2(height) || !spectral::is_pow2(width) {
            return Err(Error::InvalidArgument(format!(
                "irrelevance loss needs power-of-two maps, got {height}x{width}"
            )));
        }
        let mut params = LogPolarParams::for_shape(height, width);
        params.angular_bins = target.bins();
        let sampler = LogPolarSampler::new(params, height, width)?;
        Ok(Self {
            sampler,
            mask: spectral::highpass_mask(height, width),
            target,
            temperature,
        })
    }

    pub fn target(&self) -> &TargetDistribution {
        &self.target
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    fn spectrum_log_polar(&self, o: &Plane) -> Result<Plane> {
        let mag = spectral::fft_magnitude(o)?;
        let hp = mul(&mag, &self.mask);
        self.sampler.apply(&hp)
    }

    fn check(&self, o_t: &DefectMap, o_s: &DefectMap) -> Result<()> {
        o_t.ensure_same_shape(o_s, "irrelevance_loss")?;
        let expected = (self.mask.height(), self.mask.width());
        if o_t.shape() != expected {
            return Err(Error::ShapeMismatch(format!(
                "irrelevance loss built for {expected:?}, got {:?}",
                o_t.shape()
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, o_t: &DefectMap, o_s: &DefectMap) -> Result<IrrelevanceEval> {
        self.check(o_t, o_s)?;
        let lp_t = self.spectrum_log_polar(o_t)?;
        let lp_s = self.spectrum_log_polar(o_s)?;
        let raw = spectral::phase_correlate(&lp_t, &lp_s)?;
        self.finish(&raw)
    }

    fn finish(&self, raw: &CorrMap) -> Result<IrrelevanceEval> {
        let distribution = spectral::normalize_to_distribution(raw, self.temperature)?;
        let q = angle_marginal(&distribution);
        let loss = kl_divergence(&self.target.data, &q);
        Ok(IrrelevanceEval {
            loss,
            q,
            distribution,
        })
    }

    pub fn value(&self, o_t: &DefectMap, o_s: &DefectMap) -> Result<f64> {
        Ok(self.evaluate(o_t, o_s)?.loss)
    }

    /// Loss and its gradients with respect to `o_t` and `o_s`.
    pub fn value_and_grad(&self, o_t: &DefectMap, o_s: &DefectMap) -> Result<(f64, Plane, Plane)> {
        self.check(o_t, o_s)?;
        let lp_t = self.spectrum_log_polar(o_t)?;
        let lp_s = self.spectrum_log_polar(o_s)?;
        let (raw, tape) = spectral::phase_correlate_taped(&lp_t, &lp_s)?;
        let eval = self.finish(&raw)?;

        let a = self.target.bins();
        let half = a / 2;
        let mut g_cols = vec![0.0; a];
        for (k, (&t, &qk)) in self.target.data.iter().zip(&eval.q).enumerate() {
            if t > 0.0 && qk > Q_FLOOR {
                g_cols[(k + half) % a] = -t / qk;
            }
        }
        let (rows, cols) = eval.distribution.map.shape();
        let g_dist = Plane::from_fn(rows, cols, |_, c| g_cols[c]);
        let g_raw = spectral::normalize_to_distribution_vjp(&eval.distribution, &g_dist);
        let (g_lp_t, g_lp_s) = spectral::phase_correlate_vjp(&tape, &g_raw);
        let g_t = self.back_to_map(o_t, &g_lp_t);
        let g_s = self.back_to_map(o_s, &g_lp_s);
        Ok((eval.loss, g_t, g_s))
    }

    fn back_to_map(&self, o: &Plane, g_lp: &Plane) -> Plane {
        let g_hp = self.sampler.adjoint(g_lp);
        spectral::fft_magnitude_vjp(o, &mul(&g_hp, &self.mask))
    }
}

fn mul(a: &Plane, b: &Plane) -> Plane {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Plane::new(a.height(), a.width(), data).expect("shape preserved")
}

/// Radial marginal of a normalized angle–scale surface, re-indexed so that
/// bin 0 is zero relative rotation.
pub fn angle_marginal(distribution: &CorrMap) -> Vec<f64> {
    let m = distribution.column_marginal();
    let a = m.len();
    (0..a).map(|k| m[(k + a / 2) % a]).collect()
}

pub fn irrelevance_loss(
    o_t: &DefectMap,
    o_s: &DefectMap,
    target: &TargetDistribution,
    temperature: f64,
) -> Result<f64> {
    IrrelevanceLoss::new(o_t.height(), o_t.width(), target.clone(), temperature)?.value(o_t, o_s)
}

fn valid_region(o: &Plane, margin: usize) -> Result<(usize, usize, usize, usize)> {
    let (h, w) = o.shape();
    if 2 * margin >= h || 2 * margin >= w {
        return Err(Error::InvalidArgument(format!(
            "border margin {margin} leaves no pixels in {h}x{w}"
        )));
    }
    Ok((margin, h - margin, margin, w - margin))
}

/// Mean squared difference over the interior left after removing `margin`
/// pixels on every side.
pub fn defect_loss_with_margin(o: &DefectMap, g: &DefectMap, margin: usize) -> Result<f64> {
    o.ensure_same_shape(g, "defect_loss")?;
    let (r0, r1, c0, c1) = valid_region(o, margin)?;
    let mut acc = 0.0;
    for r in r0..r1 {
        for c in c0..c1 {
            let d = o.get(r, c) - g.get(r, c);
            acc += d * d;
        }
    }
    Ok(acc / ((r1 - r0) * (c1 - c0)) as f64)
}

pub fn defect_loss(o: &DefectMap, g: &DefectMap) -> Result<f64> {
    defect_loss_with_margin(o, g, DEFAULT_BORDER_MARGIN)
}

/// Gradient of [`defect_loss_with_margin`] with respect to `o`.
pub fn defect_loss_grad(o: &DefectMap, g: &DefectMap, margin: usize) -> Result<(f64, Plane)> {
    let value = defect_loss_with_margin(o, g, margin)?;
    let (r0, r1, c0, c1) = valid_region(o, margin)?;
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    let grad = Plane::from_fn(o.height(), o.width(), |r, c| {
        if (r0..r1).contains(&r) && (c0..c1).contains(&c) {
            2.0 * (o.get(r, c) - g.get(r, c)) / n
        } else {
            0.0
        }
    });
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub irr: f64,
    pub def: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: LossComponents,
}

pub fn total_loss(irr: f64, def: f64) -> Result<LossValue> {
    if !irr.is_finite() || !def.is_finite() {
        return Err(Error::NonFinite(format!("loss components irr={irr}, def={def}")));
    }
    Ok(LossValue {
        value: irr + def,
        components: LossComponents { irr, def },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error used by [`grad_check`]; gradients smaller than `floor` in
/// magnitude are compared absolutely against it.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `grad` against central differences of `f` at `samples` distinct
/// random coordinates of `point`.
pub fn grad_check(
    f: impl Fn(&[f64]) -> f64,
    grad: &[f64],
    point: &[f64],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    if grad.len() != point.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries, point has {}",
            grad.len(),
            point.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.min(point.len());
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: n,
    };
    let floor = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) * 1e-6 + 1e-12;
    for i in sample(&mut rng, point.len(), n) {
        let x0 = x[i];
        x[i] = x0 + epsilon;
        let fp = f(&x);
        x[i] = x0 - epsilon;
        let fm = f(&x);
        x[i] = x0;
        let numeric = (fp - fm) / (2.0 * epsilon);
        let err = relative_error(grad[i], numeric, floor);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_map(seed: u64, n: usize) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn indicator_target() {
        let t = target_one_peak(256, 0.0).unwrap();
        assert_eq!(t.data[128], 1.0);
        assert_eq!(t.data.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn blurred_target_matches_direct_sum() {
        let t = target_one_peak(256, 2.0).unwrap();
        let z: f64 = (0..256)
            .map(|k: i64| {
                let d = ((k - 128).abs()).min(256 - (k - 128).abs()) as f64;
                (-d * d / 8.0).exp()
            })
            .sum();
        assert!((t.data[128] - 1.0 / z).abs() < 1e-15);
        assert!((t.data.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for k in 1..128 {
            assert!((t.data[128 + k] - t.data[128 - k]).abs() < 1e-15);
        }
        assert!(target_one_peak(4, 1.0).is_err());
    }

    #[test]
    fn kl_identities() {
        let t = target_one_peak(256, 2.0).unwrap();
        assert!(kl_divergence(&t.data, &t.data).abs() < 1e-12);
        let ind = target_one_peak(256, 0.0).unwrap();
        let uniform = vec![1.0 / 256.0; 256];
        assert!((kl_divergence(&ind.data, &uniform) - 256f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn constant_maps_give_uniform_marginal() {
        let t = target_one_peak(256, 0.0).unwrap();
        let o = Plane::filled(32, 32, 0.4);
        let l = irrelevance_loss(&o, &o, &t, 1.0).unwrap();
        assert!((l - 256f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn irrelevance_invariant_to_joint_circular_shift() {
        let t = target_one_peak(256, 2.0).unwrap();
        let a = random_map(1, 32);
        let b = random_map(2, 32);
        let l0 = irrelevance_loss(&a, &b, &t, 1.0).unwrap();
        let l1 = irrelevance_loss(&a.roll(3, -5), &b.roll(3, -5), &t, 1.0).unwrap();
        assert!((l0 - l1).abs() < 1e-9);
    }

    #[test]
    fn irrelevance_gradient_matches_finite_differences() {
        let t = target_one_peak(64, 2.0).unwrap();
        let n = 16;
        let a = random_map(3, n);
        let b = random_map(4, n);
        // a sharper temperature makes the gradient large enough to resolve
        let loss = IrrelevanceLoss::new(n, n, t, 20.0).unwrap();
        let (_, ga, gb) = loss.value_and_grad(&a, &b).unwrap();
        let mut point = a.data().to_vec();
        point.extend_from_slice(b.data());
        let mut grad = ga.data().to_vec();
        grad.extend_from_slice(gb.data());
        let f = |x: &[f64]| {
            let pa = Plane::new(n, n, x[..n * n].to_vec()).unwrap();
            let pb = Plane::new(n, n, x[n * n..].to_vec()).unwrap();
            loss.value(&pa, &pb).unwrap()
        };
        let report = grad_check(f, &grad, &point, 1e-5, 60, 7).unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn defect_loss_cases() {
        let ones = Plane::filled(32, 32, 1.0);
        let zeros = Plane::zeros(32, 32);
        assert_eq!(defect_loss(&ones, &zeros).unwrap(), 1.0);
        assert_eq!(defect_loss(&ones, &ones).unwrap(), 0.0);
        let a = random_map(5, 32);
        let b = random_map(6, 32);
        let mut acc = 0.0;
        for r in 8..24 {
            for c in 8..24 {
                acc += (a.get(r, c) - b.get(r, c)).powi(2);
            }
        }
        assert!((defect_loss(&a, &b).unwrap() - acc / 256.0).abs() < 1e-15);
        assert!(defect_loss(&Plane::zeros(16, 16), &Plane::zeros(16, 16)).is_err());
    }

    #[test]
    fn defect_gradient_matches_finite_differences() {
        let a = random_map(8, 24);
        let b = random_map(9, 24);
        let (_, g) = defect_loss_grad(&a, &b, 4).unwrap();
        let f = |x: &[f64]| defect_loss_with_margin(&Plane::new(24, 24, x.to_vec()).unwrap(), &b, 4).unwrap();
        let report = grad_check(f, g.data(), a.data(), 1e-5, 100, 1).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let p: Vec<f64> = (0..40).map(|i| i as f64 * 0.1 - 2.0).collect();
        let grad: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        let report = grad_check(|x| x.iter().map(|v| v * v).sum(), &grad, &p, 1e-4, 40, 0).unwrap();
        assert!(report.max_rel_error < 1e-8);
        assert!(grad_check(|_| 0.0, &grad, &p, 1e-2, 4, 0).is_err());
    }

    #[test]
    fn total_is_plain_sum() {
        let v = total_loss(0.3, 0.7).unwrap();
        assert!((v.value - 1.0).abs() < 1e-15);
        assert_eq!(v.components, LossComponents { irr: 0.3, def: 0.7 });
        assert!(total_loss(f64::NAN, 0.0).is_err());
    }
}
