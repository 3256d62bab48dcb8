use proptest::prelude::*;

use specdiff::diffnet::{self, ArchConfig};
use specdiff::evalkit;
use specdiff::losses::{self, IrrelevanceLoss};
use specdiff::registration::{self, PoseSim2};
use specdiff::simgen::{self, GenConfig};
use specdiff::spectral::{self, CorrMap, LogPolarParams};
use specdiff::{ImageBuf, Plane};

fn plane_of(n: usize, values: &[f64]) -> Plane {
    Plane::new(n, n, values[..n * n].to_vec()).unwrap()
}

/// Side length (power of two between 8 and 32) with matching unit-range data.
fn square() -> impl Strategy<Value = (usize, Vec<f64>)> {
    prop_oneof![Just(8usize), Just(16), Just(32)]
        .prop_flat_map(|n| (Just(n), prop::collection::vec(0.0f64..=1.0, n * n)))
}

fn argmax(data: &[f64]) -> usize {
    data.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
}

fn small_gen(seed: u64) -> GenConfig {
    GenConfig {
        image_size: 64,
        translation_px: [-12.0, 12.0],
        seed,
        ..GenConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn magnitude_ignores_circular_shift((n, v) in square(), dr in 0isize..32, dc in 0isize..32) {
        let p = plane_of(n, &v);
        let a = spectral::fft_magnitude(&p).unwrap();
        let b = spectral::fft_magnitude(&p.roll(dr, dc)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn self_correlation_peaks_at_center((n, v) in square()) {
        let p = plane_of(n, &v);
        let c = spectral::phase_correlate(&p, &p).unwrap();
        prop_assert_eq!(argmax(c.map.data()), (n / 2) * n + n / 2);
    }

    #[test]
    fn normalization_keeps_argmax_and_mass(
        v in prop::collection::vec(-1.0f64..1.0, 256),
        t in 0.1f64..20.0,
    ) {
        let c = CorrMap::raw(plane_of(16, &v));
        let d = spectral::normalize_to_distribution(&c, t).unwrap();
        prop_assert_eq!(argmax(d.map.data()), argmax(c.map.data()));
        prop_assert!((d.map.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_expectation_of_symmetric_pair_is_midpoint(
        r in 0usize..32, c in 0usize..32, dr in 0usize..6, dc in 0usize..6,
    ) {
        let mut m = Plane::filled(32, 32, -1000.0);
        m.set(r, c, 0.0);
        let (r2, c2) = ((r + 2 * dr).min(31), (c + 2 * dc).min(31));
        m.set(r2, c2, 0.0);
        let (er, ec) = spectral::soft_expectation(&CorrMap::raw(m), 10.0).unwrap();
        prop_assert!((er - (r + r2) as f64 / 2.0).abs() < 1e-9);
        prop_assert!((ec - (c + c2) as f64 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn warp_stays_in_unit_range(
        (n, v) in square(),
        theta in 0.0f64..std::f64::consts::TAU,
        scale in 0.5f64..2.0,
        tx in -10.0f64..10.0,
        ty in -10.0f64..10.0,
    ) {
        let img = ImageBuf::from_plane(plane_of(n, &v));
        let w = registration::warp_sim2(&img, &PoseSim2::new(theta, scale, tx, ty)).unwrap();
        prop_assert!(w.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn bin_decoding_inverts_log_polar_shift_law(theta_deg in 0.0f64..360.0, scale in 0.6f64..1.6) {
        let lp = LogPolarParams::for_shape(512, 512);
        let (a, r) = (lp.angular_bins as f64, lp.radial_bins as f64);
        // Rotation moves columns by theta * A / 360; scaling moves rows by
        // rows_per_log_scale * ln(s), both relative to the center bin.
        let col = (a / 2.0 + theta_deg * a / 360.0).rem_euclid(a);
        let row = r / 2.0 + lp.rows_per_log_scale() * scale.ln();
        prop_assume!(row >= 0.0 && row < r);
        let (t, s) = registration::bins_to_pose(row, col, &lp).unwrap();
        let bin_deg = 360.0 / a;
        let err = (t.to_degrees() - theta_deg).rem_euclid(360.0);
        prop_assert!(err.min(360.0 - err) <= bin_deg);
        prop_assert!((s.ln() - scale.ln()).abs() <= 1.0 / lp.rows_per_log_scale());
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_on_target(
        t in prop::collection::vec(0.01f64..1.0, 16),
        q in prop::collection::vec(0.01f64..1.0, 16),
    ) {
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let (t, q) = (norm(&t), norm(&q));
        prop_assert!(losses::kl_divergence(&t, &q) >= 0.0);
        prop_assert!(losses::kl_divergence(&t, &t).abs() < 1e-9);
        if t.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-3) {
            prop_assert!(losses::kl_divergence(&t, &q) > 0.0);
        }
    }

    #[test]
    fn defect_loss_symmetric_and_zero_only_when_equal(
        a in prop::collection::vec(0.0f64..=1.0, 1024),
        b in prop::collection::vec(0.0f64..=1.0, 1024),
    ) {
        let (a, b) = (plane_of(32, &a), plane_of(32, &b));
        let ab = losses::defect_loss(&a, &b).unwrap();
        prop_assert_eq!(ab, losses::defect_loss(&b, &a).unwrap());
        prop_assert_eq!(losses::defect_loss(&a, &a).unwrap(), 0.0);
        prop_assert!(ab.is_finite() && ab >= 0.0);
    }

    #[test]
    fn pr_curve_is_well_formed(
        v in prop::collection::vec(0.0f64..=1.0, 64),
        g in prop::collection::vec(any::<bool>(), 64),
        n in 2usize..64,
    ) {
        let gt = Plane::new(8, 8, g.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect()).unwrap();
        let c = evalkit::pr_curve(&plane_of(8, &v), &gt, n).unwrap();
        prop_assert_eq!(c.thresholds.len(), n);
        prop_assert_eq!(c.precision.len(), n);
        prop_assert_eq!(c.recall.len(), n);
        prop_assert!(c.thresholds.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(c.recall.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.precision.iter().chain(&c.recall).all(|x| (0.0..=1.0).contains(x)));
        let ap = evalkit::average_precision(&c);
        let (f1, _) = evalkit::max_f1(&c);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ap) && (0.0..=1.0).contains(&f1));
    }

    #[test]
    fn sweep_metrics_ignore_monotone_remaps(
        v in prop::collection::vec(0.0f64..=1.0, 64),
        g in prop::collection::vec(any::<bool>(), 64),
        gamma in 0.2f64..5.0,
    ) {
        let gt = Plane::new(8, 8, g.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect()).unwrap();
        let pred = plane_of(8, &v);
        let remapped = pred.map(|x| x.powf(gamma));
        // x^gamma can merge values closer than rounding; skip those draws.
        let distinct = |p: &Plane| { let mut d = p.data().to_vec(); d.sort_by(f64::total_cmp); d.dedup(); d.len() };
        prop_assume!(distinct(&pred) == distinct(&remapped));
        let a = evalkit::pr_curve_sweep(&pred, &gt).unwrap();
        let b = evalkit::pr_curve_sweep(&remapped, &gt).unwrap();
        prop_assert_eq!(evalkit::average_precision(&a), evalkit::average_precision(&b));
        prop_assert_eq!(evalkit::max_f1(&a).0, evalkit::max_f1(&b).0);
        prop_assert_eq!(&a.precision, &b.precision);
        prop_assert_eq!(&a.recall, &b.recall);
    }

    #[test]
    fn sweep_points_match_threshold_counting(
        v in prop::collection::vec(0u8..6, 36),
        g in prop::collection::vec(any::<bool>(), 36),
    ) {
        let pred = Plane::new(6, 6, v.iter().map(|&x| x as f64 / 5.0).collect()).unwrap();
        let gt = Plane::new(6, 6, g.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect()).unwrap();
        let c = evalkit::pr_curve_sweep(&pred, &gt).unwrap();
        let pos = g.iter().filter(|&&x| x).count();
        for ((&t, &p), &r) in c.thresholds.iter().zip(&c.precision).zip(&c.recall) {
            let tp = (0..36).filter(|&i| pred.data()[i] >= t && g[i]).count();
            let fp = (0..36).filter(|&i| pred.data()[i] >= t && !g[i]).count();
            prop_assert_eq!(p, if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 });
            prop_assert_eq!(r, if pos == 0 { 1.0 } else { tp as f64 / pos as f64 });
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn irrelevance_ignores_joint_translation(
        a in prop::collection::vec(0.0f64..=1.0, 1024),
        b in prop::collection::vec(0.0f64..=1.0, 1024),
        dr in -16isize..16,
        dc in -16isize..16,
    ) {
        let t = losses::target_one_peak(64, losses::DEFAULT_SIGMA_BINS).unwrap();
        let irr = IrrelevanceLoss::new(32, 32, t, 1.0).unwrap();
        let (a, b) = (plane_of(32, &a), plane_of(32, &b));
        let l0 = irr.value(&a, &b).unwrap();
        let l1 = irr.value(&a.roll(dr, dc), &b.roll(dr, dc)).unwrap();
        prop_assert!(l0.is_finite());
        prop_assert!((l0 - l1).abs() < 1e-9);
    }

    #[test]
    fn network_outputs_are_bounded_and_repeatable(
        seed in any::<u64>(),
        t in prop::collection::vec(prop_oneof![Just(0.0f64), Just(1.0), 0.0f64..=1.0], 256),
        s in prop::collection::vec(prop_oneof![Just(0.0f64), Just(1.0), 0.0f64..=1.0], 256),
    ) {
        let arch = ArchConfig { levels: 3, base_width: 3, mask_width: 3, ..ArchConfig::default() };
        let p = diffnet::init_params(seed, arch).unwrap();
        let (t, s) = (ImageBuf::from_plane(plane_of(16, &t)), ImageBuf::from_plane(plane_of(16, &s)));
        let (ot, os) = diffnet::difference_forward(&p, &t, &s).unwrap();
        let o = diffnet::mask_forward(&p, &ot, &os).unwrap();
        for m in [&ot, &os, &o] {
            prop_assert!(m.data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
        let (ot2, os2) = diffnet::difference_forward(&p, &t, &s).unwrap();
        prop_assert_eq!(ot.data(), ot2.data());
        prop_assert_eq!(os.data(), os2.data());
    }

    #[test]
    fn generated_pairs_are_reproducible_and_in_range(seed in any::<u64>()) {
        let cfg = small_gen(seed);
        let a = simgen::gen_pair(seed, &cfg).unwrap();
        let b = simgen::gen_pair(seed, &cfg).unwrap();
        prop_assert_eq!(a.template.data(), b.template.data());
        prop_assert_eq!(a.source.data(), b.source.data());
        prop_assert_eq!(a.gt_mask.data(), b.gt_mask.data());
        let p = a.gt_pose;
        let deg = p.theta_deg().rem_euclid(360.0);
        prop_assert!(deg >= cfg.rotation_deg[0] - 1e-9 && deg <= cfg.rotation_deg[1] + 1e-9, "theta {deg}");
        prop_assert!(p.scale >= cfg.scale[0] && p.scale <= cfg.scale[1]);
        for t in [p.tx, p.ty] {
            prop_assert!(t >= cfg.translation_px[0] && t <= cfg.translation_px[1]);
        }
        prop_assert!(a.gt_mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(a.gt_mask.sum() / a.gt_mask.len() as f64 <= 0.01 + 1e-12);
    }

    #[test]
    fn jitter_without_defects_leaves_empty_masks(seed in any::<u64>()) {
        let cfg = GenConfig { n_defects: [0, 0], jitter_px: [0.0, 3.0], ..small_gen(seed) };
        let p = simgen::gen_pair(seed, &cfg).unwrap();
        prop_assert_eq!(p.gt_mask.sum(), 0.0);
    }
}
