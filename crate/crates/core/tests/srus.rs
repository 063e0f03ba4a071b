use vascufold_core::phantom::{generate_network, rasterize, PhantomConfig};
use vascufold_core::preprocess::{augment, preprocess_stack, AugmentConfig, PreprocessConfig};
use vascufold_core::srus::*;
use vascufold_core::volume::Grid;

fn stack(count: usize) -> SliceStack {
    let g = generate_network(&PhantomConfig { seed: 3, ..Default::default() }).unwrap();
    let m = rasterize(&g, &Grid::isotropic([64, 64, 64], 0.02).unwrap());
    let cfg = SliceConfig { count, spacing_mm: 1.28 / count as f64, seed: 1, ..Default::default() };
    slice_stack(&g, &m, &cfg).unwrap()
}

#[test]
fn stack_has_all_channels_in_range() {
    let s = stack(4);
    assert_eq!(s.len(), 4);
    assert_eq!(s.channels, Channel::ALL.to_vec());
    s.validate().unwrap();
    let density = s.channel(0, Channel::FlowDensity).unwrap();
    assert!(density.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(s.slices.iter().all(|sl| !sl.warning));
    // velocity and direction only exist where there is flow
    for k in 0..s.len() {
        let d = s.channel(k, Channel::FlowDensity).unwrap();
        let v = s.channel(k, Channel::FlowVelocity).unwrap();
        assert!(d.data.iter().zip(&v.data).all(|(&d, &v)| d > 0.0 || v == 0.0));
    }
}

#[test]
fn plane_outside_volume_is_flagged() {
    let g = generate_network(&PhantomConfig { seed: 3, ..Default::default() }).unwrap();
    let m = rasterize(&g, &Grid::isotropic([32, 32, 32], 0.04).unwrap());
    let cfg = SliceConfig { count: 3, spacing_mm: 0.8, ..Default::default() };
    let s = slice_stack(&g, &m, &cfg).unwrap();
    assert_eq!(s.slices.iter().map(|sl| sl.warning).collect::<Vec<_>>(), vec![false, false, true]);
    assert!(s.slices[2].data.iter().all(|img| img.data.iter().all(|&v| v == 0.0)));
}

#[test]
fn save_load_round_trip_is_exact() {
    let s = corrupt(&stack(3), &DegradationConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    s.save(dir.path()).unwrap();
    let back = SliceStack::load(dir.path()).unwrap();
    assert_eq!(back, s);
}

#[test]
fn impulse_count_matches_fraction() {
    let mut s = stack(2);
    for k in 0..s.len() {
        s.channel_mut(k, Channel::Grayscale).unwrap().data.fill(0.5);
    }
    let cfg = DegradationConfig { noise_sigma: 0.0, impulse_fraction: 0.05, jitter_px: 0.0, ..Default::default() };
    let c = corrupt(&s, &cfg).unwrap();
    let n = (s.width * s.height * s.len()) as f64;
    let hits =
        (0..c.len()).flat_map(|k| c.channel(k, Channel::Grayscale).unwrap().data.clone()).filter(|&v| v != 0.5).count()
            as f64;
    let sd = (n * 0.05 * 0.95).sqrt();
    assert!((hits - 0.05 * n).abs() < 5.0 * sd, "{hits} impulses of {n}");
    // the other channels are untouched without jitter
    let d = Channel::FlowDensity;
    assert_eq!(c.channel(1, d), s.channel(1, d));
}

#[test]
fn corruption_is_seeded_and_bounded() {
    let s = stack(2);
    let cfg = DegradationConfig { jitter_px: 2.5, ..Default::default() };
    let a = corrupt(&s, &cfg).unwrap();
    let b = corrupt(&s, &cfg).unwrap();
    assert_eq!(a, b);
    for w in &a.warps {
        assert!(w.as_ref().unwrap().max_norm() <= 2.5 + 1e-12);
    }
    let other = corrupt(&s, &DegradationConfig { seed: 9, ..cfg.clone() }).unwrap();
    assert_ne!(a, other);
    assert!(corrupt(&s, &DegradationConfig { impulse_fraction: 1.5, ..cfg }).is_err());
}

#[test]
fn preprocessing_records_normalization() {
    let s = corrupt(&stack(2), &DegradationConfig::default()).unwrap();
    let p = preprocess_stack(&s, &PreprocessConfig::default()).unwrap();
    for k in 0..p.len() {
        let n = p.normalization[k].unwrap();
        assert!(n.std > 0.0);
        let g = &p.channel(k, Channel::Grayscale).unwrap().data;
        let mean = g.iter().map(|&v| v as f64).sum::<f64>() / g.len() as f64;
        assert!(mean.abs() < 1e-5);
    }
}

#[test]
fn identity_augmentation_is_a_no_op() {
    let s = stack(2);
    assert_eq!(augment(&s, &AugmentConfig::default()).unwrap(), s);
}

#[test]
fn quarter_turn_permutes_discrete_channels() {
    let s = stack(2);
    let a = augment(&s, &AugmentConfig { rotation_deg: 90.0, ..Default::default() }).unwrap();
    let w = s.width;
    let c = Channel::MicrobubbleTrack;
    let (before, after) = (s.channel(0, c).unwrap(), a.channel(0, c).unwrap());
    for y in 0..w {
        for x in 0..w {
            assert_eq!(after.get(x, y), before.get(y, w - 1 - x));
        }
    }
    // flow direction turns with the image
    let (d0, d1) = (s.channel(0, Channel::FlowDirection).unwrap(), a.channel(0, Channel::FlowDirection).unwrap());
    let fg = s.channel(0, Channel::FlowDensity).unwrap();
    for y in 0..w {
        for x in 0..w {
            if fg.get(y, w - 1 - x) > 0.0 {
                let expected = d0.get(y, w - 1 - x) as f64 + std::f64::consts::FRAC_PI_2;
                let diff = (d1.get(x, y) as f64 - expected).rem_euclid(std::f64::consts::TAU);
                assert!(!(1e-5..=std::f64::consts::TAU - 1e-5).contains(&diff));
            }
        }
    }
    a.validate().unwrap();
}

#[test]
fn half_turns_compose_to_identity() {
    let s = stack(1);
    let cfg = AugmentConfig { rotation_deg: 180.0, ..Default::default() };
    let twice = augment(&augment(&s, &cfg).unwrap(), &cfg).unwrap();
    let c = Channel::MicrobubbleTrack;
    assert_eq!(twice.channel(0, c), s.channel(0, c));
    assert!(augment(&s, &AugmentConfig { scale: 0.0, ..Default::default() }).is_err());
}
