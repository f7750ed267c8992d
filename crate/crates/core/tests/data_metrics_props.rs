//! Generator, dataset file format and metric properties.

use l2gnet::data::{generate, load_dataset, read_dataset, save_dataset, write_dataset, GenConfig, FORMAT_VERSION};
use l2gnet::metrics::{boundary, dice, hausdorff, MetricReport, Summary};
use l2gnet::numerics::Rng;
use l2gnet::Error;
use proptest::prelude::*;

fn bytes_of(cfg: &GenConfig) -> Vec<u8> {
    let ds = generate(cfg, "x").unwrap();
    let mut out = Vec::new();
    write_dataset(&ds, &mut out).unwrap();
    out
}

fn rect(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Vec<u8> {
    (0..h * w)
        .map(|k| {
            let (y, x) = (k / w, k % w);
            (y >= y0 && y <= y1 && x >= x0 && x <= x1) as u8
        })
        .collect()
}

/// Brute-force symmetric Hausdorff distance between two point sets.
fn hausdorff_oracle(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let d = |p: &(usize, usize), q: &(usize, usize)| (((p.0 as f64 - q.0 as f64).powi(2)) + (p.1 as f64 - q.1 as f64).powi(2)).sqrt();
    let directed = |x: &[(usize, usize)], y: &[(usize, usize)]| {
        x.iter()
            .map(|p| y.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

#[test]
fn every_class_is_present_in_nearly_all_samples() {
    let ds = generate(&GenConfig::new(3, 200, 32, 11), "train").unwrap();
    for c in 0..3u8 {
        let present = ds.samples.iter().filter(|s| s.labels.contains(&c)).count();
        assert!(present as f64 >= 0.95 * 200.0, "class {c} present in {present}/200");
    }
}

#[test]
fn splits_from_different_seeds_share_no_images() {
    let a = generate(&GenConfig::new(3, 50, 32, 1), "train").unwrap();
    let b = generate(&GenConfig::new(3, 50, 32, 2), "val").unwrap();
    for s in &a.samples {
        assert!(b.samples.iter().all(|t| t.image.data() != s.image.data()));
    }
}

#[test]
fn generation_is_byte_identical_for_equal_seeds() {
    let cfg = GenConfig::new(3, 8, 32, 7);
    assert_eq!(bytes_of(&cfg), bytes_of(&cfg));
    assert_ne!(bytes_of(&cfg), bytes_of(&GenConfig::new(3, 8, 32, 8)));
}

#[test]
fn too_small_images_are_a_generation_error() {
    let err = generate(&GenConfig::new(3, 1, 4, 0), "x").unwrap_err();
    assert!(matches!(err, Error::Generation(_)), "{err}");
}

#[test]
fn file_round_trip_is_exact() {
    let ds = generate(&GenConfig::new(4, 5, 16, 3), "val").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("val.l2gs");
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn corrupt_files_give_distinct_errors() {
    let bytes = bytes_of(&GenConfig::new(3, 2, 16, 1));

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    assert!(matches!(read_dataset(&mut bad.as_slice(), "x"), Err(Error::BadMagic { .. })));

    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        read_dataset(&mut newer.as_slice(), "x"),
        Err(Error::VersionMismatch { found, .. }) if found == FORMAT_VERSION + 1
    ));

    for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
        let short = &bytes[..cut];
        assert!(
            matches!(read_dataset(&mut &short[..], "x"), Err(Error::Truncated { .. })),
            "cut at {cut}"
        );
    }

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(read_dataset(&mut long.as_slice(), "x"), Err(Error::Corrupt(_))));
}

#[test]
fn shifted_rectangles_are_at_the_shift_distance() {
    let (h, w) = (20, 20);
    let a = rect(h, w, 4, 4, 12, 10);
    for d in 1..=4 {
        let b = rect(h, w, 4, 4 + d, 12, 10 + d);
        let hd = hausdorff(&a, &b, h, w, 1, 100.0).unwrap().unwrap();
        assert!((hd - d as f64).abs() < 1e-12, "shift {d}: {hd}");
        let oracle = hausdorff_oracle(&boundary(&a, h, w, 1), &boundary(&b, h, w, 1));
        assert_eq!(hd, oracle);
    }
}

#[test]
fn percentile_distance_is_bounded_by_the_maximum() {
    let mut rng = Rng::seeded(4);
    for _ in 0..20 {
        let a: Vec<u8> = (0..144).map(|_| (rng.uniform() < 0.4) as u8).collect();
        let b: Vec<u8> = (0..144).map(|_| (rng.uniform() < 0.4) as u8).collect();
        let h95 = hausdorff(&a, &b, 12, 12, 1, 95.0).unwrap().unwrap();
        let h100 = hausdorff(&a, &b, 12, 12, 1, 100.0).unwrap().unwrap();
        assert!(h95 <= h100 + 1e-12);
        let oracle = hausdorff_oracle(&boundary(&a, 12, 12, 1), &boundary(&b, 12, 12, 1));
        assert!((h100 - oracle).abs() < 1e-12);
    }
}

#[test]
fn empty_class_has_undefined_distance_and_unit_dice() {
    let gt = vec![0u8; 64];
    let pred = vec![0u8; 64];
    let r = MetricReport::compute(&pred, &gt, 8, 8, 3, 95.0).unwrap();
    assert_eq!(r.dsc, vec![1.0, 1.0]);
    assert_eq!(r.hd, vec![None, None]);
    let s = Summary::new(vec![r], 3);
    assert_eq!(s.mean_hd, None);
    assert_eq!(s.hd_undefined, 2);
}

fn mask_strategy() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..3, 100)
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded(a in mask_strategy(), b in mask_strategy(), c in 0u8..3) {
        let ab = dice(&a, &b, c).unwrap();
        prop_assert_eq!(ab, dice(&b, &a, c).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a, c).unwrap(), 1.0);
    }

    #[test]
    fn hausdorff_is_a_symmetric_metric(a in mask_strategy(), b in mask_strategy(), m in mask_strategy()) {
        let hd = |x: &[u8], y: &[u8]| hausdorff(x, y, 10, 10, 1, 100.0).unwrap();
        if let (Some(ab), Some(bm), Some(am)) = (hd(&a, &b), hd(&b, &m), hd(&a, &m)) {
            prop_assert_eq!(Some(ab), hd(&b, &a));
            prop_assert_eq!(hd(&a, &a), Some(0.0));
            prop_assert!(am <= ab + bm + 1e-12);
        }
    }
}
