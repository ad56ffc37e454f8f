use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbdseg::data::{generate_splits, load_split, write_dataset, SceneSpec, Split};
use rgbdseg::netpbm::{read_pgm, write_pgm, Image};

#[test]
fn same_index_same_sample() {
    let spec = SceneSpec { seed: 3, ..SceneSpec::default() };
    for i in [0, 1, 99] {
        assert_eq!(spec.generate(i).unwrap(), spec.generate(i).unwrap());
    }
    let other = SceneSpec { seed: 4, ..spec.clone() };
    assert_ne!(spec.generate(0).unwrap(), other.generate(0).unwrap());
}

#[test]
fn samples_are_well_formed() {
    let spec = SceneSpec::default();
    for i in 0..50 {
        let s = spec.generate(i).unwrap();
        assert_eq!(s.rgb.shape(), &[64, 64, 3]);
        assert_eq!(s.disparity.shape(), &[64, 64, 1]);
        assert_eq!(s.labels.len(), 64 * 64);
        let classes: BTreeSet<usize> = s.labels.iter().copied().collect();
        assert!(classes.len() >= 2);
        assert!(classes.iter().all(|&c| c < 4));
        assert!(s.disparity.data().iter().all(|&d| d >= 0.0 && d <= 128.0 && d.fract() == 0.0));
    }
}

#[test]
fn noise_free_disparity_has_one_value_per_plane() {
    for planes in [3, 4] {
        let spec = SceneSpec {
            depth_planes: planes,
            speckle: 0.0,
            dropout: 0.0,
            ..SceneSpec::default()
        };
        for i in 0..20 {
            let s = spec.generate(i).unwrap();
            let values: BTreeSet<u64> = s.disparity.data().iter().map(|&d| d as u64).collect();
            assert_eq!(values.len(), planes);
        }
    }
}

#[test]
fn degenerate_specs_rejected() {
    for spec in [
        SceneSpec { height: 0, ..SceneSpec::default() },
        SceneSpec { num_classes: 1, ambiguity: false, ..SceneSpec::default() },
        SceneSpec { min_objects: 4, max_objects: 2, ..SceneSpec::default() },
        SceneSpec { dropout: 1.0, ..SceneSpec::default() },
    ] {
        assert!(spec.generate(0).is_err());
    }
}

type ColourKey = [u8; 3];

/// 16 levels per channel keeps every bin well populated.
fn colour_key(rgb: &[f64]) -> ColourKey {
    [0, 1, 2].map(|c| ((rgb[c] * 255.0).round() as u8) / 16)
}

/// Balanced accuracy of a per-pixel colour histogram classifier separating
/// classes 1 and 2, fitted on the first half of `count` samples and scored
/// on the second half.
fn histogram_balanced_accuracy(spec: &SceneSpec, count: u64) -> f64 {
    let mut hist: HashMap<ColourKey, [u64; 2]> = HashMap::new();
    let mut prior = [0u64; 2];
    let pixels = |i: u64| {
        let s = spec.generate(i).unwrap();
        s.labels
            .iter()
            .zip(s.rgb.data().chunks(3))
            .filter(|(&c, _)| c == 1 || c == 2)
            .map(|(&c, rgb)| (c - 1, colour_key(rgb)))
            .collect::<Vec<_>>()
    };
    for i in 0..count / 2 {
        for (c, key) in pixels(i) {
            hist.entry(key).or_default()[c] += 1;
            prior[c] += 1;
        }
    }
    // maximum-likelihood decision (equal priors), the balanced-accuracy optimum
    let decide = |key: &ColourKey| {
        let [a, b] = hist.get(key).copied().unwrap_or_default();
        let (la, lb) = (a as f64 / prior[0] as f64, b as f64 / prior[1] as f64);
        usize::from(lb > la)
    };
    let mut correct = [0u64; 2];
    let mut total = [0u64; 2];
    for i in count / 2..count {
        for (c, key) in pixels(i) {
            total[c] += 1;
            if decide(&key) == c {
                correct[c] += 1;
            }
        }
    }
    0.5 * (correct[0] as f64 / total[0] as f64 + correct[1] as f64 / total[1] as f64)
}

#[test]
fn ambiguous_pair_is_not_separable_by_colour() {
    let spec = SceneSpec::default();
    let acc = histogram_balanced_accuracy(&spec, 1000);
    assert!(acc <= 0.52, "balanced accuracy {acc}");
    let control = SceneSpec { ambiguity: false, ..spec };
    assert!(histogram_balanced_accuracy(&control, 100) > 0.99);
}

#[test]
fn dropout_rate_within_three_sigma() {
    let spec = SceneSpec { dropout: 0.05, ..SceneSpec::default() };
    let mut zeros = 0u64;
    let mut n = 0u64;
    for i in 0..25 {
        let s = spec.generate(i).unwrap();
        zeros += s.disparity.data().iter().filter(|&&d| d == 0.0).count() as u64;
        n += s.disparity.numel() as u64;
    }
    assert!(n >= 100_000);
    let p = spec.dropout;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((zeros as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{zeros} of {n}");
    let clean = SceneSpec { dropout: 0.0, ..spec };
    assert!(clean.generate(0).unwrap().disparity.data().iter().all(|&d| d > 0.0));
}

#[test]
fn split_is_a_function_of_seed_and_index() {
    let spec = SceneSpec::default();
    let a: Vec<Split> = (0..200).map(|i| spec.split_of(i)).collect();
    let b: Vec<Split> = (0..200).rev().map(|i| spec.split_of(i)).rev().collect();
    assert_eq!(a, b);
    let val = a.iter().filter(|&&s| s == Split::Val).count();
    assert!((20..=60).contains(&val), "{val} val of 200");
    let (t, v) = spec.split_indices(30, 10);
    assert_eq!((t.len(), v.len()), (30, 10));
    assert!(t.iter().all(|&i| spec.split_of(i) == Split::Train));
    assert!(v.iter().all(|&i| spec.split_of(i) == Split::Val));
}

#[test]
fn hflip_is_an_involution() {
    let s = SceneSpec::default().generate(5).unwrap();
    let f = s.hflip();
    assert_ne!(f, s);
    assert_eq!(f.hflip(), s);
    assert_eq!(f.labels[0], s.labels[63]);
}

#[test]
fn p6_byte_fixture() {
    let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
    bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
    let img = Image::decode(&bytes).unwrap();
    assert_eq!((img.width, img.height, img.channels, img.maxval), (2, 2, 3, 255));
    assert_eq!(img.data, vec![255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
    assert_eq!(Image::decode(&img.encode()).unwrap(), img);
    assert!(Image::decode(&bytes[..bytes.len() - 1]).is_err());
    assert!(Image::decode(b"P3\n2 2\n255\n").is_err());
    assert!(Image::decode(b"P6\n2 x\n255\n").is_err());
}

#[test]
fn netpbm_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (channels, maxval) in [(1, 255u16), (1, 65535), (3, 255), (1, 1000)] {
        let (w, h) = (rng.random_range(1..9), rng.random_range(1..9));
        let data = (0..w * h * channels).map(|_| rng.random_range(0..=maxval)).collect();
        let img = Image::new(w, h, channels, maxval, data).unwrap();
        assert_eq!(Image::decode(&img.encode()).unwrap(), img);
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.pgm");
    let deep = Image::new(3, 1, 1, 65535, vec![0, 40000, 65535]).unwrap();
    write_pgm(&p, &deep).unwrap();
    assert_eq!(read_pgm(&p).unwrap().data, vec![0, 40000, 65535]);
    assert!(Image::new(1, 1, 1, 255, vec![256]).is_err());
}

#[test]
fn dataset_disk_round_trip() {
    let spec = SceneSpec { height: 32, width: 32, ..SceneSpec::default() };
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &spec, 6, 2).unwrap();
    let (train, val) = generate_splits(&spec, 6, 2).unwrap();
    assert_eq!(load_split(dir.path(), Split::Train).unwrap(), train);
    assert_eq!(load_split(dir.path(), Split::Val).unwrap(), val);
    assert!(dir.path().join("dataset.txt").exists());
}
