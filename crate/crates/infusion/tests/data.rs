use infusion::data::{self, encode_idx, parse_idx, scale_unit, split, toy_two_gaussians, IdxArray, Split};
use infusion::image::{self, grid};
use infusion_core::rng;
use infusion_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

const CENTERS: [[f64; 2]; 2] = [[0.25, 0.25], [0.75, 0.75]];

#[test]
fn idx_round_trip_is_bit_exact() {
    let arr = IdxArray { dims: vec![2, 2, 2], data: vec![0, 1, 127, 128, 200, 254, 255, 9] };
    let bytes = encode_idx(&arr);
    assert_eq!(&bytes[..4], &[0x00, 0x00, 0x08, 0x03]);
    assert_eq!(bytes.len(), 4 + 12 + 8);
    assert_eq!(parse_idx(&bytes).unwrap(), arr);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.idx");
    data::write_idx(&path, &arr).unwrap();
    assert_eq!(data::load_idx(&path).unwrap(), arr);
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn idx_rejects_bad_magic_and_truncation() {
    let arr = IdxArray { dims: vec![2, 2, 2], data: vec![1; 8] };
    let bytes = encode_idx(&arr);
    assert!(parse_idx(&bytes[..bytes.len() - 1]).is_err());
    assert!(parse_idx(&bytes[..10]).is_err());
    let mut wrong = bytes.clone();
    wrong[2] = 0x0d;
    assert!(parse_idx(&wrong).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(parse_idx(&extra).is_err());
    let labels = IdxArray { dims: vec![3], data: vec![4, 5, 6] };
    assert_eq!(parse_idx(&encode_idx(&labels)).unwrap(), labels);
}

#[test]
fn idx_header_mutations_are_rejected_without_panicking() {
    let arr = IdxArray { dims: vec![2, 3, 2], data: (0..12).collect() };
    let bytes = encode_idx(&arr);
    let header = 16;
    let mut r = rng::stream(40, &[]);
    for _ in 0..1000 {
        let mut m = bytes.clone();
        let pos = r.random_range(0..header);
        let flip = r.random_range(1..=255u8);
        m[pos] ^= flip;
        assert!(parse_idx(&m).is_err(), "mutation at {} by {:#x} accepted", pos, flip);
    }
}

proptest! {
    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = parse_idx(&bytes);
    }

    #[test]
    fn idx_round_trip_random(d0 in 0usize..4, d1 in 1usize..5, d2 in 1usize..5, seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[]);
        let data: Vec<u8> = (0..d0 * d1 * d2).map(|_| r.random()).collect();
        let arr = IdxArray { dims: vec![d0, d1, d2], data };
        prop_assert_eq!(parse_idx(&encode_idx(&arr)).unwrap(), arr);
    }
}

#[test]
fn scaled_images_flatten_to_rows() {
    let arr = IdxArray { dims: vec![3, 28, 28], data: vec![255; 3 * 784] };
    let t = scale_unit(&arr).unwrap();
    assert_eq!(t.shape(), &[3, 784]);
    assert!(t.data().iter().all(|&v| v == 1.0));
}

#[test]
fn toy_set_is_balanced_and_inside_the_unit_square() {
    let n = 10_000;
    let ds = toy_two_gaussians(&mut rng::stream(41, &[]), n, CENTERS, 0.05).unwrap();
    assert!(ds.rows.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let first = ds.rows.rows_iter().filter(|p| p[0] + p[1] < 1.0).count();
    let sd = (n as f64 * 0.25).sqrt();
    assert!((first as f64 - n as f64 / 2.0).abs() < 4.0 * sd, "{}", first);
    assert!(toy_two_gaussians(&mut rng::stream(41, &[]), 4, CENTERS, 0.0).is_err());
}

#[test]
fn toy_density_matches_closed_form() {
    let ds = toy_two_gaussians(&mut rng::stream(42, &[]), 10, CENTERS, 0.05).unwrap();
    let g = ds.density.unwrap();
    let v = 0.05f64 * 0.05;
    let norm = 0.5 / (2.0 * std::f64::consts::PI * v);
    let far = norm * (-(0.5f64 * 0.5 * 2.0) / (2.0 * v)).exp();
    assert!((g.log_density(&[0.25, 0.25]) - (norm + far).ln()).abs() < 1e-12);
    assert!((g.log_density(&[0.25, 0.25]) - norm.ln()).abs() < 1e-12);
    // Midpoint: both components at equal distance.
    let mid = 2.0 * norm * (-(0.25f64 * 0.25 * 2.0) / (2.0 * v)).exp();
    assert!((g.log_density(&[0.5, 0.5]) - mid.ln()).abs() < 1e-9);
}

#[test]
fn split_contract() {
    let base = toy_two_gaussians(&mut rng::stream(43, &[]), 101, CENTERS, 0.05).unwrap();
    let all = split(base.clone(), [1.0, 0.0, 0.0], 1).unwrap();
    assert_eq!(all.count(Split::Train), 101);
    let a = split(base.clone(), [0.6, 0.2, 0.2], 7).unwrap();
    let b = split(base.clone(), [0.6, 0.2, 0.2], 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.count(Split::Train), 61);
    assert_eq!(a.count(Split::Valid), 20);
    assert_eq!(a.count(Split::Test), 20);
    let c = split(base.clone(), [0.6, 0.2, 0.2], 8).unwrap();
    assert_ne!(a.splits, c.splits);
    assert!(split(base.clone(), [0.5, 0.2, 0.2], 7).is_err());
    assert!(split(base, [1.2, -0.1, -0.1], 7).is_err());
}

#[test]
fn splits_are_disjoint_and_exhaustive() {
    let base = toy_two_gaussians(&mut rng::stream(44, &[]), 57, CENTERS, 0.05).unwrap();
    let ds = split(base.clone(), [0.5, 0.25, 0.25], 3).unwrap();
    let mut rows: Vec<Vec<u64>> = [Split::Train, Split::Valid, Split::Test]
        .iter()
        .flat_map(|&s| ds.subset(s).rows_iter().map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>())
        .collect();
    let mut orig: Vec<Vec<u64>> = base.rows.rows_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort();
    orig.sort();
    assert_eq!(rows, orig);
}

#[test]
fn mnist_loader_splits_scales_and_downsamples() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng::stream(45, &[]);
    for (name, n) in data::MNIST_FILES.iter().zip([60usize, 12]) {
        let arr = IdxArray { dims: vec![n, 28, 28], data: (0..n * 784).map(|_| r.random()).collect() };
        data::write_idx(&dir.path().join(name), &arr).unwrap();
    }
    let full = data::mnist(dir.path(), None, data::Limits::default(), 5).unwrap();
    assert_eq!((full.count(Split::Train), full.count(Split::Valid), full.count(Split::Test)), (50, 10, 12));
    assert_eq!(full.image_shape, Some((28, 28)));
    assert!(full.rows.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let small = data::mnist(dir.path(), Some(8), data::Limits { train: Some(20), valid: Some(5), test: None }, 5).unwrap();
    assert_eq!(small.dim(), 64);
    assert_eq!((small.count(Split::Train), small.count(Split::Valid), small.count(Split::Test)), (20, 5, 12));
    assert_eq!(small, data::mnist(dir.path(), Some(8), data::Limits { train: Some(20), valid: Some(5), test: None }, 5).unwrap());
    assert!(data::mnist(&dir.path().join("missing"), None, data::Limits::default(), 5).is_err());
}

#[test]
fn grid_writer_is_deterministic_and_clamps() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = Tensor::matrix(2, 4, vec![0.5, 1.7, -3.0, 0.25, 0.0, 1.0, 2.0, 0.75]).unwrap();
    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    image::write_grid(&a, &imgs, 1, 2, (2, 2)).unwrap();
    image::write_grid(&b, &imgs, 1, 2, (2, 2)).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let g = grid(&imgs, 1, 2, (2, 2)).unwrap();
    assert_eq!(g.pixels, vec![128, 255, 0, 255, 0, 64, 255, 191]);
    let mut bigger = imgs.clone();
    bigger.data_mut()[1] = 1e6;
    assert_eq!(grid(&bigger, 1, 2, (2, 2)).unwrap(), g);
    assert!(image::write_grid(&a, &imgs, 2, 2, (2, 2)).is_err());
}
