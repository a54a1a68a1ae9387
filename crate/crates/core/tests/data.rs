mod common;

use common::spec16;
use dseg::io::{self, decode_array, encode_f32, encode_u8, Array};
use dseg::phantom::{generate_case, generate_dataset, split_counts, Label, PhantomSpec, Split};
use dseg::preprocess::{
    clip_normalize, crop_at_landmark, parse_raw_manifest, preprocess_case, resize, run_manifest, write_raw_cases,
    PreprocessConfig, ResizeMode,
};
use dseg::volume::{Grid3, Volume};
use dseg::Error;
use proptest::prelude::*;

fn label_strategy() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Healthy), Just(Label::Disease)]
}

fn grid_strategy(max_side: usize) -> impl Strategy<Value = Grid3> {
    (1..=max_side, 1..=max_side, 1..=max_side).prop_flat_map(|(d, h, w)| {
        prop::collection::vec(-50.0f32..50.0, d * h * w).prop_map(move |v| Grid3::from_vec([d, h, w], v).unwrap())
    })
}

fn median(v: &[f32]) -> f32 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s[s.len() / 2]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn phantoms_are_deterministic_bounded_and_label_consistent(label in label_strategy(), seed in 0u64..10_000) {
        let spec = spec16();
        let a = generate_case(&spec, label, seed).unwrap();
        let b = generate_case(&spec, label, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.volume.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(label == Label::Healthy, a.gt_mask.count_positive() == 0);
        prop_assert!(a.gt_mask.is_binary());
        prop_assert!(a.validate().is_ok());
    }

    #[test]
    fn the_central_organ_outshines_the_background(seed in 0u64..10_000) {
        let spec = PhantomSpec::desk();
        let case = generate_case(&spec, Label::Healthy, seed).unwrap();
        let mut center = Vec::new();
        for z in 15..17 {
            for y in 15..17 {
                for x in 15..17 {
                    center.push(case.volume.get(z, y, x) as f64);
                }
            }
        }
        let mean = center.iter().sum::<f64>() / center.len() as f64;
        let background = median(case.volume.data()) as f64;
        // the dimmest organ reaches 0.6 above the body at its core; allow for
        // the off-center jitter of the organ and noise
        prop_assert!(mean - background > 0.3, "center {mean} background {background}");
    }

    #[test]
    fn containers_round_trip_bit_exactly(g in grid_strategy(5)) {
        let bytes = encode_f32(g.dims(), g.data()).unwrap();
        match decode_array(&bytes).unwrap() {
            Array::F32 { shape, data } => {
                prop_assert_eq!(shape.map(|s| s as usize), g.dims());
                prop_assert!(data.iter().zip(g.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
            other => prop_assert!(false, "unexpected {:?}", other),
        }
        let cut = bytes.len() - 1;
        prop_assert!(matches!(decode_array(&bytes[..cut]), Err(Error::Format(_))));
    }

    #[test]
    fn clip_normalize_is_idempotent_on_unit_clip(g in grid_strategy(4)) {
        let once = clip_normalize(&Volume(g), (0.0, 1.0)).unwrap();
        let twice = clip_normalize(&once, (0.0, 1.0)).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn linear_resize_stays_within_input_range(g in grid_strategy(5), out in 1usize..8) {
        let r = resize(&g, out, ResizeMode::Linear).unwrap();
        let (lo, hi) = g.min_max();
        prop_assert!(r.data().iter().all(|&v| v >= lo - 1e-4 && v <= hi + 1e-4));
    }

    #[test]
    fn resizing_a_constant_gives_a_constant(c in -5.0f32..5.0, side in 1usize..6, out in 1usize..9) {
        let g = Grid3::filled([side; 3], c);
        for mode in [ResizeMode::Linear, ResizeMode::Nearest] {
            let r = resize(&g, out, mode).unwrap();
            prop_assert!(r.data().iter().all(|&v| (v - c).abs() <= 1e-5));
        }
    }

    #[test]
    fn cropping_a_padded_volume_recovers_the_crop(
        g in grid_strategy(6),
        lz in -3i64..9, ly in -3i64..9, lx in -3i64..9,
        size in 1usize..7,
        pad in 0usize..4,
    ) {
        let [d, h, w] = g.dims();
        let mut padded = Grid3::zeros([d + 2 * pad, h + 2 * pad, w + 2 * pad]);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    padded.set(z + pad, y + pad, x + pad, g.get(z, y, x));
                }
            }
        }
        let p = pad as i64;
        let direct = crop_at_landmark(&g, [lz, ly, lx], size);
        let via_pad = crop_at_landmark(&padded, [lz + p, ly + p, lx + p], size);
        prop_assert_eq!(direct, via_pad);
    }
}

#[test]
fn split_example_sixteen_two_two() {
    assert_eq!(split_counts(10, (0.8, 0.1, 0.1)), (8, 1, 1));
    let cases = generate_dataset(&spec16(), 10, 10, (0.8, 0.1, 0.1)).unwrap();
    for (split, n) in [(Split::Train, 16), (Split::Val, 2), (Split::Test, 2)] {
        let part: Vec<_> = cases.iter().filter(|c| c.split == split).collect();
        assert_eq!(part.len(), n, "{split}");
        assert_eq!(part.iter().filter(|c| c.label == Label::Healthy).count(), n / 2);
    }
    assert_eq!(generate_dataset(&spec16(), 10, 10, (0.8, 0.1, 0.1)).unwrap(), cases);
}

#[test]
fn datasets_round_trip_through_disk() {
    let cases = generate_dataset(&spec16(), 3, 3, (0.34, 0.33, 0.33)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    io::write_dataset(dir.path(), &cases).unwrap();
    assert_eq!(io::read_dataset(dir.path()).unwrap(), cases);
    let one = io::read_case(&dir.path().join(&cases[0].case_id)).unwrap();
    assert_eq!(one, cases[0]);
}

#[test]
fn damaged_containers_are_format_errors() {
    let good = encode_u8([2, 1, 1], &[0, 1]).unwrap();
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(decode_array(&magic), Err(Error::Format(_))));
    let mut version = good.clone();
    version[4] = 9;
    assert!(matches!(decode_array(&version), Err(Error::Format(_))));
    let mut dtype = good.clone();
    dtype[6] = 77;
    assert!(matches!(decode_array(&dtype), Err(Error::Format(_))));
    let mut trailing = good;
    trailing.push(0);
    assert!(matches!(decode_array(&trailing), Err(Error::Format(_))));
}

#[test]
fn raw_export_and_preprocessing_recover_the_cases() {
    let cases = generate_dataset(&spec16(), 2, 2, (0.5, 0.5, 0.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_raw_cases(&dir.path().join("raw"), &cases, 15.0).unwrap();
    let rows = parse_raw_manifest(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    let cfg = PreprocessConfig { crop_size: 16, out_size: 16, ..PreprocessConfig::default() };
    let out = run_manifest(&manifest, &cfg, &dir.path().join("pre")).unwrap();
    for (a, b) in out.iter().zip(&cases) {
        assert_eq!(a.gt_mask, b.gt_mask);
        assert_eq!(a.split, b.split);
        let worst = a.volume.data().iter().zip(b.volume.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(worst < 1e-6, "{worst}");
    }
    assert_eq!(io::read_dataset(&dir.path().join("pre")).unwrap(), out);
}

#[test]
fn preprocessing_downsamples_masks_to_binary() {
    let case = generate_case(&PhantomSpec::desk(), Label::Disease, 3).unwrap();
    let mut raw = case.volume.0.clone();
    raw.data_mut().iter_mut().for_each(|v| *v *= 15.0);
    let cfg = PreprocessConfig { crop_size: 32, out_size: 16, ..PreprocessConfig::default() };
    let (v, m) = preprocess_case(&raw, &case.gt_mask, [16, 16, 16], &cfg).unwrap();
    assert_eq!(v.dims(), [16; 3]);
    assert!(m.is_binary());
    assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
    let bad = Grid3::zeros([8; 3]);
    assert!(matches!(preprocess_case(&raw, &bad, [16, 16, 16], &cfg), Err(Error::Data(_))));
}
