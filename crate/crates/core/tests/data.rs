use std::collections::HashSet;
use std::fs;

use memvae::data::idx::{encode_idx, parse_idx, IdxArray, IdxType};
use memvae::data::{
    load_class_dirs, load_idx_dataset, pgm, sample_episode, synth_pattern_corpus, test_memory_sweep, Binarize,
    EpisodeSpec, Split, SynthSpec,
};
use memvae::rng_from_seed;
use proptest::prelude::*;
use rand::Rng as _;

fn images(n: usize, rows: usize, cols: usize, seed: u64) -> IdxArray {
    let mut rng = rng_from_seed(seed);
    IdxArray {
        dtype: IdxType::U8,
        dims: vec![n, rows, cols],
        data: (0..n * rows * cols).map(|_| f64::from(rng.random::<u8>())).collect(),
    }
}

fn labels(ids: &[usize]) -> IdxArray {
    IdxArray {
        dtype: IdxType::U8,
        dims: vec![ids.len()],
        data: ids.iter().map(|&i| i as f64).collect(),
    }
}

#[test]
fn idx_files_load_as_thresholded_images_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let img = images(5, 3, 4, 1);
    fs::write(dir.path().join("img.idx"), encode_idx(&img)).unwrap();
    fs::write(dir.path().join("lab.idx"), encode_idx(&labels(&[0, 1, 1, 2, 0]))).unwrap();
    let ds = load_idx_dataset(
        &dir.path().join("img.idx"),
        Some(&dir.path().join("lab.idx")),
        Split::Test,
        Binarize::Threshold,
        &mut rng_from_seed(0),
    )
    .unwrap();
    assert_eq!((ds.len(), ds.dim(), ds.side()), (5, 12, (4, 3)));
    assert_eq!(ds.class_ids().unwrap(), &[0, 1, 1, 2, 0]);
    for (i, px) in ds.images().enumerate() {
        for (j, &p) in px.iter().enumerate() {
            let raw = img.data[i * 12 + j] / 255.0;
            assert_eq!(p, f64::from(u8::from(raw >= 0.5)));
        }
    }
}

#[test]
fn label_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("img.idx"), encode_idx(&images(4, 2, 2, 2))).unwrap();
    fs::write(dir.path().join("lab.idx"), encode_idx(&labels(&[0, 1, 2]))).unwrap();
    let r = load_idx_dataset(
        &dir.path().join("img.idx"),
        Some(&dir.path().join("lab.idx")),
        Split::Train,
        Binarize::Threshold,
        &mut rng_from_seed(0),
    );
    assert!(r.is_err());
}

#[test]
fn missing_idx_file_is_an_error() {
    let r = load_idx_dataset(
        std::path::Path::new("/nonexistent/images.idx"),
        None,
        Split::Train,
        Binarize::Threshold,
        &mut rng_from_seed(0),
    );
    assert!(r.is_err());
}

#[test]
fn class_directories_pool_and_number_classes_in_sorted_order() {
    let dir = tempfile::tempdir().unwrap();
    for (name, on) in [("b_class", 1.0), ("a_class", 0.0)] {
        let d = dir.path().join(name);
        fs::create_dir(&d).unwrap();
        for i in 0..2 {
            let mut px = vec![0.0; 16];
            px[0] = on;
            let img = pgm::GrayImage {
                width: 4,
                height: 4,
                pixels: px,
            };
            pgm::write_pgm(&d.join(format!("{i}.pgm")), &img).unwrap();
        }
        fs::write(d.join("notes.txt"), "ignored").unwrap();
    }
    let ds = load_class_dirs(dir.path(), 2, false, Split::Train).unwrap();
    assert_eq!((ds.len(), ds.side()), (4, (2, 2)));
    assert_eq!(ds.class_ids().unwrap(), &[0, 0, 1, 1]);
    assert_eq!(ds.image(0), &[0.0, 0.0, 0.0, 0.0]);
    assert_eq!(ds.image(2), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn synthetic_corpus_is_reproducible_and_class_ordered() {
    let spec = SynthSpec::default();
    let a = synth_pattern_corpus(&spec, Split::Train, &mut rng_from_seed(3)).unwrap();
    let b = synth_pattern_corpus(&spec, Split::Train, &mut rng_from_seed(3)).unwrap();
    assert_eq!(a.gather(&(0..a.len()).collect::<Vec<_>>()), b.gather(&(0..b.len()).collect::<Vec<_>>()));
    assert_eq!(a.len(), spec.n_classes * spec.per_class);
    let ids = a.class_ids().unwrap();
    assert!(ids.windows(2).all(|w| w[0] <= w[1]));
    assert!(a.images().flatten().all(|&p| p == 0.0 || p == 1.0));
}

#[test]
fn smallest_sweep_memory_holds_one_example_outside_the_targets() {
    let spec = SynthSpec {
        n_classes: 6,
        per_class: 3,
        ..SynthSpec::default()
    };
    let ds = synth_pattern_corpus(&spec, Split::Test, &mut rng_from_seed(4)).unwrap();
    let exclude: HashSet<usize> = [0, 1, 3, 4].into_iter().collect();
    let mut rng = rng_from_seed(5);
    for _ in 0..50 {
        let s = test_memory_sweep(&ds, 1, 1, &exclude, &mut rng).unwrap();
        assert_eq!(s.memory.len(), 1);
        assert_eq!(s.indices.len(), 1);
        assert!(!exclude.contains(&s.indices[0]));
        assert_eq!(ds.class_of(s.indices[0]), Some(s.classes[0]));
    }
    assert!(test_memory_sweep(&ds, 7, 1, &exclude, &mut rng).is_err());
}

proptest! {
    #[test]
    fn idx_round_trips(n in 1usize..6, r in 1usize..5, c in 1usize..5, seed in 0u64..100) {
        let a = images(n, r, c, seed);
        let back = parse_idx(&encode_idx(&a)).unwrap();
        prop_assert_eq!(back.dims, a.dims);
        prop_assert_eq!(back.data, a.data);
    }

    /// Corrupted buffers either fail to parse or parse to exactly what they encode.
    #[test]
    fn mutated_idx_never_parses_to_wrong_data(
        seed in 0u64..10_000,
        cut in 0usize..64,
        flips in prop::collection::vec((0usize..64, any::<u8>()), 0..4),
        extra in prop::collection::vec(any::<u8>(), 0..4),
    ) {
        let mut bytes = encode_idx(&images(2, 3, 3, seed));
        for (pos, v) in flips {
            let i = pos % bytes.len();
            bytes[i] = v;
        }
        bytes.truncate(bytes.len().saturating_sub(cut % 8));
        bytes.extend(extra);
        if let Ok(arr) = parse_idx(&bytes) {
            prop_assert_eq!(encode_idx(&arr), bytes);
        }
    }

    #[test]
    fn episodes_keep_memory_and_targets_disjoint(seed in 0u64..500, n in 1usize..6, t in 1usize..4, m in 1usize..4) {
        let spec = SynthSpec { n_classes: 8, per_class: 8, ..SynthSpec::default() };
        let ds = synth_pattern_corpus(&spec, Split::Train, &mut rng_from_seed(0)).unwrap();
        let ep = EpisodeSpec { n_classes: n, targets_per_class: t, mem_per_class: m };
        let e = sample_episode(&ds, &ep, &mut rng_from_seed(seed)).unwrap();
        let mem: HashSet<_> = e.memory_indices.iter().collect();
        prop_assert!(e.target_indices.iter().all(|i| !mem.contains(i)));
        prop_assert_eq!(e.memory_indices.len(), n * m);
        prop_assert_eq!(e.target_indices.len(), n * t);
        for (i, l) in e.target_indices.iter().zip(&e.target_labels) {
            prop_assert_eq!(ds.class_of(*i), Some(*l));
            prop_assert!(e.classes.contains(l));
        }
        for (i, l) in e.memory_indices.iter().zip(&e.memory_labels) {
            prop_assert_eq!(ds.class_of(*i), Some(*l));
        }
    }
}
