mod common;

use std::collections::HashSet;

use common::{bits, random_memory, small_arch};
use memvae::data::{synth_pattern_corpus, Split, SynthSpec};
use memvae::eval::classify::label_scores;
use memvae::eval::gradcheck::check_gradients;
use memvae::eval::inspect::write_histogram;
use memvae::eval::sweep::{read_sweep_csv, write_sweep_csv};
use memvae::eval::{
    eval_nll, fewshot_classify, gradcheck_suite, inspect_posterior, memory_sweep, ClassifyRule, SWEEP_HEADER,
};
use memvae::memory::MemoryBuffer;
use memvae::models::{BaselineVae, MemVae};
use memvae::rng_from_seed;
use memvae::tensor::{ParamId, ParamStore, Tensor};

fn corpus(classes: usize, per: usize, seed: u64) -> memvae::data::Dataset {
    let spec = SynthSpec {
        n_classes: classes,
        per_class: per,
        width: 4,
        height: 4,
        ..SynthSpec::default()
    };
    synth_pattern_corpus(&spec, Split::Test, &mut rng_from_seed(seed)).unwrap()
}

#[test]
fn eval_is_seeded_and_reports_the_mean_of_its_examples() {
    let mut rng = rng_from_seed(1);
    let model = MemVae::new(small_arch(8, 2), &mut rng);
    let mem = random_memory(5, 8, &mut rng);
    let x = bits(8 * 11, &mut rng);
    let labels: Vec<usize> = (0..11).map(|i| i % 3).collect();
    let a = eval_nll(&model, Some(&mem), &x, Some(&labels), 16, &mut rng_from_seed(9)).unwrap();
    let b = eval_nll(&model, Some(&mem), &x, Some(&labels), 16, &mut rng_from_seed(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.n, a.k, a.per_example.len()), (11, 16, 11));
    let mean = a.per_example.iter().sum::<f64>() / 11.0;
    assert!((a.nll - mean).abs() < 1e-12);
    assert_eq!(a.per_class.iter().map(|c| c.2).sum::<usize>(), 11);
    assert!(a.per_example.iter().all(|v| v.is_finite() && *v > 0.0));

    let vae = BaselineVae::new(small_arch(8, 2), &mut rng).unwrap();
    let r = eval_nll(&vae, None, &x, None, 4, &mut rng).unwrap();
    assert_eq!(r.kl_a, 0.0);
    assert!(r.per_class.is_empty());
}

#[test]
fn sweep_never_places_a_target_in_memory_and_round_trips_as_csv() {
    let ds = corpus(6, 8, 2);
    let mut rng = rng_from_seed(3);
    let model = MemVae::new(small_arch(16, 2), &mut rng);
    let res = memory_sweep(&model, &ds, &[1, 2, 4], &[1, 3], 2, 4, &mut rng).unwrap();
    assert_eq!(res.rows.len(), 6);
    assert_eq!(res.targets.len(), 4 * 2);
    let targets: HashSet<usize> = res.targets.iter().copied().collect();
    assert_eq!(targets.len(), res.targets.len());
    for m in &res.memory_indices {
        assert!(m.iter().all(|i| !targets.contains(i)), "target leaked into memory");
    }
    for n in [1, 3] {
        let rows: Vec<_> = res.rows.iter().filter(|r| r.n == n).collect();
        assert_eq!(rows.iter().map(|r| r.c).collect::<Vec<_>>(), vec![1, 2, 4]);
        assert!((rows[0].ref_log_c - rows[0].nll).abs() < 1e-12);
        assert!((rows[2].ref_log_c - rows[0].nll - 4f64.ln()).abs() < 1e-12);
    }
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &res.rows).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with(&SWEEP_HEADER.join(",")));
    assert_eq!(read_sweep_csv(buf.as_slice()).unwrap(), res.rows);
    assert!(read_sweep_csv("C,N\n1,2\n".as_bytes()).is_err());
    assert!(memory_sweep(&model, &ds, &[7], &[1], 2, 4, &mut rng).is_err());
}

#[test]
fn inspect_is_a_distribution_and_flat_over_identical_rows() {
    let mut rng = rng_from_seed(4);
    let model = MemVae::new(small_arch(6, 2), &mut rng);
    let mem = random_memory(7, 6, &mut rng);
    let x = bits(6, &mut rng);
    let d = inspect_posterior(&model, &mem, &x, 3).unwrap();
    assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(d.top.len(), 3);
    assert!(d.top.windows(2).all(|w| w[0].1 >= w[1].1));
    let max = d.probs.iter().cloned().fold(0.0, f64::max);
    assert_eq!(d.top[0].1, max);

    let row = bits(6, &mut rng);
    let same = MemoryBuffer::from_rows(&vec![row; 4], Some(vec![3, 1, 4, 1])).unwrap();
    let d = inspect_posterior(&model, &same, &x, 10).unwrap();
    assert!(d.probs.iter().all(|p| (p - 0.25).abs() < 1e-12));
    assert_eq!(d.top.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);

    let mut csv = Vec::new();
    write_histogram(&mut csv, &d, same.labels()).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(2).unwrap().ends_with(",1"));
    let mut csv = Vec::new();
    write_histogram(&mut csv, &d, None).unwrap();
    assert!(String::from_utf8(csv).unwrap().lines().nth(1).unwrap().ends_with(','));
}

#[test]
fn feedforward_scores_aggregate_the_posterior_by_label() {
    let mut rng = rng_from_seed(5);
    let model = MemVae::new(small_arch(6, 2), &mut rng);
    let rows: Vec<Vec<f64>> = (0..5).map(|_| bits(6, &mut rng)).collect();
    let labels = vec![2, 0, 2, 1, 0];
    let mem = MemoryBuffer::from_rows(&rows, Some(labels.clone())).unwrap();
    let x = bits(6 * 9, &mut rng);
    let q = model.address_posterior_probs(&mem, &x, 9).unwrap();
    let scores = label_scores(&model, &mem, &x, ClassifyRule::Feedforward, 4, &mut rng).unwrap();
    for (qb, sb) in q.iter().zip(&scores) {
        for (&l, &s) in sb {
            let want: f64 = qb.iter().zip(&labels).filter(|(_, &la)| la == l).map(|(p, _)| p).sum();
            assert!((s - want).abs() < 1e-12);
        }
    }
    for rule in [ClassifyRule::Feedforward, ClassifyRule::Weighted] {
        let s = label_scores(&model, &mem, &x, rule, 8, &mut rng).unwrap();
        assert!(s.iter().all(|m| (m.values().sum::<f64>() - 1.0).abs() < 1e-9));
    }
}

#[test]
fn classification_edge_cases() {
    let mut rng = rng_from_seed(6);
    let model = MemVae::new(small_arch(6, 2), &mut rng);
    let x = bits(6 * 4, &mut rng);

    let one = MemoryBuffer::from_rows(&[bits(6, &mut rng), bits(6, &mut rng)], Some(vec![7, 7])).unwrap();
    for rule in [ClassifyRule::Feedforward, ClassifyRule::Weighted] {
        let r = fewshot_classify(&model, &one, &x, &[7; 4], rule, 4, &mut rng).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!((r.way, r.shot), (1, 2));
    }

    let row = bits(6, &mut rng);
    let tied = MemoryBuffer::from_rows(&[row.clone(), row], Some(vec![5, 3])).unwrap();
    let r = fewshot_classify(&model, &tied, &x, &[3, 3, 5, 5], ClassifyRule::Feedforward, 4, &mut rng).unwrap();
    assert_eq!(r.predictions, vec![3; 4]);
    assert_eq!(r.accuracy, 0.5);

    let unlabeled = random_memory(3, 6, &mut rng);
    assert!(fewshot_classify(&model, &unlabeled, &x, &[0; 4], ClassifyRule::Feedforward, 4, &mut rng).is_err());
    assert!(fewshot_classify(&model, &one, &x, &[7; 3], ClassifyRule::Feedforward, 4, &mut rng).is_err());
}

#[test]
fn gradcheck_suite_passes_and_catches_a_detached_branch() {
    for seed in 0..3 {
        for (name, _, r) in gradcheck_suite(1e-4, &mut rng_from_seed(seed)).unwrap() {
            assert!(r.passed(), "{name}: {r:?}");
        }
    }

    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![0.3, -0.7, 1.1]).with_grad());
    let honest = check_gradients(&store, None, 1e-4, |tape, p, _| {
        let w = p[ParamId(0)];
        let sq = tape.mul(w, w)?;
        let t = tape.tanh(w)?;
        let s = tape.add(sq, t)?;
        Ok(tape.sum_all(s)?)
    })
    .unwrap();
    assert!(honest.passed(), "{honest:?}");
    let broken = check_gradients(&store, None, 1e-4, |tape, p, _| {
        let w = p[ParamId(0)];
        let sq = tape.mul(w, w)?;
        let sq = tape.stop_gradient(sq);
        let t = tape.tanh(w)?;
        let s = tape.add(sq, t)?;
        Ok(tape.sum_all(s)?)
    })
    .unwrap();
    assert!(!broken.passed(), "a detached term must be detected");
    assert_eq!(broken.worst_param, "w");
}
