//! A class-structured corpus of noisy binary patterns, cheap enough for tests.

use rand::Rng as _;

use super::{Dataset, DataError, Split};
use crate::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub width: usize,
    pub height: usize,
    /// Probability that an example pixel differs from its class template.
    pub flip: f64,
    /// Probability that a template pixel is on.
    pub density: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 32,
            per_class: 20,
            width: 8,
            height: 8,
            flip: 0.05,
            density: 0.5,
        }
    }
}

/// Examples are stored class by class; class ids run from 0.
pub fn synth_pattern_corpus(spec: &SynthSpec, split: Split, rng: &mut Rng) -> Result<Dataset, DataError> {
    if spec.n_classes == 0 {
        return Err(DataError::Insufficient("corpus needs at least one class".into()));
    }
    let dim = spec.width * spec.height;
    let mut pixels = Vec::with_capacity(spec.n_classes * spec.per_class * dim);
    let mut ids = Vec::with_capacity(spec.n_classes * spec.per_class);
    for class in 0..spec.n_classes {
        let template: Vec<bool> = (0..dim).map(|_| rng.random::<f64>() < spec.density).collect();
        for _ in 0..spec.per_class {
            pixels.extend(template.iter().map(|&on| {
                let flip = rng.random::<f64>() < spec.flip;
                f64::from(u8::from(on != flip))
            }));
            ids.push(class);
        }
    }
    Dataset::new(pixels, (spec.width, spec.height), Some(ids), split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    fn hamming(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).filter(|(x, y)| x != y).count() as f64
    }

    #[test]
    fn zero_flip_gives_identical_class_members() {
        let spec = SynthSpec {
            flip: 0.0,
            n_classes: 3,
            per_class: 5,
            ..SynthSpec::default()
        };
        let ds = synth_pattern_corpus(&spec, Split::Train, &mut rng_from_seed(1)).unwrap();
        for (_, idx) in ds.by_class() {
            for &i in &idx {
                assert_eq!(ds.image(i), ds.image(idx[0]));
            }
        }
    }

    #[test]
    fn seeds_give_different_templates_and_are_reproducible() {
        let spec = SynthSpec::default();
        let a = synth_pattern_corpus(&spec, Split::Train, &mut rng_from_seed(1)).unwrap();
        let b = synth_pattern_corpus(&spec, Split::Train, &mut rng_from_seed(2)).unwrap();
        let a2 = synth_pattern_corpus(&spec, Split::Train, &mut rng_from_seed(1)).unwrap();
        assert_ne!(a.image(0), b.image(0));
        assert_eq!(a, a2);
    }

    #[test]
    fn within_class_distance_is_small() {
        let spec = SynthSpec {
            n_classes: 20,
            per_class: 20,
            width: 16,
            height: 16,
            ..SynthSpec::default()
        };
        let ds = synth_pattern_corpus(&spec, Split::Train, &mut rng_from_seed(3)).unwrap();
        let d = ds.dim() as f64;
        let groups = ds.by_class();
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for (c, idx) in &groups {
            for i in 0..idx.len() {
                for j in i + 1..idx.len() {
                    within += hamming(ds.image(idx[i]), ds.image(idx[j]));
                    nw += 1.0;
                }
            }
            for (c2, idx2) in &groups {
                if c2 > c {
                    between += hamming(ds.image(idx[0]), ds.image(idx2[0]));
                    nb += 1.0;
                }
            }
        }
        let (within, between) = (within / nw, between / nb);
        let expect = 2.0 * 0.05 * 0.95 * d;
        // 190 pairs per class x 20 classes; the per-pair sd is about sqrt(expect)
        assert!((within - expect).abs() < 1.0, "within {within} vs {expect}");
        assert!(between > 5.0 * within, "between {between}, within {within}");
    }
}
