use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `n` draws from N(0, std²) truncated at two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f32) -> Vec<f32> {
    let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
    (0..n)
        .map(|_| loop {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}
