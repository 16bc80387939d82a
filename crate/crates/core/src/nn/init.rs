use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::array::Array;
use super::rng::SeedStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Uniform on ±sqrt(6 / (fan_in + fan_out)).
    UniformScaled,
    Zeros,
    Ones,
}

/// Fan-in and fan-out of a parameter shape. Vectors count their length for both.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [.., a, b] => (*a, *b),
    }
}

pub fn uniform_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = fans(shape);
    (6.0 / (fan_in + fan_out).max(1) as f64).sqrt()
}

pub fn seeded_init(shape: &[usize], scheme: InitScheme, seed: SeedStream) -> Array {
    let mut out = Array::zeros(shape);
    match scheme {
        InitScheme::Zeros => {}
        InitScheme::Ones => out.fill(1.0),
        InitScheme::UniformScaled => {
            let bound = uniform_bound(shape);
            let mut rng = seed.rng();
            for v in out.data_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_scheme() {
        let a = seeded_init(&[4, 3], InitScheme::Zeros, SeedStream::new(1));
        assert!(a.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = seeded_init(&[8, 5], InitScheme::UniformScaled, SeedStream::new(11));
        let b = seeded_init(&[8, 5], InitScheme::UniformScaled, SeedStream::new(11));
        let c = seeded_init(&[8, 5], InitScheme::UniformScaled, SeedStream::new(12));
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, c);
    }

    #[test]
    fn bounds_hold_over_many_draws() {
        let shape = [400, 250];
        let bound = (6.0f64 / 650.0).sqrt();
        let a = seeded_init(&shape, InitScheme::UniformScaled, SeedStream::new(3));
        assert_eq!(a.len(), 100_000);
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        // The draws should actually spread across the interval.
        let max = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 0.99 * bound);
    }
}
