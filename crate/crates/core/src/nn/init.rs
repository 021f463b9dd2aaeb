use rand::Rng;

use super::tensor::{Real, Tensor};

/// He/Kaiming uniform: `U(−b, b)` with `b = √(6 / fan_in)`, the ReLU gain.
pub fn kaiming_uniform<T: Real, R: Rng>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..dims.iter().product::<usize>())
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(dims, data).expect("dims are positive")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::SplitMix64;

    #[test]
    fn bounded_and_seeded() {
        let mut a = SplitMix64::seed_from_u64(1);
        let mut b = SplitMix64::seed_from_u64(1);
        let t: Tensor<f32> = kaiming_uniform(&[8, 3, 3, 3], 27, &mut a);
        let u: Tensor<f32> = kaiming_uniform(&[8, 3, 3, 3], 27, &mut b);
        assert_eq!(t, u);
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }
}
