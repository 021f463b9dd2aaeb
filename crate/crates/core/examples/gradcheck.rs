//! Finite-difference gradient checks for every layer kind.
//!
//! `cargo run --release --example gradcheck`

use adhd_eeg::nn::gradcheck::{check_case, random_case, LayerKind};
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = SplitMix64::seed_from_u64(1);
    for kind in LayerKind::ALL {
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for trial in 0..10 {
            let case = random_case(kind, &mut rng);
            let r = check_case(&case, trial)?;
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
        }
        println!("{:<16} {checked:>6} partials  max rel error {worst:.2e}", format!("{kind:?}"));
    }
    Ok(())
}
