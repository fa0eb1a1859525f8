//! Instance generators shared by the integration tests.
#![allow(dead_code)]

use divt::embedding_io::{square_grid, synth_clustered, SynthSpec};
use divt::matrix::Matrix;
use divt::PatchSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const THETAS: [f64; 5] = [0.3, 0.5, 0.65, 0.75, 0.8];

/// Which family a random instance is drawn from.
#[derive(Debug, Clone, Copy)]
pub enum Family {
    /// Planted clusters with Gaussian noise and random row scaling.
    Planted,
    /// Entries in {-1, 0, 1}: many exact similarity and degree ties, some zero rows.
    Lattice,
    /// Independent uniform entries.
    Uniform,
}

pub fn family(i: u64) -> Family {
    match i % 3 {
        0 => Family::Planted,
        1 => Family::Lattice,
        _ => Family::Uniform,
    }
}

/// A random patch set with `n ≤ max_n` and `d ≤ max_d`, fully determined by `seed`.
pub fn random_patch_set(seed: u64, max_n: usize, max_d: usize) -> PatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_n);
    let d = rng.random_range(1..=max_d);
    patch_set_of(family(seed), n, d, &mut rng)
}

pub fn patch_set_of(family: Family, n: usize, d: usize, rng: &mut ChaCha8Rng) -> PatchSet {
    let (h, w) = square_grid(n);
    match family {
        Family::Planted => {
            let k = rng.random_range(1..=n);
            let noise = rng.random_range(0.0..0.6);
            let mut ps = synth_clustered(&SynthSpec::new(k, n, d, noise, rng.random()))
                .unwrap()
                .patches;
            for i in 0..n {
                let s: f64 = rng.random_range(0.1..10.0);
                ps.data_mut().row_mut(i).iter_mut().for_each(|v| *v *= s);
            }
            ps
        }
        Family::Lattice => {
            let data = (0..n * d).map(|_| rng.random_range(-1i32..=1) as f64).collect();
            PatchSet::new("lattice", h, w, Matrix::from_vec(n, d, data)).unwrap()
        }
        Family::Uniform => {
            let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            PatchSet::new("uniform", h, w, Matrix::from_vec(n, d, data)).unwrap()
        }
    }
}

pub fn theta_for(seed: u64) -> f64 {
    THETAS[(seed / 3 % THETAS.len() as u64) as usize]
}
