//! Fixtures shared by the benchmarks.

use koopreach::experiment::{duffing_config, fit, generate_data};
use koopreach::{HPolytope, KoopmanModel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` tangent halfspaces of the unit sphere in `d` dimensions plus a few
/// far-away redundant ones, like the raw output of an elimination step.
pub fn sphere_cuts(d: usize, n: usize, seed: u64) -> HPolytope {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n * d);
    let mut offsets = Vec::with_capacity(n);
    for i in 0..n {
        let v = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let v = v.normalize();
        rows.extend(v.iter().copied());
        offsets.push(if i % 3 == 0 { 1.5 } else { 1.0 });
    }
    HPolytope::new(DMatrix::from_row_slice(n, d, &rows), DVector::from_vec(offsets)).expect("valid rows")
}

/// Global Duffing model from the preset configuration.
pub fn duffing_model() -> KoopmanModel {
    let cfg = duffing_config();
    let data = generate_data(&cfg).expect("duffing data");
    fit(&cfg, &data).expect("duffing fit").0
}
