//! Invert a reference model: simulate `y = M g`, then recover `g` from `y`
//! with the left inverse. The last `relative_degree` samples need future
//! outputs and stay unavailable.

use lpvdd::refmodel::{left_inverse, simulate, virtual_reference, LpvStateSpace};
use lpvdd::signals::SampledSignal;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::error::Error;

fn main() -> Result<(), Box<dyn Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 400;
    let g: Vec<f64> = Normal::new(0.0, 1.0)?.sample_iter(&mut rng).take(n).collect();
    let g_sig = SampledSignal::new(g.clone(), 0.01)?;
    let p = SampledSignal::constant(0.0, n, 0.01)?;

    for pole in [0.99, 0.95] {
        let model = LpvStateSpace::unit_gain_first_order(pole);
        let (y, _) = simulate(&model, &g_sig, &p, &DVector::zeros(model.n_x()))?;
        let filter = left_inverse(&model)?;
        let back = virtual_reference(&filter, &y, &p)?;
        let d = filter.relative_degree();
        let err = (0..n - d).filter_map(|k| back.get(k).map(|v| (v - g[k]).abs())).fold(0.0, f64::max);
        let missing = (0..n).filter(|&k| back.get(k).is_none()).count();
        println!("pole {pole}: relative degree {d}, max error {err:.2e}, {missing} trailing samples unavailable");
    }
    Ok(())
}
