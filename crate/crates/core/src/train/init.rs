use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::StackConfig;
use crate::error::Result;
use crate::params::ParamKind;
use crate::recurrent::StackModel;
use crate::tensor::Tensor;

/// A `[rows, cols]` matrix with orthonormal rows (when `rows <= cols`) or
/// orthonormal columns (otherwise), from a Gaussian draw orthogonalized by
/// modified Gram-Schmidt.
pub fn orthogonal_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let (n, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        // two passes keep the result orthogonal to machine precision
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let flat: Vec<f64> = basis.into_iter().flatten().collect();
    let m = Tensor::matrix(n, len, flat).expect("orthogonal shape");
    if rows <= cols {
        m
    } else {
        m.transpose()
    }
}

/// Initializes a model: orthogonal weight matrices, zero biases and shifts,
/// unit LN scales.
pub fn init_model(cfg: StackConfig, seed: u64) -> Result<StackModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    StackModel::build(cfg, |_, shape, kind| {
        Ok(match kind {
            ParamKind::Weight => orthogonal_init(shape[0], shape[1], &mut rng),
            ParamKind::Bias => Tensor::zeros(shape),
            ParamKind::Scale => Tensor::full(shape, 1.0),
        })
    })
}
