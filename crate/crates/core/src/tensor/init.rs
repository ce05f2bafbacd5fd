use rand::Rng;

use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    Zeros,
    /// Independent `N(0, std²)` draws.
    Normal { std: f64 },
    /// Uniform in `±sqrt(6 / fan_in)`.
    FanInUniform,
    /// Orthonormal rows (or columns, when there are more rows than columns).
    Orthogonal,
}

/// Fan-in for the layouts used here: `[in, out]` linear weights,
/// `[out, in, kh, kw]` conv kernels, `[n, d]` embedding tables.
fn fan_in(dims: &[usize]) -> usize {
    match dims.len() {
        0 => 1,
        4 => dims[1..].iter().product(),
        _ => dims[0],
    }
}

pub fn init_parameters<R: Rng + ?Sized>(dims: &[usize], scheme: InitScheme, rng: &mut R) -> Result<Tensor> {
    match scheme {
        InitScheme::Zeros => Ok(Tensor::zeros(dims)),
        InitScheme::Normal { std } => {
            let n = dims.iter().product();
            Tensor::new(dims, (0..n).map(|_| std * gaussian(rng)).collect())
        }
        InitScheme::FanInUniform => {
            let bound = (6.0 / fan_in(dims).max(1) as f64).sqrt();
            let n = dims.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(dims, data)
        }
        InitScheme::Orthogonal => {
            let &[rows, cols] = dims else {
                return Err(TensorError::Contract(format!(
                    "orthogonal init needs a rank-2 shape, got {dims:?}"
                )));
            };
            let (vecs, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vecs);
            while basis.len() < vecs {
                let mut v: Vec<f64> = (0..len).map(|_| gaussian(rng)).collect();
                // Two Gram-Schmidt passes keep the result orthonormal to ~1e-15.
                for _ in 0..2 {
                    for b in &basis {
                        let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                        v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    v.iter_mut().for_each(|x| *x /= norm);
                    basis.push(v);
                }
            }
            let mut data = vec![0.0; rows * cols];
            for (i, b) in basis.iter().enumerate() {
                for (j, &x) in b.iter().enumerate() {
                    if rows <= cols {
                        data[i * cols + j] = x;
                    } else {
                        data[j * cols + i] = x;
                    }
                }
            }
            Tensor::new(dims, data)
        }
    }
}

/// Standard normal draw by Box-Muller.
pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = init_parameters(&[4], InitScheme::Zeros, &mut rng).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn same_seed_same_tensor() {
        let a = init_parameters(&[5, 7], InitScheme::FanInUniform, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = init_parameters(&[5, 7], InitScheme::FanInUniform, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.data(), b.data());
        let bound = (6.0f64 / 5.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn conv_fan_in_uses_input_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = init_parameters(&[32, 4, 8, 8], InitScheme::FanInUniform, &mut rng).unwrap();
        let bound = (6.0f64 / 256.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn orthogonal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = init_parameters(&[8, 8], InitScheme::Orthogonal, &mut rng).unwrap();
        let w = t.data();
        for i in 0..8 {
            for j in 0..8 {
                let d: f64 = (0..8).map(|k| w[i * 8 + k] * w[j * 8 + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10, "({i},{j}) = {d}");
            }
        }
    }

    #[test]
    fn orthogonal_requires_rank_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(init_parameters(&[2, 2, 2], InitScheme::Orthogonal, &mut rng).is_err());
    }
}
