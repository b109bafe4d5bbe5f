use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channels whose activation or weight magnitude falls below this keep a
/// divisor of 1.
pub const SMOOTH_ABSMAX_FLOOR: f32 = 1e-8;

/// SmoothQuant migration for one `d_in × d_out` weight.
///
/// Returns `(div ⊙ W, div)` with `div_j = a_j^α / max|W_j|^(1−α)` over input
/// channel `j`, so that `(X / div) · (div ⊙ W) = X · W`.
pub fn smooth_migrate(weight: &Tensor, act_absmax: &[f32], alpha: f32) -> Result<(Tensor, Tensor)> {
    let (mut ws, div) = smooth_migrate_shared(&[weight], act_absmax, alpha)?;
    Ok((ws.remove(0), div))
}

/// Migration for several weights that consume the same activation; the
/// weight magnitude of channel `j` is the maximum over all of them.
pub fn smooth_migrate_shared(weights: &[&Tensor], act_absmax: &[f32], alpha: f32) -> Result<(Vec<Tensor>, Tensor)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("migration strength must be in [0, 1], got {alpha}")));
    }
    let d_in = act_absmax.len();
    let mut w_absmax = vec![0.0f32; d_in];
    for w in weights {
        if w.shape().len() != 2 || w.shape()[0] != d_in {
            return Err(Error::shape("smooth_migrate", w.shape(), &[d_in]));
        }
        for (j, m) in w_absmax.iter_mut().enumerate() {
            *m = w.row(j).iter().fold(*m, |acc, x| acc.max(x.abs()));
        }
    }
    let div: Vec<f32> = act_absmax
        .iter()
        .zip(&w_absmax)
        .map(|(&a, &w)| {
            if a < SMOOTH_ABSMAX_FLOOR || w < SMOOTH_ABSMAX_FLOOR {
                1.0
            } else {
                ((a as f64).powf(alpha as f64) / (w as f64).powf(1.0 - alpha as f64)) as f32
            }
        })
        .collect();
    let scaled = weights
        .iter()
        .map(|w| {
            let cols = w.shape()[1];
            Tensor::from_fn(w.shape(), |i| w.data()[i] * div[i / cols])
        })
        .collect();
    Ok((scaled, Tensor::from_parts(vec![d_in], div)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_case_is_identity() {
        let w = Tensor::new(&[2, 2], vec![1.0, -0.5, 0.25, -1.0]).unwrap();
        let (ws, div) = smooth_migrate(&w, &[1.0, 1.0], 0.8).unwrap();
        assert_eq!(div.data(), &[1.0, 1.0]);
        assert_eq!(ws, w);
    }

    #[test]
    fn half_strength_substitution() {
        let w = Tensor::new(&[1, 2], vec![1.0, -0.3]).unwrap();
        let (_, div) = smooth_migrate(&w, &[4.0], 0.5).unwrap();
        assert!((div.data()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn zero_channel_guard_and_alpha_range() {
        let w = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        let (_, div) = smooth_migrate(&w, &[0.0, 9.0], 0.8).unwrap();
        assert_eq!(div.data()[0], 1.0);
        assert!(smooth_migrate(&w, &[1.0, 1.0], 1.5).is_err());
        assert!(smooth_migrate(&w, &[1.0, 1.0], -0.1).is_err());
    }

    #[test]
    fn preserves_fp_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[8, 8], |i| rng.random_range(-1.0..1.0) * if i % 8 == 3 { 30.0 } else { 1.0 });
        let w = Tensor::from_fn(&[8, 8], |_| rng.random_range(-1.0..1.0));
        let absmax: Vec<f32> = (0..8)
            .map(|j| (0..8).map(|r| x.data()[r * 8 + j].abs()).fold(0.0, f32::max))
            .collect();
        let (ws, div) = smooth_migrate(&w, &absmax, 0.8).unwrap();
        let xs = Tensor::from_fn(x.shape(), |i| x.data()[i] / div.data()[i % 8]);
        let a = matmul(&x, &w).unwrap();
        let b = matmul(&xs, &ws).unwrap();
        let num: f64 = a.data().iter().zip(b.data()).map(|(p, q)| ((p - q) as f64).powi(2)).sum();
        let den: f64 = a.data().iter().map(|p| (*p as f64).powi(2)).sum();
        assert!((num / den).sqrt() < 1e-5);
    }
}
