//! Seeded synthetic weights and calibration activations for desk-scale runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::distfit::{Family, LAPLACE_UNIT_SCALE, LOGISTIC_UNIT_SCALE};
use crate::error::Result;
use crate::tensorio::{CalibrationSet, WeightTensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One zero-mean, unit-variance draw.
///
/// Laplace and Logistic are built from exponential pairs rather than their
/// inverse CDFs, so generated data never shares a code path with the
/// reference quantile functions it is later compared against.
pub fn draw<R: Rng + ?Sized>(family: Family, rng: &mut R) -> f64 {
    match family {
        Family::Normal => StandardNormal.sample(rng),
        Family::Laplace => {
            let a: f64 = Exp1.sample(rng);
            let b: f64 = Exp1.sample(rng);
            LAPLACE_UNIT_SCALE * (a - b)
        }
        Family::Logistic => {
            // Difference of two standard Gumbel variables is standard logistic.
            let a: f64 = Exp1.sample(rng);
            let b: f64 = Exp1.sample(rng);
            LOGISTIC_UNIT_SCALE * (b.ln() - a.ln())
        }
    }
}

pub fn family_sample(family: Family, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng(seed);
    (0..n).map(|_| draw(family, &mut rng)).collect()
}

/// A `rows x cols` tensor of i.i.d. draws with standard deviation `scale`.
pub fn family_tensor(
    name: &str,
    family: Family,
    rows: usize,
    cols: usize,
    scale: f64,
    seed: u64,
) -> Result<WeightTensor> {
    let mut rng = rng(seed);
    let data = (0..rows * cols).map(|_| (scale * draw(family, &mut rng)) as f32).collect();
    WeightTensor::new(name, rows, cols, data)
}

/// Logistic-mixture weights: each row picks a scale in `[0.5, 2] * base`, and
/// a small fraction of entries come from a component three times wider.
pub fn logistic_mixture_tensor(name: &str, rows: usize, cols: usize, base: f64, seed: u64) -> Result<WeightTensor> {
    let mut rng = rng(seed);
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row_scale = base * rng.random_range(0.5..2.0);
        for _ in 0..cols {
            let wide = rng.random_bool(0.05);
            let s = if wide { 3.0 * row_scale } else { row_scale };
            data.push((s * draw(Family::Logistic, &mut rng)) as f32);
        }
    }
    WeightTensor::new(name, rows, cols, data)
}

/// Gaussian activations; the listed channels are multiplied by `salient_factor`.
pub fn gaussian_calibration(
    layer_name: &str,
    tokens: usize,
    cols: usize,
    salient: &[usize],
    salient_factor: f64,
    seed: u64,
) -> Result<CalibrationSet> {
    let mut rng = rng(seed);
    let mut gain = vec![1.0f64; cols];
    for &c in salient.iter().filter(|&&c| c < cols) {
        gain[c] = salient_factor;
    }
    let data = (0..tokens * cols)
        .map(|i| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * gain[i % cols]) as f32
        })
        .collect();
    CalibrationSet::new(layer_name, tokens, cols, data)
}
