#![allow(dead_code)]

use lipcert::model::{ActivationSpec, DeqParams, Model, NodeParams, SingleResidualParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian matrix with entries of variance `1 / cols`.
pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let s = 1.0 / (cols as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal) * s)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.1)
}

pub fn even_width(rng: &mut ChaCha8Rng, max: usize) -> usize {
    2 * rng.random_range(1..=max / 2)
}

/// Feedforward net with `depth` weight matrices and the given widths `n0..n_l`.
pub fn feedforward(rng: &mut ChaCha8Rng, widths: &[usize], act: ActivationSpec) -> Model {
    let layers = widths
        .windows(2)
        .map(|w| (gaussian(rng, w[1], w[0]), gaussian_vec(rng, w[1])))
        .collect();
    Model::feedforward(layers, Some(act)).unwrap()
}

/// Random MaxMin net: `depth` weight matrices, even hidden widths up to `max_width`.
pub fn random_maxmin(rng: &mut ChaCha8Rng, depth: usize, max_width: usize, n_out: usize) -> Model {
    let mut widths = vec![rng.random_range(2..=max_width)];
    for _ in 1..depth {
        widths.push(even_width(rng, max_width));
    }
    widths.push(n_out);
    feedforward(rng, &widths, ActivationSpec::maxmin())
}

pub fn random_single_residual(rng: &mut ChaCha8Rng, n: usize, hidden: usize) -> Model {
    Model::single_residual(
        SingleResidualParams {
            h1: gaussian(rng, n, n),
            g1: gaussian(rng, n, hidden),
            w1: gaussian(rng, hidden, n),
            b1: gaussian_vec(rng, hidden),
        },
        ActivationSpec::maxmin(),
    )
    .unwrap()
}

pub fn random_deq(rng: &mut ChaCha8Rng, d: usize, n: usize, m: usize, w_norm: f64) -> Model {
    let w = gaussian(rng, d, d);
    let w = &w * (w_norm / lipcert::linalg::sigma_max(&w));
    Model::deq(
        DeqParams { w, u: gaussian(rng, d, n), w_out: gaussian(rng, m, d), b_z: gaussian_vec(rng, d), b_y: DVector::zeros(m) },
        ActivationSpec::maxmin(),
    )
    .unwrap()
}

pub fn random_node(rng: &mut ChaCha8Rng, n: usize) -> Model {
    Model::node(
        NodeParams {
            g: gaussian(rng, n, n),
            w0: gaussian(rng, n, n),
            w1: gaussian_vec(rng, n),
            b0: gaussian_vec(rng, n),
            b1: gaussian_vec(rng, n),
            t_final: 1.0,
        },
        ActivationSpec::maxmin(),
    )
    .unwrap()
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}
