//! Shared fixtures for the integration suites: a sub-2k-parameter model,
//! deterministic random data, composed-loss gradient checks, and
//! independent loop-based loss oracles.

#![allow(dead_code)]

use fedssl_core::model::{
    build_model, forward_predictor, forward_projected, ArchitectureSpec, LayerDesc, Phase, Staged,
    INPUT_SIDE,
};
use fedssl_core::params::ParamSet;
use fedssl_core::rng::stream;
use fedssl_core::ssl::{self, FeatureMemory, Method};
use fedssl_core::tensor::{gradcheck, Tape, Tensor};
use rand::Rng;

/// Small two-block architecture (≤ 2k parameters) used wherever a full
/// forward/backward pass must stay cheap enough for finite differences.
pub fn micro_spec(method: Method) -> ArchitectureSpec {
    let proj_dim = 8;
    let predictor = method.uses_predictor().then(|| {
        vec![
            LayerDesc::Dense { inputs: proj_dim, outputs: 4 },
            LayerDesc::Relu,
            LayerDesc::Dense { inputs: 4, outputs: proj_dim },
        ]
    });
    ArchitectureSpec {
        input_channels: 1,
        encoder: vec![
            LayerDesc::Conv { in_ch: 1, out_ch: 2 },
            LayerDesc::BatchNorm { features: 2 },
            LayerDesc::Relu,
            LayerDesc::MaxPool,
            LayerDesc::Conv { in_ch: 2, out_ch: 2 },
            LayerDesc::BatchNorm { features: 2 },
            LayerDesc::Relu,
            LayerDesc::MaxPool,
            LayerDesc::Flatten,
            LayerDesc::Dense { inputs: 2 * 7 * 7, outputs: 6 },
        ],
        feature_dim: 6,
        projector: vec![
            LayerDesc::Dense { inputs: 6, outputs: proj_dim },
            LayerDesc::Relu,
            LayerDesc::Dense { inputs: proj_dim, outputs: proj_dim },
        ],
        predictor,
        allow_bn_free: false,
    }
}

pub fn random_matrix(rows: usize, cols: usize, lo: f64, hi: f64, tag: u64) -> Tensor {
    let mut rng = stream(42, "test-matrix", &[tag]);
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn random_images(batch: usize, tag: u64) -> Tensor {
    let mut rng = stream(42, "test-images", &[tag]);
    let numel = batch * INPUT_SIDE * INPUT_SIDE;
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(vec![batch, 1, INPUT_SIDE, INPUT_SIDE], data).unwrap()
}

/// Rows drawn uniformly then scaled to unit norm.
pub fn random_unit_rows(rows: usize, cols: usize, tag: u64) -> Tensor {
    let raw = random_matrix(rows, cols, -1.0, 1.0, tag);
    let mut data = raw.data().to_vec();
    for i in 0..rows {
        let row = &mut data[i * cols..(i + 1) * cols];
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn trainable_entries(params: &ParamSet) -> (Vec<String>, Vec<Tensor>) {
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, entry) in params.iter() {
        if entry.trainable {
            names.push(name.to_string());
            tensors.push(entry.tensor.clone());
        }
    }
    (names, tensors)
}

/// Gradient-check one SSL objective composed with the micro encoder,
/// differentiating w.r.t. every trainable parameter.
///
/// SimSiam's stop-gradient side and TiCo's feature memory are frozen at
/// their base-parameter values inside the closure: training treats both as
/// constants within a step, so the finite-difference reference must too.
pub fn composed_loss_report(method: Method) -> gradcheck::Report {
    let spec = micro_spec(method);
    let base = build_model(&spec, &mut stream(21, "grad-suite-init", &[method as u64])).unwrap();
    let (names, inputs) = trainable_entries(&base);
    let imgs_a = random_images(4, 100 + method as u64);
    let imgs_b = random_images(4, 200 + method as u64);

    // Base-parameter projections for the paths gradients must not enter.
    let (frozen_z1, frozen_z2) = {
        let mut p = base.clone();
        let mut tape = Tape::new();
        let staged = fedssl_core::model::stage(&mut tape, &base);
        let xa = tape.leaf(imgs_a.clone());
        let z1 = forward_projected(&spec, &mut tape, &staged, xa, &mut Phase::Train(&mut p)).unwrap();
        let xb = tape.leaf(imgs_b.clone());
        let z2 = forward_projected(&spec, &mut tape, &staged, xb, &mut Phase::Train(&mut p)).unwrap();
        (tape.value(z1).clone(), tape.value(z2).clone())
    };
    let frozen_memory = {
        let mut tape = Tape::new();
        let z1 = tape.leaf(frozen_z1.clone());
        let z1n = tape.row_l2_normalize(z1).unwrap();
        let mut memory = FeatureMemory::new(spec.proj_dim().unwrap());
        memory.update(tape.value(z1n), 0.9).unwrap();
        memory.matrix().clone()
    };

    // The 25-weighted objectives evaluate near |loss| ≈ 10..100, where the
    // difference quotient carries roundoff around 1e-9. A 1e-4 floor keeps
    // exact-zero gradients (dead relu units) from amplifying that noise
    // while still flagging any absolute disagreement above 1e-8 there.
    gradcheck::check_with_floor(&inputs, gradcheck::DEFAULT_STEP, 1e-4, |tape, vars| {
        let mut p = base.clone();
        let staged = Staged::from_vars(names.iter().cloned().zip(vars.iter().copied()))?;
        let xa = tape.leaf(imgs_a.clone());
        let z1 = forward_projected(&spec, tape, &staged, xa, &mut Phase::Train(&mut p))?;
        let xb = tape.leaf(imgs_b.clone());
        let z2 = forward_projected(&spec, tape, &staged, xb, &mut Phase::Train(&mut p))?;
        match method {
            Method::SimClr => ssl::info_nce(tape, z1, z2, 0.5),
            Method::Barlow => ssl::barlow_loss(tape, z1, z2, 5e-3),
            Method::VicReg => ssl::vicreg_loss(tape, z1, z2, 25.0, 25.0, 1.0, 1.0),
            Method::SimSiam => {
                let p1 = forward_predictor(&spec, tape, &staged, z1, &mut Phase::Train(&mut p))?;
                let p2 = forward_predictor(&spec, tape, &staged, z2, &mut Phase::Train(&mut p))?;
                let z1d = tape.leaf(frozen_z1.clone());
                let z2d = tape.leaf(frozen_z2.clone());
                ssl::simsiam_loss(tape, p1, p2, z1d, z2d)
            }
            Method::Tico => {
                let z1n = tape.row_l2_normalize(z1)?;
                let z2n = tape.row_l2_normalize(z2)?;
                let prod = tape.mul(z1n, z2n)?;
                let dots = tape.row_sum(prod)?;
                let alignment = tape.mean(dots)?;
                let neg_alignment = tape.scalar_mul(alignment, -1.0)?;
                let b = tape.leaf(frozen_memory.clone());
                let z1b = tape.matmul(z1n, b)?;
                let quad = tape.mul(z1n, z1b)?;
                let quad_rows = tape.row_sum(quad)?;
                let uniformity = tape.mean(quad_rows)?;
                let weighted = tape.scalar_mul(uniformity, 8.0)?;
                tape.add(neg_alignment, weighted)
            }
        }
    })
    .unwrap()
}

// ---------------------------------------------------------------------------
// Loop-based oracles, deliberately written without the tape or any shared
// helper from the library so they can disagree with it.
// ---------------------------------------------------------------------------

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let shape = t.shape();
    let (n, d) = (shape[0], shape[1]);
    (0..n).map(|i| t.data()[i * d..(i + 1) * d].to_vec()).collect()
}

fn normalize_row(r: &[f64]) -> Vec<f64> {
    let norm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; r.len()];
    }
    r.iter().map(|v| v / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn oracle_info_nce(z1: &Tensor, z2: &Tensor, tau: f64) -> f64 {
    let mut all: Vec<Vec<f64>> = rows_of(z1).iter().map(|r| normalize_row(r)).collect();
    all.extend(rows_of(z2).iter().map(|r| normalize_row(r)));
    let n = z1.shape()[0];
    let total = 2 * n;
    let mut loss = 0.0;
    for i in 0..total {
        let positive = if i < n { i + n } else { i - n };
        let mut denom = 0.0;
        for j in 0..total {
            if j != i {
                denom += (dot(&all[i], &all[j]) / tau).exp();
            }
        }
        let numer = (dot(&all[i], &all[positive]) / tau).exp();
        loss += -(numer / denom).ln();
    }
    loss / total as f64
}

pub fn oracle_simsiam(p1: &Tensor, p2: &Tensor, z1: &Tensor, z2: &Tensor) -> f64 {
    let half = |p: &Tensor, z: &Tensor| -> f64 {
        let pr = rows_of(p);
        let zr = rows_of(z);
        let mut acc = 0.0;
        for (a, b) in pr.iter().zip(&zr) {
            acc += dot(&normalize_row(a), &normalize_row(b));
        }
        -acc / pr.len() as f64
    };
    0.5 * half(p1, z2) + 0.5 * half(p2, z1)
}

fn standardize_oracle(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mean: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var: f64 = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = (var + 1e-9).sqrt();
        for i in 0..n {
            out[i][j] = (rows[i][j] - mean) / std;
        }
    }
    out
}

pub fn oracle_barlow(z1: &Tensor, z2: &Tensor, lambda: f64) -> f64 {
    let h1 = standardize_oracle(&rows_of(z1));
    let h2 = standardize_oracle(&rows_of(z2));
    let n = h1.len();
    let d = h1[0].len();
    let mut loss = 0.0;
    for i in 0..d {
        for j in 0..d {
            let mut c = 0.0;
            for r in 0..n {
                c += h1[r][i] * h2[r][j];
            }
            c /= n as f64;
            if i == j {
                loss += (1.0 - c) * (1.0 - c);
            } else {
                loss += lambda * c * c;
            }
        }
    }
    loss
}

pub fn oracle_vicreg(
    z1: &Tensor,
    z2: &Tensor,
    inv_w: f64,
    var_w: f64,
    cov_w: f64,
    gamma: f64,
) -> f64 {
    let a = rows_of(z1);
    let b = rows_of(z2);
    let n = a.len();
    let d = a[0].len();

    let mut mse = 0.0;
    for i in 0..n {
        for j in 0..d {
            mse += (a[i][j] - b[i][j]).powi(2);
        }
    }
    mse /= (n * d) as f64;

    let variance_term = |rows: &[Vec<f64>]| -> f64 {
        let mut acc = 0.0;
        for j in 0..d {
            let mean: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var: f64 =
                rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let std = (var + 1e-4).sqrt();
            acc += (gamma - std).max(0.0);
        }
        acc / d as f64
    };

    let covariance_term = |rows: &[Vec<f64>]| -> f64 {
        let means: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
            .collect();
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                let mut cov = 0.0;
                for r in 0..n {
                    cov += (rows[r][i] - means[i]) * (rows[r][j] - means[j]);
                }
                cov /= (n - 1) as f64;
                acc += cov * cov;
            }
        }
        acc / d as f64
    };

    inv_w * mse
        + var_w * (variance_term(&a) + variance_term(&b))
        + cov_w * (covariance_term(&a) + covariance_term(&b))
}

/// Returns (loss, updated memory matrix) for pre-normalized views.
pub fn oracle_tico(
    z1: &Tensor,
    z2: &Tensor,
    memory: &[f64],
    beta: f64,
    rho: f64,
) -> (f64, Vec<f64>) {
    let a = rows_of(z1);
    let b = rows_of(z2);
    let n = a.len();
    let d = a[0].len();

    let mut updated = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut gram = 0.0;
            for r in 0..n {
                gram += a[r][i] * a[r][j];
            }
            updated[i * d + j] = beta * memory[i * d + j] + (1.0 - beta) * gram / n as f64;
        }
    }

    let mut alignment = 0.0;
    for r in 0..n {
        alignment += dot(&a[r], &b[r]);
    }
    alignment /= n as f64;

    let mut uniformity = 0.0;
    for r in 0..n {
        for i in 0..d {
            for j in 0..d {
                uniformity += a[r][i] * updated[i * d + j] * a[r][j];
            }
        }
    }
    uniformity /= n as f64;

    (-alignment + rho * uniformity, updated)
}
