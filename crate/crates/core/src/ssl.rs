//! The five self-supervised objectives, each mapping two batches of
//! projected views to a scalar loss on the tape.
//!
//! Formulas follow each method's original published form. Coefficient
//! defaults live in [`SslConfig`]; only the SimCLR temperature differs per
//! experiment configuration.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which objective a client trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    SimClr,
    SimSiam,
    Barlow,
    VicReg,
    Tico,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::SimClr,
        Method::SimSiam,
        Method::Barlow,
        Method::VicReg,
        Method::Tico,
    ];

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "simclr" => Ok(Method::SimClr),
            "simsiam" => Ok(Method::SimSiam),
            "barlow" => Ok(Method::Barlow),
            "vicreg" => Ok(Method::VicReg),
            "tico" => Ok(Method::Tico),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected simclr|simsiam|barlow|vicreg|tico)"
            ))),
        }
    }

    /// Projection head output width: 128 for SimCLR, 512 for the rest.
    pub fn proj_dim(self) -> usize {
        match self {
            Method::SimClr => 128,
            _ => 512,
        }
    }

    /// Only SimSiam trains a prediction head on top of the projector.
    pub fn uses_predictor(self) -> bool {
        self == Method::SimSiam
    }

    /// Only TiCo carries a feature-memory matrix between batches.
    pub fn uses_feature_memory(self) -> bool {
        self == Method::Tico
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::SimClr => "simclr",
            Method::SimSiam => "simsiam",
            Method::Barlow => "barlow",
            Method::VicReg => "vicreg",
            Method::Tico => "tico",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss hyperparameters with each method's published defaults.
#[derive(Debug, Clone)]
pub struct SslConfig {
    pub method: Method,
    /// SimCLR softmax temperature.
    pub temperature: f64,
    /// Barlow Twins redundancy weight.
    pub barlow_lambda: f64,
    pub vicreg_inv: f64,
    pub vicreg_var: f64,
    pub vicreg_cov: f64,
    /// VICReg variance-hinge target.
    pub vicreg_gamma: f64,
    /// TiCo memory momentum.
    pub tico_beta: f64,
    /// TiCo uniformity weight.
    pub tico_rho: f64,
}

impl SslConfig {
    pub fn new(method: Method) -> Self {
        SslConfig {
            method,
            temperature: 0.5,
            barlow_lambda: 5e-3,
            vicreg_inv: 25.0,
            vicreg_var: 25.0,
            vicreg_cov: 1.0,
            vicreg_gamma: 1.0,
            tico_beta: 0.9,
            tico_rho: 8.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.vicreg_gamma <= 0.0 {
            return Err(Error::Config(format!(
                "vicreg_gamma must be positive, got {}",
                self.vicreg_gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.tico_beta) {
            return Err(Error::Config(format!(
                "tico_beta must lie in [0,1], got {}",
                self.tico_beta
            )));
        }
        Ok(())
    }
}

/// Per-client exponential average of the first view's Gram matrix,
/// maintained outside the tape so no gradient flows through it.
#[derive(Debug, Clone)]
pub struct FeatureMemory {
    matrix: Tensor,
}

impl FeatureMemory {
    pub fn new(dim: usize) -> Self {
        FeatureMemory {
            matrix: Tensor::zeros(vec![dim, dim]),
        }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// B ← β·B + (1−β)·(1/N)·zᵀz from already-normalized, detached rows.
    pub fn update(&mut self, z: &Tensor, beta: f64) -> Result<()> {
        let (n, d) = z.rank2("feature_memory")?;
        if self.matrix.shape() != [d, d] {
            return Err(Error::contract(
                "feature_memory",
                format!("dim {d} does not match memory {:?}", self.matrix.shape()),
            ));
        }
        check_rows_normalized(z, "feature_memory")?;
        let zv = z.data();
        let m = self.matrix.data_mut();
        let scale = (1.0 - beta) / n as f64;
        for i in 0..d {
            for j in 0..d {
                let mut gram = 0.0;
                for r in 0..n {
                    gram += zv[r * d + i] * zv[r * d + j];
                }
                m[i * d + j] = beta * m[i * d + j] + scale * gram;
            }
        }
        Ok(())
    }
}

fn check_rows_normalized(z: &Tensor, op: &'static str) -> Result<()> {
    let (n, d) = z.rank2(op)?;
    for i in 0..n {
        let norm: f64 = z.data()[i * d..(i + 1) * d]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::contract(
                op,
                format!("row {i} has norm {norm}, expected unit length"),
            ));
        }
    }
    Ok(())
}

fn paired_views(tape: &Tape, z1: Var, z2: Var, op: &'static str) -> Result<(usize, usize)> {
    let (n1, d1) = tape.value(z1).rank2(op)?;
    let (n2, d2) = tape.value(z2).rank2(op)?;
    if (n1, d1) != (n2, d2) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![n1, d1],
            rhs: vec![n2, d2],
        });
    }
    Ok((n1, d1))
}

/// NT-Xent over the 2N stacked l2-normalized embeddings: for each anchor,
/// a softmax at temperature τ over its 2N−1 non-self candidates, scored by
/// dot-product similarity; the positive is the other view of the same image.
pub fn info_nce(tape: &mut Tape, z1: Var, z2: Var, temperature: f64) -> Result<Var> {
    let (n, _) = paired_views(tape, z1, z2, "info_nce")?;
    if n < 2 {
        return Err(Error::DegenerateBatch {
            op: "info_nce",
            batch: n,
            min: 2,
        });
    }
    if temperature <= 0.0 {
        return Err(Error::domain("info_nce", "temperature must be positive"));
    }
    let stacked = tape.concat_rows(z1, z2)?;
    let zn = tape.row_l2_normalize(stacked)?;
    let znt = tape.transpose(zn)?;
    let sim = tape.matmul(zn, znt)?;
    let scores = tape.scalar_mul(sim, 1.0 / temperature)?;

    let exp_scores = tape.exp(scores)?;
    let row_totals = tape.row_sum(exp_scores)?;
    let self_terms = tape.diag(exp_scores)?;
    // Softmax denominator excludes the anchor itself.
    let denom = tape.sub(row_totals, self_terms)?;
    let log_denom = tape.log(denom)?;

    let pairs: Vec<(usize, usize)> = (0..2 * n)
        .map(|i| (i, if i < n { i + n } else { i - n }))
        .collect();
    let positives = tape.gather2d(scores, pairs)?;
    let per_anchor = tape.sub(log_denom, positives)?;
    tape.mean(per_anchor)
}

/// Negative-cosine SimSiam loss: ½·D(p1, z2) + ½·D(p2, z1) where
/// D(p, z) = −mean row cosine. The z arguments must be detached leaves
/// (stop-gradient), which is enforced rather than applied silently.
pub fn simsiam_loss(tape: &mut Tape, p1: Var, p2: Var, z1: Var, z2: Var) -> Result<Var> {
    paired_views(tape, p1, z2, "simsiam_loss")?;
    paired_views(tape, p2, z1, "simsiam_loss")?;
    if !tape.is_leaf(z1) || !tape.is_leaf(z2) {
        return Err(Error::contract(
            "simsiam_loss",
            "projector outputs must be detached before entering the loss",
        ));
    }
    let d1 = negative_cosine(tape, p1, z2)?;
    let d2 = negative_cosine(tape, p2, z1)?;
    let total = tape.add(d1, d2)?;
    tape.scalar_mul(total, 0.5)
}

fn negative_cosine(tape: &mut Tape, p: Var, z: Var) -> Result<Var> {
    let pn = tape.row_l2_normalize(p)?;
    let zn = tape.row_l2_normalize(z)?;
    let prod = tape.mul(pn, zn)?;
    let dots = tape.row_sum(prod)?;
    let mean = tape.mean(dots)?;
    tape.scalar_mul(mean, -1.0)
}

/// Cross-correlation loss: standardize each view per dimension, form
/// C = (1/N)·ẑ1ᵀẑ2, and penalize Σᵢ(1−Cᵢᵢ)² + λ·Σ_{i≠j}Cᵢⱼ².
pub fn barlow_loss(tape: &mut Tape, z1: Var, z2: Var, lambda: f64) -> Result<Var> {
    let (n, _) = paired_views(tape, z1, z2, "barlow_loss")?;
    if n < 2 {
        return Err(Error::DegenerateBatch {
            op: "barlow_loss",
            batch: n,
            min: 2,
        });
    }
    let h1 = standardize_columns(tape, z1)?;
    let h2 = standardize_columns(tape, z2)?;
    let h1t = tape.transpose(h1)?;
    let cross = tape.matmul(h1t, h2)?;
    let c = tape.scalar_mul(cross, 1.0 / n as f64)?;

    let diag = tape.diag(c)?;
    let diag_err = tape.scalar_add(diag, -1.0)?;
    let diag_err_sq = tape.mul(diag_err, diag_err)?;
    let on_diag = tape.sum(diag_err_sq)?;

    let c_sq = tape.mul(c, c)?;
    let total_sq = tape.sum(c_sq)?;
    let diag_sq = tape.mul(diag, diag)?;
    let diag_sq_sum = tape.sum(diag_sq)?;
    let off_diag = tape.sub(total_sq, diag_sq_sum)?;

    let weighted = tape.scalar_mul(off_diag, lambda)?;
    tape.add(on_diag, weighted)
}

/// Per-column standardization with biased variance and a 1e-9 guard inside
/// the square root, so zero-variance dimensions stay finite.
fn standardize_columns(tape: &mut Tape, z: Var) -> Result<Var> {
    let means = tape.mean_axis0(z)?;
    let centered = tape.sub_row_vec(z, means)?;
    let vars = tape.var_axis0(z, 0)?;
    let guarded = tape.scalar_add(vars, 1e-9)?;
    let stds = tape.sqrt(guarded)?;
    tape.div_row_vec(centered, stds)
}

/// Invariance/variance/covariance loss:
/// λ_inv·MSE(z1,z2) + μ_var·[v(z1)+v(z2)] + ν_cov·[c(z1)+c(z2)], with
/// v(z) = meanⱼ relu(γ − √(varⱼ+1e-4)) over unbiased column variances and
/// c(z) = (1/d)·Σ_{i≠j} Cov(z)ᵢⱼ².
pub fn vicreg_loss(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    inv_weight: f64,
    var_weight: f64,
    cov_weight: f64,
    gamma: f64,
) -> Result<Var> {
    let (n, _) = paired_views(tape, z1, z2, "vicreg_loss")?;
    if n < 2 {
        return Err(Error::DegenerateBatch {
            op: "vicreg_loss",
            batch: n,
            min: 2,
        });
    }
    let diff = tape.sub(z1, z2)?;
    let diff_sq = tape.mul(diff, diff)?;
    let invariance = tape.mean(diff_sq)?;

    let v1 = variance_hinge(tape, z1, gamma)?;
    let v2 = variance_hinge(tape, z2, gamma)?;
    let variance = tape.add(v1, v2)?;

    let c1 = covariance_offdiag(tape, z1)?;
    let c2 = covariance_offdiag(tape, z2)?;
    let covariance = tape.add(c1, c2)?;

    let wi = tape.scalar_mul(invariance, inv_weight)?;
    let wv = tape.scalar_mul(variance, var_weight)?;
    let wc = tape.scalar_mul(covariance, cov_weight)?;
    let partial = tape.add(wi, wv)?;
    tape.add(partial, wc)
}

fn variance_hinge(tape: &mut Tape, z: Var, gamma: f64) -> Result<Var> {
    let vars = tape.var_axis0(z, 1)?;
    let guarded = tape.scalar_add(vars, 1e-4)?;
    let stds = tape.sqrt(guarded)?;
    let neg = tape.scalar_mul(stds, -1.0)?;
    let gaps = tape.scalar_add(neg, gamma)?;
    let hinged = tape.relu(gaps)?;
    tape.mean(hinged)
}

fn covariance_offdiag(tape: &mut Tape, z: Var) -> Result<Var> {
    let (n, d) = tape.value(z).rank2("vicreg_loss")?;
    let means = tape.mean_axis0(z)?;
    let centered = tape.sub_row_vec(z, means)?;
    let ct = tape.transpose(centered)?;
    let gram = tape.matmul(ct, centered)?;
    let cov = tape.scalar_mul(gram, 1.0 / (n - 1) as f64)?;
    let cov_sq = tape.mul(cov, cov)?;
    let total = tape.sum(cov_sq)?;
    let diag = tape.diag(cov)?;
    let diag_sq = tape.mul(diag, diag)?;
    let diag_total = tape.sum(diag_sq)?;
    let off = tape.sub(total, diag_total)?;
    tape.scalar_mul(off, 1.0 / d as f64)
}

/// Transformation-invariance + contrastive loss with implicit feature
/// memory: first B ← β·B + (1−β)·(1/N)·z1ᵀz1 on detached values, then
/// loss = −(1/N)·Σᵢ z1ᵢ·z2ᵢ + (ρ/N)·Σᵢ z1ᵢᵀ·B·z1ᵢ against the updated B.
/// Rows of both views must arrive l2-normalized.
pub fn tico_loss(
    tape: &mut Tape,
    memory: &mut FeatureMemory,
    z1: Var,
    z2: Var,
    beta: f64,
    rho: f64,
) -> Result<Var> {
    let (_, _) = paired_views(tape, z1, z2, "tico_loss")?;
    check_rows_normalized(tape.value(z1), "tico_loss")?;
    check_rows_normalized(tape.value(z2), "tico_loss")?;

    memory.update(tape.value(z1), beta)?;

    let prod = tape.mul(z1, z2)?;
    let dots = tape.row_sum(prod)?;
    let alignment = tape.mean(dots)?;
    let neg_alignment = tape.scalar_mul(alignment, -1.0)?;

    let b = tape.leaf(memory.matrix().clone());
    let z1b = tape.matmul(z1, b)?;
    let quad_prod = tape.mul(z1, z1b)?;
    let quad_rows = tape.row_sum(quad_prod)?;
    let uniformity = tape.mean(quad_rows)?;
    let weighted = tape.scalar_mul(uniformity, rho)?;

    tape.add(neg_alignment, weighted)
}
