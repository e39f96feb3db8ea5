//! Temperature-softened distillation (KD) and logit regression (LT).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_into, softmax_into, Matrix};
use crate::LogitBatch;

/// Temperature used for 10-class problems.
pub const CIFAR10_TEMPERATURE: f64 = 4.0;
/// Temperature used for 100-class problems.
pub const CIFAR100_TEMPERATURE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    temperature: f64,
}

impl KdConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::config(format!(
                "KD temperature must be finite and positive, got {temperature}"
            )));
        }
        Ok(Self { temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            temperature: CIFAR10_TEMPERATURE,
        }
    }
}

pub fn soften(logits: &[f64], cfg: &KdConfig) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(Error::config("softening needs at least 2 classes"));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / cfg.temperature).collect();
    crate::numerics::stable_softmax(&scaled)
}

fn check_pair(student: &LogitBatch, teacher: &LogitBatch) -> Result<()> {
    if student.shape() != teacher.shape() {
        return Err(Error::config(format!(
            "student logits {:?} and teacher logits {:?} differ in shape",
            student.shape(),
            teacher.shape()
        )));
    }
    if student.rows() == 0 {
        return Err(Error::config("empty logit batch"));
    }
    Ok(())
}

/// `(1/b) Σ_s KL(q_T^s ‖ q_S^s)` at temperature `M`, without the `M²` factor.
pub fn kd_loss(student: &LogitBatch, teacher: &LogitBatch, cfg: &KdConfig) -> Result<f64> {
    check_pair(student, teacher)?;
    let (b, n) = student.shape();
    let m = cfg.temperature;
    let mut scaled = vec![0.0; n];
    let mut log_s = vec![0.0; n];
    let mut log_t = vec![0.0; n];
    let mut total = 0.0;
    for s in 0..b {
        for (o, z) in scaled.iter_mut().zip(student.row(s)) {
            *o = z / m;
        }
        log_softmax_into(&scaled, &mut log_s);
        for (o, z) in scaled.iter_mut().zip(teacher.row(s)) {
            *o = z / m;
        }
        log_softmax_into(&scaled, &mut log_t);
        total += log_t
            .iter()
            .zip(&log_s)
            .map(|(&lt, &ls)| lt.exp() * (lt - ls))
            .sum::<f64>();
    }
    Ok(total / b as f64)
}

/// `∂/∂z_{k,S}^s = (q_{k,S}^s − q_{k,T}^s) / (b M)`.
pub fn kd_loss_grad(student: &LogitBatch, teacher: &LogitBatch, cfg: &KdConfig) -> Result<Matrix> {
    check_pair(student, teacher)?;
    let (b, n) = student.shape();
    let m = cfg.temperature;
    let scale = 1.0 / (b as f64 * m);
    let mut grad = Matrix::zeros(b, n);
    let mut scaled = vec![0.0; n];
    let mut q_s = vec![0.0; n];
    let mut q_t = vec![0.0; n];
    for s in 0..b {
        for (o, z) in scaled.iter_mut().zip(student.row(s)) {
            *o = z / m;
        }
        softmax_into(&scaled, &mut q_s);
        for (o, z) in scaled.iter_mut().zip(teacher.row(s)) {
            *o = z / m;
        }
        softmax_into(&scaled, &mut q_t);
        for ((g, qs), qt) in grad.row_mut(s).iter_mut().zip(&q_s).zip(&q_t) {
            *g = scale * (qs - qt);
        }
    }
    Ok(grad)
}

/// `(1/(2b)) Σ_s ‖z_S^s − z_T^s‖²`.
pub fn lt_loss(student: &LogitBatch, teacher: &LogitBatch) -> Result<f64> {
    check_pair(student, teacher)?;
    let sq: f64 = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(s, t)| (s - t) * (s - t))
        .sum();
    Ok(sq / (2.0 * student.rows() as f64))
}

pub fn lt_loss_grad(student: &LogitBatch, teacher: &LogitBatch) -> Result<Matrix> {
    check_pair(student, teacher)?;
    let inv_b = 1.0 / student.rows() as f64;
    let data = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(s, t)| inv_b * (s - t))
        .collect();
    Matrix::new(student.rows(), student.cols(), data)
}

/// Cross-derivative probe contrasting the ICC and KD gradients on one sample.
///
/// For classes `k ≠ i`, `∂²L/∂z_k∂z_i` is measured by nested central
/// differences on the loss values alone. Each method's cross-derivative is
/// then split into the part flowing through its normalized distribution and
/// whatever is left. For KD the distribution path (`−q_k q_i / M²`) is the
/// whole story; for ICC the remainder is the explicit belief-weight term
/// `2(ã_ik,S − ã_ik,T)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastProbe {
    pub icc_cross: f64,
    pub icc_map_path: f64,
    pub icc_belief_term: f64,
    pub kd_cross: f64,
    pub kd_softmax_path: f64,
}

impl ContrastProbe {
    /// Measured ICC remainder after removing the map path.
    pub fn icc_residual(&self) -> f64 {
        self.icc_cross - self.icc_map_path
    }

    /// Measured KD remainder after removing the softmax-denominator path.
    pub fn kd_residual(&self) -> f64 {
        self.kd_cross - self.kd_softmax_path
    }
}

pub fn contrast_probe(
    student: &[f64],
    teacher: &[f64],
    k: usize,
    i: usize,
    cfg: &KdConfig,
    h: f64,
) -> Result<ContrastProbe> {
    use crate::gradcheck::mixed_partial;
    use crate::icc::{icc_loss, icc_map_per_sample, IccLossMode};

    let n = student.len();
    if teacher.len() != n || k == i || k >= n || i >= n {
        return Err(Error::config("contrast probe needs distinct in-range classes"));
    }
    let teacher_row = Matrix::new(1, n, teacher.to_vec())?;
    let icc_f = |x: &[f64]| {
        let s = Matrix::new(1, n, x.to_vec()).expect("row");
        icc_loss(&s, &teacher_row, IccLossMode::PerSampleMeanKL).expect("icc loss")
    };
    let kd_f = |x: &[f64]| {
        let s = Matrix::new(1, n, x.to_vec()).expect("row");
        kd_loss(&s, &teacher_row, cfg).expect("kd loss")
    };
    let icc_cross = mixed_partial(icc_f, student, k, i, h)?;
    let kd_cross = mixed_partial(kd_f, student, k, i, h)?;

    // ICC gradient component k is 2 Σ_j z_j (q_jk − p_jk). Holding the belief
    // weights z_j fixed, only q moves with z_i:
    //   ∂q_jk/∂z_i = q_jk (∂a_jk/∂z_i − Σ_uv q_uv ∂a_uv/∂z_i)
    //   ∂a_jk/∂z_i = δ_ji z_k + δ_ki z_j,   Σ_uv q_uv ∂a_uv/∂z_i = 2 Σ_v q_iv z_v.
    let q = icc_map_per_sample(student)?;
    let p = icc_map_per_sample(teacher)?;
    let z = student;
    let mean_term: f64 = 2.0 * (0..n).map(|v| q.get(i, v) * z[v]).sum::<f64>();
    let mut map_path = 0.0;
    for (j, &zj) in z.iter().enumerate() {
        let da = if j == i { z[k] } else { 0.0 } + if k == i { zj } else { 0.0 };
        map_path += zj * q.get(j, k) * (da - mean_term);
    }
    let icc_map_path = 2.0 * map_path;
    let icc_belief_term = 2.0 * (q.get(i, k) - p.get(i, k));

    let q_s = soften(student, cfg)?;
    let m = cfg.temperature;
    let kd_softmax_path = -q_s[k] * q_s[i] / (m * m);

    Ok(ContrastProbe {
        icc_cross,
        icc_map_path,
        icc_belief_term,
        kd_cross,
        kd_softmax_path,
    })
}
