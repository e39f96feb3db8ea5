//! Finite-difference oracle for every analytic gradient in the crate.
//!
//! The oracle only evaluates loss values. It never calls a gradient routine,
//! so agreement between the two is independent evidence of correctness.

use std::fmt;

use crate::error::{Error, Result};
use crate::icc::{icc_loss, icc_loss_grad, IccLossMode};
use crate::kd::{kd_loss, kd_loss_grad, lt_loss, lt_loss_grad, KdConfig};
use crate::mlp::{backward, ce_loss_and_grad, forward, init, NetworkParams, NetworkSpec};
use crate::numerics::{rng_normal, Matrix, Rng};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const STEP_SWEEP: [f64; 3] = [1e-4, 1e-5, 1e-6];
/// Seed of the reference battery run by `icct gradcheck` and the acceptance suite.
pub const DEFAULT_SEED: u64 = 20240521;

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::config(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!(
                "function is not finite near coordinate {i}"
            )));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Nested central difference for `∂²f/∂x_i∂x_j`, `i ≠ j`.
pub fn mixed_partial(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    i: usize,
    j: usize,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::config(format!("step must be positive, got {h}")));
    }
    let at = |di: f64, dj: f64| {
        let mut p = x.to_vec();
        p[i] += di;
        p[j] += dj;
        f(&p)
    };
    let v = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
    if !v.is_finite() {
        return Err(Error::numeric("mixed partial is not finite"));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub target: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_coordinate: usize,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<40} rel={:.3e} abs={:.3e} worst={} h={:.0e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.target,
            self.max_rel_error,
            self.max_abs_error,
            self.worst_coordinate,
            self.step,
            self.tolerance
        )
    }
}

/// Compares two gradients coordinate by coordinate using
/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn compare(target: &str, analytic: &[f64], numeric: &[f64], step: f64, tolerance: f64) -> GradReport {
    assert_eq!(analytic.len(), numeric.len(), "{target}: length mismatch");
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = 0;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(1e-12);
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
        max_abs = max_abs.max(abs);
    }
    GradReport {
        target: target.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst_coordinate: worst,
        step,
        tolerance,
        passed: max_rel < tolerance,
    }
}

/// Runs the comparison at each step in [`STEP_SWEEP`] and keeps the best one.
pub fn check_with_sweep(
    target: &str,
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    tolerance: f64,
) -> Result<GradReport> {
    let mut best: Option<GradReport> = None;
    for h in STEP_SWEEP {
        let numeric = central_diff(&f, x, h)?;
        let r = compare(target, analytic, &numeric, h, tolerance);
        if best.as_ref().is_none_or(|b| r.max_rel_error < b.max_rel_error) {
            best = Some(r);
        }
    }
    Ok(best.expect("non-empty sweep"))
}

/// A loss on logits paired with its analytic gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogitObjective {
    Icc(IccLossMode),
    Kd(KdConfig),
    Lt,
}

impl LogitObjective {
    pub fn name(&self) -> String {
        match self {
            LogitObjective::Icc(IccLossMode::PerSampleMeanKL) => "icc[per-sample]".into(),
            LogitObjective::Icc(IccLossMode::AveragedMapKL) => "icc[averaged-map]".into(),
            LogitObjective::Kd(c) => format!("kd[M={}]", c.temperature()),
            LogitObjective::Lt => "lt".into(),
        }
    }

    pub fn loss(&self, student: &Matrix, teacher: &Matrix) -> Result<f64> {
        match self {
            LogitObjective::Icc(m) => icc_loss(student, teacher, *m),
            LogitObjective::Kd(c) => kd_loss(student, teacher, c),
            LogitObjective::Lt => lt_loss(student, teacher),
        }
    }

    pub fn grad(&self, student: &Matrix, teacher: &Matrix) -> Result<Matrix> {
        match self {
            LogitObjective::Icc(m) => icc_loss_grad(student, teacher, *m),
            LogitObjective::Kd(c) => kd_loss_grad(student, teacher, c),
            LogitObjective::Lt => lt_loss_grad(student, teacher),
        }
    }
}

type GradFn<'a> = &'a dyn Fn(&Matrix, &Matrix) -> Result<Matrix>;

fn logit_check(
    name: &str,
    objective: &LogitObjective,
    grad_fn: GradFn<'_>,
    student: &Matrix,
    teacher: &Matrix,
    tolerance: f64,
) -> Result<GradReport> {
    let analytic = grad_fn(student, teacher)?;
    let (b, n) = student.shape();
    let f = |x: &[f64]| {
        let s = Matrix::new(b, n, x.to_vec()).expect("shape");
        objective.loss(&s, teacher).unwrap_or(f64::NAN)
    };
    check_with_sweep(name, f, student.data(), analytic.data(), tolerance)
}

/// Composite objective `CE + λ·transfer` evaluated through a network.
fn network_check(
    name: &str,
    params: &NetworkParams,
    inputs: &Matrix,
    labels: &[usize],
    transfer: Option<(&LogitObjective, &Matrix, f64)>,
    tolerance: f64,
) -> Result<GradReport> {
    let (logits, cache) = forward(params, inputs)?;
    let (_, mut d_logits) = ce_loss_and_grad(&logits, labels)?;
    if let Some((obj, teacher, lambda)) = transfer {
        d_logits.add_scaled(&obj.grad(&logits, teacher)?, lambda)?;
    }
    let analytic = backward(params, &cache, &d_logits)?.flatten();
    let f = |flat: &[f64]| {
        let p = params.with_flat(flat).expect("flat");
        let (z, _) = forward(&p, inputs).expect("forward");
        let ce = ce_loss_and_grad(&z, labels).expect("ce").0;
        match transfer {
            Some((obj, teacher, lambda)) => ce + lambda * obj.loss(&z, teacher).expect("loss"),
            None => ce,
        }
    };
    check_with_sweep(name, f, &params.flatten(), &analytic, tolerance)
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, rng_normal(rng, rows * cols, 0.0, 1.0)).expect("sized")
}

/// The fixed battery: logit-level gradients for every transfer loss and CE,
/// then end-to-end parameter gradients for `CE` and `CE + λ·{ICC, KD, LT}`,
/// over `b ∈ {1, 4, 8}` and `N ∈ {2, 5, 16}`.
pub fn check_all(seed: u64, tolerance: f64) -> Result<Vec<GradReport>> {
    check_all_with(seed, tolerance, &|obj, s, t| obj.grad(s, t))
}

/// [`check_all`] with the transfer-gradient routine injectable, so a
/// deliberately broken gradient can be shown to fail.
pub fn check_all_with(
    seed: u64,
    tolerance: f64,
    transfer_grad: &dyn Fn(&LogitObjective, &Matrix, &Matrix) -> Result<Matrix>,
) -> Result<Vec<GradReport>> {
    let mut rng = Rng::new(seed);
    let mut reports = Vec::new();
    let objectives = [
        LogitObjective::Icc(IccLossMode::PerSampleMeanKL),
        LogitObjective::Icc(IccLossMode::AveragedMapKL),
        LogitObjective::Kd(KdConfig::new(4.0)?),
        LogitObjective::Lt,
    ];

    // Hand-derived fixture: teacher (0,0), student (1,0).
    let fixture_s = Matrix::new(1, 2, vec![1.0, 0.0])?;
    let fixture_t = Matrix::new(1, 2, vec![0.0, 0.0])?;
    let per_sample = LogitObjective::Icc(IccLossMode::PerSampleMeanKL);
    let mut r = logit_check(
        "icc[per-sample] fixture b=1 N=2",
        &per_sample,
        &|s, t| transfer_grad(&per_sample, s, t),
        &fixture_s,
        &fixture_t,
        tolerance,
    )?;
    let g = transfer_grad(&per_sample, &fixture_s, &fixture_t)?;
    if (g.get(0, 0) - 0.450734).abs() > 1e-5 || (g.get(0, 1) + 0.150244).abs() > 1e-5 {
        r.passed = false;
    }
    reports.push(r);

    for &b in &[1usize, 4, 8] {
        for &n in &[2usize, 5, 16] {
            let student = random_matrix(&mut rng, b, n);
            let teacher = random_matrix(&mut rng, b, n);
            for obj in &objectives {
                let name = format!("{} b={b} N={n}", obj.name());
                reports.push(logit_check(
                    &name,
                    obj,
                    &|s, t| transfer_grad(obj, s, t),
                    &student,
                    &teacher,
                    tolerance,
                )?);
            }
            let labels: Vec<usize> = (0..b).map(|_| rng.below(n)).collect();
            let analytic = ce_loss_and_grad(&student, &labels)?.1;
            let f = |x: &[f64]| {
                let z = Matrix::new(b, n, x.to_vec()).expect("shape");
                ce_loss_and_grad(&z, &labels).map_or(f64::NAN, |(l, _)| l)
            };
            reports.push(check_with_sweep(
                &format!("ce b={b} N={n}"),
                f,
                student.data(),
                analytic.data(),
                tolerance,
            )?);
        }
    }

    // End-to-end through small networks (<= 3 layers, width <= 16).
    let nets: [(&[usize], usize); 3] = [(&[6, 2], 1), (&[5, 8, 5], 4), (&[4, 16, 12, 16], 8)];
    for (sizes, b) in nets {
        let spec = NetworkSpec::new(sizes.to_vec(), rng.next_u64())?;
        let params = init(&spec)?;
        let n = spec.n_classes();
        let inputs = random_matrix(&mut rng, b, spec.input_dim());
        let labels: Vec<usize> = (0..b).map(|_| rng.below(n)).collect();
        let teacher = random_matrix(&mut rng, b, n);
        let tag = format!("{sizes:?} b={b}");
        reports.push(network_check(
            &format!("net ce {tag}"),
            &params,
            &inputs,
            &labels,
            None,
            tolerance,
        )?);
        for obj in &objectives {
            let lambda = 0.7;
            let wrapped = WrappedObjective {
                inner: *obj,
                grad: transfer_grad,
            };
            reports.push(wrapped.network_check(
                &format!("net ce+{lambda}*{} {tag}", obj.name()),
                &params,
                &inputs,
                &labels,
                &teacher,
                lambda,
                tolerance,
            )?);
        }
    }
    Ok(reports)
}

struct WrappedObjective<'a> {
    inner: LogitObjective,
    grad: &'a dyn Fn(&LogitObjective, &Matrix, &Matrix) -> Result<Matrix>,
}

impl WrappedObjective<'_> {
    #[allow(clippy::too_many_arguments)]
    fn network_check(
        &self,
        name: &str,
        params: &NetworkParams,
        inputs: &Matrix,
        labels: &[usize],
        teacher: &Matrix,
        lambda: f64,
        tolerance: f64,
    ) -> Result<GradReport> {
        let (logits, cache) = forward(params, inputs)?;
        let (_, mut d_logits) = ce_loss_and_grad(&logits, labels)?;
        d_logits.add_scaled(&(self.grad)(&self.inner, &logits, teacher)?, lambda)?;
        let analytic = backward(params, &cache, &d_logits)?.flatten();
        let obj = self.inner;
        let f = |flat: &[f64]| {
            let p = params.with_flat(flat).expect("flat");
            let (z, _) = forward(&p, inputs).expect("forward");
            ce_loss_and_grad(&z, labels).expect("ce").0
                + lambda * obj.loss(&z, teacher).expect("loss")
        };
        check_with_sweep(name, f, &params.flatten(), &analytic, tolerance)
    }
}

/// First failing report, if any.
pub fn worst_failure(reports: &[GradReport]) -> Option<&GradReport> {
    reports
        .iter()
        .filter(|r| !r.passed)
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
}
