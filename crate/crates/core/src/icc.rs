//! Inter-class correlation maps and the transfer loss built on them.
//!
//! For one sample with logits `z` the map is the softmax, taken jointly over
//! all `N²` entries, of the outer product `z zᵀ`. A mini-batch map is the mean
//! of its per-sample maps. The transfer loss is `KL(teacher ‖ student)`; the
//! teacher side is always a constant. There is deliberately no temperature.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_into, softmax_into, Matrix};
use crate::LogitBatch;

/// Normalized `N×N` inter-class correlation map.
#[derive(Debug, Clone, PartialEq)]
pub struct IccMap {
    entries: Matrix,
}

impl IccMap {
    pub fn n_classes(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries.get(i, j)
    }

    /// Wraps a matrix read from elsewhere after checking it is a square
    /// probability table.
    pub fn from_entries(entries: Matrix) -> Result<Self> {
        if entries.rows() != entries.cols() || entries.rows() < 2 {
            return Err(Error::data(format!(
                "ICC map must be square with N >= 2, got {:?}",
                entries.shape()
            )));
        }
        if entries.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::data("ICC map entries must be finite and nonnegative"));
        }
        Ok(Self { entries })
    }

    /// `KL(self ‖ other)` over all `N²` entries.
    pub fn kl_divergence(&self, other: &IccMap) -> Result<f64> {
        if self.n_classes() != other.n_classes() {
            return Err(Error::config(format!(
                "cannot compare maps with {} and {} classes",
                self.n_classes(),
                other.n_classes()
            )));
        }
        Ok(kl(self.entries.data(), other.entries.data()))
    }

    /// CSV with header `class_i,class_j,value`, one row per entry, 9 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.n_classes();
        let mut out = String::from("class_i,class_j,value\n");
        for i in 0..n {
            for j in 0..n {
                let _ = writeln!(out, "{i},{j},{:.8e}", self.get(i, j));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("class_i,class_j,value") => {}
            other => return Err(Error::data(format!("bad ICC CSV header: {other:?}"))),
        }
        let mut cells = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let parsed = match parts.as_slice() {
                [i, j, v] => i
                    .parse::<usize>()
                    .ok()
                    .zip(j.parse::<usize>().ok())
                    .zip(v.parse::<f64>().ok()),
                _ => None,
            };
            let ((i, j), v) = parsed
                .ok_or_else(|| Error::data(format!("line {}: malformed row {line:?}", lineno + 2)))?;
            cells.push((i, j, v));
        }
        let n = (cells.len() as f64).sqrt().round() as usize;
        if n * n != cells.len() {
            return Err(Error::data(format!("{} cells is not a square map", cells.len())));
        }
        let mut m = Matrix::zeros(n, n);
        for (i, j, v) in cells {
            if i >= n || j >= n {
                return Err(Error::data(format!("cell ({i},{j}) outside a {n}x{n} map")));
            }
            m.set(i, j, v);
        }
        Self::from_entries(m)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}

/// How the batch dimension enters the transfer loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum IccLossMode {
    /// Mean over samples of `KL(ã_T^s ‖ ã_S^s)`.
    #[default]
    PerSampleMeanKL,
    /// `KL(Ã_T ‖ Ã_S)` between the batch-averaged maps.
    AveragedMapKL,
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

fn outer(z: &[f64], out: &mut [f64]) {
    let n = z.len();
    for (u, &zu) in z.iter().enumerate() {
        for (v, &zv) in z.iter().enumerate() {
            out[u * n + v] = zu * zv;
        }
    }
}

/// Flattened per-sample map into `out` (length `N²`).
fn map_into(z: &[f64], scratch: &mut [f64], out: &mut [f64]) {
    outer(z, scratch);
    softmax_into(scratch, out);
}

fn check_logits(z: &[f64]) -> Result<()> {
    if z.len() < 2 {
        return Err(Error::config(format!(
            "an ICC map needs at least 2 classes, got {}",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("logits are not finite"));
    }
    Ok(())
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
    if student.cols() < 2 {
        return Err(Error::config("an ICC map needs at least 2 classes"));
    }
    if !student.is_finite() || !teacher.is_finite() {
        return Err(Error::numeric("logits are not finite"));
    }
    Ok(())
}

pub fn icc_map_per_sample(logits: &[f64]) -> Result<IccMap> {
    check_logits(logits)?;
    let n = logits.len();
    let mut scratch = vec![0.0; n * n];
    let mut out = vec![0.0; n * n];
    map_into(logits, &mut scratch, &mut out);
    Ok(IccMap {
        entries: Matrix::new(n, n, out)?,
    })
}

pub fn icc_map_batch(batch: &LogitBatch) -> Result<IccMap> {
    if batch.rows() == 0 {
        return Err(Error::config("cannot average an empty batch"));
    }
    let n = batch.cols();
    let mut acc = vec![0.0; n * n];
    let mut scratch = vec![0.0; n * n];
    let mut map = vec![0.0; n * n];
    for s in 0..batch.rows() {
        let z = batch.row(s);
        check_logits(z)?;
        map_into(z, &mut scratch, &mut map);
        for (a, m) in acc.iter_mut().zip(&map) {
            *a += m;
        }
    }
    let inv_b = 1.0 / batch.rows() as f64;
    acc.iter_mut().for_each(|a| *a *= inv_b);
    Ok(IccMap {
        entries: Matrix::new(n, n, acc)?,
    })
}

/// Transfer loss `KL(teacher ‖ student)`; `λ` is applied by the caller.
pub fn icc_loss(student: &LogitBatch, teacher: &LogitBatch, mode: IccLossMode) -> Result<f64> {
    check_pair(student, teacher)?;
    let (b, n) = student.shape();
    let nn = n * n;
    match mode {
        IccLossMode::PerSampleMeanKL => {
            let mut a = vec![0.0; nn];
            let mut log_s = vec![0.0; nn];
            let mut log_t = vec![0.0; nn];
            let mut total = 0.0;
            for s in 0..b {
                outer(teacher.row(s), &mut a);
                log_softmax_into(&a, &mut log_t);
                outer(student.row(s), &mut a);
                log_softmax_into(&a, &mut log_s);
                total += log_t
                    .iter()
                    .zip(&log_s)
                    .map(|(&lt, &ls)| lt.exp() * (lt - ls))
                    .sum::<f64>();
            }
            Ok(total / b as f64)
        }
        IccLossMode::AveragedMapKL => {
            let t = icc_map_batch(teacher)?;
            let s = icc_map_batch(student)?;
            t.kl_divergence(&s)
        }
    }
}

/// Gradient of [`icc_loss`] with respect to the student logits, `b×N`.
pub fn icc_loss_grad(
    student: &LogitBatch,
    teacher: &LogitBatch,
    mode: IccLossMode,
) -> Result<Matrix> {
    check_pair(student, teacher)?;
    let (b, n) = student.shape();
    let nn = n * n;
    let inv_b = 1.0 / b as f64;
    let mut grad = Matrix::zeros(b, n);
    let mut scratch = vec![0.0; nn];
    // Per-sample ∂L/∂a^s, symmetric N×N.
    let mut d_a = vec![0.0; nn];

    match mode {
        IccLossMode::PerSampleMeanKL => {
            let mut p = vec![0.0; nn];
            let mut q = vec![0.0; nn];
            for s in 0..b {
                map_into(teacher.row(s), &mut scratch, &mut p);
                map_into(student.row(s), &mut scratch, &mut q);
                for ((d, &qi), &pi) in d_a.iter_mut().zip(&q).zip(&p) {
                    *d = inv_b * (qi - pi);
                }
                chain_outer(student.row(s), &d_a, grad.row_mut(s));
            }
        }
        IccLossMode::AveragedMapKL => {
            let p_avg = icc_map_batch(teacher)?;
            let q_avg = icc_map_batch(student)?;
            // ∂L/∂q^s_uv = -(1/b) P_uv / Q_uv, identical for every sample.
            let g: Vec<f64> = p_avg
                .entries
                .data()
                .iter()
                .zip(q_avg.entries.data())
                .map(|(&pv, &qv)| if pv > 0.0 { -inv_b * pv / qv } else { 0.0 })
                .collect();
            let mut q = vec![0.0; nn];
            for s in 0..b {
                map_into(student.row(s), &mut scratch, &mut q);
                let gq: f64 = g.iter().zip(&q).map(|(gi, qi)| gi * qi).sum();
                for ((d, &qi), &gi) in d_a.iter_mut().zip(&q).zip(&g) {
                    *d = qi * (gi - gq);
                }
                chain_outer(student.row(s), &d_a, grad.row_mut(s));
            }
        }
    }
    Ok(grad)
}

/// Pulls a symmetric `∂L/∂a` back through `a = z zᵀ`: `∂L/∂z_k = 2 Σ_i z_i D_ik`.
fn chain_outer(z: &[f64], d_a: &[f64], out: &mut [f64]) {
    let n = z.len();
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, &zi) in z.iter().enumerate() {
            acc += zi * d_a[i * n + k];
        }
        *o = 2.0 * acc;
    }
}

/// Per-class decomposition of the per-sample gradient.
///
/// `addends[s]` is `N×N`; entry `(k, i)` is `z_{i,S}^s (ã_{ik,S}^s − ã_{ik,T}^s)`,
/// the contribution of class `i` to the gradient on class `k`, weighted by the
/// student's own logit for class `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefWeightReport {
    pub addends: Vec<Matrix>,
}

impl BeliefWeightReport {
    pub fn batch_size(&self) -> usize {
        self.addends.len()
    }

    /// `(2/b)` times the row sums: reproduces the per-sample gradient.
    pub fn gradient(&self) -> Matrix {
        let b = self.addends.len();
        let n = self.addends.first().map_or(0, Matrix::rows);
        let mut g = Matrix::zeros(b, n);
        for (s, m) in self.addends.iter().enumerate() {
            for k in 0..n {
                let row_sum: f64 = m.row(k).iter().sum();
                g.set(s, k, 2.0 / b as f64 * row_sum);
            }
        }
        g
    }

    /// Long-format CSV `sample,class_k,class_i,addend`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,class_k,class_i,addend\n");
        for (s, m) in self.addends.iter().enumerate() {
            for k in 0..m.rows() {
                for i in 0..m.cols() {
                    let _ = writeln!(out, "{s},{k},{i},{:.8e}", m.get(k, i));
                }
            }
        }
        out
    }
}

pub fn belief_weight_report(
    student: &LogitBatch,
    teacher: &LogitBatch,
) -> Result<BeliefWeightReport> {
    check_pair(student, teacher)?;
    let n = student.cols();
    let mut addends = Vec::with_capacity(student.rows());
    for s in 0..student.rows() {
        let z = student.row(s);
        let q = icc_map_per_sample(z)?;
        let p = icc_map_per_sample(teacher.row(s))?;
        let mut m = Matrix::zeros(n, n);
        for k in 0..n {
            for (i, &zi) in z.iter().enumerate() {
                m.set(k, i, zi * (q.get(i, k) - p.get(i, k)));
            }
        }
        addends.push(m);
    }
    Ok(BeliefWeightReport { addends })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{rng_normal, Rng};

    fn batch(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Direct evaluation of the map entry by entry, no shared helpers.
    fn oracle_map(z: &[f64]) -> Vec<Vec<f64>> {
        let n = z.len();
        let denom: f64 = (0..n)
            .flat_map(|u| (0..n).map(move |v| (u, v)))
            .map(|(u, v)| (z[u] * z[v]).exp())
            .sum();
        (0..n)
            .map(|i| (0..n).map(|j| (z[i] * z[j]).exp() / denom).collect())
            .collect()
    }

    fn oracle_kl(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
        let mut acc = 0.0;
        for (pr, qr) in p.iter().zip(q) {
            for (a, b) in pr.iter().zip(qr) {
                acc += a * (a / b).ln();
            }
        }
        acc
    }

    fn random_batch(rng: &mut Rng, b: usize, n: usize) -> Matrix {
        Matrix::new(b, n, rng_normal(rng, b * n, 0.0, 1.0)).unwrap()
    }

    fn central_diff_loss(
        student: &Matrix,
        teacher: &Matrix,
        mode: IccLossMode,
        h: f64,
    ) -> Matrix {
        let mut g = Matrix::zeros(student.rows(), student.cols());
        for idx in 0..student.data().len() {
            let mut plus = student.clone();
            plus.data_mut()[idx] += h;
            let mut minus = student.clone();
            minus.data_mut()[idx] -= h;
            g.data_mut()[idx] = (icc_loss(&plus, teacher, mode).unwrap()
                - icc_loss(&minus, teacher, mode).unwrap())
                / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_logits_give_uniform_map() {
        let m = icc_map_per_sample(&[0.0, 0.0]).unwrap();
        assert!(m.entries().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn one_hot_logit_fixture() {
        let m = icc_map_per_sample(&[1.0, 0.0]).unwrap();
        let o = oracle_map(&[1.0, 0.0]);
        let e = std::f64::consts::E;
        assert!((o[0][0] - e / (e + 3.0)).abs() < 1e-15);
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.get(i, j) - o[i][j]).abs() < 1e-15);
            }
        }
        assert!((m.get(0, 0) - 0.475367).abs() < 1e-6);
        for (i, j) in [(0, 1), (1, 0), (1, 1)] {
            assert!((m.get(i, j) - 0.174878).abs() < 1e-6);
        }
        assert_eq!(m, icc_map_per_sample(&[-1.0, 0.0]).unwrap());
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(icc_map_per_sample(&[1.0]), Err(Error::Config(_))));
        assert!(matches!(
            icc_map_batch(&Matrix::zeros(0, 3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_map_is_entrywise_mean() {
        let z = [0.3, -1.2, 2.0];
        let single = icc_map_per_sample(&z).unwrap();
        assert_eq!(icc_map_batch(&batch(&[&z])).unwrap(), single);
        let twice = icc_map_batch(&batch(&[&z, &z])).unwrap();
        assert!(twice.entries().max_abs_diff(single.entries()) < 1e-16);

        let mut rng = Rng::new(19);
        let b = random_batch(&mut rng, 3, 4);
        let avg = icc_map_batch(&b).unwrap();
        let maps: Vec<_> = (0..3).map(|s| oracle_map(b.row(s))).collect();
        for i in 0..4 {
            for j in 0..4 {
                let expected = (maps[0][i][j] + maps[1][i][j] + maps[2][i][j]) / 3.0;
                assert!((avg.get(i, j) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn loss_fixture() {
        let s = batch(&[&[1.0, 0.0]]);
        let t = batch(&[&[0.0, 0.0]]);
        let expected = oracle_kl(&oracle_map(&[0.0, 0.0]), &oracle_map(&[1.0, 0.0]));
        for mode in [IccLossMode::PerSampleMeanKL, IccLossMode::AveragedMapKL] {
            let l = icc_loss(&s, &t, mode).unwrap();
            assert!((l - expected).abs() < 1e-14);
            assert!((l - 0.107374).abs() < 1e-6);
        }
        let reversed = icc_loss(&t, &s, IccLossMode::PerSampleMeanKL).unwrap();
        let expected_rev = oracle_kl(&oracle_map(&[1.0, 0.0]), &oracle_map(&[0.0, 0.0]));
        assert!((reversed - expected_rev).abs() < 1e-14);
        assert!((reversed - expected).abs() > 1e-3);
    }

    #[test]
    fn self_divergence_is_zero() {
        let mut rng = Rng::new(2);
        let b = random_batch(&mut rng, 5, 6);
        for mode in [IccLossMode::PerSampleMeanKL, IccLossMode::AveragedMapKL] {
            assert!(icc_loss(&b, &b, mode).unwrap().abs() < 1e-15);
            assert!(icc_loss_grad(&b, &b, mode)
                .unwrap()
                .data()
                .iter()
                .all(|&g| g.abs() < 1e-15));
        }
    }

    #[test]
    fn gradient_fixture() {
        let s = batch(&[&[1.0, 0.0]]);
        let t = batch(&[&[0.0, 0.0]]);
        let g = icc_loss_grad(&s, &t, IccLossMode::PerSampleMeanKL).unwrap();
        let fd = central_diff_loss(&s, &t, IccLossMode::PerSampleMeanKL, 1e-5);
        assert!(max_rel_err(&g, &fd) < 1e-8);
        assert!((g.get(0, 0) - 0.450734).abs() < 1e-6);
        assert!((g.get(0, 1) + 0.150244).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences_both_modes() {
        let mut rng = Rng::new(1234);
        let s = random_batch(&mut rng, 4, 10);
        let t = random_batch(&mut rng, 4, 10);
        let per = icc_loss_grad(&s, &t, IccLossMode::PerSampleMeanKL).unwrap();
        let avg = icc_loss_grad(&s, &t, IccLossMode::AveragedMapKL).unwrap();
        for (g, mode) in [
            (&per, IccLossMode::PerSampleMeanKL),
            (&avg, IccLossMode::AveragedMapKL),
        ] {
            let fd = central_diff_loss(&s, &t, mode, 1e-5);
            let err = max_rel_err(g, &fd);
            assert!(err < 1e-6, "{mode:?}: rel err {err}");
        }
        assert!(per.max_abs_diff(&avg) > 1e-6);
    }

    #[test]
    fn not_shift_invariant() {
        let z = [0.4, -0.7, 1.1];
        let shifted: Vec<f64> = z.iter().map(|v| v + 0.5).collect();
        let a = icc_map_per_sample(&z).unwrap();
        let b = icc_map_per_sample(&shifted).unwrap();
        assert!(a.entries().max_abs_diff(b.entries()) > 1e-3);
    }

    #[test]
    fn belief_report_reproduces_gradient() {
        let s = batch(&[&[1.0, 0.0]]);
        let t = batch(&[&[0.0, 0.0]]);
        let r = belief_weight_report(&s, &t).unwrap();
        let g = r.gradient();
        assert!((g.get(0, 0) - 0.450734).abs() < 1e-6);
        assert!((g.get(0, 1) + 0.150244).abs() < 1e-6);
        assert!(belief_weight_report(&t, &t)
            .unwrap()
            .addends
            .iter()
            .all(|m| m.data().iter().all(|&v| v == 0.0)));

        let mut rng = Rng::new(77);
        let s = random_batch(&mut rng, 3, 5);
        let t = random_batch(&mut rng, 3, 5);
        let analytic = icc_loss_grad(&s, &t, IccLossMode::PerSampleMeanKL).unwrap();
        let from_report = belief_weight_report(&s, &t).unwrap().gradient();
        assert!(analytic.max_abs_diff(&from_report) < 1e-14);
    }

    #[test]
    fn belief_weight_scales_with_own_logit() {
        // With both maps held fixed, class i's addend is linear in z_i.
        let z = [0.8, -0.4, 1.3];
        let q = icc_map_per_sample(&z).unwrap();
        let p = icc_map_per_sample(&[0.1, 0.9, -0.2]).unwrap();
        let (i, k) = (2, 0);
        let gap = q.get(i, k) - p.get(i, k);
        assert!(gap.abs() > 1e-6);
        let addend = |zi: f64| (zi * gap).abs();
        assert!(addend(2.0 * z[i]) > addend(z[i]));
        assert!(addend(4.0 * z[i]) > addend(2.0 * z[i]));
    }

    #[test]
    fn csv_round_trip() {
        let m = icc_map_per_sample(&[0.5, -1.5, 2.0]).unwrap();
        let text = m.to_csv();
        assert_eq!(text.lines().count(), 10);
        let back = IccMap::parse_csv(&text).unwrap();
        assert!(back.entries().max_abs_diff(m.entries()) < 1e-8);
        assert!((back.entries().sum() - 1.0).abs() < 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::numerics::Rng;

        proptest! {
            #[test]
            fn map_invariants(z in prop::collection::vec(-4.0f64..4.0, 2..17)) {
                let m = icc_map_per_sample(&z).unwrap();
                let neg: Vec<f64> = z.iter().map(|v| -v).collect();
                let flipped = icc_map_per_sample(&neg).unwrap();
                prop_assert!((m.entries().sum() - 1.0).abs() < 1e-12);
                prop_assert!(m.entries().data().iter().all(|&v| v >= 0.0));
                prop_assert!(m.entries().max_abs_diff(&m.entries().transpose()) < 1e-12);
                prop_assert!(m.entries().max_abs_diff(flipped.entries()) <= 1e-15);
            }

            #[test]
            fn loss_nonnegative_and_grad_checks(seed in any::<u64>(), b in 1usize..9, n in 2usize..17) {
                let mut rng = Rng::new(seed);
                let s = random_batch(&mut rng, b, n);
                let t = random_batch(&mut rng, b, n);
                for mode in [IccLossMode::PerSampleMeanKL, IccLossMode::AveragedMapKL] {
                    let l = icc_loss(&s, &t, mode).unwrap();
                    prop_assert!(l > 0.0);
                    let g = icc_loss_grad(&s, &t, mode).unwrap();
                    let fd = central_diff_loss(&s, &t, mode, 1e-5);
                    let abs = g.max_abs_diff(&fd);
                    let scale = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    prop_assert!(abs <= 1e-6 * scale.max(1e-3), "{:?} abs {} scale {}", mode, abs, scale);
                }
            }
        }
    }
}
