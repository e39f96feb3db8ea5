//! Teacher-student training in the three capacity scenarios.
//!
//! Every run goes through [`run_training`]: solo training is the same loop
//! with no teacher, so `λ = 0` distillation reproduces it bit for bit.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{batch_indices, Dataset, Split};
use crate::error::{Error, Result};
use crate::gradcheck::LogitObjective;
use crate::icc::IccLossMode;
use crate::kd::KdConfig;
use crate::mlp::{
    argmax, backward, ce_loss_and_grad, forward, init, predict_logits, NetworkParams, NetworkSpec,
    Optimizer, OptimizerConfig,
};
use crate::numerics::{Matrix, Rng};

/// Transfer-loss weights chosen by held-out validation for CIFAR-10 / CIFAR-100.
pub const CIFAR_LAMBDA_ICC: (f64, f64) = (1500.0, 1800.0);
pub const CIFAR_LAMBDA_KD: (f64, f64) = (300.0, 800.0);
pub const CIFAR_LAMBDA_LT: (f64, f64) = (80.0, 150.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Transfer {
    None,
    Icc {
        #[serde(default)]
        mode: IccLossMode,
    },
    Kd {
        temperature: f64,
    },
    Lt,
}

impl Transfer {
    /// Column label used in summaries.
    pub fn label(&self) -> &'static str {
        match self {
            Transfer::None => "S(B)",
            Transfer::Icc { .. } => "ICCT",
            Transfer::Kd { .. } => "KD",
            Transfer::Lt => "LT",
        }
    }

    pub fn objective(&self) -> Result<Option<LogitObjective>> {
        Ok(match *self {
            Transfer::None => None,
            Transfer::Icc { mode } => Some(LogitObjective::Icc(mode)),
            Transfer::Kd { temperature } => Some(LogitObjective::Kd(KdConfig::new(temperature)?)),
            Transfer::Lt => Some(LogitObjective::Lt),
        })
    }
}

/// Capacity relation between teacher and student. Declarative only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum Scenario {
    TeacherLarger,
    Equal { generations: usize },
    TeacherSmaller,
}

impl Scenario {
    pub fn label(&self) -> &'static str {
        match self {
            Scenario::TeacherLarger => "Cap_T>Cap_S",
            Scenario::Equal { .. } => "Cap_T=Cap_S",
            Scenario::TeacherSmaller => "Cap_T<Cap_S",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub transfer: Transfer,
    pub lambda: f64,
    pub scenario: Scenario,
    pub teacher_spec: NetworkSpec,
    pub student_spec: NetworkSpec,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Scenario::Equal { generations } = self.scenario {
            if generations == 0 {
                return Err(Error::config("scenario.generations must be at least 1"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        self.teacher_spec.validate()?;
        self.student_spec.validate()?;
        self.optimizer.validate()?;
        self.transfer.objective()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_err: f64,
    pub test_err: f64,
    pub label_loss: f64,
    pub transfer_loss: f64,
    /// `label_loss + λ · transfer_loss`, accumulated batch by batch.
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    #[serde(default)]
    pub scenario: Option<String>,
    pub generation: Option<usize>,
    pub seed: u64,
    pub lambda: f64,
    pub records: Vec<EpochRecord>,
    pub final_test_error: f64,
    pub config: serde_json::Value,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunReport {
    pub const CSV_HEADER: &'static str = "epoch,train_err,test_err,label_loss,transfer_loss";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?}",
                r.epoch, r.train_err, r.test_err, r.label_loss, r.transfer_loss
            );
        }
        out
    }

    /// Config echo plus final error. Wall time is left out so reruns are byte-identical.
    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.sidecar_json()).map_err(|e| Error::io(&json, e))
    }

    pub fn read_sidecar(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: bad run report: {e}", path.display())))
    }
}

/// Percentage of rows whose argmax prediction (ties to the lowest index) is wrong.
pub fn evaluate(params: &NetworkParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let logits = predict_logits(params, &dataset.features)?;
    Ok(error_percent(&logits, &dataset.labels))
}

fn error_percent(logits: &Matrix, labels: &[usize]) -> f64 {
    let wrong = labels
        .iter()
        .enumerate()
        .filter(|&(s, &y)| argmax(logits.row(s)) != y)
        .count();
    100.0 * wrong as f64 / labels.len() as f64
}

/// A frozen teacher's logits on every training row.
struct TeacherSignal<'a> {
    logits: &'a Matrix,
    objective: LogitObjective,
}

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5EED;

fn epoch_zero_losses(
    params: &NetworkParams,
    data: &DataSplit,
    teacher: Option<&TeacherSignal<'_>>,
    lambda: f64,
    batch_size: usize,
) -> Result<(f64, f64, f64)> {
    let n = data.train.len();
    let logits = predict_logits(params, &data.train.features)?;
    let (mut label, mut transfer, mut total) = (0.0, 0.0, 0.0);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let z = logits.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
        let (ce, _) = ce_loss_and_grad(&z, &labels)?;
        let t = match teacher {
            Some(sig) => sig.objective.loss(&z, &sig.logits.select_rows(&idx))?,
            None => 0.0,
        };
        let w = idx.len() as f64;
        label += w * ce;
        transfer += w * t;
        total += w * (ce + lambda * t);
        start += batch_size;
    }
    Ok((label / n as f64, transfer / n as f64, total / n as f64))
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    label: &str,
    spec: &NetworkSpec,
    teacher: Option<TeacherSignal<'_>>,
    lambda: f64,
    data: &DataSplit,
    optimizer: &OptimizerConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    initial: Option<NetworkParams>,
    config_echo: serde_json::Value,
) -> Result<(NetworkParams, RunReport)> {
    let started = Instant::now();
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    if data.train.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if spec.input_dim() != data.train.dim() {
        return Err(Error::config(format!(
            "student_spec.layer_sizes[0] = {} but data dim = {}",
            spec.input_dim(),
            data.train.dim()
        )));
    }
    if spec.n_classes() != data.train.n_classes {
        return Err(Error::config(format!(
            "student_spec output width {} but data has {} classes",
            spec.n_classes(),
            data.train.n_classes
        )));
    }
    let mut params = match initial {
        Some(p) => {
            if p.layer_sizes() != spec.layer_sizes {
                return Err(Error::config(
                    "initial student parameters do not match student_spec.layer_sizes",
                ));
            }
            p
        }
        None => init(&spec.with_seed(Rng::derive(seed, INIT_STREAM).next_u64()))?,
    };
    let mut opt = Optimizer::new(optimizer.clone())?;
    let mut shuffle = Rng::derive(seed, SHUFFLE_STREAM);

    let (l0, t0, tot0) = epoch_zero_losses(&params, data, teacher.as_ref(), lambda, batch_size)?;
    let mut report = RunReport {
        label: label.to_string(),
        scenario: None,
        generation: None,
        seed,
        lambda,
        records: vec![EpochRecord {
            epoch: 0,
            train_err: evaluate(&params, &data.train)?,
            test_err: evaluate(&params, &data.test)?,
            label_loss: l0,
            transfer_loss: t0,
            total_loss: tot0,
        }],
        final_test_error: 0.0,
        config: config_echo,
        wall_time_secs: 0.0,
    };

    let n = data.train.len() as f64;
    for epoch in 0..epochs {
        let (mut label_sum, mut transfer_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for idx in batch_indices(data.train.len(), batch_size, &mut shuffle) {
            let inputs = data.train.features.select_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let (logits, cache) = forward(&params, &inputs)?;
            let diverged = |mut report: RunReport| {
                report.final_test_error = report.records.last().map_or(100.0, |r| r.test_err);
                report.wall_time_secs = started.elapsed().as_secs_f64();
                Error::Run {
                    message: format!("{label}: training diverged in epoch {}", epoch + 1),
                    partial: Box::new(report),
                }
            };
            if !logits.is_finite() {
                return Err(diverged(report));
            }
            let (ce, mut d_logits) = ce_loss_and_grad(&logits, &labels)?;
            let mut transfer_loss = 0.0;
            if let Some(sig) = &teacher {
                let t_logits = sig.logits.select_rows(&idx);
                transfer_loss = sig.objective.loss(&logits, &t_logits)?;
                if lambda != 0.0 {
                    d_logits.add_scaled(&sig.objective.grad(&logits, &t_logits)?, lambda)?;
                }
            }
            let total = ce + lambda * transfer_loss;
            if !total.is_finite() || !d_logits.is_finite() {
                return Err(diverged(report));
            }
            let w = idx.len() as f64;
            label_sum += w * ce;
            transfer_sum += w * transfer_loss;
            total_sum += w * total;
            let grads = backward(&params, &cache, &d_logits)?;
            opt.step(&mut params, &grads, epoch)?;
        }
        report.records.push(EpochRecord {
            epoch: epoch + 1,
            train_err: evaluate(&params, &data.train)?,
            test_err: evaluate(&params, &data.test)?,
            label_loss: label_sum / n,
            transfer_loss: transfer_sum / n,
            total_loss: total_sum / n,
        });
    }
    report.final_test_error = report.records.last().expect("epoch 0").test_err;
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((params, report))
}

/// Cross-entropy-only training; the network is initialized from `seed`.
pub fn train_solo(
    spec: &NetworkSpec,
    data: &DataSplit,
    optimizer: &OptimizerConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(NetworkParams, RunReport)> {
    let echo = serde_json::json!({
        "mode": "solo",
        "spec": spec,
        "optimizer": optimizer,
        "epochs": epochs,
        "batch_size": batch_size,
        "seed": seed,
    });
    run_training(
        "S(B)", spec, None, 0.0, data, optimizer, epochs, batch_size, seed, None, echo,
    )
}

/// Trains a fresh student against a frozen teacher.
pub fn distill(
    teacher: &NetworkParams,
    cfg: &DistillConfig,
    data: &DataSplit,
) -> Result<(NetworkParams, RunReport)> {
    distill_from(teacher, None, cfg, data)
}

/// [`distill`] starting from given student weights instead of a fresh init.
pub fn distill_from(
    teacher: &NetworkParams,
    initial_student: Option<NetworkParams>,
    cfg: &DistillConfig,
    data: &DataSplit,
) -> Result<(NetworkParams, RunReport)> {
    cfg.validate()?;
    if teacher.n_classes() != cfg.student_spec.n_classes() {
        return Err(Error::config(format!(
            "teacher has {} output classes but student_spec expects {}",
            teacher.n_classes(),
            cfg.student_spec.n_classes()
        )));
    }
    if teacher.input_dim() != data.train.dim() {
        return Err(Error::config(format!(
            "teacher input width {} does not match data dim {}",
            teacher.input_dim(),
            data.train.dim()
        )));
    }
    let teacher_logits = predict_logits(teacher, &data.train.features)?;
    let signal = cfg.transfer.objective()?.map(|objective| TeacherSignal {
        logits: &teacher_logits,
        objective,
    });
    let echo = serde_json::to_value(cfg).expect("config serializes");
    let (params, mut report) = run_training(
        cfg.transfer.label(),
        &cfg.student_spec,
        signal,
        cfg.lambda,
        data,
        &cfg.optimizer,
        cfg.epochs,
        cfg.batch_size,
        cfg.seed,
        initial_student,
        echo,
    )?;
    report.scenario = Some(cfg.scenario.label().to_string());
    Ok((params, report))
}

#[derive(Debug, Clone)]
pub struct Generation {
    /// 0 is the solo baseline; `k ≥ 1` prints as `Gen #k`.
    pub index: usize,
    pub params: NetworkParams,
    pub report: RunReport,
}

impl Generation {
    pub fn label(&self) -> String {
        generation_label(self.index)
    }
}

pub fn generation_label(index: usize) -> String {
    if index == 0 {
        "S(B)".to_string()
    } else {
        format!("Gen #{index}")
    }
}

/// Completed generations, plus the error that stopped the chain early, if any.
#[derive(Debug)]
pub struct BornAgainOutcome {
    pub generations: Vec<Generation>,
    pub error: Option<Error>,
}

/// Generation 0 trains the student spec alone; generation `k` distills from
/// generation `k − 1` into a fresh network seeded with `seed + k`.
pub fn born_again(cfg: &DistillConfig, data: &DataSplit) -> Result<BornAgainOutcome> {
    cfg.validate()?;
    let generations = match cfg.scenario {
        Scenario::Equal { generations } => generations,
        _ => return Err(Error::config("born-again needs scenario Equal { generations }")),
    };
    let mut out = Vec::with_capacity(generations + 1);
    let (params, mut report) = match train_solo(
        &cfg.student_spec,
        data,
        &cfg.optimizer,
        cfg.epochs,
        cfg.batch_size,
        cfg.seed,
    ) {
        Ok(v) => v,
        Err(e) => {
            return Ok(BornAgainOutcome {
                generations: out,
                error: Some(e),
            })
        }
    };
    report.generation = Some(0);
    report.scenario = Some(cfg.scenario.label().to_string());
    out.push(Generation {
        index: 0,
        params,
        report,
    });
    for k in 1..=generations {
        let gen_cfg = DistillConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            ..cfg.clone()
        };
        let teacher = &out.last().expect("gen 0").params;
        match distill(teacher, &gen_cfg, data) {
            Ok((params, mut report)) => {
                report.label = generation_label(k);
                report.generation = Some(k);
                out.push(Generation {
                    index: k,
                    params,
                    report,
                });
            }
            Err(e) => {
                return Ok(BornAgainOutcome {
                    generations: out,
                    error: Some(e),
                })
            }
        }
    }
    Ok(BornAgainOutcome {
        generations: out,
        error: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub best: f64,
    /// `(λ, validation error %)` in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Picks `λ` from `grid` by validation error on a held-out slice of the
/// training set. Ties go to the earlier grid entry.
pub fn select_lambda(
    teacher: &NetworkParams,
    cfg: &DistillConfig,
    data: &DataSplit,
    grid: &[f64],
    holdout_fraction: f64,
) -> Result<LambdaSweep> {
    if grid.is_empty() {
        return Err(Error::config("lambda grid is empty"));
    }
    if !(0.0 < holdout_fraction && holdout_fraction < 1.0) {
        return Err(Error::config("holdout fraction must lie in (0, 1)"));
    }
    let n = data.train.len();
    let n_val = ((n as f64) * holdout_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::config("training set too small for a held-out split"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(cfg.seed, 0x4A11).shuffle(&mut order);
    let (fit_idx, val_idx) = order.split_at(n - n_val);
    let split = DataSplit {
        train: data.train.subset(fit_idx, Split::Train),
        test: data.train.subset(val_idx, Split::Test),
    };
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        // A diverging candidate is scored as a total miss rather than aborting the sweep.
        let err = match distill(teacher, &DistillConfig { lambda, ..cfg.clone() }, &split) {
            Ok((_, report)) => report.final_test_error,
            Err(Error::Run { .. }) => 100.0,
            Err(e) => return Err(e),
        };
        scores.push((lambda, err));
    }
    let best = scores
        .iter()
        .fold(None::<(f64, f64)>, |acc, &(l, e)| match acc {
            Some((_, be)) if be <= e => acc,
            _ => Some((l, e)),
        })
        .expect("non-empty")
        .0;
    Ok(LambdaSweep { best, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_synthetic, SynthSpec};
    use crate::mlp::OptimizerKind;

    fn small_data() -> DataSplit {
        let spec = SynthSpec {
            n_classes: 4,
            dim: 6,
            train_per_class: 60,
            test_per_class: 30,
            center_scale: 3.0,
            stddev: 0.8,
            overlap_pairs: 1,
            pair_separation: 1.5,
            seed: 3,
        };
        let (train, test) = gen_synthetic(&spec).unwrap();
        DataSplit { train, test }
    }

    fn sgd() -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::SgdNesterov,
            learning_rate: 0.05,
            weight_decay: 1e-4,
            momentum: 0.9,
            schedule: vec![],
        }
    }

    fn cfg(transfer: Transfer, lambda: f64) -> DistillConfig {
        DistillConfig {
            transfer,
            lambda,
            scenario: Scenario::TeacherLarger,
            teacher_spec: NetworkSpec::new(vec![6, 32, 4], 0).unwrap(),
            student_spec: NetworkSpec::new(vec![6, 8, 4], 0).unwrap(),
            optimizer: sgd(),
            epochs: 4,
            batch_size: 16,
            seed: 11,
        }
    }

    fn teacher(data: &DataSplit) -> NetworkParams {
        let spec = NetworkSpec::new(vec![6, 32, 4], 0).unwrap();
        train_solo(&spec, data, &sgd(), 5, 16, 99).unwrap().0
    }

    #[test]
    fn solo_is_deterministic_and_learns() {
        let data = small_data();
        let spec = NetworkSpec::new(vec![6, 16, 4], 0).unwrap();
        let (p1, r1) = train_solo(&spec, &data, &sgd(), 15, 16, 5).unwrap();
        let (p2, r2) = train_solo(&spec, &data, &sgd(), 15, 16, 5).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.to_csv(), r2.to_csv());
        assert_eq!(r1.records.len(), 16);
        assert!(r1.final_test_error < r1.records[0].test_err);
        assert!(r1.records.iter().all(|r| (0.0..=100.0).contains(&r.test_err)));
    }

    #[test]
    fn zero_epochs_reports_initial_state() {
        let data = small_data();
        let spec = NetworkSpec::new(vec![6, 4], 0).unwrap();
        let (_, r) = train_solo(&spec, &data, &sgd(), 0, 16, 5).unwrap();
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.records[0].epoch, 0);
        assert_eq!(r.final_test_error, r.records[0].test_err);
    }

    #[test]
    fn lambda_zero_matches_solo_bitwise() {
        let data = small_data();
        let t = teacher(&data);
        let c = cfg(Transfer::Icc { mode: IccLossMode::PerSampleMeanKL }, 0.0);
        let (distilled, _) = distill(&t, &c, &data).unwrap();
        let (solo, _) = train_solo(&c.student_spec, &data, &c.optimizer, c.epochs, c.batch_size, c.seed).unwrap();
        assert_eq!(distilled.to_bytes(), solo.to_bytes());
    }

    #[test]
    fn teacher_is_frozen_and_totals_add_up() {
        let data = small_data();
        let t = teacher(&data);
        let before = t.to_bytes();
        for transfer in [
            Transfer::Icc { mode: IccLossMode::AveragedMapKL },
            Transfer::Kd { temperature: 4.0 },
            Transfer::Lt,
        ] {
            let c = cfg(transfer, 0.5);
            let (_, r) = distill(&t, &c, &data).unwrap();
            assert_eq!(t.to_bytes(), before);
            for rec in &r.records {
                assert!(rec.transfer_loss >= 0.0);
                assert!((rec.total_loss - (rec.label_loss + 0.5 * rec.transfer_loss)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn copy_of_teacher_has_zero_transfer() {
        let data = small_data();
        let t = teacher(&data);
        let mut c = cfg(Transfer::Icc { mode: IccLossMode::PerSampleMeanKL }, 0.05);
        c.student_spec = c.teacher_spec.clone();
        let (_, r) = distill_from(&t, Some(t.clone()), &c, &data).unwrap();
        assert_eq!(r.records[0].transfer_loss, 0.0);
        let z = predict_logits(&t, &data.train.features.select_rows(&[0, 1, 2])).unwrap();
        let obj = LogitObjective::Icc(IccLossMode::PerSampleMeanKL);
        assert!(obj.grad(&z, &z).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn class_count_mismatch() {
        let data = small_data();
        let other = init(&NetworkSpec::new(vec![6, 5], 0).unwrap()).unwrap();
        let err = distill(&other, &cfg(Transfer::Lt, 1.0), &data).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("classes")), "{err}");
    }

    #[test]
    fn evaluate_edge_cases() {
        let data = small_data();
        // Constant predictor: all-zero weights predict class 0 (lowest index on ties).
        let mut p = init(&NetworkSpec::new(vec![6, 4], 0).unwrap()).unwrap();
        for l in p.layers_mut() {
            l.weight.data_mut().fill(0.0);
        }
        let e = evaluate(&p, &data.test).unwrap();
        assert!((e - 75.0).abs() < 1e-12);

        let mut order: Vec<usize> = (0..data.test.len()).collect();
        order.reverse();
        let t = teacher(&data);
        let shuffled = data.test.subset(&order, Split::Test);
        assert_eq!(evaluate(&t, &data.test).unwrap(), evaluate(&t, &shuffled).unwrap());
    }

    #[test]
    fn perfect_predictor() {
        // One-hot features through an identity layer.
        let n = 4;
        let features = Matrix::identity(n);
        let ds = Dataset::new(features, (0..n).collect(), n, Split::Test).unwrap();
        let p = NetworkParams::from_layers(vec![crate::mlp::Layer {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
        }])
        .unwrap();
        assert_eq!(evaluate(&p, &ds).unwrap(), 0.0);
    }

    #[test]
    fn born_again_labels() {
        let data = small_data();
        let mut c = cfg(Transfer::Icc { mode: IccLossMode::PerSampleMeanKL }, 1.0);
        c.scenario = Scenario::Equal { generations: 2 };
        c.epochs = 2;
        let out = born_again(&c, &data).unwrap();
        assert!(out.error.is_none());
        let labels: Vec<String> = out.generations.iter().map(Generation::label).collect();
        assert_eq!(labels, ["S(B)", "Gen #1", "Gen #2"]);
        assert_eq!(out.generations[2].report.label, "Gen #2");

        c.scenario = Scenario::Equal { generations: 1 };
        assert_eq!(born_again(&c, &data).unwrap().generations.len(), 2);
        c.scenario = Scenario::Equal { generations: 0 };
        assert!(born_again(&c, &data).is_err());
    }

    #[test]
    fn divergence_keeps_partial_report() {
        let data = small_data();
        let mut opt = sgd();
        opt.learning_rate = 1e12;
        let spec = NetworkSpec::new(vec![6, 16, 4], 0).unwrap();
        match train_solo(&spec, &data, &opt, 5, 16, 1) {
            Err(Error::Run { partial, .. }) => assert!(!partial.records.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn doubling_lambda_doubles_transfer_gradient() {
        let data = small_data();
        let t = teacher(&data);
        let s = init(&NetworkSpec::new(vec![6, 8, 4], 2).unwrap()).unwrap();
        let idx: Vec<usize> = (0..16).collect();
        let x = data.train.features.select_rows(&idx);
        let zt = predict_logits(&t, &x).unwrap();
        let zs = predict_logits(&s, &x).unwrap();
        let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
        let (_, ce) = ce_loss_and_grad(&zs, &labels).unwrap();
        let obj = LogitObjective::Icc(IccLossMode::PerSampleMeanKL);
        let g = obj.grad(&zs, &zt).unwrap();
        let mut one = ce.clone();
        one.add_scaled(&g, 3.0).unwrap();
        let mut two = ce.clone();
        two.add_scaled(&g, 6.0).unwrap();
        for ((a, b), c) in one.data().iter().zip(two.data()).zip(ce.data()) {
            let (d1, d2) = (a - c, b - c);
            assert!((d2 - 2.0 * d1).abs() <= 1e-12 * d1.abs().max(1e-12));
        }
    }

    #[test]
    fn lambda_sweep_prefers_lower_validation_error() {
        let data = small_data();
        let t = teacher(&data);
        let c = cfg(Transfer::Icc { mode: IccLossMode::PerSampleMeanKL }, 1.0);
        let sweep = select_lambda(&t, &c, &data, &[0.001, 0.01, 0.1], 0.2).unwrap();
        assert_eq!(sweep.scores.len(), 3);
        let min = sweep.scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        let first_min = sweep.scores.iter().find(|s| s.1 == min).unwrap().0;
        assert_eq!(sweep.best, first_min);
    }

    #[test]
    fn report_csv_layout() {
        let data = small_data();
        let spec = NetworkSpec::new(vec![6, 4], 0).unwrap();
        let (_, r) = train_solo(&spec, &data, &sgd(), 2, 16, 5).unwrap();
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(RunReport::CSV_HEADER));
        assert_eq!(lines.count(), 3);
        let back: RunReport = serde_json::from_str(&r.sidecar_json()).unwrap();
        assert_eq!(back.final_test_error, r.final_test_error);
        assert_eq!(back.records, r.records);
    }
}
