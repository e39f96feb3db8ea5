//! JSON experiment configs and the multi-seed runners behind the CLI.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! <method>/seed_<s>/model.ckpt, report.csv, report.json
//! <method>/summary.csv
//! born_again/seed_<s>/gen_<k>.ckpt, gen_<k>.csv, gen_<k>.json
//! born_again/summary.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{gen_synthetic, load_cifar10, load_csv, Split, SynthSpec};
use crate::distiller::{
    born_again, distill, select_lambda, train_solo, DataSplit, DistillConfig, LambdaSweep,
    RunReport, Scenario, Transfer,
};
use crate::error::{Error, Result};
use crate::mlp::{NetworkParams, NetworkSpec, OptimizerConfig, OptimizerKind, ScheduleStep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Csv { train: PathBuf, test: PathBuf },
    Cifar10 { dir: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<DataSplit> {
        let (train, test) = match self {
            DataSource::Synthetic(spec) => gen_synthetic(spec)?,
            DataSource::Csv { train, test } => {
                let train = load_csv(train)?;
                let mut test = load_csv(test)?;
                test.split = Split::Test;
                if train.dim() != test.dim() || train.n_classes != test.n_classes {
                    return Err(Error::data("train and test CSV headers disagree"));
                }
                (train, test)
            }
            DataSource::Cifar10 { dir } => load_cifar10(dir)?,
        };
        Ok(DataSplit { train, test })
    }
}

/// Architecture and training protocol for one network role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_sizes: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
}

impl ModelConfig {
    pub fn spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::new(self.layer_sizes.clone(), 0)
    }
}

fn default_holdout() -> f64 {
    0.2
}

fn default_transfer() -> Transfer {
    Transfer::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub teacher: Option<ModelConfig>,
    pub student: ModelConfig,
    #[serde(default = "default_transfer")]
    pub transfer: Transfer,
    /// Fixed transfer weight. When absent, `lambda_grid` is swept.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    pub scenario: Scenario,
    pub batch_size: usize,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

/// Which configured network a solo run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds: at least one seed is required"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        for (name, m) in [("student", Some(&self.student)), ("teacher", self.teacher.as_ref())] {
            if let Some(m) = m {
                m.spec()
                    .map_err(|e| Error::config(format!("{name}.layer_sizes: {e}")))?;
                m.optimizer
                    .validate()
                    .map_err(|e| Error::config(format!("{name}.{e}")))?;
            }
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::config("lambda must be >= 0"));
            }
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::config("lambda_grid entries must be >= 0"));
        }
        if let Scenario::Equal { generations: 0 } = self.scenario {
            return Err(Error::config("scenario.generations must be at least 1"));
        }
        self.transfer.objective()?;
        Ok(())
    }

    fn model(&self, role: Role) -> Result<&ModelConfig> {
        match role {
            Role::Student => Ok(&self.student),
            Role::Teacher => self
                .teacher
                .as_ref()
                .ok_or_else(|| Error::config("teacher: section missing from config")),
        }
    }

    /// Distillation settings for one seed. The student protocol drives training.
    pub fn distill_config(&self, seed: u64, lambda: f64) -> Result<DistillConfig> {
        let student = self.student.spec()?;
        let teacher = match &self.teacher {
            Some(t) => t.spec()?,
            None => student.clone(),
        };
        Ok(DistillConfig {
            transfer: self.transfer,
            lambda,
            scenario: self.scenario,
            teacher_spec: teacher,
            student_spec: student,
            optimizer: self.student.optimizer.clone(),
            epochs: self.student.epochs,
            batch_size: self.batch_size,
            seed,
        })
    }

    fn fixed_lambda(&self) -> Result<f64> {
        match (self.lambda, self.transfer) {
            (Some(l), _) => Ok(l),
            (None, Transfer::None) => Ok(0.0),
            (None, _) => Err(Error::config("lambda: required unless lambda_grid is swept")),
        }
    }

    /// The configured `λ`, or the sweep winner on the first seed's teacher.
    pub fn resolve_lambda(
        &self,
        teacher: &NetworkParams,
        data: &DataSplit,
    ) -> Result<(f64, Option<LambdaSweep>)> {
        if self.lambda.is_some() || self.lambda_grid.is_empty() {
            return Ok((self.fixed_lambda()?, None));
        }
        let base = self.distill_config(self.seeds[0], 0.0)?;
        let sweep = select_lambda(teacher, &base, data, &self.lambda_grid, self.holdout_fraction)?;
        Ok((sweep.best, Some(sweep)))
    }
}

/// Number of seed runs allowed in flight, from `ICCT_THREADS` (default 1).
pub fn thread_cap() -> usize {
    std::env::var("ICCT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Runs `f` for every seed with at most `threads` in flight; results keep seed order.
pub fn for_each_seed<T: Send>(
    seeds: &[u64],
    threads: usize,
    f: impl Fn(u64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let threads = threads.max(1);
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(threads) {
        let results: Vec<Result<T>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    let f = &f;
                    scope.spawn(move || f(seed))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed run panicked"))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

pub fn method_dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub params: NetworkParams,
    pub report: RunReport,
}

fn write_seed_run(dir: &Path, run: &SeedRun) -> Result<()> {
    let seed_dir = dir.join(format!("seed_{}", run.seed));
    run.report.write(&seed_dir, "report")?;
    run.params.save(&seed_dir.join("model.ckpt"))
}

/// `method,n_seeds,mean_test_err,per_seed_test_err` with per-seed values joined by `;`.
pub fn summary_csv(rows: &[(String, Vec<(u64, f64)>)]) -> String {
    let mut out = String::from("method,n_seeds,mean_test_err,per_seed_test_err\n");
    for (label, runs) in rows {
        let mean = runs.iter().map(|r| r.1).sum::<f64>() / runs.len().max(1) as f64;
        let per: Vec<String> = runs.iter().map(|(s, e)| format!("{s}:{e:?}")).collect();
        let _ = writeln!(out, "{label},{},{mean:?},{}", runs.len(), per.join(";"));
    }
    out
}

fn write_summary(dir: &Path, rows: &[(String, Vec<(u64, f64)>)]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("summary.csv");
    std::fs::write(&path, summary_csv(rows)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn seed_errors(runs: &[SeedRun]) -> Vec<(u64, f64)> {
    runs.iter().map(|r| (r.seed, r.report.final_test_error)).collect()
}

/// Solo training of the teacher or student network for every seed.
pub fn run_train(cfg: &ExperimentConfig, role: Role, data: &DataSplit) -> Result<Vec<SeedRun>> {
    let model = cfg.model(role)?;
    let spec = model.spec()?;
    let label = match role {
        Role::Teacher => "T(B)",
        Role::Student => "S(B)",
    };
    let dir = cfg.output_dir.join(method_dir_name(label));
    let runs = for_each_seed(&cfg.seeds, thread_cap(), |seed| {
        let (params, mut report) =
            train_solo(&spec, data, &model.optimizer, model.epochs, cfg.batch_size, seed)?;
        report.label = label.to_string();
        report.scenario = Some(cfg.scenario.label().to_string());
        let run = SeedRun { seed, params, report };
        write_seed_run(&dir, &run)?;
        Ok(run)
    })?;
    write_summary(&dir, &[(label.to_string(), seed_errors(&runs))])?;
    Ok(runs)
}

/// Distills every seed's student from one frozen teacher checkpoint.
pub fn run_distill(
    cfg: &ExperimentConfig,
    teacher: &NetworkParams,
    data: &DataSplit,
) -> Result<(f64, Vec<SeedRun>)> {
    check_teacher(cfg, teacher, data)?;
    let (lambda, sweep) = cfg.resolve_lambda(teacher, data)?;
    let label = cfg.transfer.label();
    let dir = cfg.output_dir.join(method_dir_name(label));
    if let Some(sweep) = &sweep {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("lambda_sweep.json");
        let text = serde_json::to_string_pretty(sweep).expect("sweep serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let runs = for_each_seed(&cfg.seeds, thread_cap(), |seed| {
        let (params, report) = distill(teacher, &cfg.distill_config(seed, lambda)?, data)?;
        let run = SeedRun { seed, params, report };
        write_seed_run(&dir, &run)?;
        Ok(run)
    })?;
    write_summary(&dir, &[(label.to_string(), seed_errors(&runs))])?;
    Ok((lambda, runs))
}

/// Names the offending field when a checkpoint does not fit the config or data.
pub fn check_teacher(cfg: &ExperimentConfig, teacher: &NetworkParams, data: &DataSplit) -> Result<()> {
    if let Some(t) = &cfg.teacher {
        if teacher.layer_sizes() != t.layer_sizes {
            return Err(Error::config(format!(
                "teacher.layer_sizes {:?} does not match checkpoint {:?}",
                t.layer_sizes,
                teacher.layer_sizes()
            )));
        }
    }
    if teacher.input_dim() != data.train.dim() {
        return Err(Error::config(format!(
            "checkpoint input width {} does not match data dim {}",
            teacher.input_dim(),
            data.train.dim()
        )));
    }
    if teacher.n_classes() != cfg.student.spec()?.n_classes() {
        return Err(Error::config(format!(
            "student.layer_sizes ends in {} classes but the checkpoint has {}",
            cfg.student.spec()?.n_classes(),
            teacher.n_classes()
        )));
    }
    Ok(())
}

/// One born-again chain per seed. Returns per-seed generation lists.
pub fn run_born_again(cfg: &ExperimentConfig, data: &DataSplit) -> Result<(f64, Vec<Vec<SeedRun>>)> {
    let generations = match cfg.scenario {
        Scenario::Equal { generations } => generations,
        _ => return Err(Error::config("scenario: born-again needs kind Equal")),
    };
    let lambda = match (cfg.lambda, cfg.lambda_grid.is_empty()) {
        (Some(l), _) => l,
        (None, true) => cfg.fixed_lambda()?,
        (None, false) => {
            // Sweep against the first seed's solo student, which is the Gen #1 teacher.
            let spec = cfg.student.spec()?;
            let (teacher, _) = train_solo(
                &spec,
                data,
                &cfg.student.optimizer,
                cfg.student.epochs,
                cfg.batch_size,
                cfg.seeds[0],
            )?;
            cfg.resolve_lambda(&teacher, data)?.0
        }
    };
    let dir = cfg.output_dir.join("born_again");
    let chains = for_each_seed(&cfg.seeds, thread_cap(), |seed| {
        let outcome = born_again(&cfg.distill_config(seed, lambda)?, data)?;
        let seed_dir = dir.join(format!("seed_{seed}"));
        let mut runs = Vec::new();
        for g in outcome.generations {
            let stem = format!("gen_{}", g.index);
            g.report.write(&seed_dir, &stem)?;
            g.params.save(&seed_dir.join(format!("{stem}.ckpt")))?;
            runs.push(SeedRun {
                seed,
                params: g.params,
                report: g.report,
            });
        }
        match outcome.error {
            Some(e) => Err(e),
            None => Ok(runs),
        }
    })?;
    let rows: Vec<(String, Vec<(u64, f64)>)> = (0..=generations)
        .map(|k| {
            let label = crate::distiller::generation_label(k);
            let errs = chains
                .iter()
                .map(|c| (c[k].seed, c[k].report.final_test_error))
                .collect();
            (label, errs)
        })
        .collect();
    write_summary(&dir, &rows)?;
    Ok((lambda, chains))
}

fn method_rank(label: &str) -> (usize, String) {
    let order = ["T(B)", "S(B)", "KD", "LT", "ICCT"];
    match order.iter().position(|m| *m == label) {
        Some(i) => (i, String::new()),
        None => (order.len(), label.to_string()),
    }
}

fn collect_sidecars(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_sidecars(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "json")
            && p.file_name().is_some_and(|n| n != "lambda_sweep.json")
        {
            out.push(p);
        }
    }
    Ok(())
}

/// Comparison table over every run report under `runs`: one row per
/// (scenario, method) with the scenario's S(B)/T(B) means alongside.
pub fn comparison_table(runs: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_sidecars(runs, &mut files)?;
    let mut groups: BTreeMap<(String, (usize, String), String), Vec<f64>> = BTreeMap::new();
    for f in &files {
        let r = RunReport::read_sidecar(f)?;
        let scenario = r.scenario.clone().unwrap_or_else(|| "unspecified".into());
        groups
            .entry((scenario, method_rank(&r.label), r.label.clone()))
            .or_default()
            .push(r.final_test_error);
    }
    if groups.is_empty() {
        return Err(Error::usage(format!(
            "no run reports found under {}",
            runs.display()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let baseline = |scenario: &str, label: &str| {
        groups
            .iter()
            .find(|((s, _, l), _)| s == scenario && l == label)
            .map(|(_, v)| format!("{:.4}", mean(v)))
            .unwrap_or_default()
    };
    let mut out = String::from("scenario,method,n_runs,mean_test_err,s_baseline,t_baseline\n");
    for ((scenario, _, label), errs) in &groups {
        let _ = writeln!(
            out,
            "{scenario},{label},{},{:.4},{},{}",
            errs.len(),
            mean(errs),
            baseline(scenario, "S(B)"),
            baseline(scenario, "T(B)")
        );
    }
    Ok(out)
}

/// Per-seed results of a teacher → student comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioComparison {
    pub lambda: f64,
    pub sweep: Option<LambdaSweep>,
    pub teacher: Vec<f64>,
    pub solo: Vec<f64>,
    pub transferred: Vec<f64>,
    pub solo_reports: Vec<RunReport>,
    pub transferred_reports: Vec<RunReport>,
}

impl ScenarioComparison {
    pub fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Seeds where the transferred student strictly beats its solo twin.
    pub fn wins(&self) -> usize {
        self.solo
            .iter()
            .zip(&self.transferred)
            .filter(|(s, t)| t < s)
            .count()
    }
}

/// Offset between a run seed and the seed of the teacher trained for it.
pub const TEACHER_SEED_OFFSET: u64 = 1000;

/// Trains a teacher per seed (seed + [`TEACHER_SEED_OFFSET`]), a solo
/// student, and a transferred student. `λ` is fixed or swept once on the
/// first seed's teacher.
pub fn compare_scenario(cfg: &ExperimentConfig, data: &DataSplit) -> Result<ScenarioComparison> {
    let teacher_cfg = cfg.model(Role::Teacher)?;
    let teacher_spec = teacher_cfg.spec()?;
    let student_spec = cfg.student.spec()?;
    let train_teacher = |seed: u64| {
        train_solo(
            &teacher_spec,
            data,
            &teacher_cfg.optimizer,
            teacher_cfg.epochs,
            cfg.batch_size,
            seed.wrapping_add(TEACHER_SEED_OFFSET),
        )
    };
    let mut teachers = Vec::with_capacity(cfg.seeds.len());
    let mut teacher_err = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (p, r) = train_teacher(seed)?;
        teacher_err.push(r.final_test_error);
        teachers.push(p);
    }
    let (lambda, sweep) = cfg.resolve_lambda(&teachers[0], data)?;
    let mut out = ScenarioComparison {
        lambda,
        sweep,
        teacher: teacher_err,
        solo: Vec::new(),
        transferred: Vec::new(),
        solo_reports: Vec::new(),
        transferred_reports: Vec::new(),
    };
    for (teacher, &seed) in teachers.iter().zip(&cfg.seeds) {
        let (_, solo) = train_solo(
            &student_spec,
            data,
            &cfg.student.optimizer,
            cfg.student.epochs,
            cfg.batch_size,
            seed,
        )?;
        let (_, distilled) = distill(teacher, &cfg.distill_config(seed, lambda)?, data)?;
        out.solo.push(solo.final_test_error);
        out.transferred.push(distilled.final_test_error);
        out.solo_reports.push(solo);
        out.transferred_reports.push(distilled);
    }
    Ok(out)
}

/// Reference desk-scale protocols for the three capacity scenarios.
pub mod reference {
    use super::*;
    use crate::icc::IccLossMode;

    pub const EPOCHS: usize = 20;
    pub const BATCH_SIZE: usize = 64;
    pub const LAMBDA_GRID: [f64; 5] = [0.01, 0.03, 0.1, 0.3, 1.0];
    pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
    pub const WIDE: [usize; 4] = [32, 256, 256, 10];
    pub const NARROW: [usize; 3] = [32, 32, 10];

    /// Nesterov SGD, lr 0.05, ×0.2 two thirds of the way through.
    pub fn optimizer(weight_decay: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::SgdNesterov,
            learning_rate: 0.05,
            weight_decay,
            momentum: 0.9,
            schedule: vec![ScheduleStep {
                epoch: EPOCHS * 2 / 3,
                multiplier: 0.2,
            }],
        }
    }

    /// Teachers are trained with heavier weight decay than students.
    pub fn teacher(layer_sizes: &[usize]) -> ModelConfig {
        ModelConfig {
            layer_sizes: layer_sizes.to_vec(),
            optimizer: optimizer(1e-2),
            epochs: EPOCHS,
        }
    }

    pub fn student(layer_sizes: &[usize]) -> ModelConfig {
        ModelConfig {
            layer_sizes: layer_sizes.to_vec(),
            optimizer: optimizer(1e-4),
            epochs: EPOCHS,
        }
    }

    fn base(scenario: Scenario, teacher: Option<ModelConfig>, student: ModelConfig, out: &str) -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Synthetic(SynthSpec::reference(7)),
            teacher,
            student,
            transfer: Transfer::Icc {
                mode: IccLossMode::PerSampleMeanKL,
            },
            lambda: None,
            lambda_grid: LAMBDA_GRID.to_vec(),
            holdout_fraction: 0.2,
            scenario,
            batch_size: BATCH_SIZE,
            output_dir: PathBuf::from(out),
            seeds: SEEDS.to_vec(),
        }
    }

    pub fn teacher_larger() -> ExperimentConfig {
        base(Scenario::TeacherLarger, Some(teacher(&WIDE)), student(&NARROW), "runs/teacher_larger")
    }

    pub fn equal(generations: usize) -> ExperimentConfig {
        base(Scenario::Equal { generations }, None, student(&NARROW), "runs/born_again")
    }

    pub fn teacher_smaller() -> ExperimentConfig {
        base(Scenario::TeacherSmaller, Some(teacher(&NARROW)), student(&WIDE), "runs/teacher_smaller")
    }
}
