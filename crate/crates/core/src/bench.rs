//! Synthetic tasks, the training loop and run comparison.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{TaskKind, TrainConfig};
use crate::error::{Error, Result};
use crate::grad::{backward, loss_and_grad, matrix_backward, LossKind, Target};
use crate::layer::{InitScales, LayerShape, LoraExpert, MoeLoraLayer, Routing};
use crate::optim::Optimizer;
use crate::tensor::{softmax, Matrix, RngStream};

const TAG_TASK: u64 = 0x7461_736b;
const TAG_STUDENT: u64 = 0x7374_7564;
const TAG_BATCH: u64 = 0x6261_7463;

/// Planted low-rank correction of a frozen weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankTask {
    pub base: Matrix,
    /// `U·V`, normalized to unit Frobenius norm (zero when the planted rank is 0).
    pub delta: Matrix,
    /// `base + delta`.
    pub target: Matrix,
    /// Mean of the probe tokens; routes the matrix objective.
    pub probe: Vec<f64>,
}

/// Token regression against a frozen teacher layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTask {
    pub teacher: MoeLoraLayer,
    /// N×n cluster centers, one per expert.
    pub centers: Matrix,
    pub train_x: Matrix,
    pub train_y: Matrix,
    pub eval_x: Matrix,
    pub eval_y: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Task {
    LowRank(LowRankTask),
    Teacher(TeacherTask),
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self {
            Task::LowRank(_) => TaskKind::LowRankRecover,
            Task::Teacher(_) => TaskKind::TeacherStudent,
        }
    }

    /// The frozen weight shared by task and student.
    pub fn base(&self) -> &Matrix {
        match self {
            Task::LowRank(t) => &t.base,
            Task::Teacher(t) => t.teacher.base(),
        }
    }

    /// Builds the task described by `cfg` from `seed`.
    pub fn from_config(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let shape = cfg.layer_shape()?;
        match cfg.task {
            TaskKind::LowRankRecover => {
                gen_lowrank_task(shape, cfg.planted_rank, cfg.probe_tokens, seed)
            }
            TaskKind::TeacherStudent => gen_teacher_task(shape, cfg.tokens, cfg.eval_tokens, seed),
        }
    }

    /// Fresh student sharing the task's frozen weight.
    pub fn init_student(
        &self,
        shape: LayerShape,
        scales: InitScales,
        seed: u64,
    ) -> Result<MoeLoraLayer> {
        let rng = RngStream::new(seed).derive(TAG_STUDENT);
        MoeLoraLayer::init_with_base(shape, self.base().clone(), &rng, scales)
    }

    /// Loss on the evaluation data, standard forward.
    pub fn eval_loss(&self, layer: &MoeLoraLayer) -> Result<f64> {
        match self {
            Task::LowRank(t) => {
                let gate = layer.route_token(&t.probe)?;
                let x = layer.effective_weight(&gate.gates)?;
                Ok(loss_and_grad(LossKind::MseMatrix, &x, Target::Dense(&t.target))?.0)
            }
            Task::Teacher(t) => {
                let (y, _) = layer.forward_standard(&t.eval_x, Routing::PerToken)?;
                Ok(loss_and_grad(LossKind::MseToken, &y, Target::Dense(&t.eval_y))?.0)
            }
        }
    }
}

/// `T = W + Δ` with `Δ = U·V` (U: m×R, V: R×n Gaussian) scaled to `‖Δ‖_F = 1`,
/// `W ~ N(0, 1/n)`; the probe is the mean of `probe_tokens` Gaussian tokens.
pub fn gen_lowrank_task(
    shape: LayerShape,
    planted_rank: usize,
    probe_tokens: usize,
    seed: u64,
) -> Result<Task> {
    shape.validate()?;
    let (m, n) = (shape.m, shape.n);
    if planted_rank > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "planted rank {planted_rank} exceeds min(m, n) = {}",
            m.min(n)
        )));
    }
    if probe_tokens == 0 {
        return Err(Error::InvalidArgument(
            "probe_tokens must be positive".into(),
        ));
    }
    let root = RngStream::new(seed).derive(TAG_TASK);
    let base = root
        .derive(1)
        .gaussian_matrix(m, n, 1.0 / (n as f64).sqrt());
    let delta = if planted_rank == 0 {
        Matrix::zeros(m, n)
    } else {
        let mut r = root.derive(2);
        let u = r.gaussian_matrix(m, planted_rank, 1.0);
        let v = r.gaussian_matrix(planted_rank, n, 1.0);
        let d = u.mat_mul(&v)?;
        d.scale(1.0 / d.frobenius_norm())
    };
    let tokens = root.derive(3).gaussian_matrix(n, probe_tokens, 1.0);
    let probe: Vec<f64> = (0..n)
        .map(|i| tokens.row(i).iter().sum::<f64>() / probe_tokens as f64)
        .collect();
    let target = base.add(&delta)?;
    Ok(Task::LowRank(LowRankTask {
        base,
        delta,
        target,
        probe,
    }))
}

/// Router sharpness of the planted teacher.
pub const TEACHER_ROUTER_GAIN: f64 = 8.0;
/// Per-coordinate noise around a cluster center.
pub const TEACHER_CLUSTER_NOISE: f64 = 0.5;

fn cluster_tokens(centers: &Matrix, count: usize, rng: &mut RngStream) -> Matrix {
    let (num, n) = centers.shape();
    let mut x = Matrix::zeros(n, count);
    for t in 0..count {
        let c = rng.below(num);
        let noise = rng.gaussian_vec(n, TEACHER_CLUSTER_NOISE);
        let col: Vec<f64> = centers
            .row(c)
            .iter()
            .zip(&noise)
            .map(|(a, b)| a + b)
            .collect();
        x.set_column(t, &col);
    }
    x
}

/// Teacher with one Gaussian input cluster per expert and a router whose
/// row `j` is `gain · c_j / n`, so tokens near `c_j` put most gate mass on
/// expert `j`. Teacher adapters are `B ~ N(0, 1/m)/s`, `A ~ N(0, 1/n)`.
pub fn gen_teacher_task(
    shape: LayerShape,
    tokens: usize,
    eval_tokens: usize,
    seed: u64,
) -> Result<Task> {
    shape.validate()?;
    if tokens == 0 || eval_tokens == 0 {
        return Err(Error::InvalidArgument(
            "token counts must be positive".into(),
        ));
    }
    let (m, n, num) = (shape.m, shape.n, shape.num_experts);
    let root = RngStream::new(seed).derive(TAG_TASK);
    let base = root
        .derive(1)
        .gaussian_matrix(m, n, 1.0 / (n as f64).sqrt());
    let centers = root.derive(2).gaussian_matrix(num, n, 1.0);
    let router = centers.scale(TEACHER_ROUTER_GAIN / n as f64);
    let mut er = root.derive(3);
    let s = shape.scaling();
    let experts = (0..num)
        .map(|_| LoraExpert {
            b: er.gaussian_matrix(m, shape.rank, 1.0 / ((m as f64).sqrt() * s)),
            a: er.gaussian_matrix(shape.rank, n, 1.0 / (n as f64).sqrt()),
        })
        .collect();
    let teacher = MoeLoraLayer::from_parts(
        shape,
        base,
        experts,
        router,
        crate::layer::ForwardMode::Standard,
    )?;
    let train_x = cluster_tokens(&centers, tokens, &mut root.derive(4));
    let eval_x = cluster_tokens(&centers, eval_tokens, &mut root.derive(5));
    let (train_y, _) = teacher.forward_standard(&train_x, Routing::PerToken)?;
    let (eval_y, _) = teacher.forward_standard(&eval_x, Routing::PerToken)?;
    Ok(Task::Teacher(TeacherTask {
        teacher,
        centers,
        train_x,
        train_y,
        eval_x,
        eval_y,
    }))
}

/// Mean Shannon entropy (nats) of the full router softmax over `x`'s columns.
pub fn mean_router_entropy(layer: &MoeLoraLayer, x: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..x.cols() {
        let logits = layer.router.mat_vec(&x.column(t))?;
        let p = softmax(&logits);
        total -= p
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|q| q * q.ln())
            .sum::<f64>();
    }
    Ok(total / x.cols() as f64)
}

/// Metrics of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    /// Loss of the batch this step trained on, before the update.
    pub train_loss: f64,
    /// Most recent evaluation loss.
    pub eval_loss: f64,
    pub grad_norm_experts: f64,
    pub grad_norm_router: f64,
    pub lr_experts: f64,
    pub lr_router: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub arm: String,
    pub seed: u64,
    pub rows: Vec<StepRecord>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

impl RunRecord {
    pub fn at_step(&self, step: usize) -> Option<&StepRecord> {
        step.checked_sub(1)
            .and_then(|i| self.rows.get(i))
            .filter(|r| r.step == step)
    }

    pub fn final_row(&self) -> Option<&StepRecord> {
        self.rows.last()
    }

    pub fn file_name(&self) -> String {
        format!("{}_{}.csv", self.arm, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub initial: MoeLoraLayer,
    pub trained: MoeLoraLayer,
}

fn gather_columns(x: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), idx.len());
    for (j, &i) in idx.iter().enumerate() {
        out.set_column(j, &x.column(i));
    }
    out
}

/// Trains a fresh student on `task` per `cfg` with seed `seed`.
///
/// The step loop: (matrix objective or sampled batch) → forward in the
/// configured mode → backward → precondition → optimizer step. Evaluation
/// runs before the first update, every `eval_every` steps and at the last
/// step; rows in between carry the previous value.
pub fn train_loop(task: &Task, cfg: &TrainConfig, seed: u64) -> Result<RunOutput> {
    let shape = cfg.layer_shape()?;
    let mut layer = task.init_student(shape, cfg.init_scales(), seed)?;
    layer.mode = cfg.mode;
    let initial = layer.clone();
    let mut opt = Optimizer::new(
        &layer,
        cfg.optimizer_kind(),
        cfg.expert_group(),
        cfg.router_group(),
        cfg.precond_config(),
        cfg.max_steps,
    );
    opt.warmup = cfg.warmup_steps;
    let mut batch_rng = RngStream::new(seed).derive(TAG_BATCH);
    let start = Instant::now();
    let mut record = RunRecord {
        arm: cfg.arm_name(),
        seed,
        rows: Vec::with_capacity(cfg.max_steps),
        aborted: None,
    };
    let mut eval_loss = f64::NAN;

    for t in 0..cfg.max_steps {
        let step = t + 1;
        if t == 0 || step % cfg.eval_every == 0 || step == cfg.max_steps {
            eval_loss = task.eval_loss(&layer)?;
        }
        let (loss, bundle) = match task {
            Task::LowRank(lr) => {
                let gate = layer.route_token(&lr.probe)?;
                let x = layer.effective_weight(&gate.gates)?;
                let (loss, gx) = loss_and_grad(LossKind::MseMatrix, &x, Target::Dense(&lr.target))?;
                if !loss.is_finite() {
                    (loss, None)
                } else {
                    (
                        loss,
                        Some(matrix_backward(
                            &layer,
                            &gate,
                            &gx,
                            cfg.mode,
                            Some(&lr.probe),
                        )?),
                    )
                }
            }
            Task::Teacher(tt) => {
                let idx: Vec<usize> = (0..cfg.batch_size)
                    .map(|_| batch_rng.below(tt.train_x.cols()))
                    .collect();
                let x = gather_columns(&tt.train_x, &idx);
                let y = gather_columns(&tt.train_y, &idx);
                let (pred, cache) = layer.forward(&x, Routing::PerToken)?;
                let (loss, dy) = loss_and_grad(LossKind::MseToken, &pred, Target::Dense(&y))?;
                if !loss.is_finite() {
                    (loss, None)
                } else {
                    (loss, Some(backward(&layer, &cache, &dy)?))
                }
            }
        };
        let Some(bundle) = bundle else {
            record.aborted = Some(format!(
                "non-finite training loss {loss} at step {step} (arm {}, seed {seed})",
                record.arm
            ));
            break;
        };
        let rep = match opt.step(&mut layer, &bundle, t) {
            Ok(rep) => rep,
            Err(e) => {
                record.aborted = Some(format!("optimizer failed at step {step}: {e}"));
                break;
            }
        };
        record.rows.push(StepRecord {
            step,
            train_loss: loss,
            eval_loss,
            grad_norm_experts: rep.grad_norm_experts,
            grad_norm_router: rep.grad_norm_router,
            lr_experts: rep.lr_experts,
            lr_router: rep.lr_router,
            wall_ms: if cfg.wall_clock {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        });
    }
    Ok(RunOutput {
        record,
        initial,
        trained: layer,
    })
}

pub const CSV_HEADER: &str =
    "step,train_loss,eval_loss,grad_norm_experts,grad_norm_router,lr_experts,lr_router,wall_ms";

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn record_to_csv(record: &RunRecord) -> String {
    let mut out = String::with_capacity(160 * (record.rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &record.rows {
        let vals = [
            r.train_loss,
            r.eval_loss,
            r.grad_norm_experts,
            r.grad_norm_router,
            r.lr_experts,
            r.lr_router,
            r.wall_ms,
        ];
        out.push_str(&r.step.to_string());
        for v in vals {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push('\n');
    }
    out
}

/// Writes `<dir>/<arm>_<seed>.csv` and returns its path.
pub fn write_record_csv(dir: &Path, record: &RunRecord) -> Result<PathBuf> {
    let path = dir.join(record.file_name());
    std::fs::write(&path, record_to_csv(record))?;
    Ok(path)
}

/// Runs every `(config, seed)` job on its own thread; results keep job order.
pub fn run_many(jobs: &[(TrainConfig, u64)]) -> Result<Vec<RunOutput>> {
    let results: Vec<Result<RunOutput>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(cfg, seed)| {
                scope.spawn(move || {
                    let task = Task::from_config(cfg, *seed)?;
                    train_loop(&task, cfg, *seed)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|_| {
                    Err(Error::InvalidArgument("training thread panicked".into()))
                })
            })
            .collect()
    });
    results.into_iter().collect()
}

/// One run's loss at the comparison step.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub arm: String,
    pub seed: u64,
    pub loss: f64,
    /// `loss − loss(baseline arm, same seed)`; the baseline is the first arm.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub median_loss: f64,
    pub median_delta: f64,
    /// Seeds on which this arm's loss is below the baseline's.
    pub wins: usize,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub step: usize,
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
    pub arms: Vec<ArmSummary>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

impl ComparisonTable {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name)
    }

    /// `median_loss(baseline) − median_loss(variant)`.
    pub fn improvement(&self, baseline: &str, variant: &str) -> Option<f64> {
        Some(self.arm(baseline)?.median_loss - self.arm(variant)?.median_loss)
    }

    /// Seeds on which `a` ends below `b`.
    pub fn paired_wins(&self, a: &str, b: &str) -> usize {
        self.rows
            .iter()
            .filter(|ra| ra.arm == a)
            .filter(|ra| {
                self.rows
                    .iter()
                    .any(|rb| rb.arm == b && rb.seed == ra.seed && ra.loss < rb.loss)
            })
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,seed,step,loss,delta\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.arm,
                r.seed,
                self.step,
                fmt_f64(r.loss),
                fmt_f64(r.delta)
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("arm,step,runs,median_loss,median_delta,wins_vs_baseline\n");
        for a in &self.arms {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                a.arm,
                self.step,
                a.runs,
                fmt_f64(a.median_loss),
                fmt_f64(a.median_delta),
                a.wins
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("loss at step {} (baseline {})\n", self.step, self.baseline);
        out.push_str(&format!(
            "{:<14} {:>5} {:>14} {:>14} {:>6}\n",
            "arm", "runs", "median loss", "median delta", "wins"
        ));
        for a in &self.arms {
            out.push_str(&format!(
                "{:<14} {:>5} {:>14.6e} {:>14.6e} {:>3}/{:<2}\n",
                a.arm, a.runs, a.median_loss, a.median_delta, a.wins, a.runs
            ));
        }
        out
    }
}

/// Loss at `at_step` per record, paired deltas against the first record's
/// arm, and per-arm medians (arms in first-appearance order).
pub fn compare_runs(records: &[RunRecord], at_step: usize) -> Result<ComparisonTable> {
    let Some(first) = records.first() else {
        return Err(Error::InvalidArgument("no records to compare".into()));
    };
    let baseline = first.arm.clone();
    let mut losses = Vec::with_capacity(records.len());
    for r in records {
        let row = r.at_step(at_step).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "step {at_step} beyond record {} (seed {}, {} steps)",
                r.arm,
                r.seed,
                r.rows.len()
            ))
        })?;
        losses.push(row.train_loss);
    }
    let base_loss = |seed: u64| {
        records
            .iter()
            .zip(&losses)
            .find(|(r, _)| r.arm == baseline && r.seed == seed)
            .map(|(_, &l)| l)
    };
    let mut rows = Vec::with_capacity(records.len());
    for (r, &loss) in records.iter().zip(&losses) {
        let delta = base_loss(r.seed).map_or(f64::NAN, |b| loss - b);
        rows.push(ComparisonRow {
            arm: r.arm.clone(),
            seed: r.seed,
            loss,
            delta,
        });
    }
    let mut arm_names: Vec<String> = Vec::new();
    for r in &rows {
        if !arm_names.contains(&r.arm) {
            arm_names.push(r.arm.clone());
        }
    }
    let arms = arm_names
        .into_iter()
        .map(|name| {
            let mine: Vec<&ComparisonRow> = rows.iter().filter(|r| r.arm == name).collect();
            let ls: Vec<f64> = mine.iter().map(|r| r.loss).collect();
            let ds: Vec<f64> = mine.iter().map(|r| r.delta).collect();
            ArmSummary {
                wins: mine.iter().filter(|r| r.delta < 0.0).count(),
                runs: mine.len(),
                median_loss: median(&ls),
                median_delta: median(&ds),
                arm: name,
            }
        })
        .collect();
    Ok(ComparisonTable {
        step: at_step,
        baseline,
        rows,
        arms,
    })
}

/// Writes a string to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(text: &str) -> TrainConfig {
        TrainConfig::parse(&format!(
            "m = 8\nn = 8\nexperts = 4\ntop_k = 2\nrank = 2\nplanted_rank = 2\ntokens = 32\neval_tokens = 16\nbatch_size = 8\nmax_steps = 20\neval_every = 5\ninit_sigma = 0.1\n{text}"
        ))
        .unwrap()
    }

    #[test]
    fn lowrank_delta_normalized() {
        let Task::LowRank(t) =
            gen_lowrank_task(LayerShape::new(16, 12, 4, 2, 2, 16.0).unwrap(), 3, 8, 1).unwrap()
        else {
            unreachable!()
        };
        assert!((t.delta.frobenius_norm() - 1.0).abs() < 1e-12);
        assert_eq!(t.target, t.base.add(&t.delta).unwrap());
    }

    #[test]
    fn lowrank_zero_rank_target_is_base() {
        let shape = LayerShape::new(8, 8, 4, 2, 2, 16.0).unwrap();
        let task = gen_lowrank_task(shape, 0, 4, 2).unwrap();
        let Task::LowRank(t) = &task else {
            unreachable!()
        };
        assert_eq!(t.target, t.base);
        let student = task.init_student(shape, InitScales::default(), 2).unwrap();
        assert!(task.eval_loss(&student).unwrap() < 1e-6);
    }

    #[test]
    fn lowrank_rank_too_large() {
        let shape = LayerShape::new(4, 6, 4, 2, 2, 16.0).unwrap();
        assert!(gen_lowrank_task(shape, 5, 4, 0).is_err());
    }

    #[test]
    fn tasks_deterministic() {
        let shape = LayerShape::new(8, 8, 4, 2, 2, 16.0).unwrap();
        assert_eq!(
            gen_lowrank_task(shape, 2, 4, 3).unwrap(),
            gen_lowrank_task(shape, 2, 4, 3).unwrap()
        );
        assert_eq!(
            gen_teacher_task(shape, 10, 5, 3).unwrap(),
            gen_teacher_task(shape, 10, 5, 3).unwrap()
        );
        assert_ne!(
            gen_teacher_task(shape, 10, 5, 3).unwrap(),
            gen_teacher_task(shape, 10, 5, 4).unwrap()
        );
    }

    #[test]
    fn teacher_as_student_has_zero_loss() {
        let shape = LayerShape::new(8, 8, 4, 2, 2, 16.0).unwrap();
        let task = gen_teacher_task(shape, 10, 20, 5).unwrap();
        let Task::Teacher(t) = &task else {
            unreachable!()
        };
        assert!(task.eval_loss(&t.teacher).unwrap() <= 1e-20);
    }

    #[test]
    fn teacher_routing_is_concentrated() {
        let shape = LayerShape::new(16, 16, 8, 2, 2, 16.0).unwrap();
        let task = gen_teacher_task(shape, 200, 20, 6).unwrap();
        let Task::Teacher(t) = &task else {
            unreachable!()
        };
        assert!(t.train_y.is_finite());
        let h = mean_router_entropy(&t.teacher, &t.train_x).unwrap();
        assert!(h < (8f64).ln(), "{h}");
        assert!(h < (2f64).ln(), "{h}");
    }

    #[test]
    fn zero_steps_empty_record() {
        let cfg = small_cfg("max_steps = 0");
        let task = Task::from_config(&cfg, 0).unwrap();
        let out = train_loop(&task, &cfg, 0).unwrap();
        assert!(out.record.rows.is_empty());
        assert_eq!(out.trained, out.initial);
        assert_eq!(record_to_csv(&out.record), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn training_reduces_loss_and_keeps_base() {
        for extra in ["", "task = teacher-student\nlr_experts = 0.01"] {
            let cfg = small_cfg(&format!("precond = riemannian\n{extra}"));
            let task = Task::from_config(&cfg, 1).unwrap();
            let out = train_loop(&task, &cfg, 1).unwrap();
            let rows = &out.record.rows;
            assert_eq!(rows.len(), 20);
            assert!(rows.iter().enumerate().all(|(i, r)| r.step == i + 1));
            assert!(rows.last().unwrap().eval_loss < rows[0].eval_loss);
            assert_eq!(out.trained.base(), task.base());
        }
    }

    #[test]
    fn eval_carried_between_evaluations() {
        let cfg = small_cfg("task = teacher-student");
        let task = Task::from_config(&cfg, 2).unwrap();
        let rows = train_loop(&task, &cfg, 2).unwrap().record.rows;
        assert_eq!(rows[1].eval_loss, rows[0].eval_loss);
        assert_eq!(rows[3].eval_loss, rows[0].eval_loss);
        // step 5 evaluates the parameters after four updates
        let after_four = train_loop_prefix(&task, &cfg, 2, 4);
        assert_eq!(rows[4].eval_loss, task.eval_loss(&after_four).unwrap());
    }

    fn train_loop_prefix(
        task: &Task,
        cfg: &TrainConfig,
        seed: u64,
        updates: usize,
    ) -> MoeLoraLayer {
        let shape = cfg.layer_shape().unwrap();
        let mut layer = task.init_student(shape, cfg.init_scales(), seed).unwrap();
        layer.mode = cfg.mode;
        let mut opt = Optimizer::new(
            &layer,
            cfg.optimizer_kind(),
            cfg.expert_group(),
            cfg.router_group(),
            cfg.precond_config(),
            cfg.max_steps,
        );
        let mut batch_rng = RngStream::new(seed).derive(TAG_BATCH);
        let Task::Teacher(tt) = task else {
            unreachable!()
        };
        for t in 0..updates {
            let idx: Vec<usize> = (0..cfg.batch_size)
                .map(|_| batch_rng.below(tt.train_x.cols()))
                .collect();
            let x = gather_columns(&tt.train_x, &idx);
            let y = gather_columns(&tt.train_y, &idx);
            let (pred, cache) = layer.forward(&x, Routing::PerToken).unwrap();
            let (_, dy) = loss_and_grad(LossKind::MseToken, &pred, Target::Dense(&y)).unwrap();
            let b = backward(&layer, &cache, &dy).unwrap();
            opt.step(&mut layer, &b, t).unwrap();
        }
        layer
    }

    #[test]
    fn runs_are_bit_identical() {
        for extra in [
            "mode = sqrt-detach\nprecond = riemannian",
            "task = teacher-student\noptimizer = adamw",
        ] {
            let cfg = small_cfg(extra);
            let a = run_many(&[(cfg.clone(), 4), (cfg.clone(), 4)]).unwrap();
            assert_eq!(record_to_csv(&a[0].record), record_to_csv(&a[1].record));
        }
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let cfg = small_cfg("lr_experts = 1e30\nschedule = constant\ninit_sigma = 1");
        let task = Task::from_config(&cfg, 0).unwrap();
        let out = train_loop(&task, &cfg, 0).unwrap();
        let msg = out.record.aborted.expect("run should abort");
        assert!(msg.contains("step"), "{msg}");
        assert!(out.record.rows.iter().all(|r| r.train_loss.is_finite()));
    }

    #[test]
    fn csv_format() {
        let rec = RunRecord {
            arm: "RSGD".into(),
            seed: 3,
            rows: vec![StepRecord {
                step: 1,
                train_loss: 0.1,
                eval_loss: 0.25,
                grad_norm_experts: 1.0,
                grad_norm_router: 0.0,
                lr_experts: 3e-3,
                lr_router: 3e-8,
                wall_ms: 0.0,
            }],
            aborted: None,
        };
        let csv = record_to_csv(&rec);
        let line = csv.lines().nth(1).unwrap();
        assert_eq!(line.split(',').count(), 8);
        assert!(line.starts_with("1,1.0000000000000001e-1,2.5000000000000000e-1,"));
        assert_eq!(rec.file_name(), "RSGD_3.csv");
    }

    fn rec(arm: &str, seed: u64, losses: &[f64]) -> RunRecord {
        RunRecord {
            arm: arm.into(),
            seed,
            rows: losses
                .iter()
                .enumerate()
                .map(|(i, &l)| StepRecord {
                    step: i + 1,
                    train_loss: l,
                    eval_loss: l,
                    grad_norm_experts: 0.0,
                    grad_norm_router: 0.0,
                    lr_experts: 0.0,
                    lr_router: 0.0,
                    wall_ms: 0.0,
                })
                .collect(),
            aborted: None,
        }
    }

    #[test]
    fn compare_single_and_identical() {
        let t = compare_runs(&[rec("A", 0, &[3.0, 2.0])], 2).unwrap();
        assert_eq!(t.rows[0].loss, 2.0);
        assert_eq!(t.rows[0].delta, 0.0);
        let t = compare_runs(&[rec("A", 0, &[3.0, 2.0]), rec("B", 0, &[3.0, 2.0])], 2).unwrap();
        assert!(t.rows.iter().all(|r| r.delta == 0.0));
        assert!(compare_runs(&[rec("A", 0, &[1.0])], 2).is_err());
    }

    #[test]
    fn compare_medians_and_wins() {
        let recs = vec![
            rec("A", 0, &[1.0]),
            rec("A", 1, &[2.0]),
            rec("A", 2, &[3.0]),
            rec("B", 0, &[0.5]),
            rec("B", 1, &[2.5]),
            rec("B", 2, &[1.0]),
        ];
        let t = compare_runs(&recs, 1).unwrap();
        let b = t.arm("B").unwrap();
        assert_eq!(b.median_loss, 1.0);
        assert_eq!(b.median_delta, -0.5);
        assert_eq!(b.wins, 2);
        assert_eq!(t.paired_wins("B", "A"), 2);
        assert_eq!(t.improvement("A", "B"), Some(1.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}
