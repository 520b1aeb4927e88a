//! Robustness measurement: accuracy sweeps over attack grids, the quadratic-vs-PGD
//! comparison, the gradient-masking scatter, PGD step escalation and the loss-gap bound check.

mod bound;
pub mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use bound::{verify_bound, verify_bound_surface, BoundConfig, BoundRecord, BoundReport, HessianNorm};

use crate::attacks::{
    run_attack, AttackResult, AttackSpec, FdScheme, ObjectiveKind, PassLedger, PgdConfig, QuadAttackConfig, SimbaConfig,
};
use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::lp_geometry::{AttackBudget, Norm};
use crate::models::{accuracy, margin, predict_from_logits, LabeledBatch, Model};

/// One cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// `clean`, `fgsm`, `pgd`, `quad` or `simba`.
    pub attack: String,
    /// Full attack name, e.g. `pgd10-ul`.
    pub name: String,
    pub objective: Option<ObjectiveKind>,
    pub norm: Option<Norm>,
    pub eps: f64,
    pub steps: usize,
    pub adversarial_accuracy: f64,
    pub mean_margin: f64,
    pub ledger: PassLedger,
    /// Gradient passes the scheme should spend over the whole split, when it has a formula.
    pub expected_passes: Option<u64>,
    pub batches: usize,
}

impl EvalRow {
    /// The recorded gradient passes match the scheme formula times the batch count.
    pub fn ledger_consistent(&self) -> bool {
        match self.expected_passes {
            Some(e) => self.ledger.forward == e && self.ledger.backward == e,
            None => self.ledger.backward == 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub split: String,
    pub rows: Vec<EvalRow>,
    #[serde(default)]
    pub scatter: Option<ScatterReport>,
    #[serde(default)]
    pub bounds: Option<BoundReport>,
}

pub const EVAL_CSV_HEADER: &str =
    "attack,name,objective,norm,eps,steps,adversarial_accuracy,mean_margin,forward,backward,eval_forward,expected_passes,batches";

impl EvalReport {
    pub fn clean_accuracy(&self) -> Option<f64> {
        self.rows.iter().find(|r| r.attack == "clean").map(|r| r.adversarial_accuracy)
    }

    pub fn find(&self, attack: &str, objective: Option<ObjectiveKind>, eps: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.attack == attack && r.objective == objective && r.eps == eps)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(EVAL_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.4},{:.6},{},{},{},{},{}\n",
                r.attack,
                r.name,
                r.objective.map(|o| o.name()).unwrap_or(""),
                r.norm.map(|n| n.to_string()).unwrap_or_default(),
                r.eps,
                r.steps,
                r.adversarial_accuracy,
                r.mean_margin,
                r.ledger.forward,
                r.ledger.backward,
                r.ledger.eval_forward,
                r.expected_passes.map(|e| e.to_string()).unwrap_or_default(),
                r.batches
            ));
        }
        s
    }

    /// Accuracy against `eps`, one series per attack configuration; the clean accuracy is
    /// the `eps = 0` point of every series.
    pub fn accuracy_chart(&self) -> String {
        let clean = self.clean_accuracy();
        let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.attack != "clean") {
            let key = format!("{} {}", r.name, r.norm.map(|n| n.to_string()).unwrap_or_default());
            series.entry(key).or_default().push((r.eps, r.adversarial_accuracy));
        }
        let series: Vec<svg::Series> = series
            .into_iter()
            .map(|(name, mut points)| {
                if let (Some(c), false) = (clean, points.iter().any(|p| p.0 == 0.0)) {
                    points.push((0.0, c));
                }
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                svg::Series { name, points }
            })
            .collect();
        svg::line_chart(&format!("{} ({})", self.model_id, self.split), "epsilon", "adversarial accuracy (%)", &series)
    }

    /// Writes `<stem>.json`, `<stem>.csv` and `<stem>.svg` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let paths = [dir.join(format!("{stem}.json")), dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.svg"))];
        write_text(&paths[0], &serde_json::to_string_pretty(self)?)?;
        write_text(&paths[1], &self.to_csv())?;
        write_text(&paths[2], &self.accuracy_chart())?;
        Ok(paths.to_vec())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Projected-gradient cells for every `(eps, objective)` pair.
pub fn pgd_grid(
    norm: Norm,
    eps: &[f64],
    steps: usize,
    objectives: &[ObjectiveKind],
    clamp_box: Option<(f64, f64)>,
) -> Result<Vec<AttackSpec>> {
    let mut out = Vec::new();
    for &e in eps {
        for &objective in objectives {
            let cfg = PgdConfig::new(AttackBudget { norm, eps: e, clamp_box }, steps)?;
            out.push(AttackSpec::Pgd { objective, cfg });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Seeds the random targets of targeted objectives.
    pub target_seed: u64,
    pub chunk: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { target_seed: 0, chunk: 500 }
    }
}

fn batches(n: usize, chunk: usize) -> usize {
    n.div_ceil(chunk.max(1))
}

fn clean_row<T: Scalar>(model: &Model<T>, data: &LabeledBatch<T>, chunk: usize) -> Result<EvalRow> {
    let (pred, margins) = clean_predictions(model, data, chunk)?;
    Ok(EvalRow {
        attack: "clean".into(),
        name: "clean".into(),
        objective: None,
        norm: None,
        eps: 0.0,
        steps: 0,
        adversarial_accuracy: accuracy(&pred, &data.y),
        mean_margin: margins.iter().sum::<f64>() / margins.len().max(1) as f64,
        ledger: PassLedger { forward: 0, backward: 0, eval_forward: batches(data.len(), chunk) as u64 },
        expected_passes: Some(0),
        batches: batches(data.len(), chunk),
    })
}

/// Clean predictions and true-class margins, computed in chunks.
pub fn clean_predictions<T: Scalar>(
    model: &Model<T>,
    data: &LabeledBatch<T>,
    chunk: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let chunk = chunk.max(1);
    let (mut pred, mut margins) = (Vec::with_capacity(data.len()), Vec::with_capacity(data.len()));
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        let logits = model.logits(&data.x.slice_rows(start, end))?;
        pred.extend(predict_from_logits(&logits));
        margins.extend(margin(&logits, &data.y[start..end])?.into_iter().map(|v| v.as_f64()));
        start = end;
    }
    Ok((pred, margins))
}

fn row_from<T: Scalar>(spec: &AttackSpec, r: &AttackResult<T>, n_batches: usize) -> EvalRow {
    let budget = spec.budget();
    EvalRow {
        attack: spec.kind().into(),
        name: r.attack.clone(),
        objective: match spec {
            AttackSpec::Pgd { .. } | AttackSpec::Quad { .. } => Some(spec.objective()),
            AttackSpec::Fgsm { .. } | AttackSpec::Simba { .. } => Some(ObjectiveKind::Ul),
        },
        norm: Some(budget.norm),
        eps: budget.eps,
        steps: spec.steps(),
        adversarial_accuracy: r.adversarial_accuracy(),
        mean_margin: r.mean_margin(),
        ledger: r.ledger,
        expected_passes: spec.expected_passes().map(|e| e * n_batches as u64),
        batches: n_batches,
    }
}

/// Evaluate every attack in `grid` on `data`. Rows are sorted by attack kind, then `eps`,
/// objective and step count; the clean row (`eps = 0`) is always present.
pub fn sweep<T: Scalar>(
    model: &Model<T>,
    data: &LabeledBatch<T>,
    grid: &[AttackSpec],
    model_id: &str,
    split: &str,
    opts: SweepOptions,
) -> Result<EvalReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one attack".into()));
    }
    let n_batches = batches(data.len(), opts.chunk);
    let mut rows = vec![clean_row(model, data, opts.chunk)?];
    for spec in grid {
        let r = run_attack(model, data, spec, opts.target_seed, opts.chunk)?;
        rows.push(row_from(spec, &r, n_batches));
    }
    rows.sort_by(|a, b| {
        a.attack
            .cmp(&b.attack)
            .then(a.eps.total_cmp(&b.eps))
            .then(a.objective.map(|o| o.name()).cmp(&b.objective.map(|o| o.name())))
            .then(a.steps.cmp(&b.steps))
            .then(a.name.cmp(&b.name))
    });
    Ok(EvalReport { model_id: model_id.into(), split: split.into(), rows, scatter: None, bounds: None })
}

/// A report holding only the clean-accuracy row.
pub fn clean_report<T: Scalar>(
    model: &Model<T>,
    data: &LabeledBatch<T>,
    model_id: &str,
    split: &str,
    chunk: usize,
) -> Result<EvalReport> {
    let rows = vec![clean_row(model, data, chunk)?];
    Ok(EvalReport { model_id: model_id.into(), split: split.into(), rows, scatter: None, bounds: None })
}

/// Percentage of initially correct examples that the attack misclassifies.
pub fn success_rate<T: Scalar>(r: &AttackResult<T>, clean_pred: &[usize]) -> f64 {
    let mut correct = 0usize;
    let mut flipped = 0usize;
    for i in 0..r.len() {
        if clean_pred[i] == r.labels[i] {
            correct += 1;
            if r.success[i] {
                flipped += 1;
            }
        }
    }
    if correct == 0 {
        0.0
    } else {
        100.0 * flipped as f64 / correct as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub norm: Norm,
    pub eps_grid: Vec<f64>,
    pub clamp_box: Option<(f64, f64)>,
    pub pgd_steps: usize,
    pub quad_steps: usize,
    pub scheme: FdScheme,
    pub h: f64,
    pub chunk: usize,
}

impl CompareConfig {
    /// PGD(10) against the FE(3) quadratic attack, both on the untargeted loss.
    pub fn new(norm: Norm, eps_grid: Vec<f64>, h: f64) -> Self {
        CompareConfig {
            norm,
            eps_grid,
            clamp_box: Some((0.0, 1.0)),
            pgd_steps: 10,
            quad_steps: 3,
            scheme: FdScheme::Fe,
            h,
            chunk: 500,
        }
    }
}

pub struct ComparedModel<'a, T: Scalar> {
    pub name: String,
    /// Trained for robustness (as opposed to a standard model).
    pub robust: bool,
    pub model: &'a Model<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparePoint {
    pub eps: f64,
    pub pgd_success: f64,
    pub quad_success: f64,
    /// `pgd_success - quad_success` in points.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareCurve {
    pub model: String,
    pub robust: bool,
    pub initially_correct: usize,
    pub points: Vec<ComparePoint>,
    pub max_abs_gap: f64,
    pub max_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config: CompareConfig,
    pub curves: Vec<CompareCurve>,
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,robust,eps,pgd_success,quad_success,gap\n");
        for c in &self.curves {
            for p in &c.points {
                s.push_str(&format!(
                    "{},{},{},{:.4},{:.4},{:.4}\n",
                    c.model, c.robust, p.eps, p.pgd_success, p.quad_success, p.gap
                ));
            }
        }
        s
    }

    pub fn chart(&self) -> String {
        let mut series = Vec::new();
        for c in &self.curves {
            series.push(svg::Series {
                name: format!("{} pgd", c.model),
                points: c.points.iter().map(|p| (p.eps, p.pgd_success)).collect(),
            });
            series.push(svg::Series {
                name: format!("{} quad", c.model),
                points: c.points.iter().map(|p| (p.eps, p.quad_success)).collect(),
            });
        }
        svg::line_chart("attack success rate", "epsilon", "success rate (%)", &series)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let paths = [dir.join(format!("{stem}.json")), dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.svg"))];
        write_text(&paths[0], &serde_json::to_string_pretty(self)?)?;
        write_text(&paths[1], &self.to_csv())?;
        write_text(&paths[2], &self.chart())?;
        Ok(paths.to_vec())
    }
}

/// Paired success-rate curves of PGD and the quadratic attack for each model.
pub fn compare_quad_vs_pgd<T: Scalar>(
    models: &[ComparedModel<'_, T>],
    data: &LabeledBatch<T>,
    cfg: &CompareConfig,
) -> Result<CompareReport> {
    if !(models.iter().any(|m| m.robust) && models.iter().any(|m| !m.robust)) {
        return Err(Error::InvalidArgument("comparison needs at least one standard and one robust model".into()));
    }
    if cfg.eps_grid.is_empty() {
        return Err(Error::InvalidArgument("empty epsilon grid".into()));
    }
    let mut curves = Vec::new();
    for m in models {
        let (clean_pred, _) = clean_predictions(m.model, data, cfg.chunk)?;
        let initially_correct = clean_pred.iter().zip(&data.y).filter(|(p, y)| p == y).count();
        let mut points = Vec::new();
        for &eps in &cfg.eps_grid {
            let budget = AttackBudget { norm: cfg.norm, eps, clamp_box: cfg.clamp_box };
            let pgd = AttackSpec::Pgd { objective: ObjectiveKind::Ul, cfg: PgdConfig::new(budget, cfg.pgd_steps)? };
            let quad = AttackSpec::Quad {
                objective: ObjectiveKind::Ul,
                cfg: QuadAttackConfig::new(budget, cfg.quad_steps, cfg.scheme, cfg.h)?,
            };
            let ps = success_rate(&run_attack(m.model, data, &pgd, 0, cfg.chunk)?, &clean_pred);
            let qs = success_rate(&run_attack(m.model, data, &quad, 0, cfg.chunk)?, &clean_pred);
            points.push(ComparePoint { eps, pgd_success: ps, quad_success: qs, gap: ps - qs });
        }
        let max_abs_gap = points.iter().map(|p| p.gap.abs()).fold(0.0, f64::max);
        let max_gap = points.iter().map(|p| p.gap).fold(f64::NEG_INFINITY, f64::max);
        curves.push(CompareCurve { model: m.name.clone(), robust: m.robust, initially_correct, points, max_abs_gap, max_gap });
    }
    Ok(CompareReport { config: cfg.clone(), curves })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub pgd: PgdConfig,
    pub objective: ObjectiveKind,
    pub simba: SimbaConfig,
    /// SimBA must beat PGD's margin by more than this (absolute) unless it flips the label.
    pub red_threshold: f64,
    pub chunk: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub index: usize,
    pub label: usize,
    pub clean_margin: f64,
    pub pgd_margin: f64,
    pub simba_margin: f64,
    /// SimBA found a stronger attack than PGD.
    pub red: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterReport {
    pub pgd_attack: String,
    pub simba_attack: String,
    pub red_threshold: f64,
    pub points: Vec<ScatterPoint>,
    pub red_count: usize,
}

impl ScatterReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,label,clean_margin,pgd_margin,simba_margin,red\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{}\n",
                p.index, p.label, p.clean_margin, p.pgd_margin, p.simba_margin, p.red as u8
            ));
        }
        s
    }

    pub fn chart(&self) -> String {
        let pts: Vec<(f64, f64, bool)> = self.points.iter().map(|p| (p.pgd_margin, p.simba_margin, p.red)).collect();
        svg::scatter(
            &format!("{} red of {}", self.red_count, self.points.len()),
            &format!("margin after {}", self.pgd_attack),
            &format!("margin after {}", self.simba_attack),
            &pts,
            true,
        )
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let paths = [dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.svg"))];
        write_text(&paths[0], &self.to_csv())?;
        write_text(&paths[1], &self.chart())?;
        Ok(paths.to_vec())
    }
}

pub fn is_red(pgd_margin: f64, simba_margin: f64, threshold: f64) -> bool {
    pgd_margin > 0.0 && (simba_margin < 0.0 || simba_margin < pgd_margin - threshold)
}

/// Margins after a white-box PGD attack and after SimBA, per example.
pub fn masking_scatter<T: Scalar>(model: &Model<T>, data: &LabeledBatch<T>, cfg: &MaskingConfig) -> Result<ScatterReport> {
    let pgd = run_attack(model, data, &AttackSpec::Pgd { objective: cfg.objective, cfg: cfg.pgd.clone() }, 0, cfg.chunk)?;
    let simba = run_attack(model, data, &AttackSpec::Simba { cfg: cfg.simba.clone() }, 0, cfg.chunk)?;
    let points: Vec<ScatterPoint> = (0..data.len())
        .map(|i| ScatterPoint {
            index: i,
            label: data.y[i],
            clean_margin: pgd.pre_margin[i],
            pgd_margin: pgd.post_margin[i],
            simba_margin: simba.post_margin[i],
            red: is_red(pgd.post_margin[i], simba.post_margin[i], cfg.red_threshold),
        })
        .collect();
    let red_count = points.iter().filter(|p| p.red).count();
    Ok(ScatterReport { pgd_attack: pgd.attack, simba_attack: simba.attack, red_threshold: cfg.red_threshold, points, red_count })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscalationRow {
    pub steps: usize,
    pub adversarial_accuracy: f64,
    pub ledger: PassLedger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscalationReport {
    pub budget: AttackBudget,
    pub rows: Vec<EscalationRow>,
    /// Accuracy at the fewest steps minus accuracy at the most steps.
    pub degradation: f64,
    pub threshold: f64,
    /// Degradation above the threshold hints at gradient masking.
    pub warning: bool,
}

impl EscalationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("steps,adversarial_accuracy,forward,backward\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.4},{},{}\n", r.steps, r.adversarial_accuracy, r.ledger.forward, r.ledger.backward));
        }
        s
    }
}

pub const DEFAULT_ESCALATION: [usize; 4] = [10, 20, 40, 100];

/// Margin-objective PGD accuracy for each step count at a fixed budget.
pub fn escalate_pgd<T: Scalar>(
    model: &Model<T>,
    data: &LabeledBatch<T>,
    budget: AttackBudget,
    steps: &[usize],
    threshold: f64,
    chunk: usize,
) -> Result<EscalationReport> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("no step counts given".into()));
    }
    let mut rows = Vec::new();
    for &n in steps {
        let spec = AttackSpec::Pgd { objective: ObjectiveKind::Um, cfg: PgdConfig::new(budget, n)? };
        let r = run_attack(model, data, &spec, 0, chunk)?;
        rows.push(EscalationRow { steps: n, adversarial_accuracy: r.adversarial_accuracy(), ledger: r.ledger });
    }
    let lo = rows.iter().min_by_key(|r| r.steps).unwrap().adversarial_accuracy;
    let hi = rows.iter().max_by_key(|r| r.steps).unwrap().adversarial_accuracy;
    let degradation = lo - hi;
    Ok(EscalationReport { budget, rows, degradation, threshold, warning: degradation > threshold })
}
