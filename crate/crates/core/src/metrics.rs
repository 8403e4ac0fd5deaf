//! Dice, backward / forward transfer, and per-method report rows.

use rayon::prelude::*;

use crate::error::{OdexError, Result};
use crate::sample::{Image, Mask, Sample};

/// Anything that turns an image into a binary mask: a single learner, a
/// frozen pool, or an untrained pipeline.
pub trait Segmenter: Sync {
    fn segment(&self, image: &Image) -> Result<Mask>;
}

/// `2|P ∩ G| / (|P| + |G|)`, with two empty masks scoring 1.
pub fn dice(pred: &Mask, truth: &Mask) -> Result<f64> {
    if pred.height != truth.height || pred.width != truth.width {
        return Err(OdexError::ShapeMismatch {
            expected: format!("{}x{}", truth.height, truth.width),
            actual: format!("{}x{}", pred.height, pred.width),
        });
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&truth.data) {
        inter += usize::from(a & b);
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// `dice[i][j][k]`: Dice of snapshot `F_i` on test sample `k` of task `j`.
/// Row 0 is the untrained pipeline `F_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensor {
    pub dice: Vec<Vec<Vec<f64>>>,
}

impl ScoreTensor {
    /// Number of trained snapshots (excludes `F_0`).
    pub fn n_stages(&self) -> usize {
        self.dice.len().saturating_sub(1)
    }

    pub fn n_tasks(&self) -> usize {
        self.dice.first().map_or(0, |r| r.len())
    }

    fn task_mean(&self, snapshot: usize, task: usize) -> f64 {
        let row = &self.dice[snapshot][task];
        row.iter().sum::<f64>() / row.len() as f64
    }

    fn check(&self) -> Result<usize> {
        let n = self.n_stages();
        if n < 2 {
            return Err(OdexError::InvalidConfig(format!(
                "transfer metrics need at least 2 stages, got {n}"
            )));
        }
        if self.n_tasks() != n {
            return Err(OdexError::DimensionMismatch {
                expected: n,
                actual: self.n_tasks(),
            });
        }
        if self.dice.iter().flatten().any(|t| t.is_empty()) {
            return Err(OdexError::EmptyInput("task test set"));
        }
        Ok(n)
    }

    /// Every Dice value of the final snapshot, in task order.
    pub fn final_scores(&self) -> Vec<f64> {
        self.dice.last().map(|r| r.concat()).unwrap_or_default()
    }

    pub fn final_per_task(&self) -> Vec<f64> {
        let last = self.dice.len() - 1;
        (0..self.n_tasks()).map(|t| self.task_mean(last, t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transfer {
    /// Sum of per-task terms divided by the number of tasks where it is defined.
    pub value: f64,
    /// Same sum divided by the total number of tasks.
    pub alt_norm: f64,
    /// Inner term of each task where the metric is defined.
    pub per_task: Vec<f64>,
}

impl Transfer {
    fn from_terms(per_task: Vec<f64>, n_tasks: usize) -> Self {
        let sum: f64 = per_task.iter().sum();
        Self {
            value: sum / per_task.len() as f64,
            alt_norm: sum / n_tasks as f64,
            per_task,
        }
    }

    pub fn std(&self) -> f64 {
        population_std(&self.per_task)
    }
}

/// Backward transfer: for each task but the last, the mean over later
/// snapshots of the Dice change relative to the snapshot right after it.
pub fn compute_bwt(scores: &ScoreTensor) -> Result<Transfer> {
    let n = scores.check()?;
    let terms = (1..n)
        .map(|i| {
            let own = scores.task_mean(i, i - 1);
            (i + 1..=n).map(|j| scores.task_mean(j, i - 1) - own).sum::<f64>() / (n - i) as f64
        })
        .collect();
    Ok(Transfer::from_terms(terms, n))
}

/// Forward transfer: for each task after the first, the mean over snapshots
/// up to and including its own of the per-stage Dice gain.
pub fn compute_fwt(scores: &ScoreTensor) -> Result<Transfer> {
    let n = scores.check()?;
    let terms = (2..=n)
        .map(|i| {
            (1..=i)
                .map(|j| scores.task_mean(j, i - 1) - scores.task_mean(j - 1, i - 1))
                .sum::<f64>()
                / i as f64
        })
        .collect();
    Ok(Transfer::from_terms(terms, n))
}

/// Evaluates every snapshot (starting with `F_0`) on every task's test set.
pub fn build_score_tensor(snapshots: &[&dyn Segmenter], test_sets: &[Vec<Sample>]) -> Result<ScoreTensor> {
    let mut dice_rows = Vec::with_capacity(snapshots.len());
    for snap in snapshots {
        let mut row = Vec::with_capacity(test_sets.len());
        for task in test_sets {
            let scores: Result<Vec<f64>> = task
                .par_iter()
                .map(|s| dice(&snap.segment(&s.image)?, &s.mask))
                .collect();
            row.push(scores?);
        }
        dice_rows.push(row);
    }
    Ok(ScoreTensor { dice: dice_rows })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Divide-by-N standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// One finished (method, seed) unit.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: String,
    pub scenario: String,
    pub seed: u64,
    pub scores: ScoreTensor,
    pub pool_size: Option<usize>,
    pub cpu_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodReport {
    pub method: String,
    pub scenario: String,
    pub seed: u64,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub bwt: f64,
    pub bwt_std: f64,
    pub bwt_alt_norm: f64,
    pub fwt: f64,
    pub fwt_std: f64,
    pub fwt_alt_norm: f64,
    pub pool_size: Option<usize>,
    pub cpu_seconds: f64,
    pub per_task_dice: Vec<f64>,
}

pub const CSV_HEADER: &str =
    "method,scenario,seed,mean_dice,std_dice,bwt,bwt_alt_norm,fwt,fwt_alt_norm,pool_size";

impl MethodReport {
    pub fn from_run(run: &MethodRun) -> Result<Self> {
        let finals = run.scores.final_scores();
        let (bwt, fwt) = if run.scores.n_stages() >= 2 {
            (compute_bwt(&run.scores)?, compute_fwt(&run.scores)?)
        } else {
            let nan = Transfer {
                value: f64::NAN,
                alt_norm: f64::NAN,
                per_task: Vec::new(),
            };
            (nan.clone(), nan)
        };
        Ok(Self {
            method: run.method.clone(),
            scenario: run.scenario.clone(),
            seed: run.seed,
            mean_dice: mean(&finals),
            std_dice: population_std(&finals),
            bwt: bwt.value,
            bwt_std: bwt.std(),
            bwt_alt_norm: bwt.alt_norm,
            fwt: fwt.value,
            fwt_std: fwt.std(),
            fwt_alt_norm: fwt.alt_norm,
            pool_size: run.pool_size,
            cpu_seconds: run.cpu_seconds,
            per_task_dice: run.scores.final_per_task(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.method,
            self.scenario,
            self.seed,
            self.mean_dice,
            self.std_dice,
            self.bwt,
            self.bwt_alt_norm,
            self.fwt,
            self.fwt_alt_norm,
            self.pool_size.map(|p| p.to_string()).unwrap_or_default(),
        )
    }
}

impl MethodReport {
    /// Placeholder row for a unit that failed; every metric is NaN.
    pub fn failed(method: &str, scenario: &str, seed: u64) -> Self {
        Self {
            method: method.to_string(),
            scenario: scenario.to_string(),
            seed,
            mean_dice: f64::NAN,
            std_dice: f64::NAN,
            bwt: f64::NAN,
            bwt_std: f64::NAN,
            bwt_alt_norm: f64::NAN,
            fwt: f64::NAN,
            fwt_std: f64::NAN,
            fwt_alt_norm: f64::NAN,
            pool_size: None,
            cpu_seconds: f64::NAN,
            per_task_dice: Vec::new(),
        }
    }
}

/// Seed-averaged view of one (method, scenario) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub scenario: String,
    pub n_seeds: usize,
    /// `(mean, population std)` across seeds of each seed's value.
    pub dice: (f64, f64),
    pub bwt: (f64, f64),
    pub fwt: (f64, f64),
    pub pool_size: Option<f64>,
    pub cpu_seconds: f64,
}

/// Groups reports by (method, scenario) in first-seen order.
pub fn seed_average(reports: &[MethodReport]) -> Vec<MethodSummary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in reports {
        let k = (r.method.clone(), r.scenario.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, scenario)| {
            let group: Vec<&MethodReport> =
                reports.iter().filter(|r| r.method == method && r.scenario == scenario).collect();
            let stat = |f: fn(&MethodReport) -> f64| {
                let v: Vec<f64> = group.iter().map(|r| f(r)).collect();
                (mean(&v), population_std(&v))
            };
            let sizes: Vec<f64> = group.iter().filter_map(|r| r.pool_size.map(|p| p as f64)).collect();
            MethodSummary {
                n_seeds: group.len(),
                dice: stat(|r| r.mean_dice),
                bwt: stat(|r| r.bwt),
                fwt: stat(|r| r.fwt),
                pool_size: (sizes.len() == group.len()).then(|| mean(&sizes)),
                cpu_seconds: group.iter().map(|r| r.cpu_seconds).sum(),
                method,
                scenario,
            }
        })
        .collect()
}

pub fn aggregate_report(runs: &[MethodRun]) -> Result<Vec<MethodReport>> {
    runs.iter().map(MethodReport::from_run).collect()
}

/// CPU seconds per unit, kept apart from the deterministic report CSV.
pub fn timing_csv(reports: &[MethodReport]) -> String {
    let mut out = String::from("method,scenario,seed,cpu_seconds\n");
    for r in reports {
        out.push_str(&format!("{},{},{},{:.3}\n", r.method, r.scenario, r.seed, r.cpu_seconds));
    }
    out
}

/// Final per-task mean Dice, one column per task.
pub fn per_task_csv(reports: &[MethodReport]) -> String {
    let n = reports.iter().map(|r| r.per_task_dice.len()).max().unwrap_or(0);
    let mut out = String::from("method,scenario,seed");
    for t in 1..=n {
        out.push_str(&format!(",task_{t}"));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{},{},{}", r.method, r.scenario, r.seed));
        for t in 0..n {
            match r.per_task_dice.get(t) {
                Some(v) => out.push_str(&format!(",{v:.6}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// CSV with [`CSV_HEADER`] and one row per report.
pub fn reports_to_csv(reports: &[MethodReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Aligned plain-text table with Dice / BWT / FWT (mean ± std) and |Θ|.
pub fn reports_to_table(reports: &[MethodReport]) -> String {
    let header = ["method", "scenario", "seed", "Dice", "BWT", "FWT", "|Θ|", "cpu s"];
    let rows: Vec<[String; 8]> = reports
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                r.scenario.clone(),
                r.seed.to_string(),
                format!("{:.3} ± {:.3}", r.mean_dice, r.std_dice),
                format!("{:.3} ± {:.3}", r.bwt, r.bwt_std),
                format!("{:.3} ± {:.3}", r.fwt, r.fwt_std),
                r.pool_size.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
                format!("{:.1}", r.cpu_seconds),
            ]
        })
        .collect();
    align_table(&header, &rows)
}

/// Seed-averaged table; ± is the spread across seeds.
pub fn summaries_to_table(summaries: &[MethodSummary]) -> String {
    let header = ["method", "scenario", "seeds", "Dice", "BWT", "FWT", "|Θ|", "cpu s"];
    let rows: Vec<[String; 8]> = summaries
        .iter()
        .map(|s| {
            [
                s.method.clone(),
                s.scenario.clone(),
                s.n_seeds.to_string(),
                format!("{:.3} ± {:.3}", s.dice.0, s.dice.1),
                format!("{:.3} ± {:.3}", s.bwt.0, s.bwt.1),
                format!("{:.3} ± {:.3}", s.fwt.0, s.fwt.1),
                s.pool_size.map(|p| format!("{p:.2}")).unwrap_or_else(|| "-".into()),
                format!("{:.1}", s.cpu_seconds),
            ]
        })
        .collect();
    align_table(&header, &rows)
}

fn align_table<const N: usize>(header: &[&str; N], rows: &[[String; N]]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let fmt_row = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = fmt_row(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
