//! Probability fusion, binary confusion metrics and fold aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{PrtError, Result};
use crate::nn::argmax;

const SUM_TOL: f64 = 1e-9;

/// Non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(PrtError::invalid("empty probability vector"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(PrtError::invalid("probability entries must lie in [0, 1]"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(PrtError::invalid(format!("probabilities sum to {sum}")));
        }
        Ok(ProbabilityVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Averages the network and dictionary probabilities and takes the argmax
/// (ties to the lowest index).
pub fn fuse_predict(
    rho: &ProbabilityVector,
    q: &ProbabilityVector,
) -> Result<(usize, ProbabilityVector)> {
    if rho.len() != q.len() {
        return Err(PrtError::invalid(format!(
            "cannot fuse vectors of length {} and {}",
            rho.len(),
            q.len()
        )));
    }
    let fused: Vec<f64> = rho.0.iter().zip(&q.0).map(|(a, b)| (a + b) / 2.0).collect();
    let label = argmax(&fused);
    Ok((label, ProbabilityVector(fused)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Binary tally; any label equal to `positive_class` is positive, everything
/// else negative.
pub fn confusion_counts(
    predictions: &[usize],
    truth: &[usize],
    positive_class: usize,
) -> Result<ConfusionCounts> {
    if predictions.len() != truth.len() {
        return Err(PrtError::invalid(format!(
            "{} predictions for {} ground-truth labels",
            predictions.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predictions.iter().zip(truth) {
        match (p == positive_class, t == positive_class) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// SEN, SPE and ACC are percentages; PPV and F1 are fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub sen: f64,
    pub spe: f64,
    pub ppv: f64,
    pub f1: f64,
    pub acc: f64,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(PrtError::invalid("no samples to score"));
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let tpr = ratio(c.tp, c.tp + c.fn_);
    let tnr = ratio(c.tn, c.tn + c.fp);
    let ppv = ratio(c.tp, c.tp + c.fp);
    let acc = ratio(c.tp + c.tn, c.total());
    let f1 = if ppv + tpr > 0.0 {
        2.0 * ppv * tpr / (ppv + tpr)
    } else {
        degenerate = true;
        0.0
    };
    Ok(Metrics {
        sen: tpr * 100.0,
        spe: tnr * 100.0,
        ppv,
        f1,
        acc: acc * 100.0,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Tl,
    PrtTl,
    All,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Tl, Method::PrtTl, Method::All];

    /// File-name friendly tag.
    pub fn slug(self) -> &'static str {
        match self {
            Method::Tl => "tl",
            Method::PrtTl => "prt_tl",
            Method::All => "all",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Tl => "TL",
            Method::PrtTl => "PRT+TL",
            Method::All => "All",
        })
    }
}

impl FromStr for Method {
    type Err = PrtError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "TL" | "tl" => Ok(Method::Tl),
            "PRT+TL" | "prt+tl" | "prt_tl" => Ok(Method::PrtTl),
            "All" | "all" | "ALL" => Ok(Method::All),
            other => Err(PrtError::invalid(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricName {
    Sen,
    Spe,
    F1,
    Acc,
}

impl MetricName {
    pub const ALL: [MetricName; 4] = [
        MetricName::Sen,
        MetricName::Spe,
        MetricName::F1,
        MetricName::Acc,
    ];

    pub fn of(self, m: &Metrics) -> f64 {
        match self {
            MetricName::Sen => m.sen,
            MetricName::Spe => m.spe,
            MetricName::F1 => m.f1,
            MetricName::Acc => m.acc,
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricName::Sen => "sen",
            MetricName::Spe => "spe",
            MetricName::F1 => "f1",
            MetricName::Acc => "acc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldRow {
    pub fold: usize,
    /// Percentage of positive training samples kept.
    pub ratio: u32,
    pub method: Method,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation, 0 for a single fold.
    pub std: f64,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_fold: Vec<FoldRow>,
    pub aggregated: BTreeMap<(u32, Method, MetricName), Aggregate>,
}

/// Mean and sample (n − 1) standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(PrtError::invalid("cannot aggregate an empty group"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

pub fn aggregate_folds(rows: Vec<FoldRow>) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(PrtError::invalid("no fold rows to aggregate"));
    }
    let mut groups: BTreeMap<(u32, Method), Vec<&Metrics>> = BTreeMap::new();
    for row in &rows {
        groups
            .entry((row.ratio, row.method))
            .or_default()
            .push(&row.metrics);
    }
    let mut aggregated = BTreeMap::new();
    for ((ratio, method), members) in &groups {
        for name in MetricName::ALL {
            let values: Vec<f64> = members.iter().map(|m| name.of(m)).collect();
            let (mean, std) = mean_std(&values)?;
            aggregated.insert(
                (*ratio, *method, name),
                Aggregate {
                    mean,
                    std,
                    folds: values.len(),
                },
            );
        }
    }
    Ok(MetricsReport {
        per_fold: rows,
        aggregated,
    })
}

impl MetricsReport {
    pub fn get(&self, ratio: u32, method: Method, metric: MetricName) -> Option<&Aggregate> {
        self.aggregated.get(&(ratio, method, metric))
    }

    pub fn ratios(&self) -> Vec<u32> {
        let mut r: Vec<u32> = self.aggregated.keys().map(|k| k.0).collect();
        r.dedup();
        r
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = self.aggregated.keys().map(|k| k.1).collect();
        m.sort();
        m.dedup();
        m
    }

    /// `ratio,method,metric,mean,std` rows, ordered by ratio, method, metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ratio,method,metric,mean,std\n");
        for ((ratio, method, metric), agg) in &self.aggregated {
            out.push_str(&format!(
                "{ratio},{method},{metric},{:.6},{:.6}\n",
                agg.mean, agg.std
            ));
        }
        out
    }

    /// Per-fold rows as CSV.
    pub fn per_fold_csv(&self) -> String {
        let mut out = String::from("fold,ratio,method,sen,spe,ppv,f1,acc,degenerate\n");
        for r in &self.per_fold {
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.fold, r.ratio, r.method, m.sen, m.spe, m.ppv, m.f1, m.acc, m.degenerate
            ));
        }
        out
    }

    /// Aligned text tables: SEN / SPE / F1 per method, then ACC per method.
    pub fn to_text(&self) -> String {
        let methods = self.methods();
        let ratios = self.ratios();
        let cell = |r: u32, m: Method, name: MetricName| -> String {
            match self.get(r, m, name) {
                Some(a) if name == MetricName::F1 => format!("{:.2}±{:.2}", a.mean, a.std),
                Some(a) => format!("{:.1}±{:.1}", a.mean, a.std),
                None => "-".to_string(),
            }
        };
        let width = 13;
        let mut out = String::new();

        out.push_str(&format!("{:>5} |", "%"));
        for m in &methods {
            out.push_str(&format!(" {:^w$} |", m.to_string(), w = width * 3 + 2));
        }
        out.push('\n');
        out.push_str(&format!("{:>5} |", ""));
        for _ in &methods {
            for name in ["SEN", "SPE", "F1"] {
                out.push_str(&format!(" {name:>width$}"));
            }
            out.push_str(" |");
        }
        out.push('\n');
        for &r in &ratios {
            out.push_str(&format!("{r:>5} |"));
            for &m in &methods {
                for name in [MetricName::Sen, MetricName::Spe, MetricName::F1] {
                    out.push_str(&format!(" {:>width$}", cell(r, m, name)));
                }
                out.push_str(" |");
            }
            out.push('\n');
        }

        out.push('\n');
        out.push_str(&format!("{:>5} |", "%"));
        for m in &methods {
            out.push_str(&format!(" {:>width$} |", format!("ACC {m}")));
        }
        out.push('\n');
        for &r in &ratios {
            out.push_str(&format!("{r:>5} |"));
            for &m in &methods {
                out.push_str(&format!(" {:>width$} |", cell(r, m, MetricName::Acc)));
            }
            out.push('\n');
        }
        out
    }
}
