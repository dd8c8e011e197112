use serde::{Deserialize, Serialize};

use super::{to_f64, MetricsError, Scalar};

/// One evaluation of a grading pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow<T> {
    pub mae: T,
    pub rmse: T,
    pub nrmse: T,
    /// `None` when the correlation is undefined (a constant vector).
    pub pearson: Option<T>,
}

/// A metric row tagged with the configuration and repetition it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRow<T> {
    pub fingerprint: String,
    pub repetition: u32,
    pub metrics: MetricRow<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport<T> {
    pub fingerprint: String,
    pub repetitions: usize,
    pub rows: Vec<MetricRow<T>>,
    pub mean: MetricRow<T>,
    /// Sample standard deviation; `None` for a single repetition.
    pub sd: Option<MetricRow<T>>,
}

fn mean<T: Scalar>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |a, &b| a + b) / T::from_usize(xs.len()).expect("fits")
}

fn sample_sd<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss = xs.iter().fold(T::zero(), |a, &x| a + (x - m) * (x - m));
    Some((ss / T::from_usize(xs.len() - 1).expect("fits")).sqrt())
}

/// Element-wise mean and sample standard deviation over repetitions. All
/// rows must share one fingerprint.
pub fn aggregate<T: Scalar>(rows: &[RepetitionRow<T>]) -> Result<ExperimentReport<T>, MetricsError> {
    let first = rows.first().ok_or(MetricsError::Empty)?;
    if let Some(other) = rows.iter().find(|r| r.fingerprint != first.fingerprint) {
        return Err(MetricsError::MixedConfigs(first.fingerprint.clone(), other.fingerprint.clone()));
    }
    let metrics: Vec<MetricRow<T>> = rows.iter().map(|r| r.metrics).collect();
    let col = |f: fn(&MetricRow<T>) -> T| metrics.iter().map(f).collect::<Vec<T>>();
    let (maes, rmses, nrmses) = (col(|r| r.mae), col(|r| r.rmse), col(|r| r.nrmse));
    let pearsons: Vec<T> = metrics.iter().filter_map(|r| r.pearson).collect();

    let mean_row = MetricRow {
        mae: mean(&maes),
        rmse: mean(&rmses),
        nrmse: mean(&nrmses),
        pearson: (!pearsons.is_empty()).then(|| mean(&pearsons)),
    };
    let sd = match (sample_sd(&maes), sample_sd(&rmses), sample_sd(&nrmses)) {
        (Some(mae), Some(rmse), Some(nrmse)) => Some(MetricRow { mae, rmse, nrmse, pearson: sample_sd(&pearsons) }),
        _ => None,
    };
    Ok(ExperimentReport {
        fingerprint: first.fingerprint.clone(),
        repetitions: rows.len(),
        rows: metrics,
        mean: mean_row,
        sd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown" | "md" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            other => Err(format!("unknown table format `{other}`")),
        }
    }
}

/// Plain string table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(Into::into).collect());
    }

    pub fn render(&self, format: TableFormat) -> String {
        let mut out = String::new();
        match format {
            TableFormat::Csv => {
                for line in std::iter::once(&self.header).chain(&self.rows) {
                    out.push_str(&line.join(","));
                    out.push('\n');
                }
            }
            TableFormat::Markdown => {
                let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
                out.push_str(&line(&self.header));
                out.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
                for row in &self.rows {
                    out.push_str(&line(row));
                }
            }
        }
        out
    }
}

/// Two-decimal cell text.
pub fn cell<T: Scalar>(x: Option<T>) -> String {
    match x.map(to_f64) {
        Some(v) if v.is_finite() => {
            let s = format!("{v:.2}");
            if s == "-0.00" { "0.00".into() } else { s }
        }
        _ => "n/a".into(),
    }
}

/// Renders `metric,mean,sd,r1..rR` with one line per metric.
pub fn emit_table<T: Scalar>(report: &ExperimentReport<T>, format: TableFormat) -> String {
    let mut header = vec!["metric".to_string(), "mean".into(), "sd".into()];
    header.extend((1..=report.rows.len()).map(|i| format!("r{i}")));
    let mut table = Table::new(header);
    let metrics: [(&str, fn(&MetricRow<T>) -> Option<T>); 4] = [
        ("MAE", |r| Some(r.mae)),
        ("RMSE", |r| Some(r.rmse)),
        ("NRMSE", |r| Some(r.nrmse)),
        ("Pearson", |r| r.pearson),
    ];
    for (name, get) in metrics {
        let mut row = vec![name.to_string(), cell(get(&report.mean)), cell(report.sd.as_ref().and_then(get))];
        row.extend(report.rows.iter().map(|r| cell(get(r))));
        table.push(row);
    }
    table.render(format)
}
