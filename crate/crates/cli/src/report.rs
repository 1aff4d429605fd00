use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

/// Where a reported number came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Observed by running the system.
    Measured,
    /// Computed from a closed-form model.
    Model,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Measured => "measured",
            Provenance::Model => "model",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn is_pass(self) -> bool {
        self == Verdict::Pass
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        }
    }
}

/// One labelled result row with its ordered metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub label: String,
    pub provenance: Provenance,
    pub metrics: Vec<(String, String)>,
}

impl ResultRow {
    pub fn new(label: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            label: label.into(),
            provenance,
            metrics: Vec::new(),
        }
    }

    pub fn metric(mut self, name: impl Into<String>, value: impl ToString) -> Self {
        self.metrics.push((name.into(), value.to_string()));
        self
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub parameters: Vec<(String, String)>,
    pub rows: Vec<ResultRow>,
    pub verdict: Verdict,
    /// Why the verdict is what it is.
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn new(experiment: impl Into<String>) -> Self {
        Self {
            experiment: experiment.into(),
            parameters: Vec::new(),
            rows: Vec::new(),
            verdict: Verdict::Pass,
            notes: Vec::new(),
        }
    }

    pub fn parameter(mut self, name: impl Into<String>, value: impl ToString) -> Self {
        self.parameters.push((name.into(), value.to_string()));
        self
    }

    pub fn row(&self, label: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Records a bound; any failed bound fails the report.
    pub fn require(&mut self, ok: bool, note: impl Into<String>) {
        let note = note.into();
        self.notes.push(format!("{} {note}", if ok { "ok:" } else { "violated:" }));
        if !ok {
            self.verdict = Verdict::Fail;
        }
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "experiment: {}", self.experiment);
        for (name, value) in &self.parameters {
            let _ = writeln!(out, "  {name} = {value}");
        }
        for row in &self.rows {
            let metrics: Vec<String> = row.metrics.iter().map(|(n, v)| format!("{n}={v}")).collect();
            let _ = writeln!(out, "  [{}] {}: {}", row.provenance.as_str(), row.label, metrics.join(" "));
        }
        for note in &self.notes {
            let _ = writeln!(out, "  {note}");
        }
        let _ = writeln!(out, "verdict: {}", self.verdict.as_str());
        out
    }

    /// Long format: one line per (row, metric), plus parameter and verdict lines.
    pub fn render_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let record = |w: &mut csv::Writer<Vec<u8>>, fields: [&str; 5]| w.write_record(fields).expect("write to memory");
        record(&mut writer, ["experiment", "row", "provenance", "metric", "value"]);
        for (name, value) in &self.parameters {
            record(&mut writer, [&self.experiment, "parameters", "", name, value]);
        }
        for row in &self.rows {
            for (name, value) in &row.metrics {
                record(&mut writer, [&self.experiment, &row.label, row.provenance.as_str(), name, value]);
            }
        }
        record(&mut writer, [&self.experiment, "verdict", "", "verdict", self.verdict.as_str()]);
        String::from_utf8(writer.into_inner().expect("flush to memory")).expect("csv is utf-8")
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Text => self.render_text(),
            OutputFormat::Csv => self.render_csv(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Text,
    Csv,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(OutputFormat::Text),
            "csv" => Ok(OutputFormat::Csv),
            other => Err(format!("unknown output format {other:?}, expected text or csv")),
        }
    }
}
