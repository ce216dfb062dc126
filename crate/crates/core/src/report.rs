//! Tabular reports rendered as CSV and markdown.

use std::io::Write;
use std::path::Path;

use crate::eval::{AggregateReport, HorizonTables, MetricBlock};
use crate::run_store::write_atomic;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), fmt4)
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Table { headers: headers.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        assert_eq!(row.len(), self.headers.len(), "row width");
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.headers)?;
        for r in &self.rows {
            out.write_record(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("utf-8 cells")
    }

    pub fn to_markdown(&self) -> String {
        let esc = |s: &str| s.replace('|', "\\|");
        let mut s = format!("| {} |\n", self.headers.iter().map(|h| esc(h)).collect::<Vec<_>>().join(" | "));
        s.push_str(&format!("|{}\n", "---|".repeat(self.headers.len())));
        for r in &self.rows {
            s.push_str(&format!("| {} |\n", r.iter().map(|c| esc(c)).collect::<Vec<_>>().join(" | ")));
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.md` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str, title: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.md")), format!("# {title}\n\n{}", self.to_markdown()).as_bytes())
    }
}

fn block_row(run: &str, subset: &str, b: &MetricBlock, dropped: usize) -> Vec<String> {
    vec![
        run.into(),
        subset.into(),
        b.tasks.to_string(),
        b.steps.to_string(),
        fmt4(b.type_match),
        fmt4(b.exact_match),
        fmt4(b.progress),
        fmt4(b.success),
        b.success_tasks.to_string(),
        dropped.to_string(),
    ]
}

/// One row per run and subset (all steps / reference kinds the model
/// supports).
pub fn eval_table(runs: &[(String, AggregateReport)]) -> Table {
    let mut t = Table::new([
        "run",
        "subset",
        "tasks",
        "steps",
        "type_match",
        "exact_match",
        "progress",
        "success",
        "success_tasks",
        "tasks_dropped",
    ]);
    for (run, r) in runs {
        t.rows.push(block_row(run, "all", &r.all, r.tasks_dropped));
        t.rows.push(block_row(run, "supported", &r.supported_only, r.tasks_dropped));
    }
    t
}

pub fn horizon_table(h: &HorizonTables) -> Table {
    let mut t = Table::new(["stratum", "value", "steps", "exact_match"]);
    for (i, c) in &h.by_index {
        t.push(["step_index".to_string(), i.to_string(), c.n.to_string(), fmt_opt(c.mean())]);
    }
    for (b, c) in h.by_bucket.iter().enumerate() {
        let range = format!("({:.1},{:.1}]", b as f64 / 5.0, (b + 1) as f64 / 5.0);
        t.push(["step_ratio".to_string(), range, c.n.to_string(), fmt_opt(c.mean())]);
    }
    t
}
