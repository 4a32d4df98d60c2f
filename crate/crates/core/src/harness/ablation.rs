//! One-axis-at-a-time sweeps over run configurations, repeated over seeds.
//!
//! A matrix file maps axis names to value lists, plus an optional `base`
//! object of dotted overrides applied to every cell:
//!
//! ```json
//! { "base": {"trainer.n_steps": 20000}, "H": [0, 1, 2], "beta": [1, 3, 10],
//!   "Hk": [{"trainer.H": 2, "trainer.k": 10}, {"trainer.H": 5, "trainer.k": 4}] }
//! ```
//!
//! Object values change several keys jointly.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{error, info};
use serde::Deserialize;
use serde_json::Value;

use crate::env::{Dataset, EvalReport};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::trainer::train;

/// Short axis names and the config keys they set.
pub const ALIASES: [(&str, &str); 7] = [
    ("H", "trainer.H"),
    ("k", "trainer.k"),
    ("causal_mixer_mode", "trainer.causal_mixer_mode"),
    ("order", "trainer.generation_order"),
    ("teacher_forcing", "trainer.teacher_forcing"),
    ("beta", "weights.beta"),
    ("lambda_h", "weights.lambda_h"),
];

fn resolve_key(axis: &str) -> &str {
    ALIASES.iter().find(|(a, _)| *a == axis).map_or(axis, |(_, k)| k)
}

fn normalise(key: &str, v: &Value) -> Value {
    match (key, v.as_str()) {
        ("trainer.teacher_forcing", Some("on")) => Value::Bool(true),
        ("trainer.teacher_forcing", Some("off")) => Value::Bool(false),
        _ => v.clone(),
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct AblationMatrix {
    #[serde(default)]
    pub base: BTreeMap<String, Value>,
    #[serde(flatten)]
    pub axes: BTreeMap<String, Vec<Value>>,
}

impl AblationMatrix {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: AblationMatrix =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("ablation matrix: {e}")))?;
        if m.axes.is_empty() || m.axes.values().any(|v| v.is_empty()) {
            return Err(Error::Config("ablation matrix needs at least one non-empty axis".into()));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    pub axis: String,
    pub value: Value,
    pub run: RunConfig,
}

impl Cell {
    /// Filesystem-safe directory name, unique through the index prefix.
    pub fn dir_name(&self, index: usize) -> String {
        let clean: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect();
        format!("{index:02}_{clean}")
    }
}

fn compact(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Object(m) => m.iter().map(|(k, v)| format!("{k}={}", compact(v))).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// One cell per axis value; every cell is `base` plus that single change.
pub fn expand(matrix: &AblationMatrix, base: &RunConfig) -> Result<Vec<Cell>> {
    let mut root = base.clone();
    for (k, v) in &matrix.base {
        root = root.set(resolve_key(k), normalise(resolve_key(k), v))?;
    }
    let mut cells = Vec::new();
    for (axis, values) in &matrix.axes {
        for v in values {
            let run = match v {
                Value::Object(m) => {
                    let mut r = root.clone();
                    for (k, x) in m {
                        r = r.set(resolve_key(k), normalise(resolve_key(k), x))?;
                    }
                    r
                }
                x => root.set(resolve_key(axis), normalise(resolve_key(axis), x))?,
            };
            cells.push(Cell {
                label: format!("{axis}={}", compact(v)),
                axis: axis.clone(),
                value: v.clone(),
                run,
            });
        }
    }
    Ok(cells)
}

/// Seed `j` of a cell offsets the base training seed by `j`.
pub fn seeded(run: &RunConfig, j: usize) -> RunConfig {
    let mut r = run.clone();
    r.trainer.seed = run.trainer.seed.wrapping_add(j as u64);
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub axis: String,
    pub value: String,
    pub successes: Vec<f64>,
    pub failed: usize,
}

impl SummaryRow {
    pub fn mean(&self) -> Option<f64> {
        let n = self.successes.len();
        (n > 0).then(|| self.successes.iter().sum::<f64>() / n as f64)
    }

    /// Sample standard deviation over seeds; needs two completed seeds.
    pub fn std(&self) -> Option<f64> {
        let n = self.successes.len();
        let m = self.mean()?;
        (n > 1).then(|| {
            (self.successes.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        })
    }
}

pub fn seed_dir(out: &Path, cell: &Cell, index: usize, seed: usize) -> PathBuf {
    out.join(cell.dir_name(index)).join(format!("seed_{seed}"))
}

/// Rebuild the summary from per-run `eval.json` files alone.
pub fn summarize(out: &Path, cells: &[Cell], seeds: usize) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        let mut row = SummaryRow {
            label: c.label.clone(),
            axis: c.axis.clone(),
            value: compact(&c.value),
            successes: Vec::new(),
            failed: 0,
        };
        for j in 0..seeds {
            let p = seed_dir(out, c, i, j).join("eval.json");
            match std::fs::read_to_string(&p) {
                Ok(text) => {
                    let r: EvalReport = serde_json::from_str(&text)
                        .map_err(|e| Error::Format { offset: 0, msg: format!("{}: {e}", p.display()) })?;
                    row.successes.push(r.mean);
                }
                Err(_) => row.failed += 1,
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:.4}"))
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut o = String::from("cell,axis,value,n_seeds,n_failed,mean,std\n");
    for r in rows {
        writeln!(
            o,
            "{},{},{},{},{},{},{}",
            csv_field(&r.label),
            csv_field(&r.axis),
            csv_field(&r.value),
            r.successes.len(),
            r.failed,
            opt(r.mean()),
            opt(r.std())
        )
        .unwrap();
    }
    o
}

/// Aligned text table, one row per cell: success rate as mean ± std.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let cells: Vec<[String; 3]> = rows
        .iter()
        .map(|r| {
            let score = match (r.mean(), r.std()) {
                (Some(m), Some(s)) => format!("{m:.1} ± {s:.1}"),
                (Some(m), None) => format!("{m:.1}"),
                _ => "-".into(),
            };
            let seeds = if r.failed > 0 {
                format!("{} ({} FAILED)", r.successes.len(), r.failed)
            } else {
                r.successes.len().to_string()
            };
            [r.label.clone(), score, seeds]
        })
        .collect();
    let head = ["variant", "success (%)", "seeds"];
    let w: Vec<usize> = (0..3)
        .map(|c| cells.iter().map(|r| r[c].chars().count()).chain([head[c].len()]).max().unwrap())
        .collect();
    let line = |r: [&str; 3]| {
        format!(
            "{:<w0$}  {:>w1$}  {:>w2$}\n",
            r[0],
            r[1],
            r[2],
            w0 = w[0],
            w1 = w[1],
            w2 = w[2]
        )
    };
    let mut o = line(head);
    o.push_str(&format!("{}\n", "-".repeat(w[0] + w[1] + w[2] + 4)));
    for r in &cells {
        o.push_str(&line([&r[0], &r[1], &r[2]]));
    }
    o
}

#[derive(Debug)]
pub struct AblationReport {
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<(String, Error)>,
}

impl AblationReport {
    pub fn any_numerical(&self) -> bool {
        self.failures.iter().any(|(_, e)| matches!(e, Error::Numerical(_)))
    }
}

/// Train every cell × seed sequentially, then write `summary.csv` and
/// `summary.txt`. Failed runs leave a `FAILED` note in their directory.
pub fn run_ablation(matrix: &AblationMatrix, base: &RunConfig, seeds: usize, out: &Path) -> Result<AblationReport> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be ≥ 1".into()));
    }
    let cells = expand(matrix, base)?;
    info!("{} cells × {seeds} seeds = {} runs", cells.len(), cells.len() * seeds);
    let mut datasets: HashMap<String, Dataset> = HashMap::new();
    let mut failures = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        for j in 0..seeds {
            let dir = seed_dir(out, c, i, j);
            let run = seeded(&c.run, j);
            let res = (|| -> Result<()> {
                let maze = run.maze_spec()?;
                let key = format!("{}|{}", run.maze, serde_json::to_string(&run.dataset)?);
                if !datasets.contains_key(&key) {
                    datasets.insert(key.clone(), run.dataset(&maze)?);
                }
                let o = train::<f32>(&run, &datasets[&key], &maze, Some(&dir))?;
                if let Some(r) = o.final_eval {
                    info!("{} seed {j}: {:.1}%", c.label, r.mean);
                }
                Ok(())
            })();
            if let Err(e) = res {
                error!("{} seed {j} failed: {e}", c.label);
                std::fs::create_dir_all(&dir).map_err(|x| Error::io(&dir, x))?;
                let p = dir.join("FAILED");
                std::fs::write(&p, format!("{e}\n")).map_err(|x| Error::io(&p, x))?;
                failures.push((format!("{} seed {j}", c.label), e));
            }
        }
    }
    let rows = summarize(out, &cells, seeds)?;
    for (name, text) in [("summary.csv", summary_csv(&rows)), ("summary.txt", summary_table(&rows))] {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(AblationReport { rows, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::leaf_keys;

    fn leaves(r: &RunConfig) -> BTreeMap<String, Value> {
        let doc = serde_json::to_value(r).unwrap();
        leaf_keys(&doc)
            .into_iter()
            .map(|k| {
                let v = k.split('.').fold(&doc, |d, p| &d[p]).clone();
                (k, v)
            })
            .collect()
    }

    fn diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
        let (la, lb) = (leaves(a), leaves(b));
        la.keys().filter(|k| la[*k] != lb[*k]).cloned().collect()
    }

    #[test]
    fn cells_differ_only_on_their_axis() {
        let m = AblationMatrix::from_json(
            r#"{"H": [0, 2], "teacher_forcing": ["off"], "order": ["forward"],
                "causal_mixer_mode": ["fixed_average"], "beta": [10],
                "Hk": [{"trainer.H": 5, "trainer.k": 4}]}"#,
        )
        .unwrap();
        let base = RunConfig::default();
        let cells = expand(&m, &base).unwrap();
        assert_eq!(cells.len(), 7);
        let by = |l: &str| cells.iter().find(|c| c.label == l).unwrap();
        assert_eq!(diff(&base, &by("H=0").run), vec!["trainer.H"]);
        assert_eq!(diff(&base, &by("teacher_forcing=off").run), vec!["trainer.teacher_forcing"]);
        assert!(!by("teacher_forcing=off").run.trainer.teacher_forcing);
        assert_eq!(diff(&base, &by("beta=10").run), vec!["weights.beta"]);
        assert_eq!(diff(&base, &by("Hk=trainer.H=5,trainer.k=4").run), vec!["trainer.H", "trainer.k"]);
        assert_eq!(diff(&base, &by("order=forward").run), vec!["trainer.generation_order"]);
    }

    #[test]
    fn base_overrides_apply_everywhere() {
        let m = AblationMatrix::from_json(r#"{"base": {"trainer.n_steps": 7}, "beta": [1, 3]}"#).unwrap();
        let cells = expand(&m, &RunConfig::default()).unwrap();
        assert!(cells.iter().all(|c| c.run.trainer.n_steps == 7));
    }

    #[test]
    fn bad_matrices_rejected() {
        assert!(AblationMatrix::from_json("{}").is_err());
        assert!(AblationMatrix::from_json(r#"{"H": []}"#).is_err());
        let m = AblationMatrix::from_json(r#"{"trainer.nope": [1]}"#).unwrap();
        assert!(expand(&m, &RunConfig::default()).is_err());
    }

    #[test]
    fn sample_std_over_seeds() {
        let r = SummaryRow {
            label: "x".into(),
            axis: "x".into(),
            value: "1".into(),
            successes: vec![60.0, 80.0, 100.0],
            failed: 0,
        };
        assert_eq!(r.mean(), Some(80.0));
        assert!((r.std().unwrap() - 20.0).abs() < 1e-12);
        let one = SummaryRow { successes: vec![50.0], ..r };
        assert_eq!(one.std(), None);
    }

    #[test]
    fn two_cells_two_seeds_four_runs() {
        let mut base = RunConfig::default();
        base.trainer.n_steps = 2;
        base.trainer.batch_size = 8;
        base.dataset.n_traj = 2;
        base.eval.episodes_per_pair = 1;
        base.model.value_hidden = vec![8];
        let m = AblationMatrix::from_json(r#"{"H": [0, 1]}"#).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rep = run_ablation(&m, &base, 2, dir.path()).unwrap();
        assert!(rep.failures.is_empty());
        assert_eq!(rep.rows.len(), 2);
        let mut evals = 0;
        for e in walk(dir.path()) {
            if e.ends_with("eval.json") {
                evals += 1;
            }
        }
        assert_eq!(evals, 4);
        let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let again = summarize(dir.path(), &expand(&m, &base).unwrap(), 2).unwrap();
        assert_eq!(again, rep.rows);
        let txt = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(txt.contains("H=0") && txt.contains("H=1"));
    }

    #[test]
    fn failed_runs_are_marked() {
        let mut base = RunConfig::default();
        base.trainer.n_steps = 1;
        base.trainer.batch_size = 8;
        base.dataset.n_traj = 1;
        base.eval.episodes_per_pair = 1;
        // The second cell cannot sample a batch this large.
        let m = AblationMatrix::from_json(r#"{"trainer.batch_size": [8, 100000]}"#).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let rep = run_ablation(&m, &base, 1, dir.path()).unwrap();
        assert_eq!(rep.failures.len(), 1);
        assert_eq!(rep.rows[1].failed, 1);
        assert!(summary_table(&rep.rows).contains("FAILED"));
        assert!(walk(dir.path()).iter().any(|p| p.ends_with("FAILED")));
    }

    fn walk(p: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(p).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }
}
