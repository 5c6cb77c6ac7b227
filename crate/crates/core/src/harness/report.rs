//! Aggregation of finished runs into per-method summaries.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::run::{MANIFEST_FILE, METRICS_FILE};

/// Final-epoch values of one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub seed: String,
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub entropy: Option<f64>,
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub median: f64,
    /// Interquartile range, `q75 - q25`.
    pub iqr: f64,
}

impl Stat {
    /// `None` for an empty sample. Quantiles interpolate linearly between
    /// order statistics.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Stat {
            median: q(0.5),
            iqr: q(0.75) - q(0.25),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub overall: Option<Stat>,
    pub many: Option<Stat>,
    pub medium: Option<Stat>,
    pub few: Option<Stat>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Sorted by method name.
    pub summary: Vec<MethodSummary>,
    /// Directories that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Expands each path into run directories: a directory holding
/// `metrics.csv` is a run; otherwise its `<method>/<seed-dir>` children
/// that hold one are. Paths matching neither are kept so the report can
/// flag them.
pub fn collect_run_dirs(paths: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(METRICS_FILE).is_file() {
            out.push(p.clone());
            continue;
        }
        let mut found = Vec::new();
        for method in sorted_subdirs(p) {
            for run in sorted_subdirs(&method) {
                if run.join(METRICS_FILE).is_file() {
                    found.push(run);
                }
            }
        }
        if found.is_empty() {
            out.push(p.clone());
        }
        out.extend(found);
    }
    out
}

fn sorted_subdirs(p: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(p)
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs
}

fn parse_opt(s: &str) -> Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| format!("bad number `{s}`"))
    }
}

fn read_row(dir: &Path) -> Result<ReportRow, String> {
    let path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty metrics file")?.split(',').collect();
    let last = lines.rfind(|l| !l.trim().is_empty()).ok_or("no epoch rows")?;
    let cells: Vec<&str> = last.split(',').collect();
    if cells.len() != header.len() {
        return Err("row length differs from header".into());
    }
    let col = |name: &str| -> Result<Option<f64>, String> {
        match header.iter().position(|h| *h == name) {
            Some(i) => parse_opt(cells[i]),
            None => Ok(None),
        }
    };
    let overall = col("overall")?.ok_or("missing overall accuracy")?;
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let leaf = name(dir);
    let (method, seed) = match leaf.strip_prefix("seed-") {
        Some(seed) => (dir.parent().map(name).unwrap_or_default(), seed.to_string()),
        None => (leaf, String::new()),
    };
    let wall_seconds = std::fs::read_to_string(dir.join(MANIFEST_FILE)).ok().and_then(|m| {
        m.lines()
            .find_map(|l| l.strip_prefix("wall_seconds = "))
            .and_then(|v| v.trim().parse().ok())
    });
    Ok(ReportRow {
        method,
        seed,
        overall,
        many: col("many")?,
        medium: col("medium")?,
        few: col("few")?,
        entropy: col("entropy")?,
        wall_seconds,
    })
}

pub fn report(run_dirs: &[PathBuf]) -> Report {
    let mut rep = Report::default();
    for dir in run_dirs {
        match read_row(dir) {
            Ok(row) => rep.rows.push(row),
            Err(why) => rep.skipped.push((dir.clone(), why)),
        }
    }
    rep.rows.sort_by(|a, b| (&a.method, &a.seed).cmp(&(&b.method, &b.seed)));
    let mut methods: Vec<&str> = rep.rows.iter().map(|r| r.method.as_str()).collect();
    methods.dedup();
    rep.summary = methods
        .into_iter()
        .map(|m| {
            let rows: Vec<&ReportRow> = rep.rows.iter().filter(|r| r.method == m).collect();
            let stat = |f: &dyn Fn(&ReportRow) -> Option<f64>| {
                Stat::of(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            MethodSummary {
                method: m.to_string(),
                runs: rows.len(),
                overall: stat(&|r| Some(r.overall)),
                many: stat(&|r| r.many),
                medium: stat(&|r| r.medium),
                few: stat(&|r| r.few),
            }
        })
        .collect();
    rep
}

const SPLITS: [&str; 4] = ["overall", "many", "medium", "few"];

impl MethodSummary {
    fn stats(&self) -> [Option<Stat>; 4] {
        [self.overall, self.many, self.medium, self.few]
    }
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,runs");
        for sp in SPLITS {
            write!(s, ",{sp}_median,{sp}_iqr").unwrap();
        }
        s.push('\n');
        for m in &self.summary {
            write!(s, "{},{}", m.method, m.runs).unwrap();
            for st in m.stats() {
                match st {
                    Some(st) => write!(s, ",{},{}", st.median, st.iqr).unwrap(),
                    None => s.push_str(",,"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Fixed-width table of medians and IQRs in percent.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16}{:>5}", "method", "runs");
        for sp in SPLITS {
            write!(s, "{sp:>17}").unwrap();
        }
        s.push('\n');
        for m in &self.summary {
            write!(s, "{:<16}{:>5}", m.method, m.runs).unwrap();
            for st in m.stats() {
                match st {
                    Some(st) => write!(s, "{:>17}", format!("{:.2} ± {:.2}", 100.0 * st.median, 100.0 * st.iqr / 2.0)).unwrap(),
                    None => write!(s, "{:>17}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        for (dir, why) in &self.skipped {
            writeln!(s, "skipped {}: {why}", dir.display()).unwrap();
        }
        s
    }
}
