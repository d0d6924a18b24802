//! Benchmark summary metric: per-metric Gap Ratio against the best method,
//! aggregated into mean (l1) and normalized l2 summaries with
//! effectiveness/efficiency sub-groups.
//!
//! For metric value `s_m` and per-metric best `s_best`,
//! `GR = |s_m - s_best| / s_best`. The best is taken per metric by
//! orientation, unless the table carries an explicit best row, which is
//! authoritative. Grouped entries (memory + storage) sum both the method
//! values and the per-metric bests before the ratio.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub orientation: Orientation,
}

/// Methods-by-metrics grid of scalars with per-metric orientation and an
/// optional explicit hypothetical-best row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTable {
    pub metrics: Vec<MetricSpec>,
    pub methods: Vec<String>,
    /// values[m][j] = method m, metric j.
    pub values: Vec<Vec<f64>>,
    pub explicit_best: Option<Vec<f64>>,
}

impl BenchmarkTable {
    /// Parse the CSV interchange format:
    ///
    /// ```text
    /// #orientation,higher,higher,...,lower
    /// method,ua_style,...,storage
    /// ESD,98.58,...,4.3
    /// Best,98.58,...,0.0
    /// ```
    ///
    /// The first line maps orientations onto the metric columns; a row named
    /// `best` (case-insensitive) becomes the explicit best row.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let orientation_line = lines
            .next()
            .ok_or_else(|| Error::CorruptArtifact("empty benchmark CSV".into()))?;
        let mut orient_fields = orientation_line.split(',');
        if orient_fields.next() != Some("#orientation") {
            return Err(Error::CorruptArtifact(
                "benchmark CSV must start with an `#orientation` line".into(),
            ));
        }
        let orientations: Vec<Orientation> = orient_fields
            .map(|f| match f.trim() {
                "higher" | "higher-better" => Ok(Orientation::HigherBetter),
                "lower" | "lower-better" => Ok(Orientation::LowerBetter),
                other => Err(Error::CorruptArtifact(format!(
                    "unknown orientation `{other}`"
                ))),
            })
            .collect::<Result<_>>()?;

        let header = lines
            .next()
            .ok_or_else(|| Error::CorruptArtifact("missing benchmark header row".into()))?;
        let columns: Vec<&str> = header.split(',').map(str::trim).collect();
        if columns.len() < 2 {
            return Err(Error::CorruptArtifact("benchmark header too short".into()));
        }
        let metric_names = &columns[1..];
        if metric_names.len() != orientations.len() {
            return Err(Error::CorruptArtifact(format!(
                "{} orientations for {} metric columns",
                orientations.len(),
                metric_names.len()
            )));
        }
        let metrics: Vec<MetricSpec> = metric_names
            .iter()
            .zip(orientations)
            .map(|(name, orientation)| MetricSpec {
                name: name.to_string(),
                orientation,
            })
            .collect();

        let mut methods = Vec::new();
        let mut values = Vec::new();
        let mut explicit_best = None;
        for line in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != metrics.len() + 1 {
                return Err(Error::CorruptArtifact(format!(
                    "row `{}` has {} fields, expected {}",
                    fields[0],
                    fields.len(),
                    metrics.len() + 1
                )));
            }
            let row: Vec<f64> = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        Error::CorruptArtifact(format!("bad number `{f}` in benchmark CSV"))
                    })
                })
                .collect::<Result<_>>()?;
            if fields[0].eq_ignore_ascii_case("best") {
                explicit_best = Some(row);
            } else {
                methods.push(fields[0].to_string());
                values.push(row);
            }
        }
        if methods.is_empty() {
            return Err(Error::CorruptArtifact(
                "benchmark CSV has no methods".into(),
            ));
        }
        Ok(BenchmarkTable {
            metrics,
            methods,
            values,
            explicit_best,
        })
    }

    fn metric_index(&self, name: &str) -> Result<usize> {
        self.metrics
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::Config(format!("unknown metric `{name}`")))
    }

    /// Per-metric best: the explicit best row when present, otherwise max or
    /// min over methods by orientation.
    fn metric_best(&self, j: usize) -> f64 {
        if let Some(best) = &self.explicit_best {
            return best[j];
        }
        let column = self.values.iter().map(|row| row[j]);
        match self.metrics[j].orientation {
            Orientation::HigherBetter => column.fold(f64::NEG_INFINITY, f64::max),
            Orientation::LowerBetter => column.fold(f64::INFINITY, f64::min),
        }
    }
}

/// One entry of the gap-ratio vector: a single metric, or several summed
/// into one (the memory + storage rule).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntrySpec {
    pub name: String,
    pub members: Vec<String>,
}

/// How the gap-ratio vector is assembled and grouped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRatioSpec {
    pub entries: Vec<EntrySpec>,
    pub effectiveness: Vec<String>,
    pub efficiency: Vec<String>,
}

const CANVAS_COLUMNS: [&str; 10] = [
    "ua_style",
    "ira_style",
    "cra_style",
    "ua_object",
    "ira_object",
    "cra_object",
    "fid",
    "time",
    "memory",
    "storage",
];

impl GapRatioSpec {
    /// The image-generation benchmark recipe: nine entries (six accuracies,
    /// FID, time, memory+storage summed as one), effectiveness = the first
    /// seven, efficiency = the last two.
    pub fn canvas() -> Self {
        let single = |n: &str| EntrySpec {
            name: n.to_string(),
            members: vec![n.to_string()],
        };
        let mut entries: Vec<EntrySpec> = CANVAS_COLUMNS[..8].iter().map(|n| single(n)).collect();
        entries.push(EntrySpec {
            name: "memory+storage".to_string(),
            members: vec!["memory".to_string(), "storage".to_string()],
        });
        GapRatioSpec {
            entries,
            effectiveness: CANVAS_COLUMNS[..7].iter().map(|s| s.to_string()).collect(),
            efficiency: vec!["time".to_string(), "memory+storage".to_string()],
        }
    }

    /// Canvas recipe when the table carries exactly those columns, otherwise
    /// one entry per metric with everything grouped as effectiveness.
    pub fn default_for(table: &BenchmarkTable) -> Self {
        let names: Vec<&str> = table.metrics.iter().map(|m| m.name.as_str()).collect();
        if names == CANVAS_COLUMNS {
            return Self::canvas();
        }
        GapRatioSpec {
            entries: names
                .iter()
                .map(|n| EntrySpec {
                    name: n.to_string(),
                    members: vec![n.to_string()],
                })
                .collect(),
            effectiveness: names.iter().map(|s| s.to_string()).collect(),
            efficiency: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub l1: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodGapRatio {
    pub method: String,
    pub gr: Vec<f64>,
    /// l1 norm divided by vector length (the mean).
    pub mean: f64,
    /// l2 norm divided by vector length.
    pub l2: f64,
    pub effectiveness: Option<GroupSummary>,
    pub efficiency: Option<GroupSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRatioReport {
    pub entry_names: Vec<String>,
    pub methods: Vec<MethodGapRatio>,
}

impl GapRatioReport {
    pub fn method(&self, name: &str) -> Option<&MethodGapRatio> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for name in &self.entry_names {
            out.push_str(&format!(",gr_{name}"));
        }
        out.push_str(",mean,l2,effectiveness_l1,effectiveness_l2,efficiency_l1,efficiency_l2\n");
        for m in &self.methods {
            out.push_str(&m.method);
            for g in &m.gr {
                out.push_str(&format!(",{g:?}"));
            }
            let group = |g: &Option<GroupSummary>, which: bool| match g {
                Some(s) => format!("{:?}", if which { s.l1 } else { s.l2 }),
                None => String::new(),
            };
            out.push_str(&format!(
                ",{:?},{:?},{},{},{},{}\n",
                m.mean,
                m.l2,
                group(&m.effectiveness, true),
                group(&m.effectiveness, false),
                group(&m.efficiency, true),
                group(&m.efficiency, false),
            ));
        }
        out
    }
}

/// Assemble the gap-ratio vector per method and summarize it.
pub fn gap_ratio(table: &BenchmarkTable, spec: &GapRatioSpec) -> Result<GapRatioReport> {
    // Resolve entries into member column indices and validate orientations.
    let mut resolved: Vec<(String, Vec<usize>)> = Vec::with_capacity(spec.entries.len());
    for entry in &spec.entries {
        if entry.members.is_empty() {
            return Err(Error::Config(format!(
                "entry `{}` has no members",
                entry.name
            )));
        }
        let idx: Vec<usize> = entry
            .members
            .iter()
            .map(|m| table.metric_index(m))
            .collect::<Result<_>>()?;
        let first = table.metrics[idx[0]].orientation;
        if idx.iter().any(|&j| table.metrics[j].orientation != first) {
            return Err(Error::Config(format!(
                "entry `{}` mixes orientations",
                entry.name
            )));
        }
        resolved.push((entry.name.clone(), idx));
    }

    let entry_names: Vec<String> = resolved.iter().map(|(n, _)| n.clone()).collect();
    let bests: Vec<f64> = resolved
        .iter()
        .map(|(name, idx)| {
            let best: f64 = idx.iter().map(|&j| table.metric_best(j)).sum();
            if best == 0.0 {
                Err(Error::UndefinedGapRatio(name.clone()))
            } else {
                Ok(best)
            }
        })
        .collect::<Result<_>>()?;

    let group_indices = |names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                entry_names
                    .iter()
                    .position(|e| e == n)
                    .ok_or_else(|| Error::Config(format!("unknown gap-ratio entry `{n}`")))
            })
            .collect()
    };
    let eff_idx = group_indices(&spec.effectiveness)?;
    let effc_idx = group_indices(&spec.efficiency)?;

    let summarize = |gr: &[f64], idx: &[usize]| -> Option<GroupSummary> {
        if idx.is_empty() {
            return None;
        }
        let n = idx.len() as f64;
        let l1 = idx.iter().map(|&i| gr[i]).sum::<f64>() / n;
        let l2 = idx.iter().map(|&i| gr[i] * gr[i]).sum::<f64>().sqrt() / n;
        Some(GroupSummary { l1, l2 })
    };

    let mut methods = Vec::with_capacity(table.methods.len());
    for (m, row) in table.methods.iter().zip(table.values.iter()) {
        let gr: Vec<f64> = resolved
            .iter()
            .zip(bests.iter())
            .map(|((_, idx), &best)| {
                let value: f64 = idx.iter().map(|&j| row[j]).sum();
                (value - best).abs() / best
            })
            .collect();
        let n = gr.len() as f64;
        let mean = gr.iter().sum::<f64>() / n;
        let l2 = gr.iter().map(|g| g * g).sum::<f64>().sqrt() / n;
        methods.push(MethodGapRatio {
            method: m.clone(),
            gr: gr.clone(),
            mean,
            l2,
            effectiveness: summarize(&gr, &eff_idx),
            efficiency: summarize(&gr, &effc_idx),
        });
    }
    Ok(GapRatioReport {
        entry_names,
        methods,
    })
}
