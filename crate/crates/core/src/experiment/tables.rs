use std::fmt::Write as _;
use std::path::PathBuf;

use super::run::{
    DatasetSummary, ACCURACY_FILE, COUNTS_FILE, DATASET_FILE, METRICS_FILE, TCAV_FILE,
};
use super::store::{ResultsStore, Scope, REPORTS_DIR};
use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::metrics::{BiasCountTable, ConceptScoreTable, MetricsReport};
use crate::training::SubgroupAccuracyTable;

const UNDEFINED: &str = "—";
const UNDEFINED_NOTE: &str =
    "— undefined: a denominator is zero (e.g. no explanation in a subgroup indicated bias).";

/// Stored artifacts of one ratio, each present once its stage completed.
pub struct RatioArtifacts {
    pub ratio: String,
    pub accuracy: Option<SubgroupAccuracyTable>,
    pub counts: Option<BiasCountTable>,
    pub metrics: Option<MetricsReport>,
    pub tcav: Option<Vec<ConceptScoreTable>>,
}

fn optional<T: serde::de::DeserializeOwned>(store: &ResultsStore, scope: Scope, name: &str) -> Result<Option<T>> {
    if store.exists(scope, name) {
        store.read_json(scope, name).map(Some)
    } else {
        Ok(None)
    }
}

pub fn load_artifacts(store: &ResultsStore) -> Result<Vec<RatioArtifacts>> {
    store
        .config()
        .experiment
        .ratios
        .iter()
        .map(|r| {
            let scope = Scope::Ratio(r.label());
            Ok(RatioArtifacts {
                ratio: r.label().to_string(),
                accuracy: optional(store, scope, ACCURACY_FILE)?,
                counts: optional(store, scope, COUNTS_FILE)?,
                metrics: optional(store, scope, METRICS_FILE)?,
                tcav: optional(store, scope, TCAV_FILE)?,
            })
        })
        .collect()
}

fn fmt1(x: f64) -> String {
    format!("{x:.1}")
}

fn csv_opt(x: Option<f64>) -> String {
    x.map(fmt1).unwrap_or_default()
}

fn md_opt(x: Option<f64>, undefined: &mut bool) -> String {
    match x {
        Some(v) => fmt1(v),
        None => {
            *undefined = true;
            UNDEFINED.to_string()
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_line(fields: &[String]) -> String {
    let mut line = fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",");
    line.push('\n');
    line
}

fn md_row(fields: &[String]) -> String {
    format!("| {} |\n", fields.join(" | "))
}

fn md_header(fields: &[String]) -> String {
    let mut s = md_row(fields);
    s.push_str(&md_row(&fields.iter().map(|_| "---".to_string()).collect::<Vec<_>>()));
    s
}

/// Rendered report files: name → contents.
pub struct RenderedTables {
    pub files: Vec<(String, String)>,
}

/// Builds every table from stored artifacts. Ratios without a given
/// artifact are left out of that table.
pub fn build_tables(summary: &DatasetSummary, artifacts: &[RatioArtifacts], tcav_enabled: bool) -> RenderedTables {
    let mut files = Vec::new();
    let labels: Vec<(u8, Vec<Instance>, String)> = artifacts
        .iter()
        .find_map(|a| a.accuracy.as_ref())
        .map(|t| {
            t.cells
                .iter()
                .map(|c| (c.class_label, c.instances.clone(), summary.cell_label(c.class_label, &c.instances)))
                .collect()
        })
        .unwrap_or_default();

    // Subgroup accuracy.
    let mut header = vec!["ratio".to_string()];
    header.extend(labels.iter().map(|l| l.2.clone()));
    header.extend(["Avg".to_string(), "w-bias".to_string()]);
    let mut csv = csv_line(&header);
    let mut md = String::from("# Subgroup accuracy (%)\n\n");
    md.push_str(&md_header(&header));
    for a in artifacts {
        let Some(t) = &a.accuracy else { continue };
        let mut row = vec![a.ratio.clone()];
        for (class_label, instances, _) in &labels {
            row.push(t.cell(*class_label, instances).map(|c| fmt1(c.accuracy)).unwrap_or_default());
        }
        row.extend([fmt1(t.avg), fmt1(t.w_bias)]);
        csv.push_str(&csv_line(&row));
        md.push_str(&md_row(&row));
    }
    files.push(("accuracy.csv".to_string(), csv));
    files.push(("accuracy.md".to_string(), md));

    // Bias counts.
    let mut header = vec!["ratio".to_string()];
    for (_, _, l) in &labels {
        header.extend([
            format!("{l} incorrect_bias"),
            format!("{l} bias"),
            format!("{l} examined"),
        ]);
    }
    header.extend([
        "Sum incorrect_bias".into(),
        "Sum bias".into(),
        "Sum examined".into(),
        "unjudgeable".into(),
    ]);
    let mut csv = csv_line(&header);
    let mut md_header_fields = vec!["ratio".to_string()];
    md_header_fields.extend(labels.iter().map(|l| l.2.clone()));
    md_header_fields.push("Sum".into());
    let mut md = String::from("# Explanations indicating bias\n\n");
    md.push_str(&md_header(&md_header_fields));
    let mut examined_note = Vec::new();
    for a in artifacts {
        let Some(t) = &a.counts else { continue };
        let mut row = vec![a.ratio.clone()];
        let mut md_cells = vec![a.ratio.clone()];
        for (class_label, instances, _) in &labels {
            match t.cell(*class_label, instances) {
                Some(c) => {
                    row.extend([
                        c.n_incorrect_bias.to_string(),
                        c.n_bias.to_string(),
                        c.n_examined.to_string(),
                    ]);
                    md_cells.push(format!("{}/{}", c.n_incorrect_bias, c.n_bias));
                }
                None => {
                    row.extend([String::new(), String::new(), String::new()]);
                    md_cells.push(String::new());
                }
            }
        }
        let (inc, bias, exam) = t.totals();
        row.extend([
            inc.to_string(),
            bias.to_string(),
            exam.to_string(),
            t.unjudgeable.to_string(),
        ]);
        md_cells.push(format!("{inc}/{bias}"));
        examined_note.push(format!("{}: {exam} examined, {} unjudgeable", a.ratio, t.unjudgeable));
        csv.push_str(&csv_line(&row));
        md.push_str(&md_row(&md_cells));
    }
    md.push_str(
        "\nCells: incorrect predictions with explanations indicating bias / explanations indicating bias.\n",
    );
    for n in examined_note {
        let _ = writeln!(md, "- {n}");
    }
    files.push(("counts.csv".to_string(), csv));
    files.push(("counts.md".to_string(), md));

    // Metrics.
    let header: Vec<String> = ["ratio", "unfairness", "M1", "M2", "M3", "M4"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut csv = csv_line(&header);
    let mut md = String::from("# Fairness metrics\n\n");
    md.push_str(&md_header(&header));
    let mut undefined = false;
    let mut flags = Vec::new();
    for a in artifacts {
        let Some(m) = &a.metrics else { continue };
        let values = [m.unfairness, m.m1, m.m2, m.m3, m.m4];
        let mut row = vec![a.ratio.clone()];
        row.extend(values.iter().map(|v| csv_opt(*v)));
        csv.push_str(&csv_line(&row));
        let mut row = vec![a.ratio.clone()];
        row.extend(values.iter().map(|v| md_opt(*v, &mut undefined)));
        md.push_str(&md_row(&row));
        flags.extend(m.flags.iter().map(|f| format!("{}: {f}", a.ratio)));
    }
    if undefined {
        let _ = write!(md, "\n{UNDEFINED_NOTE}\n");
    }
    if !flags.is_empty() {
        md.push_str("\nTolerance flags:\n");
        for f in flags {
            let _ = writeln!(md, "- {f}");
        }
    }
    files.push(("metrics.csv".to_string(), csv));
    files.push(("metrics.md".to_string(), md));

    // TCAV.
    if tcav_enabled {
        let mut csv = csv_line(
            &["ratio", "attribute", "class", "concept", "score", "p_value", "significant"]
                .map(String::from),
        );
        let mut md = String::from("# TCAV scores (%)\n\n");
        let attributes: Vec<String> = artifacts
            .iter()
            .find_map(|a| a.tcav.as_ref())
            .map(|t| t.iter().map(|x| x.attribute.clone()).collect())
            .unwrap_or_default();
        for attribute in &attributes {
            let spec = summary.attributes.iter().find(|s| &s.name == attribute);
            let concept = |i: Instance| spec.map_or_else(|| i.to_string(), |s| s.instance_label(i).to_string());
            let columns: Vec<(u8, Instance)> = (0..2u8)
                .flat_map(|c| Instance::BOTH.map(|i| (c, i)))
                .collect();
            let mut header = vec!["ratio".to_string()];
            header.extend(
                columns
                    .iter()
                    .map(|(c, i)| format!("{}/{}", summary.class_names[*c as usize], concept(*i))),
            );
            header.push("M4".into());
            let _ = write!(md, "## {attribute}\n\n");
            md.push_str(&md_header(&header));
            let mut undefined = false;
            for a in artifacts {
                let Some(tables) = &a.tcav else { continue };
                let Some(table) = tables.iter().find(|t| &t.attribute == attribute) else { continue };
                let mut row = vec![a.ratio.clone()];
                for (c, i) in &columns {
                    let cell = table.cells.iter().find(|x| x.class_label == *c && x.instance == *i);
                    match cell {
                        Some(cell) => {
                            csv.push_str(&csv_line(&[
                                a.ratio.clone(),
                                attribute.clone(),
                                summary.class_names[*c as usize].clone(),
                                concept(*i),
                                fmt1(cell.score),
                                cell.p_value.map(|p| format!("{p:.4}")).unwrap_or_default(),
                                cell.significant.map(|s| s.to_string()).unwrap_or_default(),
                            ]));
                            let p = cell.p_value.map(|p| format!(" (p={p:.3})")).unwrap_or_default();
                            row.push(format!("{}{p}", fmt1(cell.score)));
                        }
                        None => row.push(String::new()),
                    }
                }
                let m4 = a
                    .metrics
                    .as_ref()
                    .and_then(|m| m.per_attribute.iter().find(|x| &x.attribute == attribute))
                    .and_then(|x| x.m4);
                row.push(md_opt(m4, &mut undefined));
                md.push_str(&md_row(&row));
            }
            if undefined {
                let _ = write!(md, "\n{UNDEFINED_NOTE}\n");
            }
            md.push('\n');
        }
        files.push(("tcav.csv".to_string(), csv));
        files.push(("tcav.md".to_string(), md));
    }
    RenderedTables { files }
}

/// Writes CSV and markdown tables under `reports/`. Reports are derived
/// views, so they are rewritten on every call.
pub fn render_tables(store: &ResultsStore) -> Result<Vec<PathBuf>> {
    if !store.exists(Scope::Global, DATASET_FILE) {
        return Ok(Vec::new());
    }
    let summary: DatasetSummary = store.read_json(Scope::Global, DATASET_FILE)?;
    let artifacts = load_artifacts(store)?;
    let rendered = build_tables(&summary, &artifacts, store.config().tcav.enabled);
    let dir = store.root().join(REPORTS_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    for (name, contents) in rendered.files {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AttributeSpec, Ratio};
    use crate::experiment::DatasetSource;
    use crate::metrics::{build_report, ReportParams};

    fn summary() -> DatasetSummary {
        DatasetSummary {
            source: DatasetSource::Synthetic,
            class_names: ["D".into(), "N".into()],
            attributes: vec![AttributeSpec::new("gender", "M", "F", &["face"])],
            audited: vec!["gender".into()],
            samples: 0,
            subgroups: Default::default(),
            content_hash: String::new(),
        }
    }

    fn artifacts(counts: [(usize, usize, usize); 4], tcav: bool) -> RatioArtifacts {
        let ratio: Ratio = "1:0".parse().unwrap();
        let acc = SubgroupAccuracyTable::single(&ratio, "gender", [91.2, 47.9, 53.5, 95.7]).unwrap();
        let counts = BiasCountTable::single("1:0", "gender", counts).unwrap();
        let t = ConceptScoreTable::from_scores("1:0", "gender", [82.0, 18.0, 30.0, 70.0]);
        let tcav_tables = if tcav { vec![t] } else { Vec::new() };
        let metrics = build_report(&acc, Some(&counts), &tcav_tables, &ReportParams::default()).unwrap();
        RatioArtifacts {
            ratio: "1:0".into(),
            accuracy: Some(acc),
            counts: Some(counts),
            metrics: Some(metrics),
            tcav: tcav.then_some(tcav_tables),
        }
    }

    fn file<'a>(t: &'a RenderedTables, name: &str) -> Option<&'a str> {
        t.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    #[test]
    fn counts_render_as_incorrect_over_biased() {
        let a = artifacts([(3, 10, 50), (7, 8, 50), (8, 11, 50), (1, 9, 50)], true);
        let t = build_tables(&summary(), &[a], true);
        let md = file(&t, "counts.md").unwrap();
        assert!(md.contains("| 1:0 | 3/10 | 7/8 | 8/11 | 1/9 | 19/38 |"), "{md}");
        let csv = file(&t, "counts.csv").unwrap();
        assert!(csv.contains("1:0,3,10,50,7,8,50,8,11,50,1,9,50,19,38,200,0"), "{csv}");
        let acc = file(&t, "accuracy.md").unwrap();
        assert!(acc.contains("| ratio | D/M | D/F | N/M | N/F | Avg | w-bias |"), "{acc}");
        assert!(acc.contains("| 1:0 | 91.2 | 47.9 | 53.5 | 95.7 | 72.1 | 93.5 |"), "{acc}");
    }

    #[test]
    fn undefined_metric_renders_dash_with_footnote() {
        // No biased explanation in class D → M3 undefined.
        let a = artifacts([(0, 0, 50), (0, 0, 50), (8, 11, 50), (1, 9, 50)], true);
        let t = build_tables(&summary(), &[a], true);
        let md = file(&t, "metrics.md").unwrap();
        assert!(md.contains("| — |"), "{md}");
        assert!(md.contains(UNDEFINED_NOTE), "{md}");
        let csv = file(&t, "metrics.csv").unwrap();
        assert!(csv.starts_with("ratio,unfairness,M1,M2,M3,M4\n"));
        assert!(csv.lines().nth(1).unwrap().split(',').nth(4) == Some(""), "{csv}");
    }

    #[test]
    fn disabled_tcav_omits_only_its_table() {
        let a = artifacts([(3, 10, 50), (7, 8, 50), (8, 11, 50), (1, 9, 50)], false);
        let t = build_tables(&summary(), &[a], false);
        assert!(file(&t, "tcav.md").is_none());
        for name in ["accuracy.csv", "accuracy.md", "counts.csv", "counts.md", "metrics.csv", "metrics.md"] {
            assert!(file(&t, name).is_some(), "{name}");
        }
    }

    #[test]
    fn tcav_table_lists_scores_and_gap() {
        let a = artifacts([(3, 10, 50), (7, 8, 50), (8, 11, 50), (1, 9, 50)], true);
        let t = build_tables(&summary(), &[a], true);
        let md = file(&t, "tcav.md").unwrap();
        assert!(md.contains("| 1:0 | 82.0 | 18.0 | 30.0 | 70.0 | 52.0 |"), "{md}");
    }
}
