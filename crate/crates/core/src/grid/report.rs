// CSV tables, a plain-text summary table and SVG bar charts for grid records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{aggregate, distinct, mean_where, GridError, GroupKey, RunRecord, RunStatus};
use crate::porting::PortScenario;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportSummary {
    pub records: usize,
    pub ok: usize,
    pub diverged: usize,
    pub failed: usize,
    pub files: Vec<PathBuf>,
    pub charts: Vec<PathBuf>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn records_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(
        "index,origin,receiving,direction,technique,condition,scenario,pre_steps,post_steps,seed,\
         accuracy,n_examples,n_correct,status,wall_time_ms,trace_path,error\n",
    );
    for r in records {
        let c = &r.coord;
        let status = match r.status {
            RunStatus::Ok => "ok",
            RunStatus::Diverged => "diverged",
            RunStatus::Failed => "failed",
        };
        let fields = [
            c.index.to_string(),
            csv_field(&c.pair.origin),
            csv_field(&c.pair.receiving),
            csv_field(&r.direction),
            c.technique.to_string(),
            c.condition.to_string(),
            c.scenario.to_string(),
            c.pre_steps.map_or(String::new(), |p| p.to_string()),
            c.post_steps.to_string(),
            c.seed.to_string(),
            r.accuracy.to_string(),
            r.n_examples.to_string(),
            r.n_correct.to_string(),
            status.to_string(),
            r.wall_time_ms.to_string(),
            csv_field(r.trace_path.as_deref().unwrap_or("")),
            csv_field(r.error.as_deref().unwrap_or("")),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

const TABLE_KEYS: [GroupKey; 4] = [
    GroupKey::Direction,
    GroupKey::Condition,
    GroupKey::Technique,
    GroupKey::Scenario,
];

fn aggregate_csv(records: &[RunRecord]) -> Result<String, GridError> {
    let mut out = String::from("direction,condition,technique,scenario,mean,variance,n_runs\n");
    for cell in aggregate(records, &TABLE_KEYS)? {
        let keys: Vec<String> = cell.keys.iter().map(|(_, v)| csv_field(&v.to_string())).collect();
        writeln!(
            out,
            "{},{},{},{}",
            keys.join(","),
            cell.mean,
            cell.variance,
            cell.n_runs
        )
        .expect("string write");
    }
    Ok(out)
}

/// Mean (variance) per technique × scenario, one block per direction and
/// dataset condition.
fn aggregate_text(records: &[RunRecord]) -> Result<String, GridError> {
    let cells = aggregate(records, &TABLE_KEYS)?;
    let mut out = String::new();
    let blocks = distinct(records, |r| (r.direction.clone(), r.coord.condition));
    for (direction, condition) in blocks {
        writeln!(out, "{direction} / {condition} dataset").expect("string write");
        write!(out, "{:<15}", "technique").expect("string write");
        for s in PortScenario::ALL {
            write!(out, "{:>20}", s.name()).expect("string write");
        }
        out.push('\n');
        for technique in distinct(records, |r| r.coord.technique) {
            write!(out, "{:<15}", technique.name()).expect("string write");
            for s in PortScenario::ALL {
                let cell = cells.iter().find(|c| {
                    c.key(GroupKey::Direction).map(|v| v.to_string()) == Some(direction.clone())
                        && c.key(GroupKey::Condition).map(|v| v.to_string())
                            == Some(condition.to_string())
                        && c.key(GroupKey::Technique).map(|v| v.to_string())
                            == Some(technique.to_string())
                        && c.key(GroupKey::Scenario).map(|v| v.to_string())
                            == Some(s.to_string())
                });
                let text = cell.map_or("-".to_string(), |c| {
                    format!("{:.3} ({:.3})", c.mean, c.variance)
                });
                write!(out, "{text:>20}").expect("string write");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

const COLORS: [&str; 3] = ["#1f77b4", "#ff7f0e", "#2ca02c"];

/// Grouped bar chart: one group per x label, one bar per series.
/// `None` values leave a gap.
pub fn chart_svg(title: &str, x_labels: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let groups = x_labels.len().max(1) as f64;
    let group_w = plot_w / groups;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).expect("string write");
    writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + plot_w / 2.0,
        xml_escape(title)
    )
    .expect("string write");
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        writeln!(
            s,
            r##"<line x1="{left}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            left + plot_w,
            left - 6.0,
            y(v) + 4.0,
            y = y(v),
        )
        .expect("string write");
    }
    for (gi, label) in x_labels.iter().enumerate() {
        let gx = left + gi as f64 * group_w + group_w * 0.1;
        for (si, (_, values)) in series.iter().enumerate() {
            if let Some(Some(v)) = values.get(gi) {
                let x = gx + si as f64 * bar_w;
                writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{v:.3}</title></rect>"#,
                    y(*v),
                    bar_w * 0.95,
                    top + plot_h - y(*v),
                    COLORS[si % COLORS.len()]
                )
                .expect("string write");
            }
        }
        writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            left + (gi as f64 + 0.5) * group_w,
            top + plot_h + 18.0,
            xml_escape(label)
        )
        .expect("string write");
    }
    writeln!(
        s,
        r#"<line x1="{left}" x2="{left}" y1="{top}" y2="{}" stroke="black"/><line x1="{left}" x2="{}" y1="{}" y2="{}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h,
        top + plot_h
    )
    .expect("string write");
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">post-porting steps</text>"#,
        left + plot_w / 2.0,
        h - 10.0
    )
    .expect("string write");
    writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">Accuracy</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    )
    .expect("string write");
    for (si, (name, _)) in series.iter().enumerate() {
        let ly = top + 10.0 + si as f64 * 20.0;
        writeln!(
            s,
            r#"<rect x="{}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            left + plot_w + 16.0,
            ly - 10.0,
            COLORS[si % COLORS.len()],
            left + plot_w + 34.0,
            ly,
            xml_escape(name)
        )
        .expect("string write");
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn file_tag(s: &str) -> String {
    s.replace("->", "-to-")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Writes `records.csv`, `aggregate.csv`, `aggregate.txt` and one chart per
/// (technique, direction, pre_steps, condition) into `out_dir`.
pub fn report(records: &[RunRecord], out_dir: &Path) -> Result<ReportSummary, GridError> {
    if records.is_empty() {
        return Err(GridError::EmptyGroup);
    }
    let mut records = records.to_vec();
    records.sort_by_key(|r| r.coord.index);
    std::fs::create_dir_all(out_dir)?;
    let charts_dir = out_dir.join("charts");
    std::fs::create_dir_all(&charts_dir)?;

    let mut files = Vec::new();
    let mut write = |name: &str, text: String| -> Result<(), GridError> {
        let p = out_dir.join(name);
        std::fs::write(&p, text)?;
        files.push(p);
        Ok(())
    };
    write("records.csv", records_csv(&records))?;
    let ok: Vec<RunRecord> = records
        .iter()
        .filter(|r| r.status == RunStatus::Ok)
        .cloned()
        .collect();
    if !ok.is_empty() {
        write("aggregate.csv", aggregate_csv(&ok)?)?;
        write("aggregate.txt", aggregate_text(&ok)?)?;
    }

    let mut charts = Vec::new();
    let pres = distinct(&ok, |r| r.coord.pre_steps);
    let pres: Vec<usize> = pres.into_iter().flatten().collect();
    let post_steps = distinct(&ok, |r| r.coord.post_steps);
    let scenarios = distinct(&ok, |r| r.coord.scenario);
    for technique in distinct(&ok, |r| r.coord.technique) {
        for direction in distinct(&ok, |r| r.direction.clone()) {
            for condition in distinct(&ok, |r| r.coord.condition) {
                for &pre in &pres {
                    let matches = |r: &RunRecord| {
                        r.coord.technique == technique
                            && r.direction == direction
                            && r.coord.condition == condition
                            && r.coord.pre_steps.map_or(true, |p| p == pre)
                    };
                    if !ok.iter().any(|r| matches(r) && r.coord.pre_steps.is_some()) {
                        continue;
                    }
                    let series: Vec<(String, Vec<Option<f64>>)> = scenarios
                        .iter()
                        .map(|&s| {
                            let values = post_steps
                                .iter()
                                .map(|&post| {
                                    mean_where(&ok, |r| {
                                        matches(r)
                                            && r.coord.scenario == s
                                            && r.coord.post_steps == post
                                    })
                                })
                                .collect();
                            (s.name().to_string(), values)
                        })
                        .filter(|(_, v): &(String, Vec<Option<f64>>)| v.iter().any(Option::is_some))
                        .collect();
                    let title = format!("{technique}, {direction}, pre {pre}, {condition} dataset");
                    let labels: Vec<String> = post_steps.iter().map(|p| p.to_string()).collect();
                    let path = charts_dir.join(format!(
                        "{}_{}_pre{}_{}.svg",
                        technique,
                        file_tag(&direction),
                        pre,
                        condition
                    ));
                    std::fs::write(&path, chart_svg(&title, &labels, &series))?;
                    charts.push(path);
                }
            }
        }
    }

    let count = |s: RunStatus| records.iter().filter(|r| r.status == s).count();
    Ok(ReportSummary {
        records: records.len(),
        ok: count(RunStatus::Ok),
        diverged: count(RunStatus::Diverged),
        failed: count(RunStatus::Failed),
        files,
        charts,
    })
}
