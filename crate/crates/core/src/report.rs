//! Artifact emission: head-score CSV (with parser), the functional-map SVG,
//! the localization HTML report, and the training-loss CSV.
//!
//! Everything here is string assembly with deterministic float formatting
//! (Rust's shortest round-trip `Display`), so artifacts from identical runs
//! are byte-identical.

use serde::{Deserialize, Serialize};

use crate::atlas::{HeadScoreTable, HeadSets};
use crate::error::{Error, Result};
use crate::model::TrainLog;

pub const HEAD_SCORES_HEADER: &str = "layer,head,r_open,r_closed,d,rho_task,rho_ret";

pub fn head_scores_csv(table: &HeadScoreTable) -> String {
    let mut out = String::with_capacity(64 * table.n_total());
    out.push_str(HEAD_SCORES_HEADER);
    out.push('\n');
    for l in 0..table.n_layers {
        for h in 0..table.n_heads {
            let i = l * table.n_heads + h;
            out.push_str(&format!(
                "{l},{h},{},{},{},{},{}\n",
                table.r_open[i],
                table.r_closed[i],
                table.d_score[i],
                table.rho_task[i],
                table.rho_ret[i]
            ));
        }
    }
    out
}

pub fn parse_head_scores_csv(text: &str) -> Result<HeadScoreTable> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != HEAD_SCORES_HEADER {
        return Err(Error::Corpus(format!(
            "head-score csv header is {header:?}, expected {HEAD_SCORES_HEADER:?}"
        )));
    }
    let mut rows: Vec<(usize, usize, [f64; 5])> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Corpus(format!(
                "row {} has {} fields, expected 7",
                n + 2,
                fields.len()
            )));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Corpus(format!("bad integer {s:?} on row {}", n + 2)))
        };
        let parse_f64 = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Corpus(format!("bad float {s:?} on row {}", n + 2)))
        };
        let l = parse_usize(fields[0])?;
        let h = parse_usize(fields[1])?;
        let mut vals = [0.0f64; 5];
        for (slot, field) in vals.iter_mut().zip(&fields[2..]) {
            *slot = parse_f64(field)?;
        }
        rows.push((l, h, vals));
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("parse_head_scores_csv"));
    }
    let n_layers = rows.iter().map(|r| r.0).max().unwrap() + 1;
    let n_heads = rows.iter().map(|r| r.1).max().unwrap() + 1;
    if rows.len() != n_layers * n_heads {
        return Err(Error::Corpus(format!(
            "csv has {} rows but implies {n_layers} x {n_heads} heads",
            rows.len()
        )));
    }
    let total = n_layers * n_heads;
    let mut table = HeadScoreTable {
        n_layers,
        n_heads,
        r_open: vec![f64::NAN; total],
        r_closed: vec![f64::NAN; total],
        d_score: vec![f64::NAN; total],
        rho_task: vec![f64::NAN; total],
        rho_ret: vec![f64::NAN; total],
    };
    for (l, h, vals) in rows {
        let i = l * n_heads + h;
        if !table.r_open[i].is_nan() {
            return Err(Error::Corpus(format!("duplicate row for head ({l}, {h})")));
        }
        table.r_open[i] = vals[0];
        table.r_closed[i] = vals[1];
        table.d_score[i] = vals[2];
        table.rho_task[i] = vals[3];
        table.rho_ret[i] = vals[4];
    }
    Ok(table)
}

pub fn train_log_csv(log: &TrainLog) -> String {
    let mut out = String::from("step,loss,lr\n");
    for row in &log.rows {
        out.push_str(&format!("{},{},{}\n", row.step, row.loss, row.lr));
    }
    out
}

fn cell_color(d: f64, max_abs: f64) -> String {
    // diverging scale: blue for parametric (d < 0), red for in-context (d > 0)
    if max_abs <= 0.0 {
        return "#f5f5f5".into();
    }
    let t = (d / max_abs).clamp(-1.0, 1.0);
    let shade = (255.0 - t.abs() * 200.0) as u8;
    if t >= 0.0 {
        format!("#ff{shade:02x}{shade:02x}")
    } else {
        format!("#{shade:02x}{shade:02x}ff")
    }
}

/// Head grid colored by difference score; selected in-context heads get a
/// dark red outline, parametric heads a dark blue one.
pub fn functional_map_svg(table: &HeadScoreTable, sets: Option<&HeadSets>) -> String {
    let cell = 26usize;
    let margin = 60usize;
    let width = margin + table.n_heads * cell + 20;
    let height = margin + table.n_layers * cell + 50;
    let max_abs = table
        .d_score
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"monospace\" font-size=\"11\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{margin}\" y=\"20\">head map: red = in-context, blue = parametric</text>\n"
    ));
    for h in 0..table.n_heads {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">h{h}</text>\n",
            margin + h * cell + cell / 2,
            margin - 8
        ));
    }
    for l in 0..table.n_layers {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">L{l}</text>\n",
            margin - 8,
            margin + l * cell + cell / 2 + 4
        ));
        for h in 0..table.n_heads {
            let i = l * table.n_heads + h;
            let fill = cell_color(table.d_score[i], max_abs);
            let mut stroke = "#cccccc".to_string();
            let mut stroke_width = 1;
            if let Some(sets) = sets {
                if sets.contextual.contains(&(l, h)) {
                    stroke = "#990000".into();
                    stroke_width = 3;
                } else if sets.parametric.contains(&(l, h)) {
                    stroke = "#000099".into();
                    stroke_width = 3;
                }
            }
            s.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{fill}\" \
                 stroke=\"{stroke}\" stroke-width=\"{stroke_width}\">\
                 <title>L{l} h{h}: d={}</title></rect>\n",
                margin + h * cell,
                margin + l * cell,
                cell - 2,
                cell - 2,
                table.d_score[i]
            ));
        }
    }
    s.push_str(&format!(
        "<text x=\"{margin}\" y=\"{}\">outline: selected in-context (red) / parametric (blue)</text>\n",
        margin + table.n_layers * cell + 24
    ));
    s.push_str("</svg>\n");
    s
}

/// One row of the localization report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSample {
    pub words: Vec<String>,
    /// Per-position vote mass, same length as `words`.
    pub votes: Vec<f64>,
    pub predicted: usize,
    /// Half-open span where the true source lives.
    pub expected_span: (usize, usize),
    pub correct: bool,
}

/// Self-contained HTML: a table of prompts with vote-shaded tokens plus the
/// raw samples embedded as JSON for downstream tooling.
pub fn localization_html(samples: &[LocalizationSample]) -> Result<String> {
    let json = serde_json::to_string(samples)?;
    let n_correct = samples.iter().filter(|s| s.correct).count();
    let mut body = String::new();
    for (i, sample) in samples.iter().enumerate() {
        let max_vote = sample.votes.iter().fold(0.0f64, |a, &b| a.max(b));
        body.push_str(&format!(
            "<div class=\"row {}\"><span class=\"tag\">#{i} {}</span> ",
            if sample.correct { "ok" } else { "miss" },
            if sample.correct { "hit" } else { "miss" },
        ));
        for (j, word) in sample.words.iter().enumerate() {
            let heat = if max_vote > 0.0 {
                (sample.votes[j] / max_vote * 100.0) as u32
            } else {
                0
            };
            let mut classes = String::new();
            if j == sample.predicted {
                classes.push_str(" predicted");
            }
            if j >= sample.expected_span.0 && j < sample.expected_span.1 {
                classes.push_str(" expected");
            }
            body.push_str(&format!(
                "<span class=\"tok{classes}\" style=\"--heat:{heat}\">{}</span> ",
                html_escape(word)
            ));
        }
        body.push_str("</div>\n");
    }
    Ok(format!(
        "<!doctype html>\n<html><head><meta charset=\"utf-8\">\
<title>source localization</title>\n<style>\n\
body{{font-family:monospace;margin:2em}}\n\
.tok{{padding:1px 2px;background:rgba(255,120,0,calc(var(--heat)/130))}}\n\
.tok.predicted{{outline:2px solid #c00}}\n\
.tok.expected{{text-decoration:underline}}\n\
.row{{margin-bottom:0.8em}}\n\
.tag{{font-weight:bold;margin-right:0.6em}}\n\
.row.miss .tag{{color:#c00}}\n</style></head><body>\n\
<h1>source localization</h1>\n\
<p>{n_correct} of {} correct; predicted position outlined, expected span underlined, \
shading = vote mass.</p>\n{body}\
<script type=\"application/json\" id=\"samples\">{json}</script>\n\
</body></html>\n",
        samples.len()
    ))
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrainLogRow;

    fn sample_table() -> HeadScoreTable {
        HeadScoreTable {
            n_layers: 2,
            n_heads: 2,
            r_open: vec![0.4, 0.1, 0.3, 0.2],
            r_closed: vec![0.1, 0.4, 0.25, 0.25],
            d_score: vec![0.3, -0.3, 0.05, -0.05],
            rho_task: vec![0.5, 0.25, 0.125, 0.0],
            rho_ret: vec![0.0, 0.125, 0.25, 0.5],
        }
    }

    #[test]
    fn csv_roundtrips_exactly() {
        let table = sample_table();
        let csv = head_scores_csv(&table);
        let parsed = parse_head_scores_csv(&csv).unwrap();
        assert_eq!(parsed, table);
        // emission is deterministic
        assert_eq!(csv, head_scores_csv(&table));
    }

    #[test]
    fn parser_rejects_malformed_input() {
        assert!(parse_head_scores_csv("nope\n1,2,3").is_err());
        let mut csv = head_scores_csv(&sample_table());
        csv.push_str("9,9\n");
        assert!(parse_head_scores_csv(&csv).is_err());
        // missing a row
        let table = sample_table();
        let full = head_scores_csv(&table);
        let truncated: Vec<&str> = full.lines().take(4).collect();
        assert!(parse_head_scores_csv(&truncated.join("\n")).is_err());
        // duplicate row
        let mut lines: Vec<String> = full.lines().map(String::from).collect();
        let dup = lines[1].clone();
        lines[2] = dup;
        assert!(parse_head_scores_csv(&lines.join("\n")).is_err());
    }

    #[test]
    fn svg_has_one_cell_per_head_and_marks_selections() {
        let table = sample_table();
        let sets = HeadSets {
            contextual: vec![(0, 0)],
            parametric: vec![(0, 1)],
            task: vec![],
            retrieval: vec![],
        };
        let svg = functional_map_svg(&table, Some(&sets));
        assert_eq!(svg.matches("<rect").count(), 4);
        assert!(svg.contains("#990000") && svg.contains("#000099"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg, functional_map_svg(&table, Some(&sets)));
    }

    #[test]
    fn train_log_csv_is_plain_rows() {
        let log = TrainLog {
            rows: vec![
                TrainLogRow {
                    step: 0,
                    loss: 5.25,
                    lr: 0.0003,
                },
                TrainLogRow {
                    step: 25,
                    loss: 3.5,
                    lr: 0.0003,
                },
            ],
        };
        let csv = train_log_csv(&log);
        assert_eq!(csv, "step,loss,lr\n0,5.25,0.0003\n25,3.5,0.0003\n");
    }

    #[test]
    fn localization_html_embeds_bit_exact_json() {
        let samples = vec![LocalizationSample {
            words: vec!["a".into(), "<b>".into(), "c".into()],
            votes: vec![0.0, 1.0, 0.25],
            predicted: 1,
            expected_span: (1, 2),
            correct: true,
        }];
        let html = localization_html(&samples).unwrap();
        let start = html.find("id=\"samples\">").unwrap() + "id=\"samples\">".len();
        let end = html[start..].find("</script>").unwrap() + start;
        let embedded = &html[start..end];
        assert_eq!(embedded, serde_json::to_string(&samples).unwrap());
        // escaped in the visible body, raw in the json
        assert!(html.contains("&lt;b&gt;"));
        let back: Vec<LocalizationSample> = serde_json::from_str(embedded).unwrap();
        assert_eq!(back, samples);
    }
}
