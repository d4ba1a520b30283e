use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Scenario;
use crate::merge::MergeMode;
use crate::solver::WeightVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub format_version: u32,
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub target_task: String,
    pub other_tasks: Vec<String>,
    /// How `other_acc` averages over `other_tasks`; always `"macro"`.
    pub other_average: String,
    pub tau: f64,
    pub scenario: Scenario,
}

/// One model's scores. Reference rows (`base`, `fine-tuned`) have no α and
/// no example count; mono merges have no example count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: String,
    pub alpha: Option<f64>,
    pub pool: String,
    pub n_examples: Option<usize>,
    pub target_acc: f64,
    pub other_acc: f64,
}

impl ReportRow {
    pub(super) fn reference(mode: &str, pool: &str, target_acc: f64, other_acc: f64) -> Self {
        ReportRow {
            mode: mode.into(),
            alpha: None,
            pool: pool.into(),
            n_examples: None,
            target_acc,
            other_acc,
        }
    }

    pub(super) fn merged(
        mode: MergeMode,
        alpha: Option<f64>,
        pool: &str,
        n_examples: Option<usize>,
        target_acc: f64,
        other_acc: f64,
    ) -> Self {
        ReportRow {
            mode: mode.as_str().into(),
            alpha,
            pool: pool.into(),
            n_examples,
            target_acc,
            other_acc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolvedWeights {
    pub n_examples: usize,
    pub weights: WeightVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub header: ReportHeader,
    pub rows: Vec<ReportRow>,
    pub weights: Vec<SolvedWeights>,
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Ten decimals with trailing zeros trimmed; hides averaging noise such as
/// `0.37049999999999994` while the JSON keeps the exact values.
fn fmt_acc(v: f64) -> String {
    let s = format!("{v:.10}");
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').unwrap_or(s).to_string()
}

impl ExperimentReport {
    pub fn base(&self) -> &ReportRow {
        self.reference("base")
    }

    pub fn fine_tuned(&self) -> &ReportRow {
        self.reference("fine-tuned")
    }

    fn reference(&self, mode: &str) -> &ReportRow {
        self.rows
            .iter()
            .find(|r| r.mode == mode)
            .unwrap_or_else(|| panic!("report always carries a {mode} row"))
    }

    /// The merged row for `mode` at `alpha` (and `n_examples`, where the mode
    /// uses solved weights).
    pub fn merged(&self, mode: MergeMode, alpha: Option<f64>, n_examples: Option<usize>) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.mode == mode.as_str() && r.alpha == alpha && r.n_examples == n_examples)
    }

    pub fn weights_for(&self, n_examples: usize) -> Option<&WeightVector> {
        self.weights.iter().find(|w| w.n_examples == n_examples).map(|w| &w.weights)
    }

    /// CSV with a leading `#` comment line describing the averaging.
    pub fn to_csv(&self) -> String {
        let h = &self.header;
        let mut out = format!(
            "# seed={} target={} other_acc=macro average over {} tasks ({})\n",
            h.seed,
            h.target_task,
            h.other_tasks.len(),
            h.other_tasks.join(" ")
        );
        out.push_str("mode,alpha,pool,n_examples,target_acc,other_acc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.mode,
                fmt_opt(r.alpha),
                r.pool,
                fmt_opt(r.n_examples),
                fmt_acc(r.target_acc),
                fmt_acc(r.other_acc)
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Accuracy against α for every merge mode that sweeps α, with the base
    /// and fine-tuned scores as dashed reference lines.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const PAD: f64 = 50.0;
        let x = |a: f64| PAD + a * (W - 2.0 * PAD);
        let y = |acc: f64| H - PAD - acc * (H - 2.0 * PAD);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        let _ = writeln!(
            svg,
            "<path d=\"M{l} {t} L{l} {b} L{r} {b}\" stroke=\"black\" fill=\"none\"/>",
            l = x(0.0),
            r = x(1.0),
            t = y(1.0),
            b = y(0.0)
        );
        for i in 0..=10 {
            let v = i as f64 / 10.0;
            let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{v}</text>", x(v), y(0.0) + 16.0);
            let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v}</text>", x(0.0) - 6.0, y(v) + 4.0);
        }
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">alpha</text>", W / 2.0, H - 10.0);

        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
        let mut series: Vec<(String, Vec<(f64, f64, f64)>)> = Vec::new();
        for r in &self.rows {
            let Some(alpha) = r.alpha else { continue };
            let label = match r.n_examples {
                Some(n) => format!("{} n={n}", r.mode),
                None => r.mode.clone(),
            };
            match series.iter_mut().find(|(l, _)| *l == label) {
                Some((_, pts)) => pts.push((alpha, r.target_acc, r.other_acc)),
                None => series.push((label, vec![(alpha, r.target_acc, r.other_acc)])),
            }
        }
        let mut legend_y = PAD;
        let mut legend = |svg: &mut String, color: &str, dash: &str, text: &str| {
            let _ = writeln!(
                svg,
                "<line x1=\"{a}\" y1=\"{legend_y}\" x2=\"{b}\" y2=\"{legend_y}\" stroke=\"{color}\"{dash}/>\
                 <text x=\"{c}\" y=\"{t}\">{text}</text>",
                a = W - PAD - 150.0,
                b = W - PAD - 130.0,
                c = W - PAD - 125.0,
                t = legend_y + 4.0
            );
            legend_y += 14.0;
        };
        for (i, (label, pts)) in series.iter_mut().enumerate() {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let color = colors[i % colors.len()];
            for (metric, dash) in [("target", ""), ("other", " stroke-dasharray=\"2 2\"")] {
                let d: Vec<String> = pts
                    .iter()
                    .map(|&(a, t, o)| format!("{:.2},{:.2}", x(a), y(if metric == "target" { t } else { o })))
                    .collect();
                let _ = writeln!(
                    svg,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\"{dash}/>",
                    d.join(" ")
                );
                legend(&mut svg, color, dash, &format!("{label} {metric}"));
            }
        }
        for (row, color) in [(self.base(), "#7f7f7f"), (self.fine_tuned(), "#000000")] {
            for (acc, metric) in [(row.target_acc, "target"), (row.other_acc, "other")] {
                let _ = writeln!(
                    svg,
                    "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-dasharray=\"6 4\"/>",
                    x(0.0),
                    x(1.0),
                    y = y(acc)
                );
                legend(&mut svg, color, " stroke-dasharray=\"6 4\"", &format!("{} {metric}", row.mode));
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}
