//! Self-contained HTML report. Output depends only on its inputs, so equal
//! analyses render to identical bytes.

use std::fmt::Write as _;

use crate::balance::BalanceReport;
use crate::data::{model_formulas, summarize, summarize_design, AnalysisSpec, ColumnSummary, SummaryTable};
use crate::outcome::EffectEstimate;
use crate::overlap::TrimRule;
use crate::pipeline::{Analysis, EngineFailure};
use crate::sensitivity::SensitivityGrid;
use crate::weights::Algorithm;

pub const DEFAULT_TITLE: &str = "Weighting analysis report";

pub struct ReportContext<'a> {
    pub title: &'a str,
    pub data_summary: Vec<SummaryTable>,
    pub spec: &'a AnalysisSpec,
    pub formulas: (String, String),
    pub trims: &'a [TrimRule],
    pub removed_by_trim: usize,
    pub removed_missing: usize,
    pub n_original: usize,
    pub final_summary: Vec<SummaryTable>,
    pub balance: &'a BalanceReport,
    pub failures: &'a [EngineFailure],
    pub chosen: Algorithm,
    pub effect: &'a EffectEstimate,
    pub sensitivity: Option<&'a SensitivityGrid>,
}

impl<'a> ReportContext<'a> {
    pub fn from_analysis(a: &'a Analysis) -> Self {
        ReportContext {
            title: DEFAULT_TITLE,
            data_summary: summarize(&a.data, None).unwrap_or_default(),
            spec: &a.request.spec,
            formulas: model_formulas(&a.design),
            trims: &a.request.trims,
            removed_by_trim: a.removed_by_trim.len(),
            removed_missing: a.full_design.dropped_count(),
            n_original: a.data.n_rows(),
            final_summary: summarize_design(&a.design),
            balance: &a.balance,
            failures: &a.weighting.failures,
            chosen: a.chosen,
            effect: &a.effect,
            sensitivity: a.sensitivity.as_ref(),
        }
    }
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Fixed-decimal formatting without negative zero; infinities print as
/// `Inf`/`-Inf`.
pub fn fixed(v: f64, decimals: usize) -> String {
    if v.is_nan() {
        return "NA".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn p_value(p: f64) -> String {
    if p < 0.001 {
        "&lt;0.001".into()
    } else {
        fixed(p, 3)
    }
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;color:#222}\
table{border-collapse:collapse;margin:0.5em 0 1.5em}\
th,td{border:1px solid #bbb;padding:0.25em 0.6em;text-align:right}\
th:first-child,td:first-child{text-align:left}\
thead th{background:#eee}\
td.hi{background:#fbe3e3}\
tr.agg td{font-weight:bold}\
p.note{color:#555;font-size:0.9em}\
svg text{font-size:11px}";

pub fn render_report(ctx: &ReportContext) -> String {
    let mut h = String::new();
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n<style>{}</style>\n</head>\n<body>\n<h1>{}</h1>\n",
        escape(ctx.title),
        STYLE,
        escape(ctx.title)
    );
    data_section(&mut h, ctx);
    spec_section(&mut h, ctx);
    overlap_section(&mut h, ctx);
    balance_section(&mut h, ctx);
    outcome_section(&mut h, ctx);
    if let Some(grid) = ctx.sensitivity {
        sensitivity_section(&mut h, grid);
    }
    h.push_str("</body>\n</html>\n");
    h
}

fn summary_tables(h: &mut String, tables: &[SummaryTable]) {
    for t in tables {
        if let Some(g) = &t.group {
            let _ = writeln!(h, "<h3>{} ({} rows)</h3>", escape(g), t.n_rows);
        } else {
            let _ = writeln!(h, "<p>{} rows.</p>", t.n_rows);
        }
        let numeric: Vec<&ColumnSummary> = t
            .columns
            .iter()
            .filter(|c| matches!(c, ColumnSummary::Numeric { .. }))
            .collect();
        if !numeric.is_empty() {
            h.push_str("<table>\n<thead><tr><th>Variable</th><th>N</th><th>Missing</th><th>Mean</th><th>SD</th><th>Median</th><th>Min</th><th>Max</th></tr></thead>\n<tbody>\n");
            for c in numeric {
                if let ColumnSummary::Numeric {
                    name,
                    n,
                    missing,
                    mean,
                    sd,
                    median,
                    min,
                    max,
                } = c
                {
                    let f = |v: &Option<f64>| v.map_or("NA".to_string(), |v| fixed(v, 2));
                    let _ = writeln!(
                        h,
                        "<tr><td>{}</td><td>{n}</td><td>{missing}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
                        escape(name),
                        f(mean),
                        f(sd),
                        f(median),
                        f(min),
                        f(max)
                    );
                }
            }
            h.push_str("</tbody>\n</table>\n");
        }
        for c in &t.columns {
            if let ColumnSummary::Categorical { name, missing, counts } = c {
                let _ = write!(h, "<table>\n<thead><tr><th>{}</th><th>Count</th></tr></thead>\n<tbody>\n", escape(name));
                for (level, count) in counts {
                    let _ = writeln!(h, "<tr><td>{}</td><td>{count}</td></tr>", escape(level));
                }
                if *missing > 0 {
                    let _ = writeln!(h, "<tr><td>(missing)</td><td>{missing}</td></tr>");
                }
                h.push_str("</tbody>\n</table>\n");
            }
        }
    }
}

fn data_section(h: &mut String, ctx: &ReportContext) {
    h.push_str("<h2>Data</h2>\n");
    summary_tables(h, &ctx.data_summary);
}

fn spec_section(h: &mut String, ctx: &ReportContext) {
    let s = ctx.spec;
    h.push_str("<h2>Model set-up</h2>\n<table>\n<tbody>\n");
    let mut row = |k: &str, v: String| {
        let _ = writeln!(h, "<tr><td>{k}</td><td>{v}</td></tr>");
    };
    row("Treatment", escape(&s.treatment));
    row("Control label", escape(&s.control_label));
    row("Treatment label", escape(&s.treatment_label));
    row("Outcome", escape(&s.outcome));
    row("Estimand", escape(s.estimand.description()));
    row("Numeric confounders", escape(&s.numeric_confounders.join(", ")));
    let cats: Vec<String> = s
        .categorical_confounders
        .iter()
        .map(|c| format!("{} (reference {})", c.name, c.reference))
        .collect();
    row("Categorical confounders", escape(&cats.join(", ")));
    h.push_str("</tbody>\n</table>\n");
    let _ = writeln!(
        h,
        "<p>Treatment allocation model: <code>{}</code></p>\n<p>Outcome model: <code>{}</code></p>",
        escape(&ctx.formulas.0),
        escape(&ctx.formulas.1)
    );
}

fn cut(v: Option<f64>) -> String {
    v.map_or("none".to_string(), crate::data::format_number)
}

fn overlap_section(h: &mut String, ctx: &ReportContext) {
    h.push_str("<h2>Overlap and trimming</h2>\n");
    if ctx.trims.is_empty() {
        h.push_str("<p>No trimming rules were applied.</p>\n");
    } else {
        h.push_str("<table>\n<thead><tr><th>Confounder</th><th>Lower cut</th><th>Upper cut</th></tr></thead>\n<tbody>\n");
        for t in ctx.trims {
            let _ = writeln!(
                h,
                "<tr><td>{}</td><td>{}</td><td>{}</td></tr>",
                escape(&t.confounder),
                cut(t.lower_cut),
                cut(t.upper_cut)
            );
        }
        h.push_str("</tbody>\n</table>\n");
    }
    let analysed = ctx.n_original - ctx.removed_missing - ctx.removed_by_trim;
    let _ = writeln!(
        h,
        "<p>{} rows loaded; {} removed for missing values; {} removed by trimming rules; {} analysed.</p>",
        ctx.n_original, ctx.removed_missing, ctx.removed_by_trim, analysed
    );
    h.push_str("<p class=\"note\">Rows outside the trimming cuts (outliers) and rows with a missing value in any analysis variable were removed before weighting.</p>\n");
    h.push_str("<h3>Analysed sample by group</h3>\n");
    summary_tables(h, &ctx.final_summary);
}

fn balance_table(h: &mut String, b: &BalanceReport, title: &str, values: &[Vec<f64>], mean: &[f64], max: &[f64]) {
    let _ = writeln!(h, "<h3>{title}</h3>");
    h.push_str("<table>\n<thead><tr><th>Confounder</th>");
    for c in &b.columns {
        let _ = write!(h, "<th>{}</th>", escape(c));
    }
    h.push_str("</tr></thead>\n<tbody>\n");
    for (r, name) in b.confounders.iter().enumerate() {
        let _ = write!(h, "<tr><td>{}</td>", escape(name));
        for v in &values[r] {
            let class = if v.abs() >= crate::balance::BALANCE_THRESHOLD { " class=\"hi\"" } else { "" };
            let _ = write!(h, "<td{class}>{}</td>", fixed(*v, 2));
        }
        h.push_str("</tr>\n");
    }
    for (label, agg) in [("Mean", mean), ("Max", max)] {
        let _ = write!(h, "<tr class=\"agg\"><td>{label}</td>");
        for v in agg {
            let _ = write!(h, "<td>{}</td>", fixed(*v, 2));
        }
        h.push_str("</tr>\n");
    }
    h.push_str("</tbody>\n</table>\n");
}

fn balance_section(h: &mut String, ctx: &ReportContext) {
    let b = ctx.balance;
    h.push_str("<h2>Balance</h2>\n");
    let abs: Vec<Vec<f64>> = b.smd.iter().map(|r| r.iter().map(|v| v.abs()).collect()).collect();
    balance_table(h, b, "Absolute standardized mean differences", &abs, &b.mean_smd, &b.max_smd);
    balance_table(h, b, "Kolmogorov-Smirnov statistics", &b.ks, &b.mean_ks, &b.max_ks);

    h.push_str("<h3>Effective sample size</h3>\n<table>\n<thead><tr><th></th>");
    for c in &b.columns {
        let _ = write!(h, "<th>{}</th>", escape(c));
    }
    h.push_str("</tr></thead>\n<tbody>\n<tr><td>ESS</td>");
    for e in &b.ess {
        let _ = write!(h, "<td>{}</td>", fixed(e.total, 0));
    }
    h.push_str("</tr>\n<tr><td>Share of sample</td>");
    for e in &b.ess {
        let _ = write!(h, "<td>{}</td>", escape(&e.percent_label()));
    }
    h.push_str("</tr>\n</tbody>\n</table>\n");

    if let Some(rec) = b.recommended {
        let _ = writeln!(h, "<p><strong>Recommended weights: {}.</strong> {}</p>", rec, escape(&b.rationale));
    }
    for w in &b.warnings {
        let _ = writeln!(h, "<p class=\"note\">{}</p>", escape(w));
    }
    for f in ctx.failures {
        let _ = writeln!(h, "<p class=\"note\">{} failed: {}</p>", f.algorithm, escape(&f.message));
    }
}

fn outcome_section(h: &mut String, ctx: &ReportContext) {
    let e = ctx.effect;
    h.push_str("<h2>Outcome model</h2>\n");
    let _ = writeln!(
        h,
        "<p>Weighted regression using {} weights on {} rows ({} residual degrees of freedom).</p>",
        ctx.chosen, e.n_used, e.df
    );
    h.push_str("<table>\n<thead><tr><th>Term</th><th>Estimate</th><th>Std. error</th><th>t</th><th>p</th></tr></thead>\n<tbody>\n");
    for r in &e.rows {
        let _ = writeln!(
            h,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            escape(&r.term),
            fixed(r.estimate, 3),
            fixed(r.se, 3),
            fixed(r.t, 3),
            p_value(r.p)
        );
    }
    h.push_str("</tbody>\n</table>\n");
    let t = e.treatment_row();
    let _ = writeln!(
        h,
        "<p id=\"effect\"><strong>Estimated treatment effect ({}): {}</strong> (SE {}, p {})</p>",
        e.estimand,
        fixed(e.effect, 3),
        fixed(t.se, 3),
        p_value(t.p)
    );
}

fn sensitivity_section(h: &mut String, g: &SensitivityGrid) {
    h.push_str("<h2>Sensitivity to an unmeasured confounder</h2>\n");
    let _ = writeln!(
        h,
        "<p>Baseline effect {} (p {}), {} weights, {} draws per cell, seed {}. Horizontal axis: standardized difference of the simulated confounder between groups; vertical axis: its correlation with the outcome residual.</p>",
        fixed(g.baseline.effect, 3),
        p_value(g.baseline.p),
        g.algorithm,
        g.draws_per_cell,
        g.seed
    );
    h.push_str("<h3>Effect estimate</h3>\n");
    heatmap(h, g, &g.effect_surface, Palette::Diverging(g.baseline.effect), 2);
    h.push_str("<h3>p-value</h3>\n");
    heatmap(h, g, &g.pvalue_surface, Palette::Sequential, 3);
    let n_missing = g.missing.iter().filter(|m| **m).count();
    if n_missing > 0 {
        let _ = writeln!(h, "<p class=\"note\">{n_missing} cells could not be simulated and are shown in grey.</p>");
    }
}

enum Palette {
    Diverging(f64),
    Sequential,
}

fn mix(a: (u8, u8, u8), b: (u8, u8, u8), t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let c = |x: u8, y: u8| (f64::from(x) + (f64::from(y) - f64::from(x)) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(a.0, b.0), c(a.1, b.1), c(a.2, b.2))
}

fn heatmap(h: &mut String, g: &SensitivityGrid, surface: &[Option<f64>], palette: Palette, decimals: usize) {
    const CELL: f64 = 34.0;
    const LEFT: f64 = 50.0;
    const TOP: f64 = 10.0;
    let ne = g.es_axis.len();
    let nr = g.rho_axis.len();
    let width = LEFT + CELL * ne as f64 + 10.0;
    let height = TOP + CELL * nr as f64 + 40.0;
    let spread = match palette {
        Palette::Diverging(center) => surface
            .iter()
            .flatten()
            .map(|v| (v - center).abs())
            .fold(0.0, f64::max)
            .max(1e-12),
        Palette::Sequential => 1.0,
    };
    let _ = writeln!(
        h,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    for r in 0..nr {
        // highest rho on top
        let y = TOP + CELL * (nr - 1 - r) as f64;
        for e in 0..ne {
            let x = LEFT + CELL * e as f64;
            let (fill, label) = match surface[g.cell(r, e)] {
                None => ("#cccccc".to_string(), "NA".to_string()),
                Some(v) => {
                    let fill = match palette {
                        Palette::Diverging(center) => {
                            let t = (v - center) / spread;
                            if t >= 0.0 {
                                mix((255, 255, 255), (178, 24, 43), t)
                            } else {
                                mix((255, 255, 255), (33, 102, 172), -t)
                            }
                        }
                        Palette::Sequential => mix((8, 69, 148), (247, 251, 255), v.sqrt()),
                    };
                    (fill, fixed(v, decimals))
                }
            };
            let _ = writeln!(
                h,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{fill}\" stroke=\"#fff\"><title>es {} rho {}: {label}</title></rect>",
                fixed(g.es_axis[e], 2),
                fixed(g.rho_axis[r], 2)
            );
        }
        let _ = writeln!(
            h,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            LEFT - 4.0,
            y + CELL / 2.0 + 4.0,
            fixed(g.rho_axis[r], 2)
        );
    }
    for e in 0..ne {
        let _ = writeln!(
            h,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            LEFT + CELL * (e as f64 + 0.5),
            TOP + CELL * nr as f64 + 14.0,
            fixed(g.es_axis[e], 2)
        );
    }
    let span = |axis: &[f64], v: f64| -> Option<f64> {
        let (lo, hi) = (axis[0], axis[axis.len() - 1]);
        if axis.len() < 2 || hi <= lo || v < lo || v > hi {
            return None;
        }
        Some((v - lo) / (hi - lo))
    };
    for p in &g.observed_points {
        if let (Some(fx), Some(fy)) = (span(&g.es_axis, p.es), span(&g.rho_axis, p.rho)) {
            let cx = LEFT + CELL * (0.5 + fx * (ne - 1) as f64);
            let cy = TOP + CELL * (0.5 + (1.0 - fy) * (nr - 1) as f64);
            let _ = writeln!(
                h,
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"#000\"><title>{}</title></circle>",
                fixed(cx, 1),
                fixed(cy, 1),
                escape(&p.name)
            );
        }
    }
    h.push_str("</svg>\n");
}
