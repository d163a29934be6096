//! Parameter counts, shape traces and overhead tables.

use std::fmt::Write as _;

use serde::Serialize;

use crate::backbone::OUTPUT_STRIDE;
use crate::config::{self, Overrides, Profile, BASELINE_WIDTH, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::layers::TraceRow;
use crate::model::{Head, ModelGraph};
use crate::params::LayerId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditRow {
    pub name: String,
    pub kind: String,
    /// Shape of the layer's weight (or scale, for norms).
    pub shape: Vec<usize>,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub variant: String,
    pub profile: Profile,
    pub input_size: usize,
    pub class_count: usize,
    pub rows: Vec<AuditRow>,
    pub strict_total: usize,
    /// Strict total minus the shortcut convs of blocks before the last.
    pub paper_convention_total: usize,
    pub baseline_total: usize,
    pub classifier_width: usize,
    pub classifier_width_percent: f64,
    /// Paper-convention total against the baseline, in percent.
    pub overhead_vs_baseline_percent: f64,
    pub strict_overhead_percent: f64,
    /// Multiply-accumulates for one image at `input_size`.
    pub flops_estimate: u64,
}

/// `value / 1e6` to three decimals with an `M` suffix.
pub fn millions(value: usize) -> String {
    format!("{:.3}M", value as f64 / 1e6)
}

fn percent_delta(total: usize, baseline: usize) -> f64 {
    (total as f64 - baseline as f64) / baseline as f64 * 100.0
}

/// Layers excluded from the paper-convention total.
fn early_shortcut_layers(model: &ModelGraph) -> Vec<LayerId> {
    match model.head() {
        Head::ExShortcut(h) => h
            .shortcuts
            .iter()
            .filter(|s| s.spec.block_index < NUM_BLOCKS)
            .map(|s| s.conv.layer)
            .collect(),
        Head::Baseline(_) => Vec::new(),
    }
}

fn rows(model: &ModelGraph) -> Vec<AuditRow> {
    let store = model.params();
    store
        .layers()
        .iter()
        .map(|layer| {
            let params: Vec<_> = layer
                .params
                .iter()
                .map(|&id| store.entry(id))
                .filter(|e| e.role.is_parameter())
                .collect();
            AuditRow {
                name: layer.name.clone(),
                kind: layer.kind.as_str().to_string(),
                shape: params.first().map(|e| e.tensor.shape().to_vec()).unwrap_or_default(),
                param_count: params.iter().map(|e| e.tensor.numel()).sum(),
            }
        })
        .collect()
}

fn strict_and_paper(model: &ModelGraph) -> (usize, usize) {
    let rows = rows(model);
    let strict: usize = rows.iter().map(|r| r.param_count).sum();
    let early: usize = early_shortcut_layers(model)
        .into_iter()
        .flat_map(|l| model.params().layer(l).params.iter())
        .map(|&id| model.params().tensor(id).numel())
        .sum();
    (strict, strict - early)
}

/// Strict total of MobileViT-S at the same profile and class count.
pub fn baseline_total(profile: Profile, class_count: usize) -> Result<usize> {
    let base = ModelGraph::build_mobilevit_s(profile, class_count, None)?;
    Ok(strict_and_paper(&base).0)
}

pub fn count_params(model: &ModelGraph) -> Result<AuditReport> {
    let cfg = model.config();
    let rows = rows(model);
    let (strict_total, paper_convention_total) = strict_and_paper(model);
    let baseline = baseline_total(cfg.profile, cfg.class_count)?;
    let baseline_width = BASELINE_WIDTH / cfg.profile.width_divisor();
    let flops_estimate = model
        .trace(1, cfg.input_size)?
        .iter()
        .map(|r| r.macs)
        .sum();
    Ok(AuditReport {
        variant: cfg.name.clone(),
        profile: cfg.profile,
        input_size: cfg.input_size,
        class_count: cfg.class_count,
        rows,
        strict_total,
        paper_convention_total,
        baseline_total: baseline,
        classifier_width: model.classifier_width(),
        classifier_width_percent: (model.classifier_width() * 100) as f64 / baseline_width as f64,
        overhead_vs_baseline_percent: percent_delta(paper_convention_total, baseline),
        strict_overhead_percent: percent_delta(strict_total, baseline),
        flops_estimate,
    })
}

/// Symbolic per-layer shapes for a batch-1 input of side `input_size`.
pub fn trace_shapes(model: &ModelGraph, input_size: usize) -> Result<Vec<TraceRow>> {
    if input_size == 0 || !input_size.is_multiple_of(OUTPUT_STRIDE) {
        return Err(Error::InvalidArgument(format!(
            "input size {input_size} is not a positive multiple of {OUTPUT_STRIDE}"
        )));
    }
    model.trace(1, input_size)
}

/// Output shapes of the five blocks, extracted from a trace.
pub fn block_shapes(trace: &[TraceRow]) -> Vec<Vec<usize>> {
    trace
        .iter()
        .filter(|r| r.kind == "block_output")
        .map(|r| r.out_shape.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadRow {
    pub variant: String,
    pub classifier_width: usize,
    pub width_percent: f64,
    pub strict_total: usize,
    pub paper_convention_total: usize,
    pub strict_delta: i64,
    pub paper_convention_delta: i64,
    pub strict_percent: f64,
    pub paper_convention_percent: f64,
}

/// One row per variant, compared against MobileViT-S at the same profile.
pub fn overhead_report(names: &[&str]) -> Result<Vec<OverheadRow>> {
    names
        .iter()
        .map(|name| {
            let cfg = config::resolve_variant(name, &Overrides::default())?;
            let report = count_params(&ModelGraph::structure(&cfg)?)?;
            let base = report.baseline_total as i64;
            Ok(OverheadRow {
                variant: cfg.name.clone(),
                classifier_width: report.classifier_width,
                width_percent: report.classifier_width_percent,
                strict_total: report.strict_total,
                paper_convention_total: report.paper_convention_total,
                strict_delta: report.strict_total as i64 - base,
                paper_convention_delta: report.paper_convention_total as i64 - base,
                strict_percent: report.strict_overhead_percent,
                paper_convention_percent: report.overhead_vs_baseline_percent,
            })
        })
        .collect()
}

impl AuditReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let kind_w = self.rows.iter().map(|r| r.kind.len()).max().unwrap_or(4).max(4);
        let shape_w = self
            .rows
            .iter()
            .map(|r| format!("{:?}", r.shape).len())
            .max()
            .unwrap_or(5)
            .max(5);
        let _ = writeln!(out, "{:<name_w$}  {:<kind_w$}  {:<shape_w$}  {:>10}", "layer", "kind", "shape", "params");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:<kind_w$}  {:<shape_w$}  {:>10}",
                r.name,
                r.kind,
                format!("{:?}", r.shape),
                r.param_count
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "variant                 {} ({})", self.variant, self.profile);
        let _ = writeln!(
            out,
            "classifier width        {} ({:.0}%)",
            self.classifier_width, self.classifier_width_percent
        );
        let _ = writeln!(out, "strict total            {} ({})", self.strict_total, millions(self.strict_total));
        let _ = writeln!(
            out,
            "paper-convention total  {} ({}, {:+.2}%)",
            self.paper_convention_total,
            millions(self.paper_convention_total),
            self.overhead_vs_baseline_percent
        );
        let _ = writeln!(
            out,
            "baseline total          {} ({})",
            self.baseline_total,
            millions(self.baseline_total)
        );
        let _ = writeln!(out, "strict overhead         {:+.2}%", self.strict_overhead_percent);
        let _ = writeln!(
            out,
            "MACs at {}x{}          {}",
            self.input_size, self.input_size, self.flops_estimate
        );
        out
    }
}

pub fn overhead_table(rows: &[OverheadRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:>6} {:>6} {:>18} {:>18}",
        "variant", "width", "%", "strict", "paper-convention"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<18} {:>6} {:>6.0} {:>18} {:>18}",
            r.variant,
            r.classifier_width,
            r.width_percent,
            format!("{}({:+.2}%)", millions(r.strict_total), r.strict_percent),
            format!(
                "{}({:+.2}%)",
                millions(r.paper_convention_total),
                r.paper_convention_percent
            ),
        );
    }
    out
}

pub fn trace_table(rows: &[TraceRow]) -> String {
    let name_w = rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<name_w$}  {:<16}  {:<20}  {:>12}", "layer", "kind", "output", "MACs");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<name_w$}  {:<16}  {:<20}  {:>12}",
            r.layer,
            r.kind,
            format!("{:?}", r.out_shape),
            r.macs
        );
    }
    out
}
