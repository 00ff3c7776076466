use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{estimate_flash, lower_bound, plan_arena, tensor_lifetimes, ALIGNMENT};
use crate::ir::{infer_shapes, node_macs, node_params, DType, Graph, GraphError, Shape};

/// 640 KiB of user-available SRAM.
pub const DEFAULT_RAM_BUDGET: usize = 640 * 1024;
/// 2 MiB of FLASH.
pub const DEFAULT_FLASH_BUDGET: usize = 2 * 1024 * 1024;
/// Usage above this fraction of a budget is reported as tight.
pub const TIGHT_FRACTION: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub ram_bytes: usize,
    pub flash_bytes: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            ram_bytes: DEFAULT_RAM_BUDGET,
            flash_bytes: DEFAULT_FLASH_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Fits,
    Tight,
    NoFit,
}

impl Verdict {
    pub fn judge(used: usize, budget: usize) -> Verdict {
        if used > budget {
            Verdict::NoFit
        } else if used as f64 > TIGHT_FRACTION * budget as f64 {
            Verdict::Tight
        } else {
            Verdict::Fits
        }
    }

    pub fn fits(self) -> bool {
        self != Verdict::NoFit
    }

    pub fn label(self) -> &'static str {
        match self {
            Verdict::Fits => "fits",
            Verdict::Tight => "tight",
            Verdict::NoFit => "no-fit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRow {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub region: String,
    pub out_shapes: Vec<Shape>,
    pub params: usize,
    pub macs: usize,
    /// Execution step range of the node's first output.
    pub first_use: usize,
    pub last_use: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub num_classes: usize,
    pub input_size: usize,
    pub dtype: DType,
    pub params: usize,
    pub macs: usize,
    pub flash_bytes: usize,
    /// Activation arena from the planner.
    pub arena_bytes: usize,
    pub arena_lower_bound: usize,
    /// Camera frame buffer held next to the arena (0 when not modelled).
    pub frame_buffer_bytes: usize,
    /// Arena plus frame buffer.
    pub ram_bytes: usize,
    pub peak_node: String,
    pub budgets: Budgets,
    pub ram_verdict: Verdict,
    pub flash_verdict: Verdict,
    pub nodes: Vec<NodeRow>,
}

impl AnalyzeReport {
    pub fn fits(&self) -> bool {
        self.ram_verdict.fits() && self.flash_verdict.fits()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    pub fn render_text(&self) -> String {
        let kib = |b: usize| b as f64 / 1024.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "model      nc={} input={} dtype={:?}",
            self.num_classes, self.input_size, self.dtype
        );
        let _ = writeln!(s, "params     {}", self.params);
        let _ = writeln!(s, "macs       {}", self.macs);
        let _ = writeln!(
            s,
            "flash      {} B ({:.2} KiB) / budget {} B  {}",
            self.flash_bytes,
            kib(self.flash_bytes),
            self.budgets.flash_bytes,
            self.flash_verdict.label()
        );
        let _ = writeln!(
            s,
            "ram        {} B ({:.2} KiB) / budget {} B  {}",
            self.ram_bytes,
            kib(self.ram_bytes),
            self.budgets.ram_bytes,
            self.ram_verdict.label()
        );
        let _ = writeln!(
            s,
            "  arena    {} B (lower bound {} B), peak at {}",
            self.arena_bytes, self.arena_lower_bound, self.peak_node
        );
        if self.frame_buffer_bytes > 0 {
            let _ = writeln!(s, "  frame    {} B", self.frame_buffer_bytes);
        }
        let _ = writeln!(s, "fits: {}", if self.fits() { "yes" } else { "no" });
        let _ = writeln!(s);
        let name_w = self
            .nodes
            .iter()
            .map(|n| n.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let _ = writeln!(
            s,
            "{:>4}  {:<name_w$}  {:<17}  {:<8}  {:<18}  {:>8}  {:>11}  {:>9}",
            "#", "name", "kind", "region", "out shape", "params", "macs", "lifetime"
        );
        for n in &self.nodes {
            let shape = n
                .out_shapes
                .first()
                .map(|sh| format!("{}x{}x{}", sh[1], sh[2], sh[3]))
                .unwrap_or_default();
            let extra = if n.out_shapes.len() > 1 { "+" } else { "" };
            let _ = writeln!(
                s,
                "{:>4}  {:<name_w$}  {:<17}  {:<8}  {:<18}  {:>8}  {:>11}  {:>9}",
                n.index,
                n.name,
                n.kind,
                n.region,
                format!("{shape}{extra}"),
                n.params,
                n.macs,
                format!("{}..{}", n.first_use, n.last_use)
            );
        }
        s
    }
}

/// Bytes of one square RGB565 camera frame.
pub fn frame_buffer_bytes(input_size: usize) -> usize {
    input_size * input_size * 2
}

pub fn analyze_report(g: &Graph, budgets: &Budgets) -> Result<AnalyzeReport, GraphError> {
    analyze_report_with_frame(g, budgets, 0)
}

/// Analyze `g`, adding `frame_buffer` bytes of RAM on top of the arena.
pub fn analyze_report_with_frame(
    g: &Graph,
    budgets: &Budgets,
    frame_buffer: usize,
) -> Result<AnalyzeReport, GraphError> {
    let g = infer_shapes(g)?;
    let lifetimes = tensor_lifetimes(&g)?;
    let plan = plan_arena(&lifetimes, ALIGNMENT);
    let span = |t| {
        lifetimes
            .iter()
            .find(|l| l.tensor_id == t)
            .map_or((0, 0), |l| (l.first_use, l.last_use))
    };
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for (i, n) in g.nodes.iter().enumerate() {
        let (first_use, last_use) = n.outputs.first().map_or((i + 1, i + 1), |&t| span(t));
        nodes.push(NodeRow {
            index: i,
            name: n.name.clone(),
            kind: n.op.name().to_string(),
            region: n.region.to_string(),
            out_shapes: n.outputs.iter().map(|t| g.tensors[t].shape).collect(),
            params: node_params(n),
            macs: node_macs(&g, n)?,
            first_use,
            last_use,
        });
    }
    let flash_bytes = estimate_flash(&g);
    let ram_bytes = plan.total_bytes + frame_buffer;
    let peak_node = match plan.peak_step {
        0 => "input".to_string(),
        s => g.nodes[s - 1].name.clone(),
    };
    Ok(AnalyzeReport {
        num_classes: g.metadata.num_classes,
        input_size: g.metadata.input_size,
        dtype: g.input_spec().dtype,
        params: nodes.iter().map(|n| n.params).sum(),
        macs: nodes.iter().map(|n| n.macs).sum(),
        flash_bytes,
        arena_bytes: plan.total_bytes,
        arena_lower_bound: lower_bound(&lifetimes),
        frame_buffer_bytes: frame_buffer,
        ram_bytes,
        peak_node,
        budgets: *budgets,
        ram_verdict: Verdict::judge(ram_bytes, budgets.ram_bytes),
        flash_verdict: Verdict::judge(flash_bytes, budgets.flash_bytes),
        nodes,
    })
}
