//! Analytical parameter and multiply-add accounting.
//!
//! One multiply-add is one M-Add. Convs and FC layers cost their weight
//! count times output positions, batch norm costs `2C` parameters and
//! `2CHW` M-Adds, elementwise ops and pooling are free.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchPlan, ArchSpec, AsppPlan, DecoderPlan, StageKind};
use crate::blocks::BlockPlan;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub layer: String,
    pub params: u64,
    pub madds: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub spec: ArchSpec,
    pub input_h: usize,
    pub input_w: usize,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_madds: u64,
}

impl CostReport {
    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn madds_b(&self) -> f64 {
        self.total_madds as f64 / 1e9
    }

    /// Sums rows whose path starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.layer.starts_with(prefix))
            .fold((0, 0), |(p, m), r| (p + r.params, m + r.madds))
    }

    /// `layer,params,madds` with a header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

struct Tally {
    rows: Vec<CostRow>,
}

impl Tally {
    fn row(&mut self, layer: String, params: usize, madds: usize) {
        self.rows.push(CostRow { layer, params: params as u64, madds: madds as u64 });
    }

    fn conv(&mut self, layer: String, cin: usize, cout: usize, k: usize, groups: usize, hw: usize, bias: bool) {
        let w = cout * (cin / groups) * k * k;
        self.row(layer, w + if bias { cout } else { 0 }, w * hw);
    }

    fn bn(&mut self, layer: String, c: usize, hw: usize) {
        self.row(layer, 2 * c, 2 * c * hw);
    }

    fn fc(&mut self, layer: String, cin: usize, cout: usize, bias: bool) {
        self.row(layer, cin * cout + if bias { cout } else { 0 }, cin * cout);
    }

    /// Conv, BN, ReLU.
    fn conv_bn(&mut self, path: &str, cin: usize, cout: usize, k: usize, hw: usize) {
        self.conv(path.to_string(), cin, cout, k, 1, hw, false);
        self.bn(format!("{path}/bn"), cout, hw);
    }

    fn head_conv(&mut self, path: &str, cin: usize, cout: usize, k: usize, sep: bool, hw: usize) {
        if sep && k > 1 {
            self.conv(format!("{path}/depthwise"), cin, cin, k, cin, hw, false);
            self.bn(format!("{path}/depthwise/bn"), cin, hw);
            self.conv_bn(&format!("{path}/pointwise"), cin, cout, 1, hw);
        } else {
            self.conv_bn(path, cin, cout, k, hw);
        }
    }
}

fn down(v: usize, s: usize) -> usize {
    v.div_ceil(s)
}

fn block(t: &mut Tally, path: &str, b: &BlockPlan, hin: (usize, usize)) -> (usize, usize) {
    let hout = (down(hin.0, b.stride), down(hin.1, b.stride));
    let (ain, aout) = (hin.0 * hin.1, hout.0 * hout.1);
    for (i, (cin, cout, k)) in b.branch_convs().into_iter().enumerate() {
        let p = format!("{path}/conv{}", i + 1);
        t.bn(format!("{p}/bn"), cin, if i == 0 { ain } else { aout });
        if b.use_sac && i == b.sac_index() {
            t.fc(format!("{p}/sac/pre_context"), cin, cin, true);
            t.conv(format!("{p}/sac/switch"), cin, 1, 1, 1, aout, true);
            t.conv(format!("{p}/sac/rate{}", b.rate), cin, cout, 3, 1, aout, false);
            t.row(format!("{p}/sac/rate{}", 3 * b.rate), 0, cout * cin * 9 * aout);
            t.fc(format!("{p}/sac/post_context"), cout, cout, true);
        } else {
            t.conv(p, cin, cout, k, 1, aout, false);
        }
    }
    if b.use_se {
        t.fc(format!("{path}/se"), b.out_channels, b.out_channels, false);
    }
    if b.has_projection() {
        t.conv(format!("{path}/shortcut"), b.in_channels, b.out_channels, 1, 1, aout, false);
    }
    hout
}

fn aspp(t: &mut Tally, path: &str, p: &AsppPlan, sep: bool, hw: usize) {
    t.conv_bn(&format!("{path}/branch1"), p.in_channels, p.channels, 1, hw);
    for (i, _) in p.rates.iter().enumerate() {
        t.head_conv(&format!("{path}/branch{}", i + 2), p.in_channels, p.channels, 3, sep, hw);
    }
    t.conv_bn(&format!("{path}/pool"), p.in_channels, p.channels, 1, 1);
    t.conv_bn(&format!("{path}/project"), p.channels * p.branches(), p.channels, 1, hw);
}

fn decoder(
    t: &mut Tally,
    path: &str,
    p: &DecoderPlan,
    plan: &ArchPlan,
    sizes: &[(usize, usize)],
) -> Result<()> {
    let sep = plan.head.sep_conv;
    let k = plan.head.head_kernel;
    let top = sizes.last().expect("six stages");
    aspp(t, &format!("{path}/aspp"), &p.aspp, sep, top.0 * top.1);
    let mut prev = p.aspp.channels;
    let mut hw = top.0 * top.1;
    for (i, s) in p.skips.iter().enumerate() {
        let idx = plan
            .stages
            .iter()
            .position(|st| st.name == s.stage)
            .ok_or_else(|| Error::contract(format!("skip stage {} not in plan", s.stage)))?;
        hw = sizes[idx].0 * sizes[idx].1;
        let sp = format!("{path}/skip{}", i + 1);
        t.conv_bn(&format!("{sp}/project"), s.in_channels, s.project_channels, 1, hw);
        t.head_conv(&format!("{sp}/fuse"), prev + s.project_channels, s.fuse_channels, k, sep, hw);
        prev = s.fuse_channels;
    }
    for h in &p.heads {
        t.head_conv(&format!("{path}/{}/conv", h.name), h.in_channels, h.mid_channels, k, sep, hw);
        t.conv(format!("{path}/{}/classifier", h.name), h.mid_channels, h.out_channels, 1, 1, hw, true);
    }
    Ok(())
}

/// Itemized cost of `plan` at an `input_h x input_w` input.
pub fn cost_report(plan: &ArchPlan, input_h: usize, input_w: usize) -> Result<CostReport> {
    if input_h == 0 || input_w == 0 {
        return Err(Error::DegenerateShape(format!("input {input_h}x{input_w}")));
    }
    let mut t = Tally { rows: Vec::new() };
    let mut cur = (input_h, input_w);
    let mut sizes = Vec::with_capacity(plan.stages.len());
    for stage in &plan.stages {
        match stage.kind {
            StageKind::Stem => {
                for (i, c) in stage.convs.iter().enumerate() {
                    cur = (down(cur.0, c.stride), down(cur.1, c.stride));
                    let p = format!("backbone/{}/conv{}", stage.name, i + 1);
                    t.conv_bn(&p, c.in_channels, c.out_channels, 3, cur.0 * cur.1);
                }
            }
            _ => {
                for (j, b) in stage.blocks.iter().enumerate() {
                    cur = block(&mut t, &format!("backbone/{}/block{}", stage.name, j + 1), b, cur);
                }
            }
        }
        sizes.push(cur);
    }
    let last = plan.stages.last().ok_or_else(|| Error::contract("plan has no stages"))?;
    t.bn("backbone/final_bn".into(), last.out_channels, cur.0 * cur.1);
    decoder(&mut t, "head/semantic", &plan.head.semantic, plan, &sizes)?;
    decoder(&mut t, "head/instance", &plan.head.instance, plan, &sizes)?;

    let total_params = t.rows.iter().map(|r| r.params).sum();
    let total_madds = t.rows.iter().map(|r| r.madds).sum();
    Ok(CostReport {
        spec: plan.spec.clone(),
        input_h,
        input_w,
        rows: t.rows,
        total_params,
        total_madds,
    })
}

/// Parameters added by SE: one `C x C` gate per decorated block.
pub fn se_param_delta(plan: &ArchPlan) -> u64 {
    plan.stages
        .iter()
        .flat_map(|s| &s.blocks)
        .filter(|b| b.use_se)
        .map(|b| (b.out_channels * b.out_channels) as u64)
        .sum()
}

/// A published cost row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub w1: f64,
    pub w2: f64,
    pub l: f64,
    pub params_m: Option<f64>,
    pub madds_b: Option<f64>,
    pub input_h: usize,
    pub input_w: usize,
    pub source_table: String,
}

impl ReferenceRow {
    pub fn matches(&self, spec: &ArchSpec) -> bool {
        self.w1 == spec.w1 && self.w2 == spec.w2 && self.l == spec.l
    }
}

pub fn parse_reference_csv<R: Read>(r: R) -> Result<Vec<ReferenceRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let rows = rd.deserialize().collect::<std::result::Result<Vec<ReferenceRow>, _>>()?;
    Ok(rows)
}

pub fn read_reference_csv(path: &Path) -> Result<Vec<ReferenceRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reference_csv(f)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Deviation {
    pub metric: String,
    pub ours: f64,
    pub reference: f64,
    pub relative: f64,
}

impl Deviation {
    pub fn new(metric: impl Into<String>, ours: f64, reference: f64) -> Self {
        Self { metric: metric.into(), ours, reference, relative: (ours - reference).abs() / reference }
    }
}

/// Deviations of `report` from every reference row with the same spec and
/// input size, sorted by relative deviation.
pub fn compare_to_reference(report: &CostReport, refs: &[ReferenceRow]) -> Result<Vec<Deviation>> {
    let hits: Vec<&ReferenceRow> = refs
        .iter()
        .filter(|r| r.matches(&report.spec) && r.input_h == report.input_h && r.input_w == report.input_w)
        .collect();
    if hits.is_empty() {
        return Err(Error::NotFound(format!(
            "no reference row for {} at {}x{}",
            report.spec.name(),
            report.input_h,
            report.input_w
        )));
    }
    let mut out = Vec::new();
    for r in hits {
        let tag = format!("{} {}x{} [{}]", report.spec.name(), r.input_h, r.input_w, r.source_table);
        if let Some(p) = r.params_m {
            out.push(Deviation::new(format!("params_m {tag}"), report.params_m(), p));
        }
        if let Some(m) = r.madds_b {
            out.push(Deviation::new(format!("madds_b {tag}"), report.madds_b(), m));
        }
    }
    out.sort_by(|a, b| a.relative.total_cmp(&b.relative).then_with(|| a.metric.cmp(&b.metric)));
    Ok(out)
}
