//! The `(w1, w2, l)` network family: spec, resolved stage plan, layer
//! counting and the JSON plan file.

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, BlockPlan};
use crate::error::{Error, Result};

/// Plan file format version.
pub const PLAN_VERSION: u32 = 1;

/// Stage skeleton used to expand a spec.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLayout {
    /// Single 3x3 stem conv at stride 1, then conv2..conv5 of 3, 3, 6, 3
    /// wide basic blocks (each entered at stride 2) and three
    /// 512-1024-2048 bottlenecks.
    #[default]
    Wr41,
    /// Three stem convs (first at stride 2), then 2, 3, 3, 6 basic blocks
    /// and three 1024-1024-2048 bottlenecks; conv5 and conv6 stay at
    /// stride 1 under output stride 16.
    ThreeConvStem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub w1: f64,
    pub w2: f64,
    pub l: f64,
    pub use_se: bool,
    pub use_sac: bool,
    pub use_multigrid: bool,
    pub sep_conv_head: bool,
    pub output_stride: usize,
    pub num_classes: usize,
    /// Upper bound on every hidden channel count. Keeps tests fast; the
    /// shape law does not depend on widths.
    pub channel_cap: Option<usize>,
    pub layout: StageLayout,
}

impl ArchSpec {
    /// SE and SAC on, dense head, output stride 16, 133 classes.
    pub fn new(w1: f64, w2: f64, l: f64) -> Self {
        Self {
            w1,
            w2,
            l,
            use_se: true,
            use_sac: true,
            use_multigrid: false,
            sep_conv_head: false,
            output_stride: 16,
            num_classes: 133,
            channel_cap: None,
            layout: StageLayout::Wr41,
        }
    }

    pub fn with_se(mut self, on: bool) -> Self {
        self.use_se = on;
        self
    }

    pub fn with_sac(mut self, on: bool) -> Self {
        self.use_sac = on;
        self
    }

    pub fn with_multigrid(mut self, on: bool) -> Self {
        self.use_multigrid = on;
        self
    }

    pub fn with_sep_conv_head(mut self, on: bool) -> Self {
        self.sep_conv_head = on;
        self
    }

    pub fn with_output_stride(mut self, os: usize) -> Self {
        self.output_stride = os;
        self
    }

    pub fn with_num_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    pub fn with_channel_cap(mut self, cap: Option<usize>) -> Self {
        self.channel_cap = cap;
        self
    }

    pub fn with_layout(mut self, layout: StageLayout) -> Self {
        self.layout = layout;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w1", self.w1), ("w2", self.w2), ("l", self.l)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.output_stride != 16 && self.output_stride != 32 {
            return Err(Error::invalid(format!(
                "output stride {} not in {{16, 32}}",
                self.output_stride
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be >= 1"));
        }
        if self.channel_cap == Some(0) {
            return Err(Error::invalid("channel cap must be >= 1"));
        }
        Ok(())
    }

    /// Lexicographic `(w1, w2, l)` order.
    pub fn cmp_key(&self, other: &Self) -> std::cmp::Ordering {
        self.w1
            .total_cmp(&other.w1)
            .then(self.w2.total_cmp(&other.w2))
            .then(self.l.total_cmp(&other.l))
    }

    /// `SWideRNet-(w1, w2, l)`.
    pub fn name(&self) -> String {
        format!("SWideRNet-({}, {}, {})", self.w1, self.w2, self.l)
    }

    /// Smallest input side the stride plan accepts.
    pub fn min_input(&self) -> usize {
        2 * self.output_stride + 1
    }
}

/// Nearest multiple of 8, ties up, at least 8.
pub fn round8(x: f64) -> usize {
    let m = (x / 8.0 + 0.5).floor() as usize * 8;
    m.max(8)
}

/// Round half up, at least 1.
pub fn round_count(x: f64) -> usize {
    ((x + 0.5).floor() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Stem,
    Basic,
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub name: String,
    pub kind: StageKind,
    pub out_channels: usize,
    /// Stride of the stage's first layer.
    pub stride: usize,
    pub unit_rate: usize,
    /// Input-to-feature stride at the stage output.
    pub feature_stride: usize,
    /// Standalone convs, only for the stem.
    pub convs: Vec<StemConv>,
    pub blocks: Vec<BlockPlan>,
}

impl StagePlan {
    pub fn block_count(&self) -> usize {
        match self.kind {
            StageKind::Stem => self.convs.len(),
            _ => self.blocks.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsppPlan {
    pub in_channels: usize,
    pub channels: usize,
    pub rates: Vec<usize>,
}

impl AsppPlan {
    /// Branch count: one 1x1, one per rate, one image pooling.
    pub fn branches(&self) -> usize {
        self.rates.len() + 2
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipPlan {
    pub stage: String,
    pub feature_stride: usize,
    pub in_channels: usize,
    pub project_channels: usize,
    pub fuse_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputHeadPlan {
    pub name: String,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderPlan {
    pub aspp: AsppPlan,
    pub skips: Vec<SkipPlan>,
    pub heads: Vec<OutputHeadPlan>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadPlan {
    /// 5x5 decoder convs and ASPP atrous convs become depthwise + pointwise.
    pub sep_conv: bool,
    pub head_kernel: usize,
    pub semantic: DecoderPlan,
    pub instance: DecoderPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchPlan {
    pub spec: ArchSpec,
    pub stages: Vec<StagePlan>,
    pub head: HeadPlan,
}

struct StageTemplate {
    kind: BlockKind,
    blocks: usize,
    /// `(mid, inner, out)` at unit width.
    widths: (f64, f64, f64),
    wide_group: bool,
    stride: usize,
    rate: usize,
}

fn templates(layout: StageLayout, os: usize) -> (Vec<(f64, usize)>, Vec<StageTemplate>) {
    use BlockKind::{Basic, Bottleneck};
    let basic = |blocks, c: f64, wide_group, stride, rate| StageTemplate {
        kind: Basic,
        blocks,
        widths: (c, c, c),
        wide_group,
        stride,
        rate,
    };
    match layout {
        StageLayout::Wr41 => {
            let (s6, r6) = if os == 16 { (1, 2) } else { (2, 1) };
            (
                vec![(64.0, 1)],
                vec![
                    basic(3, 128.0, true, 2, 1),
                    basic(3, 256.0, false, 2, 1),
                    basic(6, 512.0, false, 2, 1),
                    basic(3, 1024.0, false, 2, 1),
                    StageTemplate {
                        kind: Bottleneck,
                        blocks: 3,
                        widths: (512.0, 1024.0, 2048.0),
                        wide_group: false,
                        stride: s6,
                        rate: r6,
                    },
                ],
            )
        }
        StageLayout::ThreeConvStem => {
            let ((s5, r5), r6) = if os == 16 { ((1, 2), 4) } else { ((2, 1), 1) };
            (
                vec![(64.0, 2), (64.0, 1), (64.0, 1)],
                vec![
                    basic(2, 128.0, true, 2, 1),
                    basic(3, 256.0, false, 2, 1),
                    basic(3, 512.0, false, 2, 1),
                    basic(6, 1024.0, false, s5, r5),
                    StageTemplate {
                        kind: Bottleneck,
                        blocks: 3,
                        widths: (1024.0, 1024.0, 2048.0),
                        wide_group: false,
                        stride: 1,
                        rate: r6,
                    },
                ],
            )
        }
    }
}

const MULTIGRID: [usize; 3] = [1, 2, 4];

/// Expands a spec into stages conv1..conv6 and the dual-decoder head.
pub fn build_plan(spec: &ArchSpec) -> Result<ArchPlan> {
    spec.validate()?;
    let cap = |c: usize| spec.channel_cap.map_or(c, |m| c.min(m));
    let (stem_t, stage_t) = templates(spec.layout, spec.output_stride);

    let mut stages = Vec::with_capacity(6);
    let mut cin = 3;
    let mut fs = 1;
    let mut convs = Vec::new();
    for &(c, stride) in &stem_t {
        let out = cap(round8(c * spec.w1));
        convs.push(StemConv { in_channels: cin, out_channels: out, stride });
        cin = out;
        fs *= stride;
    }
    stages.push(StagePlan {
        name: "conv1".into(),
        kind: StageKind::Stem,
        out_channels: cin,
        stride: stem_t[0].1,
        unit_rate: 1,
        feature_stride: fs,
        convs,
        blocks: Vec::new(),
    });

    let last = stage_t.len() - 1;
    for (i, t) in stage_t.iter().enumerate() {
        let w = if t.wide_group { spec.w1 } else { spec.w2 };
        let count = if t.wide_group { t.blocks } else { round_count(t.blocks as f64 * spec.l) };
        let (mid, inner, out) = (
            cap(round8(t.widths.0 * w)),
            cap(round8(t.widths.1 * w)),
            cap(round8(t.widths.2 * w)),
        );
        let is_last = i == last;
        let blocks = (0..count)
            .map(|b| {
                let mg = if is_last && spec.use_multigrid { MULTIGRID[b % MULTIGRID.len()] } else { 1 };
                let plan = BlockPlan {
                    kind: t.kind,
                    in_channels: if b == 0 { cin } else { out },
                    mid_channels: mid,
                    inner_channels: if t.kind == BlockKind::Basic { out } else { inner },
                    out_channels: out,
                    stride: if b == 0 { t.stride } else { 1 },
                    rate: t.rate * mg,
                    multigrid: mg,
                    use_se: spec.use_se,
                    use_sac: spec.use_sac && is_last,
                    survival_rate: 1.0,
                };
                plan.validate()?;
                Ok(plan)
            })
            .collect::<Result<Vec<_>>>()?;
        fs *= t.stride;
        stages.push(StagePlan {
            name: format!("conv{}", i + 2),
            kind: match t.kind {
                BlockKind::Basic => StageKind::Basic,
                BlockKind::Bottleneck => StageKind::Bottleneck,
            },
            out_channels: out,
            stride: t.stride,
            unit_rate: t.rate,
            feature_stride: fs,
            convs: Vec::new(),
            blocks,
        });
        cin = out;
    }
    let head = build_head(spec, &stages, &cap)?;
    Ok(ArchPlan { spec: spec.clone(), stages, head })
}

fn build_head(spec: &ArchSpec, stages: &[StagePlan], cap: &dyn Fn(usize) -> usize) -> Result<HeadPlan> {
    let skip_stage = |stride: usize| {
        stages
            .iter()
            .rev()
            .find(|s| s.feature_stride == stride)
            .ok_or_else(|| Error::invalid(format!("no stage at feature stride {stride}")))
    };
    let s8 = skip_stage(8)?;
    let s4 = skip_stage(4)?;
    let backbone_out = stages.last().expect("six stages").out_channels;
    let rates = if spec.output_stride == 16 { vec![6, 12, 18] } else { vec![3, 6, 9] };
    let aspp = AsppPlan { in_channels: backbone_out, channels: cap(256), rates };

    let decoder = |fuse: usize, proj: (usize, usize), heads: Vec<OutputHeadPlan>| {
        let fuse = cap(fuse);
        DecoderPlan {
            aspp: aspp.clone(),
            skips: vec![
                SkipPlan {
                    stage: s8.name.clone(),
                    feature_stride: 8,
                    in_channels: s8.out_channels,
                    project_channels: cap(proj.0),
                    fuse_channels: fuse,
                },
                SkipPlan {
                    stage: s4.name.clone(),
                    feature_stride: 4,
                    in_channels: s4.out_channels,
                    project_channels: cap(proj.1),
                    fuse_channels: fuse,
                },
            ],
            heads,
        }
    };
    let sem_ch = cap(256);
    let ins_ch = cap(128);
    Ok(HeadPlan {
        sep_conv: spec.sep_conv_head,
        head_kernel: 5,
        semantic: decoder(
            256,
            (64, 32),
            vec![OutputHeadPlan {
                name: "semantic".into(),
                in_channels: sem_ch,
                mid_channels: sem_ch,
                out_channels: spec.num_classes,
            }],
        ),
        instance: decoder(
            128,
            (32, 16),
            ["center", "offset"]
                .iter()
                .zip([1, 2])
                .map(|(n, o)| OutputHeadPlan {
                    name: (*n).into(),
                    in_channels: ins_ch,
                    mid_channels: cap(32),
                    out_channels: o,
                })
                .collect(),
        ),
    })
}

/// Stem convs plus 2 per basic and 3 per bottleneck block. Projections,
/// SE, SAC switches and context layers are not counted.
pub fn count_layers(plan: &ArchPlan) -> usize {
    plan.stages
        .iter()
        .map(|s| match s.kind {
            StageKind::Stem => s.convs.len(),
            StageKind::Basic => 2 * s.blocks.len(),
            StageKind::Bottleneck => 3 * s.blocks.len(),
        })
        .sum()
}

impl ArchPlan {
    /// Spatial extent of every stage output for an `h x w` input.
    pub fn stage_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let down = |v: usize, s: usize| if s == 1 { v } else { v.div_ceil(s) };
        let mut cur = (h, w);
        self.stages
            .iter()
            .map(|s| {
                let strides: Vec<usize> = match s.kind {
                    StageKind::Stem => s.convs.iter().map(|c| c.stride).collect(),
                    _ => s.blocks.iter().map(|b| b.stride).collect(),
                };
                for st in strides {
                    cur = (down(cur.0, st), down(cur.1, st));
                }
                cur
            })
            .collect()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let min = self.spec.min_input();
        if h < min || w < min {
            return Err(Error::DegenerateShape(format!(
                "input {h}x{w} smaller than {min}x{min} for output stride {}",
                self.spec.output_stride
            )));
        }
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StagePlan> {
        self.stages.iter().find(|s| s.name == name)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    version: u32,
    spec: ArchSpec,
    stages: Vec<StagePlan>,
    head: HeadPlan,
}

const SECTIONS: [&str; 4] = ["version", "spec", "stages", "head"];

/// Pretty JSON with a trailing newline. Field order is fixed, so the
/// output is byte-stable.
pub fn serialize_plan(plan: &ArchPlan) -> String {
    let file = PlanFile {
        version: PLAN_VERSION,
        spec: plan.spec.clone(),
        stages: plan.stages.clone(),
        head: plan.head.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("plan serializes");
    s.push('\n');
    s
}

pub fn parse_plan(text: &str) -> Result<ArchPlan> {
    let value: serde_json::Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) if e.is_eof() => {
            let section = SECTIONS
                .iter()
                .rposition(|s| text.contains(&format!("\"{s}\":")))
                .map_or(SECTIONS[0], |i| SECTIONS[i]);
            let missing: Vec<&str> = SECTIONS
                .iter()
                .filter(|s| !text.contains(&format!("\"{s}\":")))
                .copied()
                .collect();
            return Err(Error::Parse(if missing.is_empty() {
                format!("plan file truncated inside section `{section}`")
            } else {
                format!(
                    "plan file truncated inside section `{section}`; missing section(s) {}",
                    missing.iter().map(|m| format!("`{m}`")).collect::<Vec<_>>().join(", ")
                )
            }));
        }
        Err(e) => return Err(Error::Parse(format!("malformed plan file: {e}"))),
    };
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Parse("plan file must be a JSON object".into()))?;
    for s in SECTIONS {
        if !obj.contains_key(s) {
            return Err(Error::Parse(format!("plan file is missing section `{s}`")));
        }
    }
    match obj["version"].as_u64() {
        Some(v) if v == u64::from(PLAN_VERSION) => {}
        other => {
            return Err(Error::Parse(format!(
                "plan version {} not supported (expected {PLAN_VERSION})",
                other.map_or_else(|| obj["version"].to_string(), |v| v.to_string())
            )))
        }
    }
    let file: PlanFile =
        serde_json::from_value(value).map_err(|e| Error::Parse(format!("invalid plan file: {e}")))?;
    file.spec.validate()?;
    let plan = ArchPlan { spec: file.spec, stages: file.stages, head: file.head };
    if plan.stages.len() != 6 || plan.stages[0].kind != StageKind::Stem {
        return Err(Error::Parse("plan must list stages conv1..conv6, stem first".into()));
    }
    for st in &plan.stages {
        for b in &st.blocks {
            b.validate()?;
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three(w1: f64, w2: f64, l: f64) -> ArchPlan {
        build_plan(&ArchSpec::new(w1, w2, l).with_layout(StageLayout::ThreeConvStem)).unwrap()
    }

    fn counts(p: &ArchPlan) -> Vec<usize> {
        p.stages.iter().map(StagePlan::block_count).collect()
    }

    #[test]
    fn rounding_rules() {
        assert_eq!(round8(89.6), 88);
        assert_eq!(round8(92.0), 96);
        assert_eq!(round8(1.0), 8);
        assert_eq!(round_count(2.25), 2);
        assert_eq!(round_count(4.5), 5);
        assert_eq!(round_count(0.1), 1);
    }

    #[test]
    fn unit_three_conv_stem() {
        let p = three(1.0, 1.0, 1.0);
        assert_eq!(counts(&p), vec![3, 2, 3, 3, 6, 3]);
        let ch: Vec<usize> = p.stages.iter().map(|s| s.out_channels).collect();
        assert_eq!(ch, vec![64, 128, 256, 512, 1024, 2048]);
        let b = &p.stages[5].blocks[0];
        assert_eq!((b.mid_channels, b.inner_channels), (1024, 1024));
        assert_eq!((p.stages[4].unit_rate, p.stages[5].unit_rate), (2, 4));
        assert_eq!(p.stage_sizes(65, 65).iter().map(|s| s.0).collect::<Vec<_>>(), vec![33, 17, 9, 5, 5, 5]);
        assert_eq!(count_layers(&p), 40);
    }

    #[test]
    fn unit_wr41() {
        let p = build_plan(&ArchSpec::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(counts(&p), vec![1, 3, 3, 6, 3, 3]);
        let ch: Vec<usize> = p.stages.iter().map(|s| s.out_channels).collect();
        assert_eq!(ch, vec![64, 128, 256, 512, 1024, 2048]);
        assert_eq!(p.stage_sizes(65, 65).iter().map(|s| s.0).collect::<Vec<_>>(), vec![65, 33, 17, 9, 5, 5]);
        assert_eq!(count_layers(&p), 40);
        assert!(p.stages[5].blocks.iter().all(|b| b.use_sac && b.rate == 2));
        assert!(p.stages[1..5].iter().flat_map(|s| &s.blocks).all(|b| b.use_se && !b.use_sac));
        assert_eq!(p.head.semantic.skips[0].stage, "conv4");
        assert_eq!(p.head.semantic.skips[1].stage, "conv3");
    }

    #[test]
    fn fast_widths() {
        let p = three(0.25, 0.35, 1.0);
        assert_eq!(p.stages[0].out_channels, 16);
        assert_eq!(p.stages[1].out_channels, 32);
        assert_eq!(p.stages[2].out_channels, 88);
    }

    #[test]
    fn depth_doubling() {
        assert_eq!(counts(&three(1.0, 1.0, 2.0))[2..], [6, 6, 12, 6]);
    }

    #[test]
    fn fractional_depth() {
        assert_eq!(count_layers(&three(0.25, 0.35, 0.75)), 31);
        assert_eq!(count_layers(&build_plan(&ArchSpec::new(0.25, 0.35, 0.75)).unwrap()), 31);
        assert_eq!(count_layers(&three(1.0, 1.0, 3.0)), 106);
    }

    #[test]
    fn multigrid_cycles() {
        let p = build_plan(&ArchSpec::new(1.0, 1.0, 2.0).with_sac(false).with_multigrid(true)).unwrap();
        let mg: Vec<usize> = p.stages[5].blocks.iter().map(|b| b.multigrid).collect();
        assert_eq!(mg, vec![1, 2, 4, 1, 2, 4]);
        assert_eq!(p.stages[5].blocks[2].rate, 8);
    }

    #[test]
    fn plain_plan_has_no_se_or_sac() {
        let p = build_plan(&ArchSpec::new(1.0, 1.0, 1.0).with_se(false).with_sac(false)).unwrap();
        assert!(p.stages.iter().flat_map(|s| &s.blocks).all(|b| !b.use_se && !b.use_sac));
    }

    #[test]
    fn output_stride_32() {
        for layout in [StageLayout::Wr41, StageLayout::ThreeConvStem] {
            let p = build_plan(&ArchSpec::new(1.0, 1.0, 1.0).with_output_stride(32).with_layout(layout)).unwrap();
            assert_eq!(p.stages[5].feature_stride, 32);
            assert_eq!(p.head.semantic.aspp.rates, vec![3, 6, 9]);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(build_plan(&ArchSpec::new(0.0, 1.0, 1.0)).is_err());
        assert!(build_plan(&ArchSpec::new(1.0, -1.0, 1.0)).is_err());
        assert!(build_plan(&ArchSpec::new(1.0, 1.0, f64::NAN)).is_err());
        assert!(build_plan(&ArchSpec::new(1.0, 1.0, 1.0).with_output_stride(8)).is_err());
    }

    #[test]
    fn round_trip_and_stability() {
        let p = build_plan(&ArchSpec::new(0.25, 0.35, 0.75).with_multigrid(true)).unwrap();
        let a = serialize_plan(&p);
        assert_eq!(a, serialize_plan(&build_plan(&p.spec).unwrap()));
        assert_eq!(parse_plan(&a).unwrap(), p);
    }

    #[test]
    fn truncated_names_section() {
        let text = serialize_plan(&build_plan(&ArchSpec::new(1.0, 1.0, 1.0)).unwrap());
        let cut = text.find("\"head\":").unwrap();
        let err = parse_plan(&text[..cut]).unwrap_err().to_string();
        assert!(err.contains("`head`"), "{err}");
        let err = parse_plan(&text[..40]).unwrap_err().to_string();
        assert!(err.contains("`stages`"), "{err}");
    }

    #[test]
    fn rejects_unknown_fields_and_versions() {
        let text = serialize_plan(&build_plan(&ArchSpec::new(1.0, 1.0, 1.0)).unwrap());
        let extra = text.replacen("\"w1\":", "\"bogus\": 1,\n    \"w1\":", 1);
        assert!(parse_plan(&extra).unwrap_err().to_string().contains("bogus"));
        let v2 = text.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(parse_plan(&v2).unwrap_err().to_string().contains("version"));
        assert!(parse_plan("[1, 2]").is_err());
    }
}
