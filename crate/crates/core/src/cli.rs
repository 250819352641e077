//! The `swidernet` command line. Every run ends with one JSON summary line
//! on stderr; exit code 0 is success, 1 a usage error, 2 a data error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::arch::{build_plan, count_layers, parse_plan, serialize_plan, ArchPlan, ArchSpec};
use crate::augment::{augment, scale_magnitudes, AugPolicy, Image};
use crate::autodiff::{check_op, CheckedOp};
use crate::cost::{compare_to_reference, cost_report, read_reference_csv};
use crate::network::instantiate;
use crate::panoptic::{evaluate_dirs, read_meta, PqResult};
use crate::search::{
    cost_oracle, enumerate_space, evaluate_candidates, latency_oracle, measure_latency, pareto_front,
    quality_oracle, read_candidates_csv, read_quality_csv, write_candidates_csv, Metric, Oracles, SpaceKind,
};
use crate::Error;

/// Gradient-check tolerance on the max relative error.
const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "swidernet", version, about = "Scaled wide residual networks for panoptic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an architecture plan from (w1, w2, l).
    Build(BuildArgs),
    /// Per-layer parameter and multiply-add counts for a plan.
    Cost(CostArgs),
    /// Enumerate a search space and evaluate every candidate.
    Search(SearchArgs),
    /// Extract the Pareto frontier from a candidates CSV.
    Pareto(ParetoArgs),
    /// Panoptic quality of predicted maps against ground truth.
    #[command(name = "eval-pq")]
    EvalPq(EvalPqArgs),
    /// Reverse-mode gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Median forward latency of a plan on this machine.
    Latency(LatencyArgs),
    /// Apply a randomly drawn AutoAugment sub-policy to a PPM image.
    Augment(AugmentArgs),
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[arg(long)]
    w1: f64,
    #[arg(long)]
    w2: f64,
    #[arg(long)]
    l: f64,
    #[arg(long)]
    no_se: bool,
    #[arg(long)]
    no_sac: bool,
    #[arg(long)]
    multigrid: bool,
    #[arg(long)]
    sep_conv: bool,
    #[arg(long, default_value_t = 16)]
    output_stride: usize,
    #[arg(long, default_value_t = 133)]
    num_classes: usize,
    /// Plan JSON destination; stdout when absent.
    #[arg(short = 'o', long = "output")]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CostArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Input size as HxW.
    #[arg(long, value_parser = parse_hw)]
    input: (usize, usize),
    /// Reference costs CSV to compare against.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(short = 'o', long = "output")]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long, value_parser = parse_space)]
    space: SpaceKind,
    #[arg(long, value_parser = parse_hw, default_value = "641x641")]
    input: (usize, usize),
    /// Quality CSV (w1,w2,l,quality).
    #[arg(long)]
    quality: Option<PathBuf>,
    #[arg(long)]
    measure_latency: bool,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'o', long = "output")]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParetoArgs {
    #[arg(long)]
    candidates: PathBuf,
    /// Cost objective: latency_ms, madds or params.
    #[arg(long, value_parser = parse_metric)]
    x: Metric,
    #[arg(long, value_parser = parse_metric, default_value = "quality")]
    y: Metric,
    #[arg(short = 'o', long = "output")]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalPqArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[arg(long, default_value_t = 0)]
    stuff_threshold: usize,
    /// Per-class CSV destination.
    #[arg(short = 'o', long = "output")]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds per op.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

#[derive(Debug, Args)]
struct LatencyArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, value_parser = parse_hw)]
    input: (usize, usize),
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long, required_unless_present = "print_policy")]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Magnitude scale factor.
    #[arg(long, default_value_t = 1.0)]
    factor: f64,
    /// Print the policy table and exit.
    #[arg(long)]
    print_policy: bool,
    #[arg(short = 'o', long = "output", required_unless_present = "print_policy")]
    output: Option<PathBuf>,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("`{s}` is not HxW"))?;
    let side = |v: &str| v.trim().parse::<usize>().ok().filter(|&v| v > 0);
    match (side(h), side(w)) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(format!("`{s}` is not HxW with positive integers")),
    }
}

fn parse_space(s: &str) -> Result<SpaceKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) => m,
        }
    }
}

type Outcome = std::result::Result<Value, Failure>;

/// Data failure tagged with the flag or file it came from.
fn data(ctx: impl std::fmt::Display) -> impl FnOnce(Error) -> Failure {
    move |e| Failure::Data(format!("{ctx}: {e}"))
}

fn write_output(path: Option<&Path>, bytes: &[u8], out: &mut dyn Write) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| Failure::Data(format!("-o {}: {e}", p.display()))),
        None => out.write_all(bytes).map_err(|e| Failure::Data(format!("stdout: {e}"))),
    }
}

fn load_plan(path: &Path) -> Result<ArchPlan, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("--plan {}: {e}", path.display())))?;
    parse_plan(&text).map_err(data(format!("--plan {}", path.display())))
}

fn build(a: BuildArgs, out: &mut dyn Write) -> Outcome {
    let spec = ArchSpec::new(a.w1, a.w2, a.l)
        .with_se(!a.no_se)
        .with_sac(!a.no_sac)
        .with_multigrid(a.multigrid)
        .with_sep_conv_head(a.sep_conv)
        .with_output_stride(a.output_stride)
        .with_num_classes(a.num_classes);
    spec.validate().map_err(|e| Failure::Usage(format!("--w1/--w2/--l/--output-stride: {e}")))?;
    let plan = build_plan(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
    write_output(a.output.as_deref(), serialize_plan(&plan).as_bytes(), out)?;
    Ok(json!({ "name": spec.name(), "layers": count_layers(&plan), "stages": plan.stages.len() }))
}

fn cost(a: CostArgs, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let plan = load_plan(&a.plan)?;
    let (h, w) = a.input;
    let report = cost_report(&plan, h, w).map_err(data("--input"))?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(data("csv"))?;
    write_output(a.output.as_deref(), &csv, out)?;
    let layers = count_layers(&plan);
    let _ = writeln!(
        err,
        "{}: layer count {layers}, {:.2}M params, {:.2}B M-Adds at {h}x{w}",
        plan.spec.name(),
        report.params_m(),
        report.madds_b()
    );
    let mut summary = json!({
        "name": plan.spec.name(),
        "layers": layers,
        "params": report.total_params,
        "madds": report.total_madds,
    });
    if let Some(r) = &a.reference {
        let refs = read_reference_csv(r).map_err(data(format!("--ref {}", r.display())))?;
        let devs = compare_to_reference(&report, &refs).map_err(data(format!("--ref {}", r.display())))?;
        for d in &devs {
            let _ = writeln!(err, "  {}: ours {:.2}, reference {:.2}, deviation {:.2}%", d.metric, d.ours, d.reference, 100.0 * d.relative);
        }
        summary["deviations"] = json!(devs);
    }
    Ok(summary)
}

fn search(a: SearchArgs, out: &mut dyn Write) -> Outcome {
    let (h, w) = a.input;
    if a.measure_latency && a.iters == 0 {
        return Err(Failure::Usage("--iters must be at least 1".into()));
    }
    let specs = enumerate_space(a.space);
    let mut oracles = Oracles { cost: Some(cost_oracle(h, w)), ..Default::default() };
    if let Some(q) = &a.quality {
        let rows = read_quality_csv(q).map_err(data(format!("--quality {}", q.display())))?;
        oracles.quality = Some(quality_oracle(rows));
    }
    if a.measure_latency {
        oracles.latency = Some(latency_oracle(h, w, a.warmup, a.iters, a.seed));
    }
    let cands = evaluate_candidates(&specs, &oracles);
    let mut csv = Vec::new();
    write_candidates_csv(&mut csv, &cands).map_err(data("csv"))?;
    write_output(a.output.as_deref(), &csv, out)?;
    let failed: Vec<&str> = cands.iter().filter(|c| c.error.is_some()).map(|c| c.label.as_str()).collect();
    Ok(json!({
        "candidates": cands.len(),
        "with_quality": cands.iter().filter(|c| c.quality.is_some()).count(),
        "failed": failed,
    }))
}

fn pareto(a: ParetoArgs, out: &mut dyn Write) -> Outcome {
    let path = &a.candidates;
    let cands = read_candidates_csv(path).map_err(data(format!("--candidates {}", path.display())))?;
    let front = pareto_front(&cands, a.x, a.y).map_err(data(format!("--candidates {}", path.display())))?;
    let mut csv = Vec::new();
    write_candidates_csv(&mut csv, &front).map_err(data("csv"))?;
    write_output(a.output.as_deref(), &csv, out)?;
    Ok(json!({
        "candidates": cands.len(),
        "frontier": front.iter().map(|c| c.label.clone()).collect::<Vec<_>>(),
        "x": a.x.name(),
        "y": a.y.name(),
    }))
}

fn pq_text(r: &PqResult, names: &dyn Fn(u16) -> String) -> String {
    let mut s = format!("PQ {:.3}  SQ {:.3}  RQ {:.3}  over {} classes\n", r.pq, r.sq, r.rq, r.classes);
    if let Some(t) = r.pq_things {
        s += &format!("PQ things {t:.3}\n");
    }
    if let Some(t) = r.pq_stuff {
        s += &format!("PQ stuff {t:.3}\n");
    }
    for (&c, st) in &r.per_class {
        s += &format!(
            "  {:>5} {:<16} PQ {:.3} SQ {:.3} RQ {:.3}  TP {} FP {} FN {}\n",
            c,
            names(c),
            st.pq(),
            st.sq(),
            st.rq(),
            st.tp,
            st.fp,
            st.fn_
        );
    }
    s
}

fn eval_pq(a: EvalPqArgs, out: &mut dyn Write) -> Outcome {
    let meta = read_meta(&a.meta).map_err(data(format!("--meta {}", a.meta.display())))?;
    for (flag, dir) in [("--pred", &a.pred), ("--gt", &a.gt)] {
        if !dir.is_dir() {
            return Err(Failure::Data(format!("{flag} {}: not a directory", dir.display())));
        }
    }
    let (n, r) = evaluate_dirs(&a.pred, &a.gt, &meta, a.stuff_threshold).map_err(data("--pred/--gt"))?;
    let name_of = |c: u16| {
        meta.categories().find(|k| k.class_id == c).map(|k| k.name.clone()).unwrap_or_default()
    };
    out.write_all(pq_text(&r, &name_of).as_bytes()).map_err(|e| Failure::Data(format!("stdout: {e}")))?;
    if let Some(p) = &a.output {
        let mut wr = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Failure::Data(format!("-o {}: {e}", p.display()));
        wr.write_record(["class_id", "name", "pq", "sq", "rq", "tp", "fp", "fn"]).map_err(csv_err)?;
        for (&c, st) in &r.per_class {
            wr.write_record([
                c.to_string(),
                name_of(c),
                format!("{:.6}", st.pq()),
                format!("{:.6}", st.sq()),
                format!("{:.6}", st.rq()),
                st.tp.to_string(),
                st.fp.to_string(),
                st.fn_.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = wr.into_inner().map_err(|e| Failure::Data(format!("-o {}: {e}", p.display())))?;
        write_output(Some(p), &bytes, out)?;
    }
    Ok(json!({ "images": n, "pq": r.pq, "sq": r.sq, "rq": r.rq, "pq_things": r.pq_things, "pq_stuff": r.pq_stuff }))
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Outcome {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let mut table = format!("{:<22} {:>12} {:>8}\n", "op", "max_rel_err", "result");
    let mut failed = Vec::new();
    for op in CheckedOp::ALL {
        let mut worst = 0.0f64;
        for s in a.seed..a.seed + a.seeds {
            let r = check_op(op, s, GRAD_EPS).map_err(data(op.name()))?;
            worst = worst.max(r.max_rel_error);
        }
        let ok = worst < GRAD_TOL;
        if !ok {
            failed.push(op.name());
        }
        table += &format!("{:<22} {:>12.3e} {:>8}\n", op.name(), worst, if ok { "PASS" } else { "FAIL" });
    }
    out.write_all(table.as_bytes()).map_err(|e| Failure::Data(format!("stdout: {e}")))?;
    if !failed.is_empty() {
        return Err(Failure::Data(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(json!({ "ops": CheckedOp::ALL.len(), "seeds": a.seeds, "tolerance": GRAD_TOL }))
}

fn latency(a: LatencyArgs, out: &mut dyn Write) -> Outcome {
    if a.iters == 0 {
        return Err(Failure::Usage("--iters must be at least 1".into()));
    }
    let plan = load_plan(&a.plan)?;
    let (h, w) = a.input;
    plan.check_input(h, w).map_err(|e| Failure::Usage(format!("--input: {e}")))?;
    let net = instantiate(&plan, a.seed).map_err(data(format!("--plan {}", a.plan.display())))?;
    let ms = measure_latency(&net, h, w, a.warmup, a.iters).map_err(data("forward"))?;
    let _ = writeln!(out, "{}: median {ms:.2} ms over {} iters at {h}x{w}", plan.spec.name(), a.iters);
    Ok(json!({ "name": plan.spec.name(), "latency_ms": ms, "iters": a.iters, "warmup": a.warmup }))
}

fn augment_cmd(a: AugmentArgs, out: &mut dyn Write) -> Outcome {
    let policy = scale_magnitudes(&AugPolicy::standard(), a.factor).map_err(|e| Failure::Usage(format!("--factor: {e}")))?;
    if a.print_policy {
        out.write_all(policy.to_string().as_bytes()).map_err(|e| Failure::Data(format!("stdout: {e}")))?;
        return Ok(json!({ "factor": a.factor }));
    }
    let (src, dst) = (a.image.expect("required by clap"), a.output.expect("required by clap"));
    let img = Image::read_ppm_file(&src).map_err(data(format!("--image {}", src.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (idx, res) = augment(&img, &policy, &mut rng).map_err(data("augment"))?;
    res.write_ppm_file(&dst).map_err(data(format!("-o {}", dst.display())))?;
    Ok(json!({ "subpolicy": idx, "seed": a.seed, "factor": a.factor, "height": res.height, "width": res.width }))
}

fn verb(c: &Command) -> &'static str {
    match c {
        Command::Build(_) => "build",
        Command::Cost(_) => "cost",
        Command::Search(_) => "search",
        Command::Pareto(_) => "pareto",
        Command::EvalPq(_) => "eval-pq",
        Command::Gradcheck(_) => "gradcheck",
        Command::Latency(_) => "latency",
        Command::Augment(_) => "augment",
    }
}

/// Runs one command and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let rendered = e.render().to_string();
            let _ = if code == 0 { out.write_all(rendered.as_bytes()) } else { err.write_all(rendered.as_bytes()) };
            if code != 0 {
                let msg = rendered.lines().next().unwrap_or_default().to_owned();
                let _ = writeln!(err, "{}", json!({ "verb": null, "status": "error", "exit_code": code, "message": msg }));
            }
            return code;
        }
    };
    let name = verb(&cli.command);
    let result = match cli.command {
        Command::Build(a) => build(a, out),
        Command::Cost(a) => cost(a, out, err),
        Command::Search(a) => search(a, out),
        Command::Pareto(a) => pareto(a, out),
        Command::EvalPq(a) => eval_pq(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Latency(a) => latency(a, out),
        Command::Augment(a) => augment_cmd(a, out),
    };
    let _ = out.flush();
    match result {
        Ok(mut summary) => {
            summary["verb"] = json!(name);
            summary["status"] = json!("ok");
            let _ = writeln!(err, "{summary}");
            0
        }
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message());
            let _ = writeln!(
                err,
                "{}",
                json!({ "verb": name, "status": "error", "exit_code": f.code(), "message": f.message() })
            );
            f.code()
        }
    }
}
