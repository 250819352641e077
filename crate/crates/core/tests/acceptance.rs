//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swidernet::arch::{build_plan, count_layers, ArchSpec};
use swidernet::augment::{apply_op, apply_subpolicy, sample_subpolicy, scale_magnitudes, solarize_threshold, AugPolicy, Image, OpKind};
use swidernet::autodiff::{check_op, CheckedOp};
use swidernet::blocks::{
    drop_path, global_context, residual_branch, sac, BlockKind, BlockPlan, DropMode, ResidualParams, SacParams,
    SeParams,
};
use swidernet::cost::{cost_report, se_param_delta, Deviation};
use swidernet::network::instantiate;
use swidernet::panoptic::oracle::pq_exhaustive;
use swidernet::panoptic::{fuse, group_instances, pq, stuff_area_filter, CategoryInfo, GroupParams, Meta, PanopticMap, VOID};
use swidernet::search::{enumerate_space, pareto_front, read_candidates_csv, Metric, SpaceKind};
use swidernet::tensor::{conv2d, ConvKernel, Shape, Tensor};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(d: &Deviation, tol: f64) -> (bool, String) {
    let ok = d.relative <= tol;
    let line = format!(
        "{}: ours {:.4}, reference {:.4}, deviation {:+.2}% (tolerance {:.0}%)",
        d.metric,
        d.ours,
        d.reference,
        100.0 * (d.ours - d.reference) / d.reference,
        100.0 * tol
    );
    (ok, line)
}

fn layer_formula() -> Check {
    let widths = [0.25, 1.0, 2.0];
    let mut n = 0;
    for &w1 in &widths {
        for &w2 in &widths {
            for l in 1..=6 {
                let plan = build_plan(&ArchSpec::new(w1, w2, l as f64)).map_err(err)?;
                let got = count_layers(&plan);
                ensure(got == 7 + 33 * l, format!("({w1}, {w2}, {l}) has {got} layers, expected {}", 7 + 33 * l))?;
                n += 1;
            }
        }
    }
    Ok(format!("{n} specs satisfy layers = 7 + 33 l"))
}

fn space_sizes() -> Check {
    let (f, s) = (enumerate_space(SpaceKind::Fast).len(), enumerate_space(SpaceKind::Strong).len());
    ensure(f == 45 && s == 21, format!("fast {f}, strong {s}"))?;
    Ok("fast 45, strong 21".into())
}

fn pareto_reproduction() -> Check {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/coco_runtime.csv");
    let cands = read_candidates_csv(&path).map_err(err)?;
    let front = pareto_front(&cands, Metric::LatencyMs, Metric::Quality).map_err(err)?;
    let mut got: Vec<String> = front.iter().map(|c| c.label.clone()).collect();
    let mut want: Vec<String> = cands.iter().filter(|c| c.spec.is_some()).map(|c| c.label.clone()).collect();
    got.sort();
    want.sort();
    ensure(want.len() == 5, format!("fixture has {} SWideRNet rows", want.len()))?;
    ensure(got == want, format!("frontier {got:?}, expected {want:?}"))?;
    ensure(
        front.iter().all(|c| c.spec.as_ref().is_some_and(|s| s.w1 == 0.25)),
        "a frontier member has w1 != 0.25",
    )?;
    Ok(format!("frontier = {} SWideRNet rows, all w1 = 0.25", front.len()))
}

fn cost_vs_reference() -> Check {
    let report = |spec: ArchSpec| {
        let plan = build_plan(&spec).map_err(err)?;
        cost_report(&plan, 641, 641).map_err(err)
    };
    let base = report(ArchSpec::new(1.0, 1.0, 1.0))?;
    let wide = report(ArchSpec::new(1.0, 2.0, 1.0))?;
    let se_delta = se_param_delta(&build_plan(&ArchSpec::new(1.0, 1.0, 1.0)).map_err(err)?) as f64 / 1e6;
    let fast = |w2| report(ArchSpec::new(0.25, w2, 1.0).with_sep_conv_head(true));
    let (f35, f50) = (fast(0.35)?, fast(0.5)?);
    let checks = [
        (Deviation::new("params_m (1,1,1)", base.params_m(), 168.77), 0.15),
        (Deviation::new("madds_b (1,1,1)", base.madds_b(), 680.79), 0.20),
        (Deviation::new("params ratio (1,2,1)/(1,1,1)", wide.params_m() / base.params_m(), 3.48), 0.10),
        (Deviation::new("SE param delta (M)", se_delta, 17.51), 0.25),
        (Deviation::new("fast madds ratio (0.25,0.5,1)/(0.25,0.35,1)", f50.madds_b() / f35.madds_b(), 1.79), 0.20),
    ];
    let mut bad = Vec::new();
    for (d, tol) in &checks {
        let (ok, line) = within(d, *tol);
        println!("    {line}");
        if !ok {
            bad.push(d.metric.clone());
        }
    }
    ensure(bad.is_empty(), format!("out of tolerance: {}", bad.join(", ")))?;
    Ok(format!("{} deviations within tolerance", checks.len()))
}

fn gradient_checks() -> Check {
    let mut worst = (0.0f64, "");
    for op in CheckedOp::ALL {
        for seed in 0..5 {
            let r = check_op(op, seed, 1e-4).map_err(err)?;
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, op.name());
            }
            ensure(
                r.max_rel_error < 1e-4,
                format!("{} seed {seed}: max relative error {:.3e}", op.name(), r.max_rel_error),
            )?;
        }
    }
    Ok(format!(
        "{} ops x 5 seeds, worst relative error {:.2e} ({})",
        CheckedOp::ALL.len(),
        worst.0,
        worst.1
    ))
}

/// Rate-r kernel spelled out as a dense kernel with zeros between taps.
fn zero_inserted(k: &ConvKernel<f64>) -> ConvKernel<f64> {
    let s = k.weight.shape();
    let r = k.rate;
    let big = Shape::new(s.n, s.c, r * (s.h - 1) + 1, r * (s.w - 1) + 1);
    let w = Tensor::from_fn(big, |o, i, y, x| {
        if y % r == 0 && x % r == 0 {
            k.weight.at(o, i, y / r, x / r)
        } else {
            0.0
        }
    });
    ConvKernel::new(w, k.stride, 1).unwrap()
}

fn block_reductions() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let x = Tensor::<f64>::randn(Shape::new(1, 3, 11, 11), 1.0, &mut rng);
    let mut p = SacParams::<f64>::random(3, 4, 1, &mut rng).map_err(err)?;
    let mut sac_err = 0.0f64;
    for (bias, rate) in [(-1e4, 1), (1e4, 3)] {
        p.switch.weight = Tensor::zeros(p.switch.weight.shape());
        p.switch.bias = bias;
        let pre = global_context(&x, &p.pre_context).map_err(err)?;
        let k = p.shared_conv.clone().with_rate(rate).map_err(err)?;
        let single = global_context(&conv2d(&pre, &k).map_err(err)?, &p.post_context).map_err(err)?;
        sac_err = sac_err.max(sac(&x, &p).map_err(err)?.max_abs_diff(&single).map_err(err)?);
    }
    ensure(sac_err < 1e-6, format!("SAC forced switch differs by {sac_err:e}"))?;

    let plan = BlockPlan {
        kind: BlockKind::Bottleneck,
        in_channels: 4,
        mid_channels: 2,
        inner_channels: 4,
        out_channels: 8,
        stride: 1,
        rate: 2,
        multigrid: 1,
        use_se: true,
        use_sac: false,
        survival_rate: 1.0,
    };
    let mut params = ResidualParams::<f64>::init(&plan, &mut rng).map_err(err)?;
    params.se = Some(SeParams { weight: Tensor::zeros(Shape::new(8, 8, 1, 1)), bias: None });
    let plain_plan = BlockPlan { use_se: false, ..plan.clone() };
    let plain = ResidualParams { se: None, ..params.clone() };
    let xb = Tensor::<f64>::randn(Shape::new(2, 4, 7, 7), 1.0, &mut rng);
    let with_se = residual_branch(&xb, &plan, &params).map_err(err)?;
    let half = residual_branch(&xb, &plain_plan, &plain).map_err(err)?.scale(0.5);
    ensure(with_se == half, "SE with zero weight does not halve the branch exactly")?;

    let branch = Tensor::<f32>::randn(Shape::new(3, 4, 5, 5), 1.0, &mut rng);
    for rate in [0.2, 0.5, 0.9] {
        let y = drop_path(&branch, rate, DropMode::Inference, &mut rng).map_err(err)?;
        ensure(
            y.data().iter().zip(branch.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "drop path at inference is not a bit identity",
        )?;
    }

    let mut atrous_err = 0.0f64;
    for rate in 2..=4 {
        for stride in [1, 2] {
            let xa = Tensor::<f64>::randn(Shape::new(1, 2, 13, 12), 1.0, &mut rng);
            let k = ConvKernel::new(Tensor::randn(Shape::new(3, 2, 3, 3), 1.0, &mut rng), stride, rate).map_err(err)?;
            let a = conv2d(&xa, &k).map_err(err)?;
            let b = conv2d(&xa, &zero_inserted(&k)).map_err(err)?;
            atrous_err = atrous_err.max(a.max_abs_diff(&b).map_err(err)?);
        }
    }
    ensure(atrous_err < 1e-6, format!("atrous conv differs from zero-inserted kernel by {atrous_err:e}"))?;
    Ok(format!("SAC max diff {sac_err:.1e}, SE halving exact, drop path identity, atrous max diff {atrous_err:.1e}"))
}

fn small_meta() -> Meta {
    let cat = |class_id, isthing, name: &str| CategoryInfo { class_id, isthing, name: name.into() };
    Meta::new(vec![
        cat(0, false, "sky"),
        cat(1, false, "road"),
        cat(2, true, "car"),
        cat(3, true, "bus"),
        cat(4, true, "person"),
    ])
    .unwrap()
}

/// Blocky ground truth over 3 thing and 2 stuff classes with a noisy copy
/// as prediction, so IoUs land on both sides of 0.5.
fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (PanopticMap, PanopticMap) {
    let block = |rng: &mut ChaCha8Rng| -> (u16, u16) {
        match rng.random_range(0..8) {
            0 => (VOID, 0),
            1 | 2 => (rng.random_range(0..2), 0),
            _ => (rng.random_range(2..5), rng.random_range(1..4)),
        }
    };
    let bs = 4;
    let grid: Vec<(u16, u16)> = (0..(h / bs) * (w / bs)).map(|_| block(rng)).collect();
    let gpx: Vec<(u16, u16)> = (0..h * w).map(|p| grid[(p / w / bs) * (w / bs) + (p % w) / bs]).collect();
    let noise = rng.random_range(0.0..0.6);
    let ppx: Vec<(u16, u16)> = gpx.iter().map(|&g| if rng.random::<f64>() < noise { block(rng) } else { g }).collect();
    let mk = |px: Vec<(u16, u16)>| {
        let (c, i) = px.into_iter().unzip();
        PanopticMap::new(h, w, c, i).unwrap()
    };
    (mk(gpx), mk(ppx))
}

fn pq_oracle() -> Check {
    let meta = small_meta();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut matched = 0;
    for i in 0..200 {
        let (g, p) = random_pair(&mut rng, 16, 16);
        let fast = pq(&p, &g, &meta).map_err(err)?;
        let slow = pq_exhaustive(&p, &g, &meta).map_err(err)?;
        ensure(fast == slow, format!("pair {i}: PQ {} vs exhaustive {}", fast.pq, slow.pq))?;
        matched += fast.per_class.values().map(|s| s.tp).sum::<u64>();
    }
    let (g, _) = random_pair(&mut rng, 16, 16);
    let id = pq(&g, &g, &meta).map_err(err)?.pq;
    ensure(id == 1.0, format!("identity PQ {id}"))?;
    let gt = PanopticMap::new(1, 2, vec![2, 2], vec![1, 1]).map_err(err)?;
    let half = PanopticMap::new(1, 2, vec![2, 3], vec![1, 1]).map_err(err)?;
    let b = pq(&half, &gt, &meta).map_err(err)?.pq;
    ensure(b == 0.0, format!("IoU = 0.5 boundary gives PQ {b}"))?;
    Ok(format!("200 pairs equal the exhaustive oracle ({matched} matches), identity 1, boundary 0"))
}

fn stuff_rule() -> Check {
    let meta = small_meta();
    let (h, w) = (64, 64);
    let split = 2047;
    let class: Vec<u16> = (0..h * w).map(|p| if p < split { 0 } else { 1 }).collect();
    let m = PanopticMap::new(h, w, class, vec![0; h * w]).map_err(err)?;
    let f = stuff_area_filter(&m, &meta, 2048).map_err(err)?;
    ensure(f.class[..split].iter().all(|&c| c == VOID), "area 2047 survived threshold 2048")?;
    ensure(f.class[split..].iter().all(|&c| c == 1), "area 2049 removed at threshold 2048")?;
    let class: Vec<u16> = (0..h * w).map(|p| if p < 2048 { 0 } else { 1 }).collect();
    let m = PanopticMap::new(h, w, class, vec![0; h * w]).map_err(err)?;
    ensure(stuff_area_filter(&m, &meta, 2048).map_err(err)? == m, "area 2048 removed at threshold 2048")?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let px: Vec<(u16, u16)> = (0..h * w)
            .map(|_| match rng.random_range(0..6) {
                0 => (VOID, 0),
                1 | 2 => (rng.random_range(0..2), 0),
                _ => (rng.random_range(2..5), rng.random_range(1..6)),
            })
            .collect();
        let (c, i) = px.into_iter().unzip();
        let m = PanopticMap::new(h, w, c, i).map_err(err)?;
        for t in [1024, 2048, 4096] {
            let once = stuff_area_filter(&m, &meta, t).map_err(err)?;
            ensure(stuff_area_filter(&once, &meta, t).map_err(err)? == once, "filter is not idempotent")?;
            for p in 0..m.len() {
                if m.class[p] != VOID && meta.is_thing(m.class[p]).map_err(err)? {
                    ensure((once.class[p], once.instance[p]) == (m.class[p], m.instance[p]), "thing pixel changed")?;
                }
            }
        }
    }
    Ok("2047 removed, 2048 kept, idempotent on 100 maps, things untouched".into())
}

/// 133 categories, the first 80 things, COCO style.
fn coco_like_meta() -> Meta {
    Meta::new(
        (0..133u16)
            .map(|c| CategoryInfo { class_id: c, isthing: c < 80, name: format!("class{c}") })
            .collect(),
    )
    .unwrap()
}

fn smoke_once(meta: &Meta) -> Result<PanopticMap, String> {
    let plan = build_plan(&ArchSpec::new(0.25, 0.25, 0.35)).map_err(err)?;
    let net = instantiate(&plan, 0).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(Shape::new(1, 3, 65, 65), 1.0, &mut rng);
    let out = net.forward(&x).map_err(err)?;
    let sem: Vec<u16> = out.semantic_classes(0).into_iter().map(|c| c as u16).collect();
    let thing: Vec<bool> = sem.iter().map(|&c| meta.is_thing(c).unwrap_or(false)).collect();
    let inst = group_instances(&out.center_heatmap, &out.offsets, &thing, &GroupParams::default()).map_err(err)?;
    let fused = fuse(&sem, &inst, 65, 65, meta).map_err(err)?;
    stuff_area_filter(&fused, meta, 2048).map_err(err)
}

fn end_to_end() -> Check {
    let meta = coco_like_meta();
    let a = smoke_once(&meta)?;
    a.validate(&meta).map_err(err)?;
    ensure((a.height, a.width) == (65, 65), format!("map is {}x{}", a.height, a.width))?;
    let b = smoke_once(&meta)?;
    ensure(a == b, "two runs differ")?;
    Ok(format!("valid 65x65 map with {} segments, identical across runs", a.segments().len()))
}

fn augment_suite() -> Check {
    let policy = AugPolicy::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut counts = [0usize; 5];
    for _ in 0..10_000 {
        counts[sample_subpolicy(&policy, &mut rng) - 1] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / 10_000.0).collect();
    ensure(freqs.iter().all(|f| (0.18..=0.22).contains(f)), format!("frequencies {freqs:?}"))?;

    let img = Image::from_fn(17, 13, |y, x, c| ((y * 31 + x * 17 + c * 71) % 256) as u8);
    for k in [OpKind::Sharpness, OpKind::Brightness, OpKind::Contrast, OpKind::Color] {
        ensure(apply_op(&img, k, 1.0).map_err(err)? == img, format!("{k:?} at factor 1 is not identity"))?;
    }
    ensure(solarize_threshold(1.4) == 220, "Solarize 1.4 threshold is not 220")?;
    let px = Image::new(1, 3, vec![230, 220, 219, 0, 255, 100, 221, 1, 2]).map_err(err)?;
    let sol = apply_op(&px, OpKind::Solarize, 1.4).map_err(err)?;
    ensure(sol.data == vec![25, 35, 219, 0, 0, 100, 34, 1, 2], format!("Solarize(1.4) gave {:?}", sol.data))?;

    let scaled = scale_magnitudes(&policy, 5.0).map_err(err)?;
    let m = scaled.subpolicies[0].ops[0].magnitude;
    ensure((m - 7.0).abs() < 1e-12, format!("Sharpness 1.4 x 5 = {m}"))?;

    let never = policy.subpolicies[1];
    let mut no_first = never;
    no_first.ops[1].prob = 0.0;
    for _ in 0..100 {
        ensure(apply_subpolicy(&img, &no_first, &mut rng).map_err(err)? == img, "probability-0 op fired")?;
    }
    Ok(format!("frequencies {freqs:.3?}, identities hold, threshold 220, 1.4 x 5 = 7.0"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("layer formula 7 + 33 l", layer_formula),
        ("search space sizes", space_sizes),
        ("COCO runtime Pareto frontier", pareto_reproduction),
        ("cost model vs reference", cost_vs_reference),
        ("gradient checks", gradient_checks),
        ("block reductions", block_reductions),
        ("PQ exhaustive oracle", pq_oracle),
        ("stuff area rule", stuff_rule),
        ("end-to-end smoke", end_to_end),
        ("augment suite", augment_suite),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = f();
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS criterion {}: {name} ({secs:.2}s): {detail}", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({secs:.2}s): {e}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
