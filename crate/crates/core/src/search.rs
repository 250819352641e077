//! Discretized search spaces, candidate evaluation and Pareto extraction.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{build_plan, ArchSpec};
use crate::cost::cost_report;
use crate::error::{Error, Result};
use crate::network::{instantiate, Network};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpaceKind {
    /// `{0.25, 0.5, 1} x {0.25, 0.35, 0.5, 0.75, 1} x {0.35, 0.75, 1}`,
    /// separable heads.
    Fast,
    /// `{1} x {1, 1.5, 2} x {1, 2, 3, 4, 5, 5.5, 6}`.
    Strong,
}

impl std::str::FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(SpaceKind::Fast),
            "strong" => Ok(SpaceKind::Strong),
            _ => Err(Error::invalid(format!("unknown search space `{s}` (fast|strong)"))),
        }
    }
}

/// All specs of a space in lexicographic `(w1, w2, l)` order.
pub fn enumerate_space(kind: SpaceKind) -> Vec<ArchSpec> {
    let (w1s, w2s, ls, sep): (&[f64], &[f64], &[f64], bool) = match kind {
        SpaceKind::Fast => (&[0.25, 0.5, 1.0], &[0.25, 0.35, 0.5, 0.75, 1.0], &[0.35, 0.75, 1.0], true),
        SpaceKind::Strong => (&[1.0], &[1.0, 1.5, 2.0], &[1.0, 2.0, 3.0, 4.0, 5.0, 5.5, 6.0], false),
    };
    let mut out = Vec::with_capacity(w1s.len() * w2s.len() * ls.len());
    for &w1 in w1s {
        for &w2 in w2s {
            for &l in ls {
                out.push(ArchSpec::new(w1, w2, l).with_sep_conv_head(sep));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub label: String,
    /// Absent for reference backbones outside the family.
    pub spec: Option<ArchSpec>,
    pub params: Option<u64>,
    pub madds: Option<u64>,
    pub latency_ms: Option<f64>,
    pub quality: Option<f64>,
    /// Oracle failures, if any.
    pub error: Option<String>,
}

impl Candidate {
    pub fn from_spec(spec: ArchSpec) -> Self {
        Self {
            label: spec.name(),
            spec: Some(spec),
            params: None,
            madds: None,
            latency_ms: None,
            quality: None,
            error: None,
        }
    }

    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Params => self.params.map(|v| v as f64),
            Metric::Madds => self.madds.map(|v| v as f64),
            Metric::LatencyMs => self.latency_ms,
            Metric::Quality => self.quality,
        }
    }

    /// Spec order first; specless candidates sort after, by label.
    pub fn order(&self, other: &Self) -> Ordering {
        match (&self.spec, &other.spec) {
            (Some(a), Some(b)) => a.cmp_key(b).then_with(|| self.label.cmp(&other.label)),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => self.label.cmp(&other.label),
        }
    }

    fn push_error(&mut self, e: String) {
        self.error = Some(match self.error.take() {
            Some(prev) => format!("{prev}; {e}"),
            None => e,
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Params,
    Madds,
    LatencyMs,
    Quality,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Params => "params",
            Metric::Madds => "madds",
            Metric::LatencyMs => "latency_ms",
            Metric::Quality => "quality",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "params" => Ok(Metric::Params),
            "madds" => Ok(Metric::Madds),
            "latency_ms" => Ok(Metric::LatencyMs),
            "quality" => Ok(Metric::Quality),
            _ => Err(Error::invalid(format!("unknown metric `{s}`"))),
        }
    }
}

pub type Oracle<'a, T> = Box<dyn Fn(&ArchSpec) -> Result<T> + Send + Sync + 'a>;

/// Per-spec metric sources. Missing oracles leave their metric absent.
#[derive(Default)]
pub struct Oracles<'a> {
    /// `(params, madds)`.
    pub cost: Option<Oracle<'a, (u64, u64)>>,
    pub latency: Option<Oracle<'a, f64>>,
    /// `None` when the spec has no known quality.
    pub quality: Option<Oracle<'a, Option<f64>>>,
}

/// Analytical cost at a fixed input size.
pub fn cost_oracle<'a>(h: usize, w: usize) -> Oracle<'a, (u64, u64)> {
    Box::new(move |spec| {
        let r = cost_report(&build_plan(spec)?, h, w)?;
        Ok((r.total_params, r.total_madds))
    })
}

/// Quality looked up by `(w1, w2, l)`.
pub fn quality_oracle<'a>(rows: Vec<QualityRow>) -> Oracle<'a, Option<f64>> {
    Box::new(move |spec| {
        Ok(rows
            .iter()
            .find(|r| r.w1 == spec.w1 && r.w2 == spec.w2 && r.l == spec.l)
            .map(|r| r.quality))
    })
}

/// Measured forward latency of a freshly instantiated network.
pub fn latency_oracle<'a>(h: usize, w: usize, warmup: usize, iters: usize, seed: u64) -> Oracle<'a, f64> {
    Box::new(move |spec| {
        let net = instantiate(&build_plan(spec)?, seed)?;
        measure_latency(&net, h, w, warmup, iters)
    })
}

/// One candidate per spec, in input order. Cost and quality run in
/// parallel; latency runs afterwards, one spec at a time.
pub fn evaluate_candidates(specs: &[ArchSpec], oracles: &Oracles<'_>) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = specs
        .par_iter()
        .map(|spec| {
            let mut c = Candidate::from_spec(spec.clone());
            if let Some(f) = &oracles.cost {
                match f(spec) {
                    Ok((p, m)) => {
                        c.params = Some(p);
                        c.madds = Some(m);
                    }
                    Err(e) => c.push_error(format!("cost: {e}")),
                }
            }
            if let Some(f) = &oracles.quality {
                match f(spec) {
                    Ok(q) => c.quality = q,
                    Err(e) => c.push_error(format!("quality: {e}")),
                }
            }
            c
        })
        .collect();
    if let Some(f) = &oracles.latency {
        for c in &mut out {
            let spec = c.spec.clone().expect("built from a spec");
            match f(&spec) {
                Ok(ms) => c.latency_ms = Some(ms),
                Err(e) => c.push_error(format!("latency: {e}")),
            }
        }
    }
    out
}

fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 >= b.1 && (a.0 < b.0 || a.1 > b.1)
}

/// Candidates not dominated in (lower cost, higher quality), ascending by
/// cost. Exact duplicates keep the candidate that sorts first.
pub fn pareto_front(candidates: &[Candidate], cost: Metric, quality: Metric) -> Result<Vec<Candidate>> {
    let mut keyed = Vec::with_capacity(candidates.len());
    for c in candidates {
        let get = |m: Metric| {
            c.metric(m)
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::invalid(format!("candidate {} has no {}", c.label, m.name())))
        };
        keyed.push(((get(cost)?, get(quality)?), c));
    }
    keyed.sort_by(|(a, ca), (b, cb)| {
        a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)).then_with(|| ca.order(cb))
    });
    let mut best = f64::NEG_INFINITY;
    let mut front = Vec::new();
    for ((_, q), c) in keyed {
        if q > best {
            best = q;
            front.push(c.clone());
        }
    }
    Ok(front)
}

/// Pairwise check used by tests and the acceptance suite: frontier members
/// are undominated and every other candidate is dominated by a member or
/// duplicates one.
pub fn is_sound_front(all: &[Candidate], front: &[Candidate], cost: Metric, quality: Metric) -> bool {
    let key = |c: &Candidate| (c.metric(cost).unwrap_or(f64::NAN), c.metric(quality).unwrap_or(f64::NAN));
    let undominated = front.iter().all(|f| all.iter().all(|c| !dominates(key(c), key(f))));
    let covered = all.iter().all(|c| {
        front.iter().any(|f| f == c || dominates(key(f), key(c)) || key(f) == key(c))
    });
    undominated && covered
}

static MEASURE: Mutex<()> = Mutex::new(());

/// Median wall-clock forward time in milliseconds over `iters` runs after
/// `warmup` discarded runs. Measurements never overlap within a process.
pub fn measure_latency(net: &Network, h: usize, w: usize, warmup: usize, iters: usize) -> Result<f64> {
    if iters == 0 {
        return Err(Error::invalid("latency iters must be >= 1"));
    }
    let x = Tensor::randn(Shape::new(1, 3, h, w), 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let _guard = MEASURE.lock().unwrap_or_else(|p| p.into_inner());
    for _ in 0..warmup {
        net.forward(&x)?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        net.forward(&x)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CandidateRecord {
    w1: Option<f64>,
    w2: Option<f64>,
    l: Option<f64>,
    params: Option<u64>,
    madds: Option<u64>,
    latency_ms: Option<f64>,
    quality: Option<f64>,
    name: String,
}

/// `w1,w2,l,params,madds,latency_ms,quality,name`; absent values are empty.
pub fn write_candidates_csv<W: Write>(w: W, cands: &[Candidate]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for c in cands {
        wr.serialize(CandidateRecord {
            w1: c.spec.as_ref().map(|s| s.w1),
            w2: c.spec.as_ref().map(|s| s.w2),
            l: c.spec.as_ref().map(|s| s.l),
            params: c.params,
            madds: c.madds,
            latency_ms: c.latency_ms,
            quality: c.quality,
            name: c.label.clone(),
        })?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn parse_candidates_csv<R: Read>(r: R) -> Result<Vec<Candidate>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.deserialize() {
        let rec: CandidateRecord = rec?;
        let spec = match (rec.w1, rec.w2, rec.l) {
            (Some(a), Some(b), Some(c)) => Some(ArchSpec::new(a, b, c)),
            (None, None, None) => None,
            _ => return Err(Error::Parse(format!("row `{}` has a partial (w1, w2, l)", rec.name))),
        };
        let label = if rec.name.is_empty() {
            spec.as_ref().map(ArchSpec::name).unwrap_or_default()
        } else {
            rec.name
        };
        if label.is_empty() {
            return Err(Error::Parse("candidate row without spec or name".into()));
        }
        for (n, v) in [("latency_ms", rec.latency_ms), ("quality", rec.quality)] {
            if v.is_some_and(|v| !(v.is_finite() && v >= 0.0)) {
                return Err(Error::Parse(format!("row `{label}`: {n} must be finite and >= 0")));
            }
        }
        out.push(Candidate {
            label,
            spec,
            params: rec.params,
            madds: rec.madds,
            latency_ms: rec.latency_ms,
            quality: rec.quality,
            error: None,
        });
    }
    Ok(out)
}

pub fn read_candidates_csv(path: &Path) -> Result<Vec<Candidate>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_candidates_csv(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub w1: f64,
    pub w2: f64,
    pub l: f64,
    pub quality: f64,
    #[serde(default)]
    pub name: Option<String>,
}

pub fn parse_quality_csv<R: Read>(r: R) -> Result<Vec<QualityRow>> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<std::result::Result<Vec<QualityRow>, _>>()?)
}

pub fn read_quality_csv(path: &Path) -> Result<Vec<QualityRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_quality_csv(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn space_sizes_and_order() {
        let fast = enumerate_space(SpaceKind::Fast);
        assert_eq!(fast.len(), 45);
        assert_eq!((fast[0].w1, fast[0].w2, fast[0].l), (0.25, 0.25, 0.35));
        assert!(fast.windows(2).all(|w| w[0].cmp_key(&w[1]) == Ordering::Less));
        assert_eq!(enumerate_space(SpaceKind::Strong).len(), 21);
    }

    #[test]
    fn strong_params_increase_with_depth() {
        let specs = enumerate_space(SpaceKind::Strong);
        let oracles = Oracles { cost: Some(cost_oracle(641, 641)), ..Default::default() };
        let c = evaluate_candidates(&specs, &oracles);
        assert_eq!(c.len(), 21);
        for w in c.windows(2) {
            let (a, b) = (w[0].spec.as_ref().unwrap(), w[1].spec.as_ref().unwrap());
            if a.w2 == b.w2 {
                assert!(w[0].params < w[1].params);
            }
        }
        assert_eq!(c, evaluate_candidates(&specs, &oracles));
    }

    #[test]
    fn quality_from_table() {
        let rows = parse_quality_csv(
            "w1,w2,l,quality,name\n0.25,0.25,0.75,31.5,\n0.25,0.35,0.75,34.3,\n0.25,0.35,1,36.0,\n0.25,0.5,1,38.1,\n0.25,0.75,1,40.1,\n"
                .as_bytes(),
        )
        .unwrap();
        let oracles = Oracles { quality: Some(quality_oracle(rows)), ..Default::default() };
        let c = evaluate_candidates(&enumerate_space(SpaceKind::Fast), &oracles);
        assert_eq!(c.iter().filter(|c| c.quality.is_some()).count(), 5);
    }

    #[test]
    fn oracle_failure_is_per_candidate() {
        let oracles = Oracles {
            cost: Some(Box::new(|s: &ArchSpec| {
                if s.l > 0.5 { Err(Error::invalid("boom")) } else { Ok((1, 1)) }
            })),
            ..Default::default()
        };
        let c = evaluate_candidates(&enumerate_space(SpaceKind::Fast), &oracles);
        assert_eq!(c.iter().filter(|c| c.error.is_some()).count(), 30);
        assert_eq!(c.iter().filter(|c| c.params.is_some()).count(), 15);
    }

    fn cand(label: &str, cost: f64, q: f64) -> Candidate {
        Candidate {
            label: label.into(),
            spec: None,
            params: None,
            madds: None,
            latency_ms: Some(cost),
            quality: Some(q),
            error: None,
        }
    }

    #[test]
    fn single_and_missing() {
        let one = vec![cand("a", 1.0, 1.0)];
        assert_eq!(pareto_front(&one, Metric::LatencyMs, Metric::Quality).unwrap(), one);
        let mut bad = cand("b", 1.0, 1.0);
        bad.quality = None;
        let err = pareto_front(&[bad], Metric::LatencyMs, Metric::Quality).unwrap_err();
        assert!(err.to_string().contains("quality"));
    }

    #[test]
    fn duplicate_keeps_smaller_spec() {
        let mk = |w2| {
            let mut c = Candidate::from_spec(ArchSpec::new(0.25, w2, 1.0));
            c.latency_ms = Some(5.0);
            c.quality = Some(3.0);
            c
        };
        let f = pareto_front(&[mk(0.5), mk(0.35)], Metric::LatencyMs, Metric::Quality).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].spec.as_ref().unwrap().w2, 0.35);
    }

    #[test]
    fn random_fronts_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for round in 0..20 {
            let n = 1 + round * 10;
            let cands: Vec<Candidate> = (0..n)
                .map(|i| cand(&format!("c{i:03}"), rng.random_range(0..30) as f64, rng.random_range(0..30) as f64))
                .collect();
            let front = pareto_front(&cands, Metric::LatencyMs, Metric::Quality).unwrap();
            let key = |c: &Candidate| (c.latency_ms.unwrap(), c.quality.unwrap());
            let mut brute: Vec<&Candidate> = cands
                .iter()
                .filter(|c| !cands.iter().any(|o| dominates(key(o), key(c))))
                .collect();
            brute.sort_by(|a, b| key(*a).0.total_cmp(&key(*b).0).then(a.label.cmp(&b.label)));
            brute.dedup_by(|b, a| key(*a) == key(*b));
            assert_eq!(front.iter().collect::<Vec<_>>(), brute);
            assert!(is_sound_front(&cands, &front, Metric::LatencyMs, Metric::Quality));
            assert!(front.windows(2).all(|w| key(&w[0]).0 < key(&w[1]).0 && key(&w[0]).1 < key(&w[1]).1));
        }
    }

    #[test]
    fn candidates_csv_round_trip() {
        let mut c = evaluate_candidates(
            &enumerate_space(SpaceKind::Strong)[..3],
            &Oracles { cost: Some(cost_oracle(65, 65)), ..Default::default() },
        );
        c.push(cand("MobileNetv3", 38.0, 30.0));
        let mut buf = Vec::new();
        write_candidates_csv(&mut buf, &c).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("w1,w2,l,params,madds,latency_ms,quality,name\n"));
        let back = parse_candidates_csv(buf.as_slice()).unwrap();
        let mut again = Vec::new();
        write_candidates_csv(&mut again, &back).unwrap();
        assert_eq!(buf, again);
        assert_eq!(back[3].label, "MobileNetv3");
        assert!(back[3].spec.is_none());
    }

    #[test]
    fn latency_is_positive_and_grows() {
        let plan = build_plan(&ArchSpec::new(0.25, 0.25, 0.35).with_channel_cap(Some(16)).with_num_classes(3)).unwrap();
        let net = instantiate(&plan, 0).unwrap();
        let small = measure_latency(&net, 65, 65, 1, 5).unwrap();
        let large = measure_latency(&net, 129, 129, 1, 5).unwrap();
        assert!(small > 0.0);
        assert!(large >= small, "{large} < {small}");
        assert!(measure_latency(&net, 65, 65, 0, 0).is_err());
    }
}
