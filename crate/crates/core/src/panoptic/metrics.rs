use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{Meta, PanopticMap, VOID};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassStats {
    pub iou_sum: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Ground truth has at least one segment of this class.
    pub in_gt: bool,
}

impl ClassStats {
    pub fn pq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 { 0.0 } else { self.iou_sum / denom }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 { 0.0 } else { self.iou_sum / self.tp as f64 }
    }

    pub fn rq(&self) -> f64 {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 { 0.0 } else { self.tp as f64 / denom }
    }

    fn merge(&mut self, o: &ClassStats) {
        self.iou_sum += o.iou_sum;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.in_gt |= o.in_gt;
    }
}

/// Per-class tallies; merging across images is associative.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PqTally {
    pub per_class: BTreeMap<u16, ClassStats>,
}

impl PqTally {
    pub fn merge(&mut self, other: &PqTally) {
        for (c, s) in &other.per_class {
            self.per_class.entry(*c).or_default().merge(s);
        }
    }

    /// Segment matching for one image pair.
    pub fn from_pair(pred: &PanopticMap, gt: &PanopticMap, meta: &Meta) -> Result<Self> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::contract(format!(
                "pred {}x{} vs gt {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for m in [pred, gt] {
            if let Some(&c) = m.class.iter().find(|&&c| c != VOID && !meta.contains(c)) {
                return Err(Error::NotFound(format!("class id {c} not in category metadata")));
            }
        }
        let gt_seg = gt.segments();
        let pred_seg = pred.segments();
        let mut inter: BTreeMap<((u16, u16), (u16, u16)), usize> = BTreeMap::new();
        let mut pred_void: BTreeMap<(u16, u16), usize> = BTreeMap::new();
        for p in 0..pred.len() {
            if pred.class[p] == VOID {
                continue;
            }
            let ps = (pred.class[p], pred.instance[p]);
            if gt.class[p] == VOID {
                *pred_void.entry(ps).or_insert(0) += 1;
            } else {
                *inter.entry(((gt.class[p], gt.instance[p]), ps)).or_insert(0) += 1;
            }
        }

        let mut t = PqTally::default();
        let mut matched_pred = BTreeSet::new();
        for (&gs, &ga) in &gt_seg {
            let st = t.per_class.entry(gs.0).or_default();
            st.in_gt = true;
            let hit = inter
                .range((gs, (0, 0))..=(gs, (u16::MAX, u16::MAX)))
                .filter(|((_, ps), _)| ps.0 == gs.0)
                .find_map(|((_, ps), &i)| {
                    let pa = pred_seg[ps];
                    let union = pa + ga - i - pred_void.get(ps).copied().unwrap_or(0);
                    let iou = i as f64 / union as f64;
                    (iou > 0.5).then_some((*ps, iou))
                });
            match hit {
                Some((ps, iou)) => {
                    st.tp += 1;
                    st.iou_sum += iou;
                    matched_pred.insert(ps);
                }
                None => st.fn_ += 1,
            }
        }
        for (ps, &pa) in &pred_seg {
            if matched_pred.contains(ps) {
                continue;
            }
            let void = pred_void.get(ps).copied().unwrap_or(0);
            if 2 * void > pa {
                continue;
            }
            t.per_class.entry(ps.0).or_default().fp += 1;
        }
        Ok(t)
    }

    pub fn finish(&self, meta: &Meta) -> Result<PqResult> {
        let mut sums = [(0.0, 0.0, 0.0, 0usize); 3];
        for (&c, s) in &self.per_class {
            if !s.in_gt {
                continue;
            }
            let group = if meta.is_thing(c)? { 1 } else { 2 };
            for g in [0, group] {
                sums[g].0 += s.pq();
                sums[g].1 += s.sq();
                sums[g].2 += s.rq();
                sums[g].3 += 1;
            }
        }
        let mean = |i: usize, f: fn(&(f64, f64, f64, usize)) -> f64| {
            (sums[i].3 > 0).then(|| f(&sums[i]) / sums[i].3 as f64)
        };
        Ok(PqResult {
            per_class: self.per_class.clone(),
            pq: mean(0, |s| s.0).unwrap_or(0.0),
            sq: mean(0, |s| s.1).unwrap_or(0.0),
            rq: mean(0, |s| s.2).unwrap_or(0.0),
            pq_things: mean(1, |s| s.0),
            pq_stuff: mean(2, |s| s.0),
            classes: sums[0].3,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PqResult {
    pub per_class: BTreeMap<u16, ClassStats>,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    /// `None` when ground truth has no thing (stuff) class.
    pub pq_things: Option<f64>,
    pub pq_stuff: Option<f64>,
    /// Classes averaged over.
    pub classes: usize,
}

/// Panoptic quality of one prediction. Same-class segments match when
/// their IoU exceeds 0.5, with GT VOID pixels left out of the union;
/// unmatched predictions lying mostly on GT VOID are not false positives.
/// Averages run over classes present in the ground truth.
pub fn pq(pred: &PanopticMap, gt: &PanopticMap, meta: &Meta) -> Result<PqResult> {
    PqTally::from_pair(pred, gt, meta)?.finish(meta)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouResult {
    /// `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in the ground truth.
    pub mean: f64,
}

/// Per-class IoU of semantic images, GT VOID pixels ignored.
pub fn miou(pred: &[u16], gt: &[u16], num_classes: usize) -> Result<MiouResult> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!("pred has {} pixels, gt {}", pred.len(), gt.len())));
    }
    let mut inter = vec![0usize; num_classes];
    let mut p_area = vec![0usize; num_classes];
    let mut g_area = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == VOID {
            continue;
        }
        let (p, g) = (usize::from(p), usize::from(g));
        if g < num_classes {
            g_area[g] += 1;
        }
        if p < num_classes {
            p_area[p] += 1;
            if p == g {
                inter[p] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let union = p_area[c] + g_area[c] - inter[c];
            (union > 0).then(|| inter[c] as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = (0..num_classes).filter(|&c| g_area[c] > 0).map(|c| per_class[c].unwrap_or(0.0)).collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(MiouResult { per_class, mean })
}
