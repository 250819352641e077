//! Reference PQ matcher that tries every class-consistent pairing of
//! segments. Exponential in the segments per class; meant for small maps
//! in cross-checks.

use std::collections::BTreeSet;

use super::{Meta, PanopticMap, PqResult, PqTally, VOID};
use crate::error::{Error, Result};

/// Exhaustive matching: try every injective pairing of same-class
/// segments and keep the one with the most IoU > 0.5 pairs.
pub fn pq_exhaustive(pred: &PanopticMap, gt: &PanopticMap, meta: &Meta) -> Result<PqResult> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::contract("pred and gt sizes differ"));
    }
    let gs: Vec<(u16, u16)> = gt.segments().into_keys().collect();
    let ps: Vec<(u16, u16)> = pred.segments().into_keys().collect();
    let pix = |m: &PanopticMap, s: (u16, u16)| -> Vec<bool> {
        (0..m.len()).map(|p| (m.class[p], m.instance[p]) == s).collect()
    };
    let iou = |g: (u16, u16), p: (u16, u16)| -> f64 {
        let (gm, pm) = (pix(gt, g), pix(pred, p));
        let mut i = 0;
        let mut u = 0;
        for k in 0..gt.len() {
            if gt.class[k] == VOID {
                continue;
            }
            i += usize::from(gm[k] && pm[k]);
            u += usize::from(gm[k] || pm[k]);
        }
        if u == 0 { 0.0 } else { i as f64 / u as f64 }
    };
    let mut tally = PqTally::default();
    let classes: BTreeSet<u16> = gs.iter().chain(&ps).map(|s| s.0).collect();
    for c in classes {
        let g: Vec<_> = gs.iter().copied().filter(|s| s.0 == c).collect();
        let p: Vec<_> = ps.iter().copied().filter(|s| s.0 == c).collect();
        let table: Vec<Vec<f64>> = g.iter().map(|&a| p.iter().map(|&b| iou(a, b)).collect()).collect();
        let mut best: (usize, Vec<Option<usize>>) = (0, vec![None; g.len()]);
        let mut cur = vec![None; g.len()];
        fn search(
            gi: usize,
            used: &mut Vec<bool>,
            cur: &mut Vec<Option<usize>>,
            table: &[Vec<f64>],
            best: &mut (usize, Vec<Option<usize>>),
        ) {
            if gi == cur.len() {
                let n = cur.iter().enumerate().filter(|(g, p)| p.is_some_and(|p| table[*g][p] > 0.5)).count();
                if n > best.0 {
                    *best = (n, cur.clone());
                }
                return;
            }
            search(gi + 1, used, cur, table, best);
            for pi in 0..used.len() {
                if !used[pi] {
                    used[pi] = true;
                    cur[gi] = Some(pi);
                    search(gi + 1, used, cur, table, best);
                    cur[gi] = None;
                    used[pi] = false;
                }
            }
        }
        search(0, &mut vec![false; p.len()], &mut cur, &table, &mut best);
        let st = tally.per_class.entry(c).or_default();
        st.in_gt = !g.is_empty();
        let mut matched = vec![false; p.len()];
        for (gi, m) in best.1.iter().enumerate() {
            match m {
                Some(pi) if table[gi][*pi] > 0.5 => {
                    st.tp += 1;
                    st.iou_sum += table[gi][*pi];
                    matched[*pi] = true;
                }
                _ => st.fn_ += 1,
            }
        }
        for (pi, &s) in p.iter().enumerate() {
            if matched[pi] {
                continue;
            }
            let area = pred.class.iter().zip(&pred.instance).filter(|&(&a, &b)| (a, b) == s).count();
            let void = (0..pred.len())
                .filter(|&k| (pred.class[k], pred.instance[k]) == s && gt.class[k] == VOID)
                .count();
            if 2 * void <= area {
                st.fp += 1;
            }
        }
    }
    tally.per_class.retain(|_, s| s.in_gt || s.fp > 0);
    tally.finish(meta)
}

