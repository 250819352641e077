//! Panoptic post-processing: center-based instance grouping, semantic and
//! instance fusion, the stuff-area filter, and PQ / mIoU.

mod io;
mod metrics;
pub mod oracle;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{evaluate_dirs, read_meta, read_pan, write_meta, write_pan, PAN_MAGIC};
pub use metrics::{miou, pq, ClassStats, MiouResult, PqResult, PqTally};

/// Class id of unlabeled pixels.
pub const VOID: u16 = u16::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryInfo {
    pub class_id: u16,
    pub isthing: bool,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Meta {
    cats: BTreeMap<u16, CategoryInfo>,
}

impl Meta {
    pub fn new(cats: Vec<CategoryInfo>) -> Result<Self> {
        let mut m = BTreeMap::new();
        for c in cats {
            if c.class_id == VOID {
                return Err(Error::invalid(format!("class id {VOID} is reserved for VOID")));
            }
            if m.insert(c.class_id, c.clone()).is_some() {
                return Err(Error::invalid(format!("duplicate class id {}", c.class_id)));
            }
        }
        Ok(Self { cats: m })
    }

    pub fn categories(&self) -> impl Iterator<Item = &CategoryInfo> {
        self.cats.values()
    }

    pub fn is_thing(&self, class: u16) -> Result<bool> {
        self.cats
            .get(&class)
            .map(|c| c.isthing)
            .ok_or_else(|| Error::NotFound(format!("class id {class} not in category metadata")))
    }

    pub fn contains(&self, class: u16) -> bool {
        self.cats.contains_key(&class)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub class: Vec<u16>,
    pub instance: Vec<u16>,
}

impl PanopticMap {
    pub fn new(height: usize, width: usize, class: Vec<u16>, instance: Vec<u16>) -> Result<Self> {
        let n = height * width;
        if class.len() != n || instance.len() != n {
            return Err(Error::contract(format!(
                "panoptic map {height}x{width} needs {n} pixels, got {} classes and {} instances",
                class.len(),
                instance.len()
            )));
        }
        Ok(Self { height, width, class, instance })
    }

    pub fn void(height: usize, width: usize) -> Self {
        let n = height * width;
        Self { height, width, class: vec![VOID; n], instance: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }

    /// Pixel areas of all non-VOID `(class, instance)` segments.
    pub fn segments(&self) -> BTreeMap<(u16, u16), usize> {
        let mut m = BTreeMap::new();
        for (&c, &i) in self.class.iter().zip(&self.instance) {
            if c != VOID {
                *m.entry((c, i)).or_insert(0) += 1;
            }
        }
        m
    }

    /// Stuff and VOID pixels carry instance 0, thing pixels an instance
    /// of at least 1, and every class is known.
    pub fn validate(&self, meta: &Meta) -> Result<()> {
        for (p, (&c, &i)) in self.class.iter().zip(&self.instance).enumerate() {
            let ok = if c == VOID { i == 0 } else if meta.is_thing(c)? { i >= 1 } else { i == 0 };
            if !ok {
                return Err(Error::contract(format!("pixel {p}: class {c} with instance {i}")));
            }
        }
        Ok(())
    }

    pub fn non_void(&self) -> usize {
        self.class.iter().filter(|&&c| c != VOID).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    pub center_threshold: f32,
    pub nms_window: usize,
    pub top_k: usize,
}

impl Default for GroupParams {
    fn default() -> Self {
        Self { center_threshold: 0.1, nms_window: 7, top_k: 200 }
    }
}

/// Center pixels `(y, x, score)` in rank order: local maxima over a
/// `nms_window` neighborhood at or above the threshold, best `top_k`.
pub fn find_centers(heat: &[f32], h: usize, w: usize, params: &GroupParams) -> Vec<(usize, usize, f32)> {
    let r = params.nms_window / 2;
    let mut centers = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = heat[y * w + x];
            if v < params.center_threshold {
                continue;
            }
            let is_max = (y.saturating_sub(r)..(y + r + 1).min(h))
                .all(|yy| (x.saturating_sub(r)..(x + r + 1).min(w)).all(|xx| heat[yy * w + xx] <= v));
            if is_max {
                centers.push((y, x, v));
            }
        }
    }
    centers.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    centers.truncate(params.top_k);
    centers
}

/// Assigns each thing pixel to the nearest center after shifting it by its
/// offset `(dy, dx)`. Instance ids are center ranks starting at 1; 0 marks
/// non-thing pixels and thing pixels when no center survives.
pub fn group_instances(
    center_heatmap: &Tensor,
    offsets: &Tensor,
    thing_mask: &[bool],
    params: &GroupParams,
) -> Result<Vec<u16>> {
    let hs = center_heatmap.shape();
    let os = offsets.shape();
    if hs.n != 1 || hs.c != 1 || os.n != 1 || os.c != 2 || (hs.h, hs.w) != (os.h, os.w) {
        return Err(Error::contract(format!("heatmap {hs} and offsets {os} do not pair up")));
    }
    if thing_mask.len() != hs.plane() {
        return Err(Error::contract(format!(
            "thing mask has {} pixels, heatmap {}",
            thing_mask.len(),
            hs.plane()
        )));
    }
    if params.top_k > usize::from(u16::MAX - 1) {
        return Err(Error::invalid("top_k exceeds the 16-bit instance range"));
    }
    let (h, w) = (hs.h, hs.w);
    let centers = find_centers(center_heatmap.data(), h, w, params);
    let mut out = vec![0u16; h * w];
    if centers.is_empty() {
        return Ok(out);
    }
    let (dy, dx) = (offsets.plane(0, 0), offsets.plane(0, 1));
    for (p, _) in thing_mask.iter().enumerate().filter(|(_, &t)| t) {
        let py = (p / w) as f32 + dy[p];
        let px = (p % w) as f32 + dx[p];
        let mut best = (f32::INFINITY, 0);
        for (k, &(cy, cx, _)) in centers.iter().enumerate() {
            let d = (py - cy as f32).powi(2) + (px - cx as f32).powi(2);
            if d < best.0 {
                best = (d, k);
            }
        }
        out[p] = best.1 as u16 + 1;
    }
    Ok(out)
}

/// Merges a semantic class image with an instance image. Each instance
/// takes the majority thing class of its pixels (ties to the smaller id);
/// stuff pixels keep their class with instance 0; thing pixels without an
/// instance become VOID.
pub fn fuse(semantic: &[u16], instances: &[u16], height: usize, width: usize, meta: &Meta) -> Result<PanopticMap> {
    let n = height * width;
    if semantic.len() != n || instances.len() != n {
        return Err(Error::contract(format!(
            "fuse needs {n} pixels, got {} semantic and {} instance",
            semantic.len(),
            instances.len()
        )));
    }
    let mut thing = vec![false; n];
    for (p, &c) in semantic.iter().enumerate() {
        thing[p] = c != VOID && meta.is_thing(c)?;
    }
    let mut votes: BTreeMap<u16, BTreeMap<u16, usize>> = BTreeMap::new();
    for p in 0..n {
        if thing[p] && instances[p] > 0 {
            *votes.entry(instances[p]).or_default().entry(semantic[p]).or_insert(0) += 1;
        }
    }
    let mut next_id: BTreeMap<u16, u16> = BTreeMap::new();
    let mut label: BTreeMap<u16, (u16, u16)> = BTreeMap::new();
    for (inst, v) in &votes {
        let (&class, _) = v
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("instances with votes are nonempty");
        let id = next_id.entry(class).or_insert(0);
        *id += 1;
        label.insert(*inst, (class, *id));
    }
    let mut class = vec![VOID; n];
    let mut instance = vec![0u16; n];
    for p in 0..n {
        if semantic[p] == VOID {
            continue;
        }
        if !thing[p] {
            class[p] = semantic[p];
        } else if let Some(&(c, i)) = label.get(&instances[p]) {
            class[p] = c;
            instance[p] = i;
        }
    }
    PanopticMap::new(height, width, class, instance)
}

/// Voids every stuff segment with area strictly below `threshold`.
pub fn stuff_area_filter(pmap: &PanopticMap, meta: &Meta, threshold: usize) -> Result<PanopticMap> {
    let mut small = Vec::new();
    for ((c, _), area) in pmap.segments() {
        if !meta.is_thing(c)? && area < threshold {
            small.push(c);
        }
    }
    let mut out = pmap.clone();
    for (c, i) in out.class.iter_mut().zip(out.instance.iter_mut()) {
        if small.contains(c) {
            *c = VOID;
            *i = 0;
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    pub(crate) fn meta() -> Meta {
        Meta::new(vec![
            CategoryInfo { class_id: 0, isthing: false, name: "sky".into() },
            CategoryInfo { class_id: 1, isthing: false, name: "road".into() },
            CategoryInfo { class_id: 2, isthing: true, name: "car".into() },
            CategoryInfo { class_id: 3, isthing: true, name: "bus".into() },
            CategoryInfo { class_id: 4, isthing: true, name: "person".into() },
            CategoryInfo { class_id: 5, isthing: true, name: "bike".into() },
        ])
        .unwrap()
    }

    fn heat(h: usize, w: usize, peaks: &[(usize, usize, f32)]) -> Tensor {
        let mut t = Tensor::zeros(Shape::new(1, 1, h, w));
        for &(y, x, v) in peaks {
            t.set(0, 0, y, x, v);
        }
        t
    }

    #[test]
    fn one_center_one_instance() {
        let (h, w) = (6, 6);
        let ids = group_instances(
            &heat(h, w, &[(3, 3, 0.9)]),
            &Tensor::zeros(Shape::new(1, 2, h, w)),
            &vec![true; h * w],
            &GroupParams::default(),
        )
        .unwrap();
        assert!(ids.iter().all(|&i| i == 1));
    }

    #[test]
    fn two_centers_split_by_distance() {
        let (h, w) = (5, 16);
        let ids = group_instances(
            &heat(h, w, &[(2, 2, 0.8), (2, 12, 0.8)]),
            &Tensor::zeros(Shape::new(1, 2, h, w)),
            &vec![true; h * w],
            &GroupParams::default(),
        )
        .unwrap();
        for y in 0..h {
            for x in 0..w {
                let d1 = (y as i64 - 2).pow(2) + (x as i64 - 2).pow(2);
                let d2 = (y as i64 - 2).pow(2) + (x as i64 - 12).pow(2);
                assert_eq!(ids[y * w + x], if d1 <= d2 { 1 } else { 2 });
            }
            assert!(ids[y * w..y * w + 8].iter().all(|&i| i == 1));
            assert!(ids[y * w + 8..(y + 1) * w].iter().all(|&i| i == 2));
        }
    }

    #[test]
    fn offsets_redirect_pixels() {
        let (h, w) = (1, 10);
        let mut off = Tensor::zeros(Shape::new(1, 2, h, w));
        off.set(0, 1, 0, 9, -9.0);
        let ids = group_instances(
            &heat(h, w, &[(0, 0, 0.9), (0, 8, 0.5)]),
            &off,
            &vec![true; w],
            &GroupParams { nms_window: 3, ..Default::default() },
        )
        .unwrap();
        assert_eq!(ids[9], 1);
        assert_eq!(ids[8], 2);
    }

    #[test]
    fn no_centers_voids_things() {
        let (h, w) = (4, 4);
        let ids = group_instances(
            &Tensor::full(Shape::new(1, 1, h, w), 0.05),
            &Tensor::zeros(Shape::new(1, 2, h, w)),
            &vec![true; h * w],
            &GroupParams::default(),
        )
        .unwrap();
        assert!(ids.iter().all(|&i| i == 0));
        let sem = vec![2u16; h * w];
        let p = fuse(&sem, &ids, h, w, &meta()).unwrap();
        assert!(p.class.iter().all(|&c| c == VOID));
    }

    #[test]
    fn nms_and_top_k() {
        let t = heat(1, 9, &[(0, 0, 0.5), (0, 2, 0.6), (0, 8, 0.7)]);
        let c = find_centers(t.data(), 1, 9, &GroupParams { nms_window: 5, ..Default::default() });
        assert_eq!(c.iter().map(|c| c.1).collect::<Vec<_>>(), vec![8, 2]);
        let c = find_centers(t.data(), 1, 9, &GroupParams { nms_window: 1, top_k: 2, ..Default::default() });
        assert_eq!(c.iter().map(|c| c.1).collect::<Vec<_>>(), vec![8, 2]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let e = group_instances(
            &heat(4, 4, &[]),
            &Tensor::zeros(Shape::new(1, 2, 4, 5)),
            &[true; 16],
            &GroupParams::default(),
        );
        assert!(e.is_err());
    }

    #[test]
    fn majority_vote() {
        let sem = [2, 2, 2, 3, 0, 0];
        let inst = [1, 1, 1, 1, 0, 0];
        let p = fuse(&sem, &inst, 1, 6, &meta()).unwrap();
        assert_eq!(&p.class[..4], &[2, 2, 2, 2]);
        assert_eq!(&p.instance[..4], &[1, 1, 1, 1]);
        assert_eq!(&p.class[4..], &[0, 0]);
    }

    #[test]
    fn vote_tie_goes_to_smaller_class() {
        let sem = [3, 5, 5, 3];
        let inst = [7, 7, 7, 7];
        let p = fuse(&sem, &inst, 2, 2, &meta()).unwrap();
        assert!(p.class.iter().all(|&c| c == 3));
    }

    #[test]
    fn pure_stuff_passes_through() {
        let sem = [0, 1, 1, 0, 0, 1];
        let p = fuse(&sem, &[0; 6], 2, 3, &meta()).unwrap();
        assert_eq!(p.class, sem);
        assert!(p.instance.iter().all(|&i| i == 0));
    }

    #[test]
    fn unknown_class_rejected() {
        assert!(fuse(&[9], &[0], 1, 1, &meta()).is_err());
    }

    #[test]
    fn stuff_threshold_is_strict() {
        let (h, w) = (64, 64);
        let mut class = vec![2u16; h * w];
        let mut instance = vec![1u16; h * w];
        for p in 0..2047 {
            class[p] = 0;
            instance[p] = 0;
        }
        class[4095] = 3;
        let m = PanopticMap::new(h, w, class.clone(), instance.clone()).unwrap();
        let f = stuff_area_filter(&m, &meta(), 2048).unwrap();
        assert!(f.class[..2047].iter().all(|&c| c == VOID));
        assert_eq!(f.class[4095], 3);

        class[2047] = 0;
        instance[2047] = 0;
        let m = PanopticMap::new(h, w, class, instance).unwrap();
        assert_eq!(stuff_area_filter(&m, &meta(), 2048).unwrap(), m);
    }

    pub(crate) fn arb_map(h: usize, w: usize) -> impl Strategy<Value = PanopticMap> {
        proptest::collection::vec((0u16..7, 1u16..4), h * w).prop_map(move |px| {
            let (class, instance) = px
                .into_iter()
                .map(|(c, i)| match c {
                    0 | 1 => (c, 0),
                    6 => (VOID, 0),
                    _ => (c, i),
                })
                .unzip();
            PanopticMap::new(h, w, class, instance).unwrap()
        })
    }

    proptest! {
        #[test]
        fn filter_is_idempotent_and_shrinking(m in arb_map(8, 8), t in 0usize..40) {
            let meta = meta();
            let once = stuff_area_filter(&m, &meta, t).unwrap();
            prop_assert_eq!(&stuff_area_filter(&once, &meta, t).unwrap(), &once);
            prop_assert!(once.non_void() <= m.non_void());
            prop_assert_eq!(&stuff_area_filter(&m, &meta, 0).unwrap(), &m);
            for p in 0..m.len() {
                if m.class[p] != VOID && meta.is_thing(m.class[p]).unwrap() {
                    prop_assert_eq!((once.class[p], once.instance[p]), (m.class[p], m.instance[p]));
                }
            }
        }

        #[test]
        fn fuse_output_is_valid(
            sem in proptest::collection::vec(prop_oneof![0u16..6, Just(VOID)], 48),
            inst in proptest::collection::vec(0u16..5, 48),
        ) {
            let p = fuse(&sem, &inst, 6, 8, &meta()).unwrap();
            prop_assert!(p.validate(&meta()).is_ok());
        }
    }
}
