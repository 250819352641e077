use std::fs;
use std::path::{Path, PathBuf};

use super::{stuff_area_filter, CategoryInfo, Meta, PanopticMap, PqResult, PqTally};
use crate::error::{Error, Result};

pub const PAN_MAGIC: &[u8; 4] = b"PAN1";

/// `PAN1`, u32 height, u32 width, then `(u16 class, u16 instance)` per
/// pixel, all little-endian.
pub fn write_pan(path: &Path, map: &PanopticMap) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * map.len());
    buf.extend_from_slice(PAN_MAGIC);
    for d in [map.height, map.width] {
        let d = u32::try_from(d).map_err(|_| Error::invalid("map side exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for (&c, &i) in map.class.iter().zip(&map.instance) {
        buf.extend_from_slice(&c.to_le_bytes());
        buf.extend_from_slice(&i.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn decode_pan(bytes: &[u8]) -> Result<PanopticMap> {
    if bytes.len() < 12 || &bytes[..4] != PAN_MAGIC {
        return Err(Error::Parse("not a PAN1 panoptic map".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    let n = h.checked_mul(w).ok_or_else(|| Error::Parse("map size overflows".into()))?;
    if bytes.len() != 12 + 4 * n {
        return Err(Error::Parse(format!(
            "PAN1 {h}x{w} needs {} bytes, file has {}",
            12 + 4 * n,
            bytes.len()
        )));
    }
    let half = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let class = (0..n).map(|p| half(12 + 4 * p)).collect();
    let instance = (0..n).map(|p| half(14 + 4 * p)).collect();
    PanopticMap::new(h, w, class, instance)
}

pub fn read_pan(path: &Path) -> Result<PanopticMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pan(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// JSON array of `{class_id, isthing, name}`.
pub fn read_meta(path: &Path) -> Result<Meta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cats: Vec<CategoryInfo> =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    Meta::new(cats)
}

pub fn write_meta(path: &Path, meta: &Meta) -> Result<()> {
    let cats: Vec<&CategoryInfo> = meta.categories().collect();
    let text = serde_json::to_string_pretty(&cats)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pan_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pan") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// PQ over every `*.pan` file in `pred_dir` paired by name with `gt_dir`.
/// Predictions go through the stuff-area filter first.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, meta: &Meta, stuff_threshold: usize) -> Result<(usize, PqResult)> {
    let preds = pan_files(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::NotFound(format!("no .pan files in {}", pred_dir.display())));
    }
    let mut tally = PqTally::default();
    for p in &preds {
        let g = gt_dir.join(p.file_name().expect("listed files have names"));
        if !g.exists() {
            return Err(Error::NotFound(format!("ground truth {} for {}", g.display(), p.display())));
        }
        let pred = stuff_area_filter(&read_pan(p)?, meta, stuff_threshold)?;
        tally.merge(&PqTally::from_pair(&pred, &read_pan(&g)?, meta)?);
    }
    Ok((preds.len(), tally.finish(meta)?))
}
