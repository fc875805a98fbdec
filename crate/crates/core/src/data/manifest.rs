//! JSON-lines manifest: one `{pair_id, patient_id, label, wli_path, nbi_path}` object per line.
//!
//! Relative image paths resolve against the manifest's directory. An optional
//! `warps.json` sidecar next to the manifest carries ground-truth warps and
//! lesion-mask paths for synthetic data.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Homography, PairSource, PairedSample};
use crate::error::{Error, Result};
use crate::imaging::{load_mask_png, load_png};

pub const WARP_SIDECAR: &str = "warps.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub patient_id: String,
    pub label: i64,
    pub wli_path: PathBuf,
    pub nbi_path: PathBuf,
}

/// Sidecar record of one synthetic pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpRecord {
    /// Row-major 3×3 homography from student to teacher pixel coordinates.
    pub gt_warp: [f64; 9],
    pub mask_path: Option<PathBuf>,
}

/// Validated manifest entry with resolved paths; images load on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDescriptor {
    pub pair_id: String,
    pub patient_id: String,
    pub label: u8,
    pub wli_path: PathBuf,
    pub nbi_path: PathBuf,
    pub gt_warp: Option<Homography>,
    pub mask_path: Option<PathBuf>,
}

impl PairDescriptor {
    pub fn load(&self) -> Result<PairedSample> {
        let sample = PairedSample {
            pair_id: self.pair_id.clone(),
            patient_id: self.patient_id.clone(),
            label: self.label,
            image_w: load_png(&self.wli_path)?,
            image_n: load_png(&self.nbi_path)?,
            gt_warp: self.gt_warp,
            gt_lesion_mask_w: self.mask_path.as_deref().map(load_mask_png).transpose()?,
        };
        sample.validate()?;
        Ok(sample)
    }
}

impl PairSource for Vec<PairDescriptor> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn label(&self, index: usize) -> u8 {
        self[index].label
    }

    fn patient_id(&self, index: usize) -> &str {
        &self[index].patient_id
    }

    fn load(&self, index: usize) -> Result<PairedSample> {
        self[index].load()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<PairDescriptor>> {
    if !path.is_file() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let sidecar_path = base.join(WARP_SIDECAR);
    let sidecar: BTreeMap<String, WarpRecord> = if sidecar_path.is_file() {
        serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)?
    } else {
        BTreeMap::new()
    };

    let text = std::fs::read_to_string(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (index, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::ManifestSchema {
            index,
            message: e.to_string(),
        })?;
        if !(0..=1).contains(&entry.label) {
            return Err(Error::InvalidLabel {
                index,
                label: entry.label,
            });
        }
        if !seen.insert((entry.patient_id.clone(), entry.pair_id.clone())) {
            return Err(Error::DuplicateKey {
                index,
                patient_id: entry.patient_id,
                pair_id: entry.pair_id,
            });
        }
        let wli_path = resolve(base, &entry.wli_path);
        let nbi_path = resolve(base, &entry.nbi_path);
        for p in [&wli_path, &nbi_path] {
            if !p.is_file() {
                return Err(Error::DanglingImage {
                    index,
                    path: p.clone(),
                });
            }
        }
        let (gt_warp, mask_path) = match sidecar.get(&entry.pair_id) {
            Some(rec) => (
                Some(Homography::from_row_major(rec.gt_warp)?),
                rec.mask_path.as_deref().map(|p| resolve(base, p)),
            ),
            None => (None, None),
        };
        out.push(PairDescriptor {
            pair_id: entry.pair_id,
            patient_id: entry.patient_id,
            label: entry.label as u8,
            wli_path,
            nbi_path,
            gt_warp,
            mask_path,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut file, e)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}
