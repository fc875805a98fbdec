//! Paired-modality samples, manifests, patient-level folds and the synthetic generator.

mod folds;
mod geometry;
mod manifest;
mod synthetic;

use ndarray::{Array2, Array3};

pub use folds::{kfold_split, Fold, FoldPlan};
pub use geometry::{correspondence_oracle, sample_correspondence, Homography};
pub use manifest::{load_manifest, write_manifest, ManifestEntry, PairDescriptor, WarpRecord, WARP_SIDECAR};
pub use synthetic::{generate_synthetic_pair, write_synthetic_dataset, SyntheticDataset, SyntheticSpec};

use crate::error::{contract, Result};

/// One student-modality image, one teacher-modality image and their shared label.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub pair_id: String,
    pub patient_id: String,
    pub label: u8,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image_w: Array3<f32>,
    pub image_n: Array3<f32>,
    /// Maps student-image pixel coordinates to teacher-image coordinates (synthetic data only).
    pub gt_warp: Option<Homography>,
    /// Lesion pixels of the student image (synthetic data only).
    pub gt_lesion_mask_w: Option<Array2<bool>>,
}

impl PairedSample {
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(contract(format!("label {} outside {{0, 1}}", self.label)));
        }
        if self.image_w.dim() != self.image_n.dim() || self.image_w.dim().0 != 3 {
            return Err(contract(format!(
                "paired images must both be [3, H, W] of equal size, got {:?} and {:?}",
                self.image_w.dim(),
                self.image_n.dim()
            )));
        }
        if let Some(h) = &self.gt_warp {
            if h.determinant().abs() <= 1e-6 {
                return Err(contract("ground-truth warp is not invertible"));
            }
        }
        Ok(())
    }
}

/// Indexed access to paired samples with cheap label / patient lookup.
pub trait PairSource {
    fn len(&self) -> usize;
    fn label(&self, index: usize) -> u8;
    fn patient_id(&self, index: usize) -> &str;
    fn load(&self, index: usize) -> Result<PairedSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSource for [PairedSample] {
    fn len(&self) -> usize {
        <[PairedSample]>::len(self)
    }

    fn label(&self, index: usize) -> u8 {
        self[index].label
    }

    fn patient_id(&self, index: usize) -> &str {
        &self[index].patient_id
    }

    fn load(&self, index: usize) -> Result<PairedSample> {
        Ok(self[index].clone())
    }
}

impl PairSource for Vec<PairedSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn label(&self, index: usize) -> u8 {
        self.as_slice().label(index)
    }

    fn patient_id(&self, index: usize) -> &str {
        self.as_slice().patient_id(index)
    }

    fn load(&self, index: usize) -> Result<PairedSample> {
        self.as_slice().load(index)
    }
}

/// A view of selected indices of another source.
pub struct Subset<'a, S: PairSource + ?Sized> {
    source: &'a S,
    indices: Vec<usize>,
}

impl<'a, S: PairSource + ?Sized> Subset<'a, S> {
    pub fn new(source: &'a S, indices: Vec<usize>) -> Self {
        Self { source, indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl<S: PairSource + ?Sized> PairSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn label(&self, index: usize) -> u8 {
        self.source.label(self.indices[index])
    }

    fn patient_id(&self, index: usize) -> &str {
        self.source.patient_id(self.indices[index])
    }

    fn load(&self, index: usize) -> Result<PairedSample> {
        self.source.load(self.indices[index])
    }
}
