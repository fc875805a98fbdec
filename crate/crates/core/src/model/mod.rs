//! Teacher and student classifiers over a shared residual backbone family.
//!
//! A [`ClassifierHandle`] owns the parameters of one classifier and exports
//! the feature maps of its configured stage taps together with the final
//! logits. The teacher side is frozen: its parameters are detached from the
//! autograd graph and [`ClassifierHandle::trainable_vars`] refuses to hand
//! them to an optimizer.

mod backbone;
pub mod conv;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use backbone::BackboneId;

use crate::error::{contract, Error, Result};

pub const NUM_CLASSES: usize = 2;

/// Per-stage feature maps plus logits for a batch of images.
///
/// `levels` maps a stage index to a `[B, C_l, H_l, W_l]` tensor. The last
/// stage is always kept in `last_stage` because class activation maps are
/// computed from it even when it is not a configured tap.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: BTreeMap<usize, Tensor>,
    pub last_stage: Tensor,
    pub logits: Tensor,
}

impl FeaturePyramid {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.logits.dim(0)?)
    }

    pub fn taps(&self) -> Vec<usize> {
        self.levels.keys().copied().collect()
    }

    pub fn level(&self, stage: usize) -> Result<&Tensor> {
        self.levels
            .get(&stage)
            .ok_or_else(|| contract(format!("stage {stage} is not an exported tap")))
    }

    /// Feature map of one batch item as `[C, H, W]`.
    pub fn level_array(&self, stage: usize, item: usize) -> Result<Array3<f32>> {
        tensor_to_array3(&self.level(stage)?.get(item)?)
    }

    pub fn last_stage_array(&self, item: usize) -> Result<Array3<f32>> {
        tensor_to_array3(&self.last_stage.get(item)?)
    }

    pub fn logits_vec(&self, item: usize) -> Result<Vec<f32>> {
        Ok(self.logits.get(item)?.to_dtype(DType::F32)?.to_vec1()?)
    }

    /// Copy of the pyramid with every tensor cut from the autograd graph.
    pub fn detach(&self) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.iter().map(|(k, v)| (*k, v.detach())).collect(),
            last_stage: self.last_stage.detach(),
            logits: self.logits.detach(),
        }
    }
}

pub fn tensor_to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (c, h, w) = t.dims3()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array3::from_shape_vec((c, h, w), data).expect("shape matches element count"))
}

pub fn array3_to_tensor(a: ArrayView3<f32>) -> Result<Tensor> {
    let (c, h, w) = a.dim();
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (c, h, w), &Device::Cpu)?)
}

/// Stacks `[3, H, W]` images into a `[B, 3, H, W]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = ArrayView3<'a, f32>>) -> Result<Tensor> {
    let tensors = images
        .into_iter()
        .map(|a| array3_to_tensor(a))
        .collect::<Result<Vec<_>>>()?;
    if tensors.is_empty() {
        return Err(contract("cannot stack an empty batch"));
    }
    Ok(Tensor::stack(&tensors, 0)?)
}

/// JSON sidecar stored next to a checkpoint's parameter archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone_id: BackboneId,
    pub stage_taps: Vec<usize>,
    pub num_classes: usize,
    pub input_size: usize,
}

#[derive(Debug, Clone)]
pub struct ClassifierHandle {
    backbone: BackboneId,
    stage_taps: Vec<usize>,
    input_size: usize,
    params: BTreeMap<String, Var>,
    trainable: bool,
}

impl ClassifierHandle {
    /// Randomly initialized, trainable classifier (He-normal convs, zero biases).
    pub fn new_random(backbone: BackboneId, stage_taps: &[usize], input_size: usize, seed: u64) -> Result<Self> {
        validate_taps(stage_taps)?;
        validate_input_size(input_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in backbone.parameter_shapes(NUM_CLASSES) {
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".bias") {
                vec![0.0; numel]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = if name.starts_with("head") {
                    (1.0 / fan_in as f64).sqrt()
                } else {
                    (2.0 / fan_in as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..numel).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            let t = Tensor::from_vec(data, shape.as_slice(), &Device::Cpu)?;
            params.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self {
            backbone,
            stage_taps: sorted_taps(stage_taps),
            input_size,
            params,
            trainable: true,
        })
    }

    pub fn backbone(&self) -> BackboneId {
        self.backbone
    }

    pub fn stage_taps(&self) -> &[usize] {
        &self.stage_taps
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Consumes the handle and returns it frozen.
    pub fn freeze(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn with_stage_taps(mut self, taps: &[usize]) -> Result<Self> {
        validate_taps(taps)?;
        self.stage_taps = sorted_taps(taps);
        Ok(self)
    }

    /// Parameters an optimizer may update. Fails for a frozen classifier.
    pub fn trainable_vars(&self) -> Result<Vec<Var>> {
        if !self.trainable {
            return Err(Error::FrozenParameters);
        }
        Ok(self.params.values().cloned().collect())
    }

    /// Overwrites a parameter in place. Fails for a frozen classifier.
    pub fn set_parameter(&self, name: &str, value: &Tensor) -> Result<()> {
        if !self.trainable {
            return Err(Error::FrozenParameters);
        }
        let var = self
            .params
            .get(name)
            .ok_or_else(|| contract(format!("unknown parameter '{name}'")))?;
        var.set(value)?;
        Ok(())
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn param(&self, name: &str) -> Tensor {
        let var = &self.params[name];
        if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        }
    }

    fn conv(&self, x: &Tensor, name: &str, stride: usize, padding: usize) -> Result<Tensor> {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        Ok(conv::conv2d(x, &w, Some(&b), stride, padding)?)
    }

    /// Classifier head weights `[num_classes, C_last]`.
    pub fn head_weights(&self) -> Result<Array2<f32>> {
        let w = self.params["head.weight"].as_tensor();
        let (rows, cols) = w.dims2()?;
        let data = w.flatten_all()?.to_vec1::<f32>()?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches element count"))
    }

    /// Batched forward pass over `[B, 3, H, W]` images with values in `[0, 1]`.
    pub fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        validate_batch(images)?;
        let x = images.affine(4.0, -2.0)?;
        let x = self.conv(&x, "stem.0", 2, 1)?.relu()?;
        let mut x = self.conv(&x, "stem.1", 2, 1)?.relu()?;
        let mut levels = BTreeMap::new();
        for stage in 1..=BackboneId::NUM_STAGES {
            let stride = BackboneId::stage_conv_stride(stage);
            let y = self.conv(&x, &format!("stage{stage}.conv1"), stride, 1)?.relu()?;
            let y = self.conv(&y, &format!("stage{stage}.conv2"), 1, 1)?;
            let proj = format!("stage{stage}.proj");
            let shortcut = if self.params.contains_key(&format!("{proj}.weight")) {
                self.conv(&x, &proj, stride, 0)?
            } else {
                x.clone()
            };
            x = (y + shortcut)?.relu()?;
            if self.stage_taps.contains(&stage) {
                levels.insert(stage, x.clone());
            }
        }
        let pooled = x.mean((2, 3))?;
        let logits = pooled
            .matmul(&self.param("head.weight").t()?)?
            .broadcast_add(&self.param("head.bias"))?;
        Ok(FeaturePyramid {
            levels,
            last_stage: x,
            logits,
        })
    }

    /// Single-image feature extraction for a `[3, H, W]` image in `[0, 1]`.
    pub fn extract(&self, image: ArrayView3<f32>) -> Result<FeaturePyramid> {
        let (c, _, _) = image.dim();
        if c != 3 {
            return Err(Error::RejectedInput(format!("expected 3 channels, got {c}")));
        }
        let t = array3_to_tensor(image)?.unsqueeze(0)?;
        self.forward(&t)
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.params {
            hasher.update(name.as_bytes());
            for d in var.as_tensor().dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            backbone_id: self.backbone,
            stage_taps: self.stage_taps.clone(),
            num_classes: NUM_CLASSES,
            input_size: self.input_size,
        }
    }

    /// Writes `<path>` (safetensors) and `<path>.json` sidecar; `path` should end in `.safetensors`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`save`](Self::save). The result is trainable iff `trainable`.
    pub fn load(path: &Path, trainable: bool) -> Result<Self> {
        let sidecar = sidecar_path(path);
        for p in [path, sidecar.as_path()] {
            if !p.exists() {
                return Err(Error::MissingInput(p.to_path_buf()));
            }
        }
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
        if meta.num_classes != NUM_CLASSES {
            return Err(Error::RejectedInput(format!(
                "checkpoint has {} classes, expected {NUM_CLASSES}",
                meta.num_classes
            )));
        }
        validate_taps(&meta.stage_taps)?;
        let mut tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut params = BTreeMap::new();
        for (name, shape) in meta.backbone_id.parameter_shapes(NUM_CLASSES) {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::RejectedInput(format!("checkpoint lacks parameter '{name}'")))?;
            if t.dims() != shape.as_slice() {
                return Err(Error::RejectedInput(format!(
                    "parameter '{name}' has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
            params.insert(name, Var::from_tensor(&t.to_dtype(DType::F32)?)?);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::RejectedInput(format!("unexpected parameter '{extra}' in checkpoint")));
        }
        Ok(Self {
            backbone: meta.backbone_id,
            stage_taps: meta.stage_taps,
            input_size: meta.input_size,
            params,
            trainable,
        })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn sorted_taps(taps: &[usize]) -> Vec<usize> {
    let mut t = taps.to_vec();
    t.sort_unstable();
    t.dedup();
    t
}

fn validate_taps(taps: &[usize]) -> Result<()> {
    if taps.is_empty() {
        return Err(Error::Config("stage_taps must not be empty".into()));
    }
    if let Some(bad) = taps.iter().find(|&&t| t == 0 || t > BackboneId::NUM_STAGES) {
        return Err(Error::Config(format!(
            "stage tap {bad} outside 1..={}",
            BackboneId::NUM_STAGES
        )));
    }
    Ok(())
}

fn validate_input_size(size: usize) -> Result<()> {
    if size == 0 || size % BackboneId::MAX_STRIDE != 0 {
        return Err(Error::Config(format!(
            "input size {size} must be a positive multiple of {}",
            BackboneId::MAX_STRIDE
        )));
    }
    Ok(())
}

fn validate_batch(images: &Tensor) -> Result<()> {
    let (_, c, h, w) = images
        .dims4()
        .map_err(|_| Error::RejectedInput(format!("expected [B, 3, H, W] images, got {:?}", images.dims())))?;
    if c != 3 {
        return Err(Error::RejectedInput(format!("expected 3 channels, got {c}")));
    }
    if h == 0 || w == 0 || h % BackboneId::MAX_STRIDE != 0 || w % BackboneId::MAX_STRIDE != 0 {
        return Err(Error::RejectedInput(format!(
            "spatial size {h}x{w} must be a positive multiple of {}",
            BackboneId::MAX_STRIDE
        )));
    }
    if images.dtype() != DType::F32 {
        return Err(Error::RejectedInput(format!("expected f32 images, got {:?}", images.dtype())));
    }
    let finite = images
        .flatten_all()?
        .to_vec1::<f32>()?
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::RejectedInput("image contains non-finite values".into()));
    }
    Ok(())
}

/// Min-max normalized class activation map of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassActivationMap {
    pub map: Array2<f32>,
    /// Set when the raw map was constant; `map` is then all zeros.
    pub degenerate: bool,
}

/// Class-weighted sum of last-stage channels, normalized to `[0, 1]`.
pub fn class_activation_map(
    features: ArrayView3<f32>,
    head_weights: ArrayView2<f32>,
    class_index: usize,
) -> Result<ClassActivationMap> {
    let (channels, h, w) = features.dim();
    if class_index >= head_weights.nrows() {
        return Err(contract(format!(
            "class {class_index} has no head weight row ({} rows)",
            head_weights.nrows()
        )));
    }
    if head_weights.ncols() != channels {
        return Err(contract(format!(
            "head weights have {} columns, features have {channels} channels",
            head_weights.ncols()
        )));
    }
    let weights = head_weights.row(class_index);
    let mut raw = Array2::<f32>::zeros((h, w));
    for (c, &wc) in weights.iter().enumerate() {
        raw.scaled_add(wc, &features.index_axis(ndarray::Axis(0), c));
    }
    let min = raw.iter().copied().fold(f32::INFINITY, f32::min);
    let max = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(max > min) || !(max - min).is_finite() {
        return Ok(ClassActivationMap {
            map: Array2::zeros((h, w)),
            degenerate: true,
        });
    }
    let span = max - min;
    let map = raw.mapv(|v| ((v - min) / span).clamp(0.0, 1.0));
    Ok(ClassActivationMap { map, degenerate: false })
}

/// CAM of batch item `item` of `pyramid`.
pub fn compute_cam(
    pyramid: &FeaturePyramid,
    head_weights: ArrayView2<f32>,
    class_index: usize,
    item: usize,
) -> Result<ClassActivationMap> {
    let features = pyramid.last_stage_array(item)?;
    class_activation_map(features.view(), head_weights, class_index)
}
