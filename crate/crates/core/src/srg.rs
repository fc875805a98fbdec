//! Semantic relation generation.
//!
//! Pipeline per modality: class activation map → pairwise similarity
//! refinement (colour-guided 3×3 aggregation, `T` rounds) → bilinear resize
//! to each feature scale → double-threshold trinarization. The relation
//! matrix then links a student cell and a teacher cell iff both carry the
//! same non-unsure label.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::imaging::{resize_bilinear, resize_image};
use crate::model::{class_activation_map, ClassActivationMap, ClassifierHandle, FeaturePyramid};

/// Trinarized CAM label of one feature cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Trinary {
    Background = 0,
    Unsure = 1,
    Polyp = 2,
}

/// Which class the activation maps are computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CamClass {
    #[default]
    GroundTruth,
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrgConfig {
    /// When false the relation matrix is all ones.
    pub enabled: bool,
    pub iterations: usize,
    pub tau1: f32,
    pub tau2: f32,
    pub cam_class: CamClass,
}

impl Default for SrgConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            iterations: 10,
            tau1: 0.3,
            tau2: 0.7,
            cam_class: CamClass::GroundTruth,
        }
    }
}

/// Colour distance between two RGB pixels in `[0, 1]`, scaled into `[0, 1]`.
fn colour_distance(image: ArrayView3<f32>, a: (usize, usize), b: (usize, usize)) -> f64 {
    let mut sq = 0.0f64;
    for c in 0..3 {
        let d = (image[[c, a.0, a.1]] - image[[c, b.0, b.1]]) as f64;
        sq += d * d;
    }
    (sq.sqrt() / 3f64.sqrt()).min(1.0)
}

/// Unnormalized neighbour weights `1 − d` of each pixel's clipped 3×3 window
/// (centre included), as `(flat index, weight)` in row-major window order.
pub fn neighbour_weights(image: ArrayView3<f32>) -> Result<Vec<Vec<(usize, f64)>>> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(contract(format!("guide image must have 3 channels, got {c}")));
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut window = Vec::with_capacity(9);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let weight = 1.0 - colour_distance(image, (y, x), (ny, nx));
                    window.push((ny * w + nx, weight));
                }
            }
            out.push(window);
        }
    }
    Ok(out)
}

/// Normalized weights `λ_k`; each pixel's weights are nonnegative and sum to one.
pub fn refinement_weights(image: ArrayView3<f32>) -> Result<Vec<Vec<(usize, f64)>>> {
    Ok(neighbour_weights(image)?
        .into_iter()
        .map(|window| {
            let total: f64 = window.iter().map(|(_, w)| w).sum();
            window.into_iter().map(|(k, w)| (k, w / total)).collect()
        })
        .collect())
}

/// `iterations` rounds of colour-guided 3×3 aggregation of `map`.
///
/// `image` is the same-modality image at the map's resolution.
pub fn psr_refine(map: ArrayView2<f32>, image: ArrayView3<f32>, iterations: usize) -> Result<Array2<f32>> {
    let (h, w) = map.dim();
    let (_, ih, iw) = image.dim();
    if (ih, iw) != (h, w) {
        return Err(contract(format!("map is {h}x{w} but guide image is {ih}x{iw}")));
    }
    if iterations == 0 {
        return Ok(map.to_owned());
    }
    let weights = neighbour_weights(image)?;
    let mut current: Vec<f32> = map.iter().copied().collect();
    let mut next = vec![0f32; current.len()];
    for _ in 0..iterations {
        for (p, window) in weights.iter().enumerate() {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for &(k, wk) in window {
                num += wk * current[k] as f64;
                den += wk;
            }
            next[p] = (num / den) as f32;
        }
        std::mem::swap(&mut current, &mut next);
    }
    Ok(Array2::from_shape_vec((h, w), current).expect("shape matches element count"))
}

fn validate_thresholds(tau1: f32, tau2: f32) -> Result<()> {
    if !(tau1 > 0.0 && tau2 < 1.0 && tau1 <= tau2) {
        return Err(contract(format!("thresholds must satisfy 0 < tau1 <= tau2 < 1, got {tau1}, {tau2}")));
    }
    Ok(())
}

pub fn classify(value: f32, tau1: f32, tau2: f32) -> Trinary {
    if value <= tau1 {
        Trinary::Background
    } else if value >= tau2 {
        Trinary::Polyp
    } else {
        Trinary::Unsure
    }
}

/// Resizes `map` to `(h, w)` (bilinear) and then applies the two thresholds.
pub fn trinarize(map: ArrayView2<f32>, size: (usize, usize), tau1: f32, tau2: f32) -> Result<Array2<Trinary>> {
    validate_thresholds(tau1, tau2)?;
    let resized = resize_bilinear(map, size.0, size.1);
    Ok(resized.mapv(|v| classify(v, tau1, tau2)))
}

/// `R[i, j] = 1` iff student cell `i` and teacher cell `j` share a label other than unsure.
pub fn relation_matrix(mask_w: ArrayView2<Trinary>, mask_n: ArrayView2<Trinary>) -> Array2<u8> {
    let w: Vec<Trinary> = mask_w.iter().copied().collect();
    let n: Vec<Trinary> = mask_n.iter().copied().collect();
    Array2::from_shape_fn((w.len(), n.len()), |(i, j)| {
        u8::from(w[i] == n[j] && w[i] != Trinary::Unsure)
    })
}

pub fn relations_to_tensor(relations: &[&Array2<u8>]) -> Result<Tensor> {
    let (n, m) = relations
        .first()
        .map(|r| r.dim())
        .ok_or_else(|| contract("no relation matrices"))?;
    let mut data = Vec::with_capacity(relations.len() * n * m);
    for r in relations {
        if r.dim() != (n, m) {
            return Err(contract("relation matrices differ in shape"));
        }
        data.extend(r.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (relations.len(), n, m), &Device::Cpu)?)
}

/// Masks and relations for one feature scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRelations {
    pub mask_w: Array2<Trinary>,
    pub mask_n: Array2<Trinary>,
    pub relations: Array2<u8>,
}

/// Everything the relation pipeline produced for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMaps {
    pub cam_raw_w: ClassActivationMap,
    pub cam_raw_n: ClassActivationMap,
    pub cam_refined_w: Array2<f32>,
    pub cam_refined_n: Array2<f32>,
    pub scales: BTreeMap<usize, ScaleRelations>,
}

/// Inputs of the relation pipeline for one sample.
pub struct RelationInputs<'a> {
    /// Last-stage features `[C, h, w]` of each modality.
    pub features_w: ArrayView3<'a, f32>,
    pub features_n: ArrayView3<'a, f32>,
    pub head_w: ArrayView2<'a, f32>,
    pub head_n: ArrayView2<'a, f32>,
    pub image_w: ArrayView3<'a, f32>,
    pub image_n: ArrayView3<'a, f32>,
    pub class_w: usize,
    pub class_n: usize,
    /// Stage index → feature grid `(H_l, W_l)`.
    pub scales: &'a BTreeMap<usize, (usize, usize)>,
}

fn refine_modality(
    features: ArrayView3<f32>,
    head: ArrayView2<f32>,
    class: usize,
    image: ArrayView3<f32>,
    iterations: usize,
) -> Result<(ClassActivationMap, Array2<f32>)> {
    let cam = class_activation_map(features, head, class)?;
    let (h, w) = cam.map.dim();
    let guide = resize_image(image, h, w);
    let refined = psr_refine(cam.map.view(), guide.view(), iterations)?;
    Ok((cam, refined))
}

pub fn build_semantic_maps(inputs: &RelationInputs<'_>, cfg: &SrgConfig) -> Result<SemanticMaps> {
    validate_thresholds(cfg.tau1, cfg.tau2)?;
    let (cam_raw_w, cam_refined_w) = refine_modality(
        inputs.features_w,
        inputs.head_w,
        inputs.class_w,
        inputs.image_w,
        cfg.iterations,
    )?;
    let (cam_raw_n, cam_refined_n) = refine_modality(
        inputs.features_n,
        inputs.head_n,
        inputs.class_n,
        inputs.image_n,
        cfg.iterations,
    )?;
    let mut scales = BTreeMap::new();
    for (&stage, &size) in inputs.scales {
        let mask_w = trinarize(cam_refined_w.view(), size, cfg.tau1, cfg.tau2)?;
        let mask_n = trinarize(cam_refined_n.view(), size, cfg.tau1, cfg.tau2)?;
        let relations = if cfg.enabled {
            relation_matrix(mask_w.view(), mask_n.view())
        } else {
            Array2::ones((size.0 * size.1, size.0 * size.1))
        };
        scales.insert(
            stage,
            ScaleRelations {
                mask_w,
                mask_n,
                relations,
            },
        );
    }
    Ok(SemanticMaps {
        cam_raw_w,
        cam_raw_n,
        cam_refined_w,
        cam_refined_n,
        scales,
    })
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Relation pipeline for every item of a batch, given both pyramids.
#[allow(clippy::too_many_arguments)]
pub fn build_relations_batch(
    student: &FeaturePyramid,
    teacher: &FeaturePyramid,
    head_w: ArrayView2<f32>,
    head_n: ArrayView2<f32>,
    images_w: &[ArrayView3<f32>],
    images_n: &[ArrayView3<f32>],
    labels: &[u8],
    cfg: &SrgConfig,
) -> Result<Vec<SemanticMaps>> {
    let batch = student.batch_size()?;
    if images_w.len() != batch || images_n.len() != batch || labels.len() != batch {
        return Err(contract("batch size mismatch between pyramids, images and labels"));
    }
    let mut scales = BTreeMap::new();
    for (&stage, t) in &student.levels {
        let (_, _, h, w) = t.dims4()?;
        scales.insert(stage, (h, w));
    }
    (0..batch)
        .map(|i| {
            let fw = student.last_stage_array(i)?;
            let fnn = teacher.last_stage_array(i)?;
            let (class_w, class_n) = match cfg.cam_class {
                CamClass::GroundTruth => (labels[i] as usize, labels[i] as usize),
                CamClass::Predicted => (argmax(&student.logits_vec(i)?), argmax(&teacher.logits_vec(i)?)),
            };
            build_semantic_maps(
                &RelationInputs {
                    features_w: fw.view(),
                    features_n: fnn.view(),
                    head_w,
                    head_n,
                    image_w: images_w[i],
                    image_n: images_n[i],
                    class_w,
                    class_n,
                    scales: &scales,
                },
                cfg,
            )
        })
        .collect()
}

/// Stage → `[B, N, M]` relation tensors for a batch of semantic maps.
pub fn batch_relation_tensors(maps: &[SemanticMaps]) -> Result<BTreeMap<usize, Tensor>> {
    let first = maps.first().ok_or_else(|| contract("empty batch"))?;
    first
        .scales
        .keys()
        .map(|&stage| {
            let mats: Vec<&Array2<u8>> = maps.iter().map(|m| &m.scales[&stage].relations).collect();
            Ok((stage, relations_to_tensor(&mats)?))
        })
        .collect()
}

/// End-to-end relation pipeline for one image pair.
pub fn build_relations(
    image_w: ArrayView3<f32>,
    image_n: ArrayView3<f32>,
    label: u8,
    teacher: &ClassifierHandle,
    student: &ClassifierHandle,
    cfg: &SrgConfig,
) -> Result<SemanticMaps> {
    let ps = student.extract(image_w)?;
    let pt = teacher.extract(image_n)?;
    let maps = build_relations_batch(
        &ps,
        &pt,
        student.head_weights()?.view(),
        teacher.head_weights()?.view(),
        &[image_w],
        &[image_n],
        &[label],
        cfg,
    )?;
    Ok(maps.into_iter().next().expect("one item"))
}
