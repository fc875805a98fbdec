//! Training objective and optimization loop.
//!
//! `l_total = l_dist + l_logit + l_cls` with unit weights. Which dense term
//! is used, and whether the logit term is present, follow the ablation flags
//! of [`TrainConfig`].

use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{add_loss_levels, aligned_consistency_loss, AddOptions, FeatureNorm, GradientFlow, PathNormalization};
use crate::data::{PairSource, PairedSample};
use crate::error::{contract, Error, Result};
use crate::imaging::{flip_horizontal, resize_image};
use crate::model::{stack_images, BackboneId, ClassifierHandle, FeaturePyramid, NUM_CLASSES};
use crate::srg::{batch_relation_tensors, build_relations_batch, CamClass, SrgConfig};

/// How the logit distillation term compares the two classifiers' outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogitMode {
    /// L2 distance between raw logits.
    #[default]
    Raw,
    /// L2 distance between softmax probabilities.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub input_size: usize,
    /// Refinement rounds of the relation pipeline.
    pub psr_iterations: usize,
    pub tau1: f32,
    pub tau2: f32,
    /// Relation-masked affinity distillation; when off, a same-position consistency loss is used instead.
    pub enable_add: bool,
    /// Semantic relation masking; when off every relation is 1.
    pub enable_srg: bool,
    /// Union of both affinity directions; when off only `A(p_n | p_w)` is used.
    pub enable_bi_a: bool,
    /// Colour-guided refinement of activation maps; when off zero rounds are run.
    pub enable_psr: bool,
    /// Any dense feature term at all. Off for the independent-classification and logit-only baselines.
    pub enable_feature_distill: bool,
    pub enable_logit_distill: bool,
    pub stage_taps: Vec<usize>,
    pub seed: u64,
    pub backbone: BackboneId,
    pub feature_norm: FeatureNorm,
    pub gradient_flow: GradientFlow,
    pub dist_normalization: PathNormalization,
    pub logit_mode: LogitMode,
    pub cam_class: CamClass,
    /// Random horizontal flip of both images of a pair.
    pub hflip: bool,
    pub folds: usize,
    /// Optional checkpoint to initialize the trained classifier from.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-8,
            batch_size: 16,
            epochs: 200,
            input_size: 448,
            psr_iterations: 10,
            tau1: 0.3,
            tau2: 0.7,
            enable_add: true,
            enable_srg: true,
            enable_bi_a: true,
            enable_psr: true,
            enable_feature_distill: true,
            enable_logit_distill: true,
            stage_taps: vec![3, 4],
            seed: 0,
            backbone: BackboneId::ResnetTiny,
            feature_norm: FeatureNorm::L2,
            gradient_flow: GradientFlow::Full,
            dist_normalization: PathNormalization::PathMass,
            logit_mode: LogitMode::Raw,
            cam_class: CamClass::GroundTruth,
            hflip: true,
            folds: 5,
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.input_size == 0 || self.input_size % BackboneId::MAX_STRIDE != 0 {
            return fail(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size,
                BackboneId::MAX_STRIDE
            ));
        }
        if !(self.tau1 > 0.0 && self.tau1 <= self.tau2 && self.tau2 < 1.0) {
            return fail(format!("thresholds must satisfy 0 < tau1 <= tau2 < 1, got {} and {}", self.tau1, self.tau2));
        }
        if self.stage_taps.is_empty() || self.stage_taps.iter().any(|&s| s == 0 || s > BackboneId::NUM_STAGES) {
            return fail(format!("stage_taps {:?} must be a nonempty subset of 1..=4", self.stage_taps));
        }
        if self.folds < 2 {
            return fail(format!("folds must be at least 2, got {}", self.folds));
        }
        Ok(())
    }

    pub fn srg_config(&self) -> SrgConfig {
        SrgConfig {
            enabled: self.enable_srg,
            iterations: if self.enable_psr { self.psr_iterations } else { 0 },
            tau1: self.tau1,
            tau2: self.tau2,
            cam_class: self.cam_class,
        }
    }

    pub fn add_options(&self) -> AddOptions {
        AddOptions {
            bidirectional: self.enable_bi_a,
            norm: self.feature_norm,
            gradient_flow: self.gradient_flow,
            normalization: self.dist_normalization,
        }
    }

    /// Configuration of the teacher's own training: classification only.
    pub fn teacher_variant(&self) -> TrainConfig {
        TrainConfig {
            enable_feature_distill: false,
            enable_logit_distill: false,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_dist: f64,
    pub l_logit: f64,
    pub l_cls: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_dist, self.l_logit, self.l_cls, self.l_total].iter().all(|v| v.is_finite())
    }
}

/// Differentiable loss terms of one batch.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub dist: Tensor,
    pub logit: Tensor,
    pub cls: Tensor,
}

impl LossTerms {
    pub fn total(&self) -> Result<Tensor> {
        Ok(((&self.dist + &self.logit)? + &self.cls)?)
    }

    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let (l_dist, l_logit, l_cls) = (scalar(&self.dist)?, scalar(&self.logit)?, scalar(&self.cls)?);
        Ok(LossBreakdown {
            l_dist,
            l_logit,
            l_cls,
            l_total: l_dist + l_logit + l_cls,
        })
    }
}

fn as_batch(logits: &Tensor) -> Result<Tensor> {
    match logits.rank() {
        1 => Ok(logits.unsqueeze(0)?),
        2 => Ok(logits.clone()),
        r => Err(contract(format!("logits must be rank 1 or 2, got rank {r}"))),
    }
}

/// Mean cross-entropy of softmaxed logits (`[B, 2]` or `[2]`) against labels.
pub fn classification_loss(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let logits = as_batch(logits)?;
    let (b, k) = logits.dims2()?;
    if b != labels.len() {
        return Err(contract(format!("{b} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= k.min(NUM_CLASSES)) {
        return Err(contract(format!("label {bad} outside {{0, 1}}")));
    }
    let target = Tensor::from_vec(labels.iter().map(|&y| u32::from(y)).collect::<Vec<_>>(), b, logits.device())?;
    Ok(candle_nn::loss::cross_entropy(&logits, &target)?)
}

/// Euclidean distance between student and teacher logits, averaged over the batch.
///
/// Uses `sqrt(d² + ε) − sqrt(ε)`, which is exactly 0 for identical logits and
/// differentiable there.
pub fn logit_distillation_loss(student: &Tensor, teacher: &Tensor, mode: LogitMode) -> Result<Tensor> {
    let (s, t) = (as_batch(student)?, as_batch(teacher)?.detach());
    if s.dims() != t.dims() {
        return Err(contract(format!("logit shapes differ: {:?} vs {:?}", s.dims(), t.dims())));
    }
    let (s, t) = match mode {
        LogitMode::Raw => (s, t),
        LogitMode::Softmax => (
            candle_nn::ops::softmax(&s, D::Minus1)?,
            candle_nn::ops::softmax(&t, D::Minus1)?,
        ),
    };
    const EPS: f64 = 1e-12;
    let d2 = (s - t)?.sqr()?.sum(D::Minus1)?;
    Ok((d2 + EPS)?.sqrt()?.affine(1.0, -EPS.sqrt())?.mean(0)?)
}

fn zero() -> Result<Tensor> {
    Ok(Tensor::zeros((), DType::F32, &Device::Cpu)?)
}

/// One prepared batch: tensors for the forward pass, arrays for the relation pipeline.
pub struct Batch {
    pub images_w: Vec<Array3<f32>>,
    pub images_n: Vec<Array3<f32>>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn from_samples(samples: &[PairedSample], input_size: usize) -> Self {
        let fit = |img: &Array3<f32>| {
            let (_, h, w) = img.dim();
            if h == input_size && w == input_size {
                img.clone()
            } else {
                resize_image(img.view(), input_size, input_size)
            }
        };
        Batch {
            images_w: samples.iter().map(|s| fit(&s.image_w)).collect(),
            images_n: samples.iter().map(|s| fit(&s.image_n)).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tensor_w(&self) -> Result<Tensor> {
        stack_images(self.images_w.iter().map(|a| a.view()))
    }

    pub fn tensor_n(&self) -> Result<Tensor> {
        stack_images(self.images_n.iter().map(|a| a.view()))
    }
}

/// Dense feature term for already-computed pyramids.
pub fn feature_distillation_term(
    student: &ClassifierHandle,
    teacher: &ClassifierHandle,
    ps: &FeaturePyramid,
    pt: &FeaturePyramid,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<Tensor> {
    if !cfg.enable_feature_distill {
        return zero();
    }
    if !cfg.enable_add {
        return aligned_consistency_loss(&ps.levels, &pt.levels);
    }
    let relations = relation_tensors(student, teacher, ps, pt, batch, cfg)?;
    add_loss_levels(&ps.levels, &pt.levels, &relations, cfg.add_options())
}

/// Stage → `[B, N, M]` relation matrices for a batch.
pub fn relation_tensors(
    student: &ClassifierHandle,
    teacher: &ClassifierHandle,
    ps: &FeaturePyramid,
    pt: &FeaturePyramid,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<BTreeMap<usize, Tensor>> {
    let views_w: Vec<ArrayView3<f32>> = batch.images_w.iter().map(|a| a.view()).collect();
    let views_n: Vec<ArrayView3<f32>> = batch.images_n.iter().map(|a| a.view()).collect();
    let maps = build_relations_batch(
        &ps.detach(),
        &pt.detach(),
        student.head_weights()?.view(),
        teacher.head_weights()?.view(),
        &views_w,
        &views_n,
        &batch.labels,
        &cfg.srg_config(),
    )?;
    batch_relation_tensors(&maps)
}

/// All loss terms for a student batch against a frozen teacher.
pub fn total_loss(student: &ClassifierHandle, teacher: &ClassifierHandle, batch: &Batch, cfg: &TrainConfig) -> Result<LossTerms> {
    let ps = student.forward(&batch.tensor_w()?)?;
    let cls = classification_loss(&ps.logits, &batch.labels)?;
    if !cfg.enable_feature_distill && !cfg.enable_logit_distill {
        return Ok(LossTerms {
            dist: zero()?,
            logit: zero()?,
            cls,
        });
    }
    let pt = teacher.forward(&batch.tensor_n()?)?.detach();
    let dist = feature_distillation_term(student, teacher, &ps, &pt, batch, cfg)?;
    let logit = if cfg.enable_logit_distill {
        logit_distillation_loss(&ps.logits, &pt.logits, cfg.logit_mode)?
    } else {
        zero()?
    };
    Ok(LossTerms { dist, logit, cls })
}

/// One record of the JSON-lines loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_dist: f64,
    pub l_logit: f64,
    pub l_cls: f64,
    pub l_total: f64,
}

/// Which images of each pair a training run consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    /// Classification on teacher-modality images only.
    Teacher,
    /// Student-modality images, distilled from a frozen teacher.
    Student,
}

fn load_batch<S: PairSource + ?Sized>(source: &S, indices: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut samples = indices.iter().map(|&i| source.load(i)).collect::<Result<Vec<_>>>()?;
    if cfg.hflip {
        for s in &mut samples {
            if rng.random_bool(0.5) {
                s.image_w = flip_horizontal(s.image_w.view());
                s.image_n = flip_horizontal(s.image_n.view());
            }
        }
    }
    Ok(Batch::from_samples(&samples, cfg.input_size))
}

fn optimize<S, F>(
    model: &ClassifierHandle,
    teacher: Option<&ClassifierHandle>,
    source: &S,
    cfg: &TrainConfig,
    role: Role,
    on_step: &mut F,
) -> Result<Vec<StepRecord>>
where
    S: PairSource + ?Sized,
    F: FnMut(&StepRecord) -> Result<()>,
{
    cfg.validate()?;
    if source.is_empty() {
        return Err(contract("training set is empty"));
    }
    let mut opt = AdamW::new(
        model.trainable_vars()?,
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0000);
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = load_batch(source, chunk, cfg, &mut rng)?;
            let terms = match (role, teacher) {
                (Role::Student, Some(t)) => total_loss(model, t, &batch, cfg)?,
                _ => {
                    let images = if role == Role::Teacher { batch.tensor_n()? } else { batch.tensor_w()? };
                    let logits = model.forward(&images)?.logits;
                    LossTerms {
                        dist: zero()?,
                        logit: zero()?,
                        cls: classification_loss(&logits, &batch.labels)?,
                    }
                }
            };
            let b = terms.breakdown()?;
            let record = StepRecord {
                step,
                epoch,
                l_dist: b.l_dist,
                l_logit: b.l_logit,
                l_cls: b.l_cls,
                l_total: b.l_total,
            };
            on_step(&record)?;
            log.push(record);
            if !b.is_finite() {
                return Err(Error::Divergence { step, epoch });
            }
            opt.backward_step(&terms.total()?)?;
            step += 1;
        }
    }
    Ok(log)
}

/// Trains a classifier on the teacher-modality images with cross-entropy only.
pub fn train_teacher<S, F>(teacher: &ClassifierHandle, source: &S, cfg: &TrainConfig, on_step: &mut F) -> Result<Vec<StepRecord>>
where
    S: PairSource + ?Sized,
    F: FnMut(&StepRecord) -> Result<()>,
{
    optimize(teacher, None, source, cfg, Role::Teacher, on_step)
}

/// Distills a frozen teacher into `student` on student-modality images.
///
/// Fails with [`Error::Invariant`] if the teacher's parameters changed.
pub fn train_student<S, F>(
    student: &ClassifierHandle,
    teacher: &ClassifierHandle,
    source: &S,
    cfg: &TrainConfig,
    on_step: &mut F,
) -> Result<Vec<StepRecord>>
where
    S: PairSource + ?Sized,
    F: FnMut(&StepRecord) -> Result<()>,
{
    if teacher.is_trainable() {
        return Err(contract("teacher must be frozen before distillation"));
    }
    if student.stage_taps() != teacher.stage_taps() {
        return Err(contract(format!(
            "stage taps differ: student {:?}, teacher {:?}",
            student.stage_taps(),
            teacher.stage_taps()
        )));
    }
    if student.backbone().stage_channels() != teacher.backbone().stage_channels() {
        return Err(contract("student and teacher backbones have different channel widths"));
    }
    let before = teacher.checksum()?;
    let log = optimize(student, Some(teacher), source, cfg, Role::Student, on_step)?;
    if teacher.checksum()? != before {
        return Err(Error::Invariant("teacher parameters changed during distillation".into()));
    }
    Ok(log)
}

/// Fresh classifier for `cfg`, or the configured initial checkpoint.
pub fn initial_classifier(cfg: &TrainConfig, seed: u64) -> Result<ClassifierHandle> {
    match &cfg.init_checkpoint {
        Some(path) => ClassifierHandle::load(path, true)?.with_stage_taps(&cfg.stage_taps),
        None => ClassifierHandle::new_random(cfg.backbone, &cfg.stage_taps, cfg.input_size, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn logits(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec(), (v.len() / 2, 2), &Device::Cpu).unwrap()
    }

    #[test]
    fn defaults_match_published_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.weight_decay, 1e-8);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.epochs, 200);
        assert_eq!(c.input_size, 448);
        assert_eq!(c.psr_iterations, 10);
        assert_eq!((c.tau1, c.tau2), (0.3, 0.7));
        assert!(c.enable_add && c.enable_srg && c.enable_bi_a && c.enable_psr);
        c.validate().unwrap();
    }

    #[test]
    fn cross_entropy_values() {
        assert!((scalar(&classification_loss(&logits(&[0.0, 0.0]), &[1]).unwrap()) - 2f64.ln()).abs() < 1e-6);
        let v = scalar(&classification_loss(&logits(&[2.0, 0.0]), &[1]).unwrap());
        assert!((v - (1.0 + 2f64.exp()).ln()).abs() < 1e-5, "{v}");
        assert!(scalar(&classification_loss(&logits(&[-30.0, 30.0]), &[1]).unwrap()) < 1e-12);
        assert!(classification_loss(&logits(&[0.0, 0.0]), &[2]).is_err());
    }

    #[test]
    fn logit_distance_values() {
        let a = logits(&[1.0, 0.0]);
        let b = logits(&[0.0, 1.0]);
        let v = scalar(&logit_distillation_loss(&a, &b, LogitMode::Raw).unwrap());
        assert!((v - 2f64.sqrt()).abs() < 1e-6);
        assert_eq!(scalar(&logit_distillation_loss(&a, &a, LogitMode::Raw).unwrap()), 0.0);
        let shifted = (a.clone() + 3.0).unwrap();
        let shifted_b = (b.clone() + 3.0).unwrap();
        let w = scalar(&logit_distillation_loss(&shifted, &shifted_b, LogitMode::Raw).unwrap());
        assert!((w - v).abs() < 1e-6);
        assert!(logit_distillation_loss(&a, &logits(&[0.0, 1.0, 2.0, 3.0]), LogitMode::Raw).is_err());
    }

    fn tiny_setup(n: usize) -> (ClassifierHandle, ClassifierHandle, Vec<PairedSample>, TrainConfig) {
        let cfg = TrainConfig {
            input_size: 64,
            batch_size: 4,
            epochs: 1,
            learning_rate: 1e-3,
            hflip: false,
            ..Default::default()
        };
        let data = SyntheticSpec {
            n,
            warp_magnitude: 0.5,
            seed: 1,
            size: 64,
        }
        .generate()
        .unwrap();
        let teacher = ClassifierHandle::new_random(cfg.backbone, &cfg.stage_taps, 64, 1).unwrap().freeze();
        let student = ClassifierHandle::new_random(cfg.backbone, &cfg.stage_taps, 64, 2).unwrap();
        (student, teacher, data, cfg)
    }

    #[test]
    fn baseline_total_is_classification_only() {
        let (student, teacher, data, cfg) = tiny_setup(4);
        let cfg = TrainConfig {
            enable_feature_distill: false,
            enable_logit_distill: false,
            ..cfg
        };
        let b = total_loss(&student, &teacher, &Batch::from_samples(&data, 64), &cfg)
            .unwrap()
            .breakdown()
            .unwrap();
        assert_eq!(b.l_dist, 0.0);
        assert_eq!(b.l_logit, 0.0);
        assert_eq!(b.l_total, b.l_cls);
    }

    #[test]
    fn one_epoch_smoke_keeps_teacher_frozen() {
        // A 2x2 activation map would be smoothed to a constant by refinement, leaving no relations.
        let (student, teacher, data, cfg) = tiny_setup(4);
        let cfg = TrainConfig { enable_psr: false, ..cfg };
        let before = teacher.checksum().unwrap();
        let mut seen = 0;
        let log = train_student(&student, &teacher, &data, &cfg, &mut |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(seen, 1);
        assert!(log[0].l_dist > 0.0 && log[0].l_logit > 0.0 && log[0].l_cls > 0.0, "{:?}", log[0]);
        assert!((log[0].l_total - (log[0].l_dist + log[0].l_logit + log[0].l_cls)).abs() < 1e-9);
        assert_eq!(teacher.checksum().unwrap(), before);
    }

    #[test]
    fn trainable_teacher_is_refused() {
        let (student, teacher, data, cfg) = tiny_setup(4);
        let unfrozen = ClassifierHandle::new_random(cfg.backbone, &cfg.stage_taps, 64, 9).unwrap();
        assert!(train_student(&student, &unfrozen, &data, &cfg, &mut |_| Ok(())).is_err());
        assert!(teacher.trainable_vars().is_err());
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { input_size: 100, ..Default::default() },
            TrainConfig { tau1: 0.8, tau2: 0.2, ..Default::default() },
            TrainConfig { stage_taps: vec![5], ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
