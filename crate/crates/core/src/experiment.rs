//! Experiment drivers: affinity oracle checks, correspondence recovery and
//! patient-level cross-validation of distillation variants.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::affinity::{cosine_similarity_matrix, oracle, scale_loss, AddOptions, AffinityField};
use crate::data::{kfold_split, sample_correspondence, PairSource, PairedSample, Subset};
use crate::error::{contract, Error, Result};
use crate::eval::{aggregate_folds, evaluate, FoldSummary, MetricsReport, Modality};
use crate::model::ClassifierHandle;
use crate::objective::{initial_classifier, train_student, train_teacher, StepRecord, TrainConfig};

/// Random single-scale instance: `side × side` maps with `channels` channels
/// and each relation set to 1 with probability `density` (at least one per instance).
pub fn random_instance(seed: u64, side: usize, channels: usize, density: f64) -> oracle::Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = side * side;
    let vectors = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..channels).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    };
    let student = vectors(&mut rng);
    let teacher = vectors(&mut rng);
    let mut relations: Vec<Vec<u8>> = (0..n)
        .map(|_| (0..n).map(|_| u8::from(rng.random_bool(density))).collect())
        .collect();
    if relations.iter().flatten().all(|&r| r == 0) {
        relations[0][0] = 1;
    }
    oracle::Instance {
        student,
        teacher,
        relations,
    }
}

/// `[C, 1, N]` tensor of an instance side, and the `[N, M]` relation tensor.
pub fn instance_tensors(inst: &oracle::Instance) -> Result<(Tensor, Tensor, Tensor)> {
    let map = |vectors: &[Vec<f64>]| -> Result<Tensor> {
        let n = vectors.len();
        let c = vectors.first().map_or(0, Vec::len);
        let mut data = vec![0f32; c * n];
        for (p, v) in vectors.iter().enumerate() {
            for (ch, x) in v.iter().enumerate() {
                data[ch * n + p] = *x as f32;
            }
        }
        Ok(Tensor::from_vec(data, (c, 1, n), &Device::Cpu)?)
    };
    let r: Vec<f32> = inst.relations.iter().flatten().map(|&v| f32::from(v)).collect();
    let rel = Tensor::from_vec(r, (inst.n_student(), inst.n_teacher()), &Device::Cpu)?;
    Ok((map(&inst.student)?, map(&inst.teacher)?, rel))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub seed: u64,
    pub brute_force_loss: f64,
    pub vectorized_loss: f64,
    pub relative_deviation: f64,
    pub brute_force_loss_unidirectional: f64,
    pub vectorized_loss_unidirectional: f64,
    pub relative_deviation_unidirectional: f64,
    /// Largest absolute difference over both directed affinities and the path matrix.
    pub max_affinity_deviation: f64,
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Compares the tensor pipeline with the scalar reference on one random
/// `4 × 4 × 8` instance with at least 30% active relations.
pub fn oracle_check(seed: u64) -> Result<OracleReport> {
    let inst = random_instance(seed, 4, 8, 0.5);
    let (fw, fn_, rel) = instance_tensors(&inst)?;
    let field = AffinityField::compute(&fw, &fn_, &rel, true)?;
    let dirs = [
        field.a_n_given_w.to_vec2::<f32>()?,
        field.a_w_given_n.to_vec2::<f32>()?,
        field.path.to_vec2::<f32>()?,
    ];
    let mut max_dev = 0f64;
    for i in 0..inst.n_student() {
        for j in 0..inst.n_teacher() {
            let refs = [inst.a_n_given_w(i, j), inst.a_w_given_n(i, j), inst.path(i, j, true)];
            for (m, r) in dirs.iter().zip(refs) {
                max_dev = max_dev.max((f64::from(m[i][j]) - r).abs());
            }
        }
    }
    let loss = |bidirectional: bool| -> Result<f64> {
        let opts = AddOptions {
            bidirectional,
            ..Default::default()
        };
        Ok(f64::from(scale_loss(&fw, &fn_, &rel, opts)?.to_scalar::<f32>()?))
    };
    let (v_bi, v_uni) = (loss(true)?, loss(false)?);
    let (o_bi, o_uni) = (inst.loss(true), inst.loss(false));
    Ok(OracleReport {
        seed,
        brute_force_loss: o_bi,
        vectorized_loss: v_bi,
        relative_deviation: relative(o_bi, v_bi),
        brute_force_loss_unidirectional: o_uni,
        vectorized_loss_unidirectional: v_uni,
        relative_deviation_unidirectional: relative(o_uni, v_uni),
        max_affinity_deviation: max_dev,
    })
}

/// Lesion coverage of each feature cell is at least half.
pub fn lesion_cells(mask: &Array2<bool>, grid: (usize, usize)) -> Array2<bool> {
    let (h, w) = mask.dim();
    let (gh, gw) = grid;
    Array2::from_shape_fn(grid, |(r, c)| {
        let (y0, y1) = (r * h / gh, (r + 1) * h / gh);
        let (x0, x1) = (c * w / gw, (c + 1) * w / gw);
        let cell = mask.slice(ndarray::s![y0..y1, x0..x1]);
        let inside = cell.iter().filter(|&&m| m).count();
        2 * inside >= cell.len()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceStats {
    /// Lesion cells with an in-view ground-truth counterpart.
    pub evaluated_cells: usize,
    /// Cells whose most similar teacher cell is within one cell (Chebyshev) of the truth.
    pub hits: usize,
    pub rate: f64,
}

/// For every lesion cell of each student image, checks whether the teacher
/// cell of highest affinity at `stage` lies within one cell of the true counterpart.
///
/// With every relation active the affinity row is a softmax of cosine
/// similarities, so its argmax is the most similar teacher cell.
pub fn correspondence_recovery(
    student: &ClassifierHandle,
    teacher: &ClassifierHandle,
    samples: &[PairedSample],
    stage: usize,
) -> Result<CorrespondenceStats> {
    let (mut evaluated, mut hits) = (0usize, 0usize);
    for s in samples {
        let mask = s.gt_lesion_mask_w.as_ref().ok_or(Error::MissingWarp)?;
        let fw = student.extract(s.image_w.view())?.level(stage)?.detach();
        let fnn = teacher.extract(s.image_n.view())?.level(stage)?.detach();
        let (_, _, gh, gw) = fw.dims4()?;
        let sim = cosine_similarity_matrix(&fw.squeeze(0)?, &fnn.squeeze(0)?)?;
        let best: Vec<u32> = sim.argmax(1)?.to_vec1()?;
        let truth = sample_correspondence(s, (gh, gw))?;
        let lesion = lesion_cells(mask, (gh, gw));
        for ((r, c), t) in truth.indexed_iter() {
            let (Some(t), true) = (t, lesion[[r, c]]) else { continue };
            evaluated += 1;
            let b = best[r * gw + c] as usize;
            let (br, bc) = (b / gw, b % gw);
            let (tr, tc) = (t / gw, t % gw);
            if br.abs_diff(tr) <= 1 && bc.abs_diff(tc) <= 1 {
                hits += 1;
            }
        }
    }
    Ok(CorrespondenceStats {
        evaluated_cells: evaluated,
        hits,
        rate: if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 },
    })
}

/// The comparison set, from strongest to weakest expected transfer:
/// masked affinity distillation, unmasked affinity distillation, logit
/// distillation with a same-position feature consistency term, and
/// independent training without any teacher interaction.
pub fn standard_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let full = TrainConfig {
        enable_feature_distill: true,
        enable_logit_distill: true,
        enable_add: true,
        enable_srg: true,
        ..base.clone()
    };
    vec![
        ("add+srg".into(), full.clone()),
        (
            "add".into(),
            TrainConfig {
                enable_srg: false,
                ..full.clone()
            },
        ),
        (
            "logit".into(),
            TrainConfig {
                enable_add: false,
                enable_srg: false,
                ..full.clone()
            },
        ),
        (
            "cic".into(),
            TrainConfig {
                enable_feature_distill: false,
                enable_logit_distill: false,
                ..full
            },
        ),
    ]
}

/// Progress notifications of a cross-validation run.
#[derive(Debug, Clone)]
pub enum CvEvent<'a> {
    Step { fold: usize, run: &'a str, record: &'a StepRecord },
    Evaluated { fold: usize, run: &'a str, report: &'a MetricsReport },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub teacher: FoldSummary,
    pub variants: BTreeMap<String, FoldSummary>,
    pub fold_reports: BTreeMap<String, Vec<MetricsReport>>,
}

/// Patient-level `teacher_cfg.folds`-fold cross-validation. Per fold a teacher is
/// trained on the training patients' teacher-modality images and frozen, then
/// each variant's student (same initialization across variants) is distilled
/// and scored on the held-out student-modality images.
pub fn cross_validate<S, F>(
    source: &S,
    teacher_cfg: &TrainConfig,
    variants: &[(String, TrainConfig)],
    on_event: &mut F,
) -> Result<CvOutcome>
where
    S: PairSource + ?Sized,
    F: FnMut(CvEvent<'_>) -> Result<()>,
{
    if variants.is_empty() {
        return Err(contract("no variants to cross-validate"));
    }
    let plan = kfold_split(source, teacher_cfg.folds, teacher_cfg.seed)?;
    let mut fold_reports: BTreeMap<String, Vec<MetricsReport>> = BTreeMap::new();
    for fold in 0..plan.k() {
        let (train_idx, test_idx) = plan.split_indices(fold, source);
        let train = Subset::new(source, train_idx);
        let test = Subset::new(source, test_idx);

        let fold_seed = teacher_cfg.seed.wrapping_add(1000 * fold as u64);
        let teacher = initial_classifier(teacher_cfg, fold_seed)?;
        let tcfg = TrainConfig {
            seed: fold_seed,
            ..teacher_cfg.teacher_variant()
        };
        train_teacher(&teacher, &train, &tcfg, &mut |r| {
            on_event(CvEvent::Step {
                fold,
                run: "teacher",
                record: r,
            })
        })?;
        let teacher = teacher.freeze();
        let report = evaluate(&teacher, &test, Modality::Nbi, tcfg.batch_size)?;
        on_event(CvEvent::Evaluated {
            fold,
            run: "teacher",
            report: &report,
        })?;
        fold_reports.entry("teacher".into()).or_default().push(report);

        for (name, vcfg) in variants {
            let vcfg = TrainConfig {
                seed: fold_seed + 1,
                ..vcfg.clone()
            };
            let student = initial_classifier(&vcfg, fold_seed + 1)?;
            train_student(&student, &teacher, &train, &vcfg, &mut |r| {
                on_event(CvEvent::Step { fold, run: name, record: r })
            })?;
            let report = evaluate(&student, &test, Modality::Wli, vcfg.batch_size)?;
            on_event(CvEvent::Evaluated {
                fold,
                run: name,
                report: &report,
            })?;
            fold_reports.entry(name.clone()).or_default().push(report);
        }
    }
    let teacher = aggregate_folds(&fold_reports["teacher"])?;
    let variants = variants
        .iter()
        .map(|(name, _)| Ok((name.clone(), aggregate_folds(&fold_reports[name])?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(CvOutcome {
        teacher,
        variants,
        fold_reports,
    })
}
