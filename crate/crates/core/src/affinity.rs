//! Relation-masked cross-domain affinities and the dense distillation loss.
//!
//! Feature maps are flattened to `N = H·W` position vectors. Matrices are
//! indexed `(p_w, p_n)`: rows are student (white-light) positions, columns
//! are teacher (narrow-band) positions. All functions accept either a single
//! `[C, H, W]` map or a batch `[B, C, H, W]`; matrix outputs are then
//! `[N, M]` or `[B, N, M]` respectively.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::FeaturePyramid;

const NORM_FLOOR_SQ: f64 = 1e-16;
const DISTANCE_FLOOR_SQ: f64 = 1e-12;

/// Which side is conditioned on when normalizing a masked softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `A(p_n | p_w)`: each student row is normalized over teacher positions.
    TeacherGivenStudent,
    /// `A(p_w | p_n)`: each teacher column is normalized over student positions.
    StudentGivenTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureNorm {
    L1,
    #[default]
    L2,
}

/// Whether the distillation gradient also flows through the affinity weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientFlow {
    #[default]
    Full,
    StopAffinity,
}

/// Denominator of the path-weighted distance sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathNormalization {
    /// Total path probability `Σ P`: a weighted mean distance, independent of the grid size.
    #[default]
    PathMass,
    /// Number of pairs with `P > 0`.
    ActivePairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddOptions {
    pub bidirectional: bool,
    pub norm: FeatureNorm,
    pub gradient_flow: GradientFlow,
    pub normalization: PathNormalization,
}

impl Default for AddOptions {
    fn default() -> Self {
        Self {
            bidirectional: true,
            norm: FeatureNorm::L2,
            gradient_flow: GradientFlow::Full,
            normalization: PathNormalization::PathMass,
        }
    }
}

/// Returns `[B, N, C]` position vectors and whether the input was unbatched.
fn positions(features: &Tensor) -> Result<(Tensor, bool)> {
    match features.rank() {
        3 => Ok((features.unsqueeze(0)?.flatten_from(2)?.transpose(1, 2)?, true)),
        4 => Ok((features.flatten_from(2)?.transpose(1, 2)?, false)),
        r => Err(contract(format!("feature map must be [C,H,W] or [B,C,H,W], got rank {r}"))),
    }
}

fn batched_matrix(m: &Tensor) -> Result<(Tensor, bool)> {
    match m.rank() {
        2 => Ok((m.unsqueeze(0)?, true)),
        3 => Ok((m.clone(), false)),
        r => Err(contract(format!("affinity matrix must be rank 2 or 3, got rank {r}"))),
    }
}

fn unbatch(t: Tensor, single: bool) -> Result<Tensor> {
    Ok(if single { t.squeeze(0)? } else { t })
}

fn paired_positions(fw: &Tensor, fn_: &Tensor) -> Result<(Tensor, Tensor, bool)> {
    let (w, single_w) = positions(fw)?;
    let (n, single_n) = positions(fn_)?;
    if single_w != single_n {
        return Err(contract("student and teacher maps must both be batched or both unbatched"));
    }
    let (bw, _, cw) = w.dims3()?;
    let (bn, _, cn) = n.dims3()?;
    if cw != cn {
        return Err(contract(format!("channel mismatch: student {cw}, teacher {cn}")));
    }
    if bw != bn {
        return Err(contract(format!("batch mismatch: student {bw}, teacher {bn}")));
    }
    Ok((w, n, single_w))
}

fn unit_vectors(v: &Tensor) -> Result<Tensor> {
    let norm = v.sqr()?.sum_keepdim(D::Minus1)?.maximum(NORM_FLOOR_SQ)?.sqrt()?;
    Ok(v.broadcast_div(&norm)?)
}

/// `S[p_w, p_n]` = cosine similarity of student and teacher feature vectors.
///
/// Norms are floored at `1e-8`, so a zero vector has similarity 0 to everything.
pub fn cosine_similarity_matrix(fw: &Tensor, fn_: &Tensor) -> Result<Tensor> {
    let (w, n, single) = paired_positions(fw, fn_)?;
    let s = unit_vectors(&w)?.matmul(&unit_vectors(&n)?.transpose(1, 2)?.contiguous()?)?;
    unbatch(s, single)
}

/// Masked softmax of `exp(S)·R` along the direction's normalization axis.
///
/// Rows (or columns) whose mask is entirely zero come back as zeros.
pub fn directed_affinity(similarity: &Tensor, relations: &Tensor, direction: Direction) -> Result<Tensor> {
    if similarity.dims() != relations.dims() {
        return Err(contract(format!(
            "similarity {:?} and relation {:?} shapes differ",
            similarity.dims(),
            relations.dims()
        )));
    }
    let (s, single) = batched_matrix(similarity)?;
    let r = batched_matrix(relations)?.0.to_dtype(s.dtype())?;
    let axis = match direction {
        Direction::TeacherGivenStudent => 2,
        Direction::StudentGivenTeacher => 1,
    };
    let weights = (s.exp()? * r)?;
    let denom = weights.sum_keepdim(axis)?;
    let empty = denom.eq(0.0)?.to_dtype(s.dtype())?;
    let a = weights.broadcast_div(&(denom + empty)?)?;
    unbatch(a, single)
}

fn union(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(((a + b)? - (a * b)?)?)
}

/// Probabilistic union `a + b − a·b` of the two directed affinities.
pub fn path_probability(a_n_given_w: &Tensor, a_w_given_n: &Tensor) -> Result<Tensor> {
    if a_n_given_w.dims() != a_w_given_n.dims() {
        return Err(contract("directed affinity shapes differ"));
    }
    for m in [a_n_given_w, a_w_given_n] {
        let flat = m.detach().flatten_all()?.to_dtype(DType::F64)?;
        let lo: f64 = flat.min(0)?.to_scalar()?;
        let hi: f64 = flat.max(0)?.to_scalar()?;
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(contract(format!("affinity entries must lie in [0,1], found [{lo}, {hi}]")));
        }
    }
    union(a_n_given_w, a_w_given_n)
}

/// `[B, N, M]` pairwise feature distances between student and teacher positions.
fn pairwise_distance(w: &Tensor, n: &Tensor, norm: FeatureNorm) -> Result<Tensor> {
    match norm {
        FeatureNorm::L2 => {
            let wsq = w.sqr()?.sum_keepdim(2)?;
            let nsq = n.sqr()?.sum_keepdim(2)?.transpose(1, 2)?;
            let cross = w.matmul(&n.transpose(1, 2)?.contiguous()?)?;
            let d2 = wsq.broadcast_add(&nsq)?.sub(&cross.affine(2.0, 0.0)?)?;
            Ok(d2.maximum(DISTANCE_FLOOR_SQ)?.sqrt()?)
        }
        FeatureNorm::L1 => {
            let diff = w.unsqueeze(2)?.broadcast_sub(&n.unsqueeze(1)?)?;
            Ok(diff.abs()?.sum(3)?)
        }
    }
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let ok = t
        .detach()
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .iter()
        .all(|v| v.is_finite());
    if ok {
        Ok(())
    } else {
        Err(Error::RejectedInput(format!("{what} contains non-finite values")))
    }
}

/// Path-weighted feature distance, normalized per sample and averaged over the batch.
///
/// A sample without any path contributes 0.
pub fn dense_distillation_loss(
    fw: &Tensor,
    fn_: &Tensor,
    path: &Tensor,
    norm: FeatureNorm,
    normalization: PathNormalization,
) -> Result<Tensor> {
    ensure_finite(fw, "student features")?;
    ensure_finite(fn_, "teacher features")?;
    let (w, n, _) = paired_positions(fw, fn_)?;
    let (p, _) = batched_matrix(path)?;
    let dist = pairwise_distance(&w, &n, norm)?;
    if dist.dims() != p.dims() {
        return Err(contract(format!(
            "path matrix {:?} does not match position grid {:?}",
            p.dims(),
            dist.dims()
        )));
    }
    let weighted = (&p * &dist)?.sum((1, 2))?;
    let denom = match normalization {
        PathNormalization::PathMass => {
            let mass = p.sum((1, 2))?;
            let empty = mass.eq(0.0)?.to_dtype(p.dtype())?;
            (mass + empty)?
        }
        PathNormalization::ActivePairs => p.detach().gt(0.0)?.to_dtype(p.dtype())?.sum((1, 2))?.maximum(1.0)?,
    };
    Ok((weighted / denom)?.mean(0)?)
}

/// Similarities, both directed affinities and the path probability for one scale.
#[derive(Debug, Clone)]
pub struct AffinityField {
    pub similarity: Tensor,
    pub a_n_given_w: Tensor,
    /// Stored in `(p_w, p_n)` orientation: entry `(i, j)` is `A(p_w = i | p_n = j)`.
    pub a_w_given_n: Tensor,
    pub path: Tensor,
}

impl AffinityField {
    pub fn compute(fw: &Tensor, fn_: &Tensor, relations: &Tensor, bidirectional: bool) -> Result<Self> {
        let similarity = cosine_similarity_matrix(fw, fn_)?;
        let a_n_given_w = directed_affinity(&similarity, relations, Direction::TeacherGivenStudent)?;
        let a_w_given_n = directed_affinity(&similarity, relations, Direction::StudentGivenTeacher)?;
        let path = if bidirectional {
            union(&a_n_given_w, &a_w_given_n)?
        } else {
            a_n_given_w.clone()
        };
        Ok(Self {
            similarity,
            a_n_given_w,
            a_w_given_n,
            path,
        })
    }
}

/// Dense distillation loss at one scale, including affinity construction.
pub fn scale_loss(fw: &Tensor, fn_: &Tensor, relations: &Tensor, opts: AddOptions) -> Result<Tensor> {
    let teacher = fn_.detach();
    let field = AffinityField::compute(fw, &teacher, relations, opts.bidirectional)?;
    let path = match opts.gradient_flow {
        GradientFlow::Full => field.path,
        GradientFlow::StopAffinity => field.path.detach(),
    };
    dense_distillation_loss(fw, &teacher, &path, opts.norm, opts.normalization)
}

/// Mean of [`scale_loss`] over the given levels (`stage → [B, C, H, W]`).
pub fn add_loss_levels(
    student: &BTreeMap<usize, Tensor>,
    teacher: &BTreeMap<usize, Tensor>,
    relations: &BTreeMap<usize, Tensor>,
    opts: AddOptions,
) -> Result<Tensor> {
    if !student.keys().eq(teacher.keys()) {
        return Err(contract(format!(
            "stage taps differ: student {:?}, teacher {:?}",
            student.keys().collect::<Vec<_>>(),
            teacher.keys().collect::<Vec<_>>()
        )));
    }
    if student.is_empty() {
        return Err(contract("no stage taps to distill"));
    }
    let mut losses = Vec::with_capacity(student.len());
    for (stage, fw) in student {
        let r = relations
            .get(stage)
            .ok_or_else(|| contract(format!("no relation matrix for stage {stage}")))?;
        losses.push(scale_loss(fw, &teacher[stage], r, opts)?);
    }
    Ok(Tensor::stack(&losses, 0)?.mean(0)?)
}

/// Multi-scale dense distillation loss between two pyramids with identical taps.
pub fn add_loss_all_scales(
    student: &FeaturePyramid,
    teacher: &FeaturePyramid,
    relations: &BTreeMap<usize, Tensor>,
    opts: AddOptions,
) -> Result<Tensor> {
    add_loss_levels(&student.levels, &teacher.levels, relations, opts)
}

/// Same-position feature consistency: mean L2 distance between aligned cells,
/// averaged over levels and batch. Used when dense distillation is disabled.
pub fn aligned_consistency_loss(student: &BTreeMap<usize, Tensor>, teacher: &BTreeMap<usize, Tensor>) -> Result<Tensor> {
    if !student.keys().eq(teacher.keys()) || student.is_empty() {
        return Err(contract("stage taps differ or are empty"));
    }
    let mut losses = Vec::with_capacity(student.len());
    for (stage, fw) in student {
        let fn_ = teacher[stage].detach();
        if fw.dims() != fn_.dims() {
            return Err(contract(format!("stage {stage} shapes differ")));
        }
        let d2 = (fw - fn_)?.sqr()?.sum_keepdim(fw.rank() - 3)?;
        losses.push(d2.maximum(DISTANCE_FLOOR_SQ)?.sqrt()?.mean_all()?);
    }
    Ok(Tensor::stack(&losses, 0)?.mean(0)?)
}

/// Scalar double-loop reference implementation of the affinity pipeline.
///
/// Works on plain `Vec`s in `f64` and shares no code with the tensor path.
pub mod oracle {
    /// One scale: `student[i]`, `teacher[j]` are channel vectors, `relations[i][j] ∈ {0, 1}`.
    #[derive(Debug, Clone)]
    pub struct Instance {
        pub student: Vec<Vec<f64>>,
        pub teacher: Vec<Vec<f64>>,
        pub relations: Vec<Vec<u8>>,
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (norm(a).max(1e-8) * norm(b).max(1e-8))
    }

    pub fn distance(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    impl Instance {
        pub fn n_student(&self) -> usize {
            self.student.len()
        }

        pub fn n_teacher(&self) -> usize {
            self.teacher.len()
        }

        /// `A(p_n = j | p_w = i)`.
        pub fn a_n_given_w(&self, i: usize, j: usize) -> f64 {
            if self.relations[i][j] == 0 {
                return 0.0;
            }
            let mut denom = 0.0;
            for k in 0..self.n_teacher() {
                if self.relations[i][k] == 1 {
                    denom += cosine(&self.student[i], &self.teacher[k]).exp();
                }
            }
            cosine(&self.student[i], &self.teacher[j]).exp() / denom
        }

        /// `A(p_w = i | p_n = j)`.
        pub fn a_w_given_n(&self, i: usize, j: usize) -> f64 {
            if self.relations[i][j] == 0 {
                return 0.0;
            }
            let mut denom = 0.0;
            for k in 0..self.n_student() {
                if self.relations[k][j] == 1 {
                    denom += cosine(&self.teacher[j], &self.student[k]).exp();
                }
            }
            cosine(&self.teacher[j], &self.student[i]).exp() / denom
        }

        pub fn path(&self, i: usize, j: usize, bidirectional: bool) -> f64 {
            let a = self.a_n_given_w(i, j);
            if !bidirectional {
                return a;
            }
            let b = self.a_w_given_n(i, j);
            a + b - a * b
        }

        /// Dense distillation loss normalized by the total path probability.
        pub fn loss(&self, bidirectional: bool) -> f64 {
            let (total, mass, _) = self.sums(bidirectional);
            if mass > 0.0 {
                total / mass
            } else {
                0.0
            }
        }

        /// Dense distillation loss normalized by the number of active pairs.
        pub fn loss_per_active_pair(&self, bidirectional: bool) -> f64 {
            let (total, _, active) = self.sums(bidirectional);
            total / active.max(1) as f64
        }

        fn sums(&self, bidirectional: bool) -> (f64, f64, usize) {
            let (mut total, mut mass, mut active) = (0.0, 0.0, 0usize);
            for i in 0..self.n_student() {
                for j in 0..self.n_teacher() {
                    let p = self.path(i, j, bidirectional);
                    if p > 0.0 {
                        active += 1;
                    }
                    mass += p;
                    total += p * distance(&self.student[i], &self.teacher[j]);
                }
            }
            (total, mass, active)
        }
    }
}
