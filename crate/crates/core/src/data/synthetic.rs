//! Synthetic misaligned image pairs with known correspondences.
//!
//! A procedural scene (tissue shading, shared mucosal texture, one elliptical
//! lesion) is rendered twice. The student rendering shows the lesion's fine
//! striations at low contrast; the teacher rendering shows them strongly and
//! is resampled through a random homography. Class 1 lesions carry
//! high-frequency striations, class 0 lesions a smooth pattern with the same
//! mean darkening, so the class is only visible in the texture.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, ManifestEntry, WarpRecord, WARP_SIDECAR};
use super::{Homography, PairedSample};
use crate::error::{contract, Result};
use crate::imaging::{save_mask_png, save_png};
use crate::model::BackboneId;

/// Relative corner displacement at `warp_magnitude = 1`.
const MAX_CORNER_JITTER: f64 = 0.15;
/// Mean of `((1 + cos)/2)^3`; class-0 lesions use it as their flat vessel level.
const STRIATION_MEAN: f64 = 0.3125;
const STUDENT_VESSEL_CONTRAST: f64 = 0.15;
const TEACHER_VESSEL_CONTRAST: f64 = 0.55;

#[derive(Debug, Clone, Copy)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, wavelength: (f64, f64), amp: f64) -> Self {
        let lambda = rng.random_range(wavelength.0..wavelength.1);
        let theta = rng.random_range(0.0..PI);
        let k = 2.0 * PI / lambda;
        Wave {
            kx: k * theta.cos(),
            ky: k * theta.sin(),
            phase: rng.random_range(0.0..2.0 * PI),
            amp,
        }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        self.amp * (self.kx * x + self.ky * y + self.phase).cos()
    }
}

struct Scene {
    class: u8,
    base_w: [f64; 3],
    base_n: [f64; 3],
    tint_w: [f64; 3],
    tint_n: [f64; 3],
    shading: Vec<Wave>,
    texture: Vec<Wave>,
    striation: Wave,
    bend: Wave,
    smooth: Wave,
    centre: (f64, f64),
    axes: (f64, f64),
    rotation: (f64, f64),
    edge: f64,
}

impl Scene {
    fn new(seed: u64, class: u8, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(class) << 63) ^ 0x5eed_1e55);
        let s = size as f64;
        let scale = s / 224.0;
        let mut jitter = |v: [f64; 3], d: f64| v.map(|c| c + rng.random_range(-d..d));
        let base_w = jitter([0.78, 0.42, 0.38], 0.05);
        let base_n = jitter([0.45, 0.50, 0.52], 0.05);
        let tint_w = jitter([0.06, -0.04, -0.03], 0.02);
        let tint_n = jitter([-0.06, -0.08, -0.02], 0.02);
        let shading = (0..3).map(|_| Wave::random(&mut rng, (0.8 * s, 2.0 * s), 0.05)).collect();
        let texture = (0..6)
            .map(|_| Wave::random(&mut rng, (6.0 * scale, 22.0 * scale), 0.018))
            .collect();
        let striation = Wave::random(&mut rng, ((7.0 * scale).max(3.0), (10.0 * scale).max(3.5)), 1.0);
        let bend = Wave::random(&mut rng, (0.3 * s, 0.6 * s), 1.2);
        let smooth = Wave::random(&mut rng, (0.25 * s, 0.5 * s), 0.08);
        let centre = (rng.random_range(0.3 * s..0.7 * s), rng.random_range(0.3 * s..0.7 * s));
        let axes = (rng.random_range(0.12 * s..0.2 * s), rng.random_range(0.12 * s..0.2 * s));
        let angle: f64 = rng.random_range(0.0..PI);
        Scene {
            class,
            base_w,
            base_n,
            tint_w,
            tint_n,
            shading,
            texture,
            striation,
            bend,
            smooth,
            centre,
            axes,
            rotation: (angle.cos(), angle.sin()),
            edge: 0.08,
        }
    }

    /// Normalized elliptical radius: 1 on the lesion boundary.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.centre.0, y - self.centre.1);
        let u = dx * self.rotation.0 + dy * self.rotation.1;
        let v = -dx * self.rotation.1 + dy * self.rotation.0;
        ((u / self.axes.0).powi(2) + (v / self.axes.1).powi(2)).sqrt()
    }

    fn lesion(&self, x: f64, y: f64) -> f64 {
        1.0 / (1.0 + ((self.radius(x, y) - 1.0) / self.edge).exp())
    }

    fn vessels(&self, x: f64, y: f64) -> f64 {
        if self.class == 1 {
            let phase = self.bend.eval(x, y);
            let c = (self.striation.kx * x + self.striation.ky * y + self.striation.phase + phase).cos();
            (0.5 + 0.5 * c).powi(3)
        } else {
            STRIATION_MEAN + self.smooth.eval(x, y)
        }
    }

    /// Student (`teacher = false`) or teacher rendering at scene point `(x, y)`.
    fn colour(&self, x: f64, y: f64, teacher: bool) -> [f32; 3] {
        let shade = 1.0 + self.shading.iter().map(|w| w.eval(x, y)).sum::<f64>();
        let texture: f64 = self.texture.iter().map(|w| w.eval(x, y)).sum();
        let m = self.lesion(x, y);
        let v = self.vessels(x, y);
        let (base, tint, contrast, tex_gain) = if teacher {
            (&self.base_n, &self.tint_n, TEACHER_VESSEL_CONTRAST, [0.6, 0.8, 0.7])
        } else {
            (&self.base_w, &self.tint_w, STUDENT_VESSEL_CONTRAST, [1.0, 0.9, 0.8])
        };
        let vessel_colour = if teacher { [0.9, 1.0, 0.6] } else { [0.7, 1.0, 0.9] };
        let mut out = [0f32; 3];
        for c in 0..3 {
            let value = base[c] * shade + texture * tex_gain[c] + m * tint[c] - m * v * contrast * vessel_colour[c];
            out[c] = value.clamp(0.0, 1.0) as f32;
        }
        out
    }
}

fn random_warp(rng: &mut ChaCha8Rng, warp_magnitude: f64, size: usize) -> Result<Homography> {
    if warp_magnitude == 0.0 {
        return Ok(Homography::identity());
    }
    let s = size as f64;
    let reach = warp_magnitude * MAX_CORNER_JITTER * s;
    let corners = [(0.0, 0.0), (s, 0.0), (s, s), (0.0, s)];
    let moved = corners.map(|(x, y)| (x + rng.random_range(-reach..=reach), y + rng.random_range(-reach..=reach)));
    Homography::from_correspondences(&corners, &moved)
}

/// Renders one synthetic pair. `size` must be a positive multiple of the backbone's maximum stride.
pub fn generate_synthetic_pair(seed: u64, class: u8, warp_magnitude: f64, size: usize) -> Result<PairedSample> {
    if class > 1 {
        return Err(contract(format!("class {class} outside {{0, 1}}")));
    }
    if !(0.0..=1.0).contains(&warp_magnitude) {
        return Err(contract(format!("warp magnitude {warp_magnitude} outside [0, 1]")));
    }
    if size == 0 || size % BackboneId::MAX_STRIDE != 0 {
        return Err(contract(format!(
            "size {size} must be a positive multiple of {}",
            BackboneId::MAX_STRIDE
        )));
    }
    let scene = Scene::new(seed, class, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xa11c);
    let warp = random_warp(&mut rng, warp_magnitude, size)?;
    let back = warp.inverse()?;

    let mut image_w = Array3::zeros((3, size, size));
    let mut image_n = Array3::zeros((3, size, size));
    let mut mask = Array2::from_elem((size, size), false);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let cw = scene.colour(px, py, false);
            let (sx, sy) = back.apply(px, py);
            let cn = scene.colour(sx, sy, true);
            for c in 0..3 {
                image_w[[c, y, x]] = cw[c];
                image_n[[c, y, x]] = cn[c];
            }
            mask[[y, x]] = scene.radius(px, py) <= 1.0;
        }
    }
    Ok(PairedSample {
        pair_id: format!("syn-{seed}"),
        patient_id: format!("syn-patient-{seed}"),
        label: class,
        image_w,
        image_n,
        gt_warp: Some(warp),
        gt_lesion_mask_w: Some(mask),
    })
}

/// A synthetic benchmark: `n` pairs, two per patient, alternating labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub warp_magnitude: f64,
    pub seed: u64,
    pub size: usize,
}

impl SyntheticSpec {
    fn pair_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }

    pub fn sample(&self, i: usize) -> Result<PairedSample> {
        let mut s = generate_synthetic_pair(self.pair_seed(i), (i % 2) as u8, self.warp_magnitude, self.size)?;
        s.pair_id = format!("pair-{i:05}");
        s.patient_id = format!("patient-{:04}", i / 2);
        Ok(s)
    }

    pub fn generate(&self) -> Result<Vec<PairedSample>> {
        (0..self.n).map(|i| self.sample(i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Writes PNG images, lesion masks, `manifest.jsonl` and the warp sidecar under `dir`.
pub fn write_synthetic_dataset(dir: &Path, spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::with_capacity(spec.n);
    let mut sidecar = std::collections::BTreeMap::new();
    for i in 0..spec.n {
        let s = spec.sample(i)?;
        let wli = PathBuf::from("images").join(format!("{}_wli.png", s.pair_id));
        let nbi = PathBuf::from("images").join(format!("{}_nbi.png", s.pair_id));
        let mask = PathBuf::from("masks").join(format!("{}_lesion.png", s.pair_id));
        save_png(s.image_w.view(), &dir.join(&wli))?;
        save_png(s.image_n.view(), &dir.join(&nbi))?;
        if let Some(m) = &s.gt_lesion_mask_w {
            save_mask_png(m.view(), &dir.join(&mask))?;
        }
        sidecar.insert(
            s.pair_id.clone(),
            WarpRecord {
                gt_warp: s.gt_warp.unwrap_or_else(Homography::identity).to_row_major(),
                mask_path: Some(mask),
            },
        );
        entries.push(ManifestEntry {
            pair_id: s.pair_id,
            patient_id: s.patient_id,
            label: i64::from(s.label),
            wli_path: wli,
            nbi_path: nbi,
        });
    }
    let manifest_path = dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &entries)?;
    let sidecar_path = dir.join(WARP_SIDECAR);
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(SyntheticDataset {
        manifest_path,
        sidecar_path,
        entries,
    })
}
