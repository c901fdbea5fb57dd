//! Synthetic two-lobe phantoms with a dark gap, boundary blur, Gaussian noise
//! and optional dark fan streaks, plus dataset generation, splitting and I/O.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::{add_gaussian_noise, coords, linear_index, voxel_count, Dims, Mask3D, Volume3D};
use crate::vv1::Vv1Tensor;

/// Half-angle of one artifact ray, radians.
const RAY_HALF_ANGLE: f64 = 0.06;
/// Half-thickness of an artifact fan around its plane, voxels.
const FAN_HALF_THICKNESS: f64 = 0.75;
/// Jittered retries when a draw leaves the mask empty or full.
const MAX_RETRIES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lobe {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub rays: usize,
    pub darkening: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: [f32; 3],
    pub lobes: Vec<Lobe>,
    /// Radial deformation amplitude in `[0, 0.5]`.
    pub delta: f64,
    /// Width of the background slab cut between the first two lobes, voxels.
    pub gap: f64,
    pub mu_f: f32,
    pub mu_b: f32,
    pub noise_sigma: f32,
    pub artifact: Option<Artifact>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing: [1.0; 3],
            lobes: vec![Lobe {
                center: [15.5; 3],
                radii: [6.0; 3],
            }],
            delta: 0.0,
            gap: 0.0,
            mu_f: 1.0,
            mu_b: 0.0,
            noise_sigma: 0.0,
            artifact: None,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.dims.contains(&0) {
            return bad(format!("dims {:?} must be positive", self.dims));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        if !(0.0..=0.5).contains(&self.delta) {
            return bad(format!("deformation {} outside [0, 0.5]", self.delta));
        }
        if !(self.gap.is_finite() && self.gap >= 0.0) {
            return bad(format!("gap {} must be >= 0", self.gap));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {} must be >= 0", self.noise_sigma));
        }
        if self.lobes.is_empty() {
            return bad("at least one lobe is required".into());
        }
        for (n, lobe) in self.lobes.iter().enumerate() {
            for a in 0..3 {
                let r = lobe.radii[a];
                if !(r.is_finite() && r > 0.0) {
                    return bad(format!("lobe {n} radius {r} must be positive"));
                }
                let reach = r * (1.0 + self.delta);
                let c = lobe.center[a];
                if c - reach < 0.0 || c + reach > (self.dims[a] - 1) as f64 {
                    return bad(format!("lobe {n} exceeds dims {:?} along axis {a}", self.dims));
                }
            }
        }
        if let Some(art) = &self.artifact {
            if art.rays == 0 || !(0.0..=1.0).contains(&art.darkening) {
                return bad(format!("artifact needs rays >= 1 and darkening in [0, 1], got {art:?}"));
            }
        }
        Ok(())
    }
}

fn inside_lobe(lobe: &Lobe, delta: f64, p: [f64; 3]) -> bool {
    let d: Vec<f64> = (0..3).map(|a| p[a] - lobe.center[a]).collect();
    let [a2, b2, c2] = lobe.radii.map(|r| r * r);
    // common denominator keeps the undeformed test exact on integer geometry
    let num = d[0] * d[0] * b2 * c2 + d[1] * d[1] * a2 * c2 + d[2] * d[2] * a2 * b2;
    let den = a2 * b2 * c2;
    let scale = if delta == 0.0 || num == 0.0 {
        1.0
    } else {
        let r = [d[0] / lobe.radii[0], d[1] / lobe.radii[1], d[2] / lobe.radii[2]];
        let rho = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        let theta = (r[2] / rho).clamp(-1.0, 1.0).acos();
        let phi = r[1].atan2(r[0]);
        1.0 + delta * (3.0 * theta).sin() * (2.0 * phi).sin()
    };
    num <= den * scale * scale
}

fn geometry_mask(spec: &PhantomSpec) -> Mask3D {
    let dims = spec.dims;
    let gap_plane = (spec.gap > 0.0 && spec.lobes.len() >= 2).then(|| {
        let (c0, c1) = (spec.lobes[0].center, spec.lobes[1].center);
        let u: Vec<f64> = (0..3).map(|a| c1[a] - c0[a]).collect();
        let len = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let u = [u[0] / len, u[1] / len, u[2] / len];
        let mid = [(c0[0] + c1[0]) / 2.0, (c0[1] + c1[1]) / 2.0, (c0[2] + c1[2]) / 2.0];
        (u, mid)
    });
    Mask3D::from_fn(dims, |idx| {
        let c = coords(dims, idx).map(|x| x as f64);
        if !spec.lobes.iter().any(|l| inside_lobe(l, spec.delta, c)) {
            return false;
        }
        match gap_plane {
            Some((u, m)) => ((c[0] - m[0]) * u[0] + (c[1] - m[1]) * u[1] + (c[2] - m[2]) * u[2]).abs() >= spec.gap / 2.0,
            None => true,
        }
    })
}

/// Intensity image with a 3³ box mean applied at voxels whose neighborhood
/// holds both classes.
fn blurred_intensity(spec: &PhantomSpec, mask: &Mask3D) -> Vec<f32> {
    let dims = spec.dims;
    let level = |v: usize| if mask.get(v) { spec.mu_f } else { spec.mu_b };
    (0..voxel_count(dims))
        .map(|idx| {
            let [i, j, k] = coords(dims, idx);
            let (mut sum, mut n, mut ones) = (0.0f32, 0usize, 0usize);
            for ii in i.saturating_sub(1)..=(i + 1).min(dims[0] - 1) {
                for jj in j.saturating_sub(1)..=(j + 1).min(dims[1] - 1) {
                    for kk in k.saturating_sub(1)..=(k + 1).min(dims[2] - 1) {
                        let v = linear_index(dims, ii, jj, kk);
                        sum += level(v);
                        ones += mask.get(v) as usize;
                        n += 1;
                    }
                }
            }
            if ones == 0 || ones == n {
                level(idx)
            } else {
                sum / n as f32
            }
        })
        .collect()
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Multiplies intensity by the darkening factor on thin rays fanning out
/// from a lobe center within a random plane.
fn apply_fan<R: Rng + ?Sized>(spec: &PhantomSpec, art: &Artifact, data: &mut [f32], rng: &mut R) {
    let origin = spec.lobes[rng.random_range(0..spec.lobes.len())].center;
    let normal = unit_vector(rng);
    let helper = if normal[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = {
        let c = cross(normal, helper);
        let n = dot(c, c).sqrt();
        [c[0] / n, c[1] / n, c[2] / n]
    };
    let e2 = cross(normal, e1);
    let angles: Vec<f64> = (0..art.rays).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let cos_limit = RAY_HALF_ANGLE.cos();
    for (idx, x) in data.iter_mut().enumerate() {
        let c = coords(spec.dims, idx);
        let w = [c[0] as f64 - origin[0], c[1] as f64 - origin[1], c[2] as f64 - origin[2]];
        if dot(w, normal).abs() > FAN_HALF_THICKNESS {
            continue;
        }
        let (a, b) = (dot(w, e1), dot(w, e2));
        let r = (a * a + b * b).sqrt();
        if r < 1e-9 {
            continue;
        }
        if angles.iter().any(|t| (a * t.cos() + b * t.sin()) / r >= cos_limit) {
            *x *= art.darkening as f32;
        }
    }
}

fn render<R: Rng + ?Sized>(spec: &PhantomSpec, mask: &Mask3D, rng: &mut R) -> Result<Volume3D> {
    let mut data = blurred_intensity(spec, mask);
    if let Some(art) = &spec.artifact {
        apply_fan(spec, art, &mut data, rng);
    }
    let clean = Volume3D::new(spec.dims, spec.spacing, data)?;
    add_gaussian_noise(&clean, spec.noise_sigma, rng)
}

/// Draws one phantom. Retries with a jittered center when the geometry leaves
/// the mask empty or full.
pub fn generate_phantom<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> Result<(Volume3D, Mask3D)> {
    spec.validate()?;
    let mut current = spec.clone();
    for _ in 0..MAX_RETRIES {
        let mask = geometry_mask(&current);
        let count = mask.count();
        if count > 0 && count < mask.len() {
            let vol = render(&current, &mask, rng)?;
            return Ok((vol, mask));
        }
        for lobe in &mut current.lobes {
            for a in 0..3 {
                let reach = lobe.radii[a] * (1.0 + current.delta);
                let hi = (current.dims[a] - 1) as f64 - reach;
                lobe.center[a] = (lobe.center[a] + rng.random_range(-1.0..1.0)).clamp(reach, hi.max(reach));
            }
        }
    }
    Err(Error::InvalidSpec(format!("no two-class mask after {MAX_RETRIES} attempts for {spec:?}")))
}

/// Uniform sampling ranges for dataset phantoms; geometric ranges are
/// fractions of the smallest volume side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecRanges {
    pub dims: Dims,
    pub spacing: [f32; 3],
    pub delta: (f64, f64),
    pub radius: (f64, f64),
    pub separation: (f64, f64),
    pub gap: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub artifact_prob: f64,
    pub rays: (usize, usize),
    pub darkening: (f64, f64),
}

impl Default for SpecRanges {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing: [1.0; 3],
            delta: (0.0, 0.3),
            radius: (0.14, 0.19),
            separation: (0.11, 0.16),
            gap: (1.0, 2.5),
            noise_sigma: (0.05, 0.15),
            artifact_prob: 0.3,
            rays: (2, 5),
            darkening: (0.2, 0.6),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl SpecRanges {
    pub fn validate(&self) -> Result<()> {
        let ordered = [self.delta, self.radius, self.separation, self.gap, self.noise_sigma, self.darkening];
        if ordered.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) || self.rays.0 > self.rays.1 {
            return Err(Error::InvalidSpec(format!("ranges must be ordered pairs: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.artifact_prob) {
            return Err(Error::InvalidSpec(format!("artifact probability {} outside [0, 1]", self.artifact_prob)));
        }
        Ok(())
    }

    /// Two lobes placed symmetrically about the volume center along a random
    /// direction, radii and all other parameters drawn uniformly.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> PhantomSpec {
        let side = *self.dims.iter().min().unwrap() as f64;
        let delta = uniform(rng, self.delta);
        let u = unit_vector(rng);
        let s = side * uniform(rng, self.separation);
        let mid = self.dims.map(|d| (d as f64 - 1.0) / 2.0);
        let mut lobes = Vec::with_capacity(2);
        for sign in [-1.0, 1.0] {
            let radii = [(); 3].map(|_| side * uniform(rng, self.radius));
            let center = [0, 1, 2].map(|a| {
                let reach = radii[a] * (1.0 + delta);
                let c = mid[a] + sign * s * u[a];
                c.clamp(reach, (self.dims[a] as f64 - 1.0 - reach).max(reach))
            });
            lobes.push(Lobe { center, radii });
        }
        let artifact = (rng.random::<f64>() < self.artifact_prob).then(|| Artifact {
            rays: rng.random_range(self.rays.0..=self.rays.1),
            darkening: uniform(rng, self.darkening),
        });
        PhantomSpec {
            dims: self.dims,
            spacing: self.spacing,
            lobes,
            delta,
            gap: uniform(rng, self.gap),
            mu_f: 1.0,
            mu_b: 0.0,
            noise_sigma: uniform(rng, self.noise_sigma) as f32,
            artifact,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCase {
    pub id: String,
    pub volume: Volume3D,
    pub mask: Mask3D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledCase {
    pub id: String,
    pub volume: Volume3D,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<LabeledCase>,
    pub unlabeled: Vec<UnlabeledCase>,
    pub validation: Vec<LabeledCase>,
    pub test: Vec<LabeledCase>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Labeled,
    Unlabeled,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: String,
    pub split: SplitName,
    pub seed: u64,
    pub volume: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_labeled: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub ranges: SpecRanges,
    pub cases: Vec<ManifestCase>,
}

fn split_of(index: usize, n_total: usize, n_labeled: usize, n_val: usize) -> SplitName {
    if index < n_labeled {
        SplitName::Labeled
    } else if index < n_total {
        SplitName::Unlabeled
    } else if index < n_total + n_val {
        SplitName::Validation
    } else {
        SplitName::Test
    }
}

/// Generates `n_total + n_val + n_test` phantoms; the first `n_labeled`
/// training cases keep their masks.
pub fn make_dataset_with_manifest(
    n_total: usize,
    n_labeled: usize,
    n_val: usize,
    n_test: usize,
    ranges: &SpecRanges,
    seed: u64,
) -> Result<(DatasetSplit, Manifest)> {
    if n_total == 0 || n_labeled == 0 || n_val == 0 || n_test == 0 || n_labeled > n_total {
        return Err(Error::invalid(format!(
            "need 1 <= n_labeled ({n_labeled}) <= n_total ({n_total}) and n_val ({n_val}), n_test ({n_test}) >= 1"
        )));
    }
    ranges.validate()?;
    let count = n_total + n_val + n_test;
    let cases = (0..count)
        .into_par_iter()
        .map(|i| {
            let case_seed = rng::derive_seed(seed, &[i as u64]);
            let spec = ranges.draw(&mut rng::stream(case_seed, &[0]));
            let (vol, mask) = generate_phantom(&spec, &mut rng::stream(case_seed, &[1]))?;
            Ok((case_seed, spec, vol, mask))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut split = DatasetSplit::default();
    let mut entries = Vec::with_capacity(count);
    for (i, (case_seed, spec, volume, mask)) in cases.into_iter().enumerate() {
        let id = format!("{i:04}");
        let which = split_of(i, n_total, n_labeled, n_val);
        entries.push(ManifestCase {
            id: id.clone(),
            split: which,
            seed: case_seed,
            volume: format!("case_{id}_vol.vv1"),
            mask: (which != SplitName::Unlabeled).then(|| format!("case_{id}_mask.vv1")),
            spec,
        });
        match which {
            SplitName::Labeled => split.labeled.push(LabeledCase { id, volume, mask }),
            SplitName::Unlabeled => split.unlabeled.push(UnlabeledCase { id, volume }),
            SplitName::Validation => split.validation.push(LabeledCase { id, volume, mask }),
            SplitName::Test => split.test.push(LabeledCase { id, volume, mask }),
        }
    }
    let manifest = Manifest {
        seed,
        n_train: n_total,
        n_labeled,
        n_val,
        n_test,
        ranges: ranges.clone(),
        cases: entries,
    };
    Ok((split, manifest))
}

pub fn make_dataset(
    n_total: usize,
    n_labeled: usize,
    n_val: usize,
    n_test: usize,
    ranges: &SpecRanges,
    seed: u64,
) -> Result<DatasetSplit> {
    Ok(make_dataset_with_manifest(n_total, n_labeled, n_val, n_test, ranges, seed)?.0)
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every case as VV1 plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, split: &DatasetSplit, manifest: &Manifest) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labeled = split.labeled.iter().chain(&split.validation).chain(&split.test);
    for case in labeled {
        Vv1Tensor::from_volume(&case.volume).write(dir.join(format!("case_{}_vol.vv1", case.id)))?;
        Vv1Tensor::from_mask(&case.mask, case.volume.spacing()).write(dir.join(format!("case_{}_mask.vv1", case.id)))?;
    }
    for case in &split.unlabeled {
        Vv1Tensor::from_volume(&case.volume).write(dir.join(format!("case_{}_vol.vv1", case.id)))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Loads a dataset written by [`write_dataset`]; file names resolve relative
/// to the manifest's directory.
pub fn read_dataset(manifest_path: &Path) -> Result<(Manifest, DatasetSplit)> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut split = DatasetSplit::default();
    for case in &manifest.cases {
        let volume = Vv1Tensor::read(dir.join(&case.volume))?.into_volume()?;
        let mask = match &case.mask {
            Some(m) => Some(Vv1Tensor::read(dir.join(m))?.into_mask()?),
            None => None,
        };
        let id = case.id.clone();
        let need_mask = |mask: Option<Mask3D>| {
            let m = mask.ok_or_else(|| Error::format(manifest_path.display().to_string(), format!("case {id} has no mask")))?;
            if m.dims() != volume.dims() {
                return Err(Error::shape(format!("case {id}: mask {:?} vs volume {:?}", m.dims(), volume.dims())));
            }
            Ok(m)
        };
        match case.split {
            SplitName::Unlabeled => split.unlabeled.push(UnlabeledCase { id, volume }),
            SplitName::Labeled => split.labeled.push(LabeledCase { mask: need_mask(mask)?, id, volume }),
            SplitName::Validation => split.validation.push(LabeledCase { mask: need_mask(mask)?, id, volume }),
            SplitName::Test => split.test.push(LabeledCase { mask: need_mask(mask)?, id, volume }),
        }
    }
    Ok((manifest, split))
}
