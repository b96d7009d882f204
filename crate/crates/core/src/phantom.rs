//! Synthetic CT studies with two separable nodule classes and vessel-like
//! non-nodule loci, written in the same RAWCT/XML formats as real input.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::Mask3D;
use crate::ingest::{
    encode_volume, serialize_annotations, AnnotationSet, CtVolume, Locus, NoduleReading, ReadingSession, Roi,
};
use crate::{seed, Error, Result};

pub const SESSIONS: usize = 4;
const BORDER_VOXELS: usize = 3;
const BACKGROUND_HU: f64 = -850.0;
const AIR_HU: f64 = -1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub n_patients: usize,
    pub benign_per_patient: usize,
    pub malignant_per_patient: usize,
    pub non_nodules_per_patient: usize,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub noise_sigma: f64,
    pub readers_min: usize,
    pub readers_max: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_patients: 10,
            benign_per_patient: 1,
            malignant_per_patient: 1,
            non_nodules_per_patient: 1,
            dims: [128, 128, 32],
            spacing_mm: [0.7, 0.7, 2.5],
            noise_sigma: 30.0,
            readers_min: 1,
            readers_max: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoduleClass {
    Benign,
    Malignant,
}

impl NoduleClass {
    fn radius_range(self) -> (f64, f64) {
        match self {
            NoduleClass::Benign => (3.0, 6.0),
            NoduleClass::Malignant => (6.0, 12.0),
        }
    }

    fn mean_hu(self) -> f64 {
        match self {
            NoduleClass::Benign => -100.0,
            NoduleClass::Malignant => 40.0,
        }
    }

    fn texture_sigma(self) -> f64 {
        match self {
            NoduleClass::Benign => 10.0,
            NoduleClass::Malignant => 60.0,
        }
    }

    /// Per-reader malignancy rating.
    fn rating(self, rng: &mut impl Rng) -> u8 {
        match self {
            NoduleClass::Benign => {
                if rng.gen_bool(0.2) {
                    2
                } else {
                    1
                }
            }
            NoduleClass::Malignant => {
                if rng.gen_bool(0.3) {
                    4
                } else {
                    5
                }
            }
        }
    }
}

const SPICULE_REACH: f64 = 0.8;
const AXIS_JITTER: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spicule {
    pub direction: [f64; 3],
    /// Length beyond the ellipsoid surface, mm.
    pub length_mm: f64,
    pub base_radius_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleTruth {
    pub patient_id: String,
    pub class: NoduleClass,
    /// Voxel coordinates of the ellipsoid center.
    pub center: [f64; 3],
    pub radii_mm: [f64; 3],
    pub spicules: Vec<Spicule>,
    pub sessions: Vec<usize>,
    pub ratings: Vec<u8>,
    pub gt_voxels: usize,
    pub gt_centroid: [f64; 3],
    pub mean_hu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselTruth {
    pub patient_id: String,
    pub center: [f64; 3],
    pub direction: [f64; 3],
    pub radius_mm: f64,
    pub length_mm: f64,
    pub sessions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PatientStudy {
    pub volume: CtVolume,
    pub annotations: AnnotationSet,
    pub nodules: Vec<NoduleTruth>,
    pub vessels: Vec<VesselTruth>,
    pub gt_masks: Vec<Mask3D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientFiles {
    pub patient_id: String,
    pub volume: String,
    pub annotations: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub seed: u64,
    pub config: PhantomConfig,
    pub patients: Vec<PatientFiles>,
    pub nodules: Vec<NoduleTruth>,
    pub non_nodules: Vec<VesselTruth>,
}

pub fn patient_id(index: usize) -> String {
    format!("PH{index:04}")
}

/// Largest in-plane and through-plane half extent of any nodule, voxels.
fn max_extent_voxels(config: &PhantomConfig) -> [f64; 3] {
    let r = NoduleClass::Malignant.radius_range().1 * (1.0 + AXIS_JITTER) * (1.0 + SPICULE_REACH);
    [r / config.spacing_mm[0], r / config.spacing_mm[1], r / config.spacing_mm[2]]
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::InvalidInput("n_patients must be >= 1".into()));
        }
        if self.benign_per_patient + self.malignant_per_patient == 0 {
            return Err(Error::InvalidInput("no nodules requested".into()));
        }
        if !(1..=SESSIONS).contains(&self.readers_min)
            || !(self.readers_min..=SESSIONS).contains(&self.readers_max)
        {
            return Err(Error::InvalidInput(format!(
                "readers must satisfy 1 <= min <= max <= {SESSIONS}"
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("spacing must be positive, noise non-negative".into()));
        }
        let ext = max_extent_voxels(self);
        for a in 0..3 {
            let border = if a < 2 { BORDER_VOXELS } else { 0 } as f64;
            // one full nodule plus a 5-slice / 47-pixel patch margin
            let margin = if a < 2 { 24.0 } else { 3.0 };
            if (self.dims[a] as f64) < 2.0 * (ext[a].max(margin) + border) + 1.0 {
                return Err(Error::InvalidInput(format!(
                    "dims {:?} too small for the largest nodule",
                    self.dims
                )));
            }
        }
        Ok(())
    }

    pub fn n_nodules(&self) -> usize {
        self.n_patients * (self.benign_per_patient + self.malignant_per_patient)
    }
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

struct Shape {
    center_mm: [f64; 3],
    radii: [f64; 3],
    spicules: Vec<Spicule>,
}

impl Shape {
    fn reach_mm(&self) -> f64 {
        let r = self.radii.iter().cloned().fold(0.0, f64::max);
        r + self.spicules.iter().map(|s| s.length_mm).fold(0.0, f64::max)
    }

    fn surface_distance(&self, u: [f64; 3]) -> f64 {
        let s: f64 = (0..3).map(|a| (u[a] / self.radii[a]).powi(2)).sum();
        1.0 / s.sqrt()
    }

    fn contains(&self, p_mm: [f64; 3]) -> bool {
        let d = [
            p_mm[0] - self.center_mm[0],
            p_mm[1] - self.center_mm[1],
            p_mm[2] - self.center_mm[2],
        ];
        if (0..3).map(|a| (d[a] / self.radii[a]).powi(2)).sum::<f64>() <= 1.0 {
            return true;
        }
        self.spicules.iter().any(|s| {
            let s0 = self.surface_distance(s.direction);
            let t = dot(d, s.direction);
            let (t0, t1) = (0.5 * s0, s0 + s.length_mm);
            if t < t0 || t > t1 {
                return false;
            }
            let off = [
                d[0] - t * s.direction[0],
                d[1] - t * s.direction[1],
                d[2] - t * s.direction[2],
            ];
            let radial = dot(off, off).sqrt();
            radial <= s.base_radius_mm * (t1 - t) / (t1 - t0)
        })
    }
}

fn voxel_mm(p: [usize; 3], spacing: [f64; 3]) -> [f64; 3] {
    [p[0] as f64 * spacing[0], p[1] as f64 * spacing[1], p[2] as f64 * spacing[2]]
}

fn sample_shape(class: NoduleClass, rng: &mut impl Rng) -> ([f64; 3], Vec<Spicule>) {
    let (lo, hi) = class.radius_range();
    let r = rng.gen_range(lo..=hi);
    let radii = [0; 3].map(|_| r * rng.gen_range(1.0 - AXIS_JITTER..=1.0 + AXIS_JITTER));
    let spicules = match class {
        NoduleClass::Benign => Vec::new(),
        NoduleClass::Malignant => {
            let n = rng.gen_range(4..=10);
            (0..n)
                .map(|_| Spicule {
                    direction: unit_vector(rng),
                    length_mm: r * rng.gen_range(0.5..=SPICULE_REACH),
                    base_radius_mm: r * rng.gen_range(0.25..=0.35),
                })
                .collect()
        }
    };
    (radii, spicules)
}

fn ground_truth(shape: &Shape, dims: [usize; 3], spacing: [f64; 3]) -> Mask3D {
    let mut m = Mask3D::new(dims);
    let reach = shape.reach_mm() + 1.0;
    let lo = |a: usize| (((shape.center_mm[a] - reach) / spacing[a]).floor().max(0.0)) as usize;
    let hi = |a: usize| (((shape.center_mm[a] + reach) / spacing[a]).ceil() as usize).min(dims[a] - 1);
    for z in lo(2)..=hi(2) {
        for y in lo(1)..=hi(1) {
            for x in lo(0)..=hi(0) {
                if shape.contains(voxel_mm([x, y, z], spacing)) {
                    m.insert(x, y, z);
                }
            }
        }
    }
    m
}

/// One in-plane morphological step per slice with a 4-neighbour cross:
/// `+1` dilates, `-1` erodes, `0` copies.
pub fn perturb_mask(mask: &Mask3D, step: i32) -> Mask3D {
    let [w, h, d] = mask.dims();
    if step == 0 {
        return mask.clone();
    }
    let mut out = Mask3D::new([w, h, d]);
    let nbrs = [(0i64, 0i64), (1, 0), (-1, 0), (0, 1), (0, -1)];
    let inside = |x: i64, y: i64, z: usize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && mask.contains(x as usize, y as usize, z)
    };
    let counts = mask.slice_counts();
    for z in (0..d).filter(|&z| counts[z] > 0) {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let keep = if step > 0 {
                    nbrs.iter().any(|&(dx, dy)| inside(x + dx, y + dy, z))
                } else {
                    nbrs.iter().all(|&(dx, dy)| inside(x + dx, y + dy, z))
                };
                if keep {
                    out.insert(x as usize, y as usize, z);
                }
            }
        }
    }
    out
}

const DIRS8: [(i32, i32); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

/// Moore-neighbour boundary trace of the 8-connected component containing
/// `start`, which must be its first pixel in raster order.
pub fn trace_boundary(fg: &dyn Fn(i32, i32) -> bool, start: (i32, i32)) -> Vec<(i32, i32)> {
    let mut contour = vec![start];
    let mut cur = start;
    let mut back = 0usize; // west of the raster-first pixel is background
    let mut second: Option<(i32, i32)> = None;
    loop {
        let mut found = None;
        for k in 1..=8 {
            let d = (back + k) % 8;
            let p = (cur.0 + DIRS8[d].0, cur.1 + DIRS8[d].1);
            if fg(p.0, p.1) {
                let prev = (back + k - 1) % 8;
                let q = (cur.0 + DIRS8[prev].0, cur.1 + DIRS8[prev].1);
                let rel = (q.0 - p.0, q.1 - p.1);
                let nb = DIRS8.iter().position(|&o| o == rel).expect("ring neighbours are adjacent");
                found = Some((p, nb));
                break;
            }
        }
        let Some((next, nb)) = found else { break };
        if cur == start && second == Some(next) {
            break;
        }
        if second.is_none() {
            second = Some(next);
        }
        contour.push(next);
        cur = next;
        back = nb;
        if contour.len() > 100_000 {
            break;
        }
    }
    if contour.len() > 1 && contour.last() == Some(&start) {
        contour.pop();
    }
    contour
}

/// One polygon per 8-connected component of slice `z`.
pub fn slice_polygons(mask: &Mask3D, z: usize) -> Vec<Vec<(i32, i32)>> {
    let [w, h, _] = mask.dims();
    let mut seen = vec![false; w * h];
    let mut polys = Vec::new();
    let fg = |x: i32, y: i32| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && mask.contains(x as usize, y as usize, z);
    for y in 0..h {
        for x in 0..w {
            if seen[y * w + x] || !mask.contains(x, y, z) {
                continue;
            }
            let mut queue = vec![(x as i32, y as i32)];
            seen[y * w + x] = true;
            while let Some((cx, cy)) = queue.pop() {
                for (dx, dy) in DIRS8 {
                    let (nx, ny) = (cx + dx, cy + dy);
                    if fg(nx, ny) && !seen[ny as usize * w + nx as usize] {
                        seen[ny as usize * w + nx as usize] = true;
                        queue.push((nx, ny));
                    }
                }
            }
            polys.push(trace_boundary(&fg, (x as i32, y as i32)));
        }
    }
    polys
}

fn mask_rois(mask: &Mask3D) -> Vec<Roi> {
    let counts = mask.slice_counts();
    (0..mask.dims()[2])
        .filter(|&z| counts[z] > 0)
        .flat_map(|z| {
            slice_polygons(mask, z).into_iter().map(move |edges| Roi {
                slice_index: z as i32,
                edges,
            })
        })
        .collect()
}

fn choose_sessions(config: &PhantomConfig, rng: &mut impl Rng) -> Vec<usize> {
    let k = rng.gen_range(config.readers_min..=config.readers_max);
    let mut s: Vec<usize> = (0..SESSIONS).collect();
    s.shuffle(rng);
    s.truncate(k);
    s.sort_unstable();
    s
}

/// Builds one patient entirely in memory.
pub fn generate_patient(config: &PhantomConfig, index: usize) -> Result<PatientStudy> {
    config.validate()?;
    let pid = patient_id(index);
    let mut rng = seed::rng(seed::sub_seed(config.seed, seed::PHANTOM) ^ index as u64);
    let dims = config.dims;
    let sp = config.spacing_mm;
    let extent_mm = [0, 1, 2].map(|a| dims[a] as f64 * sp[a]);

    let mut classes = vec![NoduleClass::Benign; config.benign_per_patient];
    classes.extend(vec![NoduleClass::Malignant; config.malignant_per_patient]);
    classes.shuffle(&mut rng);

    // placement by rejection sampling; occupied = (center mm, reach mm)
    let mut occupied: Vec<([f64; 3], f64)> = Vec::new();
    let mut place = |reach: f64, rng: &mut ChaCha8Rng| -> Result<[f64; 3]> {
        for _ in 0..10_000 {
            let mut c = [0.0; 3];
            for a in 0..3 {
                let border = if a < 2 { BORDER_VOXELS as f64 * sp[a] } else { 0.0 };
                let lo = reach + border + sp[a];
                let hi = extent_mm[a] - reach - border - 2.0 * sp[a];
                if hi <= lo {
                    c[a] = extent_mm[a] / 2.0;
                } else {
                    c[a] = rng.gen_range(lo..hi);
                }
            }
            let clear = occupied.iter().all(|&(o, r)| {
                let d2: f64 = (0..3).map(|a| (o[a] - c[a]).powi(2)).sum();
                d2.sqrt() > r + reach + 3.0
            });
            if clear {
                occupied.push((c, reach));
                return Ok(c);
            }
        }
        Err(Error::InvalidInput(format!(
            "could not place all objects in a {dims:?} volume"
        )))
    };

    let mut shapes = Vec::new();
    for &class in &classes {
        let (radii, spicules) = sample_shape(class, &mut rng);
        let mut shape = Shape {
            center_mm: [0.0; 3],
            radii,
            spicules,
        };
        shape.center_mm = place(shape.reach_mm(), &mut rng)?;
        shapes.push((class, shape));
    }
    let mut vessels = Vec::new();
    for _ in 0..config.non_nodules_per_patient {
        let radius_mm = rng.gen_range(1.0..=1.8);
        let length_mm = rng.gen_range(12.0..=20.0);
        let mut direction = unit_vector(&mut rng);
        // mostly in-plane, like a vessel crossing the slice stack obliquely
        direction[2] *= 0.3;
        let n = dot(direction, direction).sqrt();
        direction = direction.map(|v| v / n);
        let center = place(length_mm / 2.0 + radius_mm, &mut rng)?;
        vessels.push((center, direction, radius_mm, length_mm));
    }

    // intensities
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n_vox = dims[0] * dims[1] * dims[2];
    let mut hu = vec![BACKGROUND_HU; n_vox];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if x < BORDER_VOXELS || y < BORDER_VOXELS || x >= dims[0] - BORDER_VOXELS || y >= dims[1] - BORDER_VOXELS {
                    hu[x + dims[0] * (y + dims[1] * z)] = AIR_HU;
                }
            }
        }
    }
    let mut gt_masks = Vec::new();
    for (class, shape) in &shapes {
        let m = ground_truth(shape, dims, sp);
        for i in m.iter_indices() {
            hu[i] = class.mean_hu() + class.texture_sigma() * normal.sample(&mut rng);
        }
        gt_masks.push(m);
    }
    for &(c, dir, r, len) in &vessels {
        let reach = len / 2.0 + r + 1.0;
        let lo = |a: usize| (((c[a] - reach) / sp[a]).floor().max(0.0)) as usize;
        let hi = |a: usize| (((c[a] + reach) / sp[a]).ceil() as usize).min(dims[a] - 1);
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    let p = voxel_mm([x, y, z], sp);
                    let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                    let t = dot(d, dir);
                    let off = [d[0] - t * dir[0], d[1] - t * dir[1], d[2] - t * dir[2]];
                    if t.abs() <= len / 2.0 && dot(off, off).sqrt() <= r {
                        hu[x + dims[0] * (y + dims[1] * z)] = 60.0;
                    }
                }
            }
        }
    }
    let voxels: Vec<i16> = hu
        .iter()
        .map(|&v| (v + config.noise_sigma * normal.sample(&mut rng)).round().clamp(-1024.0, 3071.0) as i16)
        .collect();
    let volume = CtVolume::new(dims, sp, voxels, pid.clone())?;

    // readers
    let mut sessions = vec![ReadingSession::default(); SESSIONS];
    let mut nodules = Vec::new();
    for (k, ((class, shape), gt)) in shapes.iter().zip(&gt_masks).enumerate() {
        let reader_sessions = choose_sessions(config, &mut rng);
        let mut ratings = Vec::new();
        for &s in &reader_sessions {
            let step = *[-1, 0, 0, 1].choose(&mut rng).expect("non-empty");
            let mut m = perturb_mask(gt, step);
            if m.voxel_count() == 0 {
                m = gt.clone();
            }
            let rating = class.rating(&mut rng);
            ratings.push(rating);
            sessions[s].nodules.push(NoduleReading {
                nodule_id: format!("N{k}-R{s}"),
                malignancy: rating,
                rois: mask_rois(&m),
            });
        }
        let n = gt.voxel_count();
        let mean_hu = gt.iter_indices().map(|i| volume.voxels[i] as f64).sum::<f64>() / n.max(1) as f64;
        nodules.push(NoduleTruth {
            patient_id: pid.clone(),
            class: *class,
            center: [0, 1, 2].map(|a| shape.center_mm[a] / sp[a]),
            radii_mm: shape.radii,
            spicules: shape.spicules.clone(),
            sessions: reader_sessions,
            ratings,
            gt_voxels: n,
            gt_centroid: gt.center_of_mass().unwrap_or([f64::NAN; 3]),
            mean_hu,
        });
    }
    let mut vessel_truth = Vec::new();
    for &(c, dir, r, len) in &vessels {
        let reader_sessions = choose_sessions(config, &mut rng);
        let voxel = [0, 1, 2].map(|a| c[a] / sp[a]);
        for &s in &reader_sessions {
            let jitter = |rng: &mut ChaCha8Rng, v: f64, hi: usize| {
                ((v.round() as i32) + rng.gen_range(-1..=1)).clamp(0, hi as i32 - 1)
            };
            let x = jitter(&mut rng, voxel[0], dims[0]);
            let y = jitter(&mut rng, voxel[1], dims[1]);
            sessions[s].non_nodules.push(Locus {
                x,
                y,
                z: (voxel[2].round() as i32).clamp(0, dims[2] as i32 - 1),
            });
        }
        vessel_truth.push(VesselTruth {
            patient_id: pid.clone(),
            center: voxel,
            direction: dir,
            radius_mm: r,
            length_mm: len,
            sessions: reader_sessions,
        });
    }
    Ok(PatientStudy {
        volume,
        annotations: AnnotationSet {
            patient_id: pid,
            sessions,
        },
        nodules,
        vessels: vessel_truth,
        gt_masks,
    })
}

/// Writes `<pid>.rawct`, `<pid>.xml` per patient and `manifest.json`.
pub fn generate_phantom(config: &PhantomConfig, out_dir: &Path) -> Result<PhantomManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let parts: Vec<(PatientFiles, Vec<NoduleTruth>, Vec<VesselTruth>)> = (0..config.n_patients)
        .into_par_iter()
        .map(|i| {
            let study = generate_patient(config, i)?;
            let pid = study.volume.patient_id.clone();
            let files = PatientFiles {
                patient_id: pid.clone(),
                volume: format!("{pid}.rawct"),
                annotations: format!("{pid}.xml"),
            };
            let vpath = out_dir.join(&files.volume);
            fs::write(&vpath, encode_volume(&study.volume)).map_err(|e| Error::io(&vpath, e))?;
            let apath = out_dir.join(&files.annotations);
            fs::write(&apath, serialize_annotations(&study.annotations)).map_err(|e| Error::io(&apath, e))?;
            Ok((files, study.nodules, study.vessels))
        })
        .collect::<Result<_>>()?;
    let mut manifest = PhantomManifest {
        seed: config.seed,
        config: config.clone(),
        patients: Vec::new(),
        nodules: Vec::new(),
        non_nodules: Vec::new(),
    };
    for (f, n, v) in parts {
        manifest.patients.push(f);
        manifest.nodules.extend(n);
        manifest.non_nodules.extend(v);
    }
    let mpath = out_dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{build_consensus, rasterize_roi};
    use crate::ingest::parse_annotations_with_warnings;

    fn small_config(n: usize, seed: u64) -> PhantomConfig {
        PhantomConfig {
            n_patients: n,
            seed,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn polygons_reproduce_masks() {
        let cfg = small_config(3, 5);
        for i in 0..3 {
            let study = generate_patient(&cfg, i).unwrap();
            for gt in &study.gt_masks {
                let [w, h, d] = gt.dims();
                for z in 0..d {
                    let mut back = Mask3D::new([w, h, d]);
                    for poly in slice_polygons(gt, z) {
                        let m = rasterize_roi(&poly, [w, h]).unwrap();
                        for y in 0..h {
                            for x in 0..w {
                                if m.get(x, y) {
                                    back.insert(x, y, z);
                                }
                            }
                        }
                    }
                    for y in 0..h {
                        for x in 0..w {
                            assert_eq!(back.contains(x, y, z), gt.contains(x, y, z), "({x},{y},{z})");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn trace_single_pixel_and_bar() {
        let one = |x: i32, y: i32| x == 2 && y == 3;
        assert_eq!(trace_boundary(&one, (2, 3)), vec![(2, 3)]);
        let bar = |x: i32, y: i32| y == 0 && (0..4).contains(&x);
        let t = trace_boundary(&bar, (0, 0));
        assert_eq!(t, vec![(0, 0), (1, 0), (2, 0), (3, 0), (2, 0), (1, 0)]);
    }

    #[test]
    fn xml_parses_cleanly_and_consensus_matches_truth() {
        let cfg = small_config(6, 9);
        for i in 0..6 {
            let study = generate_patient(&cfg, i).unwrap();
            let xml = serialize_annotations(&study.annotations);
            let (set, warnings) = parse_annotations_with_warnings(xml.as_bytes()).unwrap();
            assert!(warnings.is_empty(), "{warnings:?}");
            assert_eq!(set, study.annotations);
            let (nodules, loci) = build_consensus(&set, cfg.dims, cfg.spacing_mm).unwrap();
            assert_eq!(nodules.len(), 2);
            assert_eq!(loci.len(), 1);
            for gt in &study.gt_masks {
                let best = nodules
                    .iter()
                    .map(|n| {
                        let inter = n.consensus_mask.intersection_count(gt) as f64;
                        2.0 * inter / (n.consensus_mask.voxel_count() + gt.voxel_count()) as f64
                    })
                    .fold(0.0, f64::max);
                assert!(best >= 0.7, "dice {best}");
            }
        }
    }

    #[test]
    fn deterministic_and_counts() {
        let cfg = small_config(2, 3);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_phantom(&cfg, a.path()).unwrap();
        generate_phantom(&cfg, b.path()).unwrap();
        assert_eq!(ma.nodules.len(), 4);
        assert_eq!(ma.patients.len(), 2);
        for name in ["PH0000.rawct", "PH0000.xml", "PH0001.rawct", "PH0001.xml", "manifest.json"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn classes_separate_in_intensity() {
        let cfg = small_config(20, 1);
        let (mut b, mut m) = (Vec::new(), Vec::new());
        for i in 0..20 {
            for n in generate_patient(&cfg, i).unwrap().nodules {
                match n.class {
                    NoduleClass::Benign => b.push(n.mean_hu),
                    NoduleClass::Malignant => m.push(n.mean_hu),
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&m) - mean(&b) >= 100.0 - 50.0);
    }

    #[test]
    fn too_small_volume_rejected() {
        let cfg = PhantomConfig {
            dims: [40, 40, 8],
            ..PhantomConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidInput(_))));
    }
}
