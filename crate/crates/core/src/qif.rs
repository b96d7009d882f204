//! Quantitative image features (QIF): a fixed registry of 50 size, shape,
//! intensity, margin and texture measurements of a masked lesion.
//!
//! 2-D features use the mask's largest-area slice (lowest z on ties).
//! Dimensional features are in millimetres. Twelve entries are flagged as
//! direct size measures and can be dropped with [`strip_size_features`].

use std::collections::VecDeque;
use std::io::{Read, Write};

use nalgebra::{Matrix2, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::consensus::{Mask2D, Mask3D};
use crate::ingest::CtVolume;
use crate::patchset::HU_WINDOW;
use crate::{Error, Result};

pub const N_FEATURES: usize = 50;
pub const N_SIZE_FEATURES: usize = 12;
pub const N_NON_SIZE_FEATURES: usize = N_FEATURES - N_SIZE_FEATURES;

/// Region growing threshold for automatic segmentation.
pub const AUTO_SEGMENT_MIN_HU: i16 = -450;
pub const AUTO_SEGMENT_RADIUS_MM: f64 = 15.0;

pub const HIST_BINS: usize = 64;
pub const GLCM_LEVELS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDef {
    pub code: &'static str,
    pub name: &'static str,
    pub unit: &'static str,
    pub is_size_measure: bool,
}

const fn def(code: &'static str, name: &'static str, unit: &'static str, size: bool) -> FeatureDef {
    FeatureDef {
        code,
        name,
        unit,
        is_size_measure: size,
    }
}

pub const REGISTRY: [FeatureDef; N_FEATURES] = [
    def("f01", "area", "mm2", true),
    def("f02", "perimeter", "mm", true),
    def("f03", "equivalent_circular_diameter", "mm", true),
    def("f04", "sqrt_area", "mm", true),
    def("f05", "circularity", "1", false),
    def("f06", "eccentricity", "1", false),
    def("f07", "solidity", "1", false),
    def("f08", "extent", "1", false),
    def("f09", "major_axis", "mm", true),
    def("f10", "minor_axis", "mm", true),
    def("f11", "aspect_ratio", "1", false),
    def("f12", "volume", "mm3", true),
    def("f13", "surface_area", "mm2", true),
    def("f14", "equivalent_spherical_diameter", "mm", true),
    def("f15", "sphericity", "1", false),
    def("f16", "bbox_compactness", "1", false),
    def("f17", "elongation", "1", false),
    def("f18", "flatness", "1", false),
    def("f19", "bbox_max_dimension", "mm", true),
    def("f20", "surface_to_volume", "1/mm", true),
    def("f21", "slice_span", "slices", true),
    def("f22", "hu_mean", "HU", false),
    def("f23", "hu_median", "HU", false),
    def("f24", "hu_std", "HU", false),
    def("f25", "hu_min", "HU", false),
    def("f26", "hu_max", "HU", false),
    def("f27", "hu_range", "HU", false),
    def("f28", "hu_skewness", "1", false),
    def("f29", "hu_excess_kurtosis", "1", false),
    def("f30", "window_mean_square", "1", false),
    def("f31", "histogram_entropy", "bits", false),
    def("f32", "hu_p10", "HU", false),
    def("f33", "hu_p25", "HU", false),
    def("f34", "hu_p75", "HU", false),
    def("f35", "hu_p90", "HU", false),
    def("f36", "hu_iqr", "HU", false),
    def("f37", "fraction_above_minus50", "1", false),
    def("f38", "fraction_below_minus600", "1", false),
    def("f39", "boundary_gradient_mean", "HU/mm", false),
    def("f40", "boundary_gradient_std", "HU/mm", false),
    def("f41", "rim_mean_hu", "HU", false),
    def("f42", "inside_rim_contrast", "HU", false),
    def("f43", "glcm_contrast", "1", false),
    def("f44", "glcm_correlation", "1", false),
    def("f45", "glcm_energy", "1", false),
    def("f46", "glcm_homogeneity", "1", false),
    def("f47", "glcm_entropy", "bits", false),
    def("f48", "local_mean_abs_deviation", "HU", false),
    def("f49", "slice_area_cv", "1", false),
    def("f50", "radial_hu_slope", "HU", false),
];

/// Index into the 50-vector of the square root of the largest cross-section.
pub const SQRT_AREA: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != N_FEATURES {
            return Err(Error::LengthMismatch {
                expected: N_FEATURES,
                found: values.len(),
            });
        }
        Ok(FeatureVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, code: &str) -> Option<f64> {
        REGISTRY
            .iter()
            .position(|d| d.code == code || d.name == code)
            .map(|i| self.values[i])
    }

    pub fn is_size_measure(i: usize) -> bool {
        REGISTRY[i].is_size_measure
    }
}

/// Drops the 12 size-measure entries, keeping the order of the rest.
pub fn strip_size_features(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() != N_FEATURES {
        return Err(Error::LengthMismatch {
            expected: N_FEATURES,
            found: values.len(),
        });
    }
    Ok(values
        .iter()
        .zip(REGISTRY.iter())
        .filter(|(_, d)| !d.is_size_measure)
        .map(|(&v, _)| v)
        .collect())
}

/// Region grown from `seed` over 26-connected voxels at or above -450 HU,
/// clipped to a 15 mm ball around the seed voxel.
pub fn auto_segment(vol: &CtVolume, seed: [f64; 3]) -> Result<Mask3D> {
    let s = crate::patchset::center_voxel(seed);
    if !vol.contains(s[0], s[1], s[2]) {
        return Err(Error::SeedOutOfBounds(s[0], s[1], s[2]));
    }
    let mut mask = Mask3D::new(vol.dims);
    let (sx, sy, sz) = (s[0] as usize, s[1] as usize, s[2] as usize);
    mask.insert(sx, sy, sz);
    if vol.get(sx, sy, sz) < AUTO_SEGMENT_MIN_HU {
        return Ok(mask);
    }
    let sp = vol.spacing_mm;
    let r2 = AUTO_SEGMENT_RADIUS_MM * AUTO_SEGMENT_RADIUS_MM;
    let mut queue = VecDeque::from([s]);
    while let Some([x, y, z]) = queue.pop_front() {
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                    let Some(hu) = vol.get_signed(nx, ny, nz) else {
                        continue;
                    };
                    if hu < AUTO_SEGMENT_MIN_HU || mask.contains_signed(nx, ny, nz) {
                        continue;
                    }
                    let d2 = ((nx - s[0]) as f64 * sp[0]).powi(2)
                        + ((ny - s[1]) as f64 * sp[1]).powi(2)
                        + ((nz - s[2]) as f64 * sp[2]).powi(2);
                    if d2 > r2 {
                        continue;
                    }
                    mask.insert(nx as usize, ny as usize, nz as usize);
                    queue.push_back([nx, ny, nz]);
                }
            }
        }
    }
    Ok(mask)
}

pub fn compute_features(vol: &CtVolume, mask: &Mask3D) -> Result<FeatureVector> {
    if mask.dims() != vol.dims {
        return Err(Error::DimensionMismatch(format!(
            "mask {:?} vs volume {:?}",
            mask.dims(),
            vol.dims
        )));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut f = Vec::with_capacity(N_FEATURES);
    let counts = mask.slice_counts();
    let zbest = counts
        .iter()
        .enumerate()
        .fold((0, 0), |best, (z, &c)| if c > best.1 { (z, c) } else { best })
        .0;
    let slice = mask.slice(zbest);
    f.extend(planar_shape(&slice, vol.spacing_mm));
    f.extend(solid_shape(mask, &counts, vol.spacing_mm));
    let hu: Vec<f64> = mask
        .iter_indices()
        .map(|i| vol.voxels[i] as f64)
        .collect();
    let intensity = intensity_stats(&hu);
    let mean_hu = intensity[0];
    f.extend(intensity);
    f.extend(margin(vol, mask, mean_hu));
    f.extend(glcm_features(vol, &slice, zbest));
    f.push(local_mad(vol, mask));
    f.push(slice_area_cv(&counts));
    f.push(radial_slope(mask, vol));
    debug_assert_eq!(f.len(), N_FEATURES);
    FeatureVector::new(f)
}

/// f01-f11.
fn planar_shape(slice: &Mask2D, sp: [f64; 3]) -> [f64; 11] {
    let [w, h] = slice.dims;
    let (sx, sy) = (sp[0], sp[1]);
    let mut n = 0usize;
    let mut perim = 0.0;
    let (mut sum_x, mut sum_y) = (0.0, 0.0);
    let (mut lo, mut hi) = ([usize::MAX; 2], [0usize; 2]);
    let inside = |x: i64, y: i64| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && slice.get(x as usize, y as usize)
    };
    let mut corners = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !slice.get(x, y) {
                continue;
            }
            n += 1;
            let (xi, yi) = (x as i64, y as i64);
            for (dx, dy, len) in [(-1, 0, sy), (1, 0, sy), (0, -1, sx), (0, 1, sx)] {
                if !inside(xi + dx, yi + dy) {
                    perim += len;
                }
            }
            sum_x += x as f64 * sx;
            sum_y += y as f64 * sy;
            lo = [lo[0].min(x), lo[1].min(y)];
            hi = [hi[0].max(x), hi[1].max(y)];
            for (cx, cy) in [(-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)] {
                corners.push(((x as f64 + cx) * sx, (y as f64 + cy) * sy));
            }
        }
    }
    let nf = n as f64;
    let area = nf * sx * sy;
    let (mx, my) = (sum_x / nf, sum_y / nf);
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if slice.get(x, y) {
                let (dx, dy) = (x as f64 * sx - mx, y as f64 * sy - my);
                cxx += dx * dx;
                cyy += dy * dy;
                cxy += dx * dy;
            }
        }
    }
    // Each pixel is a uniform square, which adds s^2/12 per axis.
    let cov = Matrix2::new(
        cxx / nf + sx * sx / 12.0,
        cxy / nf,
        cxy / nf,
        cyy / nf + sy * sy / 12.0,
    );
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let (l1, l2) = (ev[0].max(0.0), ev[1].max(0.0));
    let major = 4.0 * l1.sqrt();
    let minor = 4.0 * l2.sqrt();
    let eccentricity = if l1 > 0.0 { (1.0 - l2 / l1).max(0.0).sqrt() } else { 0.0 };
    let hull = convex_hull_area(&mut corners);
    let bbox = ((hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1)) as f64;
    [
        area,
        perim,
        2.0 * (area / std::f64::consts::PI).sqrt(),
        area.sqrt(),
        4.0 * std::f64::consts::PI * area / (perim * perim),
        eccentricity,
        if hull > 0.0 { area / hull } else { 1.0 },
        nf / bbox,
        major,
        minor,
        if minor > 0.0 { major / minor } else { 1.0 },
    ]
}

/// Monotone-chain hull; returns its area.
fn convex_hull_area(pts: &mut Vec<(f64, f64)>) -> f64 {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return 0.0;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    let mut a = 0.0;
    for i in 0..hull.len() {
        let (p, q) = (hull[i], hull[(i + 1) % hull.len()]);
        a += p.0 * q.1 - q.0 * p.1;
    }
    a.abs() / 2.0
}

/// f12-f21.
fn solid_shape(mask: &Mask3D, counts: &[usize], sp: [f64; 3]) -> [f64; 10] {
    let n = mask.voxel_count() as f64;
    let volume = n * sp[0] * sp[1] * sp[2];
    let face = [sp[1] * sp[2], sp[0] * sp[2], sp[0] * sp[1]];
    let mut surface = 0.0;
    let mut sum = [0.0; 3];
    let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
    for c in mask.iter_coords() {
        let ci = c.map(|v| v as i64);
        for (axis, area) in face.iter().enumerate() {
            for d in [-1i64, 1] {
                let mut nb = ci;
                nb[axis] += d;
                if !mask.contains_signed(nb[0], nb[1], nb[2]) {
                    surface += area;
                }
            }
        }
        for a in 0..3 {
            sum[a] += c[a] as f64 * sp[a];
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let mean = sum.map(|s| s / n);
    let mut cov = Matrix3::zeros();
    for c in mask.iter_coords() {
        let d = [
            c[0] as f64 * sp[0] - mean[0],
            c[1] as f64 * sp[1] - mean[1],
            c[2] as f64 * sp[2] - mean[2],
        ];
        for i in 0..3 {
            for j in 0..3 {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    cov /= n;
    for a in 0..3 {
        cov[(a, a)] += sp[a] * sp[a] / 12.0;
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let ratio = |a: f64| if ev[0] > 0.0 { (a / ev[0]).sqrt() } else { 1.0 };
    let extent: Vec<usize> = (0..3).map(|a| hi[a] - lo[a] + 1).collect();
    let bbox_voxels = (extent[0] * extent[1] * extent[2]) as f64;
    let bbox_max = (0..3)
        .map(|a| extent[a] as f64 * sp[a])
        .fold(0.0, f64::max);
    let span = {
        let zs: Vec<usize> = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(z, _)| z)
            .collect();
        (zs.last().unwrap() - zs.first().unwrap() + 1) as f64
    };
    let pi = std::f64::consts::PI;
    [
        volume,
        surface,
        (6.0 * volume / pi).cbrt(),
        pi.cbrt() * (6.0 * volume).powf(2.0 / 3.0) / surface,
        n / bbox_voxels,
        ratio(ev[1]),
        ratio(ev[2]),
        bbox_max,
        surface / volume,
        span,
    ]
}

/// Linear-interpolated percentile of sorted data, `p` in [0, 1].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

fn window(hu: f64) -> f64 {
    ((hu - HU_WINDOW.0) / (HU_WINDOW.1 - HU_WINDOW.0)).clamp(0.0, 1.0)
}

fn quantize(hu: f64, levels: usize) -> usize {
    ((window(hu) * levels as f64).floor() as usize).min(levels - 1)
}

/// f22-f38.
fn intensity_stats(hu: &[f64]) -> [f64; 17] {
    let n = hu.len() as f64;
    let mean = hu.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in hu {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let std = m2.sqrt();
    let (skew, kurt) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    let mut sorted = hu.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    let mean_sq = hu.iter().map(|&v| window(v).powi(2)).sum::<f64>() / n;
    let mut hist = [0usize; HIST_BINS];
    for &v in hu {
        hist[quantize(v, HIST_BINS)] += 1;
    }
    let entropy = shannon(hist.iter().map(|&c| c as f64 / n));
    let (p10, p25, p75, p90) = (
        percentile(&sorted, 0.10),
        percentile(&sorted, 0.25),
        percentile(&sorted, 0.75),
        percentile(&sorted, 0.90),
    );
    [
        mean,
        percentile(&sorted, 0.5),
        std,
        min,
        max,
        max - min,
        skew,
        kurt,
        mean_sq,
        entropy,
        p10,
        p25,
        p75,
        p90,
        p75 - p25,
        hu.iter().filter(|&&v| v > -50.0).count() as f64 / n,
        hu.iter().filter(|&&v| v < -600.0).count() as f64 / n,
    ]
}

fn shannon(probs: impl Iterator<Item = f64>) -> f64 {
    probs.filter(|&p| p > 0.0).map(|p| -p * p.log2()).sum::<f64>() + 0.0
}

fn gradient_magnitude(vol: &CtVolume, c: [usize; 3]) -> f64 {
    let mut g2 = 0.0;
    for a in 0..3 {
        if vol.dims[a] < 2 {
            continue;
        }
        let mut lo = c;
        let mut hi = c;
        lo[a] = c[a].saturating_sub(1);
        hi[a] = (c[a] + 1).min(vol.dims[a] - 1);
        let dist = (hi[a] - lo[a]) as f64 * vol.spacing_mm[a];
        let d = (vol.get(hi[0], hi[1], hi[2]) as f64 - vol.get(lo[0], lo[1], lo[2]) as f64) / dist;
        g2 += d * d;
    }
    g2.sqrt()
}

/// f39-f42.
fn margin(vol: &CtVolume, mask: &Mask3D, mean_hu: f64) -> [f64; 4] {
    let mut grads = Vec::new();
    for c in mask.iter_coords() {
        let ci = c.map(|v| v as i64);
        let boundary = (0..3).any(|a| {
            [-1i64, 1].iter().any(|&d| {
                let mut nb = ci;
                nb[a] += d;
                !mask.contains_signed(nb[0], nb[1], nb[2])
            })
        });
        if boundary {
            grads.push(gradient_magnitude(vol, c));
        }
    }
    let (gmean, gstd) = mean_std(&grads);

    // Outer rim: two 26-neighbour dilations minus the mask.
    let mut grown = mask.clone();
    for _ in 0..2 {
        let mut next = grown.clone();
        for c in grown.iter_coords() {
            for dz in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (x, y, z) = (c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz);
                        if vol.contains(x, y, z) {
                            next.insert(x as usize, y as usize, z as usize);
                        }
                    }
                }
            }
        }
        grown = next;
    }
    let rim: Vec<f64> = grown
        .iter_indices()
        .filter(|&i| !mask.contains_index(i))
        .map(|i| vol.voxels[i] as f64)
        .collect();
    let rim_mean = if rim.is_empty() {
        mean_hu
    } else {
        rim.iter().sum::<f64>() / rim.len() as f64
    };
    [gmean, gstd, rim_mean, mean_hu - rim_mean]
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// f43-f47: symmetric distance-1 GLCM on the largest slice, averaged over
/// the four in-plane directions.
fn glcm_features(vol: &CtVolume, slice: &Mask2D, z: usize) -> [f64; 5] {
    let [w, h] = slice.dims;
    let offsets = [(1i64, 0i64), (1, 1), (0, 1), (-1, 1)];
    let mut acc = [0.0; 5];
    let mut used = 0;
    for (dx, dy) in offsets {
        let mut m = vec![0.0f64; GLCM_LEVELS * GLCM_LEVELS];
        let mut pairs = 0usize;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                    continue;
                }
                if !slice.get(x as usize, y as usize) || !slice.get(nx as usize, ny as usize) {
                    continue;
                }
                let i = quantize(vol.get(x as usize, y as usize, z) as f64, GLCM_LEVELS);
                let j = quantize(vol.get(nx as usize, ny as usize, z) as f64, GLCM_LEVELS);
                m[i * GLCM_LEVELS + j] += 1.0;
                m[j * GLCM_LEVELS + i] += 1.0;
                pairs += 1;
            }
        }
        if pairs == 0 {
            continue;
        }
        let total = 2.0 * pairs as f64;
        m.iter_mut().for_each(|v| *v /= total);
        let feats = glcm_stats(&m);
        for k in 0..5 {
            acc[k] += feats[k];
        }
        used += 1;
    }
    if used == 0 {
        // A lone pixel: treat as a single self-pair.
        return [0.0, 0.0, 1.0, 1.0, 0.0];
    }
    acc.map(|v| v / used as f64)
}

/// contrast, correlation, energy (angular second moment), homogeneity, entropy.
pub fn glcm_stats(p: &[f64]) -> [f64; 5] {
    let l = (p.len() as f64).sqrt() as usize;
    let (mut mu_i, mut mu_j) = (0.0, 0.0);
    for i in 0..l {
        for j in 0..l {
            let v = p[i * l + j];
            mu_i += i as f64 * v;
            mu_j += j as f64 * v;
        }
    }
    let (mut var_i, mut var_j, mut cov) = (0.0, 0.0, 0.0);
    let (mut contrast, mut energy, mut homog) = (0.0, 0.0, 0.0);
    for i in 0..l {
        for j in 0..l {
            let v = p[i * l + j];
            let (di, dj) = (i as f64 - mu_i, j as f64 - mu_j);
            var_i += di * di * v;
            var_j += dj * dj * v;
            cov += di * dj * v;
            let d = i as f64 - j as f64;
            contrast += d * d * v;
            energy += v * v;
            homog += v / (1.0 + d * d);
        }
    }
    let corr = if var_i > 0.0 && var_j > 0.0 {
        cov / (var_i.sqrt() * var_j.sqrt())
    } else {
        0.0
    };
    [contrast, corr, energy, homog, shannon(p.iter().copied())]
}

/// f48: mean |I - mean of in-plane 3x3 neighbourhood| over mask voxels.
fn local_mad(vol: &CtVolume, mask: &Mask3D) -> f64 {
    let mut total = 0.0;
    for [x, y, z] in mask.iter_coords() {
        let (mut s, mut k) = (0.0, 0usize);
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                if let Some(v) = vol.get_signed(x as i64 + dx, y as i64 + dy, z as i64) {
                    s += v as f64;
                    k += 1;
                }
            }
        }
        total += (vol.get(x, y, z) as f64 - s / k as f64).abs();
    }
    total / mask.voxel_count() as f64
}

/// f49: coefficient of variation of the non-empty per-slice areas.
fn slice_area_cv(counts: &[usize]) -> f64 {
    let areas: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    let (m, s) = mean_std(&areas);
    if m > 0.0 {
        s / m
    } else {
        0.0
    }
}

/// f50: least-squares slope of voxel HU against distance from the mask
/// centroid divided by the largest such distance.
fn radial_slope(mask: &Mask3D, vol: &CtVolume) -> f64 {
    let sp = vol.spacing_mm;
    let com = mask.center_of_mass().expect("non-empty");
    let pts: Vec<(f64, f64)> = mask
        .iter_coords()
        .map(|c| {
            let d2: f64 = (0..3).map(|a| ((c[a] as f64 - com[a]) * sp[a]).powi(2)).sum();
            (d2.sqrt(), vol.get(c[0], c[1], c[2]) as f64)
        })
        .collect();
    let rmax = pts.iter().map(|p| p.0).fold(0.0, f64::max);
    if rmax <= 0.0 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mr = pts.iter().map(|p| p.0 / rmax).sum::<f64>() / n;
    let mh = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(r, h) in &pts {
        let dr = r / rmax - mr;
        sxy += dr * (h - mh);
        sxx += dr * dr;
    }
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub item_id: String,
    pub patient_id: String,
    pub features: FeatureVector,
}

pub fn write_feature_csv<W: Write>(w: W, rows: &[FeatureRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["item_id".to_string(), "patient_id".to_string()];
    header.extend(REGISTRY.iter().map(|d| d.code.to_string()));
    wr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.item_id.clone(), r.patient_id.clone()];
        rec.extend(r.features.values().iter().map(|v| v.to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush().map_err(|e| Error::io("<feature csv>", e))?;
    Ok(())
}

pub fn read_feature_csv<R: Read>(r: R) -> Result<Vec<FeatureRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() != 2 + N_FEATURES {
            return Err(Error::LengthMismatch {
                expected: 2 + N_FEATURES,
                found: rec.len(),
            });
        }
        let values = rec
            .iter()
            .skip(2)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("bad feature value {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(FeatureRow {
            item_id: rec[0].to_string(),
            patient_id: rec[1].to_string(),
            features: FeatureVector::new(values)?,
        });
    }
    Ok(rows)
}

/// Sidecar listing: one line per feature, `code name unit is_size_measure`.
pub fn registry_text() -> String {
    let mut s = String::from("# code\tname\tunit\tis_size_measure\n");
    for d in &REGISTRY {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", d.code, d.name, d.unit, d.is_size_measure));
    }
    s
}
