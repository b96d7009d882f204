//! Consensus nodules from multi-reader annotations, and labeled cohorts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ingest::{AnnotationSet, NoduleReading};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2D {
    pub dims: [usize; 2],
    pub bits: Vec<bool>,
}

impl Mask2D {
    pub fn new(dims: [usize; 2]) -> Self {
        Mask2D {
            dims,
            bits: vec![false; dims[0] * dims[1]],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[x + self.dims[0] * y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize) {
        self.bits[x + self.dims[0] * y] = true;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Voxel bitset with the dimensions of its parent volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3D {
    dims: [usize; 3],
    words: Vec<u64>,
    count: usize,
}

impl Mask3D {
    pub fn new(dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Mask3D {
            dims,
            words: vec![0; n.div_ceil(64)],
            count: 0,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn contains_index(&self, idx: usize) -> bool {
        self.words[idx / 64] >> (idx % 64) & 1 == 1
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        self.contains_index(self.index(x, y, z))
    }

    /// Membership at signed coordinates; outside the grid is `false`.
    #[inline]
    pub fn contains_signed(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.dims[0]
            && (y as usize) < self.dims[1]
            && (z as usize) < self.dims[2]
            && self.contains(x as usize, y as usize, z as usize)
    }

    pub fn insert_index(&mut self, idx: usize) {
        let (w, b) = (idx / 64, idx % 64);
        if self.words[w] >> b & 1 == 0 {
            self.words[w] |= 1 << b;
            self.count += 1;
        }
    }

    pub fn insert(&mut self, x: usize, y: usize, z: usize) {
        let idx = self.index(x, y, z);
        self.insert_index(idx);
    }

    pub fn remove_index(&mut self, idx: usize) {
        let (w, b) = (idx / 64, idx % 64);
        if self.words[w] >> b & 1 == 1 {
            self.words[w] &= !(1 << b);
            self.count -= 1;
        }
    }

    pub fn iter_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    None
                } else {
                    let b = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    Some(wi * 64 + b)
                }
            })
        })
    }

    pub fn iter_coords(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.iter_indices().map(|i| self.coords(i))
    }

    pub fn intersects(&self, other: &Mask3D) -> bool {
        self.words
            .iter()
            .zip(&other.words)
            .any(|(a, b)| a & b != 0)
    }

    pub fn intersection_count(&self, other: &Mask3D) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_with(&mut self, other: &Mask3D) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        self.count = self.words.iter().map(|w| w.count_ones() as usize).sum();
    }

    /// Center of mass in voxel index coordinates.
    pub fn center_of_mass(&self) -> Result<[f64; 3]> {
        if self.is_empty() {
            return Err(Error::EmptyMask);
        }
        let mut s = [0.0f64; 3];
        for c in self.iter_coords() {
            for a in 0..3 {
                s[a] += c[a] as f64;
            }
        }
        let n = self.count as f64;
        Ok([s[0] / n, s[1] / n, s[2] / n])
    }

    /// Slice `z` as a 2-D mask.
    pub fn slice(&self, z: usize) -> Mask2D {
        let mut m = Mask2D::new([self.dims[0], self.dims[1]]);
        for y in 0..self.dims[1] {
            for x in 0..self.dims[0] {
                if self.contains(x, y, z) {
                    m.set(x, y);
                }
            }
        }
        m
    }

    pub fn slice_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.dims[2]];
        for [_, _, z] in self.iter_coords() {
            counts[z] += 1;
        }
        counts
    }

    /// Run-length encoding as `(start, length)` pairs over linear indices.
    pub fn to_runs(&self) -> Vec<[usize; 2]> {
        let mut runs: Vec<[usize; 2]> = Vec::new();
        for i in self.iter_indices() {
            match runs.last_mut() {
                Some(r) if r[0] + r[1] == i => r[1] += 1,
                _ => runs.push([i, 1]),
            }
        }
        runs
    }

    pub fn from_runs(dims: [usize; 3], runs: &[[usize; 2]]) -> Result<Self> {
        let mut m = Mask3D::new(dims);
        let n = m.n_voxels();
        for &[start, len] in runs {
            if start + len > n {
                return Err(Error::DimensionMismatch(format!(
                    "run {start}+{len} exceeds {n} voxels"
                )));
            }
            for i in start..start + len {
                m.insert_index(i);
            }
        }
        Ok(m)
    }
}

/// Even-odd scanline fill of a closed integer polygon; pixels on the
/// outline are part of the mask.
pub fn rasterize_roi(polygon: &[(i32, i32)], dims: [usize; 2]) -> Result<Mask2D> {
    if polygon.is_empty() {
        return Err(Error::EmptyPolygon);
    }
    for &(x, y) in polygon {
        if x < 0 || y < 0 || x as usize >= dims[0] || y as usize >= dims[1] {
            return Err(Error::VertexOutOfBounds {
                x: x as i64,
                y: y as i64,
                z: 0,
            });
        }
    }
    let mut mask = Mask2D::new(dims);
    let n = polygon.len();

    // Outline: every lattice point on every edge.
    for i in 0..n {
        let (x0, y0) = polygon[i];
        let (x1, y1) = polygon[(i + 1) % n];
        let (dx, dy) = (x1 - x0, y1 - y0);
        let g = gcd(dx.unsigned_abs(), dy.unsigned_abs()) as i32;
        if g == 0 {
            mask.set(x0 as usize, y0 as usize);
            continue;
        }
        let (sx, sy) = (dx / g, dy / g);
        for k in 0..=g {
            mask.set((x0 + k * sx) as usize, (y0 + k * sy) as usize);
        }
    }

    // Interior: crossings of each pixel-center row, half-open in y.
    let ymin = polygon.iter().map(|p| p.1).min().unwrap();
    let ymax = polygon.iter().map(|p| p.1).max().unwrap();
    let mut crossings: Vec<(i64, i64)> = Vec::new();
    for y in ymin..=ymax {
        crossings.clear();
        for i in 0..n {
            let (x0, y0) = polygon[i];
            let (x1, y1) = polygon[(i + 1) % n];
            if (y0 > y) != (y1 > y) {
                // x = x0 + (y - y0)(x1 - x0)/(y1 - y0) as num/den with den > 0
                let mut num = x0 as i64 * (y1 - y0) as i64 + (y - y0) as i64 * (x1 - x0) as i64;
                let mut den = (y1 - y0) as i64;
                if den < 0 {
                    num = -num;
                    den = -den;
                }
                crossings.push((num, den));
            }
        }
        crossings.sort_by(|a, b| (a.0 as i128 * b.1 as i128).cmp(&(b.0 as i128 * a.1 as i128)));
        for pair in crossings.chunks_exact(2) {
            let lo = pair[0].0.div_euclid(pair[0].1)
                + i64::from(pair[0].0.rem_euclid(pair[0].1) != 0);
            let hi = pair[1].0.div_euclid(pair[1].1);
            for x in lo.max(0)..=hi.min(dims[0] as i64 - 1) {
                mask.set(x as usize, y as usize);
            }
        }
    }
    Ok(mask)
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// A reader's nodule outline rasterized into the volume grid.
#[derive(Debug, Clone)]
pub struct ReadingMask {
    pub session: usize,
    pub nodule_id: String,
    pub rating: u8,
    pub mask: Mask3D,
}

pub fn reading_mask(reading: &NoduleReading, session: usize, dims: [usize; 3]) -> Result<ReadingMask> {
    let mut mask = Mask3D::new(dims);
    for roi in &reading.rois {
        let z = roi.slice_index;
        if z < 0 || z as usize >= dims[2] {
            let (x, y) = roi.edges.first().copied().unwrap_or((0, 0));
            return Err(Error::VertexOutOfBounds {
                x: x as i64,
                y: y as i64,
                z: z as i64,
            });
        }
        let m2 = rasterize_roi(&roi.edges, [dims[0], dims[1]]).map_err(|e| match e {
            Error::VertexOutOfBounds { x, y, .. } => Error::VertexOutOfBounds { x, y, z: z as i64 },
            e => e,
        })?;
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if m2.get(x, y) {
                    mask.insert(x, y, z as usize);
                }
            }
        }
    }
    Ok(ReadingMask {
        session,
        nodule_id: reading.nodule_id.clone(),
        rating: reading.malignancy,
        mask,
    })
}

pub fn reading_masks(set: &AnnotationSet, dims: [usize; 3]) -> Result<Vec<ReadingMask>> {
    set.nodule_readings()
        .map(|(s, r)| reading_mask(r, s, dims))
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Partitions readings into groups connected by chains of voxel overlap.
/// Groups are ordered by their first member; members ascend.
pub fn group_masks(masks: &[&Mask3D]) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(masks.len());
    if let Some(first) = masks.first() {
        let mut owner = vec![u32::MAX; first.n_voxels()];
        for (i, m) in masks.iter().enumerate() {
            for v in m.iter_indices() {
                match owner[v] {
                    u32::MAX => owner[v] = i as u32,
                    o => uf.union(o as usize, i),
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..masks.len() {
        let r = uf.find(i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Groups the nodule readings of one annotation set.
pub fn group_readings(set: &AnnotationSet, dims: [usize; 3]) -> Result<Vec<Vec<ReadingMask>>> {
    let readings = reading_masks(set, dims)?;
    let refs: Vec<&Mask3D> = readings.iter().map(|r| &r.mask).collect();
    let groups = group_masks(&refs);
    let mut slots: Vec<Option<ReadingMask>> = readings.into_iter().map(Some).collect();
    Ok(groups
        .into_iter()
        .map(|g| g.into_iter().map(|i| slots[i].take().unwrap()).collect())
        .collect())
}

/// Voxels present in at least half of the member masks.
pub fn consensus_mask(members: &[&Mask3D]) -> Result<Mask3D> {
    let first = members.first().ok_or(Error::EmptyMask)?;
    let dims = first.dims();
    if let Some(m) = members.iter().find(|m| m.dims() != dims) {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            m.dims(),
            dims
        )));
    }
    let k = members.len();
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for m in members {
        for v in m.iter_indices() {
            *votes.entry(v).or_default() += 1;
        }
    }
    let mut out = Mask3D::new(dims);
    for (v, c) in votes {
        if 2 * c >= k {
            out.insert_index(v);
        }
    }
    Ok(out)
}

/// Mean rating rounded to the nearest integer, halves away from zero.
pub fn consensus_rating(ratings: &[u8]) -> Result<u8> {
    if ratings.is_empty() {
        return Err(Error::InvalidInput("no ratings".into()));
    }
    if let Some(&r) = ratings.iter().find(|&&r| !(1..=5).contains(&r)) {
        return Err(Error::RatingOutOfRange(r as i64));
    }
    let sum: u32 = ratings.iter().map(|&r| r as u32).sum();
    Ok(crate::round_half_away(sum as f64 / ratings.len() as f64) as u8)
}

/// Unweighted mean of the member masks' centers of mass.
pub fn consensus_centroid(members: &[&Mask3D]) -> Result<[f64; 3]> {
    if members.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut acc = [0.0; 3];
    for m in members {
        let c = m.center_of_mass()?;
        for a in 0..3 {
            acc[a] += c[a];
        }
    }
    let k = members.len() as f64;
    Ok([acc[0] / k, acc[1] / k, acc[2] / k])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusNodule {
    pub nodule_uid: String,
    pub patient_id: String,
    pub member_readings: Vec<(usize, String)>,
    pub consensus_mask: Mask3D,
    pub rating: u8,
    pub centroid: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonNoduleLocus {
    pub locus_id: String,
    pub patient_id: String,
    pub position: [f64; 3],
    pub n_readers: usize,
}

/// Non-nodule loci from different readers closer than this are one locus.
pub const NON_NODULE_MERGE_MM: f64 = 5.0;

/// Consensus nodules and merged non-nodule loci for one patient.
pub fn build_consensus(
    set: &AnnotationSet,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
) -> Result<(Vec<ConsensusNodule>, Vec<NonNoduleLocus>)> {
    let groups = group_readings(set, dims)?;
    let mut nodules = Vec::with_capacity(groups.len());
    for (gi, group) in groups.into_iter().enumerate() {
        let masks: Vec<&Mask3D> = group.iter().map(|r| &r.mask).collect();
        let ratings: Vec<u8> = group.iter().map(|r| r.rating).collect();
        let mask = consensus_mask(&masks)?;
        nodules.push(ConsensusNodule {
            nodule_uid: format!("{}_n{:03}", set.patient_id, gi),
            patient_id: set.patient_id.clone(),
            member_readings: group
                .iter()
                .map(|r| (r.session, r.nodule_id.clone()))
                .collect(),
            consensus_mask: mask,
            rating: consensus_rating(&ratings)?,
            centroid: consensus_centroid(&masks)?,
        });
    }

    let loci: Vec<_> = set.non_nodule_loci().map(|(_, l)| l).collect();
    let mut uf = UnionFind::new(loci.len());
    for i in 0..loci.len() {
        for j in i + 1..loci.len() {
            let d2: f64 = [
                (loci[i].x - loci[j].x) as f64 * spacing_mm[0],
                (loci[i].y - loci[j].y) as f64 * spacing_mm[1],
                (loci[i].z - loci[j].z) as f64 * spacing_mm[2],
            ]
            .iter()
            .map(|d| d * d)
            .sum();
            if d2.sqrt() <= NON_NODULE_MERGE_MM {
                uf.union(i, j);
            }
        }
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..loci.len() {
        let r = uf.find(i);
        clusters.entry(r).or_default().push(i);
    }
    let non_nodules = clusters
        .into_values()
        .enumerate()
        .map(|(ci, members)| {
            let k = members.len() as f64;
            let mut p = [0.0; 3];
            for &m in &members {
                p[0] += loci[m].x as f64;
                p[1] += loci[m].y as f64;
                p[2] += loci[m].z as f64;
            }
            NonNoduleLocus {
                locus_id: format!("{}_x{:03}", set.patient_id, ci),
                patient_id: set.patient_id.clone(),
                position: [p[0] / k, p[1] / k, p[2] / k],
                n_readers: members.len(),
            }
        })
        .collect();
    Ok((nodules, non_nodules))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Design {
    #[serde(rename = "s1_vs_s45")]
    S1vS45,
    #[serde(rename = "s12_vs_s45")]
    S12vS45,
    #[serde(rename = "s0_vs_s1_5")]
    S0vS1_5,
}

impl Design {
    pub const ALL: [Design; 3] = [Design::S1vS45, Design::S12vS45, Design::S0vS1_5];

    pub fn name(self) -> &'static str {
        match self {
            Design::S1vS45 => "s1_vs_s45",
            Design::S12vS45 => "s12_vs_s45",
            Design::S0vS1_5 => "s0_vs_s1_5",
        }
    }

    /// Label for a rating (0 = non-nodule); `None` means excluded.
    pub fn label_for_rating(self, rating: u8) -> Option<Label> {
        match (self, rating) {
            (Design::S1vS45, 1) => Some(Label::Negative),
            (Design::S12vS45, 1 | 2) => Some(Label::Negative),
            (Design::S1vS45 | Design::S12vS45, 4 | 5) => Some(Label::Positive),
            (Design::S0vS1_5, 0) => Some(Label::Negative),
            (Design::S0vS1_5, 1..=5) => Some(Label::Positive),
            _ => None,
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "s1_vs_s45" | "s1vs45" | "s1vss45" => Ok(Design::S1vS45),
            "s12_vs_s45" | "s12vs45" | "s12vss45" => Ok(Design::S12vS45),
            "s0_vs_s1_5" | "s0vs1_5" | "s0vss1_5" => Ok(Design::S0vS1_5),
            _ => Err(Error::InvalidInput(format!("unknown design {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Negative => "negative",
            Label::Positive => "positive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Nodule,
    NonNodule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortItem {
    pub item_id: String,
    pub patient_id: String,
    pub label: Label,
    pub source: Source,
    /// Consensus rating; 0 for non-nodule loci.
    pub rating: u8,
    pub centroid: [f64; 3],
}

/// Labels nodules and non-nodule loci under a design. With `balance`, the
/// majority class is undersampled (seeded) to the minority size; surviving
/// items keep their input order.
pub fn build_cohort(
    nodules: &[ConsensusNodule],
    non_nodules: &[NonNoduleLocus],
    design: Design,
    balance: bool,
    seed: u64,
) -> Result<Vec<CohortItem>> {
    let mut items = Vec::new();
    for n in nodules {
        if !(1..=5).contains(&n.rating) {
            return Err(Error::RatingOutOfRange(n.rating as i64));
        }
        if let Some(label) = design.label_for_rating(n.rating) {
            items.push(CohortItem {
                item_id: n.nodule_uid.clone(),
                patient_id: n.patient_id.clone(),
                label,
                source: Source::Nodule,
                rating: n.rating,
                centroid: n.centroid,
            });
        }
    }
    if design == Design::S0vS1_5 {
        for l in non_nodules {
            items.push(CohortItem {
                item_id: l.locus_id.clone(),
                patient_id: l.patient_id.clone(),
                label: Label::Negative,
                source: Source::NonNodule,
                rating: 0,
                centroid: l.position,
            });
        }
    }
    check_classes(&items, design)?;
    if balance {
        items = balance_items(items, seed, |i| i.label);
    }
    Ok(items)
}

pub(crate) fn check_classes(items: &[CohortItem], design: Design) -> Result<()> {
    for (label, class) in [(Label::Negative, "negative"), (Label::Positive, "positive")] {
        if !items.iter().any(|i| i.label == label) {
            return Err(Error::EmptyClass {
                design: design.name().into(),
                class,
            });
        }
    }
    Ok(())
}

/// Seeded undersampling of the majority class; order is preserved.
pub fn balance_items<T>(items: Vec<T>, seed: u64, label: impl Fn(&T) -> Label) -> Vec<T> {
    let pos: Vec<usize> = (0..items.len())
        .filter(|&i| label(&items[i]) == Label::Positive)
        .collect();
    let neg: Vec<usize> = (0..items.len())
        .filter(|&i| label(&items[i]) == Label::Negative)
        .collect();
    let (mut major, minor) = if pos.len() >= neg.len() {
        (pos, neg)
    } else {
        (neg, pos)
    };
    let mut rng = seed::rng(seed);
    major.shuffle(&mut rng);
    major.truncate(minor.len());
    let mut keep = vec![false; items.len()];
    for i in major.into_iter().chain(minor) {
        keep[i] = true;
    }
    items
        .into_iter()
        .zip(keep)
        .filter_map(|(it, k)| k.then_some(it))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub nodule_uid: String,
    pub patient_id: String,
    pub design: String,
    pub label: String,
    pub rating: u8,
    pub centroid_x: f64,
    pub centroid_y: f64,
    pub centroid_z: f64,
}

pub fn write_cohort_csv<W: Write>(w: W, rows: &[CohortRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    if rows.is_empty() {
        wr.write_record([
            "nodule_uid",
            "patient_id",
            "design",
            "label",
            "rating",
            "centroid_x",
            "centroid_y",
            "centroid_z",
        ])?;
    }
    wr.flush().map_err(|e| Error::io("<cohort csv>", e))?;
    Ok(())
}

pub fn read_cohort_csv<R: Read>(r: R) -> Result<Vec<CohortRow>> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

impl CohortItem {
    pub fn to_row(&self, design: Design) -> CohortRow {
        CohortRow {
            nodule_uid: self.item_id.clone(),
            patient_id: self.patient_id.clone(),
            design: design.name().into(),
            label: self.label.name().into(),
            rating: self.rating,
            centroid_x: self.centroid[0],
            centroid_y: self.centroid[1],
            centroid_z: self.centroid[2],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_annotations, ReadingSession, Roi};

    /// Independent per-pixel oracle: on an edge, or inside by crossing parity.
    pub(crate) fn brute_force(poly: &[(i32, i32)], dims: [usize; 2]) -> Mask2D {
        let mut m = Mask2D::new(dims);
        let n = poly.len();
        for py in 0..dims[1] as i64 {
            for px in 0..dims[0] as i64 {
                let mut on_edge = false;
                let mut inside = false;
                for i in 0..n {
                    let (x0, y0) = (poly[i].0 as i64, poly[i].1 as i64);
                    let (x1, y1) = (poly[(i + 1) % n].0 as i64, poly[(i + 1) % n].1 as i64);
                    let cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
                    if cross == 0
                        && px >= x0.min(x1)
                        && px <= x0.max(x1)
                        && py >= y0.min(y1)
                        && py <= y0.max(y1)
                    {
                        on_edge = true;
                    }
                    if (y0 > py) != (y1 > py) {
                        let xc = x0 as f64 + (py - y0) as f64 * (x1 - x0) as f64 / (y1 - y0) as f64;
                        if (px as f64) < xc {
                            inside = !inside;
                        }
                    }
                }
                if on_edge || inside {
                    m.set(px as usize, py as usize);
                }
            }
        }
        m
    }

    #[test]
    fn square_has_25_pixels() {
        let sq = [(0, 0), (0, 4), (4, 4), (4, 0)];
        let m = rasterize_roi(&sq, [8, 8]).unwrap();
        assert_eq!(m.count(), 25);
        assert_eq!(m, brute_force(&sq, [8, 8]));
    }

    #[test]
    fn single_vertex_is_one_pixel() {
        let m = rasterize_roi(&[(3, 2)], [5, 5]).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(3, 2));
    }

    #[test]
    fn concave_l_shape_matches_oracle() {
        let l = [(1, 1), (1, 9), (8, 9), (8, 6), (4, 6), (4, 1)];
        let m = rasterize_roi(&l, [12, 12]).unwrap();
        assert_eq!(m, brute_force(&l, [12, 12]));
        // 4 wide (x 1..=4) x 9 tall, plus the foot x 5..=8, y 6..=9
        assert_eq!(m.count(), 4 * 9 + 4 * 4);
    }

    #[test]
    fn empty_polygon_error() {
        assert!(matches!(rasterize_roi(&[], [4, 4]), Err(Error::EmptyPolygon)));
    }

    fn cube(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Mask3D {
        let mut m = Mask3D::new(dims);
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    m.insert(x, y, z);
                }
            }
        }
        m
    }

    #[test]
    fn grouping_identical_disjoint_and_chained() {
        let d = [10, 10, 3];
        let a = cube(d, [0, 0, 0], [2, 2, 0]);
        assert_eq!(group_masks(&[&a, &a.clone()]), vec![vec![0, 1]]);
        let b = cube(d, [5, 5, 0], [6, 6, 0]);
        assert_eq!(group_masks(&[&a, &b]), vec![vec![0], vec![1]]);
        // A-B overlap, B-C overlap, A-C disjoint
        let a = cube(d, [0, 0, 0], [2, 2, 0]);
        let b = cube(d, [2, 2, 0], [4, 4, 0]);
        let c = cube(d, [4, 4, 0], [6, 6, 0]);
        assert!(!a.intersects(&c));
        assert_eq!(group_masks(&[&a, &b, &c]), vec![vec![0, 1, 2]]);
        assert_eq!(group_masks(&[&c, &a, &b]), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn consensus_vote_thresholds() {
        let d = [4, 4, 1];
        let a = cube(d, [0, 0, 0], [1, 1, 0]);
        assert_eq!(consensus_mask(&[&a]).unwrap(), a);
        let b = cube(d, [1, 1, 0], [2, 2, 0]);
        let two = consensus_mask(&[&a, &b]).unwrap();
        assert!(two.contains(0, 0, 0));
        assert_eq!(two.voxel_count(), 7);
        let c = cube(d, [3, 3, 0], [3, 3, 0]);
        let three = consensus_mask(&[&a, &b, &c]).unwrap();
        assert!(!three.contains(0, 0, 0));
        assert!(!three.contains(3, 3, 0));
        assert_eq!(three.voxel_count(), 1);
    }

    #[test]
    fn rating_rounding() {
        assert_eq!(consensus_rating(&[3, 3, 3]).unwrap(), 3);
        assert_eq!(consensus_rating(&[4, 4, 5]).unwrap(), 4);
        assert_eq!(consensus_rating(&[4, 5]).unwrap(), 5);
        assert_eq!(consensus_rating(&[1, 2]).unwrap(), 2);
        assert_eq!(consensus_rating(&[1, 1, 2, 2]).unwrap(), 2);
    }

    #[test]
    fn centroid_examples() {
        let d = [12, 12, 5];
        let c = cube(d, [4, 4, 1], [6, 6, 3]);
        assert_eq!(consensus_centroid(&[&c]).unwrap(), [5.0, 5.0, 2.0]);
        let a = cube(d, [4, 4, 2], [4, 4, 2]);
        let b = cube(d, [6, 6, 2], [6, 6, 2]);
        assert_eq!(consensus_centroid(&[&a, &b]).unwrap(), [5.0, 5.0, 2.0]);
        let p = |x, y| cube(d, [x, y, 0], [x, y, 0]);
        let got = consensus_centroid(&[&p(0, 0), &p(3, 0), &p(0, 3)]).unwrap();
        assert_eq!(got, [1.0, 1.0, 0.0]);
        assert!(matches!(
            consensus_centroid(&[&Mask3D::new(d)]),
            Err(Error::EmptyMask)
        ));
    }

    fn nodule(uid: &str, pid: &str, rating: u8) -> ConsensusNodule {
        let mut m = Mask3D::new([2, 2, 1]);
        m.insert(0, 0, 0);
        ConsensusNodule {
            nodule_uid: uid.into(),
            patient_id: pid.into(),
            member_readings: vec![(0, "r".into())],
            consensus_mask: m,
            rating,
            centroid: [0.0; 3],
        }
    }

    #[test]
    fn cohort_labels_per_design() {
        let ns: Vec<_> = [1, 1, 4, 5, 3]
            .iter()
            .enumerate()
            .map(|(i, &r)| nodule(&format!("n{i}"), "p", r))
            .collect();
        let c = build_cohort(&ns, &[], Design::S1vS45, false, 0).unwrap();
        let labels: Vec<_> = c.iter().map(|i| (i.item_id.as_str(), i.label)).collect();
        assert_eq!(
            labels,
            vec![
                ("n0", Label::Negative),
                ("n1", Label::Negative),
                ("n2", Label::Positive),
                ("n3", Label::Positive)
            ]
        );
        let ns = vec![nodule("a", "p", 2), nodule("b", "p", 4)];
        let c = build_cohort(&ns, &[], Design::S12vS45, false, 0).unwrap();
        assert_eq!(c[0].label, Label::Negative);
        assert_eq!(c[1].label, Label::Positive);
        assert!(matches!(
            build_cohort(&ns, &[], Design::S1vS45, false, 0),
            Err(Error::EmptyClass { .. })
        ));
    }

    #[test]
    fn s0_design_uses_non_nodules() {
        let ns = vec![nodule("a", "p", 3), nodule("b", "p", 1)];
        let nn = vec![NonNoduleLocus {
            locus_id: "x".into(),
            patient_id: "p".into(),
            position: [1.0, 1.0, 0.0],
            n_readers: 1,
        }];
        let c = build_cohort(&ns, &nn, Design::S0vS1_5, false, 0).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[2].source, Source::NonNodule);
        assert_eq!(c[2].label, Label::Negative);
        let b = build_cohort(&ns, &nn, Design::S0vS1_5, true, 3).unwrap();
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn consensus_from_annotations() {
        let roi = |x0: i32, z| Roi {
            slice_index: z,
            edges: vec![(x0, 2), (x0 + 3, 2), (x0 + 3, 5), (x0, 5)],
        };
        let reading = |id: &str, r, x0| NoduleReading {
            nodule_id: id.into(),
            malignancy: r,
            rois: vec![roi(x0, 1), roi(x0, 2)],
        };
        let mut set = AnnotationSet {
            patient_id: "P".into(),
            sessions: vec![ReadingSession::default(); 2],
        };
        set.sessions[0].nodules.push(reading("a", 4, 2));
        set.sessions[1].nodules.push(reading("b", 5, 3));
        set.sessions[1].nodules.push(reading("c", 1, 12));
        set.sessions[0].non_nodules.push(crate::ingest::Locus { x: 18, y: 18, z: 1 });
        set.sessions[1].non_nodules.push(crate::ingest::Locus { x: 19, y: 18, z: 1 });
        let (ns, nn) = build_consensus(&set, [24, 24, 4], [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(ns.len(), 2);
        assert_eq!(ns[0].rating, 5);
        assert_eq!(ns[0].member_readings.len(), 2);
        assert_eq!(ns[0].centroid, [4.0, 3.5, 1.5]);
        assert_eq!(ns[1].rating, 1);
        assert_eq!(nn.len(), 1);
        assert_eq!(nn[0].position, [18.5, 18.0, 1.0]);

        let xml = crate::ingest::serialize_annotations(&set);
        assert_eq!(parse_annotations(xml.as_bytes()).unwrap(), set);
    }

    #[test]
    fn runs_round_trip() {
        let d = [5, 4, 3];
        let m = cube(d, [1, 1, 0], [3, 2, 2]);
        assert_eq!(Mask3D::from_runs(d, &m.to_runs()).unwrap(), m);
    }

    #[test]
    fn cohort_csv_round_trip() {
        let ns = vec![nodule("a", "p", 1), nodule("b", "q", 5)];
        let c = build_cohort(&ns, &[], Design::S1vS45, false, 0).unwrap();
        let rows: Vec<_> = c.iter().map(|i| i.to_row(Design::S1vS45)).collect();
        let mut buf = Vec::new();
        write_cohort_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "nodule_uid,patient_id,design,label,rating,centroid_x,centroid_y,centroid_z\n"
        ));
        assert_eq!(read_cohort_csv(&buf[..]).unwrap(), rows);
    }
}
