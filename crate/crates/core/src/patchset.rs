//! Fixed-shape CNN input patches and the NDX1 container.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container::{expect_len, frame, unframe};
use crate::ingest::CtVolume;
use crate::{Error, Result};

pub const NDX1_MAGIC: &[u8; 4] = b"NDX1";
pub const NDX1_VERSION: u32 = 1;

/// Fill value for voxels outside the scan (air).
pub const PAD_HU: i16 = -1000;
pub const HU_WINDOW: (f64, f64) = (-1000.0, 400.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    HuWindow,
    ScanMinmax,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::HuWindow => "hu_window",
            Normalization::ScanMinmax => "scan_minmax",
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hu_window" => Ok(Normalization::HuWindow),
            "scan_minmax" => Ok(Normalization::ScanMinmax),
            _ => Err(Error::InvalidInput(format!("unknown normalization {s:?}"))),
        }
    }
}

/// Patch of raw HU values, x-fastest then y then slice.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPatch {
    pub shape: [usize; 3],
    pub hu: Vec<i16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub shape: [usize; 3],
    pub values: Vec<f32>,
    pub item_id: String,
    pub label: i32,
    pub scan_min_hu: f64,
    pub scan_max_hu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub design: String,
    pub normalization: Normalization,
}

/// Voxel index of a continuous coordinate: round half away from zero.
pub fn center_voxel(center: [f64; 3]) -> [i64; 3] {
    center.map(|c| crate::round_half_away(c) as i64)
}

/// Block of `shape` voxels centered on `round(center)`; voxels outside the
/// volume read as air.
pub fn extract_patch(vol: &CtVolume, center: [f64; 3], shape: [usize; 3]) -> Result<RawPatch> {
    if shape.iter().any(|&s| s == 0 || s % 2 == 0) {
        return Err(Error::InvalidShape(shape));
    }
    if center.iter().any(|c| !c.is_finite()) {
        return Err(Error::CenterOutOfBounds(center[0], center[1], center[2]));
    }
    let c = center_voxel(center);
    if !vol.contains(c[0], c[1], c[2]) {
        return Err(Error::CenterOutOfBounds(center[0], center[1], center[2]));
    }
    let half = shape.map(|s| (s / 2) as i64);
    let mut hu = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
    for dz in 0..shape[2] as i64 {
        let z = c[2] - half[2] + dz;
        for dy in 0..shape[1] as i64 {
            let y = c[1] - half[1] + dy;
            for dx in 0..shape[0] as i64 {
                let x = c[0] - half[0] + dx;
                hu.push(vol.get_signed(x, y, z).unwrap_or(PAD_HU));
            }
        }
    }
    Ok(RawPatch { shape, hu })
}

pub fn normalize_value(hu: f64, mode: Normalization, scan_min: f64, scan_max: f64) -> f64 {
    let (lo, hi) = match mode {
        Normalization::HuWindow => HU_WINDOW,
        Normalization::ScanMinmax => (scan_min, scan_max),
    };
    ((hu - lo) / (hi - lo)).clamp(0.0, 1.0)
}

pub fn normalize_patch(
    raw: &RawPatch,
    mode: Normalization,
    scan_min: f64,
    scan_max: f64,
    item_id: impl Into<String>,
    label: i32,
) -> Result<Patch> {
    if mode == Normalization::ScanMinmax && !(scan_max > scan_min) {
        return Err(Error::DegenerateRange {
            min: scan_min,
            max: scan_max,
        });
    }
    Ok(Patch {
        shape: raw.shape,
        values: raw
            .hu
            .iter()
            .map(|&h| normalize_value(h as f64, mode, scan_min, scan_max) as f32)
            .collect(),
        item_id: item_id.into(),
        label,
        scan_min_hu: scan_min,
        scan_max_hu: scan_max,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Ndx1Header {
    n_items: usize,
    shape: [usize; 3],
    normalization: Normalization,
    design: String,
    ids: Vec<String>,
    labels: Vec<i32>,
    scan_min: Vec<f64>,
    scan_max: Vec<f64>,
}

impl PatchSet {
    pub fn new(design: impl Into<String>, normalization: Normalization) -> Self {
        PatchSet {
            patches: Vec::new(),
            design: design.into(),
            normalization,
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Shape shared by all patches, `[0, 0, 0]` when empty.
    pub fn shape(&self) -> [usize; 3] {
        self.patches.first().map(|p| p.shape).unwrap_or([0; 3])
    }

    fn validate(&self) -> Result<()> {
        let shape = self.shape();
        let n = shape[0] * shape[1] * shape[2];
        let mut ids = std::collections::HashSet::new();
        for p in &self.patches {
            if p.shape != shape || p.values.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "patch {} has shape {:?}, set shape {shape:?}",
                    p.item_id, p.shape
                )));
            }
            if !ids.insert(p.item_id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate item id {}", p.item_id)));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = Ndx1Header {
            n_items: self.patches.len(),
            shape: self.shape(),
            normalization: self.normalization,
            design: self.design.clone(),
            ids: self.patches.iter().map(|p| p.item_id.clone()).collect(),
            labels: self.patches.iter().map(|p| p.label).collect(),
            scan_min: self.patches.iter().map(|p| p.scan_min_hu).collect(),
            scan_max: self.patches.iter().map(|p| p.scan_max_hu).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut payload = Vec::with_capacity(4 * self.patches.len() * self.shape().iter().product::<usize>());
        for p in &self.patches {
            for v in &p.values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(frame(NDX1_MAGIC, NDX1_VERSION, &json, &payload))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (hjson, payload) = unframe(NDX1_MAGIC, NDX1_VERSION, bytes)?;
        let h: Ndx1Header = serde_json::from_slice(hjson)
            .map_err(|e| Error::TruncatedPayload(format!("header: {e}")))?;
        let n = h.n_items;
        if [h.ids.len(), h.labels.len(), h.scan_min.len(), h.scan_max.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::InvalidInput("header arrays disagree with n_items".into()));
        }
        let per = h.shape.iter().product::<usize>();
        expect_len(payload, 4 * n * per)?;
        let patches = (0..n)
            .map(|i| Patch {
                shape: h.shape,
                values: payload[4 * i * per..4 * (i + 1) * per]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                item_id: h.ids[i].clone(),
                label: h.labels[i],
                scan_min_hu: h.scan_min[i],
                scan_max_hu: h.scan_max[i],
            })
            .collect();
        let set = PatchSet {
            patches,
            design: h.design,
            normalization: h.normalization,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Returns the number of bytes written.
pub fn write_container(set: &PatchSet, path: &Path) -> Result<usize> {
    let bytes = set.encode()?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn read_container(path: &Path) -> Result<PatchSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    PatchSet::decode(&bytes)
}
