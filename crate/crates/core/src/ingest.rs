//! RAWCT volumes and reader annotation XML.
//!
//! RAWCT layout: 8-byte magic `RAWCT\0\0\0`, a little-endian `u32` header
//! length, that many bytes of UTF-8 JSON, then `nx*ny*nz` little-endian
//! `i16` stored values in x-fastest order. HU = stored * slope + intercept.

use std::fs;
use std::path::Path;

use quick_xml::escape::escape;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const RAWCT_MAGIC: &[u8; 8] = b"RAWCT\0\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Hounsfield units, x-fastest.
    pub voxels: Vec<i16>,
    pub patient_id: String,
}

impl CtVolume {
    pub fn new(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        voxels: Vec<i16>,
        patient_id: impl Into<String>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidInput(format!("volume dims must be positive: {dims:?}")));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "spacing must be positive: {spacing_mm:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} voxels for dims {dims:?}",
                voxels.len()
            )));
        }
        Ok(CtVolume {
            dims,
            spacing_mm,
            voxels,
            patient_id: patient_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[self.index(x, y, z)]
    }

    /// Voxel at signed coordinates, `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64, z: i64) -> Option<i16> {
        if self.contains(x, y, z) {
            Some(self.get(x as usize, y as usize, z as usize))
        } else {
            None
        }
    }

    #[inline]
    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.dims[0]
            && (y as usize) < self.dims[1]
            && (z as usize) < self.dims[2]
    }

    pub fn min_max_hu(&self) -> (i16, i16) {
        self.voxels
            .iter()
            .fold((i16::MAX, i16::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawCtHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    rescale_slope: f64,
    rescale_intercept: f64,
    patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dtype: Option<String>,
}

pub fn parse_volume(path: &Path) -> Result<CtVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn decode_volume(bytes: &[u8]) -> Result<CtVolume> {
    if bytes.len() < 12 {
        return Err(Error::MalformedHeader("file shorter than fixed preamble".into()));
    }
    if &bytes[..8] != RAWCT_MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..8])
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::MalformedHeader("header length exceeds file".into()));
    }
    let header: RawCtHeader = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if let Some(dt) = &header.dtype {
        if !matches!(dt.as_str(), "int16" | "<i2" | "i16") {
            return Err(Error::UnsupportedDType(dt.clone()));
        }
    }
    if header.dims.contains(&0) {
        return Err(Error::MalformedHeader(format!("dims {:?}", header.dims)));
    }
    if header.spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::MalformedHeader(format!(
            "spacing {:?}",
            header.spacing_mm
        )));
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let payload = &body[hlen..];
    if payload.len() != 2 * n {
        return Err(Error::PayloadSizeMismatch {
            expected: 2 * n,
            found: payload.len(),
        });
    }
    let (slope, intercept) = (header.rescale_slope, header.rescale_intercept);
    let voxels = payload
        .chunks_exact(2)
        .map(|c| {
            let stored = i16::from_le_bytes([c[0], c[1]]) as f64;
            (stored * slope + intercept)
                .round()
                .clamp(i16::MIN as f64, i16::MAX as f64) as i16
        })
        .collect();
    CtVolume::new(header.dims, header.spacing_mm, voxels, header.patient_id)
}

/// Encodes with slope 1 and intercept -1024, the usual CT storage convention.
pub fn encode_volume(vol: &CtVolume) -> Vec<u8> {
    let header = RawCtHeader {
        dims: vol.dims,
        spacing_mm: vol.spacing_mm,
        rescale_slope: 1.0,
        rescale_intercept: -1024.0,
        patient_id: vol.patient_id.clone(),
        dtype: None,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 2 * vol.len());
    out.extend_from_slice(RAWCT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &hu in &vol.voxels {
        let stored = (hu as i32 + 1024).clamp(i16::MIN as i32, i16::MAX as i32) as i16;
        out.extend_from_slice(&stored.to_le_bytes());
    }
    out
}

pub fn write_volume(vol: &CtVolume, path: &Path) -> Result<()> {
    fs::write(path, encode_volume(vol)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Locus {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roi {
    pub slice_index: i32,
    /// Edge-map vertices in (x, y) voxel coordinates, in drawing order.
    pub edges: Vec<(i32, i32)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoduleReading {
    pub nodule_id: String,
    pub malignancy: u8,
    pub rois: Vec<Roi>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReadingSession {
    pub nodules: Vec<NoduleReading>,
    /// Parsed for completeness; never enters a cohort.
    pub small_nodules: Vec<Locus>,
    pub non_nodules: Vec<Locus>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationSet {
    pub patient_id: String,
    pub sessions: Vec<ReadingSession>,
}

impl AnnotationSet {
    pub fn nodule_readings(&self) -> impl Iterator<Item = (usize, &NoduleReading)> {
        self.sessions
            .iter()
            .enumerate()
            .flat_map(|(s, sess)| sess.nodules.iter().map(move |n| (s, n)))
    }

    pub fn non_nodule_loci(&self) -> impl Iterator<Item = (usize, Locus)> + '_ {
        self.sessions
            .iter()
            .enumerate()
            .flat_map(|(s, sess)| sess.non_nodules.iter().map(move |&l| (s, l)))
    }

    /// Checks every vertex and locus against the volume grid.
    pub fn validate_bounds(&self, dims: [usize; 3]) -> Result<()> {
        let inside = |x: i32, y: i32, z: i32| {
            x >= 0
                && y >= 0
                && z >= 0
                && (x as usize) < dims[0]
                && (y as usize) < dims[1]
                && (z as usize) < dims[2]
        };
        let oob = |x: i32, y: i32, z: i32| Error::VertexOutOfBounds {
            x: x as i64,
            y: y as i64,
            z: z as i64,
        };
        for sess in &self.sessions {
            for n in &sess.nodules {
                for roi in &n.rois {
                    for &(x, y) in &roi.edges {
                        if !inside(x, y, roi.slice_index) {
                            return Err(oob(x, y, roi.slice_index));
                        }
                    }
                }
            }
            for l in sess.small_nodules.iter().chain(&sess.non_nodules) {
                if !inside(l.x, l.y, l.z) {
                    return Err(oob(l.x, l.y, l.z));
                }
            }
        }
        Ok(())
    }
}

/// Parses the annotation XML subset. Unknown elements are skipped.
pub fn parse_annotations(xml: &[u8]) -> Result<AnnotationSet> {
    parse_annotations_with_warnings(xml).map(|(set, _)| set)
}

pub fn parse_annotations_with_warnings(xml: &[u8]) -> Result<(AnnotationSet, Vec<String>)> {
    let mut reader = Reader::from_reader(xml);
    reader.config_mut().check_end_names = true;
    reader.config_mut().trim_text(true);

    let mut set = AnnotationSet::default();
    let mut warnings = Vec::new();
    let mut stack: Vec<Vec<u8>> = Vec::new();
    let mut seen_root = false;
    let mut nodule: Option<NoduleReading> = None;
    let mut roi: Option<Roi> = None;
    let mut malignancy_text: Option<String> = None;
    let mut buf = Vec::new();

    let syntax = |e: &dyn std::fmt::Display, pos: u64| {
        Error::XmlSyntaxError(format!("at byte {pos}: {e}"))
    };

    loop {
        let pos = reader.buffer_position();
        let ev = reader.read_event_into(&mut buf).map_err(|e| syntax(&e, pos))?;
        match ev {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_empty = matches!(ev, Event::Empty(_));
                let name = e.name().as_ref().to_vec();
                let parent = stack.last().map(|v| v.as_slice());
                match (parent, name.as_slice()) {
                    (None, b"annotations") => {
                        if seen_root {
                            return Err(Error::XmlSyntaxError("multiple root elements".into()));
                        }
                        seen_root = true;
                        set.patient_id = attr(e, "patient_id")?.unwrap_or_default();
                    }
                    (None, other) => {
                        return Err(Error::XmlSyntaxError(format!(
                            "unexpected root element <{}>",
                            String::from_utf8_lossy(other)
                        )));
                    }
                    (Some(b"annotations"), b"readingSession") => {
                        set.sessions.push(ReadingSession::default());
                    }
                    (Some(b"readingSession"), b"nodule") => {
                        nodule = Some(NoduleReading {
                            nodule_id: attr(e, "id")?.unwrap_or_default(),
                            malignancy: 0,
                            rois: Vec::new(),
                        });
                        malignancy_text = None;
                    }
                    (Some(b"readingSession"), b"smallNodule") => {
                        let l = locus(e)?;
                        current_session(&mut set)?.small_nodules.push(l);
                    }
                    (Some(b"readingSession"), b"nonNodule") => {
                        let l = locus(e)?;
                        current_session(&mut set)?.non_nodules.push(l);
                    }
                    (Some(b"nodule"), b"malignancy") => {
                        malignancy_text = Some(String::new());
                    }
                    (Some(b"nodule"), b"roi") => {
                        let z = required_int(e, "sliceIndex")?;
                        roi = Some(Roi {
                            slice_index: z,
                            edges: Vec::new(),
                        });
                    }
                    (Some(b"roi"), b"edge") => {
                        let x = required_int(e, "x")?;
                        let y = required_int(e, "y")?;
                        if let Some(r) = roi.as_mut() {
                            r.edges.push((x, y));
                        }
                    }
                    _ => {}
                }
                if is_empty {
                    close_element(&name, &mut set, &mut nodule, &mut roi, &mut malignancy_text)?;
                } else {
                    stack.push(name);
                }
            }
            Event::Text(t) => {
                if let (Some(b"malignancy"), Some(text)) =
                    (stack.last().map(|v| v.as_slice()), malignancy_text.as_mut())
                {
                    let s = t.unescape().map_err(|e| syntax(&e, pos))?;
                    text.push_str(&s);
                }
            }
            Event::End(e) => {
                let name = e.name().as_ref().to_vec();
                match stack.pop() {
                    Some(open) if open == name => {}
                    _ => {
                        return Err(Error::XmlSyntaxError(format!(
                            "unbalanced end tag </{}>",
                            String::from_utf8_lossy(&name)
                        )))
                    }
                }
                close_element(&name, &mut set, &mut nodule, &mut roi, &mut malignancy_text)?;
            }
            Event::Eof => {
                if !stack.is_empty() {
                    return Err(Error::XmlSyntaxError(format!(
                        "unexpected end of input inside <{}>",
                        String::from_utf8_lossy(stack.last().unwrap())
                    )));
                }
                if !seen_root {
                    return Err(Error::XmlSyntaxError("no <annotations> root element".into()));
                }
                break;
            }
            _ => {}
        }
        buf.clear();
    }

    if set.sessions.len() > 4 {
        let msg = format!(
            "patient {}: {} reading sessions (expected at most 4)",
            set.patient_id,
            set.sessions.len()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok((set, warnings))
}

fn close_element(
    name: &[u8],
    set: &mut AnnotationSet,
    nodule: &mut Option<NoduleReading>,
    roi: &mut Option<Roi>,
    malignancy_text: &mut Option<String>,
) -> Result<()> {
    match name {
        b"roi" => {
            if let Some(r) = roi.take() {
                if r.edges.is_empty() {
                    return Err(Error::EmptyPolygon);
                }
                if let Some(n) = nodule.as_mut() {
                    n.rois.push(r);
                }
            }
        }
        b"malignancy" => {
            if let (Some(text), Some(n)) = (malignancy_text.take(), nodule.as_mut()) {
                let v: i64 = text.trim().parse().map_err(|_| {
                    Error::XmlSyntaxError(format!("malignancy {text:?} is not an integer"))
                })?;
                if !(1..=5).contains(&v) {
                    return Err(Error::RatingOutOfRange(v));
                }
                n.malignancy = v as u8;
            }
        }
        b"nodule" => {
            if let Some(n) = nodule.take() {
                if n.malignancy == 0 {
                    return Err(Error::XmlSyntaxError(format!(
                        "nodule {:?} has no malignancy element",
                        n.nodule_id
                    )));
                }
                current_session(set)?.nodules.push(n);
            }
        }
        _ => {}
    }
    Ok(())
}

fn current_session(set: &mut AnnotationSet) -> Result<&mut ReadingSession> {
    set.sessions
        .last_mut()
        .ok_or_else(|| Error::XmlSyntaxError("element outside readingSession".into()))
}

fn attr(e: &BytesStart, key: &str) -> Result<Option<String>> {
    for a in e.attributes() {
        let a = a.map_err(|err| Error::XmlSyntaxError(err.to_string()))?;
        if a.key.as_ref() == key.as_bytes() {
            let v = a
                .unescape_value()
                .map_err(|err| Error::XmlSyntaxError(err.to_string()))?;
            return Ok(Some(v.into_owned()));
        }
    }
    Ok(None)
}

fn required_int(e: &BytesStart, key: &str) -> Result<i32> {
    let v = attr(e, key)?.ok_or_else(|| {
        Error::XmlSyntaxError(format!(
            "<{}> missing attribute {key}",
            String::from_utf8_lossy(e.name().as_ref())
        ))
    })?;
    v.trim()
        .parse()
        .map_err(|_| Error::XmlSyntaxError(format!("attribute {key}={v:?} is not an integer")))
}

fn locus(e: &BytesStart) -> Result<Locus> {
    Ok(Locus {
        x: required_int(e, "x")?,
        y: required_int(e, "y")?,
        z: required_int(e, "z")?,
    })
}

pub fn serialize_annotations(set: &AnnotationSet) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(s, "<annotations patient_id=\"{}\">", escape(&set.patient_id));
    for sess in &set.sessions {
        s.push_str("  <readingSession>\n");
        for n in &sess.nodules {
            let _ = writeln!(s, "    <nodule id=\"{}\">", escape(&n.nodule_id));
            let _ = writeln!(s, "      <malignancy>{}</malignancy>", n.malignancy);
            for r in &n.rois {
                let _ = writeln!(s, "      <roi sliceIndex=\"{}\">", r.slice_index);
                for (x, y) in &r.edges {
                    let _ = writeln!(s, "        <edge x=\"{x}\" y=\"{y}\"/>");
                }
                s.push_str("      </roi>\n");
            }
            s.push_str("    </nodule>\n");
        }
        for l in &sess.small_nodules {
            let _ = writeln!(
                s,
                "    <smallNodule x=\"{}\" y=\"{}\" z=\"{}\"/>",
                l.x, l.y, l.z
            );
        }
        for l in &sess.non_nodules {
            let _ = writeln!(
                s,
                "    <nonNodule x=\"{}\" y=\"{}\" z=\"{}\"/>",
                l.x, l.y, l.z
            );
        }
        s.push_str("  </readingSession>\n");
    }
    s.push_str("</annotations>\n");
    s
}
