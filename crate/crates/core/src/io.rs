//! The `TMEF1` raster container.
//!
//! A container is one line of JSON header terminated by `\n`, followed by
//! the channel planes: row-major, little-endian, concatenated in header
//! order. Several containers may be concatenated in one file; a teacher
//! bundle is such a sequence, distinguished by each header's `role`.
//!
//! ```text
//! {"magic":"TMEF1","width":4,"height":2,"dtype":"u8","channels":["label"]}\n
//! <8 bytes>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregationResult, HaloContext, MitosisCandidate, TeacherBundle};
use crate::error::{Error, Result};
use crate::raster::{BitMask, Grid, InstanceMap, LabelRaster, LogitStack, RgbTile, TeacherType};
use crate::taxonomy::{ClassId, Taxonomy};

pub const MAGIC: &str = "TMEF1";

pub mod role {
    pub const HE: &str = "he";
    pub const HE_HALO: &str = "he_halo";
    pub const TISSUE_LOGITS: &str = "tissue_logits";
    pub const CELL_LOGITS: &str = "cell_logits";
    pub const NUCLEI: &str = "nuclei";
    pub const LABELS: &str = "labels";
    pub const STUDENT_LOGITS: &str = "student_logits";
}

const RGB_CHANNELS: [&str; 3] = ["r", "g", "b"];
const VALID_CHANNEL: &str = "valid";
const LABEL_CHANNEL: &str = "label";
const INSTANCE_CHANNEL: &str = "instance";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    U32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 | Dtype::U32 => 4,
        }
    }
}

/// Attributes of one instance as stored in a header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_type: Option<TeacherType>,
    /// Class name; absent when undefined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub magic: String,
    pub width: usize,
    pub height: usize,
    pub dtype: Dtype,
    pub channels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halo: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<Vec<InstanceRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<MitosisCandidate>>,
}

impl Header {
    pub fn new(width: usize, height: usize, dtype: Dtype, channels: Vec<String>) -> Self {
        Header {
            magic: MAGIC.to_owned(),
            width,
            height,
            dtype,
            channels,
            mpp: None,
            halo: None,
            role: None,
            instances: None,
            candidates: None,
        }
    }

    pub fn with_role(mut self, role: &str) -> Self {
        self.role = Some(role.to_owned());
        self
    }

    pub fn payload_len(&self) -> usize {
        self.width * self.height * self.channels.len() * self.dtype.size()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Planes {
    F32(Vec<Vec<f32>>),
    U8(Vec<Vec<u8>>),
    U32(Vec<Vec<u32>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackContainer {
    pub header: Header,
    pub planes: Planes,
}

fn check_raw_header(value: &serde_json::Value) -> Result<()> {
    match value.get("magic").and_then(|m| m.as_str()) {
        Some(MAGIC) => {}
        Some(other) => return Err(Error::Format(format!("bad magic `{other}`, expected `{MAGIC}`"))),
        None => return Err(Error::Format("header has no magic".to_owned())),
    }
    if let Some(d) = value.get("dtype").and_then(|d| d.as_str()) {
        if !matches!(d, "f32" | "u8" | "u32") {
            return Err(Error::Format(format!("unknown dtype `{d}`")));
        }
    }
    Ok(())
}

impl StackContainer {
    pub fn new(header: Header, planes: Planes) -> Result<Self> {
        let c = StackContainer { header, planes };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.magic != MAGIC {
            return Err(Error::Format(format!("bad magic `{}`", h.magic)));
        }
        if h.width == 0 || h.height == 0 {
            return Err(Error::Format("container extent must be positive".to_owned()));
        }
        let n = h.width * h.height;
        let (dtype, lens): (Dtype, Vec<usize>) = match &self.planes {
            Planes::F32(p) => (Dtype::F32, p.iter().map(Vec::len).collect()),
            Planes::U8(p) => (Dtype::U8, p.iter().map(Vec::len).collect()),
            Planes::U32(p) => (Dtype::U32, p.iter().map(Vec::len).collect()),
        };
        if dtype != h.dtype {
            return Err(Error::Format("header dtype does not match payload".to_owned()));
        }
        if lens.len() != h.channels.len() || lens.iter().any(|&l| l != n) {
            return Err(Error::Format("plane count or size does not match the header".to_owned()));
        }
        if let Planes::F32(p) = &self.planes {
            for (c, plane) in p.iter().enumerate() {
                if let Some(index) = plane.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { channel: h.channels[c].clone(), index });
                }
            }
        }
        Ok(())
    }

    /// Decodes one container from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header line".to_owned()))?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Format(format!("header is not JSON: {e}")))?;
        check_raw_header(&raw)?;
        let header: Header = serde_json::from_value(raw)?;
        let expected = header.payload_len();
        let body = &bytes[nl + 1..];
        if body.len() < expected {
            return Err(Error::TruncatedPayload { expected, actual: body.len() });
        }
        let n = header.width * header.height;
        let body = &body[..expected];
        let planes = match header.dtype {
            Dtype::U8 => Planes::U8(body.chunks_exact(n.max(1)).map(<[u8]>::to_vec).collect()),
            Dtype::U32 => Planes::U32(
                body.chunks_exact(4 * n.max(1))
                    .map(|p| p.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect())
                    .collect(),
            ),
            Dtype::F32 => Planes::F32(
                body.chunks_exact(4 * n.max(1))
                    .map(|p| p.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
                    .collect(),
            ),
        };
        let c = StackContainer::new(header, planes)?;
        Ok((c, nl + 1 + expected))
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(serde_json::to_string(&self.header).expect("headers serialize").as_bytes());
        out.push(b'\n');
        match &self.planes {
            Planes::U8(p) => p.iter().for_each(|p| out.extend_from_slice(p)),
            Planes::U32(p) => p.iter().flatten().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Planes::F32(p) => p.iter().flatten().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }

    pub fn role(&self) -> Option<&str> {
        self.header.role.as_deref()
    }

    fn require_channels(&self, want: &[&str]) -> Result<()> {
        if self.header.channels.iter().map(String::as_str).ne(want.iter().copied()) {
            return Err(Error::Format(format!(
                "expected channels {:?}, found {:?}",
                want, self.header.channels
            )));
        }
        Ok(())
    }

    // ---- typed views ----

    pub fn from_rgb(img: &RgbTile) -> Self {
        let planes = (0..3).map(|c| img.as_slice().iter().map(|p| p[c]).collect()).collect();
        let header = Header::new(img.width(), img.height(), Dtype::U8, RGB_CHANNELS.iter().map(|s| s.to_string()).collect());
        StackContainer { header, planes: Planes::U8(planes) }
    }

    pub fn to_rgb(&self) -> Result<RgbTile> {
        let Planes::U8(p) = &self.planes else {
            return Err(Error::Format("an RGB tile must be u8".to_owned()));
        };
        let ch = &self.header.channels;
        let rgb = ch.len() >= 3 && ch[..3].iter().zip(RGB_CHANNELS).all(|(a, b)| a == b);
        if !rgb || !(ch.len() == 3 || (ch.len() == 4 && ch[3] == VALID_CHANNEL)) {
            return Err(Error::Format(format!("expected channels r, g, b, found {ch:?}")));
        }
        let data = (0..self.header.width * self.header.height).map(|i| [p[0][i], p[1][i], p[2][i]]).collect();
        RgbTile::from_vec(self.header.width, self.header.height, data)
    }

    pub fn from_logits(stack: &LogitStack, tax: &Taxonomy) -> Self {
        let names = stack
            .channels()
            .iter()
            .map(|c| tax.name_of(*c).map(str::to_owned).unwrap_or_else(|| c.name()))
            .collect();
        let header = Header::new(stack.width(), stack.height(), Dtype::F32, names);
        StackContainer { header, planes: Planes::F32(stack.planes().to_vec()) }
    }

    pub fn to_logits(&self, tax: &Taxonomy) -> Result<LogitStack> {
        let Planes::F32(p) = &self.planes else {
            return Err(Error::Format("logit stacks must be f32".to_owned()));
        };
        let channels = self.header.channels.iter().map(|n| tax.resolve(n)).collect::<Result<Vec<_>>>()?;
        LogitStack::new(self.header.width, self.header.height, channels, p.clone())
    }

    pub fn from_labels(labels: &LabelRaster) -> Self {
        let header = Header::new(labels.width(), labels.height(), Dtype::U8, vec![LABEL_CHANNEL.to_owned()]);
        StackContainer { header, planes: Planes::U8(vec![labels.as_slice().iter().map(|c| c.0).collect()]) }
    }

    pub fn to_labels(&self, tax: &Taxonomy) -> Result<LabelRaster> {
        self.require_channels(&[LABEL_CHANNEL])?;
        let data: Vec<u32> = match &self.planes {
            Planes::U8(p) => p[0].iter().map(|&v| v as u32).collect(),
            Planes::U32(p) => p[0].clone(),
            Planes::F32(_) => return Err(Error::Format("label rasters must be u8 or u32".to_owned())),
        };
        let data = data
            .into_iter()
            .map(|v| {
                let c = ClassId(u8::try_from(v).map_err(|_| Error::Format(format!("label {v} out of range")))?);
                if tax.contains(c) {
                    Ok(c)
                } else {
                    Err(Error::Format(format!("label {v} is not in the vocabulary")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        LabelRaster::from_vec(self.header.width, self.header.height, data)
    }

    pub fn from_instances(map: &InstanceMap, tax: &Taxonomy) -> Self {
        let (w, h) = map.dims();
        let mut header = Header::new(w, h, Dtype::U32, vec![INSTANCE_CHANNEL.to_owned()]);
        header.instances = Some(
            map.attrs()
                .iter()
                .map(|(&id, a)| InstanceRecord {
                    id,
                    teacher_type: a.teacher_type,
                    class: a.class.map(|c| tax.name_of(c).map(str::to_owned).unwrap_or_else(|| c.name())),
                })
                .collect(),
        );
        StackContainer { header, planes: Planes::U32(vec![map.ids().as_slice().to_vec()]) }
    }

    pub fn to_instances(&self, tax: &Taxonomy) -> Result<InstanceMap> {
        self.require_channels(&[INSTANCE_CHANNEL])?;
        let Planes::U32(p) = &self.planes else {
            return Err(Error::Format("instance rasters must be u32".to_owned()));
        };
        let ids = Grid::from_vec(self.header.width, self.header.height, p[0].clone())?;
        let mut records: BTreeMap<u32, (Option<TeacherType>, Option<ClassId>)> = BTreeMap::new();
        for r in self.header.instances.iter().flatten() {
            let class = r.class.as_deref().map(|n| tax.resolve(n)).transpose()?;
            if records.insert(r.id, (r.teacher_type, class)).is_some() {
                return Err(Error::Format(format!("instance {} listed twice", r.id)));
            }
        }
        let derived = InstanceMap::from_ids(ids, |id| records.get(&id).copied().unwrap_or((None, None)));
        if let Some(id) = records.keys().find(|id| derived.get(**id).is_none()) {
            return Err(Error::Format(format!("instance {id} is listed but has no pixels")));
        }
        Ok(derived)
    }
}

/// Decodes every container in `bytes`.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<StackContainer>> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let (c, used) = StackContainer::decode(&bytes[at..])?;
        out.push(c);
        at += used;
    }
    if out.is_empty() {
        return Err(Error::Format("file holds no container".to_owned()));
    }
    Ok(out)
}

pub fn encode_all(containers: &[StackContainer]) -> Vec<u8> {
    let mut out = Vec::new();
    for c in containers {
        c.encode(&mut out);
    }
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a file holding exactly one container.
pub fn load_stack(path: impl AsRef<Path>) -> Result<StackContainer> {
    let path = path.as_ref();
    let mut all = decode_all(&read(path)?)?;
    if all.len() != 1 {
        return Err(Error::Format(format!("{} holds {} containers, expected 1", path.display(), all.len())));
    }
    Ok(all.remove(0))
}

pub fn save_stack(container: &StackContainer, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_all(std::slice::from_ref(container)))
}

pub fn load_containers(path: impl AsRef<Path>) -> Result<Vec<StackContainer>> {
    decode_all(&read(path.as_ref())?)
}

pub fn save_containers(containers: &[StackContainer], path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_all(containers))
}

fn by_role<'a>(containers: &'a [StackContainer], role: &str) -> Result<Option<&'a StackContainer>> {
    let mut found = containers.iter().filter(|c| c.role() == Some(role));
    let first = found.next();
    if found.next().is_some() {
        return Err(Error::Format(format!("role `{role}` appears more than once")));
    }
    Ok(first)
}

fn require_role<'a>(containers: &'a [StackContainer], role: &str) -> Result<&'a StackContainer> {
    by_role(containers, role)?.ok_or_else(|| Error::Format(format!("bundle has no `{role}` container")))
}

pub fn bundle_to_containers(b: &TeacherBundle, tax: &Taxonomy, mpp: Option<f64>) -> Vec<StackContainer> {
    let mut he = StackContainer::from_rgb(&b.he);
    he.header.role = Some(role::HE.to_owned());
    he.header.mpp = mpp;
    let mut tissue = StackContainer::from_logits(&b.tissue_logits, tax);
    tissue.header.role = Some(role::TISSUE_LOGITS.to_owned());
    let mut cell = StackContainer::from_logits(&b.cell_logits, tax);
    cell.header.role = Some(role::CELL_LOGITS.to_owned());
    let mut nuclei = StackContainer::from_instances(&b.nuclei, tax);
    nuclei.header.role = Some(role::NUCLEI.to_owned());
    nuclei.header.candidates = Some(b.candidates.clone());
    let mut out = vec![he, tissue, cell, nuclei];
    if let Some(h) = &b.halo {
        let mut c = StackContainer::from_rgb(&h.he);
        if let Planes::U8(p) = &mut c.planes {
            p.push(h.valid.as_slice().iter().map(|&v| v as u8).collect());
        }
        c.header.channels.push(VALID_CHANNEL.to_owned());
        c.header.role = Some(role::HE_HALO.to_owned());
        c.header.halo = Some(h.halo);
        out.push(c);
    }
    out
}

/// Assembles a bundle from role-tagged containers; returns it with the
/// `mpp` recorded on the H&E container, if any.
pub fn bundle_from_containers(containers: &[StackContainer], tax: &Taxonomy) -> Result<(TeacherBundle, Option<f64>)> {
    let he_c = require_role(containers, role::HE)?;
    let he = he_c.to_rgb()?;
    let tissue_logits = require_role(containers, role::TISSUE_LOGITS)?.to_logits(tax)?;
    let cell_logits = require_role(containers, role::CELL_LOGITS)?.to_logits(tax)?;
    let nuclei_c = require_role(containers, role::NUCLEI)?;
    let nuclei = nuclei_c.to_instances(tax)?;
    let candidates = nuclei_c.header.candidates.clone().unwrap_or_default();
    let halo = match by_role(containers, role::HE_HALO)? {
        None => None,
        Some(c) => {
            let width = c
                .header
                .halo
                .ok_or_else(|| Error::Format("he_halo container needs a `halo` width".to_owned()))?;
            let img = c.to_rgb()?;
            let valid = match (&c.planes, c.header.channels.len()) {
                (Planes::U8(p), 4) => BitMask::from_vec(img.width(), img.height(), p[3].iter().map(|&v| v != 0).collect())?,
                _ => BitMask::filled(img.width(), img.height(), true)?,
            };
            let mut ctx = HaloContext::new(width, img);
            ctx.valid = valid;
            Some(ctx)
        }
    };
    let bundle = TeacherBundle { he, tissue_logits, cell_logits, nuclei, candidates, halo };
    bundle.validate(tax)?;
    Ok((bundle, he_c.header.mpp))
}

pub fn load_bundle(path: impl AsRef<Path>, tax: &Taxonomy) -> Result<(TeacherBundle, Option<f64>)> {
    bundle_from_containers(&load_containers(path)?, tax)
}

pub fn save_bundle(b: &TeacherBundle, tax: &Taxonomy, mpp: Option<f64>, path: impl AsRef<Path>) -> Result<()> {
    save_containers(&bundle_to_containers(b, tax, mpp), path)
}

/// Semantic labels plus the classified nucleus instances.
pub fn result_to_containers(r: &AggregationResult, tax: &Taxonomy, mpp: Option<f64>) -> Vec<StackContainer> {
    let mut labels = StackContainer::from_labels(&r.semantic);
    labels.header.role = Some(role::LABELS.to_owned());
    labels.header.mpp = mpp;
    let mut nuclei = StackContainer::from_instances(&r.instances, tax);
    nuclei.header.role = Some(role::NUCLEI.to_owned());
    vec![labels, nuclei]
}

/// Reads a label raster from a file: the `labels` container of a multi-
/// container file, or the only container. Returns the raster and its `mpp`.
pub fn load_labels(path: impl AsRef<Path>, tax: &Taxonomy) -> Result<(LabelRaster, Option<f64>)> {
    let all = load_containers(path)?;
    let c = match by_role(&all, role::LABELS)? {
        Some(c) => c,
        None if all.len() == 1 => &all[0],
        None => return Err(Error::Format("no `labels` container".to_owned())),
    };
    Ok((c.to_labels(tax)?, c.header.mpp))
}

/// Reads an instance map: the `nuclei` container, or the only container.
pub fn load_instances(path: impl AsRef<Path>, tax: &Taxonomy) -> Result<InstanceMap> {
    let all = load_containers(path)?;
    let c = match by_role(&all, role::NUCLEI)? {
        Some(c) => c,
        None if all.len() == 1 => &all[0],
        None => return Err(Error::Format("no `nuclei` container".to_owned())),
    };
    c.to_instances(tax)
}
