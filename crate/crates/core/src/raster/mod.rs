//! Raster containers and the image-processing kernels built on them.

mod blur;
pub(crate) mod components;
mod contours;
mod edt;
pub(crate) mod hull;
mod otsu;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::ClassId;

pub use blur::{gaussian_kernel_q16, gaussian_smooth, reflect_index};
pub use components::{connected_components, Connectivity};
pub use contours::{contours, fill_holes, Contour};
pub use edt::{distance_band, squared_distance_transform};
pub use hull::{convex_hull, rasterize_hull, Point};
pub use otsu::{otsu_threshold, otsu_threshold_from_histogram, Histogram};

/// Row-major 2-D grid. Dimensions are always at least 1×1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Three-channel 8-bit H&E tile.
pub type RgbTile = Grid<[u8; 3]>;
/// Single-channel 8-bit raster.
pub type GrayRaster = Grid<u8>;
pub type BitMask = Grid<bool>;
pub type LabelRaster = Grid<ClassId>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Grid { width, height, data: vec![value; width * height] })
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "{}x{} raster needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Grid { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Ok(Grid { width, height, data })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.width)
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }

    pub fn ensure_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::dims(dims, self.dims()));
        }
        Ok(())
    }
}

impl<T: Clone> Grid<T> {
    /// Copies the window `[x0, x0+w) × [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidParameter(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Grid::from_vec(w, h, data)
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for x in 0..self.width {
            for y in 0..self.height {
                data.push(self.get(x, y).clone());
            }
        }
        Grid { width: self.height, height: self.width, data }
    }

    /// Rotates 90° clockwise.
    pub fn rotate90(&self) -> Self {
        let (w, h) = self.dims();
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..w {
            for x in 0..h {
                data.push(self.get(y, h - 1 - x).clone());
            }
        }
        Grid { width: h, height: w, data }
    }
}

impl BitMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn from_labels(labels: &LabelRaster, class: ClassId) -> BitMask {
        labels.map(|&c| c == class)
    }
}

impl RgbTile {
    /// Per-pixel grayscale as the rounded mean of R, G and B.
    pub fn grayscale(&self) -> GrayRaster {
        self.map(|&p| gray_of(p))
    }
}

#[inline]
pub fn gray_of(p: [u8; 3]) -> u8 {
    let s = p[0] as u32 + p[1] as u32 + p[2] as u32;
    ((s + 1) / 3) as u8
}

#[inline]
pub fn rgb_sum(p: [u8; 3]) -> u32 {
    p[0] as u32 + p[1] as u32 + p[2] as u32
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidRaster(format!("raster dimensions must be positive, got {width}x{height}")));
    }
    Ok(())
}

/// Named stack of 32-bit logit planes, one per class channel.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitStack {
    width: usize,
    height: usize,
    channels: Vec<ClassId>,
    planes: Vec<Vec<f32>>,
}

impl LogitStack {
    pub fn new(width: usize, height: usize, channels: Vec<ClassId>, planes: Vec<Vec<f32>>) -> Result<Self> {
        check_dims(width, height)?;
        if channels.len() != planes.len() {
            return Err(Error::InvalidRaster(format!(
                "{} channel names for {} planes",
                channels.len(),
                planes.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &channels {
            if !seen.insert(*c) {
                return Err(Error::InvalidRaster(format!("duplicate logit channel `{c}`")));
            }
        }
        for (c, p) in channels.iter().zip(&planes) {
            if p.len() != width * height {
                return Err(Error::InvalidRaster(format!(
                    "plane `{c}` has {} values, expected {}",
                    p.len(),
                    width * height
                )));
            }
            if let Some(index) = p.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { channel: c.name(), index });
            }
        }
        Ok(LogitStack { width, height, channels, planes })
    }

    pub fn zeros(width: usize, height: usize, channels: Vec<ClassId>) -> Result<Self> {
        let planes = channels.iter().map(|_| vec![0.0; width * height]).collect();
        Self::new(width, height, channels, planes)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn channels(&self) -> &[ClassId] {
        &self.channels
    }

    pub fn planes(&self) -> &[Vec<f32>] {
        &self.planes
    }

    pub fn plane(&self, c: ClassId) -> Option<&[f32]> {
        self.channels.iter().position(|&k| k == c).map(|i| self.planes[i].as_slice())
    }

    pub fn plane_mut(&mut self, c: ClassId) -> Option<&mut [f32]> {
        self.channels.iter().position(|&k| k == c).map(|i| self.planes[i].as_mut_slice())
    }

    pub fn require(&self, c: ClassId) -> Result<&[f32]> {
        self.plane(c).ok_or_else(|| Error::MissingChannel(c.name()))
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        let planes = self
            .planes
            .iter()
            .map(|p| {
                Grid::from_vec(self.width, self.height, p.clone())
                    .and_then(|g| g.crop(x0, y0, w, h))
                    .map(Grid::into_vec)
            })
            .collect::<Result<Vec<_>>>()?;
        LogitStack::new(w, h, self.channels.clone(), planes)
    }

    /// Multiplies every plane by `k` (used by invariance checks).
    pub fn scaled(&self, k: f32) -> Self {
        let planes = self.planes.iter().map(|p| p.iter().map(|v| v * k).collect()).collect();
        LogitStack { width: self.width, height: self.height, channels: self.channels.clone(), planes }
    }
}

/// Nucleus-instance teacher categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherType {
    Neoplastic,
    Inflammatory,
    Connective,
    Dead,
    Epithelial,
}

/// Per-instance record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAttrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_type: Option<TeacherType>,
    /// Assigned class; `None` when undefined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<ClassId>,
    pub pixel_count: u32,
    pub centroid: (f64, f64),
}

/// Instance-id raster (0 = no instance) plus per-instance attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMap {
    ids: Grid<u32>,
    attrs: BTreeMap<u32, InstanceAttrs>,
}

impl InstanceMap {
    /// Builds a map from an id raster, deriving pixel counts and centroids.
    /// `labels` supplies teacher types / classes for ids present on the raster.
    pub fn from_ids(ids: Grid<u32>, mut labels: impl FnMut(u32) -> (Option<TeacherType>, Option<ClassId>)) -> Self {
        let mut acc: BTreeMap<u32, (u64, f64, f64)> = BTreeMap::new();
        for (y, row) in ids.rows().enumerate() {
            for (x, &id) in row.iter().enumerate() {
                if id != 0 {
                    let e = acc.entry(id).or_insert((0, 0.0, 0.0));
                    e.0 += 1;
                    e.1 += x as f64;
                    e.2 += y as f64;
                }
            }
        }
        let attrs = acc
            .into_iter()
            .map(|(id, (n, sx, sy))| {
                let (teacher_type, class) = labels(id);
                let attrs = InstanceAttrs {
                    teacher_type,
                    class,
                    pixel_count: n as u32,
                    centroid: (sx / n as f64, sy / n as f64),
                };
                (id, attrs)
            })
            .collect();
        InstanceMap { ids, attrs }
    }

    /// Builds a map from explicit parts, validating the attribute invariants.
    pub fn from_parts(ids: Grid<u32>, attrs: BTreeMap<u32, InstanceAttrs>) -> Result<Self> {
        let derived = InstanceMap::from_ids(ids, |_| (None, None));
        if attrs.contains_key(&0) {
            return Err(Error::InvalidRaster("instance id 0 is reserved".into()));
        }
        for (id, d) in &derived.attrs {
            match attrs.get(id) {
                None => return Err(Error::InvalidRaster(format!("instance {id} has no attributes"))),
                Some(a) if a.pixel_count != d.pixel_count => {
                    return Err(Error::InvalidRaster(format!(
                        "instance {id}: pixel_count {} but raster has {}",
                        a.pixel_count, d.pixel_count
                    )))
                }
                _ => {}
            }
        }
        if let Some(id) = attrs.keys().find(|id| !derived.attrs.contains_key(id)) {
            return Err(Error::InvalidRaster(format!("instance {id} has attributes but no pixels")));
        }
        Ok(InstanceMap { ids: derived.ids, attrs })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Ok(InstanceMap { ids: Grid::filled(width, height, 0)?, attrs: BTreeMap::new() })
    }

    pub fn ids(&self) -> &Grid<u32> {
        &self.ids
    }

    pub fn attrs(&self) -> &BTreeMap<u32, InstanceAttrs> {
        &self.attrs
    }

    pub fn attrs_mut(&mut self) -> &mut BTreeMap<u32, InstanceAttrs> {
        &mut self.attrs
    }

    pub fn get(&self, id: u32) -> Option<&InstanceAttrs> {
        self.attrs.get(&id)
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ids.dims()
    }

    /// Pixel indices of every instance, grouped by id in ascending id order.
    pub fn pixel_lists(&self) -> Vec<(u32, Vec<usize>)> {
        let mut slot: BTreeMap<u32, usize> = BTreeMap::new();
        let mut lists: Vec<(u32, Vec<usize>)> = Vec::with_capacity(self.attrs.len());
        for (id, a) in &self.attrs {
            slot.insert(*id, lists.len());
            lists.push((*id, Vec::with_capacity(a.pixel_count as usize)));
        }
        // ids are usually dense, so a direct lookup table beats the map
        let max_id = self.attrs.keys().next_back().copied().unwrap_or(0) as usize;
        if max_id <= 4 * self.attrs.len() + 1024 {
            let mut table = vec![usize::MAX; max_id + 1];
            for (id, s) in &slot {
                table[*id as usize] = *s;
            }
            for (i, &id) in self.ids.as_slice().iter().enumerate() {
                if id != 0 {
                    lists[table[id as usize]].1.push(i);
                }
            }
        } else {
            for (i, &id) in self.ids.as_slice().iter().enumerate() {
                if id != 0 {
                    lists[slot[&id]].1.push(i);
                }
            }
        }
        lists
    }

    /// Crops to a window; instances are clipped and their attributes recomputed.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        let ids = self.ids.crop(x0, y0, w, h)?;
        Ok(InstanceMap::from_ids(ids, |id| {
            let a = &self.attrs[&id];
            (a.teacher_type, a.class)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(Grid::<u8>::filled(0, 3, 0).is_err());
        assert!(Grid::from_vec(2, 2, vec![0u8; 3]).is_err());
    }

    #[test]
    fn rotate_and_transpose() {
        let g = Grid::from_vec(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let t = g.transpose();
        assert_eq!(t.dims(), (2, 3));
        assert_eq!(t.as_slice(), &[1, 4, 2, 5, 3, 6]);
        let r = g.rotate90();
        assert_eq!(r.as_slice(), &[4, 1, 5, 2, 6, 3]);
        assert_eq!(r.rotate90().rotate90().rotate90(), g);
    }

    #[test]
    fn logit_stack_rejects_nan_and_duplicates() {
        let c = vec![ClassId::LYMPHOCYTE];
        assert!(matches!(
            LogitStack::new(1, 2, c.clone(), vec![vec![0.0, f32::NAN]]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(LogitStack::new(1, 1, vec![ClassId::LYMPHOCYTE; 2], vec![vec![0.0], vec![0.0]]).is_err());
        assert!(LogitStack::new(1, 1, c, vec![vec![f32::INFINITY]]).is_err());
    }

    #[test]
    fn instance_attrs_match_raster() {
        let ids = Grid::from_vec(3, 2, vec![0, 1, 1, 2, 0, 1]).unwrap();
        let m = InstanceMap::from_ids(ids.clone(), |_| (None, None));
        assert_eq!(m.len(), 2);
        assert_eq!(m.get(1).unwrap().pixel_count, 3);
        let c = m.get(1).unwrap().centroid;
        assert!((c.0 - 5.0 / 3.0).abs() < 1e-12 && (c.1 - 1.0 / 3.0).abs() < 1e-12);
        let lists = m.pixel_lists();
        assert_eq!(lists, vec![(1, vec![1, 2, 5]), (2, vec![3])]);

        let mut attrs = m.attrs().clone();
        attrs.get_mut(&2).unwrap().pixel_count = 5;
        assert!(InstanceMap::from_parts(ids.clone(), attrs).is_err());
        let mut attrs = m.attrs().clone();
        attrs.remove(&2);
        assert!(InstanceMap::from_parts(ids, attrs).is_err());
    }

    #[test]
    fn gray_is_rounded_mean() {
        assert_eq!(gray_of([0, 0, 1]), 0);
        assert_eq!(gray_of([0, 1, 1]), 1);
        assert_eq!(gray_of([255, 255, 255]), 255);
        assert_eq!(gray_of([10, 20, 31]), 20);
    }
}
