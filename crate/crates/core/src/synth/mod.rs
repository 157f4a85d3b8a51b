//! Seeded synthetic teacher bundles and a brute-force reference pipeline
//! used as a test oracle.

mod reference;

pub use reference::{reference_aggregate, ReferenceResult};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregatorConfig, MitosisCandidate, TeacherBundle, CELL_CHANNELS, TISSUE_CHANNELS};
use crate::error::{Error, Result};
use crate::raster::{Grid, InstanceMap, LogitStack, RgbTile, TeacherType};
use crate::taxonomy::{ClassId, Taxonomy};

pub const GLASS: [u8; 3] = [242, 240, 244];
pub const TISSUE: [u8; 3] = [214, 160, 196];
pub const NUCLEUS: [u8; 3] = [96, 64, 138];
pub const MITOTIC: [u8; 3] = [34, 18, 52];
pub const CARBON: [u8; 3] = [6, 5, 7];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    /// Rotated ellipse; `angle` in radians.
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
        }
    }

    /// Pixel indices covered, in raster order.
    pub fn pixels(&self, width: usize, height: usize) -> Vec<usize> {
        let (cx, cy, reach) = match *self {
            Shape::Disc { cx, cy, r } => (cx, cy, r),
            Shape::Ellipse { cx, cy, rx, ry, .. } => (cx, cy, rx.max(ry)),
        };
        let span = |c: f64, n: usize| ((c - reach).floor().max(0.0) as usize, ((c + reach).ceil() + 1.0).clamp(0.0, n as f64) as usize);
        let ((x0, x1), (y0, y1)) = (span(cx, width), span(cy, height));
        let mut out = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(x as f64, y as f64) {
                    out.push(y * width + x);
                }
            }
        }
        out
    }
}

/// A tissue-teacher region: `logit` is written to `class`'s channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueRegion {
    pub shape: Shape,
    pub class: ClassId,
    pub logit: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NucleusSpec {
    pub shape: Shape,
    /// Cell-teacher logits inside the nucleus; unlisted channels keep the base.
    pub logits: Vec<(ClassId, f32)>,
    #[serde(default)]
    pub teacher_type: Option<TeacherType>,
    /// Probability that a pixel's logits get per-pixel jitter.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpec {
    pub x: f64,
    pub y: f64,
    #[serde(default = "one")]
    pub score: f64,
    /// Dark blob painted on the H&E around the candidate.
    pub blob: Option<Shape>,
    #[serde(default = "mitotic")]
    pub colour: [u8; 3],
}

fn one() -> f64 {
    1.0
}

fn mitotic() -> [u8; 3] {
    MITOTIC
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// Glass (slide background) areas; tissue everywhere else.
    pub glass: Vec<Shape>,
    pub tissue: Vec<TissueRegion>,
    pub nuclei: Vec<NucleusSpec>,
    pub candidates: Vec<CandidateSpec>,
    /// Seeds the per-pixel colour noise and logit jitter.
    pub noise_seed: u64,
    /// Amplitude of uniform colour noise per channel.
    pub colour_noise: u8,
}

/// Bounds for [`Scene::random`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub min_size: usize,
    pub max_size: usize,
    pub max_nuclei: usize,
    pub max_candidates: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams { min_size: 48, max_size: 128, max_nuclei: 20, max_candidates: 5 }
    }
}

/// Logit draw on a half-unit grid so ties and exact zeros occur.
fn quantized(rng: &mut ChaCha8Rng, lo: i32, hi: i32) -> f32 {
    rng.random_range(2 * lo..=2 * hi) as f32 / 2.0
}

fn random_shape(rng: &mut ChaCha8Rng, w: usize, h: usize, r_lo: f64, r_hi: f64) -> Shape {
    let cx = rng.random_range(0.0..w as f64);
    let cy = rng.random_range(0.0..h as f64);
    if rng.random_bool(0.5) {
        Shape::Disc { cx, cy, r: rng.random_range(r_lo..r_hi) }
    } else {
        Shape::Ellipse {
            cx,
            cy,
            rx: rng.random_range(r_lo..r_hi),
            ry: rng.random_range(r_lo..r_hi),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    }
}

impl Scene {
    /// Random scene; identical seeds give identical scenes.
    pub fn random(seed: u64, params: &SceneParams) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = rng.random_range(params.min_size..=params.max_size);
        let height = rng.random_range(params.min_size..=params.max_size);
        let (wf, hf) = (width as f64, height as f64);
        let scale = wf.min(hf);

        let glass = (0..rng.random_range(0..=2)).map(|_| random_shape(&mut rng, width, height, scale * 0.1, scale * 0.35)).collect();
        let tissue = (0..rng.random_range(1..=5))
            .map(|_| {
                let class = TISSUE_CHANNELS[rng.random_range(0..3)];
                // red blood cells are rare and small
                let (lo, hi) = if class == ClassId::RED_BLOOD_CELL { (0.04, 0.12) } else { (0.15, 0.5) };
                TissueRegion {
                    shape: random_shape(&mut rng, width, height, scale * lo, scale * hi),
                    class,
                    logit: quantized(&mut rng, -1, 4),
                }
            })
            .collect();

        let mut occupied = vec![false; width * height];
        let mut nuclei = Vec::new();
        let target = rng.random_range(0..=params.max_nuclei);
        for _ in 0..target * 4 {
            if nuclei.len() == target {
                break;
            }
            let shape = random_shape(&mut rng, width, height, 2.0, 6.0);
            let px = shape.pixels(width, height);
            // nuclei stay one pixel apart so instance ids never touch
            let clash = px.iter().any(|&i| {
                let (x, y) = ((i % width) as i64, (i / width) as i64);
                (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (nx, ny) = (x + dx, y + dy);
                        nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height && occupied[ny as usize * width + nx as usize]
                    })
                })
            });
            if px.is_empty() || clash {
                continue;
            }
            for &i in &px {
                occupied[i] = true;
            }
            let mut logits = Vec::new();
            for &c in &CELL_CHANNELS {
                if rng.random_bool(0.4) {
                    logits.push((c, quantized(&mut rng, -2, 3)));
                }
            }
            let teacher_type = match rng.random_range(0..6) {
                0 => None,
                1 => Some(TeacherType::Neoplastic),
                2 => Some(TeacherType::Inflammatory),
                3 => Some(TeacherType::Dead),
                4 => Some(TeacherType::Epithelial),
                _ => Some(TeacherType::Connective),
            };
            nuclei.push(NucleusSpec { shape, logits, teacher_type, jitter: rng.random_range(0.0..0.4) });
        }

        let candidates = (0..rng.random_range(0..=params.max_candidates))
            .map(|_| {
                // aim at a nucleus half of the time so mitotic reassignment is exercised
                let (x, y) = match nuclei.get(rng.random_range(0..nuclei.len().max(1) * 2)) {
                    Some(n) => match n.shape {
                        Shape::Disc { cx, cy, .. } | Shape::Ellipse { cx, cy, .. } => (cx, cy),
                    },
                    None => (rng.random_range(0.0..wf), rng.random_range(0.0..hf)),
                };
                let carbon = rng.random_bool(0.15);
                let blob = match rng.random_range(0..4) {
                    0 => None,
                    _ if carbon => Some(Shape::Disc { cx: x, cy: y, r: rng.random_range(20.0..34.0) }),
                    _ => Some(Shape::Disc { cx: x + rng.random_range(-2.0..2.0), cy: y + rng.random_range(-2.0..2.0), r: rng.random_range(0.6..4.0) }),
                };
                CandidateSpec { x, y, score: 1.0, blob, colour: if carbon { CARBON } else { MITOTIC } }
            })
            .collect();

        Scene {
            width,
            height,
            glass,
            tissue,
            nuclei,
            candidates,
            noise_seed: rng.random(),
            colour_noise: rng.random_range(0..=12),
        }
    }

    /// Renders the teacher outputs. Nuclei must not overlap.
    pub fn render(&self) -> Result<TeacherBundle> {
        let (w, h) = (self.width, self.height);
        if w == 0 || h == 0 {
            return Err(Error::InvalidScene("scene extent must be positive".to_owned()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let n = w * h;

        let mut he = vec![TISSUE; n];
        for g in &self.glass {
            for i in g.pixels(w, h) {
                he[i] = GLASS;
            }
        }

        let mut tissue_planes = vec![vec![0f32; n]; TISSUE_CHANNELS.len()];
        for plane in tissue_planes.iter_mut() {
            for v in plane.iter_mut() {
                *v = quantized(&mut rng, -3, 0);
            }
        }
        for region in &self.tissue {
            let k = TISSUE_CHANNELS
                .iter()
                .position(|&c| c == region.class)
                .ok_or_else(|| Error::InvalidScene(format!("class {} is not a tissue-teacher channel", region.class.0)))?;
            for i in region.shape.pixels(w, h) {
                tissue_planes[k][i] = region.logit;
            }
        }

        let mut cell_planes = vec![vec![0f32; n]; CELL_CHANNELS.len()];
        for plane in cell_planes.iter_mut() {
            for v in plane.iter_mut() {
                *v = quantized(&mut rng, -3, 1);
            }
        }
        let mut ids = vec![0u32; n];
        let mut types = Vec::with_capacity(self.nuclei.len());
        for (k, nucleus) in self.nuclei.iter().enumerate() {
            let id = k as u32 + 1;
            let px = nucleus.shape.pixels(w, h);
            if px.is_empty() {
                return Err(Error::InvalidScene(format!("nucleus {id} covers no pixel")));
            }
            for &i in &px {
                if ids[i] != 0 {
                    return Err(Error::InvalidScene(format!("nuclei {} and {id} overlap", ids[i])));
                }
                ids[i] = id;
                he[i] = NUCLEUS;
                for (c, plane) in CELL_CHANNELS.iter().zip(cell_planes.iter_mut()) {
                    plane[i] = -2.0;
                    if let Some(&(_, v)) = nucleus.logits.iter().find(|(lc, _)| lc == c) {
                        plane[i] = v;
                    }
                }
                if rng.random_bool(nucleus.jitter.clamp(0.0, 1.0)) {
                    let c = rng.random_range(0..CELL_CHANNELS.len());
                    cell_planes[c][i] = quantized(&mut rng, -2, 3);
                }
            }
            types.push(nucleus.teacher_type);
        }

        for cand in &self.candidates {
            if let Some(blob) = &cand.blob {
                for i in blob.pixels(w, h) {
                    he[i] = cand.colour;
                }
            }
        }
        if self.colour_noise > 0 {
            let a = self.colour_noise as i32;
            for p in he.iter_mut() {
                for c in p.iter_mut() {
                    *c = (*c as i32 + rng.random_range(-a..=a)).clamp(0, 255) as u8;
                }
            }
        }

        let nuclei = InstanceMap::from_ids(Grid::from_vec(w, h, ids)?, |id| (types[id as usize - 1], None));
        Ok(TeacherBundle {
            he: RgbTile::from_vec(w, h, he)?,
            tissue_logits: LogitStack::new(w, h, TISSUE_CHANNELS.to_vec(), tissue_planes)?,
            cell_logits: LogitStack::new(w, h, CELL_CHANNELS.to_vec(), cell_planes)?,
            nuclei,
            candidates: self
                .candidates
                .iter()
                .map(|c| MitosisCandidate { x: c.x, y: c.y, score: c.score })
                .collect(),
            halo: None,
        })
    }
}

/// A rendered scene with the reference pipeline's answer.
pub struct Fixture {
    pub scene: Scene,
    pub bundle: TeacherBundle,
    pub expected: ReferenceResult,
}

pub fn synth_fixture(scene: Scene, tax: &Taxonomy, cfg: &AggregatorConfig) -> Result<Fixture> {
    let bundle = scene.render()?;
    let expected = reference_aggregate(&bundle, tax, cfg)?;
    Ok(Fixture { scene, bundle, expected })
}
