//! Test-time distribution shifts: occlusion, center crop, object color
//! jitter and insertion of an unseen shape.

use ndarray::{Array2, Array3, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PropertyKind, Scene, SceneBatch, ShiftMetadata};
use crate::error::{Error, Result};
use crate::rng::scene_rng;
use crate::synth::{hsv_to_rgb, rgb_to_hsv, sample_sprite, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Occlusion,
    Crop,
    ObjectColor,
    ObjectShape,
}

impl ShiftKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShiftKind::Occlusion => "occlusion",
            ShiftKind::Crop => "crop",
            ShiftKind::ObjectColor => "object_color",
            ShiftKind::ObjectShape => "object_shape",
        }
    }

    /// Properties that stop being predictable under this shift.
    pub fn excluded_properties(self) -> &'static [&'static str] {
        match self {
            ShiftKind::ObjectColor => &["color", "material"],
            ShiftKind::ObjectShape => &["shape"],
            ShiftKind::Occlusion | ShiftKind::Crop => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    #[serde(default)]
    pub seed: u64,
    /// Gray level of the occluder; defaults by dataset.
    #[serde(default)]
    pub occluder_color: Option<f32>,
    /// Dataset preset name, falling back to the batch name.
    #[serde(default)]
    pub dataset: Option<String>,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            occluder_color: None,
            dataset: None,
        }
    }

    pub fn occluder_gray(&self, batch_name: &str) -> f32 {
        self.occluder_color.unwrap_or_else(|| {
            let name = self.dataset.as_deref().unwrap_or(batch_name).to_ascii_lowercase();
            if name.starts_with("clevr") {
                0.2
            } else {
                0.5
            }
        })
    }
}

/// Candidate corners considered by one occlusion and the one chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionLog {
    /// Top-left `[row, col]` of each candidate square, in sampling order.
    pub candidates: Vec<[usize; 2]>,
    /// Foreground pixels each candidate would cover.
    pub overlaps: Vec<usize>,
    pub chosen: usize,
}

pub const OCCLUSION_CANDIDATES: usize = 5;

/// Pastes a gray square of size ⌊0.4H⌋×⌊0.4W⌋ at the candidate position
/// that covers the fewest foreground pixels; covered pixels go to mask 0.
pub fn occlude(
    scene: &Scene,
    background_count: usize,
    gray: f32,
    rng: &mut impl Rng,
) -> Result<(Scene, OcclusionLog)> {
    let (h, w) = (scene.height(), scene.width());
    let (sh, sw) = (h * 2 / 5, w * 2 / 5);
    if sh == 0 || sw == 0 || sh > h || sw > w {
        return Err(Error::Config(format!("occluder {sh}×{sw} does not fit a {h}×{w} image")));
    }
    let labels = scene.labels();
    let mut log = OcclusionLog {
        candidates: Vec::with_capacity(OCCLUSION_CANDIDATES),
        overlaps: Vec::with_capacity(OCCLUSION_CANDIDATES),
        chosen: 0,
    };
    for _ in 0..OCCLUSION_CANDIDATES {
        let r = rng.random_range(0..=h - sh);
        let c = rng.random_range(0..=w - sw);
        let overlap = labels
            .slice(ndarray::s![r..r + sh, c..c + sw])
            .iter()
            .filter(|&&l| l >= background_count)
            .count();
        log.candidates.push([r, c]);
        log.overlaps.push(overlap);
    }
    log.chosen = (0..OCCLUSION_CANDIDATES)
        .min_by_key(|&i| (log.overlaps[i], i))
        .expect("candidates");
    let [r0, c0] = log.candidates[log.chosen];
    let mut out = scene.clone();
    let mut labels = labels;
    for r in r0..r0 + sh {
        for c in c0..c0 + sw {
            labels[[r, c]] = 0;
            for ch in 0..out.image.len_of(Axis(2)) {
                out.image[[r, c, ch]] = gray;
            }
        }
    }
    out.set_labels(&labels);
    Ok((out, log))
}

/// Source coordinate of destination index `dst` under half-pixel alignment.
fn half_pixel(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0)
}

/// Bilinear resize of an H×W×C image (half-pixel centers, edge clamped).
pub fn resize_bilinear(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let mut out = Array3::zeros((out_h, out_w, c));
    for y in 0..out_h {
        let sy = half_pixel(y, h, out_h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let wy = sy - y0 as f64;
        for x in 0..out_w {
            let sx = half_pixel(x, w, out_w);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wx = sx - x0 as f64;
            for ch in 0..c {
                let v = (1.0 - wy) * ((1.0 - wx) * img[[y0, x0, ch]] as f64 + wx * img[[y0, x1, ch]] as f64)
                    + wy * ((1.0 - wx) * img[[y1, x0, ch]] as f64 + wx * img[[y1, x1, ch]] as f64);
                out[[y, x, ch]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Nearest-neighbor resize of a label map, sampling at pixel centers.
pub fn resize_nearest(labels: &Array2<usize>, out_h: usize, out_w: usize) -> Array2<usize> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize).min(w - 1);
        labels[[sy, sx]]
    })
}

/// Center crop to ⌊2H/3⌋×⌊2W/3⌋, resized back to H×W.
pub fn crop_zoom(scene: &Scene) -> Result<Scene> {
    let (h, w) = (scene.height(), scene.width());
    if h < 3 || w < 3 {
        return Err(Error::Config(format!("crop needs at least 3×3 pixels, got {h}×{w}")));
    }
    let (ch, cw) = (2 * h / 3, 2 * w / 3);
    let (top, left) = ((h - ch) / 2, (w - cw) / 2);
    let crop = scene.image.slice(ndarray::s![top..top + ch, left..left + cw, ..]).to_owned();
    let labels = scene.labels().slice(ndarray::s![top..top + ch, left..left + cw]).to_owned();
    let mut out = scene.clone();
    out.image = resize_bilinear(&crop, h, w);
    out.set_labels(&resize_nearest(&labels, h, w));
    Ok(out)
}

/// Jitter factors, applied in the order brightness, contrast, saturation, hue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterFactors {
    pub const IDENTITY: JitterFactors = JitterFactors {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            brightness: rng.random_range(0.5..=1.5),
            contrast: rng.random_range(0.5..=1.5),
            saturation: rng.random_range(0.5..=1.5),
            hue: rng.random_range(-0.5..=0.5),
        }
    }
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn clamp3(p: [f64; 3]) -> [f64; 3] {
    p.map(|v| v.clamp(0.0, 1.0))
}

/// Color-jitters the pixels of `object` in place.
pub fn jitter_pixels(image: &mut Array3<f32>, mask: &Array2<bool>, f: JitterFactors) {
    if image.len_of(Axis(2)) != 3 {
        return;
    }
    let coords: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    if coords.is_empty() {
        return;
    }
    let read = |img: &Array3<f32>, (r, c): (usize, usize)| [0, 1, 2].map(|ch| img[[r, c, ch]] as f64);
    let mut px: Vec<[f64; 3]> = coords.iter().map(|&rc| read(image, rc)).collect();
    if f.brightness != 1.0 {
        px.iter_mut().for_each(|p| *p = clamp3(p.map(|v| v * f.brightness)));
    }
    if f.contrast != 1.0 {
        let mean = px.iter().map(|&p| luma(p)).sum::<f64>() / px.len() as f64;
        px.iter_mut()
            .for_each(|p| *p = clamp3(p.map(|v| f.contrast * v + (1.0 - f.contrast) * mean)));
    }
    if f.saturation != 1.0 {
        px.iter_mut().for_each(|p| {
            let l = luma(*p);
            *p = clamp3(p.map(|v| f.saturation * v + (1.0 - f.saturation) * l));
        });
    }
    if f.hue != 0.0 {
        px.iter_mut().for_each(|p| {
            let [h, s, v] = rgb_to_hsv(*p);
            *p = clamp3(hsv_to_rgb((h + f.hue).rem_euclid(1.0), s, v));
        });
    }
    for (&(r, c), p) in coords.iter().zip(px) {
        for ch in 0..3 {
            image[[r, c, ch]] = p[ch] as f32;
        }
    }
}

fn visible_foreground(scene: &Scene, background_count: usize) -> Vec<usize> {
    (background_count..scene.num_objects())
        .filter(|&o| scene.mask_area(o) > 0)
        .collect()
}

/// Jitters the color of one uniformly chosen visible foreground object and
/// flags it OOD. Returns the chosen object.
pub fn jitter_object_color(scene: &Scene, background_count: usize, rng: &mut impl Rng) -> Result<(Scene, usize)> {
    let fg = visible_foreground(scene, background_count);
    let &object = fg
        .choose(rng)
        .ok_or_else(|| Error::Shift("object color shift needs a visible foreground object".into()))?;
    let factors = JitterFactors::sample(rng);
    let mut out = scene.clone();
    let mask = scene.masks.index_axis(Axis(0), object).mapv(|v| v != 0);
    jitter_pixels(&mut out.image, &mask, factors);
    out.ood[object] = true;
    Ok((out, object))
}

/// Maximum foreground objects for triangle insertion.
pub const SHAPE_GATE: usize = 4;

/// Inserts a triangle at a random depth of the object stack and flags it
/// OOD. Returns `None` when the scene has too many foreground objects.
///
/// Depth `d` in 1..=5 (clamped to the top of the stack) puts the triangle
/// at object index `background_count + d - 1`; it covers every pixel of its
/// silhouette owned by the background or by an object beneath it.
pub fn insert_triangle(
    scene: &Scene,
    background_count: usize,
    schema: &crate::data::PropertySchema,
    rng: &mut impl Rng,
) -> Option<(Scene, usize)> {
    let fg = scene.num_objects().saturating_sub(background_count);
    if fg > SHAPE_GATE {
        return None;
    }
    let (h, w) = (scene.height(), scene.width());
    let (sprite, rgb, scale) = sample_sprite(rng, Shape::Triangle, h, w);
    let depth = rng.random_range(1..=5usize).min(fg + 1);
    let at = background_count + depth - 1;
    Some((insert_sprite_at(scene, at, &sprite, rgb, scale, schema), at))
}

/// Inserts `sprite` as object `at`, shifting objects at and above `at` up.
pub fn insert_sprite_at(
    scene: &Scene,
    at: usize,
    sprite: &crate::synth::Sprite,
    rgb: [f64; 3],
    scale: f64,
    schema: &crate::data::PropertySchema,
) -> Scene {
    let (h, w) = (scene.height(), scene.width());
    let old = scene.labels();
    let sil = sprite.silhouette(h, w);
    let mut labels = old.mapv(|l| if l >= at { l + 1 } else { l });
    let mut image = scene.image.clone();
    for ((r, c), &inside) in sil.indexed_iter() {
        if inside && old[[r, c]] < at {
            labels[[r, c]] = at;
            for ch in 0..image.len_of(Axis(2)).min(3) {
                image[[r, c, ch]] = rgb[ch] as f32;
            }
        }
    }
    let m = scene.num_objects() + 1;
    let properties = scene
        .properties
        .iter()
        .zip(schema.entries())
        .map(|(p, e)| {
            let width = p.ncols();
            let mut row = vec![0.0f32; width];
            match (e.name.as_str(), e.kind) {
                ("color", PropertyKind::Numeric { dims: 3 }) => row.copy_from_slice(&rgb.map(|v| v as f32)),
                ("scale", PropertyKind::Numeric { dims: 1 }) => row[0] = scale as f32,
                ("x", PropertyKind::Numeric { dims: 1 }) => row[0] = (sprite.cx / w as f64) as f32,
                ("y", PropertyKind::Numeric { dims: 1 }) => row[0] = (sprite.cy / h as f64) as f32,
                _ => {}
            }
            let mut out = Array2::zeros((m, width));
            for o in 0..m {
                let src = match o.cmp(&at) {
                    std::cmp::Ordering::Less => Some(o),
                    std::cmp::Ordering::Equal => None,
                    std::cmp::Ordering::Greater => Some(o - 1),
                };
                match src {
                    Some(s) => out.row_mut(o).assign(&p.row(s)),
                    None => out.row_mut(o).assign(&ndarray::ArrayView1::from(row.as_slice())),
                }
            }
            out
        })
        .collect();
    let mut ood: Vec<bool> = scene.ood.clone();
    ood.insert(at, true);
    let mut out = Scene {
        image,
        masks: Array3::zeros((m, h, w)),
        properties,
        ood,
    };
    out.set_labels(&labels);
    out
}

struct SceneShift {
    scene: Scene,
    ood_object: Option<usize>,
    skipped: bool,
    occlusion: Option<OcclusionLog>,
}

fn shift_scene(batch: &SceneBatch, i: usize, spec: &ShiftSpec, gray: f32) -> Result<SceneShift> {
    let mut rng = scene_rng(spec.seed, i);
    let scene = batch.scene(i);
    let bg = batch.background_count;
    let wrap = |scene, ood_object, skipped, occlusion| SceneShift {
        scene,
        ood_object,
        skipped,
        occlusion,
    };
    Ok(match spec.kind {
        ShiftKind::Occlusion => {
            let (s, log) = occlude(&scene, bg, gray, &mut rng)?;
            wrap(s, None, false, Some(log))
        }
        ShiftKind::Crop => wrap(crop_zoom(&scene)?, None, false, None),
        ShiftKind::ObjectColor => {
            let (s, o) = jitter_object_color(&scene, bg, &mut rng).map_err(|e| match e {
                Error::Shift(msg) => Error::Shift(format!("scene {i}: {msg}")),
                other => other,
            })?;
            wrap(s, Some(o), false, None)
        }
        ShiftKind::ObjectShape => match insert_triangle(&scene, bg, &batch.schema, &mut rng) {
            Some((s, o)) => wrap(s, Some(o), false, None),
            None => wrap(scene, None, true, None),
        },
    })
}

/// Applies `spec` to every scene. Scenes use independent generators, so
/// the result does not depend on the thread count.
pub fn apply_shift(batch: &SceneBatch, spec: &ShiftSpec) -> Result<SceneBatch> {
    let gray = spec.occluder_gray(&batch.name);
    let shifted: Vec<SceneShift> = (0..batch.len())
        .into_par_iter()
        .map(|i| shift_scene(batch, i, spec, gray))
        .collect::<Result<_>>()?;
    let scenes: Vec<Scene> = shifted.iter().map(|s| s.scene.clone()).collect();
    let mut out = SceneBatch::from_scenes(
        batch.name.clone(),
        batch.schema.clone(),
        batch.background_count,
        batch.image_dims(),
        batch.max_objects(),
        &scenes,
    );
    let excluded: Vec<String> = spec
        .kind
        .excluded_properties()
        .iter()
        .filter(|n| batch.schema.index_of(n).is_some())
        .map(|s| s.to_string())
        .collect();
    out.excluded_properties = batch.excluded_properties.clone();
    out.excluded_properties.extend(excluded.iter().cloned());
    out.splits = batch.splits.clone();
    out.shift = Some(ShiftMetadata {
        name: spec.kind.as_str().into(),
        ood_objects: shifted.iter().map(|s| s.ood_object).collect(),
        excluded_properties: excluded,
        skipped_scenes: shifted.iter().enumerate().filter(|(_, s)| s.skipped).map(|(i, _)| i).collect(),
        occlusion: (spec.kind == ShiftKind::Occlusion).then(|| shifted.iter().filter_map(|s| s.occlusion.clone()).collect()),
    });
    Ok(out)
}
