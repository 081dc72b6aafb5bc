//! Synthetic sprite scenes and a mock slot encoder with controllable fidelity.
//!
//! Scenes are painted back to front over a uniform gray background, so the
//! ground-truth masks are exact visible regions. The mock encoder emits, for
//! every object, a slot holding a fixed linear embedding of the object's
//! target vector plus Gaussian noise, and predicted masks equal to the
//! ground truth (optionally blurred).

use std::f64::consts::PI;

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{presets, Scene, SceneBatch, ShiftMetadata, SlotBatch};
use crate::error::{Error, Result};
use crate::rng::scene_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    /// Class index in the `shape` property.
    pub fn class(self) -> usize {
        match self {
            Shape::Square => 0,
            Shape::Circle => 1,
            Shape::Triangle => 2,
        }
    }
}

pub const SCALES: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Circumradius in pixels of a sprite of the given scale.
pub fn object_extent(scale: f64, height: usize, width: usize) -> f64 {
    scale * 0.25 * height.min(width) as f64
}

/// A filled shape in pixel coordinates (x to the right, y down).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sprite {
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    /// Circumradius.
    pub radius: f64,
    pub angle: f64,
}

impl Sprite {
    /// Whether the point lies inside the shape.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (sin, cos) = self.angle.sin_cos();
        // Rotate into the sprite frame.
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        let r = self.radius;
        match self.shape {
            Shape::Circle => u * u + v * v <= r * r,
            Shape::Square => {
                let h = r / 2f64.sqrt();
                u.abs() <= h && v.abs() <= h
            }
            Shape::Triangle => {
                // Equilateral, vertex at angle -π/2 in the sprite frame:
                // inside iff on the inner side of all three edges, whose
                // outward normals point at the angles π/2, π/2 ± 2π/3 at
                // distance r/2 from the center.
                (0..3).all(|k| {
                    let a = PI / 2.0 + k as f64 * 2.0 * PI / 3.0;
                    u * a.cos() + v * a.sin() <= r / 2.0
                })
            }
        }
    }

    /// Pixels whose centers lie inside the shape.
    pub fn silhouette(&self, height: usize, width: usize) -> Array2<bool> {
        Array2::from_shape_fn((height, width), |(r, c)| self.contains(c as f64 + 0.5, r as f64 + 0.5))
    }
}

/// Converts HSV in [0, 1]³ to RGB in [0, 1]³.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Converts RGB in [0, 1]³ to HSV in [0, 1]³ (hue 0 for grays).
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

/// Sprite properties drawn from the generator's distributions: HSV color,
/// one of the discrete scales, uniform angle, fully contained position.
pub(crate) fn sample_sprite(rng: &mut impl Rng, shape: Shape, height: usize, width: usize) -> (Sprite, [f64; 3], f64) {
    let rgb = hsv_to_rgb(rng.random(), rng.random(), rng.random());
    let scale = SCALES[rng.random_range(0..SCALES.len())];
    let radius = object_extent(scale, height, width);
    let cx = rng.random_range(radius..=width as f64 - radius);
    let cy = rng.random_range(radius..=height as f64 - radius);
    let angle = rng.random_range(0.0..2.0 * PI);
    (
        Sprite {
            shape,
            cx,
            cy,
            radius,
            angle,
        },
        rgb,
        scale,
    )
}

/// Property rows (multi-sprite schema order) for one sprite.
pub(crate) fn sprite_properties(sprite: &Sprite, rgb: [f64; 3], scale: f64, height: usize, width: usize) -> [Vec<f32>; 5] {
    let mut shape = vec![0.0f32; 3];
    shape[sprite.shape.class()] = 1.0;
    [
        rgb.iter().map(|&v| v as f32).collect(),
        vec![scale as f32],
        shape,
        vec![(sprite.cx / width as f64) as f32],
        vec![(sprite.cy / height as f64) as f32],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_scenes: usize,
    pub height: usize,
    pub width: usize,
    /// Foreground objects per scene, inclusive range.
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<Shape>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_scenes: 1000,
            height: 64,
            width: 64,
            min_objects: 2,
            max_objects: 5,
            shapes: vec![Shape::Square, Shape::Circle, Shape::Triangle],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::Config("shape set is empty".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object range [{}, {}] is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("images must be at least 4×4".into()));
        }
        Ok(())
    }
}

/// Renders one scene. Object 0 is the background; objects are painted in
/// index order, later ones on top.
pub(crate) fn render(height: usize, width: usize, gray: f64, sprites: &[(Sprite, [f64; 3])]) -> (Array3<f32>, Array2<usize>) {
    let mut labels = Array2::<usize>::zeros((height, width));
    for (k, (sp, _)) in sprites.iter().enumerate() {
        for ((r, c), v) in sp.silhouette(height, width).indexed_iter() {
            if *v {
                labels[[r, c]] = k + 1;
            }
        }
    }
    let image = Array3::from_shape_fn((height, width, 3), |(r, c, ch)| match labels[[r, c]] {
        0 => gray as f32,
        l => sprites[l - 1].1[ch] as f32,
    });
    (image, labels)
}

fn generate_one(config: &SynthConfig, index: usize) -> Scene {
    let mut rng = scene_rng(config.seed, index);
    let (h, w) = (config.height, config.width);
    let gray: f64 = rng.random();
    let n = rng.random_range(config.min_objects..=config.max_objects);
    let mut sprites = Vec::with_capacity(n);
    let mut props: Vec<[Vec<f32>; 5]> = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = *config.shapes.choose(&mut rng).expect("non-empty shape set");
        let (sp, rgb, scale) = sample_sprite(&mut rng, shape, h, w);
        props.push(sprite_properties(&sp, rgb, scale, h, w));
        sprites.push((sp, rgb));
    }
    let (image, labels) = render(h, w, gray, &sprites);
    let m = n + 1;
    let schema = presets::multi_dsprites();
    let mut properties: Vec<Array2<f32>> = schema
        .entries()
        .iter()
        .map(|e| Array2::zeros((m, e.kind.width())))
        .collect();
    for (o, p) in props.iter().enumerate() {
        for (dst, src) in properties.iter_mut().zip(p) {
            dst.row_mut(o + 1).assign(&ndarray::ArrayView1::from(src.as_slice()));
        }
    }
    let mut scene = Scene {
        image,
        masks: Array3::zeros((m, h, w)),
        properties,
        ood: vec![false; m],
    };
    scene.set_labels(&labels);
    scene
}

/// Generates a batch of sprite scenes with the multi-sprite schema.
pub fn generate_scenes(config: &SynthConfig) -> Result<SceneBatch> {
    config.validate()?;
    let scenes: Vec<Scene> = (0..config.num_scenes)
        .into_par_iter()
        .map(|i| generate_one(config, i))
        .collect();
    Ok(SceneBatch::from_scenes(
        "synthetic",
        presets::multi_dsprites(),
        1,
        (config.height, config.width, 3),
        config.max_objects + 1,
        &scenes,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockEncoderConfig {
    pub num_slots: usize,
    pub latent_dim: usize,
    /// Standard deviation of the Gaussian noise added to object slots.
    pub noise: f64,
    /// Multiplier on the embedded target vector.
    pub gain: f64,
    /// Box-blur radius applied to the predicted masks.
    pub blur_radius: usize,
    pub seed: u64,
    /// Slots replaced by standard normal noise in every scene.
    pub corrupt_slots: Vec<usize>,
    /// Replace the slot of one random visible foreground object per scene.
    pub corrupt_random_object: bool,
    pub with_recon: bool,
}

impl Default for MockEncoderConfig {
    fn default() -> Self {
        Self {
            num_slots: 6,
            latent_dim: 32,
            noise: 0.0,
            gain: 1.0,
            blur_radius: 0,
            seed: 0,
            corrupt_slots: Vec::new(),
            corrupt_random_object: false,
            with_recon: false,
        }
    }
}

/// Which object of each scene had its slot replaced by noise.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorruptionLog {
    pub objects: Vec<Option<usize>>,
}

/// `d×p` matrix with orthonormal columns.
pub fn orthonormal_embedding(d: usize, p: usize, seed: u64) -> Result<Array2<f64>> {
    if p > d {
        return Err(Error::Config(format!("latent width {d} cannot embed {p} target dims losslessly")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    while cols.len() < p {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(Array2::from_shape_fn((d, p), |(i, j)| cols[j][i]))
}

/// Box blur with in-bounds averaging.
fn box_blur(layer: &Array2<f32>, radius: usize) -> Array2<f32> {
    let (h, w) = layer.dim();
    let mut tmp = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (a, b) = (c.saturating_sub(radius), (c + radius).min(w - 1));
            tmp[[r, c]] = layer.slice(s![r, a..=b]).sum() / (b - a + 1) as f32;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        let (a, b) = (r.saturating_sub(radius), (r + radius).min(h - 1));
        for c in 0..w {
            out[[r, c]] = tmp.slice(s![a..=b, c]).sum() / (b - a + 1) as f32;
        }
    }
    out
}

/// Slot representations for `batch` from the mock encoder.
pub fn mock_encode(batch: &SceneBatch, config: &MockEncoderConfig) -> Result<SlotBatch> {
    mock_encode_logged(batch, config).map(|r| r.0)
}

/// Like [`mock_encode`], also reporting which object was corrupted per scene.
pub fn mock_encode_logged(batch: &SceneBatch, config: &MockEncoderConfig) -> Result<(SlotBatch, CorruptionLog)> {
    let k = config.num_slots;
    if let Some(i) = batch.num_objects.iter().position(|&m| m > k) {
        return Err(Error::Config(format!(
            "scene {i} has {} objects but only {k} slots",
            batch.num_objects[i]
        )));
    }
    if let Some(&s) = config.corrupt_slots.iter().find(|&&s| s >= k) {
        return Err(Error::Config(format!("corrupted slot {s} out of range 0..{k}")));
    }
    if !(config.noise >= 0.0) {
        return Err(Error::Config("noise must be non-negative".into()));
    }
    let d = config.latent_dim;
    let embed = orthonormal_embedding(d, batch.schema.width(), config.seed ^ 0x9e37_79b9_7f4a_7c15)? * config.gain;
    let (h, w, _) = batch.image_dims();
    let n = batch.len();
    let mut slots = Array3::<f32>::zeros((n, k, d));
    let mut pred = Array4::<f32>::zeros((n, k, h, w));
    let objects: Vec<Option<usize>> = slots
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(pred.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .map(|(i, (mut slots, mut masks))| {
            let mut rng = scene_rng(config.seed, i);
            let m = batch.num_objects[i];
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            for o in 0..m {
                let slot = perm[o];
                if o >= batch.background_count {
                    let y = ndarray::Array1::from(batch.target_vector(i, o));
                    let z = embed.dot(&y);
                    for (dst, v) in slots.row_mut(slot).iter_mut().zip(z) {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        *dst = (v + config.noise * eps) as f32;
                    }
                }
                masks
                    .index_axis_mut(Axis(0), slot)
                    .assign(&batch.gt_masks.slice(s![i, o, .., ..]).mapv(f32::from));
            }
            let mut corrupted = None;
            let mut noisy: Vec<usize> = config.corrupt_slots.clone();
            if config.corrupt_random_object {
                let targets = batch.target_objects(i);
                if let Some(&o) = targets.choose(&mut rng) {
                    corrupted = Some(o);
                    noisy.push(perm[o]);
                }
            }
            for s in noisy {
                slots
                    .row_mut(s)
                    .iter_mut()
                    .for_each(|v| *v = StandardNormal.sample(&mut rng));
            }
            if config.blur_radius > 0 && m > 0 {
                let mut total = Array2::<f32>::zeros((h, w));
                for s in 0..k {
                    let b = box_blur(&masks.index_axis(Axis(0), s).to_owned(), config.blur_radius);
                    total += &b;
                    masks.index_axis_mut(Axis(0), s).assign(&b);
                }
                for mut layer in masks.outer_iter_mut() {
                    ndarray::Zip::from(&mut layer).and(&total).for_each(|v, &t| {
                        if t > 0.0 {
                            *v /= t;
                        }
                    });
                }
            }
            corrupted
        })
        .collect();
    let log = CorruptionLog { objects };
    Ok((
        SlotBatch {
            slots,
            pred_masks: pred,
            recon: config.with_recon.then(|| batch.images.clone()),
            distributed: false,
        },
        log,
    ))
}

/// Copy of `batch` with each corrupted object flagged OOD.
pub fn flag_corrupted(batch: &SceneBatch, log: &CorruptionLog) -> Result<SceneBatch> {
    if log.objects.len() != batch.len() {
        return Err(Error::Shape(format!(
            "corruption log covers {} scenes, batch has {}",
            log.objects.len(),
            batch.len()
        )));
    }
    let mut out = batch.clone();
    for (i, o) in log.objects.iter().enumerate() {
        if let Some(o) = *o {
            out.ood_flags[[i, o]] = true;
        }
    }
    out.shift = Some(ShiftMetadata {
        name: "slot_corruption".into(),
        ood_objects: log.objects.clone(),
        excluded_properties: Vec::new(),
        skipped_scenes: Vec::new(),
        occlusion: None,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ari_foreground;

    fn small(seed: u64, n: usize) -> SynthConfig {
        SynthConfig {
            num_scenes: n,
            height: 24,
            width: 24,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate_scenes(&small(5, 50)).unwrap();
        let b = generate_scenes(&small(5, 50)).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.gt_masks, b.gt_masks);
        a.validate().unwrap();
        assert!(a.num_objects.iter().all(|&m| (3..=6).contains(&m)));
        assert_ne!(generate_scenes(&small(6, 50)).unwrap().images, a.images);
    }

    #[test]
    fn hsv_roundtrip_and_red_to_cyan() {
        let cyan = rgb_to_hsv([1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(cyan[0] + 0.5, cyan[1], cyan[2]), [0.0, 1.0, 1.0]);
        for rgb in [[0.2, 0.5, 0.9], [0.9, 0.1, 0.4], [0.3, 0.3, 0.3]] {
            let back = {
                let [h, s, v] = rgb_to_hsv(rgb);
                hsv_to_rgb(h, s, v)
            };
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sprite_geometry() {
        let tri = Sprite {
            shape: Shape::Triangle,
            cx: 0.0,
            cy: 0.0,
            radius: 1.0,
            angle: 0.0,
        };
        assert!(tri.contains(0.0, 0.0));
        assert!(tri.contains(0.0, -0.99));
        assert!(!tri.contains(0.0, 0.51));
        assert!(!tri.contains(0.9, 0.0));
        let sq = Sprite { shape: Shape::Square, ..tri };
        assert!(sq.contains(0.7, 0.7));
        assert!(!sq.contains(0.75, 0.0));
    }

    #[test]
    fn identity_encoder_recovers_targets_and_segmentation() {
        let batch = generate_scenes(&small(1, 20)).unwrap();
        let slots = mock_encode(&batch, &MockEncoderConfig::default()).unwrap();
        slots.validate().unwrap();
        let e = orthonormal_embedding(32, 9, MockEncoderConfig::default().seed ^ 0x9e37_79b9_7f4a_7c15).unwrap();
        for i in 0..batch.len() {
            if let Some(ari) = ari_foreground(batch.masks_of(i), batch.num_objects[i], 1, slots.masks_of(i)).unwrap() {
                assert!((ari - 1.0).abs() < 1e-12);
            }
            // Every target is decodable from some slot by the transpose.
            for o in batch.target_objects(i) {
                let y = batch.target_vector(i, o);
                let found = slots.slots_of(i).outer_iter().any(|z| {
                    let dec = e.t().dot(&z.mapv(f64::from));
                    dec.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-5)
                });
                assert!(found);
            }
        }
    }

    #[test]
    fn blur_keeps_partition() {
        let batch = generate_scenes(&small(2, 5)).unwrap();
        let cfg = MockEncoderConfig {
            blur_radius: 3,
            ..MockEncoderConfig::default()
        };
        mock_encode(&batch, &cfg).unwrap().validate().unwrap();
    }

    #[test]
    fn corruption_is_logged_and_flagged() {
        let batch = generate_scenes(&small(3, 10)).unwrap();
        let cfg = MockEncoderConfig {
            corrupt_random_object: true,
            ..MockEncoderConfig::default()
        };
        let (_, log) = mock_encode_logged(&batch, &cfg).unwrap();
        let flagged = flag_corrupted(&batch, &log).unwrap();
        flagged.validate().unwrap();
        for (i, o) in log.objects.iter().enumerate() {
            let o = o.expect("every scene has a visible object");
            assert!(flagged.ood_flags[[i, o]]);
            assert_eq!(flagged.ood_flags.row(i).iter().filter(|&&f| f).count(), 1);
        }
    }

    #[test]
    fn too_few_slots_rejected() {
        let batch = generate_scenes(&small(4, 5)).unwrap();
        let cfg = MockEncoderConfig {
            num_slots: 2,
            ..MockEncoderConfig::default()
        };
        assert!(matches!(mock_encode(&batch, &cfg), Err(Error::Config(_))));
    }
}
