//! Dataset directories: a `manifest.json` plus one OCBT file per tensor.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayD, Ix2, Ix3, Ix4};
use serde::{Deserialize, Serialize};

use super::batch::{SceneBatch, ShiftMetadata, SlotBatch};
use super::container::{read_tensor, write_tensor, Tensor};
use super::schema::PropertySchema;
use super::splits::Splits;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SLOTS_MANIFEST_FILE: &str = "slots.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub images: String,
    pub gt_masks: String,
    pub num_objects: String,
    pub ood_flags: String,
    /// Property name to tensor file.
    pub properties: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub num_scenes: usize,
    /// `[H, W, C]`.
    pub image_size: [usize; 3],
    pub max_objects: usize,
    pub background_count: usize,
    pub schema: PropertySchema,
    pub files: ManifestFiles,
    #[serde(default)]
    pub excluded_properties: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<Splits>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftMetadata>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::format(path, "manifest not found")
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn expect_shape(path: &Path, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::InvalidData(format!(
            "{} has shape {:?}, manifest implies {:?}",
            path.display(),
            got,
            want
        )));
    }
    Ok(())
}

fn dyn_to<D: ndarray::Dimension, T>(a: ArrayD<T>) -> ndarray::Array<T, D> {
    a.into_dimensionality::<D>().expect("shape checked")
}

/// Writes `batch` to `dir`, creating it if necessary.
pub fn save_dataset(batch: &SceneBatch, dir: &Path) -> Result<DatasetManifest> {
    ensure_dir(dir)?;
    let (h, w, c) = batch.image_dims();
    let mut properties = BTreeMap::new();
    for (i, (p, e)) in batch.properties.iter().zip(batch.schema.entries()).enumerate() {
        let file = format!("property_{i}.ocbt");
        write_tensor(&dir.join(&file), &Tensor::F32(p.clone().into_dyn()))?;
        properties.insert(e.name.clone(), file);
    }
    let files = ManifestFiles {
        images: "images.ocbt".into(),
        gt_masks: "gt_masks.ocbt".into(),
        num_objects: "num_objects.ocbt".into(),
        ood_flags: "ood_flags.ocbt".into(),
        properties,
    };
    write_tensor(&dir.join(&files.images), &Tensor::F32(batch.images.clone().into_dyn()))?;
    write_tensor(&dir.join(&files.gt_masks), &Tensor::U8(batch.gt_masks.clone().into_dyn()))?;
    let counts = ArrayD::from_shape_vec(
        ndarray::IxDyn(&[batch.len()]),
        batch.num_objects.iter().map(|&m| m as i64).collect(),
    )
    .unwrap();
    write_tensor(&dir.join(&files.num_objects), &Tensor::I64(counts))?;
    write_tensor(
        &dir.join(&files.ood_flags),
        &Tensor::U8(batch.ood_flags.mapv(u8::from).into_dyn()),
    )?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        name: batch.name.clone(),
        num_scenes: batch.len(),
        image_size: [h, w, c],
        max_objects: batch.max_objects(),
        background_count: batch.background_count,
        schema: batch.schema.clone(),
        files,
        excluded_properties: batch.excluded_properties.iter().cloned().collect(),
        splits: batch.splits.clone(),
        shift: batch.shift.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads and fully validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<(SceneBatch, DatasetManifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported manifest version {}", manifest.format_version),
        ));
    }
    let n = manifest.num_scenes;
    let [h, w, c] = manifest.image_size;
    let m_max = manifest.max_objects;
    let f = &manifest.files;

    let p = dir.join(&f.images);
    let images = read_tensor(&p)?.into_f32(&p)?;
    expect_shape(&p, images.shape(), &[n, h, w, c])?;

    let p = dir.join(&f.gt_masks);
    let gt_masks = read_tensor(&p)?.into_u8(&p)?;
    expect_shape(&p, gt_masks.shape(), &[n, m_max, h, w])?;

    let p = dir.join(&f.num_objects);
    let counts = read_tensor(&p)?.into_i64(&p)?;
    expect_shape(&p, counts.shape(), &[n])?;
    let mut num_objects = Vec::with_capacity(n);
    for (i, &m) in counts.iter().enumerate() {
        if m < 0 {
            return Err(Error::validation(i, format!("negative object count {m}")));
        }
        num_objects.push(m as usize);
    }

    let p = dir.join(&f.ood_flags);
    let flags = read_tensor(&p)?.into_u8(&p)?;
    expect_shape(&p, flags.shape(), &[n, m_max])?;
    if let Some(v) = flags.iter().find(|&&v| v > 1) {
        return Err(Error::InvalidData(format!("ood flag value {v} is not boolean")));
    }
    let ood_flags: Array2<bool> = dyn_to::<Ix2, _>(flags.mapv(|v| v == 1));

    let mut properties = Vec::with_capacity(manifest.schema.len());
    for e in manifest.schema.entries() {
        let file = f.properties.get(&e.name).ok_or_else(|| {
            Error::format(&manifest_path, format!("no tensor file listed for property '{}'", e.name))
        })?;
        let p = dir.join(file);
        let t = read_tensor(&p)?.into_f32(&p)?;
        expect_shape(&p, t.shape(), &[n, m_max, e.kind.width()])?;
        properties.push(dyn_to::<Ix3, _>(t));
    }

    let batch = SceneBatch {
        name: manifest.name.clone(),
        schema: manifest.schema.clone(),
        images: dyn_to::<Ix4, _>(images),
        gt_masks: dyn_to::<Ix4, _>(gt_masks),
        num_objects,
        properties,
        background_count: manifest.background_count,
        ood_flags,
        excluded_properties: manifest.excluded_properties.iter().cloned().collect::<BTreeSet<_>>(),
        splits: manifest.splits.clone(),
        shift: manifest.shift.clone(),
    };
    batch.validate()?;
    Ok((batch, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotManifest {
    pub format_version: u32,
    pub num_scenes: usize,
    pub num_slots: usize,
    pub slot_dim: usize,
    pub mask_size: [usize; 2],
    pub distributed: bool,
    pub slots: String,
    pub pred_masks: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon: Option<String>,
}

pub fn save_slots(slots: &SlotBatch, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let (n, k, d) = slots.slots.dim();
    let (_, _, h, w) = slots.pred_masks.dim();
    let manifest = SlotManifest {
        format_version: FORMAT_VERSION,
        num_scenes: n,
        num_slots: k,
        slot_dim: d,
        mask_size: [h, w],
        distributed: slots.distributed,
        slots: "slots.ocbt".into(),
        pred_masks: "pred_masks.ocbt".into(),
        recon: slots.recon.as_ref().map(|_| "recon.ocbt".into()),
    };
    write_tensor(&dir.join(&manifest.slots), &Tensor::F32(slots.slots.clone().into_dyn()))?;
    write_tensor(&dir.join(&manifest.pred_masks), &Tensor::F32(slots.pred_masks.clone().into_dyn()))?;
    if let (Some(r), Some(file)) = (&slots.recon, &manifest.recon) {
        write_tensor(&dir.join(file), &Tensor::F32(r.clone().into_dyn()))?;
    }
    write_json(&dir.join(SLOTS_MANIFEST_FILE), &manifest)
}

pub fn load_slots(dir: &Path) -> Result<SlotBatch> {
    let mpath: PathBuf = dir.join(SLOTS_MANIFEST_FILE);
    let m: SlotManifest = read_json(&mpath)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(&mpath, format!("unsupported version {}", m.format_version)));
    }
    let [h, w] = m.mask_size;
    let p = dir.join(&m.slots);
    let slots = read_tensor(&p)?.into_f32(&p)?;
    expect_shape(&p, slots.shape(), &[m.num_scenes, m.num_slots, m.slot_dim])?;
    let p = dir.join(&m.pred_masks);
    let pred = read_tensor(&p)?.into_f32(&p)?;
    expect_shape(&p, pred.shape(), &[m.num_scenes, m.num_slots, h, w])?;
    let recon = match &m.recon {
        Some(file) => {
            let p = dir.join(file);
            let r = read_tensor(&p)?.into_f32(&p)?;
            if r.ndim() != 4 || r.shape()[..3] != [m.num_scenes, h, w] {
                return Err(Error::InvalidData(format!("{} has shape {:?}", p.display(), r.shape())));
            }
            Some(dyn_to::<Ix4, _>(r))
        }
        None => None,
    };
    let batch = SlotBatch {
        slots: dyn_to::<Ix3, _>(slots) as Array3<f32>,
        pred_masks: dyn_to::<Ix4, _>(pred) as Array4<f32>,
        recon,
        distributed: m.distributed,
    };
    batch.validate()?;
    Ok(batch)
}
