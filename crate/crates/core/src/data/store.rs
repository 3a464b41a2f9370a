use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use smag_tensor::io::{decode_tensor, decode_u8, encode_tensor, encode_u8};

use super::{GenParams, NormStats, Scene, SplitManifest};
use crate::error::{data, io_at, Result};
use crate::fsx::{read_json, write_atomic, write_json};

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub params: GenParams,
    pub scenes: Vec<String>,
    pub split: SplitManifest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub stats: NormStats,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    /// Scenes of the given split, in manifest order.
    pub fn split(&self, name: &str) -> Result<Vec<&Scene>> {
        let ids = match name {
            "train" => &self.manifest.split.train,
            "val" => &self.manifest.split.val,
            "test" => &self.manifest.split.test,
            other => return Err(data(format!("unknown split {other:?}"))),
        };
        ids.iter()
            .map(|id| self.scene(id).ok_or_else(|| data(format!("split lists unknown scene {id}"))))
            .collect()
    }
}

const FILES: [&str; 4] = ["sar.bin", "msi.bin", "validity.bin", "label.bin"];

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    for scene in &ds.scenes {
        let sdir = dir.join("scenes").join(&scene.id);
        let (h, w) = (scene.height(), scene.width());
        let mut buf = Vec::new();
        encode_tensor(&scene.sar, &mut buf);
        write_atomic(&sdir.join(FILES[0]), &buf)?;
        buf.clear();
        encode_tensor(&scene.msi, &mut buf);
        write_atomic(&sdir.join(FILES[1]), &buf)?;
        buf.clear();
        encode_u8(&[h, w], &scene.validity, &mut buf);
        write_atomic(&sdir.join(FILES[2]), &buf)?;
        buf.clear();
        encode_u8(&[h, w], &scene.label, &mut buf);
        write_atomic(&sdir.join(FILES[3]), &buf)?;
    }
    write_json(&dir.join("norm_stats.json"), &ds.stats)?;
    write_json(&dir.join("manifest.json"), &ds.manifest)
}

fn read_scene(dir: &Path, id: &str, fill: f32) -> Result<Scene> {
    let sdir = dir.join("scenes").join(id);
    let load = |name: &str| fs::read(sdir.join(name)).map_err(|e| data(format!("scene {id}: {name}: {e}")));
    let wrap = |name: &'static str| move |e: smag_tensor::TensorError| data(format!("scene {id}: {name}: {e}"));
    let sar = decode_tensor::<f32>(&load(FILES[0])?).map_err(wrap("sar.bin"))?;
    let msi = decode_tensor::<f32>(&load(FILES[1])?).map_err(wrap("msi.bin"))?;
    let (vshape, validity) = decode_u8(&load(FILES[2])?).map_err(wrap("validity.bin"))?;
    let (lshape, label) = decode_u8(&load(FILES[3])?).map_err(wrap("label.bin"))?;
    if sar.shape().len() != 3 || vshape != sar.shape()[1..] || lshape != vshape {
        return Err(data(format!("scene {id}: raster shapes disagree")));
    }
    let scene = Scene {
        id: id.to_string(),
        sar,
        msi,
        validity,
        label,
    };
    scene.check(fill)?;
    Ok(scene)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(data(format!("{} is not a dataset: manifest.json missing", dir.display())));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.version != DATASET_VERSION {
        return Err(data(format!(
            "dataset version {} is not supported (expected {DATASET_VERSION})",
            manifest.version
        )));
    }
    let stats: NormStats = read_json(&dir.join("norm_stats.json"))?;
    if stats.mean.len() != 6 || stats.std.len() != 6 {
        return Err(data("norm_stats.json must hold 6 bands"));
    }
    let scenes_dir = dir.join("scenes");
    let on_disk = fs::read_dir(&scenes_dir).map_err(io_at(&scenes_dir))?.count();
    if on_disk != manifest.scenes.len() {
        return Err(data(format!(
            "manifest lists {} scenes but {} exist on disk",
            manifest.scenes.len(),
            on_disk
        )));
    }
    let scenes = manifest
        .scenes
        .iter()
        .map(|id| read_scene(dir, id, manifest.params.fill_value))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, stats, scenes })
}

impl Dataset {
    /// Generates `count` scenes, splits them and fits statistics on the
    /// training split.
    pub fn generate(params: &GenParams, count: usize) -> Result<Self> {
        let scenes = super::generate_scenes(params, count)?;
        let split = super::stratified_split(&scenes, params.seed);
        let train: Vec<Scene> = scenes
            .iter()
            .filter(|s| split.train.contains(&s.id))
            .cloned()
            .collect();
        let stats = super::compute_norm_stats(&train)?;
        let manifest = Manifest {
            version: DATASET_VERSION,
            params: params.clone(),
            scenes: scenes.iter().map(|s| s.id.clone()).collect(),
            split,
        };
        Ok(Self { manifest, stats, scenes })
    }
}
