//! Scene datasets on disk.
//!
//! A pack is one directory: `cameras.json`, `meta.json`, `images/####.png`,
//! `masks1/####.png`, `masks2/####.png`, and optionally `gt/object{1,2}.obj`.
//! Everything is written deterministically, so generating the same scene with
//! the same seed twice yields byte-identical directories, and a pack survives
//! a save/load/save cycle unchanged.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, ImageBuffer};
use crate::mesh::{write_obj, TriangleMesh};
use crate::synth::{
    make_scene, orbit_cameras_seeded, render_ground_truth, AnalyticScene, SceneId, TracedView,
    DEFAULT_ORBIT, DEFAULT_TEST_VIEWS, DEFAULT_TRAIN_VIEWS,
};

/// Rigid remap from capture coordinates into the unit cube. Synthetic scenes
/// are built in the cube already, so theirs is the identity; the slot exists
/// for data that arrives in metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalisation {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl Default for Normalisation {
    fn default() -> Self {
        Normalisation { scale: 1.0, offset: [0.0; 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene: String,
    pub seed: u64,
    pub contact_depth: f64,
    pub width: u32,
    pub height: u32,
    /// Indices into the camera list, disjoint from `test_views` and jointly
    /// covering it.
    pub train_views: Vec<usize>,
    pub test_views: Vec<usize>,
    pub normalisation: Normalisation,
}

/// A generated dataset held in memory: every view rendered, cameras in ring
/// order, and the analytic scene it came from (reconstructable from the
/// metadata, so loading gets it back too).
#[derive(Debug, Clone)]
pub struct ScenePack {
    pub meta: SceneMeta,
    pub cameras: Vec<Camera>,
    pub views: Vec<TracedView>,
    pub scene: AnalyticScene,
}

impl ScenePack {
    pub fn generate(
        id: SceneId,
        contact_depth: f64,
        seed: u64,
        width: u32,
        height: u32,
    ) -> Result<ScenePack> {
        let scene = make_scene(id, contact_depth)?;
        let n = DEFAULT_TRAIN_VIEWS + DEFAULT_TEST_VIEWS;
        let cameras = orbit_cameras_seeded(n, width, height, DEFAULT_ORBIT, seed)?;
        let views = render_ground_truth(&scene, &cameras)?;
        let test_views: Vec<usize> = (0..n).filter(|i| i % 6 == 3).collect();
        let train_views: Vec<usize> = (0..n).filter(|i| i % 6 != 3).collect();
        let meta = SceneMeta {
            scene: id.name().to_string(),
            seed,
            contact_depth,
            width,
            height,
            train_views,
            test_views,
            normalisation: Normalisation::default(),
        };
        let pack = ScenePack { meta, cameras, views, scene };
        pack.validate()?;
        Ok(pack)
    }

    pub fn train_cameras(&self) -> Vec<&Camera> {
        self.meta.train_views.iter().map(|&i| &self.cameras[i]).collect()
    }

    pub fn test_cameras(&self) -> Vec<&Camera> {
        self.meta.test_views.iter().map(|&i| &self.cameras[i]).collect()
    }

    /// Count, shape, and mask-structure contracts shared by generation and
    /// loading: one view per camera, binary disjoint masks, split indices
    /// that partition the camera list.
    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() != self.views.len() {
            return Err(Error::data(format!(
                "{} cameras but {} views",
                self.cameras.len(),
                self.views.len()
            )));
        }
        let mut seen = vec![false; self.cameras.len()];
        for &i in self.meta.train_views.iter().chain(&self.meta.test_views) {
            if i >= seen.len() || seen[i] {
                return Err(Error::data(format!("split index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::data("split does not cover every view"));
        }
        for (i, v) in self.views.iter().enumerate() {
            let dims_ok = |b: &ImageBuffer, ch: u32| {
                b.width == self.meta.width && b.height == self.meta.height && b.channels == ch
            };
            if !dims_ok(&v.image, 3) || !dims_ok(&v.mask1, 1) || !dims_ok(&v.mask2, 1) {
                return Err(Error::data(format!("view {i} has mismatched buffer shapes")));
            }
            for (m1, m2) in v.mask1.data().iter().zip(v.mask2.data()) {
                if (*m1 != 0.0 && *m1 != 1.0) || (*m2 != 0.0 && *m2 != 1.0) {
                    return Err(Error::data(format!("view {i} has a non-binary mask value")));
                }
                if *m1 == 1.0 && *m2 == 1.0 {
                    return Err(Error::data(format!("view {i} assigns a pixel to both objects")));
                }
            }
        }
        Ok(())
    }

    /// Writes the pack, overwriting files already present. Ground-truth
    /// meshes, when given, land under `gt/`.
    pub fn save(&self, dir: &Path, gt: Option<[&TriangleMesh; 2]>) -> Result<()> {
        self.validate()?;
        let sub = |name: &str| -> Result<PathBuf> {
            let p = dir.join(name);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (images, masks1, masks2) = (sub("images")?, sub("masks1")?, sub("masks2")?);

        write_json(&dir.join("cameras.json"), &self.cameras)?;
        write_json(&dir.join("meta.json"), &self.meta)?;

        for (i, v) in self.views.iter().enumerate() {
            let name = format!("{i:04}.png");
            save_rgb(&v.image, &images.join(&name))?;
            save_mask(&v.mask1, &masks1.join(&name))?;
            save_mask(&v.mask2, &masks2.join(&name))?;
        }

        if let Some([m1, m2]) = gt {
            let gtdir = sub("gt")?;
            write_obj(m1, &gtdir.join("object1.obj"))?;
            write_obj(m2, &gtdir.join("object2.obj"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ScenePack> {
        let meta: SceneMeta = read_json(&dir.join("meta.json"))?;
        let cameras: Vec<Camera> = read_json(&dir.join("cameras.json"))?;
        let id = SceneId::parse(&meta.scene)?;
        let scene = make_scene(id, meta.contact_depth)?;

        let mut views = Vec::with_capacity(cameras.len());
        for i in 0..cameras.len() {
            let name = format!("{i:04}.png");
            views.push(TracedView {
                image: load_rgb(&dir.join("images").join(&name))?,
                mask1: load_mask(&dir.join("masks1").join(&name))?,
                mask2: load_mask(&dir.join("masks2").join(&name))?,
            });
        }
        let pack = ScenePack { meta, cameras, views, scene };
        pack.validate()?;
        Ok(pack)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

fn quantise(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn save_rgb(img: &ImageBuffer, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantise(v)).collect();
    let out = image::RgbImage::from_raw(img.width, img.height, bytes)
        .expect("buffer length fixed by construction");
    out.save(path)?;
    Ok(())
}

fn save_mask(img: &ImageBuffer, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantise(v)).collect();
    let out = image::GrayImage::from_raw(img.width, img.height, bytes)
        .expect("buffer length fixed by construction");
    out.save(path)?;
    Ok(())
}

fn load_rgb(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path)?.to_rgb8();
    let data: Vec<f32> = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    ImageBuffer::from_data(img.width(), img.height(), 3, data)
}

fn load_mask(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path)?.to_luma8();
    let data = img
        .as_raw()
        .iter()
        .map(|&b| match b {
            0 => Ok(0.0),
            255 => Ok(1.0),
            other => Err(Error::data(format!(
                "{}: mask value {other} is neither 0 nor 255",
                path.display()
            ))),
        })
        .collect::<Result<Vec<f32>>>()?;
    ImageBuffer::from_data(img.width(), img.height(), 1, data)
}
