//! Scene directories written by `gen-data`.
//!
//! ```text
//! DIR/manifest.txt          one scene directory name per line
//! DIR/scene_001000/image.xtd  3 x H x W
//!                  radar.xtd  H x W, 0 where no return
//!                  dd.xtd     H x W dense supervision, 0 = invalid
//!                  ds.xtd     H x W single-scan supervision, 0 = invalid
//!                  dd.pfm     optional float32 copy of dd
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use xdkd_core::harness::Sample;
use xdkd_core::supervision::SupervisionPair;
use xdkd_core::synthetic::Scene;
use xdkd_core::Tensor;

use crate::error::{Error, IoContext, Result};
use crate::{pfm, xtd};

pub const MANIFEST: &str = "manifest.txt";

/// One scene as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFiles {
    pub name: String,
    pub image: Tensor,
    pub radar: Tensor,
    pub dd: Tensor,
    pub ds: Tensor,
}

impl SceneFiles {
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            name: format!("scene_{:06}", scene.seed),
            image: scene.image.clone(),
            radar: scene.radar_depth.clone(),
            dd: scene.sup.dd.clone(),
            ds: scene.sup.ds.clone(),
        }
    }

    pub fn sample(&self) -> Result<Sample> {
        let sup = SupervisionPair::new(self.ds.clone(), self.dd.clone())?;
        Ok(Sample::new(self.image.clone(), &self.radar, sup)?)
    }

    pub fn write(&self, dir: &Path, with_pfm: bool) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        for (file, t) in [("image.xtd", &self.image), ("radar.xtd", &self.radar), ("dd.xtd", &self.dd), ("ds.xtd", &self.ds)] {
            let path = dir.join(file);
            xtd::write(&path, t).at(&path)?;
        }
        if with_pfm {
            let path = dir.join("dd.pfm");
            pfm::write(&path, &self.dd).at(&path)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let load = |file: &str| {
            let path = dir.join(file);
            xtd::read(&path).at(&path)
        };
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self { name, image: load("image.xtd")?, radar: load("radar.xtd")?, dd: load("dd.xtd")?, ds: load("ds.xtd")? })
    }
}

pub fn write_dataset(dir: &Path, scenes: &[SceneFiles], with_pfm: bool) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut manifest = String::new();
    for s in scenes {
        s.write(&dir.join(&s.name), with_pfm)?;
        manifest.push_str(&s.name);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).at(&path)
}

pub fn scene_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).at(&path)?;
    let names: Vec<PathBuf> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| dir.join(l)).collect();
    if names.is_empty() {
        return Err(Error::config(format!("{} lists no scenes", path.display())));
    }
    Ok(names)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneFiles>> {
    scene_dirs(dir)?.iter().map(|d| SceneFiles::read(d)).collect()
}

pub fn read_samples(dir: &Path) -> Result<Vec<Sample>> {
    read_dataset(dir)?.iter().map(SceneFiles::sample).collect()
}
