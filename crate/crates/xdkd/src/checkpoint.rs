//! Model checkpoints: a directory holding
//!
//! ```text
//! model.toml    architecture ([model] table of the run config)
//! manifest.txt  one line per parameter: name, shape, file
//! params/NNNN.xtd
//! ```

use std::fs;
use std::path::Path;

use xdkd_core::model::DepthNet;
use xdkd_core::Tensor;

use crate::config::ModelSection;
use crate::error::{Error, IoContext, Result};
use crate::xtd;

pub fn save(model: &DepthNet, seed: u64, dir: &Path) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).at(&params_dir)?;
    let arch = toml::to_string(&ModelSection::from_spec(model.spec(), seed)).expect("model section serializes");
    let path = dir.join("model.toml");
    fs::write(&path, arch).at(&path)?;

    let mut manifest = String::new();
    for (i, p) in model.params().iter().enumerate() {
        let file = format!("params/{i:04}.xtd");
        let path = dir.join(&file);
        xtd::write(&path, &p.value).at(&path)?;
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{} {} {}\n", p.name, shape.join("x"), file));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).at(&path)
}

pub fn load(dir: &Path) -> Result<DepthNet> {
    let path = dir.join("model.toml");
    let text = fs::read_to_string(&path).at(&path)?;
    let arch: ModelSection = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), e.message())))?;
    let mut model = DepthNet::new(&arch.spec()?, arch.seed)?;

    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).at(&path)?;
    let mut values = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, file] = fields[..] else {
            return Err(Error::config(format!("{}: malformed line `{line}`", path.display())));
        };
        let tensor: Tensor = {
            let p = dir.join(file);
            xtd::read(&p).at(&p)?
        };
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        if dims.join("x") != shape {
            return Err(Error::config(format!("{file}: shape {} does not match manifest {shape}", dims.join("x"))));
        }
        values.push((name.to_string(), tensor));
    }
    model.params_mut().load(values)?;
    Ok(model)
}
