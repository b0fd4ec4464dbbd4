//! Checkpoints: one archive per named tensor plus `manifest.txt` with
//! `name = file d0 d1 d2 d3` lines and the run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::{Scalar, Tensor4};

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";

pub fn save<T: Scalar, P: ParamTree<Tensor4<T>>>(dir: &Path, params: &P, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut result = Ok(());
    params.visit("", &mut |name, t| {
        if result.is_err() {
            return;
        }
        let file = format!("{name}.tns");
        let [a, b, c, d] = t.dims();
        let _ = writeln!(manifest, "{name} = {file} {a} {b} {c} {d}");
        result = t.save(&dir.join(&file));
    });
    result?;
    let write = |file: &str, text: &str| {
        let p = dir.join(file);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(MANIFEST, &manifest)?;
    write(CONFIG, &cfg.to_text())
}

pub fn load_config(dir: &Path) -> Result<RunConfig> {
    RunConfig::load(&dir.join(CONFIG))
}

/// Fills every slot of `params` from `dir`; names and dims must match the
/// manifest exactly.
pub fn load_into<T: Scalar, P: ParamTree<Tensor4<T>>>(dir: &Path, params: &mut P) -> Result<()> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut entries: BTreeMap<String, (String, [usize; 4])> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format(&mpath, format!("line {}: expected `name = file d0 d1 d2 d3`", n + 1));
        let (name, rest) = line.split_once('=').ok_or_else(bad)?;
        let f: Vec<&str> = rest.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let mut dims = [0; 4];
        for (d, s) in dims.iter_mut().zip(&f[1..]) {
            *d = s.parse().map_err(|_| bad())?;
        }
        entries.insert(name.trim().to_string(), (f[0].to_string(), dims));
    }
    let mut result = Ok(());
    let mut used = 0;
    params.visit_mut("", &mut |name, slot| {
        if result.is_err() {
            return;
        }
        result = (|| {
            let (file, dims) = entries
                .get(&name)
                .ok_or_else(|| Error::format(&mpath, format!("missing parameter `{name}`")))?;
            if *dims != slot.dims() {
                return Err(Error::format(
                    &mpath,
                    format!("`{name}` has dims {dims:?}, model expects {:?}", slot.dims()),
                ));
            }
            let t = Tensor4::<T>::load(&dir.join(file))?;
            if t.dims() != *dims {
                return Err(Error::format(dir.join(file), "archive dims differ from manifest"));
            }
            *slot = t;
            used += 1;
            Ok(())
        })();
    });
    result?;
    if used != entries.len() {
        return Err(Error::format(
            &mpath,
            format!("{} manifest entries, model has {used} parameters", entries.len()),
        ));
    }
    Ok(())
}
