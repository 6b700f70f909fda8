//! On-disk dataset layout: `pairNNN/{fixed,moving}.{vol3,lab3}` plus
//! `gt_field.vol3`.

use std::fs;
use std::path::{Path, PathBuf};

use super::SyntheticPair;
use crate::error::{Error, Result};
use crate::volume::{read_lab3, read_vol3, write_lab3, write_vol3, DisplacementField};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedPair {
    pub name: String,
    pub pair: SyntheticPair,
}

pub fn write_pair(dir: impl AsRef<Path>, pair: &SyntheticPair) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_vol3(&pair.fixed, dir.join("fixed.vol3"))?;
    write_vol3(&pair.moving, dir.join("moving.vol3"))?;
    write_lab3(&pair.fixed_labels, dir.join("fixed.lab3"))?;
    write_lab3(&pair.moving_labels, dir.join("moving.lab3"))?;
    write_vol3(pair.gt_field.volume(), dir.join("gt_field.vol3"))
}

pub fn read_pair(dir: impl AsRef<Path>) -> Result<SyntheticPair> {
    let dir = dir.as_ref();
    let pair = SyntheticPair {
        fixed: read_vol3(dir.join("fixed.vol3"))?,
        moving: read_vol3(dir.join("moving.vol3"))?,
        fixed_labels: read_lab3(dir.join("fixed.lab3"))?,
        moving_labels: read_lab3(dir.join("moving.lab3"))?,
        gt_field: DisplacementField::new(read_vol3(dir.join("gt_field.vol3"))?)?,
    };
    let dims = pair.fixed.dims();
    let consistent = pair.moving.dims() == dims
        && pair.fixed_labels.dims() == dims
        && pair.moving_labels.dims() == dims
        && pair.gt_field.dims() == dims;
    if !consistent {
        return Err(Error::InvalidArgument(format!("pair {} has inconsistent dimensions", dir.display())));
    }
    Ok(pair)
}

/// Writes `pair000`, `pair001`, ... under `dir`, creating it if needed.
pub fn write_dataset(dir: impl AsRef<Path>, pairs: &[SyntheticPair]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, p) in pairs.iter().enumerate() {
        write_pair(dir.join(format!("pair{i:03}")), p)?;
    }
    Ok(())
}

/// Reads every `pair*` subdirectory in name order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<NamedPair>> {
    let mut dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_dir() && name.starts_with("pair") {
            dirs.push((name, entry.path()));
        }
    }
    dirs.sort();
    dirs.into_iter()
        .map(|(name, path)| Ok(NamedPair { pair: read_pair(&path)?, name }))
        .collect()
}
