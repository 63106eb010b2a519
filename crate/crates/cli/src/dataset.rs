//! Directory-per-case dataset layout.
//!
//! A case directory holds `wm.obj` and `pial.obj` (plus optional `.thick`
//! sidecars), usually `image.c2vx`, and after `c2v sdf` the five condition
//! volumes. A dataset directory holds case directories; they are visited in
//! name order.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use c2v_core::geometry::{load_closed_mesh, AuxChannels, ConditionSet};
use c2v_core::{Grid, TriMesh, Volume};

use crate::error::invalid;

pub const WHITE: &str = "wm.obj";
pub const PIAL: &str = "pial.obj";
pub const IMAGE: &str = "image.c2vx";
/// Condition volumes in the order they are hashed and written.
pub const CONDITION_FILES: [&str; 5] = [
    "s_c.c2vx",
    "s_p.c2vx",
    "s_w.c2vx",
    "edge.c2vx",
    "ribbon.c2vx",
];

#[derive(Debug, Clone)]
pub struct Case {
    /// Directory name; empty when the input was a single case.
    pub name: String,
    pub dir: PathBuf,
}

impl Case {
    pub fn has_meshes(&self) -> bool {
        self.dir.join(WHITE).is_file() && self.dir.join(PIAL).is_file()
    }

    pub fn has_conditions(&self) -> bool {
        CONDITION_FILES.iter().all(|f| self.dir.join(f).is_file())
    }

    pub fn has_image(&self) -> bool {
        self.dir.join(IMAGE).is_file()
    }

    /// Where this case's outputs go under `out`.
    pub fn out_dir(&self, out: &Path) -> PathBuf {
        if self.name.is_empty() {
            out.to_path_buf()
        } else {
            out.join(&self.name)
        }
    }

    pub fn label(&self) -> String {
        if self.name.is_empty() {
            self.dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        } else {
            self.name.clone()
        }
    }

    /// `(pial, white)`, both required to be closed.
    pub fn meshes(&self) -> Result<(TriMesh, TriMesh)> {
        let pial = load_closed_mesh(self.dir.join(PIAL))
            .with_context(|| format!("case {}", self.dir.display()))?;
        let white = load_closed_mesh(self.dir.join(WHITE))
            .with_context(|| format!("case {}", self.dir.display()))?;
        Ok((pial, white))
    }

    pub fn image(&self) -> Result<Volume> {
        Ok(Volume::read(self.dir.join(IMAGE))?)
    }

    /// Grid of the case image, if it has one.
    pub fn image_grid(&self) -> Result<Option<Grid>> {
        if self.has_image() {
            Ok(Some(*self.image()?.grid()))
        } else {
            Ok(None)
        }
    }

    /// Condition set from the stored volumes, or computed from the meshes on
    /// `grid` (rounded through the on-disk precision, so both routes agree).
    pub fn condition(&self, grid: Option<Grid>, aux: AuxChannels) -> Result<ConditionSet> {
        if self.has_conditions() {
            let [s_c, s_p, s_w, edge, ribbon] =
                CONDITION_FILES.map(|f| Volume::read(self.dir.join(f)));
            let cond = ConditionSet::new(s_c?, s_p?, s_w?, edge?, ribbon?, aux)?;
            if let Some(g) = grid {
                if *cond.grid() != g {
                    return Err(invalid(format!(
                        "stored conditions of {} have dims {:?}, expected {:?}",
                        self.dir.display(),
                        cond.grid().dims,
                        g.dims
                    )));
                }
            }
            return Ok(cond);
        }
        if !self.has_meshes() {
            return Err(invalid(format!(
                "{} has neither condition volumes nor a wm.obj/pial.obj pair",
                self.dir.display()
            )));
        }
        let grid = match grid {
            Some(g) => g,
            None => self.image_grid()?.ok_or_else(|| {
                invalid(format!(
                    "{}: no grid to sample conditions on",
                    self.dir.display()
                ))
            })?,
        };
        let (pial, white) = self.meshes()?;
        log::debug!(
            "computing conditions for {} from meshes",
            self.dir.display()
        );
        Ok(ConditionSet::from_meshes(&pial, &white, grid, aux)?.quantized())
    }
}

/// A single case (if `path` itself qualifies) or the qualifying subdirectories.
pub fn cases(path: &Path, qualifies: impl Fn(&Case) -> bool) -> Result<Vec<Case>> {
    if !path.is_dir() {
        return Err(invalid(format!("{} is not a directory", path.display())));
    }
    let single = Case {
        name: String::new(),
        dir: path.to_path_buf(),
    };
    if qualifies(&single) {
        return Ok(vec![single]);
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let case = Case {
            name: entry.file_name().to_string_lossy().into_owned(),
            dir: entry.path(),
        };
        if qualifies(&case) {
            found.push(case);
        }
    }
    if found.is_empty() {
        return Err(invalid(format!("no usable cases under {}", path.display())));
    }
    found.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(found)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of the on-disk representation of every condition volume.
pub fn condition_hash(cond: &ConditionSet) -> String {
    let mut h = Sha256::new();
    for v in [&cond.s_c, &cond.s_p, &cond.s_w, &cond.edge, &cond.ribbon] {
        h.update(v.to_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_conditions(cond: &ConditionSet, dir: &Path) -> Result<()> {
    for (name, v) in
        CONDITION_FILES
            .iter()
            .zip([&cond.s_c, &cond.s_p, &cond.s_w, &cond.edge, &cond.ribbon])
    {
        v.write(dir.join(name))?;
    }
    Ok(())
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
