//! Cortex condition building: fused cortex SDF, ribbon mask and edge map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::mesh::TriMesh;
use super::sdf::SignedDistanceField;
use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};

/// Three-case fusion of pial and white-matter SDFs. A zero distance counts as inside.
///
/// Returns `(s_c, ribbon)`.
pub fn fuse_cortex_sdf(s_p: &Volume, s_w: &Volume) -> Result<(Volume, Volume)> {
    s_p.check_geometry(s_w)?;
    let n = s_p.len();
    let mut s_c = Vec::with_capacity(n);
    let mut ribbon = Vec::with_capacity(n);
    for (&p, &w) in s_p.data().iter().zip(s_w.data()) {
        let (c, r) = fuse_voxel(p, w);
        s_c.push(c);
        ribbon.push(r);
    }
    Ok((
        Volume::new(*s_p.grid(), s_c)?,
        Volume::new(*s_p.grid(), ribbon)?,
    ))
}

#[inline]
pub fn fuse_voxel(p: f64, w: f64) -> (f64, f64) {
    match (p > 0.0, w > 0.0) {
        (true, true) => (p, 0.0),
        (false, false) => (w, 0.0),
        _ => (0.0, 1.0),
    }
}

pub fn default_edge_tau(grid: &Grid) -> f64 {
    0.5 * grid.min_spacing()
}

/// Binary map of voxels within `tau` of either surface.
pub fn edge_map(s_p: &Volume, s_w: &Volume, tau: f64) -> Result<Volume> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "edge threshold must be positive, got {tau}"
        )));
    }
    s_p.zip_map(s_w, |p, w| {
        if p.abs() < tau || w.abs() < tau {
            1.0
        } else {
            0.0
        }
    })
}

/// Which auxiliary channels are fed to the denoiser, in the fixed order
/// `s_p, s_w, edge, ribbon`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AuxChannels {
    pub s_p: bool,
    pub s_w: bool,
    pub edge: bool,
    pub ribbon: bool,
}

impl AuxChannels {
    pub const ALL: AuxChannels = AuxChannels {
        s_p: true,
        s_w: true,
        edge: true,
        ribbon: true,
    };
    pub const NONE: AuxChannels = AuxChannels {
        s_p: false,
        s_w: false,
        edge: false,
        ribbon: false,
    };

    pub fn flags(&self) -> [bool; 4] {
        [self.s_p, self.s_w, self.edge, self.ribbon]
    }

    pub fn count(&self) -> usize {
        self.flags().iter().filter(|&&f| f).count()
    }
}

impl Default for AuxChannels {
    fn default() -> Self {
        AuxChannels::ALL
    }
}

const AUX_NAMES: [&str; 4] = ["s_p", "s_w", "edge", "ribbon"];

impl fmt::Display for AuxChannels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = AUX_NAMES
            .iter()
            .zip(self.flags())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        if names.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", names.join(","))
        }
    }
}

impl FromStr for AuxChannels {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" | "" => return Ok(AuxChannels::NONE),
            "all" => return Ok(AuxChannels::ALL),
            _ => {}
        }
        let mut out = AuxChannels::NONE;
        for part in s.split(',') {
            match part.trim() {
                "s_p" | "pial" => out.s_p = true,
                "s_w" | "white" | "wm" => out.s_w = true,
                "edge" => out.edge = true,
                "ribbon" => out.ribbon = true,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown auxiliary channel {other:?}"
                    )))
                }
            }
        }
        Ok(out)
    }
}

/// Bridge endpoint choice (the conditioning-ablation primary axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimaryCondition {
    /// Fused cortex SDF.
    #[default]
    Cortex,
    Pial,
    White,
    Edge,
    Ribbon,
    /// |s_p| + |s_w|.
    JointDistance,
}

impl FromStr for PrimaryCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cortex" | "s_c" => PrimaryCondition::Cortex,
            "pial" | "s_p" => PrimaryCondition::Pial,
            "white" | "s_w" => PrimaryCondition::White,
            "edge" => PrimaryCondition::Edge,
            "ribbon" => PrimaryCondition::Ribbon,
            "joint_distance" | "s_d" => PrimaryCondition::JointDistance,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown primary condition {other:?}"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub s_c: Volume,
    pub s_p: Volume,
    pub s_w: Volume,
    pub edge: Volume,
    pub ribbon: Volume,
    pub active_aux: AuxChannels,
}

impl ConditionSet {
    /// Validating constructor for volumes loaded from disk.
    pub fn new(
        s_c: Volume,
        s_p: Volume,
        s_w: Volume,
        edge: Volume,
        ribbon: Volume,
        active_aux: AuxChannels,
    ) -> Result<Self> {
        for v in [&s_p, &s_w, &edge, &ribbon] {
            s_c.check_geometry(v)?;
        }
        for (name, v) in [("edge", &edge), ("ribbon", &ribbon)] {
            if v.data().iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} volume is not binary"
                )));
            }
        }
        if s_c
            .data()
            .iter()
            .zip(ribbon.data())
            .any(|(&c, &r)| r == 1.0 && c != 0.0)
        {
            return Err(Error::InvalidArgument(
                "cortex SDF is nonzero inside the ribbon".into(),
            ));
        }
        Ok(ConditionSet {
            s_c,
            s_p,
            s_w,
            edge,
            ribbon,
            active_aux,
        })
    }

    pub fn from_sdfs(
        s_p: Volume,
        s_w: Volume,
        tau: Option<f64>,
        active_aux: AuxChannels,
    ) -> Result<Self> {
        let (s_c, ribbon) = fuse_cortex_sdf(&s_p, &s_w)?;
        let tau = tau.unwrap_or_else(|| default_edge_tau(s_p.grid()));
        let edge = edge_map(&s_p, &s_w, tau)?;
        Ok(ConditionSet {
            s_c,
            s_p,
            s_w,
            edge,
            ribbon,
            active_aux,
        })
    }

    pub fn from_meshes(
        pial: &TriMesh,
        white: &TriMesh,
        grid: Grid,
        active_aux: AuxChannels,
    ) -> Result<Self> {
        let s_p = SignedDistanceField::new(pial)?.sample_grid(grid);
        let s_w = SignedDistanceField::new(white)?.sample_grid(grid);
        ConditionSet::from_sdfs(s_p, s_w, None, active_aux)
    }

    pub fn grid(&self) -> &Grid {
        self.s_c.grid()
    }

    pub fn with_active(mut self, active_aux: AuxChannels) -> Self {
        self.active_aux = active_aux;
        self
    }

    /// Active auxiliary volumes in channel order.
    pub fn active_volumes(&self) -> Vec<&Volume> {
        [&self.s_p, &self.s_w, &self.edge, &self.ribbon]
            .into_iter()
            .zip(self.active_aux.flags())
            .filter(|(_, on)| *on)
            .map(|(v, _)| v)
            .collect()
    }

    pub fn primary(&self, kind: PrimaryCondition) -> Volume {
        match kind {
            PrimaryCondition::Cortex => self.s_c.clone(),
            PrimaryCondition::Pial => self.s_p.clone(),
            PrimaryCondition::White => self.s_w.clone(),
            PrimaryCondition::Edge => self.edge.clone(),
            PrimaryCondition::Ribbon => self.ribbon.clone(),
            PrimaryCondition::JointDistance => self
                .s_p
                .zip_map(&self.s_w, |p, w| p.abs() + w.abs())
                .expect("condition volumes share geometry"),
        }
    }

    /// Round all volumes through the on-disk representation.
    pub fn quantized(&self) -> ConditionSet {
        ConditionSet {
            s_c: self.s_c.quantized(),
            s_p: self.s_p.quantized(),
            s_w: self.s_w.quantized(),
            edge: self.edge.clone(),
            ribbon: self.ribbon.clone(),
            active_aux: self.active_aux,
        }
    }
}
