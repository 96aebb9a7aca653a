//! Synthetic biventricular shape family.
//!
//! Every shape shares one [`TemplateTopology`]: the same vertices, faces and
//! per-vertex ventricular coordinates. A shape is a truncated-ellipsoid left
//! ventricle with a crescent right ventricle wrapped around its `+y` side,
//! expressed in the landmark-derived cardiac frame.

mod frame;
pub mod io;
mod label;
mod shape;
mod template;

pub use frame::{apply_frame, cardiac_frame, invert_frame, CardiacFrame};
pub use label::Labeler;
pub use shape::{generate_shape, mean_shape, myocardial_interior_point, CohortRanges, InstanceMesh, Landmarks, ShapeParams};
pub use template::{Compartment, TemplateConfig, TemplateTopology, VertexKind};

use serde::{Deserialize, Serialize};

/// Ventricular coordinates `(u1, u2, u3, u4)`: transventricular,
/// transmural, rotational and apicobasal.
pub type Uvc = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceTag {
    LvEndo,
    RvEndo,
    Epi,
    BaseRing,
}

impl SurfaceTag {
    pub fn name(self) -> &'static str {
        match self {
            SurfaceTag::LvEndo => "lv_endo",
            SurfaceTag::RvEndo => "rv_endo",
            SurfaceTag::Epi => "epi",
            SurfaceTag::BaseRing => "base_ring",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [SurfaceTag::LvEndo, SurfaceTag::RvEndo, SurfaceTag::Epi, SurfaceTag::BaseRing].get(code as usize).copied()
    }
}

/// Five-class point label. The discriminant is the channel index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnatomicalLabel {
    #[serde(rename = "BG")]
    Bg = 0,
    #[serde(rename = "LV")]
    Lv = 1,
    #[serde(rename = "RV")]
    Rv = 2,
    #[serde(rename = "LVM")]
    Lvm = 3,
    #[serde(rename = "RVM")]
    Rvm = 4,
}

impl AnatomicalLabel {
    pub const ALL: [AnatomicalLabel; 5] =
        [AnatomicalLabel::Bg, AnatomicalLabel::Lv, AnatomicalLabel::Rv, AnatomicalLabel::Lvm, AnatomicalLabel::Rvm];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        ["BG", "LV", "RV", "LVM", "RVM"][self.index()]
    }

    pub fn one_hot(self) -> [f64; 5] {
        let mut v = [0.0; 5];
        v[self.index()] = 1.0;
        v
    }

    /// Myocardial label for a transventricular coordinate.
    pub fn myocardium(u1: f64) -> Self {
        if u1 >= 0.5 {
            AnatomicalLabel::Rvm
        } else {
            AnatomicalLabel::Lvm
        }
    }
}
