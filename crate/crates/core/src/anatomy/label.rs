//! Point labeling against one shape's compartments.

use rstar::primitives::GeomWithData;
use rstar::RTree;

use super::template::{Compartment, TemplateTopology};
use super::{AnatomicalLabel, InstanceMesh};
use crate::error::{Error, Result};
use crate::geom::{Aabb, Containment, Vec3};

/// Labels arbitrary points for one shape. Building it validates that every
/// compartment is watertight.
pub struct Labeler {
    lv: Containment,
    rv: Containment,
    epi: Containment,
    bounds: Aabb,
    tree: RTree<GeomWithData<Vec3, usize>>,
    u1: Vec<f64>,
}

impl Labeler {
    pub fn new(template: &TemplateTopology, mesh: &InstanceMesh) -> Result<Self> {
        if mesh.positions.len() != template.vertex_count() {
            return Err(Error::shape(format!(
                "mesh has {} vertices, template has {}",
                mesh.positions.len(),
                template.vertex_count()
            )));
        }
        let build = |c| Containment::new(&template.compartment_mesh(c, &mesh.positions));
        Ok(Self {
            lv: build(Compartment::LvCavity)?,
            rv: build(Compartment::RvCavity)?,
            epi: build(Compartment::Epicardium)?,
            bounds: Aabb::from_points(&mesh.positions),
            tree: RTree::bulk_load(mesh.positions.iter().enumerate().map(|(i, &p)| GeomWithData::new(p, i)).collect()),
            u1: template.uvc.iter().map(|u| u[0]).collect(),
        })
    }

    pub fn in_lv_cavity(&self, p: Vec3) -> bool {
        self.lv.contains(p)
    }

    pub fn in_rv_cavity(&self, p: Vec3) -> bool {
        self.rv.contains(p)
    }

    pub fn in_epicardium(&self, p: Vec3) -> bool {
        self.epi.contains(p)
    }

    /// Index of the template vertex nearest to `p`.
    pub fn nearest_vertex(&self, p: Vec3) -> usize {
        self.tree.nearest_neighbor(&p).map_or(0, |n| n.data)
    }

    pub fn label(&self, p: Vec3) -> Result<AnatomicalLabel> {
        if let Some(i) = p.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "label query point", index: i });
        }
        Ok(self.label_finite(p))
    }

    fn label_finite(&self, p: Vec3) -> AnatomicalLabel {
        if !self.bounds.contains(p) {
            return AnatomicalLabel::Bg;
        }
        if self.lv.contains(p) {
            AnatomicalLabel::Lv
        } else if self.rv.contains(p) {
            AnatomicalLabel::Rv
        } else if self.epi.contains(p) {
            AnatomicalLabel::myocardium(self.u1[self.nearest_vertex(p)])
        } else {
            AnatomicalLabel::Bg
        }
    }

    pub fn label_all(&self, points: &[Vec3]) -> Result<Vec<AnatomicalLabel>> {
        points.iter().map(|&p| self.label(p)).collect()
    }
}
