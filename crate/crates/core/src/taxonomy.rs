//! Material and layer-thickness categories.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::TaxonomyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Material {
    #[serde(rename = "graphene")]
    Graphene,
    #[serde(rename = "hBN")]
    HBn,
    #[serde(rename = "MoS2")]
    MoS2,
    #[serde(rename = "WTe2")]
    WTe2,
}

impl Material {
    pub const ALL: [Material; 4] = [Material::Graphene, Material::HBn, Material::MoS2, Material::WTe2];

    pub fn as_str(self) -> &'static str {
        match self {
            Material::Graphene => "graphene",
            Material::HBn => "hBN",
            Material::MoS2 => "MoS2",
            Material::WTe2 => "WTe2",
        }
    }
}

impl fmt::Display for Material {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Material {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Material::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| TaxonomyError::UnknownMaterial {
                value: s.to_string(),
                allowed: Material::ALL.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", "),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Thickness {
    Mono,
    Few,
    Thick,
}

impl Thickness {
    pub const ALL: [Thickness; 3] = [Thickness::Mono, Thickness::Few, Thickness::Thick];

    pub fn as_str(self) -> &'static str {
        match self {
            Thickness::Mono => "mono",
            Thickness::Few => "few",
            Thickness::Thick => "thick",
        }
    }
}

impl fmt::Display for Thickness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Thickness {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Thickness::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| TaxonomyError::UnknownThickness {
                value: s.to_string(),
                allowed: "mono, few, thick".to_string(),
            })
    }
}

/// Largest layer count covered by the taxonomy.
pub const MAX_LAYERS: u32 = 40;

/// Layer-count to thickness mapping. The "few" and "thick" ranges both name
/// 10 layers; `ten_layers` decides which side owns it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThicknessTaxonomy {
    pub ten_layers: Thickness,
}

impl Default for ThicknessTaxonomy {
    fn default() -> Self {
        Self { ten_layers: Thickness::Few }
    }
}

impl ThicknessTaxonomy {
    pub fn classify(&self, layers: u32) -> Result<Thickness, TaxonomyError> {
        match layers {
            0 => Err(TaxonomyError::ZeroLayers),
            1 => Ok(Thickness::Mono),
            2..=9 => Ok(Thickness::Few),
            10 => Ok(self.ten_layers),
            11..=MAX_LAYERS => Ok(Thickness::Thick),
            _ => Err(TaxonomyError::OutOfTaxonomy(layers)),
        }
    }
}

/// Classify with the default boundary (10 layers → few).
pub fn thickness_category(layers: u32) -> Result<Thickness, TaxonomyError> {
    ThicknessTaxonomy::default().classify(layers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Category {
    pub material: Material,
    pub thickness: Thickness,
}

impl Category {
    pub const fn new(material: Material, thickness: Thickness) -> Self {
        Self { material, thickness }
    }

    /// All twelve categories in material-major order.
    pub fn all() -> impl Iterator<Item = Category> {
        Material::ALL
            .into_iter()
            .flat_map(|m| Thickness::ALL.into_iter().map(move |t| Category::new(m, t)))
    }

    /// `"{material}_{thickness}"`, the COCO category name.
    pub fn name(&self) -> String {
        format!("{}_{}", self.material, self.thickness)
    }

    pub fn from_name(name: &str) -> Result<Self, TaxonomyError> {
        let (m, t) = name
            .rsplit_once('_')
            .ok_or_else(|| TaxonomyError::BadCategoryName(name.to_string()))?;
        Ok(Category::new(m.parse()?, t.parse()?))
    }

    /// 1-based COCO id, stable across files.
    pub fn coco_id(&self) -> u32 {
        let m = Material::ALL.iter().position(|&x| x == self.material).unwrap() as u32;
        let t = Thickness::ALL.iter().position(|&x| x == self.thickness).unwrap() as u32;
        m * 3 + t + 1
    }

    pub fn from_coco_id(id: u32) -> Option<Self> {
        Category::all().nth(id.checked_sub(1)? as usize)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.material, self.thickness)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_examples() {
        assert_eq!(thickness_category(1).unwrap(), Thickness::Mono);
        assert_eq!(thickness_category(5).unwrap(), Thickness::Few);
        assert_eq!(thickness_category(10).unwrap(), Thickness::Few);
        assert_eq!(thickness_category(11).unwrap(), Thickness::Thick);
        assert_eq!(thickness_category(40).unwrap(), Thickness::Thick);
    }

    #[test]
    fn outside_taxonomy() {
        assert_eq!(thickness_category(41), Err(TaxonomyError::OutOfTaxonomy(41)));
        assert_eq!(thickness_category(0), Err(TaxonomyError::ZeroLayers));
    }

    #[test]
    fn partition_is_total_and_disjoint() {
        // exhaustive over the covered range: every count maps to exactly one
        // bucket and buckets are contiguous ranges in mono < few < thick order
        let classes: Vec<Thickness> = (1..=MAX_LAYERS).map(|l| thickness_category(l).unwrap()).collect();
        assert!(classes.windows(2).all(|w| w[0] <= w[1]));
        let count = |t| classes.iter().filter(|&&c| c == t).count();
        assert_eq!(count(Thickness::Mono), 1);
        assert_eq!(count(Thickness::Few), 9);
        assert_eq!(count(Thickness::Thick), 30);
        assert_eq!(count(Thickness::Mono) + count(Thickness::Few) + count(Thickness::Thick), 40);
    }

    #[test]
    fn ten_layer_boundary_is_configurable() {
        let tax = ThicknessTaxonomy { ten_layers: Thickness::Thick };
        assert_eq!(tax.classify(10).unwrap(), Thickness::Thick);
        assert_eq!(tax.classify(9).unwrap(), Thickness::Few);
    }

    #[test]
    fn unknown_material_lists_allowed_values() {
        let err = "graphane".parse::<Material>().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("graphane"));
        for m in Material::ALL {
            assert!(msg.contains(m.as_str()), "{msg}");
        }
    }

    #[test]
    fn category_names_and_ids() {
        let cats: Vec<_> = Category::all().collect();
        assert_eq!(cats.len(), 12);
        for (i, c) in cats.iter().enumerate() {
            assert_eq!(c.coco_id() as usize, i + 1);
            assert_eq!(Category::from_coco_id(c.coco_id()), Some(*c));
            assert_eq!(Category::from_name(&c.name()).unwrap(), *c);
        }
        assert_eq!(Category::new(Material::HBn, Thickness::Mono).name(), "hBN_mono");
        assert_eq!(Category::from_coco_id(0), None);
        assert_eq!(Category::from_coco_id(13), None);
    }
}
