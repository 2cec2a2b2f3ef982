use std::collections::{BTreeMap, HashMap};

use flakescan_core::Material;
use serde::{Deserialize, Serialize};

use crate::coco::DatasetIndex;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaterialCount {
    pub images: usize,
    pub annotations: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Every material appears, with zeros when absent.
    pub per_material: BTreeMap<Material, MaterialCount>,
    /// Images with neither a material tag nor annotations.
    pub untagged_images: usize,
    pub total: MaterialCount,
}

/// Image counts by the image's material tag (falling back to the material of
/// its first annotation), annotation counts by annotation category.
pub fn dataset_stats(idx: &DatasetIndex) -> DatasetStats {
    let mut per_material: BTreeMap<Material, MaterialCount> =
        Material::ALL.iter().map(|m| (*m, MaterialCount::default())).collect();
    let mut first_material: HashMap<u64, Material> = HashMap::new();
    for a in &idx.annotations {
        first_material.entry(a.image_id).or_insert(a.category.material);
        per_material.get_mut(&a.category.material).unwrap().annotations += 1;
    }
    let mut untagged_images = 0;
    for img in &idx.images {
        match img.material.or_else(|| first_material.get(&img.id).copied()) {
            Some(m) => per_material.get_mut(&m).unwrap().images += 1,
            None => untagged_images += 1,
        }
    }
    DatasetStats {
        per_material,
        untagged_images,
        total: MaterialCount {
            images: idx.images.len(),
            annotations: idx.annotations.len(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coco::ImageEntry;
    use flakescan_core::{AnnotationRecord, Category, Polygon, Thickness};

    #[test]
    fn empty() {
        let s = dataset_stats(&DatasetIndex::default());
        assert!(s.per_material.values().all(|c| *c == MaterialCount::default()));
        assert_eq!(s.per_material.len(), 4);
    }

    #[test]
    fn one_image_three_annotations() {
        let tri = Polygon::from_coords(&[(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)]);
        let cat = Category::new(Material::MoS2, Thickness::Few);
        let idx = DatasetIndex {
            chip_id: None,
            images: vec![ImageEntry::new(1, "x.png", 16, 16)],
            annotations: (1..=3)
                .map(|i| AnnotationRecord::from_polygon(i, 1, cat, tri.clone()).unwrap())
                .collect(),
        };
        let s = dataset_stats(&idx);
        assert_eq!(s.per_material[&Material::MoS2], MaterialCount { images: 1, annotations: 3 });
        assert_eq!(s.untagged_images, 0);
    }
}
