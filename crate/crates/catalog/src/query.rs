//! Filtered, keyset-paginated listing of catalog records.

use std::cmp::Ordering;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use flakescan_core::{BBox, Material, Thickness};
use serde::{Deserialize, Serialize};

use crate::error::CatalogError;
use crate::record::{FlakeRecord, ReviewStatus};
use crate::store::Store;

pub const DEFAULT_LIMIT: usize = 100;
pub const MAX_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortOrder {
    /// Chip, then centroid y, x, then id.
    #[default]
    Position,
    /// Highest score first, then id.
    ScoreDesc,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FlakeQuery {
    pub chip: Option<String>,
    pub material: Option<Material>,
    pub thickness: Option<Thickness>,
    pub min_score: Option<f64>,
    /// Records whose centroid lies inside, edges included.
    pub region: Option<BBox>,
    pub status: Option<ReviewStatus>,
    /// Rejected records are hidden unless this is set or `status` asks for them.
    pub include_rejected: bool,
    pub sort: SortOrder,
    pub limit: Option<usize>,
    /// Cursor returned as `next` by the previous page.
    pub after: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    /// Matching records across all pages.
    pub total: usize,
    pub next: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sort", rename_all = "snake_case")]
enum Cursor {
    Position { chip: String, y: f64, x: f64, id: String },
    ScoreDesc { score: f64, id: String },
}

impl Cursor {
    fn of(r: &FlakeRecord, sort: SortOrder) -> Self {
        match sort {
            SortOrder::Position => Cursor::Position {
                chip: r.chip_id.clone(),
                y: r.centroid_um.y,
                x: r.centroid_um.x,
                id: r.id.clone(),
            },
            SortOrder::ScoreDesc => Cursor::ScoreDesc {
                score: r.score,
                id: r.id.clone(),
            },
        }
    }

    fn encode(&self) -> String {
        URL_SAFE_NO_PAD.encode(serde_json::to_vec(self).expect("cursor serializes"))
    }

    fn decode(s: &str) -> Result<Self, CatalogError> {
        let bad = || CatalogError::Validation(format!("bad cursor {s:?}"));
        let bytes = URL_SAFE_NO_PAD.decode(s).map_err(|_| bad())?;
        serde_json::from_slice(&bytes).map_err(|_| bad())
    }

    fn cmp(&self, other: &Cursor) -> Ordering {
        match (self, other) {
            (
                Cursor::Position { chip, y, x, id },
                Cursor::Position {
                    chip: c2,
                    y: y2,
                    x: x2,
                    id: i2,
                },
            ) => chip
                .cmp(c2)
                .then(y.total_cmp(y2))
                .then(x.total_cmp(x2))
                .then(id.cmp(i2)),
            (Cursor::ScoreDesc { score, id }, Cursor::ScoreDesc { score: s2, id: i2 }) => {
                s2.total_cmp(score).then(id.cmp(i2))
            }
            _ => Ordering::Equal,
        }
    }
}

pub fn sort_order(a: &FlakeRecord, b: &FlakeRecord, sort: SortOrder) -> Ordering {
    Cursor::of(a, sort).cmp(&Cursor::of(b, sort))
}

impl FlakeQuery {
    pub fn chip(chip: impl Into<String>) -> Self {
        Self {
            chip: Some(chip.into()),
            ..Self::default()
        }
    }

    /// Build from URL query parameters. Unknown keys are rejected.
    pub fn from_params<'a>(params: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, CatalogError> {
        let mut q = FlakeQuery::default();
        let num = |k: &str, v: &str| -> Result<f64, CatalogError> {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| CatalogError::Validation(format!("{k}: {v:?} is not a number")))
        };
        for (k, v) in params {
            match k {
                "chip" => q.chip = Some(v.to_string()),
                "material" => q.material = Some(v.parse()?),
                "thickness" => q.thickness = Some(v.parse()?),
                "min_score" => q.min_score = Some(num(k, v)?),
                "region" => {
                    let parts = v.split(',').map(|p| num(k, p.trim())).collect::<Result<Vec<_>, _>>()?;
                    let [x, y, w, h] = parts[..] else {
                        return Err(CatalogError::Validation(format!("region must be x,y,w,h, got {v:?}")));
                    };
                    q.region = Some(BBox::new(x, y, w, h));
                }
                "status" => q.status = Some(v.parse()?),
                "include_rejected" => {
                    q.include_rejected = match v {
                        "" | "1" | "true" => true,
                        "0" | "false" => false,
                        _ => return Err(CatalogError::Validation(format!("include_rejected: {v:?} is not a flag"))),
                    }
                }
                "sort" => {
                    q.sort = match v {
                        "position" => SortOrder::Position,
                        "score_desc" | "score" => SortOrder::ScoreDesc,
                        _ => return Err(CatalogError::Validation(format!("unknown sort {v:?}"))),
                    }
                }
                "limit" => {
                    q.limit = Some(
                        v.parse()
                            .map_err(|_| CatalogError::Validation(format!("limit: {v:?} is not a count")))?,
                    )
                }
                "after" => q.after = Some(v.to_string()),
                other => return Err(CatalogError::Validation(format!("unknown filter {other:?}"))),
            }
        }
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        if let Some(s) = self.min_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(CatalogError::Validation(format!("min_score {s} outside [0, 1]")));
            }
        }
        if let Some(r) = &self.region {
            if !r.is_valid() {
                return Err(CatalogError::Validation(format!("region {r:?} has negative size")));
            }
        }
        if let Some(l) = self.limit {
            if l == 0 || l > MAX_LIMIT {
                return Err(CatalogError::Validation(format!("limit must be in 1..={MAX_LIMIT}")));
            }
        }
        if let Some(a) = &self.after {
            Cursor::decode(a)?;
        }
        Ok(())
    }

    /// Filter test, ignoring pagination.
    pub fn matches(&self, r: &FlakeRecord) -> bool {
        if self.chip.as_ref().is_some_and(|c| c != &r.chip_id) {
            return false;
        }
        if self.material.is_some_and(|m| m != r.material) {
            return false;
        }
        if self.thickness.is_some_and(|t| t != r.thickness) {
            return false;
        }
        if self.min_score.is_some_and(|s| r.score < s) {
            return false;
        }
        if let Some(b) = &self.region {
            let c = r.centroid_um;
            if c.x < b.x || c.x > b.right() || c.y < b.y || c.y > b.bottom() {
                return false;
            }
        }
        if let Some(s) = self.status {
            return r.review.status == s;
        }
        self.include_rejected || r.review.status != ReviewStatus::Rejected
    }
}

/// All matching records in sort order, no pagination.
pub fn matching(store: &Store, q: &FlakeQuery) -> Vec<FlakeRecord> {
    let mut hits: Vec<FlakeRecord> = store.read().flakes.values().filter(|r| q.matches(r)).cloned().collect();
    hits.sort_by(|a, b| sort_order(a, b, q.sort));
    hits
}

pub fn query(store: &Store, q: &FlakeQuery) -> Result<Page<FlakeRecord>, CatalogError> {
    q.validate()?;
    let hits = matching(store, q);
    let total = hits.len();
    let start = match &q.after {
        None => 0,
        Some(a) => {
            let c = Cursor::decode(a)?;
            match (&c, q.sort) {
                (Cursor::Position { .. }, SortOrder::Position) | (Cursor::ScoreDesc { .. }, SortOrder::ScoreDesc) => {}
                _ => return Err(CatalogError::Validation("cursor belongs to a different sort order".into())),
            }
            hits.partition_point(|r| Cursor::of(r, q.sort).cmp(&c) != Ordering::Greater)
        }
    };
    let limit = q.limit.unwrap_or(DEFAULT_LIMIT);
    let items: Vec<FlakeRecord> = hits.into_iter().skip(start).take(limit).collect();
    let next = (start + items.len() < total)
        .then(|| items.last().map(|r| Cursor::of(r, q.sort).encode()))
        .flatten();
    Ok(Page { items, total, next })
}
