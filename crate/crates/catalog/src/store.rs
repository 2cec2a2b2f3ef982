//! On-disk catalog: an append-only JSON-lines log replayed into memory on
//! open, a content-addressed thumbnail directory and stored ground truth.
//!
//! Layout of the catalog directory:
//!
//! ```text
//! catalog.wal        one JSON entry per line, fsynced per append
//! thumbs/<sha>.png   thumbnails keyed by the SHA-256 of their bytes
//! gt/<chip>.json     ground truth as a COCO file
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use flakescan_dataset::{parse_coco, serialize_coco, DatasetIndex};
use flakescan_scanner::{
    flake_id, ResumePoint, ScanReport, ScanSink, ScanStart, ScanStatus, TileCommit, TileState,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CatalogError;
use crate::record::{
    now, ChipInfo, FlakeRecord, PlanSummary, ReviewEvent, ReviewRequest, ReviewStatus, ScanCursor, ScanRecord,
    ThumbnailRef,
};

const WAL_FILE: &str = "catalog.wal";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum WalEntry {
    Chip {
        chip: ChipInfo,
    },
    Upsert {
        record: Box<FlakeRecord>,
    },
    Retract {
        id: String,
    },
    Review {
        record: Box<FlakeRecord>,
    },
    ScanBegin {
        scan: Box<ScanRecord>,
    },
    /// Everything one scanned tile changed, applied as a unit.
    Tile {
        scan_id: String,
        tile_index: usize,
        tile_id: String,
        state: TileState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        added: Vec<FlakeRecord>,
        retracted: Vec<String>,
        cursor: ScanCursor,
    },
    ScanStatus {
        scan_id: String,
        status: ScanStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        report: Option<Box<ScanReport>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

#[derive(Debug, Default)]
pub(crate) struct State {
    pub chips: BTreeMap<String, ChipInfo>,
    pub flakes: BTreeMap<String, FlakeRecord>,
    pub scans: BTreeMap<String, ScanRecord>,
}

impl State {
    fn apply(&mut self, e: WalEntry) {
        match e {
            WalEntry::Chip { chip } => {
                self.chips.insert(chip.chip_id.clone(), chip);
            }
            WalEntry::Upsert { record } | WalEntry::Review { record } => {
                self.flakes.insert(record.id.clone(), *record);
            }
            WalEntry::Retract { id } => {
                self.flakes.remove(&id);
            }
            WalEntry::ScanBegin { scan } => {
                self.scans.insert(scan.scan_id.clone(), *scan);
            }
            WalEntry::Tile {
                scan_id,
                added,
                retracted,
                cursor,
                ..
            } => {
                for id in retracted {
                    self.flakes.remove(&id);
                }
                for r in added {
                    self.flakes.insert(r.id.clone(), r);
                }
                if let Some(s) = self.scans.get_mut(&scan_id) {
                    s.cursor = cursor;
                }
            }
            WalEntry::ScanStatus {
                scan_id,
                status,
                report,
                error,
            } => {
                if let Some(s) = self.scans.get_mut(&scan_id) {
                    s.status = status;
                    if report.is_some() {
                        s.report = report.map(|r| *r);
                    }
                    s.error = error;
                }
            }
        }
    }

    /// `incoming` merged into whatever is stored under its id: detection
    /// fields follow the new observation, review state is kept.
    fn merged(&self, mut incoming: FlakeRecord) -> FlakeRecord {
        if let Some(old) = self.flakes.get(&incoming.id) {
            incoming.created_at = old.created_at.clone();
            incoming.review = old.review.clone();
            incoming.history = old.history.clone();
            incoming.thickness = old.thickness;
            if incoming.thumbnail.is_none() {
                incoming.thumbnail = old.thumbnail.clone();
            }
        }
        incoming
    }
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    wal: Mutex<File>,
    state: RwLock<State>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write via a temporary file and rename so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CatalogError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| CatalogError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CatalogError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CatalogError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CatalogError::io(path, e))
}

fn valid_chip_id(chip: &str) -> Result<(), CatalogError> {
    let ok = !chip.is_empty()
        && chip
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !chip.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(CatalogError::Validation(format!(
            "chip id {chip:?} must be nonempty and use only letters, digits, '-', '_' and '.'"
        )))
    }
}

impl Store {
    /// Open or create the catalog in `dir`. A final log line cut short by a
    /// crash is discarded; damage anywhere else is an error.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, CatalogError> {
        let dir = dir.as_ref().to_path_buf();
        for d in [dir.clone(), dir.join("thumbs"), dir.join("gt")] {
            std::fs::create_dir_all(&d).map_err(|e| CatalogError::io(&d, e))?;
        }
        let path = dir.join(WAL_FILE);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| CatalogError::io(&path, e))?;

        let mut state = State::default();
        let mut reader = BufReader::new(&file);
        let mut offset = 0u64;
        let mut line_no = 0usize;
        let mut buf = Vec::new();
        let mut truncate_at = None;
        loop {
            buf.clear();
            let n = reader.read_until(b'\n', &mut buf).map_err(|e| CatalogError::io(&path, e))?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let complete = buf.last() == Some(&b'\n');
            let text = String::from_utf8_lossy(&buf);
            let text = text.trim();
            if text.is_empty() {
                offset += n as u64;
                continue;
            }
            if !complete {
                // Never acknowledged: the append was cut short before its fsync.
                log::warn!("{}: dropping incomplete final entry at line {line_no}", path.display());
                truncate_at = Some(offset);
                break;
            }
            let entry = serde_json::from_str::<WalEntry>(text).map_err(|e| CatalogError::Corrupt {
                line: line_no,
                message: e.to_string(),
            })?;
            state.apply(entry);
            offset += n as u64;
        }
        drop(reader);
        if let Some(len) = truncate_at {
            file.set_len(len).map_err(|e| CatalogError::io(&path, e))?;
            file.sync_all().map_err(|e| CatalogError::io(&path, e))?;
        }
        file.seek(SeekFrom::End(0)).map_err(|e| CatalogError::io(&path, e))?;
        Ok(Self {
            dir,
            wal: Mutex::new(file),
            state: RwLock::new(state),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub(crate) fn read(&self) -> RwLockReadGuard<'_, State> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    /// Serialized write: `f` inspects the state and returns the entries to
    /// log, which are appended, synced and then applied.
    fn write<T>(&self, f: impl FnOnce(&State) -> Result<(Vec<WalEntry>, T), CatalogError>) -> Result<T, CatalogError> {
        let mut wal = self.wal.lock().unwrap_or_else(|e| e.into_inner());
        let (entries, out) = f(&self.read())?;
        if entries.is_empty() {
            return Ok(out);
        }
        let mut bytes = Vec::new();
        for e in &entries {
            serde_json::to_writer(&mut bytes, e).expect("entries serialize");
            bytes.push(b'\n');
        }
        let path = self.dir.join(WAL_FILE);
        wal.write_all(&bytes).map_err(|e| CatalogError::io(&path, e))?;
        wal.sync_data().map_err(|e| CatalogError::io(&path, e))?;
        let mut state = self.state.write().unwrap_or_else(|e| e.into_inner());
        for e in entries {
            state.apply(e);
        }
        Ok(out)
    }

    pub fn register_chip(&self, chip: ChipInfo) -> Result<(), CatalogError> {
        valid_chip_id(&chip.chip_id)?;
        let [w, h] = chip.extent_um;
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(CatalogError::Validation(format!("chip extent {:?} must be positive", chip.extent_um)));
        }
        self.write(|s| match s.chips.get(&chip.chip_id) {
            Some(old) if old == &chip => Ok((vec![], ())),
            Some(old) => Err(CatalogError::Validation(format!(
                "chip {} already registered with extent {:?}",
                old.chip_id, old.extent_um
            ))),
            None => Ok((vec![WalEntry::Chip { chip }], ())),
        })
    }

    pub fn chip(&self, chip_id: &str) -> Option<ChipInfo> {
        self.read().chips.get(chip_id).cloned()
    }

    pub fn chips(&self) -> Vec<ChipInfo> {
        self.read().chips.values().cloned().collect()
    }

    fn check_record(s: &State, r: &FlakeRecord) -> Result<(), CatalogError> {
        let chip = s
            .chips
            .get(&r.chip_id)
            .ok_or_else(|| CatalogError::UnknownChip(r.chip_id.clone()))?;
        let expected = flake_id(&r.chip_id, &r.source_tile, &r.polygon_px);
        if r.id != expected {
            return Err(CatalogError::Validation(format!(
                "id {} does not match the record's chip, tile and outline (expected {expected})",
                r.id
            )));
        }
        r.validate(chip)
    }

    /// Insert or refresh a flake. Re-inserting the same detection changes
    /// nothing; review state survives refreshes.
    pub fn upsert_flake(&self, record: FlakeRecord) -> Result<String, CatalogError> {
        self.write(|s| {
            Self::check_record(s, &record)?;
            let merged = s.merged(record);
            let id = merged.id.clone();
            let unchanged = s
                .flakes
                .get(&id)
                .is_some_and(|old| old.without_timestamps() == merged.without_timestamps());
            let entries = if unchanged {
                vec![]
            } else {
                vec![WalEntry::Upsert {
                    record: Box::new(merged),
                }]
            };
            Ok((entries, id))
        })
    }

    pub fn remove_flake(&self, id: &str) -> Result<(), CatalogError> {
        self.write(|s| {
            if !s.flakes.contains_key(id) {
                return Err(CatalogError::NotFound(id.to_string()));
            }
            Ok((vec![WalEntry::Retract { id: id.to_string() }], ()))
        })
    }

    pub fn get(&self, id: &str) -> Result<FlakeRecord, CatalogError> {
        self.read()
            .flakes
            .get(id)
            .cloned()
            .ok_or_else(|| CatalogError::NotFound(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.read().flakes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All records, ordered by id.
    pub fn all_flakes(&self) -> Vec<FlakeRecord> {
        self.read().flakes.values().cloned().collect()
    }

    pub fn review(&self, id: &str, req: &ReviewRequest) -> Result<FlakeRecord, CatalogError> {
        let corrected = match (req.verdict, &req.thickness) {
            (ReviewStatus::Relabeled, Some(t)) => Some(t.parse()?),
            (ReviewStatus::Relabeled, None) => {
                return Err(CatalogError::Validation("relabeled needs a corrected thickness".into()))
            }
            (ReviewStatus::Unreviewed, _) => {
                return Err(CatalogError::Validation("unreviewed is not a verdict".into()))
            }
            (_, Some(_)) => {
                return Err(CatalogError::Validation(format!(
                    "a thickness is only accepted with the relabeled verdict, not {}",
                    req.verdict
                )))
            }
            (_, None) => None,
        };
        self.write(|s| {
            let old = s.flakes.get(id).ok_or_else(|| CatalogError::NotFound(id.to_string()))?;
            if let Some(expected) = req.expected_status {
                if expected != old.review.status {
                    return Err(CatalogError::Conflict {
                        id: id.to_string(),
                        expected: expected.to_string(),
                        found: old.review.status.to_string(),
                    });
                }
            }
            let mut r = old.clone();
            if let Some(t) = corrected {
                r.thickness = t;
                r.review.corrected_thickness = Some(t);
            }
            r.review.status = req.verdict;
            r.review.note = req.note.clone();
            r.history.push(ReviewEvent {
                status: req.verdict,
                thickness: r.thickness,
                note: req.note.clone(),
                reviewer: req.reviewer.clone(),
                at: now(),
            });
            Ok((vec![WalEntry::Review { record: Box::new(r.clone()) }], r))
        })
    }

    /// Store a thumbnail; returns its SHA-256.
    pub fn put_thumbnail(&self, png: &[u8]) -> Result<String, CatalogError> {
        let sha = sha_hex(png);
        let path = self.dir.join("thumbs").join(format!("{sha}.png"));
        if !path.exists() {
            write_atomic(&path, png)?;
        }
        Ok(sha)
    }

    pub fn thumbnail(&self, sha: &str) -> Result<Vec<u8>, CatalogError> {
        if sha.len() != 64 || !sha.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(CatalogError::Validation(format!("bad thumbnail hash {sha:?}")));
        }
        let path = self.dir.join("thumbs").join(format!("{sha}.png"));
        std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CatalogError::NotFound(format!("thumbnail {sha}")),
            _ => CatalogError::io(&path, e),
        })
    }

    pub fn flake_thumbnail(&self, id: &str) -> Result<Vec<u8>, CatalogError> {
        let r = self.get(id)?;
        let t = r
            .thumbnail
            .ok_or_else(|| CatalogError::NotFound(format!("thumbnail of {id}")))?;
        self.thumbnail(&t.sha256)
    }

    fn gt_path(&self, chip: &str) -> Result<PathBuf, CatalogError> {
        valid_chip_id(chip)?;
        Ok(self.dir.join("gt").join(format!("{chip}.json")))
    }

    /// Keep ground truth for `chip`, replacing any earlier upload.
    pub fn put_ground_truth(&self, chip: &str, gt: &DatasetIndex) -> Result<(), CatalogError> {
        if let Some(other) = &gt.chip_id {
            if other != chip {
                return Err(CatalogError::ChipMismatch {
                    catalog: chip.to_string(),
                    ground_truth: other.clone(),
                });
            }
        }
        let mut gt = gt.clone();
        gt.chip_id = Some(chip.to_string());
        let bytes = serialize_coco(&gt)?;
        write_atomic(&self.gt_path(chip)?, &bytes)
    }

    pub fn ground_truth(&self, chip: &str) -> Result<DatasetIndex, CatalogError> {
        let path = self.gt_path(chip)?;
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CatalogError::NoGroundTruth(chip.to_string()),
            _ => CatalogError::io(&path, e),
        })?;
        Ok(parse_coco(&bytes)?.index)
    }

    pub fn scan(&self, scan_id: &str) -> Result<ScanRecord, CatalogError> {
        self.read()
            .scans
            .get(scan_id)
            .cloned()
            .ok_or_else(|| CatalogError::ScanNotFound(scan_id.to_string()))
    }

    pub fn scans(&self) -> Vec<ScanRecord> {
        self.read().scans.values().cloned().collect()
    }

    /// Records found by `scan_id`, ordered by id.
    pub fn scan_flakes(&self, scan_id: &str) -> Vec<FlakeRecord> {
        self.read()
            .flakes
            .values()
            .filter(|r| r.scan_id.as_deref() == Some(scan_id))
            .cloned()
            .collect()
    }

    /// Register a scan, or pick up an unfinished one with the same id.
    pub fn begin_scan(&self, start: &ScanStart<'_>) -> Result<ScanRecord, CatalogError> {
        self.register_chip(ChipInfo {
            chip_id: start.chip_id.to_string(),
            extent_um: start.chip_extent_um,
        })?;
        let plan = PlanSummary::from(start.plan);
        self.write(|s| {
            if let Some(old) = s.scans.get(start.scan_id) {
                if old.chip_id != start.chip_id || old.plan != plan {
                    return Err(CatalogError::ScanState {
                        scan_id: start.scan_id.to_string(),
                        message: "exists with a different chip or plan".into(),
                    });
                }
                if old.status == ScanStatus::Done {
                    return Err(CatalogError::ScanState {
                        scan_id: start.scan_id.to_string(),
                        message: "already completed".into(),
                    });
                }
                let mut rec = old.clone();
                let mut entries = vec![];
                if old.status != ScanStatus::Running {
                    rec.status = ScanStatus::Running;
                    rec.error = None;
                    entries.push(WalEntry::ScanStatus {
                        scan_id: rec.scan_id.clone(),
                        status: ScanStatus::Running,
                        report: None,
                        error: None,
                    });
                }
                return Ok((entries, rec));
            }
            let rec = ScanRecord {
                scan_id: start.scan_id.to_string(),
                chip_id: start.chip_id.to_string(),
                plan: plan.clone(),
                config: start.config.clone(),
                status: ScanStatus::Running,
                cursor: ScanCursor::default(),
                report: None,
                progress: None,
                error: None,
                created_at: now(),
            };
            Ok((
                vec![WalEntry::ScanBegin {
                    scan: Box::new(rec.clone()),
                }],
                rec,
            ))
        })
    }

    /// Persist one tile's results atomically: thumbnails first, then a single
    /// log entry carrying the added and retracted flakes and the new cursor.
    pub fn commit_tile(&self, c: &TileCommit) -> Result<(), CatalogError> {
        let mut thumbs = HashMap::new();
        for t in &c.thumbnails {
            let sha = self.put_thumbnail(&t.png)?;
            thumbs.insert(
                t.flake_id.clone(),
                ThumbnailRef {
                    sha256: sha,
                    origin_px: t.origin_px,
                },
            );
        }
        self.write(|s| {
            let scan = s
                .scans
                .get(&c.scan_id)
                .ok_or_else(|| CatalogError::ScanNotFound(c.scan_id.clone()))?;
            if c.tile_index < scan.cursor.next_tile {
                // Already recorded before a restart.
                return Ok((vec![], ()));
            }
            let mut added = Vec::with_capacity(c.added.len());
            for f in &c.added {
                let r = FlakeRecord::from_observed(f, Some(&c.scan_id), thumbs.get(&f.id).cloned());
                Self::check_record(s, &r)?;
                added.push(s.merged(r));
            }
            let mut cursor = scan.cursor.clone();
            cursor.next_tile = c.tile_index + 1;
            match c.state {
                TileState::Recorded => cursor.completed += 1,
                TileState::Failed => cursor.failed_tiles.push(c.tile_id.clone()),
                _ => {}
            }
            cursor.sim_clock_ms = c.sim_clock_ms;
            cursor.sequential_ms += c.times.total();
            Ok((
                vec![WalEntry::Tile {
                    scan_id: c.scan_id.clone(),
                    tile_index: c.tile_index,
                    tile_id: c.tile_id.clone(),
                    state: c.state,
                    error: c.error.clone(),
                    added,
                    retracted: c.retracted.clone(),
                    cursor,
                }],
                (),
            ))
        })
    }

    pub fn set_scan_status(
        &self,
        scan_id: &str,
        status: ScanStatus,
        report: Option<&ScanReport>,
        error: Option<String>,
    ) -> Result<(), CatalogError> {
        self.write(|s| {
            let scan = s
                .scans
                .get(scan_id)
                .ok_or_else(|| CatalogError::ScanNotFound(scan_id.to_string()))?;
            if scan.status != status && !scan.status.can_become(status) {
                return Err(CatalogError::ScanState {
                    scan_id: scan_id.to_string(),
                    message: format!("cannot go from {:?} to {:?}", scan.status, status),
                });
            }
            Ok((
                vec![WalEntry::ScanStatus {
                    scan_id: scan_id.to_string(),
                    status,
                    report: report.cloned().map(Box::new),
                    error,
                }],
                (),
            ))
        })
    }

    /// Where an interrupted scan continues, or `None` if it has not recorded
    /// any tile yet.
    pub fn resume_point(&self, scan_id: &str, tile_index: &HashMap<String, usize>) -> Result<Option<ResumePoint>, CatalogError> {
        let scan = self.scan(scan_id)?;
        if scan.cursor.next_tile == 0 {
            return Ok(None);
        }
        let kept = self
            .scan_flakes(scan_id)
            .iter()
            .map(|r| r.to_observed(tile_index.get(&r.source_tile).copied().unwrap_or(0)))
            .collect();
        Ok(Some(ResumePoint {
            next_tile: scan.cursor.next_tile,
            kept,
            completed: scan.cursor.completed,
            failed_tiles: scan.cursor.failed_tiles.clone(),
            sim_clock_ms: scan.cursor.sim_clock_ms,
            sequential_ms: scan.cursor.sequential_ms,
        }))
    }
}

/// Scan results go straight into the catalog, one log entry per tile.
#[derive(Debug, Clone)]
pub struct StoreSink {
    store: Arc<Store>,
    scan_id: Option<String>,
}

impl StoreSink {
    pub fn new(store: Arc<Store>) -> Self {
        Self { store, scan_id: None }
    }
}

impl ScanSink for StoreSink {
    fn begin(&mut self, start: &ScanStart<'_>) -> Result<Option<ResumePoint>, String> {
        self.store.begin_scan(start).map_err(|e| e.to_string())?;
        self.scan_id = Some(start.scan_id.to_string());
        let index: HashMap<String, usize> = start.plan.tiles.iter().map(|t| (t.id.clone(), t.index)).collect();
        self.store
            .resume_point(start.scan_id, &index)
            .map_err(|e| e.to_string())
    }

    fn commit(&mut self, commit: &TileCommit) -> Result<(), String> {
        self.store.commit_tile(commit).map_err(|e| e.to_string())
    }

    fn finish(&mut self, report: &ScanReport, status: ScanStatus) -> Result<(), String> {
        let id = self.scan_id.as_deref().unwrap_or(&report.scan_id);
        let error = report.aborted.then(|| "aborted".to_string());
        self.store
            .set_scan_status(id, status, Some(report), error)
            .map_err(|e| e.to_string())
    }
}
