//! Single-file relational store for the annotation platform.
//!
//! All writes go through one connection guarded by a mutex, so writes are
//! serialized and each runs inside its own transaction. File-backed stores
//! run in WAL mode and hand out pooled read connections, so reads never wait
//! on other reads.

mod model;
mod schema;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gigaslide_core::heatmap::PatchPrediction;
use gigaslide_core::metrics::{BatchLabels, RegionRecord, SessionRecord};
use parking_lot::Mutex;
use rusqlite::{params, Connection, OptionalExtension, Row, Transaction};
use thiserror::Error;

pub use model::*;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not authorized: {0}")]
    Authorization(String),
    #[error("invalid: {0}")]
    Validation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("database error: {0}")]
    Sql(#[from] rusqlite::Error),
    #[error("corrupt record: {0}")]
    Corrupt(#[from] serde_json::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

pub fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

pub struct Store {
    path: Option<PathBuf>,
    writer: Mutex<Connection>,
    readers: Mutex<Vec<Connection>>,
    classes: Vec<String>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("path", &self.path).field("classes", &self.classes).finish()
    }
}

const ANNOTATION_COLUMNS: &str = "id, batch_name, user_name, slide_name, kind, geometry, label, source, validation, \
     line_color, line_thickness, fill_color, fill_opacity, created_at";

fn annotation_from_row(row: &Row<'_>) -> rusqlite::Result<(Annotation, String)> {
    let geometry: String = row.get(5)?;
    let validation: Option<String> = row.get(8)?;
    let parse_err = |i: usize, e: StoreError| rusqlite::Error::FromSqlConversionFailure(i, rusqlite::types::Type::Text, Box::new(e));
    let kind: String = row.get(4)?;
    let source: String = row.get(7)?;
    Ok((
        Annotation {
            id: row.get(0)?,
            batch_name: row.get(1)?,
            user_name: row.get(2)?,
            slide_name: row.get(3)?,
            kind: kind.parse().map_err(|e| parse_err(4, e))?,
            geometry: Vec::new(),
            label: row.get(6)?,
            source: source.parse().map_err(|e| parse_err(7, e))?,
            validation: validation
                .map(|v| v.parse())
                .transpose()
                .map_err(|e| parse_err(8, e))?,
            style: Style {
                line_color: row.get(9)?,
                line_thickness: row.get(10)?,
                fill_color: row.get(11)?,
                fill_opacity: row.get(12)?,
            },
            created_at: row.get(13)?,
        },
        geometry,
    ))
}

fn finish_annotation((mut a, geometry): (Annotation, String)) -> Result<Annotation> {
    a.geometry = serde_json::from_str(&geometry)?;
    Ok(a)
}

fn new_token() -> String {
    format!("{:032x}", rand::random::<u128>())
}

impl Store {
    /// Opens (creating if needed) a file-backed store.
    pub fn open(path: impl AsRef<Path>, classes: Vec<String>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let conn = Self::connect(&path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.execute_batch(schema::SCHEMA)?;
        Ok(Self {
            path: Some(path),
            writer: Mutex::new(conn),
            readers: Mutex::new(Vec::new()),
            classes,
        })
    }

    pub fn open_in_memory(classes: Vec<String>) -> Result<Self> {
        let conn = Connection::open_in_memory()?;
        conn.execute_batch(schema::SCHEMA)?;
        Ok(Self {
            path: None,
            writer: Mutex::new(conn),
            readers: Mutex::new(Vec::new()),
            classes,
        })
    }

    fn connect(path: &Path) -> Result<Connection> {
        let conn = Connection::open(path)?;
        conn.busy_timeout(std::time::Duration::from_secs(10))?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        Ok(conn)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    fn write<T>(&self, f: impl FnOnce(&Transaction<'_>) -> Result<T>) -> Result<T> {
        let mut conn = self.writer.lock();
        let tx = conn.transaction()?;
        let out = f(&tx)?;
        tx.commit()?;
        Ok(out)
    }

    fn read<T>(&self, f: impl FnOnce(&Connection) -> Result<T>) -> Result<T> {
        let Some(path) = &self.path else {
            return f(&self.writer.lock());
        };
        let pooled = self.readers.lock().pop();
        let conn = match pooled {
            Some(c) => c,
            None => Self::connect(path)?,
        };
        let out = f(&conn);
        self.readers.lock().push(conn);
        out
    }

    // ---- users -------------------------------------------------------------

    pub fn add_user(&self, name: &str, role: Role) -> Result<User> {
        if name.trim().is_empty() {
            return Err(StoreError::Validation("user name must not be empty".into()));
        }
        let user = User {
            name: name.to_string(),
            role,
            token: new_token(),
        };
        self.write(|tx| {
            let exists: bool = tx.query_row("SELECT EXISTS(SELECT 1 FROM users WHERE name = ?1)", [name], |r| r.get(0))?;
            if exists {
                return Err(StoreError::Conflict(format!("user {name} already exists")));
            }
            tx.execute(
                "INSERT INTO users (name, role, token) VALUES (?1, ?2, ?3)",
                params![user.name, user.role.as_str(), user.token],
            )?;
            Ok(())
        })?;
        Ok(user)
    }

    pub fn user(&self, name: &str) -> Result<User> {
        self.read(|c| {
            c.query_row("SELECT name, role, token FROM users WHERE name = ?1", [name], user_from_row)
                .optional()?
                .ok_or_else(|| StoreError::NotFound(format!("user {name}")))?
        })
    }

    pub fn users(&self) -> Result<Vec<User>> {
        self.read(|c| {
            let mut stmt = c.prepare("SELECT name, role, token FROM users ORDER BY name")?;
            let rows = stmt.query_map([], user_from_row)?;
            rows.map(|r| r?).collect()
        })
    }

    pub fn user_by_token(&self, token: &str) -> Result<Option<User>> {
        self.read(|c| {
            c.query_row("SELECT name, role, token FROM users WHERE token = ?1", [token], user_from_row)
                .optional()?
                .transpose()
        })
    }

    // ---- slides ------------------------------------------------------------

    /// Registers a slide; `replace` overwrites an existing row of that name.
    pub fn register_slide(&self, slide: &SlideRecord, replace: bool) -> Result<()> {
        self.write(|tx| {
            let exists = slide_exists(tx, &slide.name)?;
            if exists && !replace {
                return Err(StoreError::Conflict(format!("slide {} already exists", slide.name)));
            }
            tx.execute(
                "INSERT OR REPLACE INTO slides (name, width, height, scale_factor, pyramid_dir, tile_size, overlap, tile_format, patch_grid)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
                params![
                    slide.name,
                    slide.width,
                    slide.height,
                    slide.scale_factor,
                    slide.pyramid_dir,
                    slide.tile_size,
                    slide.overlap,
                    slide.tile_format,
                    slide.patch_grid
                ],
            )?;
            Ok(())
        })
    }

    pub fn slide(&self, name: &str) -> Result<SlideRecord> {
        self.read(|c| {
            c.query_row(
                "SELECT name, width, height, scale_factor, pyramid_dir, tile_size, overlap, tile_format, patch_grid
                 FROM slides WHERE name = ?1",
                [name],
                slide_from_row,
            )
            .optional()?
            .ok_or_else(|| StoreError::NotFound(format!("slide {name}")))
        })
    }

    pub fn slides(&self) -> Result<Vec<SlideRecord>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT name, width, height, scale_factor, pyramid_dir, tile_size, overlap, tile_format, patch_grid
                 FROM slides ORDER BY name",
            )?;
            let rows = stmt.query_map([], slide_from_row)?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    // ---- batches -----------------------------------------------------------

    pub fn create_batch(&self, name: &str, slides: &[String], dense: bool) -> Result<Batch> {
        self.write(|tx| {
            let exists: bool = tx.query_row("SELECT EXISTS(SELECT 1 FROM batches WHERE name = ?1)", [name], |r| r.get(0))?;
            if exists {
                return Err(StoreError::Conflict(format!("batch {name} already exists")));
            }
            for s in slides {
                if !slide_exists(tx, s)? {
                    return Err(StoreError::NotFound(format!("slide {s}")));
                }
            }
            tx.execute("INSERT INTO batches (name, dense) VALUES (?1, ?2)", params![name, dense])?;
            for (i, s) in slides.iter().enumerate() {
                tx.execute(
                    "INSERT INTO batch_slides (batch_name, slide_name, position) VALUES (?1, ?2, ?3)",
                    params![name, s, i as i64],
                )
                .map_err(|e| match e {
                    rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::ConstraintViolation => {
                        StoreError::Validation(format!("slide {s} listed twice"))
                    }
                    other => other.into(),
                })?;
            }
            Ok(())
        })?;
        self.batch(name)
    }

    pub fn assign_users(&self, batch: &str, users: &[String]) -> Result<Batch> {
        self.write(|tx| {
            if !batch_exists(tx, batch)? {
                return Err(StoreError::NotFound(format!("batch {batch}")));
            }
            for u in users {
                let known: bool = tx.query_row("SELECT EXISTS(SELECT 1 FROM users WHERE name = ?1)", [u], |r| r.get(0))?;
                if !known {
                    return Err(StoreError::NotFound(format!("user {u}")));
                }
                tx.execute(
                    "INSERT OR IGNORE INTO batch_users (batch_name, user_name) VALUES (?1, ?2)",
                    params![batch, u],
                )?;
            }
            Ok(())
        })?;
        self.batch(batch)
    }

    pub fn batch(&self, name: &str) -> Result<Batch> {
        self.read(|c| load_batch(c, name))
    }

    pub fn batches(&self) -> Result<Vec<Batch>> {
        self.read(|c| {
            let names: Vec<String> = {
                let mut stmt = c.prepare("SELECT name FROM batches ORDER BY name")?;
                let rows = stmt.query_map([], |r| r.get(0))?;
                rows.collect::<rusqlite::Result<_>>()?
            };
            names.iter().map(|n| load_batch(c, n)).collect()
        })
    }

    pub fn batches_for_slide(&self, slide: &str) -> Result<Vec<Batch>> {
        self.read(|c| {
            let names: Vec<String> = {
                let mut stmt = c.prepare("SELECT batch_name FROM batch_slides WHERE slide_name = ?1 ORDER BY batch_name")?;
                let rows = stmt.query_map([slide], |r| r.get(0))?;
                rows.collect::<rusqlite::Result<_>>()?
            };
            names.iter().map(|n| load_batch(c, n)).collect()
        })
    }

    /// Fails unless `user` is assigned to `batch`.
    pub fn authorize(&self, batch: &str, user: &str) -> Result<()> {
        self.read(|c| authorize(c, batch, user))
    }

    // ---- annotations -------------------------------------------------------

    /// Stores a manual annotation owned by `user`.
    pub fn put_annotation(&self, user: &str, a: &NewAnnotation) -> Result<Annotation> {
        if a.label.trim().is_empty() {
            return Err(StoreError::Validation("label must not be empty".into()));
        }
        let style = a.style.clone().unwrap_or_default();
        style.validate()?;
        let id = self.write(|tx| {
            authorize(tx, &a.batch_name, user)?;
            let (w, h) = slide_in_batch(tx, &a.batch_name, &a.slide_name)?;
            validate_geometry(a.kind, &a.geometry, w, h)?;
            insert_annotation(
                tx,
                &a.batch_name,
                user,
                &a.slide_name,
                a.kind,
                &a.geometry,
                &a.label,
                Source::Manual,
                None,
                &style,
            )
        })?;
        self.annotation(id, user)
    }

    /// Fetches one annotation from `user`'s view.
    pub fn annotation(&self, id: i64, user: &str) -> Result<Annotation> {
        self.read(|c| visible_annotation(c, id, user))
    }

    /// `user`'s manual annotations plus the model proposals in their copy of
    /// the batch, ordered by creation time then id.
    pub fn query_annotations(&self, batch: &str, slide: &str, user: &str) -> Result<Vec<Annotation>> {
        self.read(|c| {
            authorize(c, batch, user)?;
            let mut stmt = c.prepare(&format!(
                "SELECT {ANNOTATION_COLUMNS} FROM annotations
                 WHERE batch_name = ?1 AND slide_name = ?2 AND user_name = ?3
                 ORDER BY created_at, id"
            ))?;
            let rows = stmt.query_map(params![batch, slide, user], annotation_from_row)?;
            rows.map(|r| finish_annotation(r?)).collect()
        })
    }

    /// Deletes one of `user`'s manual annotations. Model proposals are
    /// reviewed, not deleted.
    pub fn delete_annotation(&self, id: i64, user: &str) -> Result<()> {
        self.write(|tx| {
            let a = visible_annotation(tx, id, user)?;
            if a.source == Source::Model {
                return Err(StoreError::Validation(
                    "model proposals cannot be deleted; reject them instead".into(),
                ));
            }
            tx.execute("DELETE FROM annotations WHERE id = ?1", [id])?;
            Ok(())
        })
    }

    pub fn set_validation(&self, id: i64, status: Validation, user: &str) -> Result<Annotation> {
        if status == Validation::Pending {
            return Err(StoreError::Validation("status must be accepted or rejected".into()));
        }
        self.write(|tx| {
            let a = visible_annotation(tx, id, user)?;
            if a.source != Source::Model {
                return Err(StoreError::Validation("not a model proposal".into()));
            }
            tx.execute(
                "UPDATE annotations SET validation = ?1 WHERE id = ?2",
                params![status.as_str(), id],
            )?;
            Ok(())
        })?;
        self.annotation(id, user)
    }

    pub fn set_style(&self, id: i64, style: &Style, user: &str) -> Result<Annotation> {
        style.validate()?;
        self.write(|tx| {
            visible_annotation(tx, id, user)?;
            tx.execute(
                "UPDATE annotations SET line_color = ?1, line_thickness = ?2, fill_color = ?3, fill_opacity = ?4 WHERE id = ?5",
                params![style.line_color, style.line_thickness, style.fill_color, style.fill_opacity, id],
            )?;
            Ok(())
        })?;
        self.annotation(id, user)
    }

    /// Pending proposals left for `user` on one slide of a batch.
    pub fn pending_count(&self, batch: &str, slide: &str, user: &str) -> Result<u64> {
        self.read(|c| {
            Ok(c.query_row(
                "SELECT COUNT(*) FROM annotations
                 WHERE batch_name = ?1 AND slide_name = ?2 AND user_name = ?3
                   AND source = 'model' AND validation = 'pending'",
                params![batch, slide, user],
                |r| r.get::<_, i64>(0),
            )? as u64)
        })
    }

    /// Inserts model proposals for `slide`, one copy per assigned user of
    /// every target batch. Pending proposals already present for those views
    /// are removed in the same transaction. `batch = None` targets every
    /// batch containing the slide. Returns the new ids.
    pub fn replace_model_proposals(
        &self,
        slide: &str,
        batch: Option<&str>,
        polygons: &[Vec<(f64, f64)>],
        label: &str,
    ) -> Result<Vec<i64>> {
        self.write(|tx| {
            let (w, h) = slide_dims(tx, slide)?;
            for p in polygons {
                validate_geometry(Kind::Polygon, p, w, h)?;
            }
            let batches: Vec<String> = match batch {
                Some(b) => {
                    slide_in_batch(tx, b, slide)?;
                    vec![b.to_string()]
                }
                None => {
                    let mut stmt = tx.prepare("SELECT batch_name FROM batch_slides WHERE slide_name = ?1 ORDER BY batch_name")?;
                    let rows = stmt.query_map([slide], |r| r.get(0))?;
                    rows.collect::<rusqlite::Result<_>>()?
                }
            };
            let style = Style {
                line_color: "#ffff00".into(),
                fill_color: "#ffff00".into(),
                fill_opacity: 0.2,
                ..Style::default()
            };
            let mut ids = Vec::new();
            for b in &batches {
                tx.execute(
                    "DELETE FROM annotations WHERE batch_name = ?1 AND slide_name = ?2 AND source = 'model' AND validation = 'pending'",
                    params![b, slide],
                )?;
                let users: Vec<String> = {
                    let mut stmt = tx.prepare("SELECT user_name FROM batch_users WHERE batch_name = ?1 ORDER BY user_name")?;
                    let rows = stmt.query_map([b], |r| r.get(0))?;
                    rows.collect::<rusqlite::Result<_>>()?
                };
                for u in &users {
                    for p in polygons {
                        ids.push(insert_annotation(
                            tx,
                            b,
                            u,
                            slide,
                            Kind::Polygon,
                            p,
                            label,
                            Source::Model,
                            Some(Validation::Pending),
                            &style,
                        )?);
                    }
                }
            }
            Ok(ids)
        })
    }

    /// Region rows for tallies, optionally restricted to one batch.
    pub fn region_records(&self, batch: Option<&str>) -> Result<Vec<RegionRecord>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT user_name, slide_name, source, validation, label FROM annotations
                 WHERE kind = 'polygon' AND (?1 IS NULL OR batch_name = ?1)
                 ORDER BY id",
            )?;
            let rows = stmt.query_map([batch], |r| {
                let source: String = r.get(2)?;
                let validation: Option<String> = r.get(3)?;
                Ok(RegionRecord {
                    user: r.get(0)?,
                    slide: r.get(1)?,
                    from_model: source == "model",
                    accepted: match validation.as_deref() {
                        Some("accepted") if source == "model" => Some(true),
                        Some("rejected") => Some(false),
                        _ => None,
                    },
                    label: r.get(4)?,
                })
            })?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })
    }

    pub fn export_annotations(&self) -> Result<AnnotationExport> {
        let annotations = self.read(|c| {
            let mut stmt = c.prepare(&format!("SELECT {ANNOTATION_COLUMNS} FROM annotations ORDER BY id"))?;
            let rows = stmt.query_map([], annotation_from_row)?;
            rows.map(|r| finish_annotation(r?)).collect::<Result<Vec<_>>>()
        })?;
        Ok(AnnotationExport {
            annotations,
            wsi_labels: self.wsi_labels()?,
        })
    }

    /// Loads an export, keeping ids. Existing rows with the same ids or
    /// (slide, user) label keys are overwritten.
    pub fn import_annotations(&self, doc: &AnnotationExport) -> Result<usize> {
        self.write(|tx| {
            for a in &doc.annotations {
                let geometry = serde_json::to_string(&a.geometry)?;
                tx.execute(
                    &format!("INSERT OR REPLACE INTO annotations ({ANNOTATION_COLUMNS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14)"),
                    params![
                        a.id,
                        a.batch_name,
                        a.user_name,
                        a.slide_name,
                        a.kind.as_str(),
                        geometry,
                        a.label,
                        a.source.as_str(),
                        a.validation.map(|v| v.as_str()),
                        a.style.line_color,
                        a.style.line_thickness,
                        a.style.fill_color,
                        a.style.fill_opacity,
                        a.created_at
                    ],
                )?;
            }
            for l in &doc.wsi_labels {
                upsert_label(tx, l)?;
            }
            Ok(doc.annotations.len())
        })
    }

    // ---- slide-level labels ------------------------------------------------

    pub fn upsert_wsi_label(&self, label: &WsiLabel) -> Result<WsiLabel> {
        if !self.classes.iter().any(|c| c == &label.class_label) {
            return Err(StoreError::Validation(format!(
                "class {:?} is not one of {}",
                label.class_label,
                self.classes.join(", ")
            )));
        }
        if label.certainty > 100 {
            return Err(StoreError::Validation(format!(
                "certainty {} outside 0-100",
                label.certainty
            )));
        }
        self.write(|tx| {
            if !slide_exists(tx, &label.slide_name)? {
                return Err(StoreError::NotFound(format!("slide {}", label.slide_name)));
            }
            let known: bool = tx.query_row(
                "SELECT EXISTS(SELECT 1 FROM users WHERE name = ?1)",
                [&label.user_name],
                |r| r.get(0),
            )?;
            if !known {
                return Err(StoreError::NotFound(format!("user {}", label.user_name)));
            }
            upsert_label(tx, label)
        })?;
        Ok(label.clone())
    }

    pub fn wsi_labels(&self) -> Result<Vec<WsiLabel>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT slide_name, user_name, class_label, certainty, observations FROM wsi_labels ORDER BY slide_name, user_name",
            )?;
            let rows = stmt.query_map([], |r| {
                Ok(WsiLabel {
                    slide_name: r.get(0)?,
                    user_name: r.get(1)?,
                    class_label: r.get(2)?,
                    certainty: r.get(3)?,
                    observations: r.get(4)?,
                })
            })?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })
    }

    /// Ground truth: slide → class from expert users. With several experts
    /// the alphabetically first one wins.
    pub fn expert_labels(&self) -> Result<BTreeMap<String, String>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT l.slide_name, l.class_label FROM wsi_labels l JOIN users u ON u.name = l.user_name
                 WHERE u.role = 'expert' ORDER BY l.slide_name, l.user_name DESC",
            )?;
            let rows = stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?)))?;
            Ok(rows.collect::<rusqlite::Result<BTreeMap<_, _>>>()?)
        })
    }

    /// Annotator labels restricted to the slides and users of `batch`.
    pub fn batch_labels(&self, batch: &str) -> Result<BatchLabels> {
        let b = self.batch(batch)?;
        let mut labels: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for l in self.wsi_labels()? {
            if b.slide_names.contains(&l.slide_name) && b.assigned_users.contains(&l.user_name) {
                labels.entry(l.user_name).or_default().insert(l.slide_name, l.class_label);
            }
        }
        Ok(BatchLabels {
            batch: b.name,
            slides: b.slide_names,
            labels,
        })
    }

    // ---- timing ------------------------------------------------------------

    pub fn record_session(&self, user: &str, slide: &str, batch: &str, opened_at: i64, closed_at: i64) -> Result<TimingSession> {
        if closed_at < opened_at {
            return Err(StoreError::Validation(format!(
                "session closes at {closed_at} before it opens at {opened_at}"
            )));
        }
        let id = self.write(|tx| {
            tx.execute(
                "INSERT INTO sessions (user_name, slide_name, batch_name, opened_at, closed_at) VALUES (?1, ?2, ?3, ?4, ?5)",
                params![user, slide, batch, opened_at, closed_at],
            )?;
            Ok(tx.last_insert_rowid())
        })?;
        Ok(TimingSession {
            id,
            user: user.into(),
            slide: slide.into(),
            batch: batch.into(),
            opened_at,
            closed_at,
        })
    }

    /// Marks a viewing interval as open. A second open for the same
    /// (user, slide, batch) replaces the first.
    pub fn open_session(&self, user: &str, slide: &str, batch: &str, at: i64) -> Result<()> {
        self.write(|tx| {
            authorize(tx, batch, user)?;
            slide_in_batch(tx, batch, slide)?;
            tx.execute(
                "INSERT OR REPLACE INTO session_opens (user_name, slide_name, batch_name, opened_at) VALUES (?1, ?2, ?3, ?4)",
                params![user, slide, batch, at],
            )?;
            Ok(())
        })
    }

    /// Pairs a close event with the pending open and records the session.
    pub fn close_session(&self, user: &str, slide: &str, batch: &str, at: i64) -> Result<TimingSession> {
        self.write(|tx| {
            let opened: Option<i64> = tx
                .query_row(
                    "SELECT opened_at FROM session_opens WHERE user_name = ?1 AND slide_name = ?2 AND batch_name = ?3",
                    params![user, slide, batch],
                    |r| r.get(0),
                )
                .optional()?;
            let opened = opened.ok_or_else(|| StoreError::Conflict("close event without a matching open".into()))?;
            if at < opened {
                return Err(StoreError::Validation(format!("close at {at} precedes open at {opened}")));
            }
            tx.execute(
                "DELETE FROM session_opens WHERE user_name = ?1 AND slide_name = ?2 AND batch_name = ?3",
                params![user, slide, batch],
            )?;
            tx.execute(
                "INSERT INTO sessions (user_name, slide_name, batch_name, opened_at, closed_at) VALUES (?1, ?2, ?3, ?4, ?5)",
                params![user, slide, batch, opened, at],
            )?;
            Ok(TimingSession {
                id: tx.last_insert_rowid(),
                user: user.into(),
                slide: slide.into(),
                batch: batch.into(),
                opened_at: opened,
                closed_at: at,
            })
        })
    }

    pub fn sessions(&self) -> Result<Vec<SessionRecord>> {
        self.read(|c| {
            let mut stmt = c.prepare("SELECT user_name, slide_name, batch_name, opened_at, closed_at FROM sessions ORDER BY id")?;
            let rows = stmt.query_map([], |r| {
                Ok(SessionRecord {
                    user: r.get(0)?,
                    slide: r.get(1)?,
                    batch: r.get(2)?,
                    opened_at: r.get(3)?,
                    closed_at: r.get(4)?,
                })
            })?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })
    }

    // ---- predictions -------------------------------------------------------

    pub fn replace_predictions(&self, slide: &str, predictions: &[PatchPrediction]) -> Result<()> {
        self.write(|tx| {
            if !slide_exists(tx, slide)? {
                return Err(StoreError::NotFound(format!("slide {slide}")));
            }
            tx.execute("DELETE FROM predictions WHERE slide_name = ?1", [slide])?;
            let mut stmt = tx.prepare("INSERT OR REPLACE INTO predictions (slide_name, x, y, prob) VALUES (?1, ?2, ?3, ?4)")?;
            for p in predictions {
                stmt.execute(params![slide, p.x, p.y, p.prob])?;
            }
            Ok(())
        })
    }

    pub fn predictions(&self, slide: &str) -> Result<Vec<PatchPrediction>> {
        self.read(|c| {
            let mut stmt = c.prepare("SELECT x, y, prob FROM predictions WHERE slide_name = ?1 ORDER BY y, x")?;
            let rows = stmt.query_map([slide], |r| {
                Ok(PatchPrediction {
                    slide_name: slide.to_string(),
                    x: r.get(0)?,
                    y: r.get(1)?,
                    prob: r.get(2)?,
                })
            })?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })
    }
}

fn user_from_row(r: &Row<'_>) -> rusqlite::Result<Result<User>> {
    let (name, role, token): (String, String, String) = (r.get(0)?, r.get(1)?, r.get(2)?);
    Ok(role.parse().map(|role| User { name, role, token }))
}

fn slide_from_row(r: &Row<'_>) -> rusqlite::Result<SlideRecord> {
    Ok(SlideRecord {
        name: r.get(0)?,
        width: r.get(1)?,
        height: r.get(2)?,
        scale_factor: r.get(3)?,
        pyramid_dir: r.get(4)?,
        tile_size: r.get(5)?,
        overlap: r.get(6)?,
        tile_format: r.get(7)?,
        patch_grid: r.get(8)?,
    })
}

fn slide_exists(c: &Connection, name: &str) -> Result<bool> {
    Ok(c.query_row("SELECT EXISTS(SELECT 1 FROM slides WHERE name = ?1)", [name], |r| r.get(0))?)
}

fn batch_exists(c: &Connection, name: &str) -> Result<bool> {
    Ok(c.query_row("SELECT EXISTS(SELECT 1 FROM batches WHERE name = ?1)", [name], |r| r.get(0))?)
}

fn slide_dims(c: &Connection, slide: &str) -> Result<(u32, u32)> {
    c.query_row("SELECT width, height FROM slides WHERE name = ?1", [slide], |r| Ok((r.get(0)?, r.get(1)?)))
        .optional()?
        .ok_or_else(|| StoreError::NotFound(format!("slide {slide}")))
}

fn slide_in_batch(c: &Connection, batch: &str, slide: &str) -> Result<(u32, u32)> {
    let member: bool = c.query_row(
        "SELECT EXISTS(SELECT 1 FROM batch_slides WHERE batch_name = ?1 AND slide_name = ?2)",
        params![batch, slide],
        |r| r.get(0),
    )?;
    if !member {
        return Err(StoreError::NotFound(format!("slide {slide} in batch {batch}")));
    }
    slide_dims(c, slide)
}

fn authorize(c: &Connection, batch: &str, user: &str) -> Result<()> {
    if !batch_exists(c, batch)? {
        return Err(StoreError::NotFound(format!("batch {batch}")));
    }
    let assigned: bool = c.query_row(
        "SELECT EXISTS(SELECT 1 FROM batch_users WHERE batch_name = ?1 AND user_name = ?2)",
        params![batch, user],
        |r| r.get(0),
    )?;
    if !assigned {
        return Err(StoreError::Authorization(format!("{user} is not assigned to batch {batch}")));
    }
    Ok(())
}

fn load_batch(c: &Connection, name: &str) -> Result<Batch> {
    let dense: bool = c
        .query_row("SELECT dense FROM batches WHERE name = ?1", [name], |r| r.get(0))
        .optional()?
        .ok_or_else(|| StoreError::NotFound(format!("batch {name}")))?;
    let slide_names = {
        let mut stmt = c.prepare("SELECT slide_name FROM batch_slides WHERE batch_name = ?1 ORDER BY position")?;
        let rows = stmt.query_map([name], |r| r.get(0))?;
        rows.collect::<rusqlite::Result<Vec<String>>>()?
    };
    let assigned_users = {
        let mut stmt = c.prepare("SELECT user_name FROM batch_users WHERE batch_name = ?1 ORDER BY user_name")?;
        let rows = stmt.query_map([name], |r| r.get(0))?;
        rows.collect::<rusqlite::Result<Vec<String>>>()?
    };
    Ok(Batch {
        name: name.to_string(),
        slide_names,
        assigned_users,
        dense,
    })
}

/// An annotation is visible to the user owning that batch-view copy, while
/// they remain assigned to the batch.
fn visible_annotation(c: &Connection, id: i64, user: &str) -> Result<Annotation> {
    let found = c
        .query_row(
            &format!("SELECT {ANNOTATION_COLUMNS} FROM annotations WHERE id = ?1 AND user_name = ?2"),
            params![id, user],
            annotation_from_row,
        )
        .optional()?;
    let a = finish_annotation(found.ok_or_else(|| StoreError::NotFound(format!("annotation {id}")))?)?;
    authorize(c, &a.batch_name, user)?;
    Ok(a)
}

#[allow(clippy::too_many_arguments)]
fn insert_annotation(
    tx: &Connection,
    batch: &str,
    user: &str,
    slide: &str,
    kind: Kind,
    geometry: &[(f64, f64)],
    label: &str,
    source: Source,
    validation: Option<Validation>,
    style: &Style,
) -> Result<i64> {
    let geometry = serde_json::to_string(geometry)?;
    tx.execute(
        "INSERT INTO annotations (batch_name, user_name, slide_name, kind, geometry, label, source, validation,
                                  line_color, line_thickness, fill_color, fill_opacity, created_at)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13)",
        params![
            batch,
            user,
            slide,
            kind.as_str(),
            geometry,
            label,
            source.as_str(),
            validation.map(|v| v.as_str()),
            style.line_color,
            style.line_thickness,
            style.fill_color,
            style.fill_opacity,
            now_ms()
        ],
    )?;
    Ok(tx.last_insert_rowid())
}

fn upsert_label(tx: &Connection, l: &WsiLabel) -> Result<()> {
    tx.execute(
        "INSERT INTO wsi_labels (slide_name, user_name, class_label, certainty, observations) VALUES (?1, ?2, ?3, ?4, ?5)
         ON CONFLICT (slide_name, user_name) DO UPDATE SET class_label = excluded.class_label,
             certainty = excluded.certainty, observations = excluded.observations",
        params![l.slide_name, l.user_name, l.class_label, l.certainty, l.observations],
    )?;
    Ok(())
}
