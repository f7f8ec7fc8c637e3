use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use embryogen_core::raster::GrayImage;
use embryogen_core::turing::{
    aggregate_results, export_annotations, presentation_order, AnnotationFilter, AnnotationRow, EvalPool,
    TuringReport, Verdict, VerdictRecord,
};
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS pools (
    pool_id TEXT PRIMARY KEY,
    body TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS images (
    image_id TEXT PRIMARY KEY,
    pool_id TEXT NOT NULL REFERENCES pools(pool_id),
    width INTEGER NOT NULL,
    height INTEGER NOT NULL,
    png BLOB NOT NULL
);
CREATE TABLE IF NOT EXISTS sessions (
    session_id TEXT PRIMARY KEY,
    rater_id TEXT NOT NULL,
    pool_id TEXT NOT NULL REFERENCES pools(pool_id),
    seed INTEGER NOT NULL,
    cursor INTEGER NOT NULL,
    status TEXT NOT NULL,
    created_ms INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS verdicts (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    session_id TEXT NOT NULL REFERENCES sessions(session_id),
    image_id TEXT NOT NULL,
    rater_id TEXT NOT NULL,
    body TEXT NOT NULL,
    submitted_ms INTEGER NOT NULL,
    UNIQUE (session_id, image_id)
);
CREATE TRIGGER IF NOT EXISTS verdicts_no_update BEFORE UPDATE ON verdicts
BEGIN SELECT RAISE(ABORT, 'verdicts are append-only'); END;
CREATE TRIGGER IF NOT EXISTS verdicts_no_delete BEFORE DELETE ON verdicts
BEGIN SELECT RAISE(ABORT, 'verdicts are append-only'); END;
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Complete,
}

impl SessionStatus {
    fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Active => "active",
            SessionStatus::Complete => "complete",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub rater_id: String,
    pub pool_id: String,
    /// Verdicts submitted so far.
    pub cursor: usize,
    pub total: usize,
    pub status: SessionStatus,
}

/// What `next` hands the rater: an image reference or the end of the pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextImage {
    Image {
        image_id: String,
        url: String,
        /// Zero-based position in the session.
        index: usize,
        total: usize,
    },
    Done {
        total: usize,
    },
}

struct SessionRow {
    info: SessionInfo,
    seed: u64,
}

/// Single-file relational store for pools, sessions and verdicts.
pub struct Store {
    conn: Connection,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn json_err(e: serde_json::Error) -> ServiceError {
    ServiceError::Internal(e.to_string())
}

impl Store {
    pub fn open(path: &Path) -> ServiceResult<Self> {
        Store::init(Connection::open(path)?)
    }

    pub fn open_in_memory() -> ServiceResult<Self> {
        Store::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> ServiceResult<Self> {
        conn.execute_batch("PRAGMA foreign_keys = ON; PRAGMA journal_mode = WAL;")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Store { conn })
    }

    /// Stores a validated pool with one image per item. Re-inserting an
    /// identical pool is a no-op; a different pool under the same id is a
    /// conflict.
    pub fn put_pool(&mut self, pool: &EvalPool, images: &[(String, GrayImage)]) -> ServiceResult<()> {
        pool.validate()?;
        let body = serde_json::to_string(pool).map_err(json_err)?;
        let existing: Option<String> = self
            .conn
            .query_row("SELECT body FROM pools WHERE pool_id = ?1", [&pool.pool_id], |r| r.get(0))
            .optional()?;
        if let Some(old) = existing {
            return if old == body {
                Ok(())
            } else {
                Err(ServiceError::Conflict(format!("pool `{}` already exists with other content", pool.pool_id)))
            };
        }
        for item in &pool.items {
            if !images.iter().any(|(id, _)| id == &item.image_id) {
                return Err(ServiceError::Validation(format!("no image supplied for `{}`", item.image_id)));
            }
        }
        let tx = self.conn.transaction()?;
        tx.execute("INSERT INTO pools (pool_id, body) VALUES (?1, ?2)", params![pool.pool_id, body])?;
        for (id, img) in images {
            if pool.item(id).is_none() {
                continue;
            }
            tx.execute(
                "INSERT INTO images (image_id, pool_id, width, height, png) VALUES (?1, ?2, ?3, ?4, ?5)",
                params![id, pool.pool_id, img.width() as i64, img.height() as i64, img.to_png_bytes()],
            )?;
        }
        tx.commit()?;
        Ok(())
    }

    /// Loads a pool and re-checks its composition against its quota.
    pub fn pool(&self, pool_id: &str) -> ServiceResult<EvalPool> {
        let body: Option<String> = self
            .conn
            .query_row("SELECT body FROM pools WHERE pool_id = ?1", [pool_id], |r| r.get(0))
            .optional()?;
        let body = body.ok_or_else(|| ServiceError::NotFound(format!("pool `{pool_id}`")))?;
        let pool: EvalPool = serde_json::from_str(&body).map_err(json_err)?;
        pool.validate()?;
        Ok(pool)
    }

    pub fn pool_ids(&self) -> ServiceResult<Vec<String>> {
        let mut stmt = self.conn.prepare("SELECT pool_id FROM pools ORDER BY pool_id")?;
        let ids = stmt.query_map([], |r| r.get(0))?.collect::<Result<Vec<String>, _>>()?;
        Ok(ids)
    }

    pub fn create_session(&mut self, rater_id: &str, pool_id: &str, seed: Option<u64>) -> ServiceResult<SessionInfo> {
        if rater_id.trim().is_empty() {
            return Err(ServiceError::Validation("rater_id must not be empty".into()));
        }
        let pool = self.pool(pool_id)?;
        let seed = seed.unwrap_or_else(rand::random);
        let session_id = format!("sess-{:032x}", rand::random::<u128>());
        self.conn.execute(
            "INSERT INTO sessions (session_id, rater_id, pool_id, seed, cursor, status, created_ms)
             VALUES (?1, ?2, ?3, ?4, 0, 'active', ?5)",
            params![session_id, rater_id, pool_id, seed as i64, now_ms() as i64],
        )?;
        Ok(SessionInfo {
            session_id,
            rater_id: rater_id.into(),
            pool_id: pool_id.into(),
            cursor: 0,
            total: pool.len(),
            status: SessionStatus::Active,
        })
    }

    fn session_row(&self, session_id: &str) -> ServiceResult<SessionRow> {
        let row = self
            .conn
            .query_row(
                "SELECT rater_id, pool_id, seed, cursor, status FROM sessions WHERE session_id = ?1",
                [session_id],
                |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, String>(1)?,
                        r.get::<_, i64>(2)?,
                        r.get::<_, i64>(3)?,
                        r.get::<_, String>(4)?,
                    ))
                },
            )
            .optional()?;
        let (rater_id, pool_id, seed, cursor, status) =
            row.ok_or_else(|| ServiceError::NotFound(format!("session `{session_id}`")))?;
        let total: i64 = self.conn.query_row(
            "SELECT COUNT(*) FROM images WHERE pool_id = ?1",
            [&pool_id],
            |r| r.get(0),
        )?;
        Ok(SessionRow {
            info: SessionInfo {
                session_id: session_id.into(),
                rater_id,
                pool_id,
                cursor: cursor as usize,
                total: total as usize,
                status: if status == "complete" { SessionStatus::Complete } else { SessionStatus::Active },
            },
            seed: seed as u64,
        })
    }

    pub fn session(&self, session_id: &str) -> ServiceResult<SessionInfo> {
        Ok(self.session_row(session_id)?.info)
    }

    fn current_image(&self, row: &SessionRow) -> ServiceResult<Option<String>> {
        let pool = self.pool(&row.info.pool_id)?;
        let order = presentation_order(pool.len(), row.seed);
        Ok(order.get(row.info.cursor).map(|&i| pool.items[i].image_id.clone()))
    }

    fn set_status(&self, session_id: &str, status: SessionStatus) -> ServiceResult<()> {
        self.conn.execute(
            "UPDATE sessions SET status = ?1 WHERE session_id = ?2",
            params![status.as_str(), session_id],
        )?;
        Ok(())
    }

    /// The image at the session cursor; repeated calls return the same image
    /// until a verdict is submitted.
    pub fn next_image(&mut self, session_id: &str) -> ServiceResult<NextImage> {
        let row = self.session_row(session_id)?;
        match self.current_image(&row)? {
            Some(image_id) if row.info.status == SessionStatus::Active => Ok(NextImage::Image {
                url: format!("/images/{image_id}"),
                image_id,
                index: row.info.cursor,
                total: row.info.total,
            }),
            _ => {
                if row.info.status != SessionStatus::Complete {
                    self.set_status(session_id, SessionStatus::Complete)?;
                }
                Ok(NextImage::Done { total: row.info.total })
            }
        }
    }

    /// Persists a verdict for the image at the cursor and advances it, in one
    /// transaction.
    pub fn submit_verdict(&mut self, session_id: &str, verdict: &Verdict) -> ServiceResult<SessionInfo> {
        let row = self.session_row(session_id)?;
        let exists: bool = self.conn.query_row(
            "SELECT EXISTS (SELECT 1 FROM verdicts WHERE session_id = ?1 AND image_id = ?2)",
            params![session_id, verdict.image_id],
            |r| r.get(0),
        )?;
        if exists {
            return Err(ServiceError::Conflict(format!(
                "a verdict for `{}` was already recorded in this session",
                verdict.image_id
            )));
        }
        let current = match (row.info.status, self.current_image(&row)?) {
            (SessionStatus::Active, Some(id)) => id,
            _ => return Err(ServiceError::Conflict("session is complete".into())),
        };
        if current != verdict.image_id {
            return Err(ServiceError::Validation(format!(
                "`{}` is not the image currently presented",
                verdict.image_id
            )));
        }
        let (w, h): (i64, i64) = self.conn.query_row(
            "SELECT width, height FROM images WHERE image_id = ?1",
            [&verdict.image_id],
            |r| Ok((r.get(0)?, r.get(1)?)),
        )?;
        for region in &verdict.regions {
            region.validate(w as usize, h as usize)?;
        }
        let body = serde_json::to_string(verdict).map_err(json_err)?;
        let cursor = row.info.cursor + 1;
        let status = if cursor >= row.info.total { SessionStatus::Complete } else { SessionStatus::Active };
        let tx = self.conn.transaction()?;
        tx.execute(
            "INSERT INTO verdicts (session_id, image_id, rater_id, body, submitted_ms) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![session_id, verdict.image_id, row.info.rater_id, body, now_ms() as i64],
        )?;
        tx.execute(
            "UPDATE sessions SET cursor = ?1, status = ?2 WHERE session_id = ?3",
            params![cursor as i64, status.as_str(), session_id],
        )?;
        tx.commit()?;
        Ok(SessionInfo {
            cursor,
            status,
            ..row.info
        })
    }

    /// Stored verdicts in submission order, optionally for one pool only.
    pub fn verdicts(&self, pool_id: Option<&str>) -> ServiceResult<Vec<VerdictRecord>> {
        let mut stmt = self.conn.prepare(
            "SELECT v.session_id, v.rater_id, v.body, v.submitted_ms
             FROM verdicts v JOIN sessions s ON s.session_id = v.session_id
             WHERE ?1 IS NULL OR s.pool_id = ?1
             ORDER BY v.seq",
        )?;
        let rows = stmt
            .query_map([pool_id], |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, String>(2)?,
                    r.get::<_, i64>(3)?,
                ))
            })?
            .collect::<Result<Vec<_>, _>>()?;
        rows.into_iter()
            .map(|(session_id, rater_id, body, ms)| {
                Ok(VerdictRecord {
                    session_id,
                    rater_id,
                    verdict: serde_json::from_str(&body).map_err(json_err)?,
                    submitted_at_ms: ms as u64,
                })
            })
            .collect()
    }

    pub fn report(&self, pool_id: &str) -> ServiceResult<TuringReport> {
        let pool = self.pool(pool_id)?;
        Ok(aggregate_results(&self.verdicts(Some(pool_id))?, &pool)?)
    }

    pub fn annotations(&self, filter: &AnnotationFilter) -> ServiceResult<Vec<AnnotationRow>> {
        let mut out = Vec::new();
        for pool_id in self.pool_ids()? {
            let pool = self.pool(&pool_id)?;
            out.extend(export_annotations(&self.verdicts(Some(&pool_id))?, &pool, filter)?);
        }
        Ok(out)
    }

    pub fn image_png(&self, image_id: &str) -> ServiceResult<Vec<u8>> {
        self.conn
            .query_row("SELECT png FROM images WHERE image_id = ?1", [image_id], |r| r.get(0))
            .optional()?
            .ok_or_else(|| ServiceError::NotFound(format!("image `{image_id}`")))
    }
}
