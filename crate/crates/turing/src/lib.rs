//! Evaluation service: raters fetch one image at a time from a stored pool,
//! judge it real or fake, optionally mark rectangles and comment. Verdicts
//! are appended to a single-file SQLite store and scored on demand.
//!
//! | Method | Path | Result |
//! |---|---|---|
//! | `POST` | `/sessions` | `201` session, body `{rater_id, pool_id, seed?}` |
//! | `GET` | `/sessions/{id}` | session progress |
//! | `GET` | `/sessions/{id}/next` | `{status: "image", image_id, url, index, total}` or `{status: "done", total}` |
//! | `POST` | `/sessions/{id}/verdicts` | `201`, `409` on a repeat, `400` on invalid regions |
//! | `GET` | `/reports/turing?pool=` | aggregated report |
//! | `GET` | `/reports/annotations?source=&rater=&stage=` | region and comment dump |
//! | `GET` | `/images/{id}` | PNG |

mod api;
mod error;
mod store;

pub use api::{router, serve, AppState};
pub use error::{ServiceError, ServiceResult};
pub use store::{NextImage, SessionInfo, SessionStatus, Store};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/turing.md")]
struct Guide;
