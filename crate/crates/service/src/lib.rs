//! Session service: hosts tuning sessions behind an HTTP labeling API and
//! persists each one as an append-only event log.

pub mod api;
pub mod error;
pub mod events;
pub mod store;

pub use api::{router, serve};
pub use error::ServiceError;
pub use events::{fold, read_log, Event, LogRecord};
pub use store::{LabelAck, LabelQuery, Phase, SessionHandle, SessionStore, SessionView, StoreConfig};
