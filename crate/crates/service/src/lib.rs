//! HTTP demo: a caption goes through every saved checkpoint in epoch order and
//! comes back as a sequence of PNG frames plus a log.

pub mod checkpoints;
pub mod error;
pub mod generate;
pub mod routes;

pub use checkpoints::{list_checkpoints, CheckpointInfo, ModelCache};
pub use error::ServiceError;
pub use generate::{load_templates, Frame, GenerateRequest, GenerateResponse, Service, ServiceConfig, MAX_TEXT_CHARS};
pub use routes::{health, router, serve, Health};
