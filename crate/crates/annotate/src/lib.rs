//! Annotation service: fluency grading by two annotators with consensus
//! export, and blind Likert rating of captions from several systems.

pub mod error;
pub mod eval;
pub mod grading;
pub mod http;
pub mod store;

pub use error::{ServiceError, ServiceResult};
pub use store::{Service, ServiceConfig};
