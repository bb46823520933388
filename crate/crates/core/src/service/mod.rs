//! HTTP annotation service: a human acts as the oracle for a running
//! active-learning session.

pub mod http;
pub mod render;
pub mod session;

pub use http::{router, serve, AppState, ServerHandle};
pub use render::render_sample;
pub use session::{task_id, AnnotationTask, Session, SessionStatus, SubmitError, TaskStatus};
