//! Per-session optimization: the growing classifier head, the session-local
//! loss, learning-rate schedule and sensitivity diagnostics.

pub mod head;
pub mod loss;
pub mod optim;
pub mod session;

pub use head::{accuracy, argmax, head_logits, CosineHead, HeadKind};
pub use loss::{cosine_margin_loss, kd_feature_loss, session_loss, LossConfig};
pub use optim::{Schedule, Sgd};
pub use session::{fit_rows, linear_probe, parameter_sensitivity, train_head_session, train_session, SensitivityReport, SessionReport, TrainOptions};
