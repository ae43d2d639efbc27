//! Class prototypes and covariances, and estimators of how old prototypes
//! move when the feature extractor is updated without access to old data.

pub mod shift;
pub mod store;

pub use shift::{
    estimate_shift_knearest, estimate_shift_prototype, estimate_shift_sample, median_pairwise_distance,
    oracle_true_shift, true_shift, ShiftReport,
};
pub use store::{class_statistics, compute_prototypes, ClassStats, CovarianceKind, PrototypeStore};
