//! SCADA ingestion and preprocessing: invalid-record elimination, balancing,
//! feature engineering, normalization and experiment splits.

mod features;
mod processed;
mod raw;
mod scaler;
mod split;

pub use features::{
    engineer_features, feature_index, Engineered, FeatureVector, DENOM_EPS, FEATURE_COUNT,
    FEATURE_NAMES,
};
pub use processed::{load_processed, read_processed, save_processed, write_processed};
pub use raw::{
    eliminate_invalid, fill_trailing_direction_mean, ingest_scada, read_scada, save_scada,
    write_scada, ColumnSpec, Label, Manifest, RawVar, ScadaRecord, RAW_COUNT,
};
pub use scaler::{Scaler, Y_MAX, Y_MIN};
pub use split::{
    balance, features_of, icing_flags, split_experiment, DatasetSplit, Sample, Scenario,
    SplitConfig, DEFAULT_POWER_THRESHOLD,
};
