//! Simulator and analysis suite for wavelength-multiplexed,
//! entanglement-based QKD: pair source, channel plans, detector chain,
//! coincidence counting, key-rate analysis and scenario runners.

pub mod calibration;
pub mod channel;
pub mod coincidence;
pub mod detection;
pub mod error;
pub mod keyrate;
pub mod optics;
pub mod rng;
pub mod scenario;
pub mod simulation;
pub mod source;

pub use calibration::Calibration;
pub use channel::{
    build_grid_plan, build_table1_plan, coherence_time, demux, ChannelPair, ChannelPlan, GridPlan, Side,
    WavelengthChannel,
};
pub use coincidence::{accidental_estimate, find_coincidences, tabulate, CoincidenceWindow, CountsMatrix, Match};
pub use detection::{
    detect, measure_polarization, merge_detectors, transmit, Arrival, Basis, DetectorConfig, Outcome, TimeTag,
    TAGGER_TICK,
};
pub use error::{Error, Result};
pub use keyrate::{
    analytic_rates, binary_entropy, optimize_pair_rate, qber, qber_threshold, scaling_curve, secure_key,
    visibility, AnalyticLinkModel, AnalyticRates, KeyRateReport,
};
pub use simulation::{LinkSetup, MonteCarloResult};
pub use source::{sample_pair_stream, PairEvent, SourceConfig};
