//! Evaluation: Fréchet distances between embedding sets, embedding
//! calibration, reconstruction error by frequency, downstream probes and
//! inter-rater agreement.

mod calib;
mod embed;
mod fad;
mod kappa;
mod probe;
mod recon;

pub use calib::{calibrate_embeddings, calibration_ratio, noise_components, write_calibration_csv, CalibrationRow};
pub use embed::{
    builtin_embedding, builtin_embeddings, embed_all, mel_filterbank, EmbeddingModel, EnergyEmbedding, MatmPooled,
    OnsetFeatures, RandomProjection, TokenHistogram, BUILTIN_NAMES,
};
pub use fad::{
    fad, fit_gaussian, fit_gaussian_with, frechet_distance, normalize_fad, CovarianceMode, FadEntry, FadReport,
    GaussianStats,
};
pub use kappa::{fleiss_kappa, RatingsMatrix};
pub use probe::{encode_labels, majority_baseline, train_probe, EpochSelection, ProbeConfig, ProbeResult};
pub use recon::{chunk_len, recon_error_study, IdentityStub, Reconstructor, ReconStudy, ZeroStub, RECON_EPSILON};
