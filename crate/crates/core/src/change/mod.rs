//! Bi-temporal change detection (IRMAD) and change-mask thresholding.

mod cca;
mod chi2;
mod irmad;
mod threshold;

pub use cca::{weighted_cca, BandMatrix, MadStep, COV_RIDGE};
pub use chi2::{chi2_survival, gamma_q, ln_gamma};
pub use irmad::{
    chi_square, chi_square_image, irmad, irmad_stacks, ChiSquare, IrmadOptions, IrmadResult,
    DEGENERATE_GAP, SIGMA2_FLOOR,
};
pub use threshold::{
    apply_threshold, load_external_mask, percentile_of_sorted, threshold_percentile,
    threshold_pr_optimal, threshold_value, PrOperatingPoint,
};
