//! Training objectives and their gradients.

pub mod classification;
pub mod ddpm;
pub mod gradcheck;
pub mod schedule;

pub use classification::{classification_loss, classification_loss_grad, logistic_loss, logistic_loss_deriv};
pub use ddpm::{
    ddpm_expected_grad, ddpm_expected_loss, ddpm_expected_loss_grad, ddpm_mc_loss, ddpm_mc_loss_grad,
    McEstimate,
};
pub use gradcheck::{finite_diff_grad, finite_diff_grad4, FdStep};
pub use schedule::{make_schedule, NoiseSchedule};
