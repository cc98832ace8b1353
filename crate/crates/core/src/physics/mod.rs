//! Forward model: multi-bin microwave drive -> four-level steady state ->
//! probe transmission time series.

mod field;
mod lindblad;
mod spectrum;

pub use field::{envelope_approx, envelope_of, rabi_envelope, Bin, MwField};
pub use lindblad::{
    build_hamiltonian, liouvillian, master_equation_rhs, steady_state, AtomParams, DensityMatrix,
    Matrix4, SteadyStateSolver, E, G, R, S,
};
pub use spectrum::{
    simulate_spectrum, spectrum_from_bins, spectrum_from_bins_par, transmission_point, Spectrum,
    TransmissionModel,
};
