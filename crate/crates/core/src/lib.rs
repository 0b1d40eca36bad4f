pub mod error;
pub mod fields;
pub mod forward;
pub mod geometry;
pub mod isotropic;
mod iteration;
pub mod phantom;
pub mod recon_free;
pub mod recon_scatter;
pub mod synthesis;
pub mod transport;
