//! Network building blocks with forward and backward passes.

pub mod cmix;
pub mod crb;
pub mod crm;
pub mod fmix;

pub use cmix::Cmix;
pub use crb::{Crb, CrbCache, Mixer, MixerKind};
pub use crm::Crm;
pub use fmix::Fmix;
