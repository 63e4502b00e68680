pub mod autodiff;
pub mod economy;
pub mod error;
pub mod fd_oracle;
pub mod jet;
pub mod losses;
pub mod net;
pub mod par;
pub mod sampler;
pub mod trainer;
