pub mod autodiff;
pub mod eval;
pub mod events;
pub mod gtp;
pub mod model;
pub mod neurons;
pub mod profiler;
pub mod training;
