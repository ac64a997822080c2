pub mod density;
pub mod eval;
pub mod functionals;
pub mod model;
pub mod posterior_predictive;
pub mod prln;
pub mod sampler;
pub mod stats;
pub mod synthpop;
