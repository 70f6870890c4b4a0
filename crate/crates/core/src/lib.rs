pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod evaluation;
pub mod models;
pub mod pipeline;
pub mod split;
