pub mod convex_distance;
pub mod deviation;
pub mod error;
pub mod harness;
pub mod inequality_lab;
pub mod numeric;
pub mod product_space;
pub mod rng;
pub mod sparsify;
