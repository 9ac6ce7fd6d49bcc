mod conv;
mod elementwise;
mod likelihood;
mod norm;
mod shape;

pub use likelihood::gaussian_bin_mass;
pub use norm::BatchStats;
