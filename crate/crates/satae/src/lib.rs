pub mod analysis;
pub mod data;
pub mod model;
pub mod netpbm;
pub mod nonlin;
pub mod seed;
pub mod train;
