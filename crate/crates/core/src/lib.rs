pub mod bvq;
pub mod hadamard;
pub mod memmodel;
pub mod quantizer;
pub mod rng;
pub mod rotation;
pub mod simkernel;
pub mod specdec;
pub mod toymodel;
pub mod wdos;
