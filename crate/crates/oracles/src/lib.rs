//! Slow, independent reference implementations that tests compare the real
//! code against: an f64 graph interpreter with finite-difference gradient
//! checks and the cases they run on, a brute-force metric recount and a plain CIFAR-10 record decoder.

pub mod cases;
pub mod cifar;
pub mod gradcheck;
pub mod interp;
pub mod metrics;
