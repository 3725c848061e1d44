//! Golden datasets and independent oracles for tests.

pub mod mimic;
pub mod oracle;
pub mod t2d;
