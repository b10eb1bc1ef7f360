//! Forward implementations and backward rules, grouped by kind.

pub mod attention;
pub mod conv;
mod elementwise;
mod linalg;
mod nn;
mod shape;
