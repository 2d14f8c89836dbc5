//! Independent reference checks for the streamseg engine.

pub mod derived;
pub mod gen;
pub mod naive;
