//! Independent oracles used by the test suites: brute-force and textbook
//! implementations that share no code path with the library routines they
//! check.

pub mod gradcheck;
pub mod op_suite;
pub mod oracles;
