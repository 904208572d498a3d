//! Pieces of the command-line tool that are also driven from tests.

pub mod footprint;
