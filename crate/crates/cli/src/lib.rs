//! Annotation HTTP service used by the `minchange` binary.

pub mod server;
