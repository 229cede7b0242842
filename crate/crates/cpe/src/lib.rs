//! File formats, image I/O, oracle suites and the benchmark harness around
//! the `cpe-core` engine.

pub mod alloc_track;
pub mod bench;
pub mod checkpoint;
pub mod image_io;
pub mod oracle;
pub mod selftest;
