//! File formats and datasets.

pub mod checkpoint;
pub mod crc32;
pub mod inflate;
pub mod npy;
pub mod zip;
pub mod dataset;
pub mod netpbm;
