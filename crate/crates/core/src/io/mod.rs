//! Tensor and image file formats.

pub mod image;
pub mod npy;

pub use image::{read_image, write_image};
pub use npy::{read_npy, write_npy, NpyArray};
