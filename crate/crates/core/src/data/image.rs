use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const DEFAULT_IMAGE_WIDTH: usize = 64;

/// Lays raw bytes out as an `H × W × C` image scaled to `[0, 1]`.
///
/// Bytes fill rows left to right with channels interleaved; the final row is
/// zero-padded, so `H = ceil(len / (W·C))`.
pub fn bytes_to_image(bytes: &[u8], width: usize, channels: usize) -> Result<Tensor> {
    if bytes.is_empty() {
        return Err(Error::EmptyInput("no bytes to convert".into()));
    }
    if width == 0 {
        return Err(Error::Parameter("image width must be at least 1".into()));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Parameter(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    let row = width * channels;
    let height = bytes.len().div_ceil(row);
    let mut data = vec![0.0; height * row];
    for (d, &b) in data.iter_mut().zip(bytes) {
        *d = f64::from(b) / 255.0;
    }
    Tensor::new(&[height, width, channels], data)
}

/// Recovers the first `len` bytes of an image produced by [`bytes_to_image`].
pub fn image_to_bytes(image: &Tensor, len: usize) -> Vec<u8> {
    image.data()[..len.min(image.numel())]
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}
