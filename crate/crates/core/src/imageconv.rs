//! 8-bit RGB images to and from `[n, 3, h, w]` tensors in `[0, 1]`.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn images_to_tensor(images: &[&RgbImage]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::dim("no images"))?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        if img.dimensions() != first.dimensions() {
            return Err(Error::dim(format!(
                "image {n} is {:?}, expected {:?}",
                img.dimensions(),
                first.dimensions()
            )));
        }
        let base = n * 3 * plane;
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = px[c] as f32 / 255.0;
            }
        }
    }
    Tensor::new([images.len(), 3, h, w], data)
}

pub fn image_to_tensor(img: &RgbImage) -> Result<Tensor<f32>> {
    images_to_tensor(&[img])
}

/// Sample `index` of `t`, rounded and clamped to 8 bits.
pub fn tensor_to_image(t: &Tensor<f32>, index: usize) -> Result<RgbImage> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 || index >= n {
        return Err(Error::dim(format!("cannot read image {index} from {:?}", t.shape())));
    }
    let plane = h * w;
    let base = index * 3 * plane;
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|ch| {
            (d[base + ch * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8
        }))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let img = RgbImage::from_fn(6, 4, |x, y| image::Rgb([(x * 40) as u8, (y * 60) as u8, 255]));
        let t = image_to_tensor(&img).unwrap();
        assert_eq!(t.shape(), &[1, 3, 4, 6]);
        assert_eq!(tensor_to_image(&t, 0).unwrap(), img);
        let other = RgbImage::new(4, 4);
        assert!(images_to_tensor(&[&img, &other]).is_err());
    }
}
