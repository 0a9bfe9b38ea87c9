//! Pixel-space transforms on `[H, W, C]` images.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Image = Tensor;

fn dims(img: &Image) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::Shape(format!("expected an [H, W, C] image, found {s:?}"))),
    }
}

/// Mirrors the image left to right.
pub fn hflip(img: &Image) -> Result<Image> {
    let (h, w, c) = dims(img)?;
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let s = (y * w + x) * c;
            let d = (y * w + (w - 1 - x)) * c;
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// Rotates a square image counter-clockwise by `quarter_turns · 90°`.
pub fn rotate90(img: &Image, quarter_turns: usize) -> Result<Image> {
    let (h, w, c) = dims(img)?;
    if h != w {
        return Err(Error::Shape(format!("rotation needs a square image, found {h}x{w}")));
    }
    let n = h;
    let mut cur = img.clone();
    for _ in 0..quarter_turns % 4 {
        let src = cur.data();
        let mut out = vec![0.0; src.len()];
        for y in 0..n {
            for x in 0..n {
                // counter-clockwise: (y, x) → (n-1-x, y)
                let s = (y * n + x) * c;
                let d = ((n - 1 - x) * n + y) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        cur = Tensor::new(vec![n, n, c], out)?;
    }
    Ok(cur)
}

/// Adds `delta` to every pixel and clamps to `[0, 1]`.
pub fn shift_brightness(img: &Image, delta: f64) -> Image {
    img.map(|v| (v + delta).clamp(0.0, 1.0))
}

/// Cuts the image into `rows × cols` equal tiles, returned in row-major order.
pub fn tiles(img: &Image, rows: usize, cols: usize) -> Result<Vec<Image>> {
    let (h, w, c) = dims(img)?;
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
        return Err(Error::Shape(format!(
            "a {h}x{w} image does not split into {rows}x{cols} equal tiles"
        )));
    }
    let (th, tw) = (h / rows, w / cols);
    let src = img.data();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for q in 0..cols {
            let mut t = Vec::with_capacity(th * tw * c);
            for y in 0..th {
                let s = ((r * th + y) * w + q * tw) * c;
                t.extend_from_slice(&src[s..s + tw * c]);
            }
            out.push(Tensor::new(vec![th, tw, c], t)?);
        }
    }
    Ok(out)
}

/// Stacks same-shaped images into a `[B, H, W, C]` batch.
pub fn stack(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack an empty image list".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "cannot stack images of shapes {:?} and {:?}",
                shape,
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        Tensor::new(vec![h, w, c], (0..h * w * c).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(4, 6, 3);
        assert_eq!(hflip(&hflip(&img).unwrap()).unwrap(), img);
        assert_ne!(hflip(&img).unwrap(), img);
    }

    #[test]
    fn rotation_group_closure() {
        let img = ramp(5, 5, 2);
        assert_eq!(rotate90(&img, 0).unwrap(), img);
        assert_eq!(rotate90(&img, 4).unwrap(), img);
        let once_twice = rotate90(&rotate90(&img, 1).unwrap(), 1).unwrap();
        assert_eq!(once_twice, rotate90(&img, 2).unwrap());
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate90(&r, 1).unwrap();
        }
        assert_eq!(r, img);
    }

    #[test]
    fn rotation_is_counter_clockwise() {
        // 2x2 single channel: [[a, b], [c, d]] → [[b, d], [a, c]]
        let img = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rotate90(&img, 1).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn rotation_rejects_non_square() {
        assert!(rotate90(&ramp(4, 6, 1), 1).is_err());
    }

    #[test]
    fn tiles_are_row_major() {
        let img = ramp(4, 4, 1);
        let t = tiles(&img, 2, 2).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[0].data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(t[1].data(), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(t[2].data(), &[8.0, 9.0, 12.0, 13.0]);
        assert!(tiles(&ramp(5, 4, 1), 2, 2).is_err());
    }

    #[test]
    fn brightness_clamps() {
        let img = Tensor::new(vec![1, 2, 1], vec![0.1, 0.95]).unwrap();
        assert_eq!(shift_brightness(&img, 0.1).data(), &[0.2, 1.0]);
        assert_eq!(shift_brightness(&img, -0.2).data(), &[0.0, 0.75]);
    }
}
