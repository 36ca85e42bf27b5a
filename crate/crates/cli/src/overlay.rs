//! Contour overlay rendering for `predict`. Predicted boundaries paint pure
//! blue, ground-truth boundaries pure green, and green wins where they touch.

use image::{GrayImage, Rgb, RgbImage};

pub const PRED_COLOR: Rgb<u8> = Rgb([0, 0, 255]);
pub const TRUTH_COLOR: Rgb<u8> = Rgb([0, 255, 0]);

/// Boundary of a binary mask: positive pixels with at least one non-positive
/// 4-neighbor. Pixels beyond the edge count as non-positive, so a mask
/// touching the border still shows its outline there.
pub fn contour(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    assert_eq!(mask.len(), width * height, "mask length must match dimensions");
    let at = |x: isize, y: isize| -> bool {
        if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
            return false;
        }
        mask[y as usize * width + x as usize]
    };
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if !at(x, y) {
                continue;
            }
            let exposed =
                !at(x - 1, y) || !at(x + 1, y) || !at(x, y - 1) || !at(x, y + 1);
            out[y as usize * width as usize + x as usize] = exposed;
        }
    }
    out
}

/// Paints the prediction contour, then the ground-truth contour over it.
pub fn render(base: &RgbImage, pred: &[bool], truth: Option<&[bool]>) -> RgbImage {
    let (w, h) = (base.width() as usize, base.height() as usize);
    let mut out = base.clone();
    for (color, mask) in [(PRED_COLOR, Some(pred)), (TRUTH_COLOR, truth)] {
        let Some(mask) = mask else { continue };
        let edge = contour(mask, w, h);
        for y in 0..h {
            for x in 0..w {
                if edge[y * w + x] {
                    out.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    out
}

/// Strictly bilevel mask image: 255 inside, 0 outside.
pub fn mask_image(mask: &[bool], width: usize, height: usize) -> GrayImage {
    assert_eq!(mask.len(), width * height, "mask length must match dimensions");
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([if mask[y as usize * width + x as usize] { 255 } else { 0 }])
    })
}
