use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::gtp::EventImage;

/// Square crop window in sensor pixels, centred on `(cx, cy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchCrop {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl SearchCrop {
    /// Window of `factor · sqrt(w·h)` around a centre-form box, never
    /// narrower than `min_side`.
    pub fn around(b: [f64; 4], factor: f64, min_side: f64) -> Self {
        Self {
            cx: b[0],
            cy: b[1],
            side: (factor * (b[2] * b[3]).max(0.0).sqrt()).max(min_side),
        }
    }

    fn origin(&self) -> (f64, f64) {
        (self.cx - self.side / 2.0, self.cy - self.side / 2.0)
    }

    /// Crop-normalised centre-form box to sensor pixels.
    pub fn to_pixels(&self, n: [f64; 4]) -> [f64; 4] {
        let (x0, y0) = self.origin();
        [x0 + n[0] * self.side, y0 + n[1] * self.side, n[2] * self.side, n[3] * self.side]
    }

    pub fn to_normalized(&self, p: [f64; 4]) -> [f64; 4] {
        let (x0, y0) = self.origin();
        [(p[0] - x0) / self.side, (p[1] - y0) / self.side, p[2] / self.side, p[3] / self.side]
    }
}

/// Bilinear resample of the crop window to `out × out`, zero outside the
/// sensor. Returns planar `[3, out, out]` values.
pub fn crop_resize(img: &EventImage, crop: &SearchCrop, out: usize) -> Vec<f64> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (crop.cx - crop.side / 2.0, crop.cy - crop.side / 2.0);
    let step = crop.side / out as f64;
    // source coordinates in pixel-centre space for each output row/column
    let taps = |origin: f64| -> Vec<(i64, f64)> {
        (0..out)
            .map(|j| {
                let u = origin + (j as f64 + 0.5) * step - 0.5;
                let f = u.floor();
                (f as i64, u - f)
            })
            .collect()
    };
    let (cols, rows) = (taps(x0), taps(y0));
    let mut dst = vec![0.0; 3 * out * out];
    for (c, plane) in img.channels.iter().enumerate() {
        let at = |x: i64, y: i64| -> f64 {
            if x < 0 || y < 0 || x >= w || y >= h {
                0.0
            } else {
                plane.data[(y * w + x) as usize]
            }
        };
        for (i, &(ry, fy)) in rows.iter().enumerate() {
            for (j, &(rx, fx)) in cols.iter().enumerate() {
                let top = at(rx, ry) * (1.0 - fx) + at(rx + 1, ry) * fx;
                let bottom = at(rx, ry + 1) * (1.0 - fx) + at(rx + 1, ry + 1) * fx;
                dst[(c * out + i) * out + j] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    dst
}

/// Crops every timestep image of one frame into a `[T, 1, 3, out, out]` input.
pub fn stack_crops(images: &[EventImage], crop: &SearchCrop, out: usize) -> Tensor<f64> {
    let data: Vec<f64> = images.iter().flat_map(|img| crop_resize(img, crop, out)).collect();
    Tensor::new(&[images.len(), 1, 3, out, out], data).expect("crop sizes agree")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::gtp::{AggregationMethod, Plane};

    fn image(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> EventImage {
        let plane = Plane {
            width: w,
            height: h,
            data: (0..w * h).map(|i| f(i % w, i / w)).collect(),
        };
        EventImage {
            channels: [plane.clone(), plane.clone(), plane],
            frame: 0,
            method: AggregationMethod::Gtp,
        }
    }

    #[test]
    fn unit_scale_crop_copies_pixels() {
        let img = image(16, 16, |x, y| (y * 16 + x) as f64);
        let crop = SearchCrop { cx: 8.0, cy: 6.0, side: 8.0 };
        let out = crop_resize(&img, &crop, 8);
        assert_eq!(out[0], img.channels[0].get(4, 2));
        assert_eq!(out[7 * 8 + 7], img.channels[0].get(11, 9));
    }

    #[test]
    fn outside_sensor_is_zero() {
        let img = image(8, 8, |_, _| 1.0);
        let out = crop_resize(&img, &SearchCrop { cx: -20.0, cy: -20.0, side: 8.0 }, 4);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn back_mapping_round_trips(cx in -50.0f64..150.0, cy in -50.0f64..150.0, side in 4.0f64..200.0,
                                    b in prop::array::uniform4(0.01f64..1.0)) {
            let crop = SearchCrop { cx, cy, side };
            let back = crop.to_normalized(crop.to_pixels(b));
            for k in 0..4 {
                prop_assert!((back[k] - b[k]).abs() < 1e-6);
            }
        }
    }
}
