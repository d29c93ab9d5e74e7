//! Gaussian ground-truth heatmaps and argmax decoding.

use serde::{Deserialize, Serialize};

use crate::error::{KdsmError, Result};
use crate::tensor::Tensor;

/// Ground-truth keypoints of one instance, in image pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub coords: Vec<(f64, f64)>,
    pub visible: Vec<bool>,
    /// (x0, y0, x1, y1)
    pub bbox: [f64; 4],
}

impl KeypointSet {
    pub fn new(coords: Vec<(f64, f64)>, visible: Vec<bool>, bbox: [f64; 4]) -> Result<Self> {
        let k = KeypointSet { coords, visible, bbox };
        k.validate()?;
        Ok(k)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.visible.len() {
            return Err(KdsmError::Validation(format!(
                "{} coordinates but {} visibility flags",
                self.coords.len(),
                self.visible.len()
            )));
        }
        let [x0, y0, x1, y1] = self.bbox;
        if !(x0 < x1 && y0 < y1) {
            return Err(KdsmError::Validation(format!("degenerate bbox {:?}", self.bbox)));
        }
        if self.coords.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(KdsmError::Validation("non-finite keypoint coordinate".into()));
        }
        Ok(())
    }

    /// Longest side of the bounding box.
    pub fn bbox_longest_side(&self) -> f64 {
        let [x0, y0, x1, y1] = self.bbox;
        (x1 - x0).max(y1 - y0)
    }

    pub fn num_visible(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// `N x hei x wid` heatmaps; the first `valid` channels carry keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    pub channels: Tensor,
    pub valid: usize,
}

impl HeatmapStack {
    pub fn zeros(n: usize, hei: usize, wid: usize) -> Self {
        HeatmapStack {
            channels: Tensor::zeros(&[n, hei, wid]),
            valid: 0,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.shape()[0]
    }

    pub fn hei(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn wid(&self) -> usize {
        self.channels.shape()[2]
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        let plane = self.hei() * self.wid();
        &self.channels.data()[i * plane..(i + 1) * plane]
    }
}

/// Heatmap cell for an image coordinate: floor of the scaled value.
pub fn to_grid(v: f64, image_extent: usize, grid_extent: usize) -> i64 {
    (v * grid_extent as f64 / image_extent as f64).floor() as i64
}

/// Half-width of the truncation window, `ceil(3 sigma)`.
pub fn window_radius(sigma: f64) -> i64 {
    (3.0 * sigma).ceil() as i64
}

/// Renders one peak-1 Gaussian per keypoint. Returns the stack together with
/// the effective visibility: keypoints whose whole window misses the grid are
/// cleared.
pub fn encode_gaussian(
    kps: &KeypointSet,
    n_channels: usize,
    hei: usize,
    wid: usize,
    sigma: f64,
    image_size: (usize, usize),
) -> Result<(HeatmapStack, Vec<bool>)> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(KdsmError::Config(format!("sigma must be positive, got {sigma}")));
    }
    if hei == 0 || wid == 0 || image_size.0 == 0 || image_size.1 == 0 {
        return Err(KdsmError::Config("heatmap and image extents must be positive".into()));
    }
    if kps.len() > n_channels {
        return Err(KdsmError::Capacity {
            got: kps.len(),
            capacity: n_channels,
        });
    }
    let (img_w, img_h) = image_size;
    let r = window_radius(sigma);
    let two_s2 = 2.0 * sigma * sigma;
    let mut data = vec![0.0; n_channels * hei * wid];
    let mut vis = kps.visible.clone();
    for (i, &(x, y)) in kps.coords.iter().enumerate() {
        if !vis[i] {
            continue;
        }
        let cx = to_grid(x, img_w, wid);
        let cy = to_grid(y, img_h, hei);
        let (x_lo, x_hi) = ((cx - r).max(0), (cx + r).min(wid as i64 - 1));
        let (y_lo, y_hi) = ((cy - r).max(0), (cy + r).min(hei as i64 - 1));
        if x_lo > x_hi || y_lo > y_hi {
            vis[i] = false;
            continue;
        }
        let plane = &mut data[i * hei * wid..(i + 1) * hei * wid];
        for py in y_lo..=y_hi {
            for px in x_lo..=x_hi {
                let d2 = ((px - cx) * (px - cx) + (py - cy) * (py - cy)) as f64;
                plane[py as usize * wid + px as usize] = (-d2 / two_s2).exp();
            }
        }
    }
    let stack = HeatmapStack {
        channels: Tensor::new(vec![n_channels, hei, wid], data)?,
        valid: kps.len(),
    };
    Ok((stack, vis))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub x: usize,
    pub y: usize,
    pub score: f64,
    pub valid: bool,
}

/// Row-major first maximum of one plane.
pub fn argmax_plane(plane: &[f64], wid: usize) -> Decoded {
    let mut best = 0;
    for (j, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = j;
        }
    }
    let score = plane[best];
    Decoded {
        x: best % wid,
        y: best / wid,
        score,
        valid: score > 0.0,
    }
}

/// Per channel argmax; `valid` is false when the maximum is not positive.
pub fn decode_argmax(h: &HeatmapStack) -> Vec<Decoded> {
    (0..h.n_channels())
        .map(|c| {
            let mut d = argmax_plane(h.channel(c), h.wid());
            if !d.valid {
                d.score = d.score.max(0.0);
            }
            d
        })
        .collect()
}
