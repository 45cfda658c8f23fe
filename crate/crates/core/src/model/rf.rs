use super::arch::ArchitectureSpec;

/// Receptive-field geometry of the final feature map.
///
/// Output pixel `(i, j)` sees a `rf_size × rf_size` input window centred at
/// `center_offset + (i, j) * cumulative_stride` (input pixel coordinates,
/// possibly half-integral for even kernels, unclipped by the image border).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfInfo {
    pub rf_size: usize,
    pub cumulative_stride: usize,
    pub center_offset: (f64, f64),
}

impl RfInfo {
    /// Centre of output pixel `(i, j)`'s receptive field.
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        let s = self.cumulative_stride as f64;
        (self.center_offset.0 + i as f64 * s, self.center_offset.1 + j as f64 * s)
    }

    /// Inclusive input rows/cols covered by output pixel `(i, j)` before clipping.
    pub fn window(&self, i: usize, j: usize) -> ((isize, isize), (isize, isize)) {
        let half = (self.rf_size as f64 - 1.0) / 2.0;
        let (cy, cx) = self.center(i, j);
        let lo_y = (cy - half).round() as isize;
        let lo_x = (cx - half).round() as isize;
        let r = self.rf_size as isize;
        ((lo_y, lo_y + r - 1), (lo_x, lo_x + r - 1))
    }
}

/// Accumulates `r ← r + (k−1)·S`, `offset ← offset + ((k−1)/2 − p)·S`,
/// `S ← S·s` over the spatial layers.
pub fn receptive_field(spec: &ArchitectureSpec) -> RfInfo {
    let mut rf = 1usize;
    let mut stride = 1usize;
    let mut offset = 0.0f64;
    for layer in spec.layers() {
        if !layer.is_spatial() {
            continue;
        }
        let (k, s, p) = layer.geometry();
        rf += (k - 1) * stride;
        offset += ((k as f64 - 1.0) / 2.0 - p as f64) * stride as f64;
        stride *= s;
    }
    RfInfo {
        rf_size: rf,
        cumulative_stride: stride,
        center_offset: (offset, offset),
    }
}
