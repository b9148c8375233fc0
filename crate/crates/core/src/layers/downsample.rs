use std::sync::Arc;

use super::FlowLayer;
use crate::error::{PieError, Result};
use crate::params::Bound;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Checkerboard squeeze `C×H×W → 4C×(H/2)×(W/2)`.
///
/// Input channel `c` becomes output channels `4c..4c+4` holding the
/// top-left, top-right, bottom-left and bottom-right entries of each 2×2
/// block. A pure permutation, so the log-determinant is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DownsampleLayer {
    channels: usize,
    height: usize,
    width: usize,
}

const OFFSETS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

impl DownsampleLayer {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || height % 2 != 0 || width % 2 != 0 {
            return Err(PieError::Architecture(format!(
                "downsampling needs positive even spatial size, got {channels}x{height}x{width}"
            )));
        }
        Ok(DownsampleLayer {
            channels,
            height,
            width,
        })
    }

    /// Output shape `(4C, H/2, W/2)`.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        (4 * self.channels, self.height / 2, self.width / 2)
    }

    /// Flat source index, in pixel-major input layout, for every entry of
    /// the pixel-major output.
    fn forward_index(&self, batch: usize) -> Vec<usize> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let (ho, wo) = (h / 2, w / 2);
        let mut idx = Vec::with_capacity(batch * h * w * c);
        for b in 0..batch {
            for i in 0..ho {
                for j in 0..wo {
                    for ch in 0..c {
                        for (di, dj) in OFFSETS {
                            idx.push(((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch);
                        }
                    }
                }
            }
        }
        idx
    }

    fn batch_of(&self, tape: &Tape, x: Var, pixels: usize, channels: usize) -> Result<usize> {
        let t = tape.value(x);
        let (rows, cols) = t.dims2("downsample")?;
        if cols != channels || rows % pixels != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "downsample",
                left: t.shape().to_vec(),
                right: vec![pixels, channels],
            }
            .into());
        }
        Ok(rows / pixels)
    }
}

impl FlowLayer for DownsampleLayer {
    fn forward(&self, tape: &mut Tape, _p: &Bound, x: Var) -> Result<(Var, Option<Var>)> {
        let batch = self.batch_of(tape, x, self.height * self.width, self.channels)?;
        let (co, ho, wo) = self.output_shape();
        let idx: Arc<[usize]> = self.forward_index(batch).into();
        let y = tape.gather(x, idx, &[batch * ho * wo, co])?;
        Ok((y, None))
    }

    fn inverse(&self, tape: &mut Tape, _p: &Bound, y: Var) -> Result<Var> {
        let (co, ho, wo) = self.output_shape();
        let batch = self.batch_of(tape, y, ho * wo, co)?;
        let fwd = self.forward_index(batch);
        let mut inv = vec![0; fwd.len()];
        for (o, &s) in fwd.iter().enumerate() {
            inv[s] = o;
        }
        let x = tape.gather(
            y,
            inv.into(),
            &[batch * self.height * self.width, self.channels],
        )?;
        Ok(x)
    }
}

/// Squeeze a single `C×H×W` tensor into `4C×(H/2)×(W/2)`.
pub fn downsample_chw(x: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return Err(TensorError::Rank {
            op: "downsample",
            expected: 3,
            shape: x.shape().to_vec(),
        }
        .into());
    };
    DownsampleLayer::new(c, h, w)?;
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        for (k, (di, dj)) in OFFSETS.into_iter().enumerate() {
            for i in 0..ho {
                for j in 0..wo {
                    out[((4 * ch + k) * ho + i) * wo + j] = d[(ch * h + 2 * i + di) * w + 2 * j + dj];
                }
            }
        }
    }
    Ok(Tensor::new(vec![4 * c, ho, wo], out)?)
}

/// Exact inverse of [`downsample_chw`].
pub fn upsample_chw(y: &Tensor) -> Result<Tensor> {
    let &[c4, ho, wo] = y.shape() else {
        return Err(TensorError::Rank {
            op: "upsample",
            expected: 3,
            shape: y.shape().to_vec(),
        }
        .into());
    };
    if c4 % 4 != 0 {
        return Err(PieError::Architecture(format!("upsampling needs a multiple of 4 channels, got {c4}")));
    }
    let (c, h, w) = (c4 / 4, 2 * ho, 2 * wo);
    let d = y.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        for (k, (di, dj)) in OFFSETS.into_iter().enumerate() {
            for i in 0..ho {
                for j in 0..wo {
                    out[(ch * h + 2 * i + di) * w + 2 * j + dj] = d[((4 * ch + k) * ho + i) * wo + j];
                }
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w], out)?)
}
