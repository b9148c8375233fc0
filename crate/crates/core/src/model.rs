//! Composition of layers into convolutional and linear blocks, and the model
//! objective
//!
//! ```text
//! log p(x) ≈ log N(z | 0, I) + Σ_l log N(r_l | g_l(z_l), ε² I) + Σ_l Σ_k log|det J_kl|
//! ```
//!
//! Images enter as `[batch, C·H·W]` rows in channel-major order. Convolutional
//! blocks work on pixel-major activations `[batch·pixels, channels]`; after
//! the last convolutional block the activation is flattened back to one row
//! per sample (pixel-major, channel-minor) for the linear blocks.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};
use crate::layers::{
    CouplingLayer, DownsampleLayer, FlowLayer, HouseholderTransform, Layer, ResidualMean,
    SplitLayer,
};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Rows evaluated per tape in the untraced helpers.
const CHUNK: usize = 256;

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Architecture {
    /// `[D]` for vector data or `[C, H, W]` for images.
    pub input_shape: Vec<usize>,
    /// Number of leading convolutional blocks; each consumes one entry of
    /// `dim_schedule`.
    pub conv_blocks: usize,
    /// Output dimension of every splitting block, strictly decreasing.
    pub dim_schedule: Vec<usize>,
    /// Append a block without a split after the last splitting block.
    pub final_block: bool,
    /// Coupling/Householder repetitions per block.
    pub k_repeats: usize,
    /// Reflections per Householder transform.
    pub householder_count: usize,
    pub residual_mean: ResidualMean,
    /// Residual variance ε², shared by every split.
    pub epsilon_sq: f64,
}

impl Architecture {
    /// Two convolutional blocks halving the variables, linear blocks down
    /// to 64 and 10, and a final non-splitting block, for `1×28×28` input.
    pub fn mnist_default(epsilon_sq: f64) -> Self {
        Architecture {
            input_shape: vec![1, 28, 28],
            conv_blocks: 2,
            dim_schedule: vec![392, 196, 64, 10],
            final_block: true,
            k_repeats: 3,
            householder_count: 3,
            residual_mean: ResidualMean::Zero,
            epsilon_sq,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Input image shape of the block.
    Convolutional {
        channels: usize,
        height: usize,
        width: usize,
    },
    Linear {
        dim: usize,
    },
}

/// `[downsample] → householder → K × (coupling, householder) → [split]`.
#[derive(Debug, Clone)]
pub struct PieBlock {
    kind: BlockKind,
    downsample: Option<DownsampleLayer>,
    layers: Vec<Layer>,
    split: Option<SplitLayer>,
    /// Activation rows per sample inside the block.
    pixels: usize,
}

impl PieBlock {
    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn downsample(&self) -> Option<&DownsampleLayer> {
        self.downsample.as_ref()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn split(&self) -> Option<&SplitLayer> {
        self.split.as_ref()
    }

    pub fn rows_per_sample(&self) -> usize {
        self.pixels
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            BlockKind::Convolutional {
                channels,
                height,
                width,
            } => channels * height * width,
            BlockKind::Linear { dim } => dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.split {
            Some(s) => s.keep() * self.pixels,
            None => self.input_dim(),
        }
    }

    pub fn is_convolutional(&self) -> bool {
        matches!(self.kind, BlockKind::Convolutional { .. })
    }
}

/// Encoder outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    /// `[batch, d]`.
    pub z: Tensor,
    /// One `[batch, m_l]` residual per splitting block.
    pub residuals: Vec<Tensor>,
    /// Per-sample `Σ log|det J|`.
    pub log_det: Vec<f64>,
    /// Per-sample `Σ_l log N(r_l | g_l(z_l), ε² I)`.
    pub residual_log_prob: Vec<f64>,
}

impl Encoding {
    pub fn prior_log_prob(&self) -> Vec<f64> {
        let d = self.z.shape()[1];
        self.z
            .data()
            .chunks(d)
            .map(|z| standard_normal_log_prob(z))
            .collect()
    }

    pub fn log_likelihood(&self) -> Vec<f64> {
        self.prior_log_prob()
            .iter()
            .zip(&self.log_det)
            .zip(&self.residual_log_prob)
            .map(|((p, d), r)| p + d + r)
            .collect()
    }
}

/// Traced encoder outputs.
#[derive(Debug, Clone)]
pub struct Trace {
    pub z: Var,
    pub residuals: Vec<Var>,
    /// `[batch, 1]`.
    pub log_det: Var,
    /// `[batch, 1]`.
    pub residual_log_prob: Var,
}

fn standard_normal_log_prob(v: &[f64]) -> f64 {
    -0.5 * v.len() as f64 * (2.0 * PI).ln() - 0.5 * v.iter().map(|x| x * x).sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct PieModel {
    arch: Architecture,
    blocks: Vec<PieBlock>,
    params: ParamStore,
}

impl PieModel {
    /// Builds the block structure and initial parameters. Couplings and
    /// residual-mean networks start at the identity / zero; Householder
    /// generators are standard normal draws from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let blocks = build_blocks(&arch, &mut params, &mut rng)?;
        Ok(PieModel {
            arch,
            blocks,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn blocks(&self) -> &[PieBlock] {
        &self.blocks
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.blocks.last().map_or(self.input_dim(), PieBlock::output_dim)
    }

    /// Dimensions `D, dim Y_1, …, d` along the encoder.
    pub fn dim_chain(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.blocks.iter().filter(|b| b.split.is_some()).map(PieBlock::output_dim));
        dims
    }

    /// Adds uniform noise in `[-scale, scale]` to every parameter, so
    /// couplings and residual means move away from their trivial start.
    pub fn perturb_parameters(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in self.params.ids().collect::<Vec<_>>() {
            for v in self.params.get_mut(id).data_mut() {
                *v += scale * rng.gen_range(-1.0..1.0);
            }
        }
    }

    fn is_image(&self) -> bool {
        self.arch.conv_blocks > 0
    }

    /// Channel-major `[B, C·H·W]` ↔ pixel-major `[B·H·W, C]` index maps.
    fn layout_index(&self, batch: usize, to_pixels: bool) -> Arc<[usize]> {
        let (c, hw) = (self.arch.input_shape[0], self.arch.input_shape[1] * self.arch.input_shape[2]);
        let d = c * hw;
        let mut idx = vec![0; batch * d];
        for b in 0..batch {
            for p in 0..hw {
                for ch in 0..c {
                    let pixel_major = (b * hw + p) * c + ch;
                    let channel_major = b * d + ch * hw + p;
                    if to_pixels {
                        idx[pixel_major] = channel_major;
                    } else {
                        idx[channel_major] = pixel_major;
                    }
                }
            }
        }
        idx.into()
    }

    /// Coerces `[B, D]`, `[D]` or a single `C×H×W` sample to `[B, D]`.
    pub fn batch_view(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.input_dim();
        if x.rank() == 2 && x.shape()[1] == d {
            return Ok(x.clone());
        }
        if x.len() == d {
            return Ok(x.reshape(&[1, d])?);
        }
        Err(TensorError::ShapeMismatch {
            op: "encode",
            left: x.shape().to_vec(),
            right: vec![d],
        }
        .into())
    }

    /// Sum a per-row `[B·P, 1]` column into per-sample `[B, 1]`.
    fn per_sample(tape: &mut Tape, col: Var, batch: usize, pixels: usize) -> Result<Var> {
        if pixels == 1 {
            return Ok(col);
        }
        let m = tape.reshape(col, &[batch, pixels])?;
        Ok(tape.sum_rows(m)?)
    }

    fn accumulate(tape: &mut Tape, acc: &mut Option<Var>, term: Var) -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
        Ok(())
    }

    fn check_finite(tape: &Tape, v: Var, block: usize, layer: usize) -> Result<()> {
        if tape.value(v).check_finite().is_err() {
            return Err(PieError::NonFiniteActivation { block, layer });
        }
        Ok(())
    }

    /// Full encoder on the tape for `x: [B, D]`.
    pub fn trace(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Trace> {
        let (batch, d) = tape.value(x).dims2("encode")?;
        if d != self.input_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                left: tape.value(x).shape().to_vec(),
                right: vec![batch, self.input_dim()],
            }
            .into());
        }
        let mut h = x;
        if self.is_image() {
            let c = self.arch.input_shape[0];
            let idx = self.layout_index(batch, true);
            h = tape.gather(h, idx, &[batch * (d / c), c])?;
        }
        let mut log_det = None;
        let mut resid_lp = None;
        let mut residuals = Vec::new();

        for (l, block) in self.blocks.iter().enumerate() {
            let mut layer_no = 0;
            if let Some(ds) = &block.downsample {
                h = ds.forward(tape, p, h)?.0;
                layer_no += 1;
            }
            for layer in &block.layers {
                let (y, ld) = layer.forward(tape, p, h)?;
                Self::check_finite(tape, y, l, layer_no)?;
                if let Some(ld) = ld {
                    let ld = Self::per_sample(tape, ld, batch, block.pixels)?;
                    Self::accumulate(tape, &mut log_det, ld)?;
                }
                h = y;
                layer_no += 1;
            }
            if let Some(split) = &block.split {
                let out = split.forward(tape, p, h)?;
                Self::check_finite(tape, out.log_prob, l, layer_no)?;
                let lp = Self::per_sample(tape, out.log_prob, batch, block.pixels)?;
                Self::accumulate(tape, &mut resid_lp, lp)?;
                let m = split.residual_dim() * block.pixels;
                residuals.push(tape.reshape(out.r, &[batch, m])?);
                h = out.z;
            }
            if block.is_convolutional() && l + 1 == self.arch.conv_blocks {
                let cols = tape.value(h).shape()[1];
                h = tape.reshape(h, &[batch, block.pixels * cols])?;
            }
        }
        let zeros = || Tensor::zeros(&[batch, 1]);
        let log_det = log_det.unwrap_or_else(|| tape.constant(zeros()));
        let residual_log_prob = resid_lp.unwrap_or_else(|| tape.constant(zeros()));
        Ok(Trace {
            z: h,
            residuals,
            log_det,
            residual_log_prob,
        })
    }

    /// Per-sample log-likelihood `[B, 1]` on the tape.
    pub fn log_likelihood_var(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let t = self.trace(tape, p, x)?;
        let d = tape.value(t.z).shape()[1] as f64;
        let sq = tape.square(t.z)?;
        let ss = tape.sum_rows(sq)?;
        let prior = tape.mul_scalar(ss, -0.5)?;
        let prior = tape.add_scalar(prior, -0.5 * d * (2.0 * PI).ln())?;
        let a = tape.add(prior, t.residual_log_prob)?;
        Ok(tape.add(a, t.log_det)?)
    }

    /// Inverse on the tape. With `residuals` the exact inverse of the full
    /// bijection; without, every split is extended by its `g(z)`.
    pub fn untrace(&self, tape: &mut Tape, p: &Bound, z: Var, residuals: Option<&[Var]>) -> Result<Var> {
        let (batch, d) = tape.value(z).dims2("decode")?;
        if d != self.latent_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                left: tape.value(z).shape().to_vec(),
                right: vec![batch, self.latent_dim()],
            }
            .into());
        }
        let n_splits = self.blocks.iter().filter(|b| b.split.is_some()).count();
        if let Some(r) = residuals {
            if r.len() != n_splits {
                return Err(PieError::Architecture(format!(
                    "expected {n_splits} residual tensors, got {}",
                    r.len()
                )));
            }
        }
        let mut split_no = n_splits;
        let mut h = z;
        for (l, block) in self.blocks.iter().enumerate().rev() {
            if block.is_convolutional() && l + 1 == self.arch.conv_blocks {
                let cols = tape.value(h).shape()[1] / block.pixels;
                h = tape.reshape(h, &[batch * block.pixels, cols])?;
            }
            if let Some(split) = &block.split {
                split_no -= 1;
                h = match residuals {
                    Some(rs) => {
                        let r = tape.reshape(rs[split_no], &[batch * block.pixels, split.residual_dim()])?;
                        split.inverse_with_residual(tape, h, r)?
                    }
                    None => split.inverse(tape, p, h)?,
                };
            }
            for layer in block.layers.iter().rev() {
                h = layer.inverse(tape, p, h)?;
            }
            if let Some(ds) = &block.downsample {
                h = ds.inverse(tape, p, h)?;
            }
        }
        if self.is_image() {
            let idx = self.layout_index(batch, false);
            h = tape.gather(h, idx, &[batch, self.input_dim()])?;
        }
        Ok(h)
    }

    fn chunks(x: &Tensor) -> Result<Vec<Tensor>> {
        let (rows, cols) = x.dims2("chunk")?;
        Ok(x.data()
            .chunks(CHUNK * cols)
            .map(|c| Tensor::new(vec![c.len() / cols, cols], c.to_vec()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(|v| {
                debug_assert_eq!(v.iter().map(|t| t.shape()[0]).sum::<usize>(), rows);
                v
            })?)
    }

    fn concat_rows(parts: Vec<Tensor>) -> Result<Tensor> {
        let cols = parts[0].shape()[1];
        let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Ok(Tensor::new(vec![data.len() / cols, cols], data)?)
    }

    /// Encodes a batch `[B, D]` (or one sample).
    pub fn encode(&self, x: &Tensor) -> Result<Encoding> {
        let x = self.batch_view(x)?;
        let mut parts = Vec::new();
        for chunk in Self::chunks(&x)? {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape);
            let xv = tape.constant(chunk);
            let t = self.trace(&mut tape, &p, xv)?;
            parts.push(Encoding {
                z: tape.value(t.z).clone(),
                residuals: t.residuals.iter().map(|&r| tape.value(r).clone()).collect(),
                log_det: tape.value(t.log_det).data().to_vec(),
                residual_log_prob: tape.value(t.residual_log_prob).data().to_vec(),
            });
        }
        let n_res = parts[0].residuals.len();
        let mut residuals = Vec::with_capacity(n_res);
        for i in 0..n_res {
            residuals.push(Self::concat_rows(parts.iter().map(|e| e.residuals[i].clone()).collect())?);
        }
        Ok(Encoding {
            z: Self::concat_rows(parts.iter().map(|e| e.z.clone()).collect())?,
            residuals,
            log_det: parts.iter().flat_map(|e| e.log_det.iter().copied()).collect(),
            residual_log_prob: parts.iter().flat_map(|e| e.residual_log_prob.iter().copied()).collect(),
        })
    }

    /// Per-sample log-likelihood.
    pub fn log_likelihood(&self, x: &Tensor) -> Result<Vec<f64>> {
        let ll = self.encode(x)?.log_likelihood();
        if let Some(i) = ll.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index: i }.into());
        }
        Ok(ll)
    }

    /// The same bijection scored as a multi-scale normalizing flow: `z` and
    /// every factored-out residual under a standard normal.
    pub fn flow_log_likelihood(&self, x: &Tensor) -> Result<Vec<f64>> {
        let enc = self.encode(x)?;
        let batch = enc.z.shape()[0];
        Ok((0..batch)
            .map(|b| {
                let mut lp = standard_normal_log_prob(enc.z.row(b));
                for r in &enc.residuals {
                    lp += standard_normal_log_prob(r.row(b));
                }
                lp + enc.log_det[b]
            })
            .collect())
    }

    fn run_inverse(&self, z: &Tensor, residuals: Option<&[Tensor]>) -> Result<Tensor> {
        let d = self.latent_dim();
        let z = if z.rank() == 2 { z.clone() } else { z.reshape(&[z.len() / d.max(1), d])? };
        let z_chunks = Self::chunks(&z)?;
        let r_chunks = residuals
            .map(|rs| rs.iter().map(Self::chunks).collect::<Result<Vec<_>>>())
            .transpose()?;
        let mut parts = Vec::new();
        for (i, zc) in z_chunks.into_iter().enumerate() {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape);
            let zv = tape.constant(zc);
            let rv: Option<Vec<Var>> = r_chunks
                .as_ref()
                .map(|rc| rc.iter().map(|c| tape.constant(c[i].clone())).collect());
            let x = self.untrace(&mut tape, &p, zv, rv.as_deref())?;
            parts.push(tape.value(x).clone());
        }
        Self::concat_rows(parts)
    }

    /// `G⁻¹(z)`: extends every split with `g(z)`. Returns `[B, D]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.run_inverse(z, None)
    }

    /// Exact inverse of the full bijection given every residual.
    pub fn decode_with_residuals(&self, z: &Tensor, residuals: &[Tensor]) -> Result<Tensor> {
        self.run_inverse(z, Some(residuals))
    }

    /// `decode(encode(x).z)`.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?.z)
    }

    /// `count` latent draws from `N(0, prior_std² I)`, shape `[count, d]`.
    pub fn sample_latents<R: Rng>(&self, count: usize, prior_std: f64, rng: &mut R) -> Result<Tensor> {
        if count == 0 {
            return Err(PieError::Config("sample count must be at least 1".into()));
        }
        if !(prior_std >= 0.0 && prior_std.is_finite()) {
            return Err(PieError::Config(format!("prior std must be non-negative, got {prior_std}")));
        }
        let d = self.latent_dim();
        let data = (0..count * d)
            .map(|_| prior_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Tensor::new(vec![count, d], data)?)
    }

    /// Decoded samples, shape `[count, D]`.
    pub fn sample<R: Rng>(&self, count: usize, prior_std: f64, rng: &mut R) -> Result<Tensor> {
        let z = self.sample_latents(count, prior_std, rng)?;
        self.decode(&z)
    }

    /// Decodes `steps` evenly spaced points on the segment between the codes
    /// of `a` and `b`. Returns `[steps, D]`.
    pub fn interpolate(&self, a: &Tensor, b: &Tensor, steps: usize) -> Result<Tensor> {
        if steps < 2 {
            return Err(PieError::Config(format!("interpolation needs at least 2 steps, got {steps}")));
        }
        let za = self.encode(a)?.z;
        let zb = self.encode(b)?.z;
        if za.shape()[0] != 1 || zb.shape()[0] != 1 {
            return Err(PieError::Config("interpolation endpoints must be single samples".into()));
        }
        let d = self.latent_dim();
        let mut data = Vec::with_capacity(steps * d);
        for s in 0..steps {
            let t = s as f64 / (steps - 1) as f64;
            data.extend(za.data().iter().zip(zb.data()).map(|(a, b)| (1.0 - t) * a + t * b));
        }
        self.decode(&Tensor::new(vec![steps, d], data)?)
    }
}

fn build_blocks<R: Rng>(arch: &Architecture, store: &mut ParamStore, rng: &mut R) -> Result<Vec<PieBlock>> {
    let bad = |msg: String| Err(PieError::Architecture(msg));
    if !(arch.epsilon_sq > 0.0 && arch.epsilon_sq.is_finite()) {
        return bad(format!("epsilonSq must be positive, got {}", arch.epsilon_sq));
    }
    if arch.k_repeats == 0 || arch.householder_count == 0 {
        return bad("kRepeats and householderCount must be at least 1".into());
    }
    if arch.input_shape.is_empty() || arch.input_shape.iter().any(|&d| d == 0) {
        return bad(format!("invalid input shape {:?}", arch.input_shape));
    }
    if arch.conv_blocks > arch.dim_schedule.len() {
        return bad("every convolutional block needs a dimSchedule entry".into());
    }
    if arch.dim_schedule.is_empty() && !arch.final_block {
        return bad("model needs at least one block".into());
    }
    let mut prev = arch.input_dim();
    for &d in &arch.dim_schedule {
        if d == 0 || d >= prev {
            return bad(format!(
                "dimension chain must strictly decrease from {}: {:?}",
                arch.input_dim(),
                arch.dim_schedule
            ));
        }
        prev = d;
    }

    let mut blocks = Vec::new();
    let mut image = match arch.input_shape.as_slice() {
        &[c, h, w] => Some((c, h, w)),
        _ if arch.conv_blocks > 0 => return bad("convolutional blocks need [C, H, W] input".into()),
        _ => None,
    };
    let mut dim = arch.input_dim();

    let flow_layers = |store: &mut ParamStore, rng: &mut R, l: usize, width: usize| -> Result<Vec<Layer>> {
        let mut layers = vec![Layer::Householder(HouseholderTransform::new(
            store,
            &format!("b{l}.h0"),
            width,
            arch.householder_count,
            rng,
        )?)];
        for k in 0..arch.k_repeats {
            layers.push(Layer::Coupling(CouplingLayer::new(store, &format!("b{l}.c{k}"), width, rng)?));
            layers.push(Layer::Householder(HouseholderTransform::new(
                store,
                &format!("b{l}.h{}", k + 1),
                width,
                arch.householder_count,
                rng,
            )?));
        }
        Ok(layers)
    };

    for (l, &target) in arch.dim_schedule.iter().enumerate() {
        if l < arch.conv_blocks {
            let (c, h, w) = image.expect("image shape checked above");
            let ds = DownsampleLayer::new(c, h, w)?;
            let (c2, h2, w2) = ds.output_shape();
            let pixels = h2 * w2;
            if target % pixels != 0 {
                return bad(format!(
                    "block {l}: target {target} is not a multiple of the {pixels} pixels after downsampling"
                ));
            }
            let keep = target / pixels;
            let layers = flow_layers(store, rng, l, c2)?;
            let split = SplitLayer::new(store, &format!("b{l}.split"), c2, keep, arch.epsilon_sq, arch.residual_mean, rng)?;
            blocks.push(PieBlock {
                kind: BlockKind::Convolutional {
                    channels: c,
                    height: h,
                    width: w,
                },
                downsample: Some(ds),
                layers,
                split: Some(split),
                pixels,
            });
            image = Some((keep, h2, w2));
        } else {
            let layers = flow_layers(store, rng, l, dim)?;
            let split = SplitLayer::new(store, &format!("b{l}.split"), dim, target, arch.epsilon_sq, arch.residual_mean, rng)?;
            blocks.push(PieBlock {
                kind: BlockKind::Linear { dim },
                downsample: None,
                layers,
                split: Some(split),
                pixels: 1,
            });
        }
        dim = target;
    }
    if arch.final_block {
        let l = blocks.len();
        if arch.conv_blocks > 0 && l == 0 {
            return bad("final block cannot follow an empty convolutional stage".into());
        }
        let layers = flow_layers(store, rng, l, dim)?;
        blocks.push(PieBlock {
            kind: BlockKind::Linear { dim },
            downsample: None,
            layers,
            split: None,
            pixels: 1,
        });
    }
    Ok(blocks)
}
