//! Model definitions on top of the tape: a small U-Net, a DnCNN-style
//! residual chain, and a sinusoidal MLP over random Fourier features (INR).
//!
//! Architectural details the source material leaves open are fixed here for
//! reproducibility: 3x3 kernels, LeakyReLU(0.2), nearest-neighbor
//! upsampling, skip concatenation, a final 1x1 convolution, feature count
//! doubling per level, no normalization layers, zero-initialized biases,
//! and uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) weights (the same limit
//! serves as SIREN-style init for the sine layers).

use crate::error::{GhostError, Result};
use crate::image::Image;
use crate::rng::Rng64;
use crate::tensor::{NodeId, Scalar, Tape};
use std::sync::Arc;

const STREAM_INIT: u64 = 0x494e_4954; // "INIT"

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Unet {
        features: usize,
        levels: usize,
    },
    Dncnn {
        depth: usize,
        features: usize,
    },
    Inr {
        hidden_layers: usize,
        width: usize,
        fourier_features: usize,
        freq_scale: f64,
    },
}

impl ModelConfig {
    pub fn unet_default() -> Self {
        ModelConfig::Unet {
            features: 20,
            levels: 3,
        }
    }

    pub fn dncnn_default() -> Self {
        ModelConfig::Dncnn {
            depth: 8,
            features: 48,
        }
    }

    pub fn inr_default() -> Self {
        ModelConfig::Inr {
            hidden_layers: 3,
            width: 512,
            fourier_features: 256,
            freq_scale: 10.0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelConfig::Unet { .. } => "unet",
            ModelConfig::Dncnn { .. } => "dncnn",
            ModelConfig::Inr { .. } => "inr",
        }
    }

    /// True for models that map images to images (usable by N2G/N2I).
    pub fn takes_image_input(&self) -> bool {
        !matches!(self, ModelConfig::Inr { .. })
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ModelConfig::Unet { features, levels } => features > 0 && levels > 0,
            ModelConfig::Dncnn { depth, features } => depth >= 2 && features > 0,
            ModelConfig::Inr {
                hidden_layers,
                width,
                fourier_features,
                freq_scale,
            } => hidden_layers > 0 && width > 0 && fourier_features > 0 && freq_scale > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(GhostError::invalid(format!("bad model config: {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// A built model: trainable parameters plus fixed constants (the Fourier
/// frequency matrix for the INR). Parameters are stored in f64 and cast to
/// the tape precision when a forward pass is recorded.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: Vec<ParamTensor>,
    pub constants: Vec<ParamTensor>,
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn param_values(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.values.clone()).collect()
    }

    pub fn set_param_values(&mut self, values: &[Vec<f64>]) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(values.iter()) {
            assert_eq!(p.values.len(), v.len());
            p.values.clone_from(v);
        }
    }

    /// Record parameter leaves on a tape (in declaration order).
    pub fn param_leaves<T: Scalar>(&self, tape: &mut Tape<T>) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.leaf_from_f64(&p.shape, &p.values, true))
            .collect()
    }

    /// Convenience forward pass for image-input models (f64, no gradients).
    pub fn forward_image(&self, input: &Image) -> Result<Image> {
        let mut tape: Tape<f64> = Tape::new();
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf_from_f64(&p.shape, &p.values, false))
            .collect();
        let x = tape.leaf_from_f64(&[1, input.height, input.width], &input.pixels, false);
        let out = forward_on_tape(self, &mut tape, &params, x)?;
        Image::new(input.height, input.width, tape.values_f64(out))
    }

    /// Convenience INR render on the [-1, 1]^2 pixel-center grid.
    pub fn render_coordinates(&self, height: usize, width: usize) -> Result<Image> {
        let mut tape: Tape<f64> = Tape::new();
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf_from_f64(&p.shape, &p.values, false))
            .collect();
        let feats = self.fourier_feature_leaf(&mut tape, height, width)?;
        let out = inr_forward(self, &mut tape, &params, feats)?;
        Image::new(height, width, tape.values_f64(out))
    }

    /// Embed the pixel-center coordinate grid and record it as a constant
    /// leaf: the INR network input.
    pub fn fourier_feature_leaf<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        height: usize,
        width: usize,
    ) -> Result<NodeId> {
        let freqs = match &self.config {
            ModelConfig::Inr { .. } => &self.constants[0],
            other => {
                return Err(GhostError::invalid(format!(
                    "fourier features only apply to INR models, got {}",
                    other.kind_name()
                )))
            }
        };
        let coords = coordinate_grid(height, width);
        let feats = fourier_features(&coords, &freqs.values, freqs.shape[0]);
        Ok(tape.leaf_from_f64(
            &[height * width, 2 * freqs.shape[0]],
            &feats,
            false,
        ))
    }
}

/// Pixel-center coordinates in [-1, 1]^2, row-major (y, x) pairs.
pub fn coordinate_grid(height: usize, width: usize) -> Vec<f64> {
    let mut coords = Vec::with_capacity(height * width * 2);
    for y in 0..height {
        for x in 0..width {
            coords.push(2.0 * (y as f64 + 0.5) / height as f64 - 1.0);
            coords.push(2.0 * (x as f64 + 0.5) / width as f64 - 1.0);
        }
    }
    coords
}

/// [sin(B v), cos(B v)] per coordinate pair; `freqs` is [count, 2] and
/// already includes the 2*pi*scale factor.
pub fn fourier_features(coords: &[f64], freqs: &[f64], count: usize) -> Vec<f64> {
    let pixels = coords.len() / 2;
    let mut out = vec![0.0; pixels * 2 * count];
    for p in 0..pixels {
        let (cy, cx) = (coords[2 * p], coords[2 * p + 1]);
        let row = &mut out[p * 2 * count..(p + 1) * 2 * count];
        for j in 0..count {
            let phase = freqs[2 * j] * cy + freqs[2 * j + 1] * cx;
            row[j] = phase.sin();
            row[count + j] = phase.cos();
        }
    }
    out
}

fn uniform_limit(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

struct Builder {
    rng: Rng64,
    params: Vec<ParamTensor>,
}

impl Builder {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        let limit = uniform_limit(c_in * k * k);
        let n = c_out * c_in * k * k;
        let values = (0..n)
            .map(|_| limit * (2.0 * self.rng.uniform() - 1.0))
            .collect();
        self.params.push(ParamTensor {
            name: format!("{name}.weight"),
            shape: vec![c_out, c_in, k, k],
            values,
        });
        self.params.push(ParamTensor {
            name: format!("{name}.bias"),
            shape: vec![c_out],
            values: vec![0.0; c_out],
        });
    }

    fn dense(&mut self, name: &str, rows: usize, cols: usize) {
        let limit = uniform_limit(cols);
        let values = (0..rows * cols)
            .map(|_| limit * (2.0 * self.rng.uniform() - 1.0))
            .collect();
        self.params.push(ParamTensor {
            name: format!("{name}.weight"),
            shape: vec![rows, cols],
            values,
        });
        self.params.push(ParamTensor {
            name: format!("{name}.bias"),
            shape: vec![rows],
            values: vec![0.0; rows],
        });
    }
}

/// Construct a model with deterministic per-seed initialization.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut b = Builder {
        rng: Rng64::from_seed_stream(seed, STREAM_INIT),
        params: Vec::new(),
    };
    let mut constants = Vec::new();
    match *config {
        ModelConfig::Unet { features, levels } => {
            let mut ch_in = 1;
            for l in 0..levels {
                let ch = features << l;
                b.conv(&format!("enc{l}.a"), ch, ch_in, 3);
                b.conv(&format!("enc{l}.b"), ch, ch, 3);
                ch_in = ch;
            }
            for l in (0..levels - 1).rev() {
                let skip = features << l;
                let deep = features << (l + 1);
                b.conv(&format!("dec{l}.a"), skip, deep + skip, 3);
                b.conv(&format!("dec{l}.b"), skip, skip, 3);
            }
            b.conv("head", 1, features, 1);
        }
        ModelConfig::Dncnn { depth, features } => {
            b.conv("layer0", features, 1, 3);
            for l in 1..depth - 1 {
                b.conv(&format!("layer{l}"), features, features, 3);
            }
            b.conv(&format!("layer{}", depth - 1), 1, features, 3);
        }
        ModelConfig::Inr {
            hidden_layers,
            width,
            fourier_features,
            freq_scale,
        } => {
            // fixed frequency matrix, 2*pi*scale*N(0,1), never trained
            let values: Vec<f64> = (0..fourier_features * 2)
                .map(|_| 2.0 * std::f64::consts::PI * freq_scale * b.rng.normal())
                .collect();
            constants.push(ParamTensor {
                name: "fourier.freqs".into(),
                shape: vec![fourier_features, 2],
                values,
            });
            let mut in_dim = 2 * fourier_features;
            for l in 0..hidden_layers {
                b.dense(&format!("hidden{l}"), width, in_dim);
                in_dim = width;
            }
            b.dense("out", 1, in_dim);
        }
    }
    Ok(Model {
        config: config.clone(),
        seed,
        params: b.params,
        constants,
    })
}

/// Analytic trainable-parameter count for a config.
pub fn analytic_param_count(config: &ModelConfig) -> usize {
    let conv = |c_out: usize, c_in: usize, k: usize| c_out * c_in * k * k + c_out;
    match *config {
        ModelConfig::Unet { features, levels } => {
            let mut total = 0;
            let mut ch_in = 1;
            for l in 0..levels {
                let ch = features << l;
                total += conv(ch, ch_in, 3) + conv(ch, ch, 3);
                ch_in = ch;
            }
            for l in (0..levels - 1).rev() {
                let skip = features << l;
                let deep = features << (l + 1);
                total += conv(skip, deep + skip, 3) + conv(skip, skip, 3);
            }
            total + conv(1, features, 1)
        }
        ModelConfig::Dncnn { depth, features } => {
            conv(features, 1, 3) + (depth - 2) * conv(features, features, 3) + conv(1, features, 3)
        }
        ModelConfig::Inr {
            hidden_layers,
            width,
            fourier_features,
            ..
        } => {
            let mut total = 0;
            let mut in_dim = 2 * fourier_features;
            for _ in 0..hidden_layers {
                total += width * in_dim + width;
                in_dim = width;
            }
            total + in_dim + 1
        }
    }
}

/// Record a full forward pass; `input` is [1, h, w] for image models or
/// the Fourier-feature leaf for the INR.
pub fn forward_on_tape<T: Scalar>(
    model: &Model,
    tape: &mut Tape<T>,
    params: &[NodeId],
    input: NodeId,
) -> Result<NodeId> {
    match model.config {
        ModelConfig::Unet { levels, .. } => unet_forward(tape, params, input, levels),
        ModelConfig::Dncnn { depth, .. } => dncnn_forward(tape, params, input, depth),
        ModelConfig::Inr { .. } => inr_forward(model, tape, params, input),
    }
}

const LEAKY_SLOPE: f64 = 0.2;

fn conv_block<T: Scalar>(
    tape: &mut Tape<T>,
    params: &[NodeId],
    cursor: &mut usize,
    x: NodeId,
) -> Result<NodeId> {
    let kernel = params[*cursor];
    let bias = params[*cursor + 1];
    *cursor += 2;
    let y = tape.conv2d(x, kernel, bias)?;
    Ok(tape.leaky_relu(y, LEAKY_SLOPE))
}

fn unet_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &[NodeId],
    input: NodeId,
    levels: usize,
) -> Result<NodeId> {
    let mut cursor = 0;
    let mut x = input;
    let mut skips: Vec<NodeId> = Vec::with_capacity(levels - 1);
    for l in 0..levels {
        x = conv_block(tape, params, &mut cursor, x)?;
        x = conv_block(tape, params, &mut cursor, x)?;
        if l + 1 < levels {
            skips.push(x);
            x = tape.maxpool2x2(x)?;
        }
    }
    for l in (0..levels - 1).rev() {
        let skip = skips[l];
        let up = tape.upsample_nearest2x(x)?;
        let sh = tape.shape(skip).to_vec();
        let up = tape.crop_spatial(up, sh[1], sh[2])?;
        x = tape.concat_channels(up, skip)?;
        x = conv_block(tape, params, &mut cursor, x)?;
        x = conv_block(tape, params, &mut cursor, x)?;
    }
    // final 1x1 conv, no activation
    let kernel = params[cursor];
    let bias = params[cursor + 1];
    tape.conv2d(x, kernel, bias)
}

fn dncnn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &[NodeId],
    input: NodeId,
    depth: usize,
) -> Result<NodeId> {
    let mut cursor = 0;
    let mut x = input;
    for _ in 0..depth - 1 {
        x = conv_block(tape, params, &mut cursor, x)?;
    }
    let kernel = params[cursor];
    let bias = params[cursor + 1];
    let residual = tape.conv2d(x, kernel, bias)?;
    // DnCNN-style: the chain predicts the corruption, subtracted from input
    tape.sub(input, residual)
}

fn inr_forward<T: Scalar>(
    model: &Model,
    tape: &mut Tape<T>,
    params: &[NodeId],
    features: NodeId,
) -> Result<NodeId> {
    let hidden_layers = match model.config {
        ModelConfig::Inr { hidden_layers, .. } => hidden_layers,
        _ => return Err(GhostError::invalid("inr_forward called on a non-INR model")),
    };
    let mut cursor = 0;
    let mut x = features;
    for _ in 0..hidden_layers {
        let w = params[cursor];
        let bias = params[cursor + 1];
        cursor += 2;
        x = tape.dense(x, w, bias)?;
        x = tape.sin(x);
    }
    let w = params[cursor];
    let bias = params[cursor + 1];
    tape.dense(x, w, bias)
}

/// Rough per-pass activation memory (bytes) for the training budget check:
/// forward values plus f64 gradients for one image of h x w pixels.
pub fn activation_bytes_estimate(config: &ModelConfig, h: usize, w: usize, elem_bytes: usize) -> usize {
    let per_value = elem_bytes + 8; // stored value + f64 gradient
    match *config {
        ModelConfig::Unet { features, levels } => {
            let mut values = 0usize;
            for l in 0..levels {
                let ch = features << l;
                let scale = 1usize << l;
                let plane = (h / scale).max(1) * (w / scale).max(1);
                // two conv blocks (conv + activation) on the way down and up,
                // plus pool/upsample/concat buffers
                values += 6 * ch * plane;
            }
            values * per_value
        }
        ModelConfig::Dncnn { depth, features } => depth * 2 * features * h * w * per_value,
        ModelConfig::Inr {
            hidden_layers,
            width,
            fourier_features,
            ..
        } => (h * w) * (2 * fourier_features + 2 * (hidden_layers + 1) * width) * per_value,
    }
}

/// Fixed Arc'd copy of a mask subset as a projection matrix for tape losses.
pub fn masks_as_matrix(masks: &crate::acquisition::MaskSet) -> Arc<Vec<f64>> {
    Arc::new(masks.data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unet_default_param_count_near_paper_size() {
        let model = build_model(&ModelConfig::unet_default(), 1).unwrap();
        let count = model.param_count();
        assert_eq!(count, analytic_param_count(&ModelConfig::unet_default()));
        assert!(
            (150_000..=250_000).contains(&count),
            "unexpected unet size {count}"
        );
    }

    #[test]
    fn inr_param_count_closed_form() {
        let cfg = ModelConfig::inr_default();
        let model = build_model(&cfg, 2).unwrap();
        // 3 hidden layers of 512 on 512 fourier features, then a scalar head
        let expected = 3 * (512 * 512 + 512) + 512 + 1;
        assert_eq!(model.param_count(), expected);
        assert_eq!(analytic_param_count(&cfg), expected);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&ModelConfig::unet_default(), 33).unwrap();
        let b = build_model(&ModelConfig::unet_default(), 33).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.values, pb.values);
        }
        let c = build_model(&ModelConfig::unet_default(), 34).unwrap();
        assert_ne!(a.params[0].values, c.params[0].values);
    }

    #[test]
    fn unet_output_shape_matches_input() {
        let model = build_model(
            &ModelConfig::Unet {
                features: 4,
                levels: 2,
            },
            5,
        )
        .unwrap();
        for (h, w) in [(8, 8), (9, 7), (6, 10)] {
            let img = Image::constant(h, w, 0.3);
            let out = model.forward_image(&img).unwrap();
            assert_eq!((out.height, out.width), (h, w));
            assert!(out.is_finite());
        }
    }

    #[test]
    fn zero_params_give_zero_unet_output() {
        let mut model = build_model(
            &ModelConfig::Unet {
                features: 4,
                levels: 2,
            },
            5,
        )
        .unwrap();
        for p in model.params.iter_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let img = Image::constant(8, 8, 1.0);
        let out = model.forward_image(&img).unwrap();
        assert!(out.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inr_zero_head_renders_zero() {
        let mut model = build_model(
            &ModelConfig::Inr {
                hidden_layers: 2,
                width: 8,
                fourier_features: 4,
                freq_scale: 3.0,
            },
            6,
        )
        .unwrap();
        let n = model.params.len();
        model.params[n - 2].values.iter_mut().for_each(|v| *v = 0.0);
        model.params[n - 1].values.iter_mut().for_each(|v| *v = 0.0);
        let out = model.render_coordinates(4, 4).unwrap();
        assert!(out.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inr_render_deterministic() {
        let model = build_model(
            &ModelConfig::Inr {
                hidden_layers: 2,
                width: 8,
                fourier_features: 4,
                freq_scale: 3.0,
            },
            6,
        )
        .unwrap();
        let a = model.render_coordinates(5, 5).unwrap();
        let b = model.render_coordinates(5, 5).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert!(a.is_finite());
    }
}
