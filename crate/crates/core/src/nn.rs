//! Layers: parameter store, convolutions, FiLM fusion, point-wise DASPP and
//! the encoder/decoder stages of the dual-stream depth network.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: Vec<Param>,
}

impl Params {
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Param { name: name.into(), value });
        ParamId(self.entries.len() - 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Checksum over all parameter bits, in registration order.
    pub fn checksum(&self) -> u64 {
        self.entries
            .iter()
            .fold(0u64, |h, p| h.rotate_left(5) ^ p.value.checksum())
    }

    /// Replaces values from `(name, tensor)` pairs; every parameter must be
    /// supplied with its registered shape.
    pub fn load(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::InvalidModel(format!(
                "expected {} parameters, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (name, t) in values {
            let slot = self
                .entries
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::InvalidModel(format!("unknown parameter `{name}`")))?;
            if slot.value.shape() != t.shape() {
                return Err(Error::ShapeIncompatible(slot.value.shape().to_vec(), t.shape().to_vec()));
            }
            slot.value = t;
        }
        Ok(())
    }

    /// Puts every parameter on the graph. Frozen bindings are constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|p| if trainable { g.param(p.value.clone()) } else { g.constant(p.value.clone()) })
                .collect(),
        )
    }
}

/// Graph handles of a [`Params`] store for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// 2-D convolution layer with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = libm::sqrt(2.0 / fan_in);
        let w = Tensor::from_fn(&[out_channels, in_channels, kernel, kernel], |_| rng.normal() * std);
        let weight = params.register(format!("{name}.weight"), w);
        let bias = params.register(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self { weight, bias, in_channels, out_channels, kernel, stride, padding, dilation }
    }

    pub fn pointwise(params: &mut Params, rng: &mut Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(params, rng, name, cin, cout, 1, 1, 0, 1)
    }

    /// 3x3 conv whose padding equals its dilation, preserving size at stride 1.
    pub fn same3x3(params: &mut Params, rng: &mut Rng, name: &str, cin: usize, cout: usize, stride: usize, dilation: usize) -> Self {
        Self::new(params, rng, name, cin, cout, 3, stride, dilation, dilation)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, b.var(self.weight), b.var(self.bias), self.stride, self.padding, self.dilation)
    }

    pub fn scalar_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// `(1 + gamma) * f_i + beta` with per-channel `gamma`, `beta` of shape `C x 1 x 1`.
pub fn film_modulate(g: &mut Graph, f_i: Var, gamma: Var, beta: Var) -> Result<Var> {
    let (c, _, _) = g.value(f_i).chw()?;
    for v in [gamma, beta] {
        if g.shape(v) != [c, 1, 1] {
            return Err(Error::ShapeIncompatible(g.shape(f_i).to_vec(), g.shape(v).to_vec()));
        }
    }
    let scale = g.affine(gamma, 1.0, 1.0);
    let scaled = g.mul(f_i, scale)?;
    g.add(scaled, beta)
}

/// The two 1x1 convolutions producing the FiLM scale and shift from radar features.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub gamma_conv: Conv,
    pub beta_conv: Conv,
}

impl FilmParams {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, radar_channels: usize, image_channels: usize) -> Self {
        Self {
            gamma_conv: Conv::pointwise(params, rng, &format!("{name}.gamma"), radar_channels, image_channels),
            beta_conv: Conv::pointwise(params, rng, &format!("{name}.beta"), radar_channels, image_channels),
        }
    }
}

/// FiLM fusion: 1x1 convs on the radar features, spatially averaged to
/// `C x 1 x 1`, then [`film_modulate`] of the image features.
pub fn film_fuse(g: &mut Graph, b: &Bound, f_r: Var, f_i: Var, p: &FilmParams) -> Result<Var> {
    let (_, hr, wr) = g.value(f_r).chw()?;
    let (_, hi, wi) = g.value(f_i).chw()?;
    if (hr, wr) != (hi, wi) {
        return Err(Error::ShapeIncompatible(g.shape(f_r).to_vec(), g.shape(f_i).to_vec()));
    }
    let gamma_map = p.gamma_conv.forward(g, b, f_r)?;
    let beta_map = p.beta_conv.forward(g, b, f_r)?;
    let gamma = g.global_avg_pool(gamma_map)?;
    let beta = g.global_avg_pool(beta_map)?;
    film_modulate(g, f_i, gamma, beta)
}

/// Dilation rates for the three DASPP decoder stages (1/32, 1/16, 1/8).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DasppConfig {
    pub rates: [Vec<usize>; 3],
}

impl Default for DasppConfig {
    fn default() -> Self {
        Self { rates: [vec![1, 2, 4], vec![2, 4, 8], vec![3, 6, 12]] }
    }
}

impl DasppConfig {
    pub fn validate(&self) -> Result<()> {
        for stage in &self.rates {
            if stage.is_empty() || stage.contains(&0) || stage.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidModel(format!("DASPP rates must be positive and strictly increasing: {stage:?}")));
            }
        }
        Ok(())
    }
}

/// Point-wise DASPP: a 1x1 branch plus one 3x3 atrous branch per rate, each
/// followed by ReLU and padded to keep `H x W`; the branch outputs are added to
/// the input and a final 1x1 conv projects back to `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Daspp {
    pub pointwise: Conv,
    pub atrous: Vec<Conv>,
    pub project: Conv,
}

impl Daspp {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, channels: usize, rates: &[usize]) -> Self {
        let pointwise = Conv::pointwise(params, rng, &format!("{name}.branch1x1"), channels, channels);
        let atrous = rates
            .iter()
            .map(|&r| Conv::same3x3(params, rng, &format!("{name}.atrous{r}"), channels, channels, 1, r))
            .collect();
        let project = Conv::pointwise(params, rng, &format!("{name}.project"), channels, channels);
        // The residual sum adds rates.len() + 2 non-negative, correlated terms
        // and no ReLU follows; scale so the block starts with roughly unit gain.
        let gain = 1.0 / ((rates.len() + 2) as f64 * core::f64::consts::SQRT_2);
        params.get_mut(project.weight).data_mut().iter_mut().for_each(|w| *w *= gain);
        Self { pointwise, atrous, project }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, f: Var) -> Result<Var> {
        let mut acc = f;
        for conv in core::iter::once(&self.pointwise).chain(&self.atrous) {
            let y = conv.forward(g, b, f)?;
            let y = g.relu(y);
            acc = g.add(acc, y)?;
        }
        self.project.forward(g, b, acc)
    }
}

/// Initial bias of convolutions followed by a ReLU. Keeps units fed by
/// all-zero input (most of the sparse radar map) off the kink at 0.
pub const RELU_BIAS: f64 = 0.01;

fn relu_conv(params: &mut Params, conv: Conv) -> Conv {
    *params.get_mut(conv.bias) = Tensor::full(&[conv.out_channels], RELU_BIAS);
    conv
}

/// Stride-2 3x3 conv + ReLU: halves the spatial size (floor for odd sizes).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStage {
    pub conv: Conv,
}

impl EncoderStage {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, cin: usize, cout: usize) -> Self {
        let conv = Conv::same3x3(params, rng, name, cin, cout, 2, 1);
        Self { conv: relu_conv(params, conv) }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, b, x)?;
        Ok(g.relu(y))
    }
}

/// x2 bilinear upsampling, optional skip concatenation, 3x3 conv + ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage {
    pub conv: Conv,
}

impl DecoderStage {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, cin: usize, skip: usize, cout: usize) -> Self {
        let conv = Conv::same3x3(params, rng, name, cin + skip, cout, 1, 1);
        Self { conv: relu_conv(params, conv) }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, skip: Option<Var>) -> Result<Var> {
        let up = g.upsample_bilinear(x, 2)?;
        let input = match skip {
            Some(s) => g.concat(&[up, s])?,
            None => up,
        };
        let y = self.conv.forward(g, b, input)?;
        Ok(g.relu(y))
    }
}
