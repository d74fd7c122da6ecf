//! Dual-encoder radar-camera depth network.
//!
//! Image (3 channels) and radar (2 channels: depth / `RADAR_DEPTH_SCALE`,
//! validity) streams are encoded at five scales 1/2 .. 1/32. The two streams
//! are fused at every scale; the 1/32 fused map seeds a decoder that walks back
//! up to full resolution with skip connections, point-wise DASPP blocks at
//! 1/32, 1/16 and 1/8, and a softplus depth head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{film_fuse, Bound, Conv, Daspp, DasppConfig, DecoderStage, EncoderStage, FilmParams, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Radar depths are divided by this before entering the encoder.
pub const RADAR_DEPTH_SCALE: f64 = 80.0;
/// Metres per unit of head output: depth = DEPTH_UNIT * softplus(logit).
pub const DEPTH_UNIT: f64 = 10.0;
/// Initial depth emitted by a freshly built head, in metres.
pub const INITIAL_DEPTH: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionKind {
    Add,
    Concat,
    Attention,
    Film,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Add => "add",
            FusionKind::Concat => "concat",
            FusionKind::Attention => "attention",
            FusionKind::Film => "film",
        }
    }
}

impl FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(FusionKind::Add),
            "concat" | "concatenate" => Ok(FusionKind::Concat),
            "attention" => Ok(FusionKind::Attention),
            "film" => Ok(FusionKind::Film),
            other => Err(Error::UnknownFusion(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub image_widths: [usize; 5],
    pub radar_widths: [usize; 5],
    /// Decoder output widths at 1/16, 1/8, 1/4, 1/2 and full resolution.
    pub decoder_widths: [usize; 5],
    pub daspp: Option<DasppConfig>,
    pub fusion: FusionKind,
}

impl ModelSpec {
    pub fn student() -> Self {
        Self {
            image_widths: [4, 8, 16, 24, 32],
            radar_widths: [4, 8, 16, 24, 32],
            decoder_widths: [24, 16, 8, 4, 4],
            daspp: Some(DasppConfig::default()),
            fusion: FusionKind::Film,
        }
    }

    /// Same architecture with every width multiplied by `factor`.
    pub fn widened(&self, factor: usize) -> Self {
        let mul = |w: [usize; 5]| w.map(|c| c * factor);
        Self {
            image_widths: mul(self.image_widths),
            radar_widths: mul(self.radar_widths),
            decoder_widths: mul(self.decoder_widths),
            ..self.clone()
        }
    }

    pub fn teacher() -> Self {
        Self::student().widened(4)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.image_widths.iter().chain(&self.radar_widths).chain(&self.decoder_widths);
        if all.into_iter().any(|&w| w == 0) {
            return Err(Error::InvalidModel("all widths must be positive".into()));
        }
        if let Some(d) = &self.daspp {
            d.validate()?;
        }
        Ok(())
    }

    /// True if every width of `self` is at least the matching width of `other`.
    pub fn dominates(&self, other: &ModelSpec) -> bool {
        let ge = |a: &[usize; 5], b: &[usize; 5]| a.iter().zip(b).all(|(x, y)| x >= y);
        ge(&self.image_widths, &other.image_widths)
            && ge(&self.radar_widths, &other.radar_widths)
            && ge(&self.decoder_widths, &other.decoder_widths)
    }

    fn fused_width(&self, level: usize) -> usize {
        match self.fusion {
            FusionKind::Concat => self.image_widths[level] + self.radar_widths[level],
            _ => self.image_widths[level],
        }
    }
}

/// A feature map that can be distilled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerId {
    /// Image encoder output at scale 1/2^level, level 1..=5.
    Image(u8),
    /// Radar encoder output at scale 1/2^level, level 1..=5.
    Radar(u8),
    /// Decoder output at scale 1/2^level, level 0..=4.
    Decoder(u8),
}

impl LayerId {
    /// Image encoder, radar encoder and decoder at 1/16.
    pub const DEFAULT_SET: [LayerId; 3] = [LayerId::Image(4), LayerId::Radar(4), LayerId::Decoder(4)];

    fn valid(self) -> bool {
        match self {
            LayerId::Image(l) | LayerId::Radar(l) => (1..=5).contains(&l),
            LayerId::Decoder(l) => l <= 4,
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (name, level) = match *self {
            LayerId::Image(l) => ("image", l),
            LayerId::Radar(l) => ("radar", l),
            LayerId::Decoder(l) => ("decoder", l),
        };
        write!(f, "{name}@{}", 1u32 << level)
    }
}

impl FromStr for LayerId {
    type Err = Error;
    /// `"image@16"`, `"radar@16"`, `"decoder@16"`, ... (the number is the downscale factor).
    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::UnknownLayer(s.into());
        let (name, scale) = s.trim().split_once('@').ok_or_else(err)?;
        let scale: u32 = scale.parse().map_err(|_| err())?;
        if !scale.is_power_of_two() {
            return Err(err());
        }
        let level = scale.trailing_zeros() as u8;
        let id = match name {
            "image" => LayerId::Image(level),
            "radar" => LayerId::Radar(level),
            "decoder" => LayerId::Decoder(level),
            _ => return Err(err()),
        };
        id.valid().then_some(id).ok_or_else(err)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Fusion {
    Add(Conv),
    Concat,
    Attention(Conv),
    Film(FilmParams),
}

impl Fusion {
    fn forward(&self, g: &mut Graph, b: &Bound, radar: Var, image: Var) -> Result<Var> {
        match self {
            Fusion::Add(proj) => {
                let r = proj.forward(g, b, radar)?;
                g.add(image, r)
            }
            Fusion::Concat => g.concat(&[image, radar]),
            Fusion::Attention(gate) => {
                let logits = gate.forward(g, b, radar)?;
                let pooled = g.global_avg_pool(logits)?;
                let weights = g.sigmoid(pooled);
                g.mul(image, weights)
            }
            Fusion::Film(p) => film_fuse(g, b, radar, image, p),
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Predicted depth, `H x W`, metres.
    pub depth: Var,
    pub image: [Var; 5],
    pub radar: [Var; 5],
    pub fused: [Var; 5],
    /// Decoder outputs at 1/16, 1/8, 1/4, 1/2, 1/1.
    pub decoder: [Var; 5],
}

impl Forward {
    pub fn layer(&self, id: LayerId) -> Var {
        match id {
            LayerId::Image(l) => self.image[l as usize - 1],
            LayerId::Radar(l) => self.radar[l as usize - 1],
            LayerId::Decoder(l) => self.decoder[4 - l as usize],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthNet {
    spec: ModelSpec,
    params: Params,
    image_enc: Vec<EncoderStage>,
    radar_enc: Vec<EncoderStage>,
    fusion: Vec<Fusion>,
    daspp: Vec<Daspp>,
    decoder: Vec<DecoderStage>,
    head: Conv,
}

impl DepthNet {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = Params::default();
        let mut rng = Rng::new(seed);
        let p = &mut params;
        let r = &mut rng;

        let mut image_enc = Vec::new();
        let mut radar_enc = Vec::new();
        let (mut ci, mut cr) = (3, 2);
        for level in 0..5 {
            image_enc.push(EncoderStage::new(p, r, &format!("image.enc{}", level + 1), ci, spec.image_widths[level]));
            radar_enc.push(EncoderStage::new(p, r, &format!("radar.enc{}", level + 1), cr, spec.radar_widths[level]));
            ci = spec.image_widths[level];
            cr = spec.radar_widths[level];
        }
        let fusion = (0..5)
            .map(|level| {
                let name = format!("fuse{}", level + 1);
                let (cr, ci) = (spec.radar_widths[level], spec.image_widths[level]);
                match spec.fusion {
                    FusionKind::Add => Fusion::Add(Conv::pointwise(p, r, &format!("{name}.proj"), cr, ci)),
                    FusionKind::Concat => Fusion::Concat,
                    FusionKind::Attention => Fusion::Attention(Conv::pointwise(p, r, &format!("{name}.gate"), cr, ci)),
                    FusionKind::Film => Fusion::Film(FilmParams::new(p, r, &name, cr, ci)),
                }
            })
            .collect();

        let mut daspp = Vec::new();
        let mut decoder = Vec::new();
        let mut c = spec.fused_width(4);
        if let Some(cfg) = &spec.daspp {
            daspp.push(Daspp::new(p, r, "daspp32", c, &cfg.rates[0]));
        }
        for (i, &out) in spec.decoder_widths.iter().enumerate() {
            // Decoder stage i produces scale 1/2^(4 - i); its skip is the fused map at that scale.
            let skip = if i < 4 { spec.fused_width(3 - i) } else { 0 };
            decoder.push(DecoderStage::new(p, r, &format!("dec{}", 1u32 << (4 - i)), c, skip, out));
            c = out;
            if let (Some(cfg), true) = (&spec.daspp, i < 2) {
                daspp.push(Daspp::new(p, r, &format!("daspp{}", 1u32 << (4 - i)), c, &cfg.rates[i + 1]));
            }
        }
        let head = Conv::pointwise(p, r, "head", c, 1);
        let initial_bias = libm::log(libm::expm1(INITIAL_DEPTH / DEPTH_UNIT));
        for param in params.iter_mut() {
            if param.name == "head.bias" {
                param.value = Tensor::full(&[1], initial_bias);
            }
        }

        Ok(Self { spec: spec.clone(), params, image_enc, radar_enc, fusion, daspp, decoder, head })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Runs the network on a `3 x H x W` image and a `2 x H x W` radar input.
    /// Layers listed in `watch` are wrapped with [`Graph::watch`] so gradients
    /// can be read at them even when the parameters are bound as constants.
    pub fn forward(&self, g: &mut Graph, b: &Bound, image: Var, radar: Var, watch: &[LayerId]) -> Result<Forward> {
        let (ci, h, w) = g.value(image).chw()?;
        let (cr, hr, wr) = g.value(radar).chw()?;
        if ci != 3 || cr != 2 || (h, w) != (hr, wr) {
            return Err(Error::ShapeIncompatible(g.shape(image).to_vec(), g.shape(radar).to_vec()));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::SceneSize { height: h, width: w });
        }
        let mark = |g: &mut Graph, id: LayerId, v: Var| if watch.contains(&id) { g.watch(v) } else { v };

        let (mut xi, mut xr) = (image, radar);
        let mut img = [image; 5];
        let mut rad = [radar; 5];
        for level in 0..5 {
            xi = self.image_enc[level].forward(g, b, xi)?;
            xi = mark(g, LayerId::Image(level as u8 + 1), xi);
            xr = self.radar_enc[level].forward(g, b, xr)?;
            xr = mark(g, LayerId::Radar(level as u8 + 1), xr);
            img[level] = xi;
            rad[level] = xr;
        }
        let mut fused = [image; 5];
        for level in 0..5 {
            fused[level] = self.fusion[level].forward(g, b, rad[level], img[level])?;
        }

        let mut x = fused[4];
        let mut daspp = self.daspp.iter();
        if let Some(block) = daspp.next() {
            x = block.forward(g, b, x)?;
        }
        let mut dec = [image; 5];
        for (i, stage) in self.decoder.iter().enumerate() {
            let skip = (i < 4).then(|| fused[3 - i]);
            x = stage.forward(g, b, x, skip)?;
            if i < 2 {
                if let Some(block) = daspp.next() {
                    x = block.forward(g, b, x)?;
                }
            }
            x = mark(g, LayerId::Decoder(4 - i as u8), x);
            dec[i] = x;
        }
        let logits = self.head.forward(g, b, x)?;
        let positive = g.softplus(logits);
        let positive = g.scale(positive, DEPTH_UNIT);
        let depth = g.reshape(positive, &[h, w])?;
        Ok(Forward { depth, image: img, radar: rad, fused, decoder: dec })
    }
}

/// Builds the 2-channel radar input: scaled depth and a 0/1 validity map.
pub fn radar_input(radar_depth: &Tensor) -> Result<Tensor> {
    let (_, h, w) = radar_depth.chw()?;
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend(radar_depth.data().iter().map(|&d| d / RADAR_DEPTH_SCALE));
    data.extend(radar_depth.data().iter().map(|&d| if d > 0.0 { 1.0 } else { 0.0 }));
    Tensor::new(&[2, h, w], data)
}

/// One-line summary used in reports.
pub fn describe(spec: &ModelSpec) -> String {
    format!(
        "fusion={} daspp={} image={:?} radar={:?} decoder={:?}",
        spec.fusion.as_str(),
        spec.daspp.is_some(),
        spec.image_widths,
        spec.radar_widths,
        spec.decoder_widths
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn inputs(g: &mut Graph, seed: u64, h: usize, w: usize) -> (Var, Var) {
        let mut rng = Rng::new(seed);
        let img = g.constant(random_tensor(&mut rng, &[3, h, w], 0.0).map(|v| 0.5 + 0.5 * v));
        let rad = g.constant(random_tensor(&mut rng, &[2, h, w], 0.0).map(|v| v.abs()));
        (img, rad)
    }

    #[test]
    fn output_shape_and_positivity() {
        let net = DepthNet::new(&ModelSpec::student(), 1).unwrap();
        let mut g = Graph::new();
        let b = net.params().bind(&mut g, false);
        let (img, rad) = inputs(&mut g, 2, 64, 128);
        let out = net.forward(&mut g, &b, img, rad, &[]).unwrap();
        assert_eq!(g.shape(out.depth), &[64, 128]);
        assert!(g.value(out.depth).data().iter().all(|&d| d > 0.0 && d.is_finite()));
        assert_eq!(g.shape(out.layer(LayerId::Image(4))), &[24, 4, 8]);
        assert_eq!(g.shape(out.layer(LayerId::Radar(4))), &[24, 4, 8]);
        assert_eq!(g.shape(out.layer(LayerId::Decoder(4))), &[24, 4, 8]);
        assert_eq!(g.shape(out.layer(LayerId::Decoder(0))), &[4, 64, 128]);
    }

    #[test]
    fn rejects_sizes_not_divisible_by_32() {
        let net = DepthNet::new(&ModelSpec::student(), 1).unwrap();
        let mut g = Graph::new();
        let b = net.params().bind(&mut g, false);
        let (img, rad) = inputs(&mut g, 2, 48, 64);
        assert!(matches!(net.forward(&mut g, &b, img, rad, &[]), Err(Error::SceneSize { .. })));
    }

    #[test]
    fn teacher_is_larger_than_student() {
        let s = DepthNet::new(&ModelSpec::student(), 1).unwrap();
        let t = DepthNet::new(&ModelSpec::teacher(), 1).unwrap();
        assert!(t.param_count() > s.param_count());
        assert!(ModelSpec::teacher().dominates(&ModelSpec::student()));
    }

    #[test]
    fn layer_ids_parse_and_print() {
        for id in LayerId::DEFAULT_SET {
            assert_eq!(id.to_string().parse::<LayerId>().unwrap(), id);
        }
        assert_eq!("decoder@16".parse::<LayerId>().unwrap(), LayerId::Decoder(4));
        assert!("image@64".parse::<LayerId>().is_err());
        assert!("lidar@16".parse::<LayerId>().is_err());
        assert!("image@3".parse::<LayerId>().is_err());
    }

    /// Hand inventory of a two-width toy spec; every conv counted as out*in*k*k + out.
    #[test]
    fn param_count_matches_layer_inventory() {
        let spec = ModelSpec {
            image_widths: [2, 2, 2, 2, 2],
            radar_widths: [1, 1, 1, 1, 1],
            decoder_widths: [2, 2, 2, 2, 2],
            daspp: Some(DasppConfig { rates: [alloc::vec![1], alloc::vec![1], alloc::vec![1]] }),
            fusion: FusionKind::Film,
        };
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let image = conv(3, 2, 3) + 4 * conv(2, 2, 3);
        let radar = conv(2, 1, 3) + 4 * conv(1, 1, 3);
        let film = 5 * 2 * conv(1, 2, 1);
        let daspp = 3 * (conv(2, 2, 1) + conv(2, 2, 3) + conv(2, 2, 1));
        let decoder = 4 * conv(4, 2, 3) + conv(2, 2, 3);
        let head = conv(2, 1, 1);
        let expected = image + radar + film + daspp + decoder + head;
        // 208 image + 59 radar + 40 film + 150 daspp + 334 decoder + 3 head
        assert_eq!(expected, 794);
        assert_eq!(DepthNet::new(&spec, 0).unwrap().param_count(), expected);

        let no_daspp = ModelSpec { daspp: None, ..spec.clone() };
        assert_eq!(DepthNet::new(&no_daspp, 0).unwrap().param_count(), expected - daspp);
    }

    #[test]
    fn fusion_variant_orderings() {
        let count = |fusion, daspp: bool| {
            let mut spec = ModelSpec::student();
            spec.fusion = fusion;
            if !daspp {
                spec.daspp = None;
            }
            DepthNet::new(&spec, 0).unwrap().param_count()
        };
        assert!(count(FusionKind::Concat, true) > count(FusionKind::Add, true));
        assert!(count(FusionKind::Film, true) > count(FusionKind::Film, false));
        assert!(count(FusionKind::Film, true) > count(FusionKind::Add, true));
    }

    #[test]
    fn radar_input_channels() {
        let d = Tensor::new(&[1, 2], alloc::vec![0.0, 40.0]).unwrap();
        let r = radar_input(&d).unwrap();
        assert_eq!(r.shape(), &[2, 1, 2]);
        assert_eq!(r.data(), &[0.0, 0.5, 0.0, 1.0]);
    }
}
