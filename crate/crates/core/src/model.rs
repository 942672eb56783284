//! The dual-decoder U-net.
//!
//! One encoder and bottleneck are shared by a main decoder and an auxiliary
//! decoder with independent parameters. The auxiliary decoder sees the
//! bottleneck features after multiplicative uniform noise. With attention
//! enabled the forward pass runs twice through the main decoder: pass 1
//! produces the logits from which attention is derived, pass 2 decodes the
//! attended bottleneck into the final prediction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attention::{confidence_bundle, ConfidenceBundle};
use crate::error::{Error, Result};
use crate::graph::{perturb_values, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Half-width of the uniform feature noise on the auxiliary branch.
pub const NOISE_AMPLITUDE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Including background.
    pub num_classes: usize,
    /// Number of 2x downsamplings between input and bottleneck.
    pub depth: usize,
    pub base_channels: usize,
    /// Side length of the square network input.
    pub input_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { in_channels: 1, num_classes: 5, depth: 4, base_channels: 32, input_size: 256 }
    }
}

impl NetworkConfig {
    /// Small configuration used for desk-scale experiments and tests.
    pub fn desk(num_classes: usize) -> Self {
        NetworkConfig { in_channels: 1, num_classes, depth: 2, base_channels: 8, input_size: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.num_classes > 256 {
            return Err(Error::Config("at most 256 classes are supported".into()));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        let factor = 1usize << self.depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{} = {}",
                self.input_size, self.depth, factor
            )));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `[c_b, h_b, w_b]` of the bottleneck features.
    pub fn bottleneck_shape(&self) -> [usize; 3] {
        let s = self.input_size >> self.depth;
        [self.channels_at(self.depth), s, s]
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    conv1_w: usize,
    conv1_b: usize,
    norm1_g: usize,
    norm1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    norm2_g: usize,
    norm2_b: usize,
}

#[derive(Clone, Debug)]
struct Decoder {
    /// Deepest level first.
    blocks: Vec<ConvBlock>,
    head_w: usize,
    head_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderRole {
    Main,
    Aux,
}

impl DecoderRole {
    fn prefix(self) -> &'static str {
        match self {
            DecoderRole::Main => "main",
            DecoderRole::Aux => "aux",
        }
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Bottleneck,
    Decoder(DecoderRole),
}

/// Source of the uniform noise applied to the auxiliary branch.
pub trait NoiseSource<T> {
    fn fill(&mut self, out: &mut [T]);
}

/// `U(-0.3, 0.3)` noise drawn from a random stream.
#[derive(Clone, Debug)]
pub struct FeatureNoise<R> {
    rng: R,
    dist: Uniform<f64>,
}

impl<R: Rng> FeatureNoise<R> {
    pub fn new(rng: R) -> Self {
        FeatureNoise { rng, dist: Uniform::new_inclusive(-NOISE_AMPLITUDE, NOISE_AMPLITUDE).unwrap() }
    }

    pub fn rng(&self) -> &R {
        &self.rng
    }

    pub fn into_inner(self) -> R {
        self.rng
    }
}

impl<T: Scalar, R: Rng> NoiseSource<T> for FeatureNoise<R> {
    fn fill(&mut self, out: &mut [T]) {
        for v in out {
            *v = T::lit(self.dist.sample(&mut self.rng));
        }
    }
}

/// The same value everywhere; `ConstantNoise(0.0)` disables the perturbation.
#[derive(Clone, Copy, Debug)]
pub struct ConstantNoise(pub f64);

impl<T: Scalar> NoiseSource<T> for ConstantNoise {
    fn fill(&mut self, out: &mut [T]) {
        out.fill(T::lit(self.0));
    }
}

fn sample_noise<T: Scalar>(shape: [usize; 4], noise: &mut impl NoiseSource<T>) -> Tensor<T> {
    let mut n = Tensor::zeros(shape);
    noise.fill(n.data_mut());
    n
}

/// `z + z * n` with `n` drawn once, elementwise, from `noise`.
pub fn perturb_features<T: Scalar>(z: &Tensor<T>, noise: &mut impl NoiseSource<T>) -> Tensor<T> {
    let n = sample_noise(z.shape(), noise);
    perturb_values(z, &n)
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub main_pass1: Tensor<T>,
    pub aux: Tensor<T>,
    /// Present only when attention is enabled.
    pub confidence: Option<ConfidenceBundle<T>>,
    pub main_final: Tensor<T>,
}

/// Graph handles for one forward pass recorded on a [`Graph`].
#[derive(Clone, Debug)]
pub struct ForwardVars<T> {
    pub bottleneck: Var,
    pub main_pass1: Var,
    pub aux: Var,
    pub main_final: Var,
    pub confidence: Option<ConfidenceBundle<T>>,
}

impl<T: Scalar> ForwardVars<T> {
    pub fn output(&self, g: &Graph<T>) -> ModelOutput<T> {
        ModelOutput {
            main_pass1: g.value(self.main_pass1).clone(),
            aux: g.value(self.aux).clone(),
            confidence: self.confidence.clone(),
            main_final: g.value(self.main_final).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    params: ParamSet<T>,
    groups: Vec<ParamGroup>,
    encoder: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    main: Decoder,
    aux: Decoder,
}

struct Builder<'a, T> {
    params: ParamSet<T>,
    groups: Vec<ParamGroup>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, group: ParamGroup, name: &str, cin: usize, cout: usize, k: usize) -> (usize, usize) {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let n = cout * cin * k * k;
        let w: Vec<T> = (0..n).map(|_| T::lit(normal.sample(self.rng))).collect();
        let w = self.add(group, format!("{name}.weight"), Tensor::from_vec([cout, cin, k, k], w).unwrap());
        let b = self.add(group, format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]));
        (w, b)
    }

    fn norm(&mut self, group: ParamGroup, name: &str, c: usize) -> (usize, usize) {
        let g = self.add(group, format!("{name}.gamma"), Tensor::ones([1, c, 1, 1]));
        let b = self.add(group, format!("{name}.beta"), Tensor::zeros([1, c, 1, 1]));
        (g, b)
    }

    fn add(&mut self, group: ParamGroup, name: String, t: Tensor<T>) -> usize {
        self.groups.push(group);
        self.params.push(name, t)
    }

    fn block(&mut self, group: ParamGroup, name: &str, cin: usize, cout: usize) -> ConvBlock {
        let (conv1_w, conv1_b) = self.conv(group, &format!("{name}.conv1"), cin, cout, 3);
        let (norm1_g, norm1_b) = self.norm(group, &format!("{name}.norm1"), cout);
        let (conv2_w, conv2_b) = self.conv(group, &format!("{name}.conv2"), cout, cout, 3);
        let (norm2_g, norm2_b) = self.norm(group, &format!("{name}.norm2"), cout);
        ConvBlock { conv1_w, conv1_b, norm1_g, norm1_b, conv2_w, conv2_b, norm2_g, norm2_b }
    }

    fn decoder(&mut self, cfg: &NetworkConfig, role: DecoderRole) -> Decoder {
        let group = ParamGroup::Decoder(role);
        let p = role.prefix();
        let blocks = (0..cfg.depth)
            .rev()
            .map(|level| {
                let cin = cfg.channels_at(level + 1) + cfg.channels_at(level);
                self.block(group, &format!("{p}.up{level}"), cin, cfg.channels_at(level))
            })
            .collect();
        let (head_w, head_b) = self.conv(group, &format!("{p}.head"), cfg.base_channels, cfg.num_classes, 1);
        Decoder { blocks, head_w, head_b }
    }
}

impl<T: Scalar> Network<T> {
    /// Builds a network with He-normal convolution weights drawn from a
    /// ChaCha stream seeded with `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: ParamSet::new(), groups: Vec::new(), rng: &mut rng };
        let encoder = (0..config.depth)
            .map(|level| {
                let cin = if level == 0 { config.in_channels } else { config.channels_at(level - 1) };
                b.block(ParamGroup::Encoder, &format!("enc{level}"), cin, config.channels_at(level))
            })
            .collect();
        let bottleneck = b.block(
            ParamGroup::Bottleneck,
            "bottleneck",
            config.channels_at(config.depth - 1),
            config.channels_at(config.depth),
        );
        let main = b.decoder(&config, DecoderRole::Main);
        let aux = b.decoder(&config, DecoderRole::Aux);
        let Builder { params, groups, .. } = b;
        Ok(Network { config, params, groups, encoder, bottleneck, main, aux })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn param_group(&self, index: usize) -> ParamGroup {
        self.groups[index]
    }

    /// Replaces every parameter; shapes and count must match.
    pub fn load_params(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (i, (old, new)) in self.params.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.params.names[i],
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.params.tensors = tensors;
        Ok(())
    }

    /// Copies the main decoder's parameters into the auxiliary decoder.
    pub fn tie_aux_to_main(&mut self) {
        let main: Vec<usize> = self.indices(ParamGroup::Decoder(DecoderRole::Main));
        let aux: Vec<usize> = self.indices(ParamGroup::Decoder(DecoderRole::Aux));
        for (m, a) in main.into_iter().zip(aux) {
            self.params.tensors[a] = self.params.tensors[m].clone();
        }
    }

    pub fn indices(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.groups.len()).filter(|&i| self.groups[i] == group).collect()
    }

    /// Places every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        let [_, c, h, w] = image.shape();
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::Shape(format!(
                "network expects [n, {}, {s}, {s}] input, got {:?}",
                self.config.in_channels,
                image.shape()
            )));
        }
        Ok(())
    }

    fn block(&self, g: &mut Graph<T>, p: &[Var], b: &ConvBlock, x: Var) -> Var {
        let h = g.conv2d(x, p[b.conv1_w], p[b.conv1_b]);
        let h = g.instance_norm(h, p[b.norm1_g], p[b.norm1_b]);
        let h = g.relu(h);
        let h = g.conv2d(h, p[b.conv2_w], p[b.conv2_b]);
        let h = g.instance_norm(h, p[b.norm2_g], p[b.norm2_b]);
        g.relu(h)
    }

    /// Encoder and bottleneck. Returns the skip features (shallowest first)
    /// and the bottleneck features.
    pub fn encode(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> (Vec<Var>, Var) {
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for blk in &self.encoder {
            let f = self.block(g, p, blk, h);
            skips.push(f);
            h = g.max_pool2(f);
        }
        let z = self.block(g, p, &self.bottleneck, h);
        (skips, z)
    }

    pub fn decode(&self, g: &mut Graph<T>, p: &[Var], role: DecoderRole, z: Var, skips: &[Var]) -> Var {
        let dec = match role {
            DecoderRole::Main => &self.main,
            DecoderRole::Aux => &self.aux,
        };
        let mut h = z;
        for (blk, skip) in dec.blocks.iter().zip(skips.iter().rev()) {
            let [_, _, sh, sw] = g.value(*skip).shape();
            let up = g.resize(h, sh, sw);
            let cat = g.concat(up, *skip);
            h = self.block(g, p, blk, cat);
        }
        g.conv2d(h, p[dec.head_w], p[dec.head_b])
    }

    /// Records the full forward pass on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        image: &Tensor<T>,
        udba: bool,
        noise: &mut impl NoiseSource<T>,
    ) -> Result<ForwardVars<T>> {
        self.check_input(image)?;
        let x = g.input(image.clone());
        let (skips, z) = self.encode(g, p, x);
        let main_pass1 = self.decode(g, p, DecoderRole::Main, z, &skips);
        let n = sample_noise(g.value(z).shape(), noise);
        let z_aux = g.perturb(z, n);
        let aux = self.decode(g, p, DecoderRole::Aux, z_aux, &skips);
        if !udba {
            return Ok(ForwardVars { bottleneck: z, main_pass1, aux, main_final: main_pass1, confidence: None });
        }
        let target = self.config.bottleneck_shape();
        let bundle = confidence_bundle(g.value(main_pass1), g.value(aux), target)?;
        if bundle.attention.projected.shape() != g.value(z).shape() {
            return Err(Error::Contract(format!(
                "projected attention {:?} vs bottleneck {:?}",
                bundle.attention.projected.shape(),
                g.value(z).shape()
            )));
        }
        // The attention enters as a constant: no gradient reaches the
        // decoder outputs it was derived from.
        let z_att = g.scale(z, bundle.attention.projected.clone());
        let main_final = self.decode(g, p, DecoderRole::Main, z_att, &skips);
        Ok(ForwardVars { bottleneck: z, main_pass1, aux, main_final, confidence: Some(bundle) })
    }

    /// Inference forward pass.
    pub fn forward(&self, image: &Tensor<T>, udba: bool, noise: &mut impl NoiseSource<T>) -> Result<ModelOutput<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let vars = self.forward_graph(&mut g, &p, image, udba, noise)?;
        Ok(vars.output(&g))
    }

    /// Bottleneck features for `image`, without decoding.
    pub fn bottleneck(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(image)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.input(image.clone());
        let (_, z) = self.encode(&mut g, &p, x);
        Ok(g.value(z).clone())
    }
}
