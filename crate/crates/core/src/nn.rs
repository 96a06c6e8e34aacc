//! The 3D U-Net: conv → instance norm → leaky ReLU blocks, max-pool
//! downsampling, channel-halving 1×1×1 convolutions ahead of trilinear
//! upsampling, and one 1×1×1 segmentation layer per dataset head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Conv3dSpec, Graph, Real, Tensor, Var};

/// Output activation of the segmentation heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Mutually exclusive classes, including background.
    Softmax { num_classes: usize },
    /// Independent (possibly overlapping) region channels.
    Sigmoid { num_regions: usize },
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Softmax { num_classes } => num_classes,
            HeadKind::Sigmoid { num_regions } => num_regions,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Softmax { .. } => "softmax",
            HeadKind::Sigmoid { .. } => "sigmoid",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Feature channels at the highest resolution; doubled at every level.
    pub base_features: usize,
    /// Number of resolution levels.
    pub depth: usize,
    pub head: HeadKind,
    pub leakiness: f64,
    pub num_heads: usize,
    pub norm_eps: f64,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 4,
            base_features: 30,
            depth: 5,
            head: HeadKind::Softmax { num_classes: 4 },
            leakiness: 1e-2,
            num_heads: 1,
            norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for desk-scale runs (base 4, depth 3).
    pub fn tiny() -> Self {
        ModelConfig {
            base_features: 4,
            depth: 3,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return fail("in_channels must be >= 1".into());
        }
        if self.base_features == 0 {
            return fail("base_features must be >= 1".into());
        }
        if self.depth < 2 {
            return fail(format!("depth must be >= 2, got {}", self.depth));
        }
        if self.head.outputs() == 0 {
            return fail("segmentation head needs at least one output channel".into());
        }
        if self.num_heads == 0 {
            return fail("num_heads must be >= 1".into());
        }
        if !(self.leakiness >= 0.0) || !(self.norm_eps > 0.0) {
            return fail("leakiness must be >= 0 and norm_eps > 0".into());
        }
        Ok(())
    }

    /// Feature channels of each encoder level, top to bottom.
    pub fn channel_ladder(&self) -> Vec<usize> {
        (0..self.depth).map(|l| self.base_features << l).collect()
    }

    /// Spatial dims must be multiples of this to survive every pooling step.
    pub fn size_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    weight: usize,
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct UpStage {
    reduce_weight: usize,
    reduce_bias: usize,
    blocks: [ConvBlock; 2],
}

#[derive(Clone, Copy, Debug)]
struct SegHead {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
pub struct UNet<T> {
    cfg: ModelConfig,
    params: Vec<Param<T>>,
    encoder: Vec<[ConvBlock; 2]>,
    /// Ordered bottom-up: `decoder[0]` upsamples from the deepest level.
    decoder: Vec<UpStage>,
    heads: Vec<SegHead>,
}

/// The network's parameters recorded on one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of every parameter after a backward pass, in parameter order.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); g.value(v).numel()])
            })
            .collect()
    }
}

struct Builder<T> {
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
    leakiness: f64,
}

impl<T: Real> Builder<T> {
    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    /// Fan-in scaled uniform init for a leaky-ReLU network.
    fn conv_weight(&mut self, name: String, cout: usize, cin: usize, k: usize) -> usize {
        let fan_in = (cin * k * k * k) as f64;
        let a = self.leakiness;
        let bound = (6.0 / ((1.0 + a * a) * fan_in)).sqrt();
        let shape = [cout, cin, k, k, k];
        let rng = &mut self.rng;
        let t = Tensor::from_fn(&shape, |_| T::of(rng.random_range(-bound..bound)));
        self.push(name, t)
    }

    fn conv_block(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvBlock {
        ConvBlock {
            weight: self.conv_weight(format!("{prefix}.conv.weight"), cout, cin, 3),
            gamma: self.push(format!("{prefix}.norm.gamma"), Tensor::full(&[cout], T::one())),
            beta: self.push(format!("{prefix}.norm.beta"), Tensor::zeros(&[cout])),
        }
    }
}

impl<T: Real> UNet<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            leakiness: cfg.leakiness,
        };
        let ladder = cfg.channel_ladder();
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut cin = cfg.in_channels;
        for (level, &f) in ladder.iter().enumerate() {
            let first = b.conv_block(&format!("enc{level}.block0"), cin, f);
            let second = b.conv_block(&format!("enc{level}.block1"), f, f);
            encoder.push([first, second]);
            cin = f;
        }
        let mut decoder = Vec::with_capacity(cfg.depth - 1);
        for level in (0..cfg.depth - 1).rev() {
            let (below, here) = (ladder[level + 1], ladder[level]);
            let reduce_weight = b.conv_weight(format!("dec{level}.reduce.weight"), here, below, 1);
            let reduce_bias = b.push(format!("dec{level}.reduce.bias"), Tensor::zeros(&[here]));
            let first = b.conv_block(&format!("dec{level}.block0"), 2 * here, here);
            let second = b.conv_block(&format!("dec{level}.block1"), here, here);
            decoder.push(UpStage {
                reduce_weight,
                reduce_bias,
                blocks: [first, second],
            });
        }
        let outputs = cfg.head.outputs();
        let heads = (0..cfg.num_heads)
            .map(|h| SegHead {
                weight: b.conv_weight(format!("head{h}.weight"), outputs, ladder[0], 1),
                bias: b.push(format!("head{h}.bias"), Tensor::zeros(&[outputs])),
            })
            .collect();
        Ok(UNet {
            cfg,
            params: b.params,
            encoder,
            decoder,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Indices (into [`UNet::params`]) of the segmentation layer of `head`.
    pub fn head_param_indices(&self, head: usize) -> Option<[usize; 2]> {
        self.heads.get(head).map(|h| [h.weight, h.bias])
    }

    /// Overwrites head `to` with the weights of head `from`.
    pub fn copy_head(&mut self, from: usize, to: usize) -> Result<()> {
        let (Some(src), Some(dst)) = (self.heads.get(from).copied(), self.heads.get(to).copied())
        else {
            return Err(Error::Index(format!(
                "head {from} or {to} out of range for {} heads",
                self.heads.len()
            )));
        };
        self.params[dst.weight].value = self.params[src.weight].value.clone();
        self.params[dst.bias].value = self.params[src.bias].value.clone();
        Ok(())
    }

    /// Replaces every parameter value; names and shapes must match exactly.
    pub fn load_params(&mut self, params: Vec<Param<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(&params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Records all parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let t = p.value.clone();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        BoundParams { vars }
    }

    fn block(&self, g: &mut Graph<T>, p: &BoundParams, x: Var, b: ConvBlock) -> Result<Var> {
        let v = &p.vars;
        let y = g.conv3d(x, v[b.weight], None, Conv3dSpec::same(3))?;
        let y = g.instance_norm(y, v[b.gamma], v[b.beta], self.cfg.norm_eps)?;
        Ok(g.leaky_relu(y, self.cfg.leakiness))
    }

    /// Shared trunk: encoder and decoder, up to the last feature map.
    pub fn features(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "UNet expects [N, {}, D, H, W] input, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let div = self.cfg.size_divisor();
        if shape[2..].iter().any(|&s| s == 0 || s % div != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {:?} must be positive multiples of {div} for depth {}",
                &shape[2..],
                self.cfg.depth
            )));
        }
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for (level, blocks) in self.encoder.iter().enumerate() {
            if level > 0 {
                h = g.maxpool3d(h, 2, 2)?;
            }
            h = self.block(g, p, h, blocks[0])?;
            h = self.block(g, p, h, blocks[1])?;
            skips.push(h);
        }
        skips.pop();
        for stage in &self.decoder {
            let v = &p.vars;
            h = g.conv3d(
                h,
                v[stage.reduce_weight],
                Some(v[stage.reduce_bias]),
                Conv3dSpec::valid(),
            )?;
            h = g.upsample_trilinear(h, 2)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            h = g.concat(&[skip, h], 1)?;
            h = self.block(g, p, h, stage.blocks[0])?;
            h = self.block(g, p, h, stage.blocks[1])?;
        }
        Ok(h)
    }

    /// Applies segmentation layer `head` to trunk features.
    pub fn head_logits(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        features: Var,
        head: usize,
    ) -> Result<Var> {
        let h = self.heads.get(head).ok_or_else(|| {
            Error::Index(format!(
                "head {head} out of range for {} heads",
                self.heads.len()
            ))
        })?;
        g.conv3d(
            features,
            p.vars[h.weight],
            Some(p.vars[h.bias]),
            Conv3dSpec::valid(),
        )
    }

    /// Logits of head `head` for input `x: [N, in_channels, D, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &BoundParams, x: Var, head: usize) -> Result<Var> {
        if head >= self.heads.len() {
            return Err(Error::Index(format!(
                "head {head} out of range for {} heads",
                self.heads.len()
            )));
        }
        let f = self.features(g, p, x)?;
        self.head_logits(g, p, f, head)
    }

    /// Applies the head's output activation to logits.
    pub fn activate(&self, g: &mut Graph<T>, logits: Var) -> Result<Var> {
        match self.cfg.head {
            HeadKind::Softmax { .. } => g.softmax(logits, 1),
            HeadKind::Sigmoid { .. } => Ok(g.sigmoid(logits)),
        }
    }

    /// Forward pass on a frozen copy of the parameters, returning probabilities.
    pub fn predict(&self, x: Tensor<T>, head: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x);
        let logits = self.forward(&mut g, &p, xv, head)?;
        let probs = self.activate(&mut g, logits)?;
        Ok(g.value(probs).clone())
    }

    /// Rough upper bound of the bytes held by one forward pass over `spatial`.
    pub fn activation_bytes(&self, batch: usize, spatial: [usize; 3]) -> usize {
        let voxels: usize = spatial.iter().product();
        let per_level: usize = self
            .cfg
            .channel_ladder()
            .iter()
            .enumerate()
            // each level stores ~ 8 feature maps (conv, norm, activation for two
            // blocks plus the decoder's concat and upsample)
            .map(|(l, &f)| 8 * f * voxels / (1 << (3 * l)))
            .sum();
        batch * (per_level + voxels * (self.cfg.in_channels + 2 * self.cfg.head.outputs()))
            * std::mem::size_of::<T>()
    }
}
