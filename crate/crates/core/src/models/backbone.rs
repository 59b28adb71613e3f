use candle_core::{Module, ModuleT, Result, Tensor, D};
use candle_nn::{batch_norm, conv2d, conv2d_no_bias, linear, BatchNorm, Conv2d, Conv2dConfig, Linear, VarBuilder};

fn conv_cfg(padding: usize, stride: usize) -> Conv2dConfig {
    Conv2dConfig { padding, stride, ..Default::default() }
}

/// Two conv/pool stages, a 4x4 average pool and a projection to `dim`.
/// Input side must be a multiple of 16.
#[derive(Debug, Clone)]
pub struct TinyNet {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
    pool: usize,
}

impl TinyNet {
    pub const C1: usize = 16;
    pub const C2: usize = 32;

    pub fn new(vb: VarBuilder, resolution: usize, dim: usize) -> Result<Self> {
        if resolution < 16 || !resolution.is_multiple_of(16) {
            candle_core::bail!("tiny backbone needs a resolution that is a multiple of 16, got {resolution}");
        }
        Ok(Self {
            conv1: conv2d(3, Self::C1, 3, conv_cfg(1, 1), vb.pp("conv1"))?,
            conv2: conv2d(Self::C1, Self::C2, 3, conv_cfg(1, 1), vb.pp("conv2"))?,
            fc: linear(Self::C2 * 16, dim, vb.pp("fc"))?,
            pool: resolution / 16,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let xs = self.conv1.forward(xs)?.relu()?.max_pool2d(2)?;
        let xs = self.conv2.forward(&xs)?.relu()?.max_pool2d(2)?;
        let xs = if self.pool > 1 { xs.avg_pool2d(self.pool)? } else { xs };
        self.fc.forward(&xs.flatten_from(1)?)?.relu()
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new(vb: VarBuilder, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let conv = conv2d_no_bias(c_in, c_out, k, conv_cfg(k / 2, stride), vb.pp("conv"))?;
        let bn = batch_norm(c_out, 1e-5, vb.pp("bn"))?;
        Ok(Self { conv, bn })
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward_t(&self.conv.forward(xs)?, train)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: ConvBn,
    spatial: ConvBn,
    expand: ConvBn,
    shortcut: Option<ConvBn>,
}

impl Bottleneck {
    const EXPANSION: usize = 4;

    fn new(vb: VarBuilder, c_in: usize, width: usize, stride: usize) -> Result<Self> {
        let c_out = width * Self::EXPANSION;
        let shortcut = if stride != 1 || c_in != c_out {
            Some(ConvBn::new(vb.pp("shortcut"), c_in, c_out, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            reduce: ConvBn::new(vb.pp("reduce"), c_in, width, 1, 1)?,
            spatial: ConvBn::new(vb.pp("spatial"), width, width, 3, stride)?,
            expand: ConvBn::new(vb.pp("expand"), width, c_out, 1, 1)?,
            shortcut,
        })
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let ys = self.reduce.forward_t(xs, train)?.relu()?;
        let ys = self.spatial.forward_t(&ys, train)?.relu()?;
        let ys = self.expand.forward_t(&ys, train)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward_t(xs, train)?,
            None => xs.clone(),
        };
        (ys + skip)?.relu()
    }
}

/// ResNet-50 feature extractor (bottleneck blocks 3-4-6-3, stride on the
/// 3x3 conv) ending in global average pooling to 2048 features.
#[derive(Debug, Clone)]
pub struct ResNet50 {
    stem: ConvBn,
    blocks: Vec<Bottleneck>,
}

impl ResNet50 {
    pub const FEATURES: usize = 2048;
    const STAGES: [(usize, usize, usize); 4] = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)];

    pub fn new(vb: VarBuilder, resolution: usize) -> Result<Self> {
        if resolution < 32 {
            candle_core::bail!("resnet50 backbone needs a resolution of at least 32, got {resolution}");
        }
        let stem = ConvBn::new(vb.pp("stem"), 3, 64, 7, 2)?;
        let mut blocks = Vec::new();
        let mut c_in = 64;
        for (s, (width, depth, stride)) in Self::STAGES.into_iter().enumerate() {
            for b in 0..depth {
                let vb = vb.pp(format!("layer{}.{b}", s + 1));
                blocks.push(Bottleneck::new(vb, c_in, width, if b == 0 { stride } else { 1 })?);
                c_in = width * Bottleneck::EXPANSION;
            }
        }
        Ok(Self { stem, blocks })
    }

    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        // Zero padding before the max pool is safe: inputs are post-ReLU.
        let mut xs = self
            .stem
            .forward_t(xs, train)?
            .relu()?
            .pad_with_zeros(D::Minus1, 1, 1)?
            .pad_with_zeros(D::Minus2, 1, 1)?
            .max_pool2d_with_stride(3, 2)?;
        for block in &self.blocks {
            xs = block.forward_t(&xs, train)?;
        }
        xs.mean(D::Minus1)?.mean(D::Minus1)
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Tiny(TinyNet),
    ResNet50(ResNet50),
}

impl Backbone {
    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Backbone::Tiny(net) => net.forward(xs),
            Backbone::ResNet50(net) => net.forward_t(xs, train),
        }
    }
}
