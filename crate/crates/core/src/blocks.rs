//! Network building blocks: plain convolutions, dimensional-decomposition
//! residual (DDR) blocks, the pool+conv downsample layer and the light-weight
//! ASPP head.
//!
//! Every block exists in two forms. A `*Spec` is a pure description: it knows
//! its parameter shapes, output extents and cost without touching a
//! [`ParamStore`]. Registering a spec yields the runnable block, which holds
//! the ids of its parameters and records its forward pass onto a [`Graph`].
//!
//! Costs use one multiply-accumulate = one FLOP. Bias adds, activations,
//! residual adds and pooling comparisons are counted once per element touched.

use std::ops::{Add, AddAssign};

use grf_tensor::{ConvConfig, Graph, NodeId, ParamId, ParamStore};
use rand::Rng;

use crate::error::{config_err, shape_err, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl Cost {
    pub fn flops(flops: u64) -> Self {
        Self { params: 0, flops }
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

fn sites(spatial: &[usize]) -> u64 {
    spatial.iter().product::<usize>() as u64
}

/// A single convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub cfg: ConvConfig,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, cfg: ConvConfig) -> Self {
        Self { c_in, c_out, cfg }
    }

    pub fn pointwise(dims: usize, c_in: usize, c_out: usize) -> Self {
        Self::new(c_in, c_out, ConvConfig::pointwise(dims))
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        self.cfg.weight_shape(self.c_in, self.c_out)
    }

    pub fn param_count(&self) -> u64 {
        let w = (self.cfg.taps() * self.c_in * self.c_out) as u64;
        w + if self.cfg.has_bias { self.c_out as u64 } else { 0 }
    }

    pub fn output_extents(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(self.cfg.output_extents(input)?)
    }

    pub fn cost(&self, input: &[usize]) -> Result<(Cost, Vec<usize>)> {
        let out = self.output_extents(input)?;
        let n = sites(&out);
        let macs = n * (self.cfg.taps() * self.c_in * self.c_out) as u64;
        let bias = if self.cfg.has_bias { n * self.c_out as u64 } else { 0 };
        Ok((
            Cost {
                params: self.param_count(),
                flops: macs + bias,
            },
            out,
        ))
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<Conv> {
        let weight = store.insert_glorot(&format!("{name}.weight"), &self.weight_shape(), rng)?;
        let bias = if self.cfg.has_bias {
            Some(store.insert_zeros(&format!("{name}.bias"), &[self.c_out])?)
        } else {
            None
        };
        Ok(Conv {
            spec: self.clone(),
            weight,
            bias,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        Ok(g.conv(x, w, b, &self.spec.cfg)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// DDR(k, w, s, d) over 2 or 3 spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DdrConfig {
    pub k: usize,
    pub w: usize,
    pub s: usize,
    pub d: usize,
    pub dims: usize,
}

impl DdrConfig {
    pub fn new(dims: usize, k: usize, w: usize, s: usize, d: usize) -> Self {
        Self { k, w, s, d, dims }
    }

    pub fn bottleneck(&self) -> usize {
        self.w / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return config_err(format!("DDR dims must be 2 or 3, got {}", self.dims));
        }
        if self.w == 0 || self.w % 4 != 0 {
            return config_err(format!("DDR width {} is not a positive multiple of 4", self.w));
        }
        if self.k == 0 || self.s == 0 || self.d == 0 {
            return config_err("DDR kernel, stride and dilation must be >= 1");
        }
        Ok(())
    }
}

/// A DDR block applied to a `c_in`-channel input.
///
/// Layers: PWConv(c_in -> w/4) -> one 1-D conv per spatial axis (innermost axis
/// first, each w/4 -> w/4, stride and dilation along its own axis) -> PWConv(w/4 -> w).
/// ReLU follows every layer but the last; with `s == 1` the input is added
/// back before a final ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct DdrSpec {
    pub cfg: DdrConfig,
    pub c_in: usize,
}

impl DdrSpec {
    pub fn new(cfg: DdrConfig, c_in: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.s == 1 && c_in != cfg.w {
            return Err(Error::Tensor(grf_tensor::TensorError::ChannelMismatch {
                input: c_in,
                expected: cfg.w,
            }));
        }
        Ok(Self { cfg, c_in })
    }

    pub fn has_skip(&self) -> bool {
        self.cfg.s == 1
    }

    pub fn layers(&self) -> Vec<ConvSpec> {
        let DdrConfig { k, w, s, d, dims } = self.cfg;
        let b = w / 4;
        let mut out = vec![ConvSpec::pointwise(dims, self.c_in, b)];
        for axis in (0..dims).rev() {
            let mut kernel = vec![1; dims];
            let mut stride = vec![1; dims];
            let mut dilation = vec![1; dims];
            kernel[axis] = k;
            stride[axis] = s;
            dilation[axis] = d;
            let cfg = ConvConfig::same(&kernel)
                .with_stride(&stride)
                .with_dilation(&dilation);
            out.push(ConvSpec::new(b, b, cfg));
        }
        out.push(ConvSpec::pointwise(dims, b, w));
        out
    }

    pub fn cost(&self, input: &[usize]) -> Result<(Cost, Vec<usize>)> {
        if input.len() != self.cfg.dims {
            return shape_err(format!(
                "DDR{}D applied to {} spatial axes",
                self.cfg.dims,
                input.len()
            ));
        }
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut cost = Cost::default();
        let mut ext = input.to_vec();
        for (i, l) in layers.iter().enumerate() {
            let (c, out) = l.cost(&ext)?;
            cost += c;
            if i != last {
                cost += Cost::flops(sites(&out) * l.c_out as u64);
            }
            ext = out;
        }
        if self.has_skip() {
            // residual add + final relu
            cost += Cost::flops(2 * sites(&ext) * self.cfg.w as u64);
        } else {
            cost += Cost::flops(sites(&ext) * self.cfg.w as u64);
        }
        Ok((cost, ext))
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<Ddr> {
        let layers = self.layers();
        let n = layers.len();
        let convs = layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let part = match i {
                    0 => "pw_in".to_string(),
                    i if i == n - 1 => "pw_out".to_string(),
                    i => format!("dconv{}", i - 1),
                };
                l.register(store, rng, &format!("{name}.{part}"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ddr {
            spec: self.clone(),
            convs,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Ddr {
    pub spec: DdrSpec,
    pub convs: Vec<Conv>,
}

impl Ddr {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let c = g.value(x).channels();
        if c != self.spec.c_in {
            return Err(Error::Tensor(grf_tensor::TensorError::ChannelMismatch {
                input: c,
                expected: self.spec.c_in,
            }));
        }
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, store, h)?;
            if i != last {
                h = g.relu(h)?;
            }
        }
        if self.spec.has_skip() {
            h = g.add(h, x)?;
        }
        Ok(g.relu(h)?)
    }
}

/// Max-pool(2) branch concatenated with a k=3 stride-2 conv branch.
#[derive(Clone, Debug, PartialEq)]
pub struct DownsampleSpec {
    pub dims: usize,
    pub c_in: usize,
    pub conv_out: usize,
}

impl DownsampleSpec {
    pub fn new(dims: usize, c_in: usize, conv_out: usize) -> Self {
        Self { dims, c_in, conv_out }
    }

    pub fn out_channels(&self) -> usize {
        self.c_in + self.conv_out
    }

    pub fn conv(&self) -> ConvSpec {
        let cfg = ConvConfig::cube(self.dims, 3).with_stride(&vec![2; self.dims]);
        ConvSpec::new(self.c_in, self.conv_out, cfg)
    }

    fn check_even(input: &[usize]) -> Result<()> {
        if let Some(e) = input.iter().find(|&&e| e % 2 != 0) {
            return shape_err(format!("downsample needs even extents, got {e} in {input:?}"));
        }
        Ok(())
    }

    pub fn cost(&self, input: &[usize]) -> Result<(Cost, Vec<usize>)> {
        Self::check_even(input)?;
        let (conv, out) = self.conv().cost(input)?;
        let n = sites(&out);
        // pooling compares 2^dims inputs per output; relu on the conv branch
        let pool = n * self.c_in as u64 * (1 << self.dims);
        let relu = n * self.conv_out as u64;
        Ok((conv + Cost::flops(pool + relu), out))
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<Downsample> {
        Ok(Downsample {
            spec: self.clone(),
            conv: self.conv().register(store, rng, &format!("{name}.conv"))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Downsample {
    pub spec: DownsampleSpec,
    pub conv: Conv,
}

impl Downsample {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        DownsampleSpec::check_even(g.value(x).spatial())?;
        let pooled = g.max_pool(x, 2, 2)?;
        let conv = self.conv.forward(g, store, x)?;
        let conv = g.relu(conv)?;
        Ok(g.concat(&[pooled, conv])?)
    }
}

/// Light-weight ASPP: PWConv, one DDR per dilation, and a global-average
/// branch (pool, then PWConv), all `width` channels, concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct AsppSpec {
    pub c_in: usize,
    pub width: usize,
    pub k: usize,
    pub dilations: Vec<usize>,
}

impl AsppSpec {
    pub fn new(c_in: usize, width: usize, dilations: &[usize]) -> Self {
        Self {
            c_in,
            width,
            k: 3,
            dilations: dilations.to_vec(),
        }
    }

    pub fn branch_count(&self) -> usize {
        self.dilations.len() + 2
    }

    pub fn out_channels(&self) -> usize {
        self.width * self.branch_count()
    }

    pub fn ddrs(&self) -> Result<Vec<DdrSpec>> {
        self.dilations
            .iter()
            .map(|&d| DdrSpec::new(DdrConfig::new(3, self.k, self.width, 1, d), self.c_in))
            .collect()
    }

    pub fn cost(&self, input: &[usize]) -> Result<(Cost, Vec<usize>)> {
        let pw = ConvSpec::pointwise(3, self.c_in, self.width);
        let n = sites(input);
        let w = self.width as u64;
        let (c_pw, _) = pw.cost(input)?;
        let mut cost = c_pw + Cost::flops(n * w);
        for ddr in self.ddrs()? {
            cost += ddr.cost(input)?.0;
        }
        // pooling sum over all inputs, then a PWConv + relu at every site
        cost += Cost::flops(n * self.c_in as u64);
        cost += c_pw + Cost::flops(n * w);
        Ok((cost, input.to_vec()))
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng, name: &str) -> Result<Aspp> {
        let pw = ConvSpec::pointwise(3, self.c_in, self.width).register(store, rng, &format!("{name}.pw"))?;
        let ddrs = self
            .ddrs()?
            .iter()
            .zip(&self.dilations)
            .map(|(s, d)| s.register(store, rng, &format!("{name}.ddr_d{d}")))
            .collect::<Result<Vec<_>>>()?;
        let pool_pw =
            ConvSpec::pointwise(3, self.c_in, self.width).register(store, rng, &format!("{name}.pool_pw"))?;
        Ok(Aspp {
            spec: self.clone(),
            pw,
            ddrs,
            pool_pw,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Aspp {
    pub spec: AsppSpec,
    pub pw: Conv,
    pub ddrs: Vec<Ddr>,
    pub pool_pw: Conv,
}

impl Aspp {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let c = g.value(x).channels();
        if c != self.spec.c_in {
            return Err(Error::Tensor(grf_tensor::TensorError::ChannelMismatch {
                input: c,
                expected: self.spec.c_in,
            }));
        }
        let mut branches = Vec::with_capacity(self.spec.branch_count());
        let p = self.pw.forward(g, store, x)?;
        branches.push(g.relu(p)?);
        for ddr in &self.ddrs {
            branches.push(ddr.forward(g, store, x)?);
        }
        let pooled = g.global_avg_pool(x)?;
        let p = self.pool_pw.forward(g, store, pooled)?;
        branches.push(g.relu(p)?);
        Ok(g.concat(&branches)?)
    }
}

/// Any block whose cost can be queried from its description alone.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockDesc {
    Conv(ConvSpec),
    /// A conv followed by a ReLU.
    ConvRelu(ConvSpec),
    Ddr(DdrSpec),
    Downsample(DownsampleSpec),
    Aspp(AsppSpec),
}

/// Parameter count and FLOPs of a block at the given input extents, plus the
/// output extents.
pub fn block_cost(desc: &BlockDesc, input: &[usize]) -> Result<(Cost, Vec<usize>)> {
    match desc {
        BlockDesc::Conv(c) => c.cost(input),
        BlockDesc::ConvRelu(c) => {
            let (cost, out) = c.cost(input)?;
            let relu = sites(&out) * c.c_out as u64;
            Ok((cost + Cost::flops(relu), out))
        }
        BlockDesc::Ddr(d) => d.cost(input),
        BlockDesc::Downsample(d) => d.cost(input),
        BlockDesc::Aspp(a) => a.cost(input),
    }
}
