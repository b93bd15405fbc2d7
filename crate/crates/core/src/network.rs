//! The full network: two branch extractors, 2D -> 3D projection, N fusion
//! stages, LW-ASPP and the output head.
//!
//! Each branch runs PWConv -> DDR2D -> DDR2D -> projection -> downsample ->
//! DDR3D -> downsample -> DDR3D. The last extractor DDR is the branch's
//! stage-1 block; every further stage adds one DDR per branch, each consuming
//! that branch's previous stage. Fusion sees the (depth, rgb) pair of every
//! stage.

use std::fmt;
use std::str::FromStr;

use grf_tensor::{Graph, NodeId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    block_cost, Aspp, AsppSpec, BlockDesc, Conv, ConvSpec, Cost, Ddr, DdrConfig, DdrSpec, Downsample,
    DownsampleSpec,
};
use crate::error::{config_err, shape_err, Error, Result};
use crate::fusion::{Fusion, FusionSpec, FusionStrategy};
use crate::projection::{project_node, CameraIntrinsics, DepthImage, VoxelGridSpec};

pub const NUM_CLASSES: usize = 12;
pub const MAX_STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Paper,
    Tiny,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Paper => "paper",
            Scale::Tiny => "tiny",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "tiny" => Ok(Scale::Tiny),
            other => config_err(format!("unknown scale profile {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub scale: Scale,
    pub stages: usize,
    pub width_2d: usize,
    /// Channel widths after the first and second downsample.
    pub widths_3d: [usize; 2],
    /// Dilation of each stage's per-branch DDR; the first is the extractor's last DDR.
    pub stage_dilations: Vec<usize>,
    pub aspp_dilations: Vec<usize>,
    pub head_hidden: usize,
    /// Image `(rows, cols)`.
    pub image: [usize; 2],
    pub camera: CameraIntrinsics,
    /// Input grid the 2D features are projected into.
    pub grid: VoxelGridSpec,
    pub num_classes: usize,
    pub fusion: FusionStrategy,
    /// Depth that maps to 1.0 in the depth branch input.
    pub max_depth: f64,
}

const DEFAULT_DILATIONS: [usize; MAX_STAGES] = [1, 2, 3, 5];

impl NetworkConfig {
    pub fn paper(stages: usize) -> Self {
        Self {
            scale: Scale::Paper,
            stages,
            width_2d: 8,
            widths_3d: [16, 64],
            stage_dilations: DEFAULT_DILATIONS[..stages.min(MAX_STAGES)].to_vec(),
            aspp_dilations: vec![3, 6, 9],
            head_hidden: 160,
            image: [640, 480],
            camera: CameraIntrinsics {
                fx: 518.8,
                fy: 518.8,
                cx: 240.0,
                cy: 320.0,
            },
            grid: VoxelGridSpec::centered([240, 144, 240], 0.02, 0.0),
            num_classes: NUM_CLASSES,
            fusion: FusionStrategy::Grf,
            max_depth: 8.0,
        }
    }

    /// Desk-scale profile: 48x64 images, a 32x16x32 grid and widths 4/8/16.
    pub fn tiny(stages: usize) -> Self {
        Self {
            scale: Scale::Tiny,
            stages,
            width_2d: 4,
            widths_3d: [8, 16],
            stage_dilations: DEFAULT_DILATIONS[..stages.min(MAX_STAGES)].to_vec(),
            aspp_dilations: vec![1, 2, 3],
            head_hidden: 40,
            image: [48, 64],
            camera: CameraIntrinsics {
                fx: 51.9,
                fy: 51.9,
                cx: 31.5,
                cy: 23.5,
            },
            grid: VoxelGridSpec::centered([32, 16, 32], 0.15, 0.3),
            num_classes: NUM_CLASSES,
            fusion: FusionStrategy::Grf,
            max_depth: 8.0,
        }
    }

    pub fn profile(scale: Scale, stages: usize) -> Self {
        match scale {
            Scale::Paper => Self::paper(stages),
            Scale::Tiny => Self::tiny(stages),
        }
    }

    pub fn with_fusion(mut self, fusion: FusionStrategy) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages > MAX_STAGES {
            return config_err(format!("stages must be 1..={MAX_STAGES}, got {}", self.stages));
        }
        if self.stage_dilations.len() != self.stages {
            return config_err(format!(
                "{} stage dilations for {} stages",
                self.stage_dilations.len(),
                self.stages
            ));
        }
        let [w1, w2] = self.widths_3d;
        for w in [self.width_2d, w1, w2] {
            if w == 0 || w % 4 != 0 {
                return config_err(format!("width {w} is not a positive multiple of 4"));
            }
        }
        if w1 <= self.width_2d || w2 <= w1 {
            return config_err("3D widths must grow past the 2D width");
        }
        if self.stage_dilations.iter().chain(&self.aspp_dilations).any(|&d| d == 0) {
            return config_err("dilations must be positive");
        }
        if self.num_classes < 2 || self.head_hidden == 0 {
            return config_err("need at least two classes and a hidden head width");
        }
        if !(self.max_depth > 0.0) {
            return config_err("max_depth must be positive");
        }
        self.camera.validate()?;
        self.grid.validate()?;
        if self.grid.extents.iter().any(|e| e % 4 != 0) {
            return config_err(format!("grid extents {:?} must divide by 4", self.grid.extents));
        }
        Ok(())
    }

    /// Output voxel grid (two 2x downsamples of the input grid).
    pub fn output_grid(&self) -> Result<VoxelGridSpec> {
        self.grid.coarsened(4)
    }

    fn down1(&self) -> DownsampleSpec {
        DownsampleSpec::new(3, self.width_2d, self.widths_3d[0] - self.width_2d)
    }

    fn down2(&self) -> DownsampleSpec {
        DownsampleSpec::new(3, self.widths_3d[0], self.widths_3d[1] - self.widths_3d[0])
    }

    fn ddr2d(&self) -> Result<DdrSpec> {
        DdrSpec::new(DdrConfig::new(2, 3, self.width_2d, 1, 1), self.width_2d)
    }

    fn ddr3d_mid(&self) -> Result<DdrSpec> {
        DdrSpec::new(DdrConfig::new(3, 3, self.widths_3d[0], 1, 1), self.widths_3d[0])
    }

    fn stage_ddr(&self, d: usize) -> Result<DdrSpec> {
        let w = self.widths_3d[1];
        DdrSpec::new(DdrConfig::new(3, 3, w, 1, d), w)
    }

    fn fusion_spec(&self) -> FusionSpec {
        FusionSpec::new(self.fusion, self.widths_3d[1])
    }

    fn aspp(&self) -> AsppSpec {
        AsppSpec::new(self.widths_3d[1], self.widths_3d[1], &self.aspp_dilations)
    }

    fn head(&self) -> [ConvSpec; 2] {
        let c = self.aspp().out_channels();
        [
            ConvSpec::pointwise(3, c, self.head_hidden),
            ConvSpec::pointwise(3, self.head_hidden, self.num_classes),
        ]
    }
}

/// Input channels of the two branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Depth,
    Rgb,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Depth => 1,
            Modality::Rgb => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Depth => "depth",
            Modality::Rgb => "rgb",
        }
    }
}

/// One row of the architecture table.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub module: &'static str,
    pub op: String,
    /// Output extents with channels last.
    pub output: Vec<usize>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub dilation: Option<usize>,
    /// Cost of this row summed over both branches where it is per-branch.
    pub cost: Cost,
}

impl LayerRow {
    pub fn output_size(&self) -> String {
        self.output
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join("×")
    }
}

fn with_channels(spatial: &[usize], c: usize) -> Vec<usize> {
    let mut v = spatial.to_vec();
    v.push(c);
    v
}

fn sites(spatial: &[usize]) -> u64 {
    spatial.iter().product::<usize>() as u64
}

/// Structural walk of the network: every layer's output extents and cost,
/// without allocating any parameters.
pub fn layer_plan(cfg: &NetworkConfig) -> Result<Vec<LayerRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let row = |module, op: &str, output, kdil: Option<(usize, usize, usize)>, cost| LayerRow {
        module,
        op: op.to_string(),
        output,
        kernel: kdil.map(|t| t.0),
        stride: kdil.map(|t| t.1),
        dilation: kdil.map(|t| t.2),
        cost,
    };
    let fx = "Feature Extractor";
    let img = cfg.image.to_vec();
    let w2 = cfg.width_2d;
    let both = |f: &dyn Fn(usize) -> Result<Cost>| -> Result<Cost> {
        Ok(f(Modality::Depth.channels())? + f(Modality::Rgb.channels())?)
    };

    let pw_cost = both(&|c_in| {
        Ok(block_cost(&BlockDesc::ConvRelu(ConvSpec::pointwise(2, c_in, w2)), &img)?.0)
    })?;
    rows.push(row(fx, "PWConv", with_channels(&img, w2), Some((1, 1, 1)), pw_cost));
    let (c, _) = cfg.ddr2d()?.cost(&img)?;
    for _ in 0..2 {
        rows.push(row(fx, "2D DDR", with_channels(&img, w2), Some((3, 1, 1)), c + c));
    }
    let g = cfg.grid.extents.to_vec();
    rows.push(row(fx, "2D - 3D Projection", with_channels(&g, w2), None, Cost::default()));
    let (c, g1) = cfg.down1().cost(&g)?;
    rows.push(row(fx, "Down-sample", with_channels(&g1, cfg.widths_3d[0]), Some((3, 2, 1)), c + c));
    let (c, _) = cfg.ddr3d_mid()?.cost(&g1)?;
    rows.push(row(fx, "3D DDR", with_channels(&g1, cfg.widths_3d[0]), Some((3, 1, 1)), c + c));
    let (c, g2) = cfg.down2().cost(&g1)?;
    let w = cfg.widths_3d[1];
    rows.push(row(fx, "Down-sample", with_channels(&g2, w), Some((3, 2, 1)), c + c));
    let d0 = cfg.stage_dilations[0];
    let (c, _) = cfg.stage_ddr(d0)?.cost(&g2)?;
    rows.push(row(fx, "3D DDR", with_channels(&g2, w), Some((3, 1, d0)), c + c));

    let ff = "Feature Fusion";
    let fusion = cfg.fusion_spec();
    let label = match cfg.fusion {
        FusionStrategy::Grf => "GRF".to_string(),
        other => {
            let t = other.tag();
            t[..1].to_uppercase() + &t[1..]
        }
    };
    let mut prev = Cost::default();
    for stage in 1..=cfg.stages {
        if stage > 1 {
            let d = cfg.stage_dilations[stage - 1];
            let (c, _) = cfg.stage_ddr(d)?.cost(&g2)?;
            rows.push(row(ff, "3D DDR", with_channels(&g2, w), Some((3, 1, d)), c + c));
        }
        let total = fusion.cost(&g2, stage)?;
        let delta = Cost {
            params: total.params - prev.params,
            flops: total.flops - prev.flops,
        };
        prev = total;
        let k = if fusion.param_count() > 0 && cfg.fusion != FusionStrategy::Concat {
            Some((fusion.k, 1, 1))
        } else {
            None
        };
        rows.push(row(ff, &format!("{label} stage {stage}"), with_channels(&g2, w), k, delta));
    }

    let am = "LW-ASPP";
    let aspp = cfg.aspp();
    let pw = ConvSpec::pointwise(3, aspp.c_in, aspp.width);
    let (pw_c, _) = block_cost(&BlockDesc::ConvRelu(pw), &g2)?;
    rows.push(row(am, "PWConv", with_channels(&g2, aspp.width), Some((1, 1, 1)), pw_c));
    for (ddr, &d) in aspp.ddrs()?.iter().zip(&aspp.dilations) {
        let (c, _) = ddr.cost(&g2)?;
        rows.push(row(am, "3D DDR", with_channels(&g2, aspp.width), Some((3, 1, d)), c));
    }
    let gap = pw_c + Cost::flops(sites(&g2) * aspp.c_in as u64);
    rows.push(row(am, "GlobalAvgPool", with_channels(&g2, aspp.width), None, gap));
    rows.push(row(am, "Concatenate", with_channels(&g2, aspp.out_channels()), None, Cost::default()));

    let out = "Output";
    let [h1, h2] = cfg.head();
    let (c, _) = block_cost(&BlockDesc::ConvRelu(h1.clone()), &g2)?;
    rows.push(row(out, "PWConv", with_channels(&g2, h1.c_out), Some((1, 1, 1)), c));
    let (c, _) = block_cost(&BlockDesc::Conv(h2.clone()), &g2)?;
    rows.push(row(out, "PWConv", with_channels(&g2, h2.c_out), Some((1, 1, 1)), c));
    rows.push(row(out, "ArgMax", with_channels(&g2, h2.c_out), None, Cost::default()));
    Ok(rows)
}

/// Analytic parameter and FLOP totals (1 MAC = 1 FLOP).
pub fn plan_cost(cfg: &NetworkConfig) -> Result<Cost> {
    Ok(layer_plan(cfg)?.iter().map(|r| r.cost).sum())
}

/// Render the plan as an aligned text table.
pub fn format_plan(rows: &[LayerRow]) -> String {
    let dash = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
    let mut s = format!(
        "{:<18} {:<20} {:<22} {:>6} {:>6} {:>8} {:>10} {:>16}\n",
        "module", "operation", "output size", "kernel", "stride", "dilation", "params", "flops"
    );
    for r in rows {
        s += &format!(
            "{:<18} {:<20} {:<22} {:>6} {:>6} {:>8} {:>10} {:>16}\n",
            r.module,
            r.op,
            r.output_size(),
            dash(r.kernel),
            dash(r.stride),
            dash(r.dilation),
            r.cost.params,
            r.cost.flops
        );
    }
    s
}

#[derive(Clone, Debug)]
struct Branch {
    modality: Modality,
    pw: Conv,
    ddr2d: [Ddr; 2],
    down1: Downsample,
    ddr3d: Ddr,
    down2: Downsample,
    stages: Vec<Ddr>,
}

impl Branch {
    fn register(cfg: &NetworkConfig, m: Modality, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = m.name();
        let pw = ConvSpec::pointwise(2, m.channels(), cfg.width_2d).register(store, rng, &format!("{n}.pw"))?;
        let ddr2d = [
            cfg.ddr2d()?.register(store, rng, &format!("{n}.ddr2d_1"))?,
            cfg.ddr2d()?.register(store, rng, &format!("{n}.ddr2d_2"))?,
        ];
        let down1 = cfg.down1().register(store, rng, &format!("{n}.down1"))?;
        let ddr3d = cfg.ddr3d_mid()?.register(store, rng, &format!("{n}.ddr3d"))?;
        let down2 = cfg.down2().register(store, rng, &format!("{n}.down2"))?;
        let stages = cfg
            .stage_dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| cfg.stage_ddr(d)?.register(store, rng, &format!("{n}.stage{}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            modality: m,
            pw,
            ddr2d,
            down1,
            ddr3d,
            down2,
            stages,
        })
    }

    /// Per-stage features of this branch.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Tensor,
        depth: &DepthImage,
        cam: &CameraIntrinsics,
        grid: &VoxelGridSpec,
    ) -> Result<Vec<NodeId>> {
        let x = g.input(input);
        let x = self.pw.forward(g, store, x)?;
        let mut x = g.relu(x)?;
        for ddr in &self.ddr2d {
            x = ddr.forward(g, store, x)?;
        }
        let v = project_node(g, x, depth, cam, grid)?;
        let v = self.down1.forward(g, store, v)?;
        let v = self.ddr3d.forward(g, store, v)?;
        let mut v = self.down2.forward(g, store, v)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for ddr in &self.stages {
            v = ddr.forward(g, store, v)?;
            out.push(v);
        }
        Ok(out)
    }
}

/// A built network: parameters plus the layer structure that uses them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub store: ParamStore,
    branches: [Branch; 2],
    aspp: Aspp,
    head: [Conv; 2],
    fusion: Fusion,
}

impl Model {
    /// Register all parameters. Fusion parameters come last so the rest of
    /// the network initializes identically whatever the strategy.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let branches = [
            Branch::register(&config, Modality::Depth, &mut store, &mut rng)?,
            Branch::register(&config, Modality::Rgb, &mut store, &mut rng)?,
        ];
        let aspp = config.aspp().register(&mut store, &mut rng, "aspp")?;
        let [h1, h2] = config.head();
        let head = [
            h1.register(&mut store, &mut rng, "head.pw1")?,
            h2.register(&mut store, &mut rng, "head.pw2")?,
        ];
        let fusion = config.fusion_spec().register(&mut store, &mut rng, "fusion")?;
        Ok(Self {
            config,
            store,
            branches,
            aspp,
            head,
            fusion,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    /// Normalized network inputs: depth in [0, 1] over `max_depth` (invalid
    /// pixels 0) and RGB in [0, 1].
    pub fn inputs(&self, rgb: &[u8], depth: &DepthImage) -> Result<(Tensor, Tensor)> {
        let [h, w] = self.config.image;
        if depth.height != h || depth.width != w || rgb.len() != h * w * 3 {
            return shape_err(format!(
                "expected {h}x{w} images, got depth {}x{} and {} rgb bytes",
                depth.height,
                depth.width,
                rgb.len()
            ));
        }
        let max = self.config.max_depth;
        let d = depth
            .meters
            .iter()
            .map(|&z| if DepthImage::is_valid(z) { (z as f64 / max).min(1.0) } else { 0.0 })
            .collect();
        let c = rgb.iter().map(|&b| b as f64 / 255.0).collect();
        Ok((Tensor::new(&[h, w, 1], d)?, Tensor::new(&[h, w, 3], c)?))
    }

    /// Record the forward pass; returns unnormalized logits over the output grid.
    pub fn forward(&self, g: &mut Graph, rgb: &[u8], depth: &DepthImage, cam: &CameraIntrinsics) -> Result<NodeId> {
        let (d_in, c_in) = self.inputs(rgb, depth)?;
        let grid = &self.config.grid;
        let fd = self.branches[0].forward(g, &self.store, d_in, depth, cam, grid)?;
        let fc = self.branches[1].forward(g, &self.store, c_in, depth, cam, grid)?;
        let pairs: Vec<(NodeId, NodeId)> = fd.into_iter().zip(fc).collect();
        let fused = self.fusion.fuse_stages(g, &self.store, &pairs)?;
        let x = self.aspp.forward(g, &self.store, fused)?;
        let x = self.head[0].forward(g, &self.store, x)?;
        let x = g.relu(x)?;
        self.head[1].forward(g, &self.store, x)
    }

    /// Per-voxel argmax class over the output grid.
    pub fn predict(&self, rgb: &[u8], depth: &DepthImage, cam: &CameraIntrinsics) -> Result<Vec<u8>> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, rgb, depth, cam)?;
        Ok(argmax_labels(g.value(logits)))
    }

    pub fn branch_modalities(&self) -> [Modality; 2] {
        [self.branches[0].modality, self.branches[1].modality]
    }
}

/// Channel argmax of a channels-last tensor; ties pick the lowest class.
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let c = logits.channels();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

pub fn count_params(model: &Model) -> usize {
    model.param_count()
}

/// FLOPs of one forward pass at the model's configured extents.
pub fn count_flops(model: &Model) -> Result<u64> {
    Ok(plan_cost(&model.config)?.flops)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_params_match_registered_scalars() {
        for stages in 1..=4 {
            for scale in [Scale::Paper, Scale::Tiny] {
                for f in FusionStrategy::ALL {
                    let cfg = NetworkConfig::profile(scale, stages).with_fusion(f);
                    let m = Model::build(cfg.clone(), 0).unwrap();
                    assert_eq!(plan_cost(&cfg).unwrap().params, m.param_count() as u64, "{scale} {stages} {f}");
                }
            }
        }
    }

    #[test]
    fn aspp_rows_sum_to_block_cost() {
        let cfg = NetworkConfig::paper(1);
        let rows = layer_plan(&cfg).unwrap();
        let aspp: Cost = rows.iter().filter(|r| r.module == "LW-ASPP").map(|r| r.cost).sum();
        let (expect, _) = cfg.aspp().cost(&[60, 36, 60]).unwrap();
        assert_eq!(aspp, expect);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = NetworkConfig::tiny(2);
        c.stage_dilations = vec![1];
        assert!(matches!(Model::build(c, 0), Err(Error::Config(_))));
        let mut c = NetworkConfig::tiny(1);
        c.width_2d = 6;
        assert!(Model::build(c, 0).is_err());
        assert!(Model::build(NetworkConfig::tiny(5), 0).is_err());
    }

    #[test]
    fn image_extent_mismatch_is_rejected() {
        let m = Model::build(NetworkConfig::tiny(1), 0).unwrap();
        let depth = DepthImage::new(4, 4, vec![1.0; 16]).unwrap();
        let mut g = Graph::new();
        let err = m.forward(&mut g, &[0; 48], &depth, &m.config.camera).unwrap_err();
        assert_eq!(err.code(), "shape");
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        let t = Tensor::new(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_labels(&t), vec![0, 1]);
    }
}
