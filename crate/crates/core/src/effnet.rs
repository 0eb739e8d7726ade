//! EfficientNet-B0 with a single-logit sigmoid head.

use crate::error::{Error, Result};
use crate::nn::{BnId, Network, ParamId, ParamStore, Pass};
use crate::tensor::Var;

/// One row of the stage table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StageSpec {
    pub expand: usize,
    pub kernel: usize,
    pub stride: usize,
    pub repeats: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

const fn stage(
    expand: usize,
    kernel: usize,
    stride: usize,
    repeats: usize,
    in_channels: usize,
    out_channels: usize,
) -> StageSpec {
    StageSpec {
        expand,
        kernel,
        stride,
        repeats,
        in_channels,
        out_channels,
    }
}

pub const B0_STAGES: [StageSpec; 7] = [
    stage(1, 3, 1, 1, 32, 16),
    stage(6, 3, 2, 2, 16, 24),
    stage(6, 5, 2, 2, 24, 40),
    stage(6, 3, 2, 3, 40, 80),
    stage(6, 5, 1, 3, 80, 112),
    stage(6, 5, 2, 4, 112, 192),
    stage(6, 3, 1, 1, 192, 320),
];
pub const B0_STEM: usize = 32;
pub const B0_HEAD: usize = 1280;

/// `(alpha^phi, beta^phi, gamma^phi)`: depth, width and resolution multipliers.
pub fn compound_scale(phi: f64, alpha: f64, beta: f64, gamma: f64) -> Result<(f64, f64, f64)> {
    if !(alpha > 0.0 && beta > 0.0 && gamma > 0.0) || !phi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scaling constants must be positive, got {alpha}, {beta}, {gamma}"
        )));
    }
    Ok((alpha.powf(phi), beta.powf(phi), gamma.powf(phi)))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EffNetConfig {
    pub phi: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Input side length at `phi = 0`.
    pub base_resolution: usize,
    pub dropout_rate: f64,
    pub se_ratio: f64,
    /// Divides every channel width (1 for the full network).
    pub width_divisor: usize,
    /// Caps the repeats of every stage.
    pub max_repeats: Option<usize>,
    /// Train only the classifier head.
    pub freeze_backbone: bool,
    pub preset: String,
}

impl Default for EffNetConfig {
    fn default() -> Self {
        Self::b0()
    }
}

impl EffNetConfig {
    pub fn b0() -> Self {
        EffNetConfig {
            phi: 0.0,
            alpha: 1.2,
            beta: 1.1,
            gamma: 1.15,
            base_resolution: 256,
            dropout_rate: 0.1,
            se_ratio: 0.25,
            width_divisor: 1,
            max_repeats: None,
            freeze_backbone: false,
            preset: "paper".into(),
        }
    }

    /// Quarter widths, one block per stage.
    pub fn desk(resolution: usize) -> Self {
        EffNetConfig {
            base_resolution: resolution,
            width_divisor: 4,
            max_repeats: Some(1),
            preset: "desk".into(),
            ..Self::b0()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, w, r) = compound_scale(self.phi, self.alpha, self.beta, self.gamma)?;
        let flops = self.alpha * self.beta * self.beta * self.gamma * self.gamma;
        if (flops - 2.0).abs() > 0.05 * 2.0 {
            return Err(Error::InvalidArgument(format!(
                "alpha*beta^2*gamma^2 = {flops:.3}, expected about 2"
            )));
        }
        if !(d > 0.0 && w > 0.0 && r > 0.0) || self.width_divisor == 0 || self.base_resolution == 0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid EfficientNet config {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(0.0..=1.0).contains(&self.se_ratio) {
            return Err(Error::InvalidArgument(
                "dropout rate or SE ratio out of range".into(),
            ));
        }
        if self.max_repeats == Some(0) {
            return Err(Error::InvalidArgument("max_repeats must be >= 1".into()));
        }
        Ok(())
    }

    pub fn multipliers(&self) -> (f64, f64, f64) {
        compound_scale(self.phi, self.alpha, self.beta, self.gamma).unwrap_or((1.0, 1.0, 1.0))
    }

    pub fn resolution(&self) -> usize {
        (self.base_resolution as f64 * self.multipliers().2).round() as usize
    }

    /// Channel width after width scaling (rounded to a multiple of 8) and
    /// the divisor.
    pub fn width(&self, channels: usize) -> usize {
        let scaled = channels as f64 * self.multipliers().1;
        let mut rounded = (((scaled + 4.0) as usize) / 8 * 8).max(8);
        if (rounded as f64) < 0.9 * scaled {
            rounded += 8;
        }
        rounded.div_ceil(self.width_divisor).max(1)
    }

    pub fn repeats(&self, repeats: usize) -> usize {
        let r = (repeats as f64 * self.multipliers().0).ceil() as usize;
        self.max_repeats.map_or(r, |m| r.min(m))
    }

    /// Block descriptors after scaling, in execution order.
    pub fn blocks(&self) -> Vec<Vec<BlockSpec>> {
        B0_STAGES
            .iter()
            .map(|s| {
                let (cin, cout) = (self.width(s.in_channels), self.width(s.out_channels));
                (0..self.repeats(s.repeats))
                    .map(|j| {
                        let in_channels = if j == 0 { cin } else { cout };
                        BlockSpec {
                            in_channels,
                            out_channels: cout,
                            expand: s.expand,
                            kernel: s.kernel,
                            stride: if j == 0 { s.stride } else { 1 },
                            se_channels: if self.se_ratio > 0.0 {
                                ((in_channels as f64 * self.se_ratio) as usize).max(1)
                            } else {
                                0
                            },
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// One mobile inverted-bottleneck block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expand: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Squeeze width of the SE gate; 0 disables it.
    pub se_channels: usize,
}

impl BlockSpec {
    pub fn mid_channels(&self) -> usize {
        self.in_channels * self.expand
    }

    pub fn residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    w: ParamId,
    bn: BnId,
}

#[derive(Clone, Debug)]
struct SqueezeExcite {
    reduce_w: ParamId,
    reduce_b: ParamId,
    expand_w: ParamId,
    expand_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct MbConv {
    pub spec: BlockSpec,
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: Option<SqueezeExcite>,
    project: ConvBn,
}

/// Intermediate values of one block.
#[derive(Clone, Copy, Debug)]
pub struct MbConvTaps {
    /// `[N, mid]` SE gate, if the block has one.
    pub gate: Option<Var>,
    /// Projection conv output before its batch norm.
    pub projected: Var,
    pub output: Var,
}

/// Intermediate values of one network pass.
#[derive(Clone, Debug)]
pub struct EffNetTaps {
    pub stem: Var,
    /// Output of the last block of every stage.
    pub stages: Vec<Var>,
    /// Head feature map before global pooling.
    pub features: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct EffNet {
    config: EffNetConfig,
    store: ParamStore,
    stem: ConvBn,
    stages: Vec<Vec<MbConv>>,
    head: ConvBn,
    fc_w: ParamId,
    fc_b: ParamId,
}

fn conv_bn(
    store: &mut ParamStore,
    name: &str,
    shape: [usize; 4],
    fan_in: usize,
    seed: u64,
) -> ConvBn {
    let w = store.he_uniform(&format!("{name}.w"), &shape, fan_in, seed);
    let bn = store.batch_norm(&format!("{name}.bn"), shape[0]);
    ConvBn { w, bn }
}

fn build_block(store: &mut ParamStore, name: &str, spec: BlockSpec, seed: u64) -> MbConv {
    let (cin, mid, k) = (spec.in_channels, spec.mid_channels(), spec.kernel);
    let expand = (spec.expand != 1).then(|| {
        conv_bn(
            store,
            &format!("{name}.expand"),
            [mid, cin, 1, 1],
            cin,
            seed,
        )
    });
    let depthwise = conv_bn(store, &format!("{name}.dw"), [mid, 1, k, k], k * k, seed);
    let se = (spec.se_channels > 0).then(|| {
        let sq = spec.se_channels;
        SqueezeExcite {
            reduce_w: store.he_uniform(&format!("{name}.se.reduce.w"), &[mid, sq], mid, seed),
            reduce_b: store.zeros(&format!("{name}.se.reduce.b"), &[sq]),
            expand_w: store.he_uniform(&format!("{name}.se.expand.w"), &[sq, mid], sq, seed),
            expand_b: store.zeros(&format!("{name}.se.expand.b"), &[mid]),
        }
    });
    let project = conv_bn(
        store,
        &format!("{name}.project"),
        [spec.out_channels, mid, 1, 1],
        mid,
        seed,
    );
    MbConv {
        spec,
        expand,
        depthwise,
        se,
        project,
    }
}

impl EffNet {
    fn conv_bn(
        &self,
        pass: &mut Pass,
        x: Var,
        block: &ConvBn,
        stride: usize,
        depthwise: bool,
    ) -> Result<Var> {
        let w = pass.var(block.w);
        let k = pass.graph.shape(w)[2];
        let y = if depthwise {
            pass.graph.depthwise_conv2d(x, w, None, stride, k / 2)?
        } else {
            pass.graph.conv2d(x, w, None, stride, k / 2)?
        };
        pass.batch_norm(&self.store, y, block.bn)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &MbConv> {
        self.stages.iter().flatten()
    }

    pub fn mbconv_forward(&self, pass: &mut Pass, block: &MbConv, x: Var) -> Result<MbConvTaps> {
        let c = pass.graph.shape(x).get(1).copied();
        if c != Some(block.spec.in_channels) {
            return Err(Error::shape(
                "mbconv",
                format!(
                    "input channels {c:?}, block expects {}",
                    block.spec.in_channels
                ),
            ));
        }
        let mut y = x;
        if let Some(e) = &block.expand {
            y = self.conv_bn(pass, y, e, 1, false)?;
            y = pass.graph.silu(y)?;
        }
        y = self.conv_bn(pass, y, &block.depthwise, block.spec.stride, true)?;
        y = pass.graph.silu(y)?;
        let mut gate = None;
        if let Some(se) = &block.se {
            let pooled = pass.graph.global_avg_pool(y)?;
            let (rw, rb, ew, eb) = (
                pass.var(se.reduce_w),
                pass.var(se.reduce_b),
                pass.var(se.expand_w),
                pass.var(se.expand_b),
            );
            let s = pass.graph.dense(pooled, rw, rb)?;
            let s = pass.graph.silu(s)?;
            let s = pass.graph.dense(s, ew, eb)?;
            let g = pass.graph.sigmoid(s)?;
            y = pass.graph.scale_channels(y, g)?;
            gate = Some(g);
        }
        let pw = pass.var(block.project.w);
        let projected = pass.graph.conv2d(y, pw, None, 1, 0)?;
        let mut output = pass.batch_norm(&self.store, projected, block.project.bn)?;
        if block.spec.residual() {
            output = pass.graph.add(output, x)?;
        }
        Ok(MbConvTaps {
            gate,
            projected,
            output,
        })
    }

    pub fn forward_taps(&self, pass: &mut Pass, x: Var) -> Result<EffNetTaps> {
        let shape = pass.graph.shape(x).to_vec();
        let r = self.config.resolution();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != r || shape[3] != r {
            return Err(Error::shape(
                "effnet",
                format!("expected [N, 3, {r}, {r}] input, got {shape:?}"),
            ));
        }
        let stem = self.conv_bn(pass, x, &self.stem, 2, false)?;
        let stem = pass.graph.silu(stem)?;
        let mut y = stem;
        let mut stages = Vec::with_capacity(self.stages.len());
        for blocks in &self.stages {
            for block in blocks {
                y = self.mbconv_forward(pass, block, y)?.output;
            }
            stages.push(y);
        }
        let features = self.conv_bn(pass, y, &self.head, 1, false)?;
        let features = pass.graph.silu(features)?;
        let pooled = pass.graph.global_avg_pool(features)?;
        let pooled = pass.dropout(pooled, self.config.dropout_rate)?;
        let (fw, fb) = (pass.var(self.fc_w), pass.var(self.fc_b));
        let logit = pass.graph.dense(pooled, fw, fb)?;
        let output = pass.graph.sigmoid(logit)?;
        Ok(EffNetTaps {
            stem,
            stages,
            features,
            output,
        })
    }
}

impl Network for EffNet {
    const KIND: &'static str = "effnet-b0-v1";
    type Config = EffNetConfig;

    fn build(config: &EffNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let stem_c = config.width(B0_STEM);
        let stem = conv_bn(&mut store, "stem", [stem_c, 3, 3, 3], 27, seed);
        let specs = config.blocks();
        if specs[0][0].in_channels != stem_c {
            return Err(Error::InvalidArgument(
                "first stage does not consume the stem width".into(),
            ));
        }
        let mut stages = Vec::with_capacity(specs.len());
        for (i, stage_specs) in specs.iter().enumerate() {
            stages.push(
                stage_specs
                    .iter()
                    .enumerate()
                    .map(|(j, &spec)| {
                        build_block(&mut store, &format!("stage{i}.block{j}"), spec, seed)
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let last = specs
            .last()
            .and_then(|s| s.last())
            .map(|b| b.out_channels)
            .expect("seven stages");
        let head_c = config.width(B0_HEAD);
        let head = conv_bn(&mut store, "head", [head_c, last, 1, 1], last, seed);
        let fc_w = store.he_uniform("classifier.w", &[head_c, 1], head_c, seed);
        let fc_b = store.zeros("classifier.b", &[1]);
        if config.freeze_backbone {
            store.freeze_except(|n| n.starts_with("classifier."));
        }
        Ok(EffNet {
            config: config.clone(),
            store,
            stem,
            stages,
            head,
            fc_w,
            fc_b,
        })
    }

    fn config(&self) -> &EffNetConfig {
        &self.config
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        Ok(self.forward_taps(pass, x)?.output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    fn input(n: usize, r: usize) -> Tensor {
        Tensor::from_fn([n, 3, r, r], |i| ((i * 37) % 101) as f32 / 101.0)
    }

    #[test]
    fn compound_scale_examples() {
        assert_eq!(
            compound_scale(0.0, 1.2, 1.1, 1.15).unwrap(),
            (1.0, 1.0, 1.0)
        );
        let (d, w, r) = compound_scale(1.0, 1.2, 1.1, 1.15).unwrap();
        assert!((d - 1.2).abs() < 1e-12 && (w - 1.1).abs() < 1e-12 && (r - 1.15).abs() < 1e-12);
        assert!((1.2 * 1.1f64.powi(2) * 1.15f64.powi(2) - 1.92).abs() < 0.01);
        assert!(compound_scale(1.0, 0.0, 1.1, 1.15).is_err());
    }

    #[test]
    fn desk_widths() {
        let cfg = EffNetConfig::desk(64);
        let outs: Vec<usize> = cfg
            .blocks()
            .iter()
            .map(|s| s.last().unwrap().out_channels)
            .collect();
        assert_eq!(outs, [4, 6, 10, 20, 28, 48, 80]);
        assert_eq!((cfg.width(B0_STEM), cfg.width(B0_HEAD)), (8, 320));
        assert!(cfg.blocks().iter().all(|s| s.len() == 1));
    }

    #[test]
    fn residual_only_when_shapes_allow() {
        for block in EffNetConfig::b0().blocks().iter().flatten() {
            assert_eq!(
                block.residual(),
                block.stride == 1 && block.in_channels == block.out_channels
            );
        }
        let n_res = EffNetConfig::b0()
            .blocks()
            .iter()
            .flatten()
            .filter(|b| b.residual())
            .count();
        assert_eq!(n_res, 16 - 7);
    }

    #[test]
    fn desk_shape_ladder_and_output() {
        let net = EffNet::build(&EffNetConfig::desk(64), 0).unwrap();
        let mut pass = Pass::new(net.store(), Mode::Infer, false, 0);
        let x = pass.graph.constant(input(2, 64));
        let taps = net.forward_taps(&mut pass, x).unwrap();
        assert_eq!(pass.graph.shape(taps.stem), &[2, 8, 32, 32]);
        let ladder: Vec<Vec<usize>> = taps
            .stages
            .iter()
            .map(|&v| pass.graph.shape(v).to_vec())
            .collect();
        assert_eq!(
            ladder,
            [
                [2, 4, 32, 32],
                [2, 6, 16, 16],
                [2, 10, 8, 8],
                [2, 20, 4, 4],
                [2, 28, 4, 4],
                [2, 48, 2, 2],
                [2, 80, 2, 2]
            ]
        );
        assert_eq!(pass.graph.shape(taps.features), &[2, 320, 2, 2]);
        let out = pass.graph.value(taps.output);
        assert_eq!(out.shape(), &[2, 1]);
        assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let net = EffNet::build(&EffNetConfig::desk(64), 0).unwrap();
        assert!(net.predict(&input(1, 32)).is_err());
        assert!(net.predict(&Tensor::zeros([1, 1, 64, 64])).is_err());
    }

    #[test]
    fn duplicated_image_same_probability() {
        let net = EffNet::build(&EffNetConfig::desk(32), 4).unwrap();
        let one = input(1, 32);
        let two = Tensor::new([2, 3, 32, 32], [one.data(), one.data()].concat()).unwrap();
        let p = net.predict(&two).unwrap();
        assert_eq!(p.data()[0], p.data()[1]);
        assert_eq!(p, net.predict(&two).unwrap());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = EffNetConfig::desk(32);
        assert_eq!(
            EffNet::build(&cfg, 1).unwrap().store(),
            EffNet::build(&cfg, 1).unwrap().store()
        );
        assert_ne!(
            EffNet::build(&cfg, 1).unwrap().store(),
            EffNet::build(&cfg, 2).unwrap().store()
        );
    }

    #[test]
    fn frozen_backbone_trains_only_head() {
        let cfg = EffNetConfig {
            freeze_backbone: true,
            ..EffNetConfig::desk(32)
        };
        let net = EffNet::build(&cfg, 0).unwrap();
        assert_eq!(net.store().trainable_count(), 320 + 1);
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let cfg = EffNetConfig {
            dropout_rate: 0.0,
            ..EffNetConfig::desk(32)
        };
        let net = EffNet::build(&cfg, 3).unwrap();
        let mut pass = Pass::new(net.store(), Mode::Train, true, 0);
        let x = pass.graph.constant(Tensor::from_fn([4, 3, 32, 32], |i| {
            ((i * 31) % 17) as f32 / 17.0 - 0.4
        }));
        let y = net.forward(&mut pass, x).unwrap();
        let t = pass
            .graph
            .constant(Tensor::new([4, 1], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let loss = pass.graph.bce_loss(y, t).unwrap();
        pass.graph.backward(loss).unwrap();
        let mut store = net.store().clone();
        store.collect_grads(&pass).unwrap();
        for p in store.params() {
            assert!(
                p.tensor.grad().unwrap().iter().any(|&g| g != 0.0),
                "{} has zero gradient",
                p.name
            );
        }
    }
}
