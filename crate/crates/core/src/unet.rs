//! Encoder/decoder segmentation network with skip connections.

use crate::error::{Error, Result};
use crate::nn::{BnId, Network, ParamId, ParamStore, Pass};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    /// Number of stride-2 downsamplings (and matching upsamplings).
    pub levels: usize,
    /// Channels of the first level; each level doubles them.
    pub base_channels: usize,
    pub in_channels: usize,
    pub dropout_rate: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 4,
            base_channels: 16,
            in_channels: 3,
            dropout_rate: 0.05,
        }
    }
}

impl UNetConfig {
    /// Full-width variant with the classic 64-channel first level.
    pub fn paper() -> Self {
        UNetConfig {
            base_channels: 64,
            ..Self::default()
        }
    }

    pub fn with_base(base_channels: usize) -> Self {
        UNetConfig {
            base_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid U-Net config {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Channels at encoder level `i`; level `levels` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    w: ParamId,
    bn: BnId,
}

#[derive(Clone, Debug)]
struct DoubleConv {
    first: ConvBn,
    second: ConvBn,
}

#[derive(Clone, Debug)]
struct UpBlock {
    up_w: ParamId,
    up_b: ParamId,
    convs: DoubleConv,
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct UNetTaps {
    /// Output of each encoder level before pooling.
    pub encoder: Vec<Var>,
    pub bottleneck: Var,
    /// Output of each decoder level, deepest first.
    pub decoder: Vec<Var>,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: UNetConfig,
    store: ParamStore,
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    decoder: Vec<UpBlock>,
    head_w: ParamId,
    head_b: ParamId,
}

fn conv_bn(store: &mut ParamStore, name: &str, cin: usize, cout: usize, seed: u64) -> ConvBn {
    let w = store.he_uniform(&format!("{name}.conv.w"), &[cout, cin, 3, 3], cin * 9, seed);
    let bn = store.batch_norm(&format!("{name}.bn"), cout);
    ConvBn { w, bn }
}

fn double_conv(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    seed: u64,
) -> DoubleConv {
    DoubleConv {
        first: conv_bn(store, &format!("{name}.0"), cin, cout, seed),
        second: conv_bn(store, &format!("{name}.1"), cout, cout, seed),
    }
}

impl UNet {
    fn conv_bn_relu(&self, pass: &mut Pass, x: Var, block: &ConvBn) -> Result<Var> {
        let w = pass.var(block.w);
        let y = pass.graph.conv2d(x, w, None, 1, 1)?;
        let y = pass.batch_norm(&self.store, y, block.bn)?;
        pass.graph.relu(y)
    }

    fn double(&self, pass: &mut Pass, x: Var, block: &DoubleConv) -> Result<Var> {
        let y = self.conv_bn_relu(pass, x, &block.first)?;
        self.conv_bn_relu(pass, y, &block.second)
    }

    /// Forward pass that also returns every level's activation.
    pub fn forward_taps(&self, pass: &mut Pass, x: Var) -> Result<UNetTaps> {
        let shape = pass.graph.shape(x).to_vec();
        let &[_, c, h, w] = shape.as_slice() else {
            return Err(Error::shape(
                "unet",
                format!("expected NCHW input, got {shape:?}"),
            ));
        };
        if c != self.config.in_channels {
            return Err(Error::shape(
                "unet",
                format!(
                    "input has {c} channels, expected {}",
                    self.config.in_channels
                ),
            ));
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::shape(
                "unet",
                format!("spatial dims {h}x{w} not divisible by {d}"),
            ));
        }
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut y = x;
        for block in &self.encoder {
            let s = self.double(pass, y, block)?;
            skips.push(s);
            y = pass.graph.max_pool2d(s, 2, 2)?;
        }
        let bottleneck = self.double(pass, y, &self.bottleneck)?;
        y = pass.dropout(bottleneck, self.config.dropout_rate)?;
        let mut decoder = Vec::with_capacity(self.config.levels);
        for (block, &skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let (uw, ub) = (pass.var(block.up_w), pass.var(block.up_b));
            let up = pass.graph.conv_transpose2d(y, uw, Some(ub), 2)?;
            let cat = pass.graph.concat_channels(skip, up)?;
            let cat = pass.dropout(cat, self.config.dropout_rate)?;
            y = self.double(pass, cat, &block.convs)?;
            decoder.push(y);
        }
        let (hw, hb) = (pass.var(self.head_w), pass.var(self.head_b));
        let logits = pass.graph.conv2d(y, hw, Some(hb), 1, 0)?;
        let output = pass.graph.sigmoid(logits)?;
        Ok(UNetTaps {
            encoder: skips,
            bottleneck,
            decoder,
            output,
        })
    }
}

impl Network for UNet {
    const KIND: &'static str = "unet-v1";
    type Config = UNetConfig;

    fn build(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut encoder = Vec::with_capacity(config.levels);
        let mut cin = config.in_channels;
        for level in 0..config.levels {
            let c = config.channels(level);
            encoder.push(double_conv(
                &mut store,
                &format!("enc{level}"),
                cin,
                c,
                seed,
            ));
            cin = c;
        }
        let cb = config.channels(config.levels);
        let bottleneck = double_conv(&mut store, "bottleneck", cin, cb, seed);
        let mut decoder = Vec::with_capacity(config.levels);
        let mut cin = cb;
        for level in (0..config.levels).rev() {
            let c = config.channels(level);
            let name = format!("dec{level}");
            let up_w = store.he_uniform(&format!("{name}.up.w"), &[cin, c, 2, 2], cin, seed);
            let up_b = store.zeros(&format!("{name}.up.b"), &[c]);
            let convs = double_conv(&mut store, &name, 2 * c, c, seed);
            decoder.push(UpBlock { up_w, up_b, convs });
            cin = c;
        }
        let head_w = store.he_uniform("head.w", &[1, cin, 1, 1], cin, seed);
        let head_b = store.zeros("head.b", &[1]);
        Ok(UNet {
            config: config.clone(),
            store,
            encoder,
            bottleneck,
            decoder,
            head_w,
            head_b,
        })
    }

    fn config(&self) -> &UNetConfig {
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

/// `1` where `soft >= threshold`, else `0`.
pub fn binarize_mask(soft: &Tensor, threshold: f32) -> Tensor {
    let data = soft
        .data()
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(soft.shape().to_vec(), data).expect("same element count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;

    fn tiny() -> UNetConfig {
        UNetConfig {
            levels: 2,
            base_channels: 2,
            in_channels: 3,
            dropout_rate: 0.05,
        }
    }

    /// Independent count over the layer table.
    fn closed_form_count(cfg: &UNetConfig) -> usize {
        let b = cfg.base_channels;
        let conv_bn = |cin: usize, cout: usize| 9 * cin * cout + 2 * cout;
        let mut total = 0;
        let mut cin = cfg.in_channels;
        for i in 0..=cfg.levels {
            let c = b * 2usize.pow(i as u32);
            total += conv_bn(cin, c) + conv_bn(c, c);
            cin = c;
        }
        for i in (0..cfg.levels).rev() {
            let c = b * 2usize.pow(i as u32);
            total += 4 * cin * c + c + conv_bn(2 * c, c) + conv_bn(c, c);
            cin = c;
        }
        total + cin + 1
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [tiny(), UNetConfig::default(), UNetConfig::paper()] {
            let net = UNet::build(&cfg, 0).unwrap();
            assert_eq!(net.store().count(), closed_form_count(&cfg), "{cfg:?}");
        }
        // cross-checked against an equivalent PyTorch module
        assert_eq!(closed_form_count(&UNetConfig::paper()), 31_037_633);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = UNet::build(&tiny(), 5).unwrap();
        let b = UNet::build(&tiny(), 5).unwrap();
        let c = UNet::build(&tiny(), 6).unwrap();
        assert_eq!(a.store(), b.store());
        assert_ne!(a.store(), c.store());
    }

    #[test]
    fn output_shape_range_and_ladder() {
        let cfg = tiny();
        let net = UNet::build(&cfg, 1).unwrap();
        let x = Tensor::from_fn([2, 3, 8, 8], |i| ((i * 7) % 13) as f32 / 13.0);
        let mut pass = Pass::new(net.store(), Mode::Train, true, 0);
        let xv = pass.graph.constant(x);
        let taps = net.forward_taps(&mut pass, xv).unwrap();
        assert_eq!(pass.graph.shape(taps.encoder[0]), &[2, 2, 8, 8]);
        assert_eq!(pass.graph.shape(taps.encoder[1]), &[2, 4, 4, 4]);
        assert_eq!(pass.graph.shape(taps.bottleneck), &[2, 8, 2, 2]);
        assert_eq!(pass.graph.shape(taps.decoder[0]), &[2, 4, 4, 4]);
        let out = pass.graph.value(taps.output);
        assert_eq!(out.shape(), &[2, 1, 8, 8]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = UNet::build(&tiny(), 1).unwrap();
        assert!(net.predict(&Tensor::zeros([1, 3, 6, 8])).is_err());
        assert!(net.predict(&Tensor::zeros([1, 1, 8, 8])).is_err());
    }

    #[test]
    fn infer_is_pure_and_batch_independent() {
        let net = UNet::build(&tiny(), 2).unwrap();
        let img: Vec<f32> = (0..3 * 64).map(|i| (i % 11) as f32 / 11.0).collect();
        let x = Tensor::new([2, 3, 8, 8], [img.clone(), img].concat()).unwrap();
        let a = net.predict(&x).unwrap();
        assert_eq!(a, net.predict(&x).unwrap());
        assert_eq!(a.data()[..64], a.data()[64..]);
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let cfg = UNetConfig {
            dropout_rate: 0.0,
            ..tiny()
        };
        let net = UNet::build(&cfg, 3).unwrap();
        let mut pass = Pass::new(net.store(), Mode::Train, true, 0);
        let x = pass.graph.constant(Tensor::from_fn([2, 3, 8, 8], |i| {
            ((i * 31) % 17) as f32 / 17.0 - 0.4
        }));
        let y = net.forward(&mut pass, x).unwrap();
        let target = pass
            .graph
            .constant(Tensor::from_fn([2, 1, 8, 8], |i| (i % 3 == 0) as u8 as f32));
        let loss = pass.graph.bce_loss(y, target).unwrap();
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

    #[test]
    fn binarize_convention() {
        let t = Tensor::new([4], vec![0.5, 0.49, 0.0, 1.0]).unwrap();
        assert_eq!(binarize_mask(&t, 0.5).data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(binarize_mask(&Tensor::zeros([3]), 0.5)
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }
}
