//! A small plain U-Net with an exposed bottleneck feature grid.
//!
//! Encoder levels double the channel width and halve the resolution; the
//! deepest level is the bottleneck whose (z, h_f, w_f) activation is
//! flattened into the feature grid consumed by the alignment head. The
//! decoder mirrors the encoder with nearest-neighbour upsampling and skip
//! concatenation, ending in a 1x1 classifier.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layers::{
    concat_channels, maxpool2, maxpool2_backward, relu, relu_backward, split_channels, upsample2,
    upsample2_backward, Conv2d, GradVec, ParamSet,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Number of resolution levels including the bottleneck; levels - 1
    /// downsamplings are applied.
    pub levels: usize,
    pub convs_per_block: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 5,
            base_width: 16,
            levels: 4,
            convs_per_block: 2,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.num_classes < 2
            || self.base_width == 0
            || self.levels < 2
            || self.convs_per_block == 0
        {
            return Err(Error::Validation(format!(
                "invalid backbone config: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial downsampling factor between input and bottleneck.
    pub fn grid_stride(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Bottleneck grid shape for a given input size.
    pub fn grid_shape(&self, height: usize, width: usize) -> (usize, usize) {
        (height / self.grid_stride(), width / self.grid_stride())
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.width(self.levels - 1)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    convs: Vec<Conv2d>,
}

#[derive(Debug, Default)]
struct BlockCache {
    conv_inputs: Vec<Array3<f32>>,
    relu_outputs: Vec<Array3<f32>>,
}

impl ConvBlock {
    fn init(
        params: &mut ParamSet,
        name: &str,
        in_c: usize,
        out_c: usize,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut convs = Vec::with_capacity(count);
        for i in 0..count {
            let cin = if i == 0 { in_c } else { out_c };
            convs.push(Conv2d::init(
                params,
                &format!("{name}.conv{i}"),
                cin,
                out_c,
                3,
                rng,
            ));
        }
        Self { convs }
    }

    fn forward(&self, params: &ParamSet, x: Array3<f32>, cache: &mut BlockCache) -> Array3<f32> {
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(params, &h);
            cache.conv_inputs.push(h);
            let a = relu(&y);
            cache.relu_outputs.push(a.clone());
            h = a;
        }
        h
    }

    fn forward_no_cache(&self, params: &ParamSet, x: Array3<f32>) -> Array3<f32> {
        let mut h = x;
        for conv in &self.convs {
            h = relu(&conv.forward(params, &h));
        }
        h
    }

    fn backward(
        &self,
        params: &ParamSet,
        cache: &BlockCache,
        mut d: Array3<f32>,
        grads: &mut GradVec,
    ) -> Array3<f32> {
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let dpre = relu_backward(&cache.relu_outputs[i], &d);
            d = conv.backward(params, &cache.conv_inputs[i], &dpre, grads);
        }
        d
    }
}

/// Per-sample activations retained for the backward pass.
pub struct ForwardCache {
    enc: Vec<BlockCache>,
    dec: Vec<BlockCache>,
    pool_args: Vec<ndarray::Array3<u8>>,
    /// Output of each encoder block (skip sources; last is the bottleneck).
    enc_outputs: Vec<Array3<f32>>,
    /// Channel count of the upsampled half of each decoder concat.
    up_channels: Vec<usize>,
    head_input: Array3<f32>,
}

impl ForwardCache {
    /// Bottleneck activation (z, h_f, w_f) feeding the alignment head.
    pub fn bottleneck(&self) -> &Array3<f32> {
        self.enc_outputs.last().expect("at least one level")
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    pub params: ParamSet,
    enc_blocks: Vec<ConvBlock>,
    dec_blocks: Vec<ConvBlock>,
    head: Conv2d,
}

impl UNet {
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let levels = config.levels;
        let mut enc_blocks = Vec::with_capacity(levels);
        for i in 0..levels {
            let in_c = if i == 0 {
                config.in_channels
            } else {
                config.width(i - 1)
            };
            enc_blocks.push(ConvBlock::init(
                &mut params,
                &format!("enc{i}"),
                in_c,
                config.width(i),
                config.convs_per_block,
                &mut rng,
            ));
        }
        let mut dec_blocks = Vec::with_capacity(levels - 1);
        for i in 0..levels - 1 {
            let in_c = config.width(i + 1) + config.width(i);
            dec_blocks.push(ConvBlock::init(
                &mut params,
                &format!("dec{i}"),
                in_c,
                config.width(i),
                config.convs_per_block,
                &mut rng,
            ));
        }
        let head = Conv2d::init(
            &mut params,
            "head",
            config.base_width,
            config.num_classes,
            1,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            enc_blocks,
            dec_blocks,
            head,
        })
    }

    fn check_input(&self, image: &Array3<f32>) -> Result<()> {
        let (c, h, w) = image.dim();
        if c != self.config.in_channels {
            return Err(Error::Validation(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let stride = self.config.grid_stride();
        if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::Validation(format!(
                "input {h}x{w} must be divisible by the grid stride {stride}"
            )));
        }
        Ok(())
    }

    /// Full forward pass returning the cache (with the bottleneck grid)
    /// and per-pixel class logits (num_classes, H, W).
    pub fn forward(&self, image: &Array3<f32>) -> Result<(ForwardCache, Array3<f32>)> {
        self.check_input(image)?;
        let levels = self.config.levels;
        let mut enc = Vec::with_capacity(levels);
        let mut pool_args = Vec::with_capacity(levels - 1);
        let mut enc_outputs: Vec<Array3<f32>> = Vec::with_capacity(levels);
        let mut h = image.clone();
        for i in 0..levels {
            if i > 0 {
                let (pooled, arg) = maxpool2(&h)?;
                pool_args.push(arg);
                h = pooled;
            }
            let mut cache = BlockCache::default();
            h = self.enc_blocks[i].forward(&self.params, h, &mut cache);
            enc.push(cache);
            enc_outputs.push(h.clone());
        }

        let mut dec: Vec<BlockCache> = (0..levels - 1).map(|_| BlockCache::default()).collect();
        let mut up_channels = vec![0usize; levels - 1];
        let mut cur = enc_outputs[levels - 1].clone();
        for i in (0..levels - 1).rev() {
            let up = upsample2(&cur);
            up_channels[i] = up.dim().0;
            let cat = concat_channels(&up, &enc_outputs[i]);
            cur = self.dec_blocks[i].forward(&self.params, cat, &mut dec[i]);
        }
        let head_input = cur.clone();
        let logits = self.head.forward(&self.params, &cur);
        Ok((
            ForwardCache {
                enc,
                dec,
                pool_args,
                enc_outputs,
                up_channels,
                head_input,
            },
            logits,
        ))
    }

    /// Inference-only forward (no cache retention).
    pub fn predict_logits(&self, image: &Array3<f32>) -> Result<Array3<f32>> {
        self.check_input(image)?;
        let levels = self.config.levels;
        let mut skips: Vec<Array3<f32>> = Vec::with_capacity(levels);
        let mut h = image.clone();
        for i in 0..levels {
            if i > 0 {
                h = maxpool2(&h)?.0;
            }
            h = self.enc_blocks[i].forward_no_cache(&self.params, h);
            skips.push(h.clone());
        }
        let mut cur = skips[levels - 1].clone();
        for i in (0..levels - 1).rev() {
            let cat = concat_channels(&upsample2(&cur), &skips[i]);
            cur = self.dec_blocks[i].forward_no_cache(&self.params, cat);
        }
        Ok(self.head.forward(&self.params, &cur))
    }

    /// Argmax class map from logits.
    pub fn predict_labels(&self, image: &Array3<f32>) -> Result<ndarray::Array2<u8>> {
        let logits = self.predict_logits(image)?;
        Ok(argmax_labels(&logits))
    }

    /// Backward pass from the logit gradient, optionally adding an extra
    /// gradient arriving at the bottleneck (the alignment path). Returns
    /// parameter gradients aligned with `self.params`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Array3<f32>,
        d_bottleneck_extra: Option<&Array3<f32>>,
    ) -> GradVec {
        let levels = self.config.levels;
        let mut grads = self.params.zero_grads();
        let mut dcur = self
            .head
            .backward(&self.params, &cache.head_input, d_logits, &mut grads);

        // Skip gradients accumulated for each encoder output.
        let mut d_enc_out: Vec<Option<Array3<f32>>> = vec![None; levels];
        for i in 0..levels - 1 {
            let dcat = self.dec_blocks[i].backward(&self.params, &cache.dec[i], dcur, &mut grads);
            let (dup, dskip) = split_channels(&dcat, cache.up_channels[i]);
            d_enc_out[i] = Some(dskip);
            dcur = upsample2_backward(&dup);
        }
        // dcur now sits at the bottleneck output.
        if let Some(extra) = d_bottleneck_extra {
            dcur += extra;
        }

        let mut d = dcur;
        for i in (0..levels).rev() {
            d = self.enc_blocks[i].backward(&self.params, &cache.enc[i], d, &mut grads);
            if i > 0 {
                d = maxpool2_backward(&d, &cache.pool_args[i - 1]);
                if let Some(skip) = d_enc_out[i - 1].take() {
                    d += &skip;
                }
            }
        }
        grads
    }
}

/// Per-pixel argmax over the class axis; ties resolve to the lowest class.
pub fn argmax_labels(logits: &Array3<f32>) -> ndarray::Array2<u8> {
    let (n, h, w) = logits.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = logits[[0, y, x]];
        for c in 1..n {
            let v = logits[[c, y, x]];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn shape_contract_holds_across_input_sizes() {
        let cfg = UNetConfig {
            num_classes: 4,
            ..Default::default()
        };
        let model = UNet::init(cfg, 1).unwrap();
        for (h, w) in [(64, 64), (32, 48), (16, 16)] {
            let img = Array3::<f32>::zeros((1, h, w));
            let (cache, logits) = model.forward(&img).unwrap();
            assert_eq!(logits.dim(), (4, h, w));
            let (z, gh, gw) = cache.bottleneck().dim();
            assert_eq!(z, model.config.bottleneck_dim());
            assert_eq!((gh, gw), model.config.grid_shape(h, w));
        }
    }

    #[test]
    fn spec_shape_example_64x64_three_downsamplings() {
        let cfg = UNetConfig {
            in_channels: 1,
            num_classes: 4,
            base_width: 16,
            levels: 4,
            convs_per_block: 2,
        };
        let model = UNet::init(cfg, 0).unwrap();
        let img = Array3::<f32>::zeros((1, 64, 64));
        let (cache, logits) = model.forward(&img).unwrap();
        assert_eq!(logits.dim(), (4, 64, 64));
        assert_eq!(cache.bottleneck().dim().1, 8);
        assert_eq!(cache.bottleneck().dim().2, 8);
        // p = 64 cells
        assert_eq!(model.config.grid_shape(64, 64), (8, 8));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let model = UNet::init(UNetConfig::default(), 1).unwrap();
        let img = Array3::<f32>::zeros((3, 64, 64));
        assert!(model.forward(&img).is_err());
        let odd = Array3::<f32>::zeros((1, 60, 64));
        assert!(model.forward(&odd).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = UNet::init(UNetConfig::default(), 42).unwrap();
        let b = UNet::init(UNetConfig::default(), 42).unwrap();
        for (pa, pb) in a.params.tensors().iter().zip(b.params.tensors()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn predict_matches_cached_forward() {
        let model = UNet::init(UNetConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Array3::from_shape_fn((1, 16, 16), |_| rng.random_range(0.0f32..1.0));
        let (_, a) = model.forward(&img).unwrap();
        let b = model.predict_logits(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_produces_nonzero_grads_everywhere() {
        let cfg = UNetConfig {
            base_width: 4,
            ..Default::default()
        };
        let model = UNet::init(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Array3::from_shape_fn((1, 16, 16), |_| rng.random_range(0.0f32..1.0));
        let (cache, logits) = model.forward(&img).unwrap();
        let dlogits = logits.mapv(|v| 2.0 * v);
        let grads = model.backward(&cache, &dlogits, None);
        for (g, p) in grads.0.iter().zip(model.params.tensors()) {
            let norm: f32 = g.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "zero gradient for {}", p.name);
        }
    }

    #[test]
    fn extra_bottleneck_gradient_flows_into_encoder_only() {
        let cfg = UNetConfig {
            base_width: 4,
            ..Default::default()
        };
        let model = UNet::init(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = Array3::from_shape_fn((1, 16, 16), |_| rng.random_range(0.0f32..1.0));
        let (cache, logits) = model.forward(&img).unwrap();
        let zero_dlogits = Array3::zeros(logits.raw_dim());
        let extra = Array3::from_shape_fn(cache.bottleneck().raw_dim(), |_| {
            rng.random_range(-1.0f32..1.0)
        });
        let grads = model.backward(&cache, &zero_dlogits, Some(&extra));
        // Encoder weights receive gradient, decoder weights do not.
        let enc_norm: f32 = grads.0[0].iter().map(|v| v * v).sum();
        assert!(enc_norm > 0.0);
        let head_norm: f32 = grads.0[model.head.weight.0].iter().map(|v| v * v).sum();
        assert_eq!(head_norm, 0.0);
    }

    /// End-to-end finite-difference check through the whole network on a
    /// tiny configuration: objective 0.5*sum(logits^2).
    #[test]
    fn full_network_gradcheck_spot_samples() {
        let cfg = UNetConfig {
            in_channels: 1,
            num_classes: 2,
            base_width: 2,
            levels: 3,
            convs_per_block: 1,
        };
        let model = UNet::init(cfg, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let img = Array3::from_shape_fn((1, 8, 8), |_| rng.random_range(0.1f32..1.0));
        let (cache, logits) = model.forward(&img).unwrap();
        let grads = model.backward(&cache, &logits.clone(), None);

        let objective = |m: &UNet| -> f64 {
            let l = m.predict_logits(&img).unwrap();
            0.5 * l.iter().map(|v| (*v as f64).powi(2)).sum::<f64>()
        };
        // Small step: ReLU kink crossings make large-step central
        // differences unreliable.
        let h = 1e-3f32;
        let mut checked = 0;
        for (pi, p) in model.params.tensors().iter().enumerate() {
            let len = p.value.len();
            for i in (0..len).step_by(len.max(7) / 7) {
                let mut plus = UNet::init(model.config.clone(), 17).unwrap();
                plus.params.value_mut(super::super::layers::ParamId(pi))
                    .as_slice_mut()
                    .unwrap()[i] += h;
                let mut minus = UNet::init(model.config.clone(), 17).unwrap();
                minus
                    .params
                    .value_mut(super::super::layers::ParamId(pi))
                    .as_slice_mut()
                    .unwrap()[i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
                let a = grads.0[pi].as_slice().unwrap()[i] as f64;
                assert!(
                    (a - fd).abs() <= 2e-2 * a.abs().max(fd.abs()).max(1.0),
                    "param {} [{i}]: analytic {a}, fd {fd}",
                    p.name
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }
}
