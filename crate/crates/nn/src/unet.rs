use ndarray::{s, Array1, Array2, Array4, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{max_pool2, max_pool2_backward, upsample2, upsample2_backward, DoubleConv, DoubleConvCache};
use crate::{Act, Conv2d, NnError, Param, Scalar};

/// Width multiplier applied to variant B.
pub const VARIANT_B_WIDTH_MULT: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Encoder-decoder at the configured base width.
    A,
    /// Same topology, 1.5x wider.
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Number of 2x down-sampling stages.
    pub depth: usize,
    pub init_seed: u64,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        match self.variant {
            Variant::A => self.base_width,
            Variant::B => (self.base_width as f64 * VARIANT_B_WIDTH_MULT).ceil() as usize,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.num_classes < 2 {
            return Err(NnError::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(NnError::Config("in_channels and base_width must be positive".into()));
        }
        Ok(())
    }
}

/// Configuration of the two cross-supervising networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub first: ModelConfig,
    pub second: ModelConfig,
}

impl PairConfig {
    /// Variant A seeded with `seed`, variant B seeded with `seed + 1`.
    pub fn perturbed(in_channels: usize, num_classes: usize, base_width: usize, depth: usize, seed: u64) -> Self {
        let first = ModelConfig { in_channels, num_classes, base_width, depth, init_seed: seed, variant: Variant::A };
        let second = ModelConfig { init_seed: seed.wrapping_add(1), variant: Variant::B, ..first.clone() };
        Self { first, second }
    }
}

/// Builds the two networks; parameters are never shared.
pub fn make_pair<F: Scalar>(cfg: &PairConfig) -> Result<(UNet<F>, UNet<F>), NnError> {
    Ok((UNet::new(cfg.first.clone())?, UNet::new(cfg.second.clone())?))
}

/// U-shaped encoder-decoder: double-conv blocks, max-pool down, nearest
/// upsampling with a 1x1 channel projection, skip concatenation.
#[derive(Clone, Debug)]
pub struct UNet<F> {
    config: ModelConfig,
    enc: Vec<DoubleConv<F>>,
    up: Vec<Conv2d<F>>,
    dec: Vec<DoubleConv<F>>,
    head: Conv2d<F>,
}

/// Everything the backward pass needs from one training-mode forward.
pub struct UNetTape<F> {
    enc: Vec<DoubleConvCache<F>>,
    pools: Vec<(Act<F>, Vec<u8>)>,
    up_inputs: Vec<Act<F>>,
    up_outputs: Vec<Act<F>>,
    dec: Vec<DoubleConvCache<F>>,
    head_input: Act<F>,
    skip_channels: Vec<usize>,
}

impl<F: Scalar> UNet<F> {
    pub fn new(config: ModelConfig) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let w = config.width();
        let ch: Vec<usize> = (0..=config.depth).map(|i| w << i).collect();
        let mut enc = Vec::with_capacity(config.depth + 1);
        enc.push(DoubleConv::new(config.in_channels, ch[0], &mut rng));
        for i in 1..=config.depth {
            enc.push(DoubleConv::new(ch[i - 1], ch[i], &mut rng));
        }
        let mut up = Vec::with_capacity(config.depth);
        let mut dec = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            up.push(Conv2d::new(ch[i + 1], ch[i], 1, true, &mut rng));
            dec.push(DoubleConv::new(2 * ch[i], ch[i], &mut rng));
        }
        let head = Conv2d::new(ch[0], config.num_classes, 1, true, &mut rng);
        Ok(Self { config, enc, up, dec, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, x: &ArrayView4<'_, F>) -> Result<(), NnError> {
        let (_, c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(NnError::Shape(format!("expected {} input channels, got {c}", self.config.in_channels)));
        }
        let m = 1usize << self.config.depth;
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(NnError::Shape(format!("spatial size {h}x{w} must be a positive multiple of {m}")));
        }
        check_finite(x, "input")
    }

    /// Training-mode forward: batch statistics, running statistics updated,
    /// tape recorded for [`UNet::backward`].
    pub fn forward_train(&mut self, x: ArrayView4<'_, F>) -> Result<(Array4<F>, UNetTape<F>), NnError> {
        self.check_input(&x)?;
        let depth = self.config.depth;
        let mut cur = Act::from_bchw(x);
        let mut enc_caches = Vec::with_capacity(depth + 1);
        let mut pools = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        for i in 0..=depth {
            if i > 0 {
                let (p, arg) = max_pool2(&cur);
                pools.push((cur, arg));
                cur = p;
            }
            let (out, cache) = self.enc[i].forward_train(cur);
            enc_caches.push(cache);
            if i < depth {
                skips.push(out.clone());
            }
            cur = out;
        }
        let skip_channels = skips.iter().map(Act::channels).collect();
        let mut up_inputs = Vec::with_capacity(depth);
        let mut up_outputs = Vec::with_capacity(depth);
        let mut dec_caches = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            let projected = self.up[i].forward(&cur);
            up_inputs.push(cur);
            let upsampled = upsample2(&projected);
            up_outputs.push(projected);
            let joined = Act::concat(&skips[i], &upsampled);
            let (out, cache) = self.dec[i].forward_train(joined);
            dec_caches.push(cache);
            cur = out;
        }
        let logits = self.head.forward(&cur).to_bchw();
        check_finite(&logits.view(), "logits")?;
        for (blk, c) in self.enc.iter_mut().zip(&enc_caches) {
            blk.update_running(c);
        }
        for (k, c) in dec_caches.iter().enumerate() {
            self.dec[depth - 1 - k].update_running(c);
        }
        let tape = UNetTape {
            enc: enc_caches,
            pools,
            up_inputs,
            up_outputs,
            dec: dec_caches,
            head_input: cur,
            skip_channels,
        };
        Ok((logits, tape))
    }

    /// Inference-mode forward using running batch-norm statistics.
    pub fn forward_eval(&self, x: ArrayView4<'_, F>) -> Result<Array4<F>, NnError> {
        self.check_input(&x)?;
        let depth = self.config.depth;
        let mut cur = Act::from_bchw(x);
        let mut skips = Vec::with_capacity(depth);
        for i in 0..=depth {
            if i > 0 {
                cur = max_pool2(&cur).0;
            }
            cur = self.enc[i].forward_eval(&cur);
            if i < depth {
                skips.push(cur.clone());
            }
        }
        for i in (0..depth).rev() {
            let upsampled = upsample2(&self.up[i].forward(&cur));
            cur = self.dec[i].forward_eval(&Act::concat(&skips[i], &upsampled));
        }
        let logits = self.head.forward(&cur).to_bchw();
        check_finite(&logits.view(), "logits")?;
        Ok(logits)
    }

    /// Accumulates parameter gradients of a scalar loss given its gradient
    /// with respect to the logits of the taped forward pass.
    pub fn backward(&mut self, tape: &UNetTape<F>, dlogits: ArrayView4<'_, F>) -> Result<(), NnError> {
        let head_in = &tape.head_input;
        let expect = (head_in.batch, self.config.num_classes, head_in.height, head_in.width);
        if dlogits.dim() != expect {
            return Err(NnError::Shape(format!("dlogits {:?} does not match logits {:?}", dlogits.dim(), expect)));
        }
        let depth = self.config.depth;
        let dy = Act::from_bchw(dlogits).data;
        let mut grad = self.head.backward(head_in, &dy, true).expect("requested");
        let mut skip_grads: Vec<Option<Array2<F>>> = vec![None; depth];
        for k in (0..depth).rev() {
            let i = depth - 1 - k;
            let djoined = self.dec[i].backward(&tape.dec[k], grad, true).expect("requested");
            let sc = tape.skip_channels[i];
            skip_grads[i] = Some(djoined.slice(s![..sc, ..]).to_owned());
            let dup = djoined.slice(s![sc.., ..]).to_owned();
            let dproj = upsample2_backward(&dup, &tape.up_outputs[k]);
            grad = self.up[i].backward(&tape.up_inputs[k], &dproj, true).expect("requested");
        }
        for i in (0..=depth).rev() {
            if i < depth {
                grad += skip_grads[i].as_ref().expect("decoder visited every level");
            }
            let need = i > 0;
            let dx = self.enc[i].backward(&tape.enc[i], grad, need);
            if i == 0 {
                break;
            }
            let (input, arg) = &tape.pools[i - 1];
            grad = max_pool2_backward(&dx.expect("requested"), arg, input);
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut p = Vec::new();
        for b in &self.enc {
            p.extend(b.params());
        }
        for (u, d) in self.up.iter().zip(&self.dec) {
            p.extend(u.params());
            p.extend(d.params());
        }
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut p = Vec::new();
        for b in &mut self.enc {
            p.extend(b.params_mut());
        }
        for (u, d) in self.up.iter_mut().zip(&mut self.dec) {
            p.extend(u.params_mut());
            p.extend(d.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }

    /// Non-trainable state (batch-norm running statistics), fixed order.
    pub fn buffers(&self) -> Vec<&Array1<F>> {
        self.enc.iter().chain(&self.dec).flat_map(|b| b.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Array1<F>> {
        self.enc.iter_mut().chain(self.dec.iter_mut()).flat_map(|b| b.buffers_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// All trainable values concatenated in parameter order.
    pub fn flat_parameters(&self) -> Vec<F> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    /// The first convolution of the network (input side).
    pub fn first_conv(&self) -> &Conv2d<F> {
        &self.enc[0].conv1
    }

    pub fn first_conv_mut(&mut self) -> &mut Conv2d<F> {
        &mut self.enc[0].conv1
    }
}

fn check_finite<F: Scalar>(x: &ArrayView4<'_, F>, stage: &'static str) -> Result<(), NnError> {
    for (b, sample) in x.axis_iter(Axis(0)).enumerate() {
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { stage, batch_index: b });
        }
    }
    Ok(())
}
