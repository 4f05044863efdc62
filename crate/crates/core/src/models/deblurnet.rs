//! Encoder / residual / sub-pixel decoder deblurring network.
//!
//! ```text
//! x[4] ─ head 9×9 ─ReLU─┬─ down1 3×3/2 ─ReLU─ down2 3×3/2 ─ReLU─ res×9 ─ up1+shuffle ─ReLU─ up2+shuffle ─ReLU─ out_high 9×9 ─┐
//!                       └────────────────────────────────────────── out_low 9×9 ──────────────────────────────────────────── + ─ tanh
//! ```
//!
//! Residual block: 1×1 expand (ReLU), 1×1 low-rank reduce, 3×3 back to the
//! trunk width, plus the identity. Every conv is weight normalized.

use eadnet_tensor::{Element, Tape, Tensor, Var};

use super::{Bound, ConvSpec, Init, ModelParams, RELU_GAIN};
use crate::error::{Error, Result};

pub const DEBLURNET_TAG: &str = "deblurnet";

/// Scale applied to the initial magnitude of each residual block's last conv,
/// so that the 9-block trunk starts close to the identity.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeblurNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub down_channels: [usize; 2],
    pub n_res_blocks: usize,
    pub expand_ratio: usize,
    pub lowrank_channels: usize,
    pub head_kernel: usize,
    pub head_stride: usize,
}

impl Default for DeblurNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_channels: 64,
            down_channels: [128, 256],
            n_res_blocks: 9,
            expand_ratio: 4,
            lowrank_channels: 128,
            head_kernel: 9,
            head_stride: 1,
        }
    }
}

impl DeblurNetConfig {
    pub fn validate(&self) -> Result<()> {
        let [d1, d2] = self.down_channels;
        if [
            self.in_channels,
            self.base_channels,
            d1,
            d2,
            self.expand_ratio,
            self.lowrank_channels,
        ]
        .contains(&0)
        {
            return Err(Error::config("DeblurNet channel counts must be positive"));
        }
        if self.head_kernel.is_multiple_of(2) {
            return Err(Error::config("DeblurNet head kernel must be odd"));
        }
        if !matches!(self.head_stride, 1 | 2 | 4) {
            return Err(Error::config("DeblurNet head stride must be 1, 2 or 4"));
        }
        // Upsampling convs double the width and each shuffle divides it by 4.
        if d1 % 2 != 0 || d2 % 2 != 0 {
            return Err(Error::config("DeblurNet down_channels must be even"));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        4 * self.head_stride
    }

    /// Model tag recorded in checkpoints: `deblurnet` for the default
    /// configuration, otherwise every field spelled out, e.g.
    /// `deblurnet-b8-d8x16-r2-e2-l8-k5-s1`.
    pub fn tag(&self) -> String {
        if *self == Self::default() {
            return DEBLURNET_TAG.to_string();
        }
        let [d1, d2] = self.down_channels;
        format!(
            "{DEBLURNET_TAG}-b{}-d{d1}x{d2}-r{}-e{}-l{}-k{}-s{}{}",
            self.base_channels,
            self.n_res_blocks,
            self.expand_ratio,
            self.lowrank_channels,
            self.head_kernel,
            self.head_stride,
            if self.in_channels == 4 {
                String::new()
            } else {
                format!("-i{}", self.in_channels)
            }
        )
    }

    /// Inverse of [`Self::tag`].
    pub fn from_tag(tag: &str) -> Result<Self> {
        let bad = || Error::config(format!("{tag:?} is not a DeblurNet checkpoint tag"));
        if tag == DEBLURNET_TAG {
            return Ok(Self::default());
        }
        let rest = tag
            .strip_prefix(DEBLURNET_TAG)
            .and_then(|r| r.strip_prefix('-'))
            .ok_or_else(bad)?;
        let mut cfg = Self::default();
        for field in rest.split('-') {
            let (key, value) = field.split_at_checked(1).ok_or_else(bad)?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
            match key {
                "b" => cfg.base_channels = num(value)?,
                "d" => {
                    let (a, b) = value.split_once('x').ok_or_else(bad)?;
                    cfg.down_channels = [num(a)?, num(b)?];
                }
                "r" => cfg.n_res_blocks = num(value)?,
                "e" => cfg.expand_ratio = num(value)?,
                "l" => cfg.lowrank_channels = num(value)?,
                "k" => cfg.head_kernel = num(value)?,
                "s" => cfg.head_stride = num(value)?,
                "i" => cfg.in_channels = num(value)?,
                _ => return Err(bad()),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct DeblurNet<T: Element = f32> {
    cfg: DeblurNetConfig,
    params: ModelParams<T>,
}

fn res_name(i: usize, part: &str) -> String {
    format!("res{i}.{part}")
}

impl<T: Element> DeblurNet<T> {
    pub fn build(cfg: DeblurNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = ModelParams::new(cfg.tag());
        let relu = Init::FanIn { gain: RELU_GAIN };
        let linear = Init::FanIn { gain: 1.0 };
        let [d1, d2] = cfg.down_channels;
        let (b, k) = (cfg.base_channels, cfg.head_kernel);
        let wn = |spec: ConvSpec| spec.weight_normed();
        p.add_conv(
            wn(ConvSpec::new(
                "head",
                cfg.in_channels,
                b,
                k,
                cfg.head_stride,
                k / 2,
            )),
            relu,
            seed,
        )?;
        p.add_conv(wn(ConvSpec::new("down1", b, d1, 3, 2, 1)), relu, seed)?;
        p.add_conv(wn(ConvSpec::new("down2", d1, d2, 3, 2, 1)), relu, seed)?;
        let wide = d2 * cfg.expand_ratio;
        for i in 0..cfg.n_res_blocks {
            p.add_conv(
                wn(ConvSpec::new(res_name(i, "expand"), d2, wide, 1, 1, 0)),
                relu,
                seed,
            )?;
            p.add_conv(
                wn(ConvSpec::new(
                    res_name(i, "reduce"),
                    wide,
                    cfg.lowrank_channels,
                    1,
                    1,
                    0,
                )),
                linear,
                seed,
            )?;
            p.add_conv(
                wn(ConvSpec::new(
                    res_name(i, "conv"),
                    cfg.lowrank_channels,
                    d2,
                    3,
                    1,
                    1,
                )),
                linear,
                seed,
            )?;
            let g = format!("{}.weight_g", res_name(i, "conv"));
            let scaled = p
                .get(&g)
                .expect("g")
                .map(|v| v * T::from_f64_lossy(RESIDUAL_INIT_SCALE));
            p.set(&g, scaled)?;
        }
        // Upsampling convs produce 4× the channels consumed after shuffling.
        p.add_conv(wn(ConvSpec::new("up1", d2, 2 * d2, 3, 1, 1)), relu, seed)?;
        p.add_conv(
            wn(ConvSpec::new("up2", d2 / 2, 2 * d1, 3, 1, 1)),
            relu,
            seed,
        )?;
        p.add_conv(
            wn(ConvSpec::new("out_low", b, 3, k, 1, k / 2)),
            linear,
            seed,
        )?;
        p.add_conv(
            wn(ConvSpec::new("out_high", d1 / 2, 3, k, 1, k / 2)),
            linear,
            seed,
        )?;
        Ok(Self { cfg, params: p })
    }

    pub fn from_params(cfg: DeblurNetConfig, params: ModelParams<T>) -> Result<Self> {
        let mut net = Self::build(cfg, 0)?;
        net.params.load_from(&params.named_tensors())?;
        Ok(net)
    }

    pub fn config(&self) -> &DeblurNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let d = self.cfg.divisor();
        match *shape {
            [_, c, h, w] if c == self.cfg.in_channels && h % d == 0 && w % d == 0 => Ok(()),
            [_, c, h, w] if c == self.cfg.in_channels => Err(Error::config(format!(
                "DeblurNet needs height and width divisible by {d}, got {h}x{w}; pad the input first"
            ))),
            _ => Err(Error::config(format!(
                "DeblurNet expects [N,{},H,W] input, got {shape:?}",
                self.cfg.in_channels
            ))),
        }
    }

    fn conv(&self, tape: &mut Tape<T>, bound: &Bound, name: &str, x: Var) -> Result<Var> {
        self.params.apply_conv(tape, bound, name, x)
    }

    /// Forward pass; `x` is `[N,4,H,W]` (RGB in `[-1,1]` plus edge map in
    /// `[0,1]`), output is `[N,3,H,W]` in `[-1,1]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let [_, _, h, w] = tape.value(x).dims4("deblurnet")?;
        let head = self.conv(tape, bound, "head", x)?;
        let head = tape.relu(head);
        let mut t = self.conv(tape, bound, "down1", head)?;
        t = tape.relu(t);
        t = self.conv(tape, bound, "down2", t)?;
        t = tape.relu(t);
        for i in 0..self.cfg.n_res_blocks {
            let mut r = self.conv(tape, bound, &res_name(i, "expand"), t)?;
            r = tape.relu(r);
            r = self.conv(tape, bound, &res_name(i, "reduce"), r)?;
            r = self.conv(tape, bound, &res_name(i, "conv"), r)?;
            t = tape.add(t, r)?;
        }
        for up in ["up1", "up2"] {
            t = self.conv(tape, bound, up, t)?;
            t = tape.pixel_shuffle(t, 2)?;
            t = tape.relu(t);
        }
        let high = self.conv(tape, bound, "out_high", t)?;
        let low = self.conv(tape, bound, "out_low", head)?;
        let mut sum = tape.add(low, high)?;
        if self.cfg.head_stride != 1 {
            sum = tape.upsample_bilinear(sum, h, w)?;
        }
        Ok(tape.tanh(sum))
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(y).clone())
    }
}
