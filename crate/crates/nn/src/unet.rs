//! Volumetric residual U-Net with timestep-modulated group normalization.
//!
//! Encoder: one residual stack per stage (attention where the stage's
//! downsampling factor matches), strided 3³ conv between stages. Middle:
//! res → attention → res. Decoder: concatenate the stage's skip, residual
//! stack, nearest-neighbour upsample. The output head sees the normalized
//! features plus the raw network input, and its conv starts at zero.

use serde::{Deserialize, Serialize};

use c2v_core::geometry::{AuxChannels, PrimaryCondition};

use crate::error::{NnError, Result};
use crate::params::{Bound, Init, ParamSpec};
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// 1 (the bridge state) + number of active auxiliary channels.
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub res_blocks: usize,
    /// Stage whose spatial size is `resolution / factor` gets attention.
    pub attention_at_factor: usize,
    pub attention_heads: usize,
    pub attention_head_channels: usize,
    pub groups: usize,
    /// Sinusoidal timestep features before the projection.
    pub time_channels: usize,
    pub resolution: usize,
    pub primary: PrimaryCondition,
    pub aux: AuxChannels,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig::desk(AuxChannels::ALL)
    }
}

impl DenoiserConfig {
    /// The 32³ configuration: stages [16, 32, 48, 64], 2×16 attention at /8.
    pub fn desk(aux: AuxChannels) -> Self {
        DenoiserConfig {
            in_channels: 1 + aux.count(),
            stage_channels: vec![16, 32, 48, 64],
            res_blocks: 1,
            attention_at_factor: 8,
            attention_heads: 2,
            attention_head_channels: 16,
            groups: 8,
            time_channels: 64,
            resolution: 32,
            primary: PrimaryCondition::Cortex,
            aux,
        }
    }

    /// A few-hundred-parameter network for gradient checks and quick tests.
    pub fn tiny(aux: AuxChannels) -> Self {
        DenoiserConfig {
            in_channels: 1 + aux.count(),
            stage_channels: vec![4, 6],
            res_blocks: 1,
            attention_at_factor: 2,
            attention_heads: 2,
            attention_head_channels: 2,
            groups: 2,
            time_channels: 8,
            resolution: 4,
            primary: PrimaryCondition::Cortex,
            aux,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    fn attention_width(&self) -> usize {
        self.attention_heads * self.attention_head_channels
    }

    fn embed_dim(&self) -> usize {
        4 * self.stage_channels[0]
    }

    fn has_attention(&self, stage: usize) -> bool {
        1usize.checked_shl(stage as u32) == Some(self.attention_at_factor)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad(format!(
                "stage_channels must be nonempty and positive, got {:?}",
                self.stage_channels
            ));
        }
        if self.in_channels != 1 + self.aux.count() {
            return bad(format!(
                "in_channels {} does not match 1 + {} active auxiliary channels",
                self.in_channels,
                self.aux.count()
            ));
        }
        let down = 1usize << (self.stages() - 1);
        if self.resolution == 0 || self.resolution % down != 0 {
            return bad(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution,
                self.stages() - 1
            ));
        }
        if !self.attention_at_factor.is_power_of_two() || self.attention_at_factor > down {
            return bad(format!(
                "attention_at_factor {} must be a power of two no larger than {down}",
                self.attention_at_factor
            ));
        }
        if self.attention_width() == 0 || self.groups == 0 || self.res_blocks == 0 {
            return bad("attention heads/channels, groups and res_blocks must be positive".into());
        }
        if self.time_channels < 4 || self.time_channels % 2 != 0 {
            return bad(format!(
                "time_channels must be even and at least 4, got {}",
                self.time_channels
            ));
        }
        Ok(())
    }

    /// Every parameter, in the canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = Specs::default();
        let e = self.embed_dim();
        s.linear("time.lin1", self.time_channels, e);
        s.linear("time.lin2", e, e);
        let c0 = self.stage_channels[0];
        s.conv("in", self.in_channels, c0, 3);
        let mut c = c0;
        for (i, &ci) in self.stage_channels.iter().enumerate() {
            for r in 0..self.res_blocks {
                s.res(self, &format!("enc{i}.res{r}"), c, ci);
                c = ci;
                if self.has_attention(i) {
                    s.attn(self, &format!("enc{i}.attn{r}"), c);
                }
            }
            if i + 1 < self.stages() {
                s.conv(&format!("enc{i}.down"), c, c, 3);
            }
        }
        s.res(self, "mid.res0", c, c);
        s.attn(self, "mid.attn", c);
        s.res(self, "mid.res1", c, c);
        for (i, &ci) in self.stage_channels.iter().enumerate().rev() {
            for r in 0..self.res_blocks {
                let cin = if r == 0 { c + ci } else { c };
                s.res(self, &format!("dec{i}.res{r}"), cin, ci);
                c = ci;
                if self.has_attention(i) {
                    s.attn(self, &format!("dec{i}.attn{r}"), c);
                }
            }
        }
        s.norm("out.norm", c);
        s.conv_init("out.conv", c + self.in_channels, 1, 3, Init::Zeros);
        s.0
    }

    /// Trainable scalar count; depends on nothing but the config.
    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Default)]
struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn conv_init(&mut self, p: &str, cin: usize, cout: usize, k: usize, init: Init) {
        self.push(format!("{p}.w"), vec![cout, cin, k, k, k], init);
        self.push(format!("{p}.b"), vec![cout], init);
    }

    fn conv(&mut self, p: &str, cin: usize, cout: usize, k: usize) {
        self.conv_init(
            p,
            cin,
            cout,
            k,
            Init::Uniform {
                fan_in: cin * k * k * k,
            },
        );
    }

    fn linear(&mut self, p: &str, i: usize, o: usize) {
        self.push(format!("{p}.w"), vec![o, i], Init::Uniform { fan_in: i });
        self.push(format!("{p}.b"), vec![o], Init::Uniform { fan_in: i });
    }

    fn norm(&mut self, p: &str, c: usize) {
        self.push(format!("{p}.g"), vec![c], Init::Ones);
        self.push(format!("{p}.b"), vec![c], Init::Zeros);
    }

    fn res(&mut self, cfg: &DenoiserConfig, p: &str, cin: usize, cout: usize) {
        self.norm(&format!("{p}.norm1"), cin);
        self.conv(&format!("{p}.conv1"), cin, cout, 3);
        self.linear(&format!("{p}.emb"), cfg.embed_dim(), 2 * cout);
        self.norm(&format!("{p}.norm2"), cout);
        self.conv(&format!("{p}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{p}.skip"), cin, cout, 1);
        }
    }

    fn attn(&mut self, cfg: &DenoiserConfig, p: &str, c: usize) {
        let w = cfg.attention_width();
        self.norm(&format!("{p}.norm"), c);
        self.conv(&format!("{p}.qkv"), c, 3 * w, 1);
        self.conv(&format!("{p}.proj"), w, c, 1);
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `[cos(t·f_k) | sin(t·f_k)]` with `f_k` geometric from 1 down to 1e-4.
pub fn timestep_features(t: &[usize], channels: usize) -> Tensor {
    let half = channels / 2;
    let mut data = Vec::with_capacity(t.len() * channels);
    for &ti in t {
        let freqs =
            (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / (half - 1).max(1) as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti as f64 * f).collect();
        data.extend(args.iter().map(|a| a.cos()));
        data.extend(args.iter().map(|a| a.sin()));
    }
    Tensor {
        shape: vec![t.len(), channels],
        data,
    }
}

struct Net<'a> {
    cfg: &'a DenoiserConfig,
    p: &'a Bound,
}

impl Net<'_> {
    fn conv(&self, tape: &mut Tape, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let (w, b) = (
            self.p.var(&format!("{name}.w"))?,
            self.p.var(&format!("{name}.b"))?,
        );
        tape.conv3d(x, w, Some(b), stride, pad)
    }

    fn norm(&self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let c = tape.shape(x)[1];
        let (g, b) = (
            self.p.var(&format!("{name}.g"))?,
            self.p.var(&format!("{name}.b"))?,
        );
        tape.group_norm(x, g, b, gcd(self.cfg.groups, c))
    }

    fn linear(&self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let (w, b) = (
            self.p.var(&format!("{name}.w"))?,
            self.p.var(&format!("{name}.b"))?,
        );
        tape.linear(x, w, b)
    }

    fn res(&self, tape: &mut Tape, p: &str, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm(tape, &format!("{p}.norm1"), x)?;
        let h = tape.silu(h);
        let h = self.conv(tape, &format!("{p}.conv1"), h, 1, 1)?;
        let ss = self.linear(tape, &format!("{p}.emb"), emb)?;
        let h = self.norm(tape, &format!("{p}.norm2"), h)?;
        let h = tape.modulate(h, ss)?;
        let h = tape.silu(h);
        let h = self.conv(tape, &format!("{p}.conv2"), h, 1, 1)?;
        let skip = if tape.shape(x)[1] == tape.shape(h)[1] {
            x
        } else {
            self.conv(tape, &format!("{p}.skip"), x, 1, 0)?
        };
        tape.add(skip, h)
    }

    fn attn(&self, tape: &mut Tape, p: &str, x: Var) -> Result<Var> {
        let h = self.norm(tape, &format!("{p}.norm"), x)?;
        let qkv = self.conv(tape, &format!("{p}.qkv"), h, 1, 0)?;
        let a = tape.attention(qkv, self.cfg.attention_heads)?;
        let o = self.conv(tape, &format!("{p}.proj"), a, 1, 0)?;
        tape.add(x, o)
    }
}

/// Record the network on `tape`. `x` is `[N, in_channels, D, H, W]`, one
/// timestep per sample; returns the `[N, 1, D, H, W]` prediction.
pub fn forward(
    cfg: &DenoiserConfig,
    tape: &mut Tape,
    p: &Bound,
    x: Var,
    t: &[usize],
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let down = 1usize << (cfg.stages() - 1);
    if xs.len() != 5 || xs[1] != cfg.in_channels || xs[2..].iter().any(|&d| d == 0 || d % down != 0)
    {
        return Err(NnError::Shape(format!(
            "network input {xs:?} needs {} channels and spatial sizes divisible by {down}",
            cfg.in_channels
        )));
    }
    if t.len() != xs[0] {
        return Err(NnError::Shape(format!(
            "{} timesteps for a batch of {}",
            t.len(),
            xs[0]
        )));
    }
    let net = Net { cfg, p };
    let feats = tape.constant(timestep_features(t, cfg.time_channels));
    let emb = net.linear(tape, "time.lin1", feats)?;
    let emb = tape.silu(emb);
    let emb = net.linear(tape, "time.lin2", emb)?;
    let emb = tape.silu(emb);

    let mut h = net.conv(tape, "in", x, 1, 1)?;
    let mut skips = Vec::with_capacity(cfg.stages());
    for i in 0..cfg.stages() {
        for r in 0..cfg.res_blocks {
            h = net.res(tape, &format!("enc{i}.res{r}"), h, emb)?;
            if cfg.has_attention(i) {
                h = net.attn(tape, &format!("enc{i}.attn{r}"), h)?;
            }
        }
        skips.push(h);
        if i + 1 < cfg.stages() {
            h = net.conv(tape, &format!("enc{i}.down"), h, 2, 1)?;
        }
    }
    h = net.res(tape, "mid.res0", h, emb)?;
    h = net.attn(tape, "mid.attn", h)?;
    h = net.res(tape, "mid.res1", h, emb)?;
    for i in (0..cfg.stages()).rev() {
        h = tape.concat_channels(h, skips[i])?;
        for r in 0..cfg.res_blocks {
            h = net.res(tape, &format!("dec{i}.res{r}"), h, emb)?;
            if cfg.has_attention(i) {
                h = net.attn(tape, &format!("dec{i}.attn{r}"), h)?;
            }
        }
        if i > 0 {
            h = tape.upsample2(h)?;
        }
    }
    let h = net.norm(tape, "out.norm", h)?;
    let h = tape.silu(h);
    let h = tape.concat_channels(h, x)?;
    net.conv(tape, "out.conv", h, 1, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        let c = DenoiserConfig::default();
        c.validate().unwrap();
        assert_eq!(c.in_channels, 5);
        assert!(c.has_attention(3) && !c.has_attention(2));
        DenoiserConfig::tiny(AuxChannels::NONE).validate().unwrap();
    }

    #[test]
    fn validation_failures() {
        let mut c = DenoiserConfig::default();
        c.in_channels = 2;
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::default();
        c.resolution = 20;
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::default();
        c.attention_at_factor = 16;
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::default();
        c.stage_channels.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn timestep_features_layout() {
        let f = timestep_features(&[0, 3], 8);
        assert_eq!(f.shape, vec![2, 8]);
        assert_eq!(&f.data[..8], &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((f.data[8] - 3f64.cos()).abs() < 1e-15);
        assert!((f.data[8 + 7] - (3.0 * 1e-4f64).sin()).abs() < 1e-15);
    }
}
