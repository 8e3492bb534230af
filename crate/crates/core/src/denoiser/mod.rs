//! Video noise-prediction network with named temporal-attention blocks.
//!
//! A two-path conv encoder/decoder over per-frame images, conditioned on the
//! diffusion step and a class token, with one temporal-attention block per
//! up-path resolution level (`up_block.0` is the deepest, `up_block.{L-1}`
//! the full-resolution one). Attention maps of requested blocks are returned
//! as [`AttentionRecord`]s; recording is observation-only and never changes
//! the prediction.
//!
//! The forward pass operates on a single clip `(f, ch, h, w)`; batching is
//! done by running independent clips in parallel, which matches the rest of
//! the pipeline (group statistics are per-clip, so results are identical to
//! a batched run).

pub mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor};

/// Condition class id; 0 is the learned null token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Condition(pub u32);

impl Condition {
    pub const NULL: Condition = Condition(0);
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub frames: usize,
    pub channels: usize,
    /// Base channel width; level `l` uses `width << l`.
    pub width: usize,
    /// Resolution levels; each has one down block and one up block.
    pub levels: usize,
    pub input_size: usize,
    pub time_dim: usize,
    /// Condition vocabulary size including the null token.
    pub vocab: usize,
    /// Highest diffusion step the time embedding must represent.
    pub max_t: usize,
}

impl DenoiserConfig {
    /// Default desk-scale geometry used by the CLI.
    pub fn desk() -> Self {
        DenoiserConfig {
            frames: 8,
            channels: 1,
            width: 8,
            levels: 2,
            input_size: 32,
            time_dim: 32,
            vocab: 5,
            max_t: 1000,
        }
    }

    /// Miniature geometry for gradient checks and fast tests.
    pub fn tiny() -> Self {
        DenoiserConfig {
            frames: 4,
            channels: 1,
            width: 4,
            levels: 2,
            input_size: 8,
            time_dim: 16,
            vocab: 5,
            max_t: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config(format!("frames must be >= 2, got {}", self.frames)));
        }
        if !self.input_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "input size must be a power of two, got {}",
                self.input_size
            )));
        }
        if self.levels == 0 || self.input_size >> (self.levels - 1) < 2 {
            return Err(Error::Config(format!(
                "{} levels do not fit input size {}",
                self.levels, self.input_size
            )));
        }
        if self.channels == 0 || self.width == 0 || self.vocab == 0 || self.max_t == 0 {
            return Err(Error::Config("channels, width, vocab and max_t must be positive".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time_dim must be even >= 2, got {}", self.time_dim)));
        }
        Ok(())
    }

    /// Up-path attention block names, deepest first.
    pub fn block_names(&self) -> Vec<String> {
        (0..self.levels).map(|u| format!("up_block.{u}")).collect()
    }

    /// Spatial resolution of a named block's attention map.
    pub fn block_resolution(&self, name: &str) -> Result<usize> {
        let names = self.block_names();
        if !names.iter().any(|n| n == name) {
            return Err(Error::UnknownBlock { name: name.to_string(), valid: names });
        }
        let u: usize = name["up_block.".len()..].parse().expect("validated block name");
        Ok(self.input_size >> (self.levels - 1 - u))
    }

    fn level_width(&self, l: usize) -> usize {
        self.width << l
    }
}

/// Temporal-attention map of one block at one step: rows are spatial
/// positions, each `(p, i)` row is a distribution over source frames.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub block: String,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// `(h*w, f, f)`; every `(p, i)` row sums to 1.
    pub map: Tensor,
}

// ── Parameter registry ───────────────────────────────────────────────

enum Init {
    Zeros,
    Ones,
    Normal(f32),
}

struct ParamBuilder {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    fn add(&mut self, name: &str, dims: &[usize], init: Init) -> usize {
        let n: usize = dims.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                (0..n).map(|_| self.rng.sample::<f32, _>(StandardNormal) * std).collect()
            }
        };
        self.names.push(name.to_string());
        self.tensors.push(Tensor::new(dims.to_vec(), data).expect("finite init"));
        self.tensors.len() - 1
    }
}

fn gn_groups(c: usize) -> usize {
    if c % 4 == 0 {
        4
    } else {
        1
    }
}

struct Conv {
    w: usize,
    b: usize,
    pad: usize,
}

impl Conv {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let std = (2.0 / (cin * k * k) as f32).sqrt();
        Conv {
            w: pb.add(&format!("{name}.w"), &[cout, cin, k, k], Init::Normal(std)),
            b: pb.add(&format!("{name}.b"), &[cout], Init::Zeros),
            pad: (k - 1) / 2,
        }
    }

    fn zeroed(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Conv {
            w: pb.add(&format!("{name}.w"), &[cout, cin, k, k], Init::Zeros),
            b: pb.add(&format!("{name}.b"), &[cout], Init::Zeros),
            pad: (k - 1) / 2,
        }
    }

    fn fwd(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
        x.conv2d(&p[self.w], &p[self.b], self.pad)
    }
}

struct Norm {
    g: usize,
    b: usize,
    groups: usize,
}

impl Norm {
    fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        Norm {
            g: pb.add(&format!("{name}.g"), &[c], Init::Ones),
            b: pb.add(&format!("{name}.b"), &[c], Init::Zeros),
            groups: gn_groups(c),
        }
    }

    fn fwd(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
        x.group_norm(self.groups, &p[self.g], &p[self.b])
    }
}

struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn new(pb: &mut ParamBuilder, name: &str, din: usize, dout: usize) -> Self {
        let std = (2.0 / din as f32).sqrt();
        Linear {
            w: pb.add(&format!("{name}.w"), &[din, dout], Init::Normal(std)),
            b: pb.add(&format!("{name}.b"), &[dout], Init::Zeros),
        }
    }

    fn fwd(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor> {
        x.matmul(&p[self.w])?.add_row_bias(&p[self.b])
    }
}

struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time_proj: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, time_dim: usize) -> Self {
        ResBlock {
            norm1: Norm::new(pb, &format!("{name}.norm1"), cin),
            conv1: Conv::new(pb, &format!("{name}.conv1"), cin, cout, 3),
            time_proj: Linear::new(pb, &format!("{name}.time"), time_dim, cout),
            norm2: Norm::new(pb, &format!("{name}.norm2"), cout),
            conv2: Conv::new(pb, &format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| Conv::new(pb, &format!("{name}.skip"), cin, cout, 1)),
        }
    }

    fn fwd(&self, p: &[Tensor], x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let mut h = self.conv1.fwd(p, &self.norm1.fwd(p, x)?.silu()?)?;
        let bias = self.time_proj.fwd(p, emb)?;
        let cout = bias.len();
        h = h.add_chan_bias(&bias.reshape(&[cout])?)?;
        h = self.conv2.fwd(p, &self.norm2.fwd(p, &h)?.silu()?)?;
        let base = match &self.skip {
            Some(s) => s.fwd(p, x)?,
            None => x.clone(),
        };
        base.add(&h)
    }
}

struct AttnBlock {
    ln_g: usize,
    ln_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ch: usize,
}

impl AttnBlock {
    fn new(pb: &mut ParamBuilder, name: &str, ch: usize) -> Self {
        let std = 1.0 / (ch as f32).sqrt();
        AttnBlock {
            ln_g: pb.add(&format!("{name}.ln.g"), &[ch], Init::Ones),
            ln_b: pb.add(&format!("{name}.ln.b"), &[ch], Init::Zeros),
            wq: pb.add(&format!("{name}.wq"), &[ch, ch], Init::Normal(std)),
            wk: pb.add(&format!("{name}.wk"), &[ch, ch], Init::Normal(std)),
            wv: pb.add(&format!("{name}.wv"), &[ch, ch], Init::Normal(std)),
            // zero-init output projection: the block starts as identity
            wo: pb.add(&format!("{name}.wo"), &[ch, ch], Init::Zeros),
            ch,
        }
    }

    /// Self-attention along the frame axis with spatial positions merged
    /// into the batch. Returns the block output and the attention map
    /// `(h*w, f, f)`.
    fn fwd(&self, p: &[Tensor], x: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = x.dims();
        let (f, ch, h, w) = (d[0], d[1], d[2], d[3]);
        debug_assert_eq!(ch, self.ch);
        // (f, ch, h, w) -> (h, w, f, ch) -> (h*w, f, ch)
        let merged = x.permute(&[2, 3, 0, 1])?.reshape(&[h * w, f, ch])?;
        let normed = merged.layer_norm(&p[self.ln_g], &p[self.ln_b])?;
        let q = normed.matmul(&p[self.wq])?;
        let k = normed.matmul(&p[self.wk])?;
        let v = normed.matmul(&p[self.wv])?;
        let scores = q.matmul(&k.permute(&[0, 2, 1])?)?.scale(1.0 / (ch as f32).sqrt())?;
        let map = scores.softmax_last()?;
        let out = map.matmul(&v)?.matmul(&p[self.wo])?;
        // (h*w, f, ch) -> (h, w, f, ch) -> (f, ch, h, w)
        let restored = out.reshape(&[h, w, f, ch])?.permute(&[2, 3, 0, 1])?;
        Ok((x.add(&restored)?, map))
    }
}

struct Layout {
    conv_in: Conv,
    downs: Vec<ResBlock>,
    mid: ResBlock,
    ups: Vec<(ResBlock, AttnBlock)>,
    out_norm: Norm,
    out_conv: Conv,
    cond_table: usize,
    time_lin: Linear,
}

fn build(cfg: &DenoiserConfig, rng: ChaCha8Rng) -> (Layout, Vec<String>, Vec<Tensor>) {
    let mut pb = ParamBuilder { names: Vec::new(), tensors: Vec::new(), rng };
    let l = cfg.levels;
    let conv_in = Conv::new(&mut pb, "conv_in", cfg.channels, cfg.width, 3);
    let mut downs = Vec::new();
    for lv in 0..l {
        let cin = if lv == 0 { cfg.level_width(0) } else { cfg.level_width(lv - 1) };
        downs.push(ResBlock::new(
            &mut pb,
            &format!("down.{lv}"),
            cin,
            cfg.level_width(lv),
            cfg.time_dim,
        ));
    }
    let deep = cfg.level_width(l - 1);
    let mid = ResBlock::new(&mut pb, "mid", deep, deep, cfg.time_dim);
    let mut ups = Vec::new();
    for u in 0..l {
        let lv = l - 1 - u;
        let cin = if u == 0 { deep } else { cfg.level_width(lv + 1) };
        let cout = cfg.level_width(lv);
        let res = ResBlock::new(
            &mut pb,
            &format!("up.{u}.res"),
            cin + cfg.level_width(lv),
            cout,
            cfg.time_dim,
        );
        let attn = AttnBlock::new(&mut pb, &format!("up.{u}.attn"), cout);
        ups.push((res, attn));
    }
    let out_norm = Norm::new(&mut pb, "out.norm", cfg.width);
    let out_conv = Conv::zeroed(&mut pb, "out.conv", cfg.width, cfg.channels, 3);
    let cond_table = pb.add("cond.table", &[cfg.vocab, cfg.time_dim], Init::Normal(0.1));
    let time_lin = Linear::new(&mut pb, "time.lin", cfg.time_dim, cfg.time_dim);
    let layout = Layout { conv_in, downs, mid, ups, out_norm, out_conv, cond_table, time_lin };
    (layout, pb.names, pb.tensors)
}

fn sinusoidal_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        data[i] = arg.sin() as f32;
        data[half + i] = arg.cos() as f32;
    }
    Tensor::new(vec![1, dim], data).expect("finite embedding")
}

pub struct Denoiser {
    cfg: DenoiserConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
    seed: u64,
}

impl std::fmt::Debug for Denoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser")
            .field("cfg", &self.cfg)
            .field("params", &self.params.len())
            .field("seed", &self.seed)
            .finish()
    }
}

impl Denoiser {
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (layout, names, params) = build(&cfg, rng::stream(seed, "denoiser-init"));
        Ok(Denoiser { cfg, layout, names, params, seed })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Replaces parameter storage; used by the optimizer and checkpoint load.
    pub fn set_param(&mut self, idx: usize, value: Tensor) -> Result<()> {
        if value.dims() != self.params[idx].dims() {
            return Err(Error::Config(format!(
                "param {} dims {:?} cannot be replaced by {:?}",
                self.names[idx],
                self.params[idx].dims(),
                value.dims()
            )));
        }
        self.params[idx] = value.detach();
        Ok(())
    }

    pub fn block_names(&self) -> Vec<String> {
        self.cfg.block_names()
    }

    /// Watches every parameter on `tape`, returning the bound views used for
    /// a differentiable-weights forward pass (training).
    pub fn watch_params(&self, tape: &Tape) -> Vec<Tensor> {
        self.params.iter().map(|p| tape.watch(p.clone())).collect()
    }

    /// Noise prediction for one clip. `record` names attention blocks whose
    /// maps should be captured; recording never perturbs the prediction.
    /// Pass `bound = None` to use the stored parameters as constants; any
    /// active tape still traces from a watched input.
    pub fn predict_noise(
        &self,
        z: &Tensor,
        cond: Condition,
        t: usize,
        record: &[&str],
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        self.forward(&self.params, z, cond, t, record)
    }

    /// Like [`Self::predict_noise`] with explicit (possibly watched) params.
    pub fn forward(
        &self,
        p: &[Tensor],
        z: &Tensor,
        cond: Condition,
        t: usize,
        record: &[&str],
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let cfg = &self.cfg;
        let expected = [cfg.frames, cfg.channels, cfg.input_size, cfg.input_size];
        if z.dims() != expected {
            return Err(Error::Shape {
                op: "predict_noise",
                detail: format!("input dims {:?} vs model dims {expected:?}", z.dims()),
            });
        }
        if t < 1 || t > cfg.max_t {
            return Err(Error::Config(format!("step {t} out of range 1..={}", cfg.max_t)));
        }
        if cond.0 as usize >= cfg.vocab {
            return Err(Error::Config(format!(
                "condition id {} out of vocabulary {}",
                cond.0, cfg.vocab
            )));
        }
        let valid = self.block_names();
        for name in record {
            if !valid.iter().any(|v| v == name) {
                return Err(Error::UnknownBlock { name: name.to_string(), valid });
            }
        }

        // conditioning embedding: sinusoidal step + learned class token
        let temb = sinusoidal_embedding(t, cfg.time_dim);
        let cemb = p[self.layout.cond_table].embed(&[cond.0])?;
        let emb = self.layout.time_lin.fwd(p, &temb.add(&cemb)?)?.silu()?;

        let mut x = self.layout.conv_in.fwd(p, z)?;
        let mut skips = Vec::with_capacity(cfg.levels);
        for (lv, down) in self.layout.downs.iter().enumerate() {
            if lv > 0 {
                x = x.avg_pool2()?;
            }
            x = down.fwd(p, &x, &emb)?;
            skips.push(x.clone());
        }
        x = self.layout.mid.fwd(p, &x, &emb)?;

        let mut maps: Vec<(String, Tensor)> = Vec::new();
        for (u, (res, attn)) in self.layout.ups.iter().enumerate() {
            let lv = cfg.levels - 1 - u;
            x = x.concat_ch(&skips[lv])?;
            x = res.fwd(p, &x, &emb)?;
            let (y, map) = attn.fwd(p, &x)?;
            x = y;
            let name = format!("up_block.{u}");
            if record.iter().any(|r| *r == name) {
                maps.push((name, map));
            }
            if lv > 0 {
                x = x.upsample2()?;
            }
        }
        let eps = self.layout.out_conv.fwd(p, &self.layout.out_norm.fwd(p, &x)?.silu()?)?;

        let records = record
            .iter()
            .map(|name| {
                let (n, map) = maps
                    .iter()
                    .find(|(n, _)| n == name)
                    .expect("requested block was recorded");
                let size = cfg.block_resolution(n)?;
                Ok(AttentionRecord {
                    block: n.clone(),
                    t,
                    h: size,
                    w: size,
                    map: map.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((eps, records))
    }
}
