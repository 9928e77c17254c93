//! The 3D-token vision transformer classifier.
//!
//! A `hw × hw × bands` patch is cut into `t × t × depth` tokens (spatial
//! grid row-major, spectral groups fastest), linearly embedded, offset by a
//! spatial and a spectral positional embedding, run through pre-norm
//! encoder blocks, layer-normed, mean-pooled over tokens and classified.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{AdapterSpec, Method, ParamInfo, ParamKind};
use crate::error::{Error, Result};
use crate::nn::{
    add_into, cross_entropy, mean_pool, mean_pool_backward, Attention, BlockCache, EncoderBlock, LayerNorm,
    LayerNormCache, Linear, Param,
};
use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_hw: usize,
    pub input_bands: usize,
    pub token_hw: usize,
    pub token_depth: usize,
    /// Spatial step between token origins. Equal to `token_hw` for a plain
    /// tiling; smaller values give overlapping tokens.
    pub token_stride: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    /// ViT-Base geometry: d = 768, 12 blocks, 12 heads.
    pub fn base(n_classes: usize) -> Self {
        ModelConfig {
            input_hw: 32,
            input_bands: 12,
            token_hw: 8,
            token_depth: 3,
            token_stride: 8,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            n_classes,
        }
    }

    /// Desk-scale model: d = 64, 2 blocks, 4 heads, same token grid.
    pub fn tiny(n_classes: usize) -> Self {
        ModelConfig {
            embed_dim: 64,
            depth: 2,
            heads: 4,
            ..ModelConfig::base(n_classes)
        }
    }

    pub fn preset(name: &str, n_classes: usize) -> Result<Self> {
        match name {
            "base" => Ok(ModelConfig::base(n_classes)),
            "tiny" => Ok(ModelConfig::tiny(n_classes)),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 {
            return fail("n_classes must be at least 1".into());
        }
        if self.token_hw == 0 || self.token_depth == 0 || self.token_stride == 0 {
            return fail("token sizes and stride must be positive".into());
        }
        if self.token_hw > self.input_hw || (self.input_hw - self.token_hw) % self.token_stride != 0 {
            return fail(format!(
                "tokens of width {} at stride {} do not tile an input of width {}",
                self.token_hw, self.token_stride, self.input_hw
            ));
        }
        if self.input_bands % self.token_depth != 0 {
            return fail(format!(
                "{} bands not divisible by token depth {}",
                self.input_bands, self.token_depth
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embedding dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return fail("depth and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        (self.input_hw - self.token_hw) / self.token_stride + 1
    }

    pub fn spatial_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn spectral_groups(&self) -> usize {
        self.input_bands / self.token_depth
    }

    pub fn tokens(&self) -> usize {
        self.spatial_tokens() * self.spectral_groups()
    }

    pub fn token_dim(&self) -> usize {
        self.token_hw * self.token_hw * self.token_depth
    }

    pub fn patch_len(&self) -> usize {
        self.input_hw * self.input_hw * self.input_bands
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Names, shapes and kinds of every backbone and head parameter, in
    /// visiting order, without adapters.
    pub fn base_layout(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        let d = self.embed_dim;
        let hid = self.hidden_dim();
        let mut out: Vec<(String, Vec<usize>, ParamKind)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, kind| out.push((name, shape, kind));
        push("embed.weight".into(), vec![d, self.token_dim()], ParamKind::Base);
        push("embed.bias".into(), vec![d], ParamKind::Base);
        push("pos.spatial".into(), vec![self.spatial_tokens(), d], ParamKind::Base);
        push("pos.spectral".into(), vec![self.spectral_groups(), d], ParamKind::Base);
        for i in 0..self.depth {
            let l = format!("layer{i}");
            push(format!("{l}.norm1.weight"), vec![d], ParamKind::Base);
            push(format!("{l}.norm1.bias"), vec![d], ParamKind::Base);
            for (proj, bias_kind) in [
                ("q", ParamKind::QueryBias),
                ("k", ParamKind::Base),
                ("v", ParamKind::ValueBias),
                ("o", ParamKind::Base),
            ] {
                push(format!("{l}.attn.{proj}.weight"), vec![d, d], ParamKind::Base);
                push(format!("{l}.attn.{proj}.bias"), vec![d], bias_kind);
            }
            push(format!("{l}.norm2.weight"), vec![d], ParamKind::Base);
            push(format!("{l}.norm2.bias"), vec![d], ParamKind::Base);
            push(format!("{l}.mlp.fc1.weight"), vec![hid, d], ParamKind::Base);
            push(format!("{l}.mlp.fc1.bias"), vec![hid], ParamKind::Base);
            push(format!("{l}.mlp.fc2.weight"), vec![d, hid], ParamKind::Base);
            push(format!("{l}.mlp.fc2.bias"), vec![d], ParamKind::Base);
        }
        push("norm.weight".into(), vec![d], ParamKind::Base);
        push("norm.bias".into(), vec![d], ParamKind::Base);
        push("head.weight".into(), vec![self.n_classes, d], ParamKind::Head);
        push("head.bias".into(), vec![self.n_classes], ParamKind::Head);
        out
    }

    /// Total scalar count of the adapter-free model.
    pub fn count_all_params(&self) -> usize {
        self.base_layout()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    pub fn to_canonical(&self) -> String {
        format!(
            "input_hw = {}\ninput_bands = {}\ntoken_hw = {}\ntoken_depth = {}\ntoken_stride = {}\nembed_dim = {}\ndepth = {}\nheads = {}\nmlp_ratio = {}\nn_classes = {}\n",
            self.input_hw,
            self.input_bands,
            self.token_hw,
            self.token_depth,
            self.token_stride,
            self.embed_dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
            self.n_classes
        )
    }

    /// Sets one geometry field from its text key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v: usize = value
            .parse()
            .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))?;
        match key {
            "input_hw" => self.input_hw = v,
            "input_bands" => self.input_bands = v,
            "token_hw" => self.token_hw = v,
            "token_depth" => self.token_depth = v,
            "token_stride" => self.token_stride = v,
            "embed_dim" => self.embed_dim = v,
            "depth" => self.depth = v,
            "heads" => self.heads = v,
            "mlp_ratio" => self.mlp_ratio = v,
            "n_classes" => self.n_classes = v,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut config = ModelConfig::base(1);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed model line `{line}`")))?;
            config.set(k.trim(), v.trim())?;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Cuts one `hw × hw × bands` patch (row, col, band order) into token rows.
pub fn tokenize_into<T: Scalar>(config: &ModelConfig, patch: &[T], out: &mut Vec<T>) {
    let (hw, bands) = (config.input_hw, config.input_bands);
    let (t, depth, stride) = (config.token_hw, config.token_depth, config.token_stride);
    let grid = config.grid();
    for gr in 0..grid {
        for gc in 0..grid {
            for g in 0..config.spectral_groups() {
                for r in 0..t {
                    let row = gr * stride + r;
                    for c in 0..t {
                        let base = (row * hw + gc * stride + c) * bands + g * depth;
                        out.extend_from_slice(&patch[base..base + depth]);
                    }
                }
            }
        }
    }
}

/// `[hw, hw, bands]` (or a batch `[n, hw, hw, bands]`) to `[n·T, token_dim]`.
pub fn tokenize<T: Scalar>(config: &ModelConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = batch_size(config, x)?;
    let mut out = Vec::with_capacity(n * config.tokens() * config.token_dim());
    for patch in x.data().chunks_exact(config.patch_len()) {
        tokenize_into(config, patch, &mut out);
    }
    Tensor::new(&[n * config.tokens(), config.token_dim()], out)
}

fn batch_size<T: Scalar>(config: &ModelConfig, x: &Tensor<T>) -> Result<usize> {
    let single = [config.input_hw, config.input_hw, config.input_bands];
    match x.shape() {
        s if s == single => Ok(1),
        [n, rest @ ..] if rest == single => Ok(*n),
        s => Err(Error::shape(
            "model_input",
            format!("expected [{0}, {0}, {1}] or a batch of them, got {s:?}", config.input_hw, config.input_bands),
        )),
    }
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T: Scalar> {
    batch: usize,
    tokens: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    norm: LayerNormCache<T>,
    normed: Vec<T>,
    pooled: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct VitModel<T: Scalar = f32> {
    config: ModelConfig,
    pub embed: Linear<T>,
    pub pos_spatial: Param<T>,
    pub pos_spectral: Param<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
    adapter_spec: Option<AdapterSpec>,
    fused: bool,
}

/// Draws from `N(0, std²)` truncated to `±2·std` by resampling.
fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::lit(v);
        }
    })
}

impl<T: Scalar> VitModel<T> {
    /// Randomly initialized model. Weight matrices draw from a truncated
    /// normal, positional embeddings from `N(0, 0.02²)`, biases are zero and
    /// layer norms start at identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let hid = config.hidden_dim();
        let linear = |inp: usize, out: usize, rng: &mut ChaCha8Rng| {
            Linear::new(trunc_normal(&[out, inp], INIT_STD, rng), Tensor::zeros(&[out]))
        };
        let embed = linear(config.token_dim(), d, &mut rng)?;
        let pos = Normal::new(0.0, INIT_STD).unwrap();
        let pos_spatial = Param::new(Tensor::from_fn(&[config.spatial_tokens(), d], |_| {
            T::lit(pos.sample(&mut rng))
        }));
        let pos_spectral = Param::new(Tensor::from_fn(&[config.spectral_groups(), d], |_| {
            T::lit(pos.sample(&mut rng))
        }));
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let attn = Attention::new(
                linear(d, d, &mut rng)?,
                linear(d, d, &mut rng)?,
                linear(d, d, &mut rng)?,
                linear(d, d, &mut rng)?,
                config.heads,
            )?;
            blocks.push(EncoderBlock {
                norm1: LayerNorm::new(d),
                attn,
                norm2: LayerNorm::new(d),
                fc1: linear(d, hid, &mut rng)?,
                fc2: linear(hid, d, &mut rng)?,
            });
        }
        let head = linear(d, config.n_classes, &mut rng)?;
        Ok(VitModel {
            config,
            embed,
            pos_spatial,
            pos_spectral,
            blocks,
            norm: LayerNorm::new(d),
            head,
            adapter_spec: None,
            fused: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn adapter_spec(&self) -> Option<&AdapterSpec> {
        self.adapter_spec.as_ref()
    }

    pub(crate) fn set_adapter_spec(&mut self, spec: Option<AdapterSpec>) {
        self.adapter_spec = spec;
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub(crate) fn mark_fused(&mut self) {
        self.fused = true;
    }

    pub fn blocks_mut(&mut self) -> &mut [EncoderBlock<T>] {
        &mut self.blocks
    }

    pub fn method(&self) -> Method {
        self.adapter_spec.as_ref().map_or(Method::Full, |s| s.method)
    }

    /// Replaces the classifier with a freshly initialized one for
    /// `n_classes` outputs.
    pub fn reset_head(&mut self, n_classes: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.embed_dim;
        let trainable = self.head.weight.trainable;
        self.head = Linear::new(trunc_normal(&[n_classes, d], INIT_STD, &mut rng), Tensor::zeros(&[n_classes]))?;
        self.head.weight.trainable = trainable;
        self.head.bias.trainable = trainable;
        self.config.n_classes = n_classes;
        Ok(())
    }

    /// Visits every parameter in inventory order.
    pub fn visit(&self, mut f: impl FnMut(&str, ParamKind, &Param<T>)) {
        f("embed.weight", ParamKind::Base, &self.embed.weight);
        f("embed.bias", ParamKind::Base, &self.embed.bias);
        f("pos.spatial", ParamKind::Base, &self.pos_spatial);
        f("pos.spectral", ParamKind::Base, &self.pos_spectral);
        for (i, b) in self.blocks.iter().enumerate() {
            let l = format!("layer{i}");
            f(&format!("{l}.norm1.weight"), ParamKind::Base, &b.norm1.weight);
            f(&format!("{l}.norm1.bias"), ParamKind::Base, &b.norm1.bias);
            let a = &b.attn;
            f(&format!("{l}.attn.q.weight"), ParamKind::Base, &a.q_proj.weight);
            f(&format!("{l}.attn.q.bias"), ParamKind::QueryBias, &a.q_proj.bias);
            if let Some(site) = &a.q_adapter {
                for (name, kind, p) in site.factors() {
                    f(&format!("{l}.q.{name}"), kind, p);
                }
            }
            f(&format!("{l}.attn.k.weight"), ParamKind::Base, &a.k_proj.weight);
            f(&format!("{l}.attn.k.bias"), ParamKind::Base, &a.k_proj.bias);
            f(&format!("{l}.attn.v.weight"), ParamKind::Base, &a.v_proj.weight);
            f(&format!("{l}.attn.v.bias"), ParamKind::ValueBias, &a.v_proj.bias);
            if let Some(site) = &a.v_adapter {
                for (name, kind, p) in site.factors() {
                    f(&format!("{l}.v.{name}"), kind, p);
                }
            }
            f(&format!("{l}.attn.o.weight"), ParamKind::Base, &a.out_proj.weight);
            f(&format!("{l}.attn.o.bias"), ParamKind::Base, &a.out_proj.bias);
            f(&format!("{l}.norm2.weight"), ParamKind::Base, &b.norm2.weight);
            f(&format!("{l}.norm2.bias"), ParamKind::Base, &b.norm2.bias);
            f(&format!("{l}.mlp.fc1.weight"), ParamKind::Base, &b.fc1.weight);
            f(&format!("{l}.mlp.fc1.bias"), ParamKind::Base, &b.fc1.bias);
            f(&format!("{l}.mlp.fc2.weight"), ParamKind::Base, &b.fc2.weight);
            f(&format!("{l}.mlp.fc2.bias"), ParamKind::Base, &b.fc2.bias);
        }
        f("norm.weight", ParamKind::Base, &self.norm.weight);
        f("norm.bias", ParamKind::Base, &self.norm.bias);
        f("head.weight", ParamKind::Head, &self.head.weight);
        f("head.bias", ParamKind::Head, &self.head.bias);
    }

    /// Mutable counterpart of [`VitModel::visit`], same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, ParamKind, &mut Param<T>)) {
        f("embed.weight", ParamKind::Base, &mut self.embed.weight);
        f("embed.bias", ParamKind::Base, &mut self.embed.bias);
        f("pos.spatial", ParamKind::Base, &mut self.pos_spatial);
        f("pos.spectral", ParamKind::Base, &mut self.pos_spectral);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let l = format!("layer{i}");
            f(&format!("{l}.norm1.weight"), ParamKind::Base, &mut b.norm1.weight);
            f(&format!("{l}.norm1.bias"), ParamKind::Base, &mut b.norm1.bias);
            let a = &mut b.attn;
            f(&format!("{l}.attn.q.weight"), ParamKind::Base, &mut a.q_proj.weight);
            f(&format!("{l}.attn.q.bias"), ParamKind::QueryBias, &mut a.q_proj.bias);
            if let Some(site) = &mut a.q_adapter {
                for (name, kind, p) in site.factors_mut() {
                    f(&format!("{l}.q.{name}"), kind, p);
                }
            }
            f(&format!("{l}.attn.k.weight"), ParamKind::Base, &mut a.k_proj.weight);
            f(&format!("{l}.attn.k.bias"), ParamKind::Base, &mut a.k_proj.bias);
            f(&format!("{l}.attn.v.weight"), ParamKind::Base, &mut a.v_proj.weight);
            f(&format!("{l}.attn.v.bias"), ParamKind::ValueBias, &mut a.v_proj.bias);
            if let Some(site) = &mut a.v_adapter {
                for (name, kind, p) in site.factors_mut() {
                    f(&format!("{l}.v.{name}"), kind, p);
                }
            }
            f(&format!("{l}.attn.o.weight"), ParamKind::Base, &mut a.out_proj.weight);
            f(&format!("{l}.attn.o.bias"), ParamKind::Base, &mut a.out_proj.bias);
            f(&format!("{l}.norm2.weight"), ParamKind::Base, &mut b.norm2.weight);
            f(&format!("{l}.norm2.bias"), ParamKind::Base, &mut b.norm2.bias);
            f(&format!("{l}.mlp.fc1.weight"), ParamKind::Base, &mut b.fc1.weight);
            f(&format!("{l}.mlp.fc1.bias"), ParamKind::Base, &mut b.fc1.bias);
            f(&format!("{l}.mlp.fc2.weight"), ParamKind::Base, &mut b.fc2.weight);
            f(&format!("{l}.mlp.fc2.bias"), ParamKind::Base, &mut b.fc2.bias);
        }
        f("norm.weight", ParamKind::Base, &mut self.norm.weight);
        f("norm.bias", ParamKind::Base, &mut self.norm.bias);
        f("head.weight", ParamKind::Head, &mut self.head.weight);
        f("head.bias", ParamKind::Head, &mut self.head.bias);
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        self.visit(|name, kind, p| {
            out.push(ParamInfo {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                kind,
                trainable: p.trainable,
            })
        });
        out
    }

    pub fn set_trainability(&mut self, method: Method) {
        self.visit_mut(|_, kind, p| p.trainable = method.trains(kind));
    }

    pub fn count_all_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, p| n += p.len());
        n
    }

    pub fn count_trainable_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(|_, _, p| p.zero_grad());
    }

    /// Whether anything below the classifier needs a gradient.
    fn backbone_trains(&self) -> bool {
        let mut any = false;
        self.visit(|_, kind, p| any |= p.trainable && kind != ParamKind::Head);
        any
    }

    pub(crate) fn forward_cached(&self, x: &[T], batch: usize) -> Result<(Vec<T>, ForwardCache<T>)> {
        let cfg = &self.config;
        if x.len() != batch * cfg.patch_len() {
            return Err(Error::shape(
                "model_forward",
                format!("{} values for {batch} patches of {}", x.len(), cfg.patch_len()),
            ));
        }
        let tokens_per = cfg.tokens();
        let rows = batch * tokens_per;
        let d = cfg.embed_dim;
        let mut tokens = Vec::with_capacity(rows * cfg.token_dim());
        for patch in x.chunks_exact(cfg.patch_len()) {
            tokenize_into(cfg, patch, &mut tokens);
        }
        let mut h = self.embed.forward_rows(&tokens, rows)?;
        let groups = cfg.spectral_groups();
        let (ps, pg) = (self.pos_spatial.value.data(), self.pos_spectral.value.data());
        for sample in h.chunks_exact_mut(tokens_per * d) {
            for (t, row) in sample.chunks_exact_mut(d).enumerate() {
                let (i, g) = (t / groups, t % groups);
                add_into(row, &ps[i * d..(i + 1) * d]);
                add_into(row, &pg[g * d..(g + 1) * d]);
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward_rows(&h, batch, tokens_per)?;
            caches.push(cache);
            h = next;
        }
        let (normed, norm) = self.norm.forward_rows(&h, rows)?;
        let pooled = mean_pool(&normed, tokens_per, d);
        let logits = self.head.forward_rows(&pooled, batch)?;
        Ok((
            logits,
            ForwardCache {
                batch,
                tokens,
                blocks: caches,
                norm,
                normed,
                pooled,
            },
        ))
    }

    /// Accumulates gradients of every trainable parameter given
    /// `d loss / d logits`.
    pub(crate) fn backward(&mut self, cache: &ForwardCache<T>, dlogits: &[T]) {
        let batch = cache.batch;
        let backbone = self.backbone_trains();
        let dpooled = self.head.backward_rows(&cache.pooled, dlogits, batch, backbone);
        let Some(dpooled) = dpooled else { return };
        let cfg = self.config.clone();
        let (tokens_per, d) = (cfg.tokens(), cfg.embed_dim);
        let dnormed = mean_pool_backward(&dpooled, tokens_per, d);
        debug_assert_eq!(dnormed.len(), cache.normed.len());
        let mut dh = self.norm.backward_rows(&cache.norm, &dnormed);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dh = block.backward_rows(bc, &dh, batch, tokens_per);
        }
        let groups = cfg.spectral_groups();
        if self.pos_spatial.trainable || self.pos_spectral.trainable {
            let mut ds = vec![T::zero(); self.pos_spatial.len()];
            let mut dg = vec![T::zero(); self.pos_spectral.len()];
            for sample in dh.chunks_exact(tokens_per * d) {
                for (t, row) in sample.chunks_exact(d).enumerate() {
                    let (i, g) = (t / groups, t % groups);
                    add_into(&mut ds[i * d..(i + 1) * d], row);
                    add_into(&mut dg[g * d..(g + 1) * d], row);
                }
            }
            self.pos_spatial.accumulate(&ds);
            self.pos_spectral.accumulate(&dg);
        }
        self.embed.backward_rows(&cache.tokens, &dh, batch * tokens_per, false);
    }

    /// Logits `[n, K]` for a batch, or `[K]` for a single patch.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = batch_size(&self.config, x)?;
        let (logits, _) = self.forward_cached(x.data(), n)?;
        let k = self.config.n_classes;
        if x.ndim() == 3 {
            Tensor::new(&[k], logits)
        } else {
            Tensor::new(&[n, k], logits)
        }
    }

    /// Mean cross-entropy over the batch; gradients are accumulated into
    /// the trainable parameters.
    pub fn loss_and_backward(&mut self, x: &[T], labels: &[usize]) -> Result<T> {
        let (logits, cache) = self.forward_cached(x, labels.len())?;
        let (loss, dlogits) = cross_entropy(&logits, labels, self.config.n_classes)?;
        self.backward(&cache, &dlogits);
        Ok(loss)
    }

    /// Mean cross-entropy without touching gradients.
    pub fn loss(&self, x: &[T], labels: &[usize]) -> Result<T> {
        let (logits, _) = self.forward_cached(x, labels.len())?;
        Ok(cross_entropy(&logits, labels, self.config.n_classes)?.0)
    }

    /// Arg-max class (0-based) per patch.
    pub fn predict(&self, x: &[T], batch: usize) -> Result<Vec<usize>> {
        let (logits, _) = self.forward_cached(x, batch)?;
        Ok(logits
            .chunks_exact(self.config.n_classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Converts every parameter to another precision, keeping flags.
    pub fn cast<U: Scalar>(&self) -> VitModel<U> {
        fn p<T: Scalar, U: Scalar>(x: &Param<T>) -> Param<U> {
            Param {
                value: x.value.cast(),
                grad: x.grad.cast(),
                trainable: x.trainable,
            }
        }
        fn lin<T: Scalar, U: Scalar>(l: &Linear<T>) -> Linear<U> {
            Linear {
                weight: p(&l.weight),
                bias: p(&l.bias),
            }
        }
        fn ln<T: Scalar, U: Scalar>(l: &LayerNorm<T>) -> LayerNorm<U> {
            LayerNorm {
                weight: p(&l.weight),
                bias: p(&l.bias),
            }
        }
        use crate::adapters::SiteAdapter as S;
        fn site<T: Scalar, U: Scalar>(s: &S<T>) -> S<U> {
            match s {
                S::LowRank { a, b, scale } => S::LowRank {
                    a: p(a),
                    b: p(b),
                    scale: U::lit(scale.as_f64()),
                },
                S::Kron { a, b, scale } => S::Kron {
                    a: p(a),
                    b: p(b),
                    scale: U::lit(scale.as_f64()),
                },
                S::LowRankKron { c, a, b, scale } => S::LowRankKron {
                    c: p(c),
                    a: p(a),
                    b: p(b),
                    scale: U::lit(scale.as_f64()),
                },
            }
        }
        VitModel {
            config: self.config.clone(),
            embed: lin(&self.embed),
            pos_spatial: p(&self.pos_spatial),
            pos_spectral: p(&self.pos_spectral),
            blocks: self
                .blocks
                .iter()
                .map(|b| EncoderBlock {
                    norm1: ln(&b.norm1),
                    attn: Attention {
                        q_proj: lin(&b.attn.q_proj),
                        k_proj: lin(&b.attn.k_proj),
                        v_proj: lin(&b.attn.v_proj),
                        out_proj: lin(&b.attn.out_proj),
                        heads: b.attn.heads,
                        q_adapter: b.attn.q_adapter.as_ref().map(site),
                        v_adapter: b.attn.v_adapter.as_ref().map(site),
                    },
                    norm2: ln(&b.norm2),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            norm: ln(&self.norm),
            head: lin(&self.head),
            adapter_spec: self.adapter_spec.clone(),
            fused: self.fused,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{attach, inventory, AdapterSpec};
    use rand::Rng;

    fn ramp_patch(cfg: &ModelConfig) -> Tensor<f32> {
        Tensor::from_fn(&[cfg.input_hw, cfg.input_hw, cfg.input_bands], |i| i as f32)
    }

    #[test]
    fn default_geometry_has_64_tokens_of_192() {
        let cfg = ModelConfig::tiny(5);
        let tok = tokenize(&cfg, &ramp_patch(&cfg)).unwrap();
        assert_eq!(tok.shape(), &[64, 192]);
    }

    #[test]
    fn first_token_is_leading_sub_block() {
        let cfg = ModelConfig::tiny(5);
        let tok = tokenize(&cfg, &ramp_patch(&cfg)).unwrap();
        // Value at (r, c, b) of the ramp is (r·32 + c)·12 + b.
        let want: Vec<f32> = (0..8)
            .flat_map(|r| (0..8).flat_map(move |c| (0..3).map(move |b| ((r * 32 + c) * 12 + b) as f32)))
            .collect();
        assert_eq!(&tok.data()[..192], &want[..]);
        // Token 1 is the second spectral group at the same location.
        assert_eq!(tok.at(1, 0), 3.0);
    }

    #[test]
    fn constant_input_gives_identical_tokens() {
        let cfg = ModelConfig::tiny(5);
        let x = Tensor::full(&[32, 32, 12], 0.25f32);
        let tok = tokenize(&cfg, &x).unwrap();
        assert!(tok.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let cfg = ModelConfig::tiny(5);
        let x = Tensor::<f32>::zeros(&[16, 16, 12]);
        assert!(matches!(tokenize(&cfg, &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut model = VitModel::<f32>::new(ModelConfig::tiny(5), 1).unwrap();
        model.head.weight.value.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[2, 32, 32, 12], |_| rng.random_range(-1.0..1.0));
        let logits = model.forward(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 5]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectral_group_permutation_invariance() {
        let mut model = VitModel::<f64>::new(ModelConfig { embed_dim: 16, depth: 1, heads: 2, ..ModelConfig::tiny(3) }, 3).unwrap();
        model.pos_spectral.value.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = Tensor::from_fn(&[32, 32, 12], |_| rng.random_range(-1.0..1.0));
        // Rotate the four 3-band groups of every pixel.
        let mut y = x.clone();
        for px in 0..32 * 32 {
            for g in 0..4 {
                for b in 0..3 {
                    y.data_mut()[px * 12 + ((g + 1) % 4) * 3 + b] = x.data()[px * 12 + g * 3 + b];
                }
            }
        }
        let a = model.forward(&x).unwrap();
        let b = model.forward(&y).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn tiny_count_matches_hand_formula() {
        let cfg = ModelConfig::tiny(5);
        let (d, l, k, td) = (64usize, 2usize, 5usize, 192usize);
        let per_layer = 4 * d + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let want = td * d + d + 16 * d + 4 * d + l * per_layer + 2 * d + k * d + k;
        assert_eq!(cfg.count_all_params(), want);
        let model = VitModel::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(model.count_all_params(), want);
        assert_eq!(
            ModelConfig::tiny(6).count_all_params(),
            cfg.count_all_params() + d + 1
        );
    }

    #[test]
    fn base_count_near_reported_total() {
        let n = ModelConfig::base(9).count_all_params();
        assert_eq!(n, 85_226_505);
        assert!((n as f64 - 85.266e6).abs() / 85.266e6 < 0.02);
    }

    #[test]
    fn inventory_matches_real_model() {
        let cfg = ModelConfig { embed_dim: 16, heads: 4, ..ModelConfig::tiny(7) };
        for method in Method::ALL {
            let spec = AdapterSpec {
                krona_shape: Some((4, 2)),
                lokr_factor: 4,
                lokr_rank: 2,
                ..AdapterSpec::new(method)
            };
            let mut model = VitModel::<f32>::new(cfg.clone(), 0).unwrap();
            if method != Method::Full {
                attach(&mut model, &spec, 1).unwrap();
            }
            assert_eq!(model.param_infos(), inventory(&cfg, &spec).unwrap(), "{method}");
        }
    }

    #[test]
    fn overlapping_stride_changes_token_count() {
        let cfg = ModelConfig { token_stride: 4, ..ModelConfig::tiny(2) };
        cfg.validate().unwrap();
        assert_eq!(cfg.grid(), 7);
        assert_eq!(cfg.tokens(), 49 * 4);
        assert!(ModelConfig { token_stride: 5, ..ModelConfig::tiny(2) }.validate().is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = ModelConfig { token_stride: 4, ..ModelConfig::tiny(7) };
        assert_eq!(ModelConfig::from_canonical(&cfg.to_canonical()).unwrap(), cfg);
        assert!(ModelConfig::from_canonical("width = 3").is_err());
    }
}
