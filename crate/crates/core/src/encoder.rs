//! Vision transformer backbone whose layers accept injected concept prompt
//! tokens, and the frozen text encoder interface.
//!
//! A layer input is the row-stacked sequence `[class, prompts, patches]`.
//! Prompts are optional; when present, the layer's outputs at the prompt
//! positions are computed and dropped, so only the class token and the patch
//! tokens flow to the next depth.

use ndarray::{s, Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::error::{CopaError, Result};
use crate::params::{gaussian, Graph, ParamGroup, ParamId, ParamStore};

/// Image as `height × width × channels`, values in `[0, 1]`.
pub type Image = Array3<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Transformer layer count, L.
    pub layers: usize,
    /// Embedding width, d.
    pub dim: usize,
    pub heads: usize,
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_channels() -> usize {
    3
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 64,
            heads: 4,
            image_size: 32,
            patch_size: 8,
            channels: 3,
            mlp_ratio: 4,
            ln_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(CopaError::invalid(
                "backbone.patch_size",
                format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size),
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(CopaError::invalid(
                "backbone.heads",
                format!("dim {} not divisible by heads {}", self.dim, self.heads),
            ));
        }
        if self.layers < 2 {
            return Err(CopaError::invalid("backbone.layers", "at least 2 layers are required"));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err(CopaError::invalid("backbone", "channels and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count, N_p.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub qkv_weight: ParamId,
    pub qkv_bias: ParamId,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

impl BlockParams {
    pub fn ids(&self) -> [ParamId; 12] {
        [
            self.ln1_gamma,
            self.ln1_beta,
            self.qkv_weight,
            self.qkv_bias,
            self.out_weight,
            self.out_bias,
            self.ln2_gamma,
            self.ln2_beta,
            self.fc1_weight,
            self.fc1_bias,
            self.fc2_weight,
            self.fc2_bias,
        ]
    }

    pub fn weight_ids(&self) -> [ParamId; 4] {
        [self.qkv_weight, self.out_weight, self.fc1_weight, self.fc2_weight]
    }
}

/// Pre-norm ViT: `x + MHSA(LN(x))` then `x + FFN(LN(x))`, GELU activation.
#[derive(Debug, Clone)]
pub struct VisionBackbone {
    pub config: BackboneConfig,
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub class_token: ParamId,
    pub position: ParamId,
    pub blocks: Vec<BlockParams>,
}

/// Class token and patch tokens at one depth, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct TokenVars {
    pub class: Var,
    pub patches: Var,
}

/// Output of one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub class: Var,
    pub patches: Var,
    /// Per-head attention probabilities over the full input sequence.
    pub attention: Vec<Var>,
    /// Full-length output including the (discarded) prompt positions.
    pub full_output: Var,
}

/// Token maps (class + patches, prompts excluded) at depths `0..=L`, and the
/// prompt matrix fed into each layer.
#[derive(Debug, Clone)]
pub struct TraceVars {
    pub token_maps: Vec<Var>,
    pub prompts: Vec<Option<Var>>,
    pub layers: Vec<LayerVars>,
}

/// Materialized trace, see [`TraceVars`].
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub token_maps: Vec<Array2<f64>>,
    pub prompts: Vec<Option<Array2<f64>>>,
}

impl VisionBackbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hidden = d * config.mlp_ratio;
        let g = ParamGroup::Backbone;
        let patch_len = config.patch_len();
        let patch_weight = store.add(
            "backbone.patch.weight",
            g,
            gaussian(rng, patch_len, d, 1.0 / (patch_len as f64).sqrt()),
        );
        let patch_bias = store.add("backbone.patch.bias", g, Array2::zeros((1, d)));
        let class_token = store.add("backbone.class_token", g, gaussian(rng, 1, d, 0.02));
        let position = store.add(
            "backbone.position",
            g,
            gaussian(rng, 1 + config.n_patches(), d, 0.2),
        );
        let inv_d = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|l| {
                let name = |n: &str| format!("backbone.layers.{l}.{n}");
                BlockParams {
                    ln1_gamma: store.add(name("ln1.gamma"), g, Array2::ones((1, d))),
                    ln1_beta: store.add(name("ln1.beta"), g, Array2::zeros((1, d))),
                    qkv_weight: store.add(name("attn.qkv.weight"), g, gaussian(rng, d, 3 * d, inv_d)),
                    qkv_bias: store.add(name("attn.qkv.bias"), g, Array2::zeros((1, 3 * d))),
                    out_weight: store.add(name("attn.out.weight"), g, gaussian(rng, d, d, inv_d)),
                    out_bias: store.add(name("attn.out.bias"), g, Array2::zeros((1, d))),
                    ln2_gamma: store.add(name("ln2.gamma"), g, Array2::ones((1, d))),
                    ln2_beta: store.add(name("ln2.beta"), g, Array2::zeros((1, d))),
                    fc1_weight: store.add(name("mlp.fc1.weight"), g, gaussian(rng, d, hidden, inv_d)),
                    fc1_bias: store.add(name("mlp.fc1.bias"), g, Array2::zeros((1, hidden))),
                    fc2_weight: store.add(
                        name("mlp.fc2.weight"),
                        g,
                        gaussian(rng, hidden, d, 1.0 / (hidden as f64).sqrt()),
                    ),
                    fc2_bias: store.add(name("mlp.fc2.bias"), g, Array2::zeros((1, d))),
                }
            })
            .collect();
        Ok(Self {
            config,
            patch_weight,
            patch_bias,
            class_token,
            position,
            blocks,
        })
    }

    /// Every backbone parameter id.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_weight, self.patch_bias, self.class_token, self.position];
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let c = &self.config;
        let expected = (c.image_size, c.image_size, c.channels);
        if image.dim() != expected {
            return Err(CopaError::Shape(format!(
                "image is {:?}, backbone expects {:?}",
                image.dim(),
                expected
            )));
        }
        Ok(())
    }

    /// Flattens the image into `N_p × (p·p·channels)` patch rows, patches in
    /// row-major grid order, pixels in row-major order with channels fastest.
    pub fn patchify(&self, image: &Image) -> Result<Array2<f64>> {
        self.check_image(image)?;
        let c = &self.config;
        let p = c.patch_size;
        let grid = c.grid();
        let mut out = Array2::zeros((c.n_patches(), c.patch_len()));
        for gy in 0..grid {
            for gx in 0..grid {
                let mut row = out.row_mut(gy * grid + gx);
                let block = image.slice(s![gy * p..(gy + 1) * p, gx * p..(gx + 1) * p, ..]);
                for (dst, src) in row.iter_mut().zip(block.iter()) {
                    *dst = *src;
                }
            }
        }
        Ok(out)
    }

    /// Linear patch projection plus positional encodings; prompts absent.
    pub fn patch_embed(&self, g: &mut Graph<'_>, image: &Image) -> Result<TokenVars> {
        let patches = self.patchify(image)?;
        let np = self.config.n_patches();
        let x = g.tape.constant(patches);
        let w = g.param(self.patch_weight);
        let b = g.param(self.patch_bias);
        let proj = g.tape.matmul(x, w);
        let proj = g.tape.add_row(proj, b);
        let pos = g.param(self.position);
        let pos_cls = g.tape.slice_rows(pos, 0, 1);
        let pos_patch = g.tape.slice_rows(pos, 1, 1 + np);
        let cls = g.param(self.class_token);
        let class = g.tape.add(cls, pos_cls);
        let patches = g.tape.add(proj, pos_patch);
        Ok(TokenVars { class, patches })
    }

    /// Runs layer `l` (1-based) on `[class, prompts, patches]` and returns
    /// the class and patch outputs. Prompt-position outputs are dropped.
    pub fn forward_layer(
        &self,
        g: &mut Graph<'_>,
        l: usize,
        tokens: TokenVars,
        prompts: Option<Var>,
    ) -> Result<LayerVars> {
        if l == 0 || l > self.blocks.len() {
            return Err(CopaError::IndexOutOfRange {
                what: "layer",
                index: l,
                len: self.blocks.len() + 1,
            });
        }
        let d = self.config.dim;
        for v in [Some(tokens.class), Some(tokens.patches), prompts].into_iter().flatten() {
            if g.tape.shape(v).1 != d {
                return Err(CopaError::Shape(format!(
                    "token width {} != model width {d}",
                    g.tape.shape(v).1
                )));
            }
        }
        let n_prompts = prompts.map_or(0, |p| g.tape.shape(p).0);
        let seq: Vec<Var> = match prompts {
            Some(p) => vec![tokens.class, p, tokens.patches],
            None => vec![tokens.class, tokens.patches],
        };
        let x = g.tape.concat_rows(&seq);
        let (out, attention) = self.block(g, &self.blocks[l - 1], x);
        let len = g.tape.shape(out).0;
        let class = g.tape.slice_rows(out, 0, 1);
        let patches = g.tape.slice_rows(out, 1 + n_prompts, len);
        Ok(LayerVars {
            class,
            patches,
            attention,
            full_output: out,
        })
    }

    fn block(&self, g: &mut Graph<'_>, b: &BlockParams, x: Var) -> (Var, Vec<Var>) {
        let d = self.config.dim;
        let dh = self.config.head_dim();
        let eps = self.config.ln_eps;

        let (g1, b1) = (g.param(b.ln1_gamma), g.param(b.ln1_beta));
        let h = g.tape.layer_norm(x, g1, b1, eps);
        let (wqkv, bqkv) = (g.param(b.qkv_weight), g.param(b.qkv_bias));
        let qkv = g.tape.matmul(h, wqkv);
        let qkv = g.tape.add_row(qkv, bqkv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut attention = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let q = g.tape.slice_cols(qkv, head * dh, (head + 1) * dh);
            let k = g.tape.slice_cols(qkv, d + head * dh, d + (head + 1) * dh);
            let v = g.tape.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh);
            let logits = g.tape.matmul_t(q, k);
            let logits = g.tape.scale(logits, scale);
            let p = g.tape.softmax_rows(logits);
            attention.push(p);
            heads.push(g.tape.matmul(p, v));
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.tape.concat_cols(&heads) };
        let (wo, bo) = (g.param(b.out_weight), g.param(b.out_bias));
        let attn = g.tape.matmul(merged, wo);
        let attn = g.tape.add_row(attn, bo);
        let x = g.tape.add(x, attn);

        let (g2, b2) = (g.param(b.ln2_gamma), g.param(b.ln2_beta));
        let h = g.tape.layer_norm(x, g2, b2, eps);
        let (w1, c1) = (g.param(b.fc1_weight), g.param(b.fc1_bias));
        let h = g.tape.matmul(h, w1);
        let h = g.tape.add_row(h, c1);
        let h = g.tape.gelu(h);
        let (w2, c2) = (g.param(b.fc2_weight), g.param(b.fc2_bias));
        let h = g.tape.matmul(h, w2);
        let h = g.tape.add_row(h, c2);
        (g.tape.add(x, h), attention)
    }

    /// Class token stacked on top of the patch tokens.
    pub fn token_map(g: &mut Graph<'_>, tokens: TokenVars) -> Var {
        g.tape.concat_rows(&[tokens.class, tokens.patches])
    }

    /// Runs all layers, feeding `prompt_fn(token_map, depth)` as the prompt
    /// matrix into layer `depth + 1`. With `prompt_fn = None` no prompts are
    /// injected.
    pub fn encode_with_prompts(
        &self,
        g: &mut Graph<'_>,
        image: &Image,
        mut prompt_fn: Option<&mut dyn FnMut(&mut Graph<'_>, Var, usize) -> Result<Var>>,
    ) -> Result<TraceVars> {
        let mut tokens = self.patch_embed(g, image)?;
        let mut token_maps = Vec::with_capacity(self.blocks.len() + 1);
        let mut prompts = Vec::with_capacity(self.blocks.len());
        let mut layers = Vec::with_capacity(self.blocks.len());
        for l in 1..=self.blocks.len() {
            let map = Self::token_map(g, tokens);
            token_maps.push(map);
            let z = match prompt_fn.as_mut() {
                Some(f) => Some(f(g, map, l - 1)?),
                None => None,
            };
            prompts.push(z);
            let out = self.forward_layer(g, l, tokens, z)?;
            tokens = TokenVars {
                class: out.class,
                patches: out.patches,
            };
            layers.push(out);
        }
        token_maps.push(Self::token_map(g, tokens));
        Ok(TraceVars {
            token_maps,
            prompts,
            layers,
        })
    }

    /// Plain ViT forward without any prompt machinery; returns the token maps
    /// at depths `0..=L`.
    pub fn forward_plain(&self, g: &mut Graph<'_>, image: &Image) -> Result<Vec<Var>> {
        let mut tokens = self.patch_embed(g, image)?;
        let mut maps = vec![Self::token_map(g, tokens)];
        for l in 1..=self.blocks.len() {
            let out = self.forward_layer(g, l, tokens, None)?;
            tokens = TokenVars {
                class: out.class,
                patches: out.patches,
            };
            maps.push(Self::token_map(g, tokens));
        }
        Ok(maps)
    }

    /// Inference helper around [`Self::forward_plain`].
    pub fn plain_token_maps(&self, store: &ParamStore, image: &Image) -> Result<Vec<Array2<f64>>> {
        let mut g = Graph::inference(store);
        let maps = self.forward_plain(&mut g, image)?;
        Ok(maps.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

/// Frozen text encoder producing unit-norm embeddings.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Array1<f64>;
    /// Text encoders never receive gradient.
    fn frozen(&self) -> bool {
        true
    }
    /// Identifies the encoder state for cache invalidation.
    fn fingerprint(&self) -> String;
}

/// Deterministic stand-in for a pretrained text encoder: SHA-256 of
/// `(seed, text)` seeds a Gaussian draw, normalized to unit length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

pub const DEFAULT_TEXT_SEED: u64 = 0x5eed_7e47;

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Array1<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v = Array1::from_shape_simple_fn(self.dim, || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let n = v.dot(&v).sqrt();
        v /= n;
        v
    }

    fn fingerprint(&self) -> String {
        format!("hash-text-encoder:{}:{}", self.dim, self.seed)
    }
}
