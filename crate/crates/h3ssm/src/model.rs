//! Pre-norm sequence models: token embedding, alternating mixer and MLP
//! blocks with residuals, a final norm, and an untied logit head.
//!
//! Mixers are interchangeable per block: H3, causal softmax attention,
//! a pure diagonal-SSM (S4D) channel mixer, or linear attention. SSM
//! mixers need no positions; attention variants get a learned positional
//! table and refuse sequences beyond it.

use crate::attention::AttentionLayer;
use crate::error::{Error, Result};
use crate::h3::{DiagBank, H3KernelCache, H3Layer};
use crate::optim::ParamSet;
use crate::rng::{Rng, Stream};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    H3,
    Attention,
    S4d,
    LinearAttention,
}

impl LayerKind {
    pub fn needs_positions(self) -> bool {
        matches!(self, LayerKind::Attention | LayerKind::LinearAttention)
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h3" => Ok(LayerKind::H3),
            "attention" => Ok(LayerKind::Attention),
            "s4d" => Ok(LayerKind::S4d),
            "linear-attention" => Ok(LayerKind::LinearAttention),
            other => Err(Error::Config(format!(
                "unknown layer kind '{other}' (expected h3 | attention | s4d | linear-attention)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Mixer kind per block.
    pub layers: Vec<LayerKind>,
    pub d: usize,
    pub heads: usize,
    /// SSM state size.
    pub m: usize,
    pub mlp_dim: usize,
    pub vocab: usize,
    /// Positional-table capacity for attention variants.
    pub max_len: usize,
    pub embed_dropout: f64,
    pub resid_dropout: f64,
    #[serde(default)]
    pub learnable_shift_b: bool,
    /// Share one diagonal-SSM C across each head's channels.
    #[serde(default)]
    pub diag_shared_c: bool,
}

impl ModelConfig {
    /// Two-layer model at the synthetic-task scale: width 32, MLP 128,
    /// embedding dropout 0.1, residual dropout 0.0.
    pub fn two_layer(kind: LayerKind, vocab: usize, max_len: usize) -> Self {
        let heads = match kind {
            // head dimension 1 for H3; a small multi-head split for the
            // attention baselines
            LayerKind::H3 => 32,
            LayerKind::Attention | LayerKind::LinearAttention => 4,
            LayerKind::S4d => 32,
        };
        ModelConfig {
            layers: vec![kind; 2],
            d: 32,
            heads,
            m: 32,
            mlp_dim: 128,
            vocab,
            max_len,
            embed_dropout: 0.1,
            resid_dropout: 0.0,
            learnable_shift_b: false,
            diag_shared_c: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of head count {}",
                self.d, self.heads
            )));
        }
        if self.vocab == 0 {
            return Err(Error::Config("vocabulary must be nonempty".into()));
        }
        Ok(())
    }

    pub fn needs_positions(&self) -> bool {
        self.layers.iter().any(|k| k.needs_positions())
    }
}

#[derive(Debug, Clone)]
enum Mixer {
    H3(H3Layer),
    Attention(AttentionLayer),
    S4d { bank: DiagBank, wo: usize },
    LinearAttention(AttentionLayer),
}

#[derive(Debug, Clone)]
struct Block {
    norm1_g: usize,
    norm1_b: usize,
    mixer: Mixer,
    norm2_g: usize,
    norm2_b: usize,
    mlp_w1: usize,
    mlp_b1: usize,
    mlp_w2: usize,
    mlp_b2: usize,
}

/// Mode for one forward pass.
pub enum Phase<'r> {
    /// Dropout active, masks drawn from the given stream.
    Train(&'r mut Rng),
    /// Dropout off.
    Eval,
}

/// Kernels for every H3/S4d block at one sequence length.
pub struct KernelCache {
    n: usize,
    per_block: Vec<Option<H3KernelCache>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    embed: usize,
    pos: Option<usize>,
    blocks: Vec<Block>,
    final_g: usize,
    final_b: usize,
    head: usize,
}

/// Builds a model with GPT-style dense init (N(0, 0.02^2)) and S4D SSM
/// init, deterministically from the seed's init stream.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = Rng::new(seed, Stream::Init);
    let mut ps = ParamSet::default();
    let d = config.d;
    let embed = ps.push(
        "embed.weight",
        Tensor::randn(&[config.vocab, d], 0.02, &mut rng),
        false,
    );
    let pos = config.needs_positions().then(|| {
        ps.push(
            "pos.weight",
            Tensor::randn(&[config.max_len, d], 0.02, &mut rng),
            false,
        )
    });
    let mut blocks = Vec::with_capacity(config.layers.len());
    for (i, kind) in config.layers.iter().enumerate() {
        let prefix = format!("block{i}");
        let norm1_g = ps.push(format!("{prefix}.norm1.g"), Tensor::ones(&[d]), false);
        let norm1_b = ps.push(format!("{prefix}.norm1.b"), Tensor::zeros(&[d]), false);
        let mixer = match kind {
            LayerKind::H3 => Mixer::H3(H3Layer::init(
                &mut ps,
                &format!("{prefix}.h3"),
                d,
                config.heads,
                config.m,
                config.learnable_shift_b,
                config.diag_shared_c,
                &mut rng,
            )?),
            LayerKind::Attention => Mixer::Attention(AttentionLayer::init(
                &mut ps,
                &format!("{prefix}.attn"),
                d,
                config.heads,
                &mut rng,
            )?),
            LayerKind::LinearAttention => Mixer::LinearAttention(AttentionLayer::init(
                &mut ps,
                &format!("{prefix}.linattn"),
                d,
                config.heads,
                &mut rng,
            )?),
            LayerKind::S4d => {
                let bank = DiagBank::init_s4d(
                    &mut ps,
                    &format!("{prefix}.s4d"),
                    d,
                    1,
                    config.m,
                    false,
                    &mut rng,
                )?;
                let wo = ps.push(
                    format!("{prefix}.s4d.wo"),
                    Tensor::randn(&[d, d], 0.02, &mut rng),
                    true,
                );
                Mixer::S4d { bank, wo }
            }
        };
        let norm2_g = ps.push(format!("{prefix}.norm2.g"), Tensor::ones(&[d]), false);
        let norm2_b = ps.push(format!("{prefix}.norm2.b"), Tensor::zeros(&[d]), false);
        let mlp_w1 = ps.push(
            format!("{prefix}.mlp.w1"),
            Tensor::randn(&[d, config.mlp_dim], 0.02, &mut rng),
            true,
        );
        let mlp_b1 = ps.push(format!("{prefix}.mlp.b1"), Tensor::zeros(&[config.mlp_dim]), false);
        let mlp_w2 = ps.push(
            format!("{prefix}.mlp.w2"),
            Tensor::randn(&[config.mlp_dim, d], 0.02, &mut rng),
            true,
        );
        let mlp_b2 = ps.push(format!("{prefix}.mlp.b2"), Tensor::zeros(&[d]), false);
        blocks.push(Block {
            norm1_g,
            norm1_b,
            mixer,
            norm2_g,
            norm2_b,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        });
    }
    let final_g = ps.push("final.norm.g", Tensor::ones(&[d]), false);
    let final_b = ps.push("final.norm.b", Tensor::zeros(&[d]), false);
    let head = ps.push(
        "head.weight",
        Tensor::randn(&[d, config.vocab], 0.02, &mut rng),
        true,
    );
    Ok(Model {
        config: config.clone(),
        params: ps,
        embed,
        pos,
        blocks,
        final_g,
        final_b,
        head,
    })
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Registers every parameter on a fresh tape; index-aligned with
    /// `self.params`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone()))
            .collect()
    }

    /// Kernel tensors for repeated inference at sequence length `n`.
    pub fn kernel_cache(&self, n: usize) -> Result<KernelCache> {
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            per_block.push(match &b.mixer {
                Mixer::H3(h3) => Some(h3.kernel_cache(&self.params, n)?),
                Mixer::S4d { bank, .. } => Some(H3KernelCache {
                    shift: Tensor::zeros(&[1, 1]),
                    diag: bank.pure_kernels(&self.params, n)?,
                }),
                _ => None,
            });
        }
        Ok(KernelCache { n, per_block })
    }

    /// Logits [batch, n, vocab] for a batch of token rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &[NodeId],
        tokens: &[usize],
        batch: usize,
        phase: &mut Phase,
        cache: Option<&KernelCache>,
    ) -> Result<NodeId> {
        if batch == 0 || tokens.len() % batch != 0 {
            return Err(Error::Config(format!(
                "{} tokens do not tile into batch {batch}",
                tokens.len()
            )));
        }
        let n = tokens.len() / batch;
        if let Some(c) = cache {
            if c.n != n {
                return Err(Error::Config(format!(
                    "kernel cache built for length {} used at {n}",
                    c.n
                )));
            }
        }
        let mut x = tape.embedding(bind[self.embed], tokens, &[batch, n])?;
        if let Some(pos) = self.pos {
            if n > self.config.max_len {
                return Err(Error::UnsupportedLength {
                    len: n,
                    max_len: self.config.max_len,
                });
            }
            let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
            let p = tape.embedding(bind[pos], &pos_ids, &[batch, n])?;
            x = tape.add(x, p)?;
        }
        if let Phase::Train(rng) = phase {
            x = tape.dropout(x, self.config.embed_dropout, rng)?;
        }
        for (i, block) in self.blocks.iter().enumerate() {
            let h = tape.layer_norm(x, bind[block.norm1_g], bind[block.norm1_b])?;
            let mixed = match &block.mixer {
                Mixer::H3(h3) => {
                    let kc = cache.and_then(|c| c.per_block[i].as_ref());
                    h3.forward(tape, &self.params, bind, h, kc)?.0
                }
                Mixer::Attention(a) => a.forward(tape, bind, h)?,
                Mixer::LinearAttention(a) => a.forward_linear(tape, bind, h)?,
                Mixer::S4d { bank, wo } => {
                    let kernel = match cache.and_then(|c| c.per_block[i].as_ref()) {
                        Some(kc) => tape.leaf(kc.diag.clone()),
                        None => bank.kernel_node(tape, &self.params, bind, n)?,
                    };
                    let y = tape.fft_conv(h, kernel, bind[bank.d_param()])?;
                    tape.matmul(y, bind[*wo])?
                }
            };
            let mixed = match phase {
                Phase::Train(rng) => tape.dropout(mixed, self.config.resid_dropout, rng)?,
                Phase::Eval => mixed,
            };
            x = tape.add(x, mixed)?;

            let h = tape.layer_norm(x, bind[block.norm2_g], bind[block.norm2_b])?;
            let h = tape.matmul(h, bind[block.mlp_w1])?;
            let h = tape.add_bias(h, bind[block.mlp_b1])?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, bind[block.mlp_w2])?;
            let h = tape.add_bias(h, bind[block.mlp_b2])?;
            let h = match phase {
                Phase::Train(rng) => tape.dropout(h, self.config.resid_dropout, rng)?,
                Phase::Eval => h,
            };
            x = tape.add(x, h)?;
        }
        let x = tape.layer_norm(x, bind[self.final_g], bind[self.final_b])?;
        tape.matmul(x, bind[self.head])
    }

    /// Argmax of the final-position logits for each example in a batch.
    pub fn predict_last(&self, tokens: &[usize], batch: usize, cache: Option<&KernelCache>) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape);
        let logits = self.forward(&mut tape, &bind, tokens, batch, &mut Phase::Eval, cache)?;
        let v = self.config.vocab;
        let lv = tape.value(logits);
        let n = tokens.len() / batch;
        let mut out = Vec::with_capacity(batch);
        for e in 0..batch {
            let row = &lv.data()[(e * n + n - 1) * v..(e * n + n) * v];
            let mut best = 0;
            for (j, &val) in row.iter().enumerate() {
                if val > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }
}

// ---- checkpoint container ---------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: Vec<usize>,
    /// Row-major f64 values; serde_json round-trips them exactly.
    data: Vec<f64>,
}

/// Versioned JSON checkpoint: `{format_version, config, params: [{name,
/// shape, data}]}` with row-major f64 tensors.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    params: Vec<CheckpointTensor>,
}

const CHECKPOINT_VERSION: u32 = 1;

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .params
                .params
                .iter()
                .map(|p| CheckpointTensor {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.data().to_vec(),
                })
                .collect(),
        };
        let body = serde_json::to_string(&ckpt)?;
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let body = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&body)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        let mut model = build_model(&ckpt.config, 0)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model wants {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for (slot, saved) in model.params.params.iter_mut().zip(ckpt.params) {
            if slot.name != saved.name {
                return Err(Error::Config(format!(
                    "checkpoint tensor '{}' does not match expected '{}'",
                    saved.name, slot.name
                )));
            }
            slot.tensor = Tensor::new(saved.shape, saved.data)?;
        }
        Ok(model)
    }
}
