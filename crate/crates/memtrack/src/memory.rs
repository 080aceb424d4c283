//! Long-term foreground token memory and single-frame background memory.
//!
//! A fixed bank of K learnable tokens absorbs target features through a
//! stack of attention layers (the memory updater). Refinement injects the
//! token bank plus the previous frame's background features into the
//! current frame's seed features. The token bank never changes shape, so
//! memory cost is constant no matter how long the sequence runs.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{
    init_transformer_params, transformer_stack, AdError, BoundParams, Graph, ParamStore, Tensor,
    TransformerDims,
};
use crate::config::TrackerConfig;
use crate::perception::FeatureMap;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("no foreground seeds in the annotated frame; cannot initialize memory")]
    NoForegroundSeeds,
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Recurrent tracker memory: K×D foreground tokens plus the previous
/// frame's background seed features.
#[derive(Debug, Clone)]
pub struct MemoryState {
    pub fg_tokens: Tensor,
    pub bg_features: Tensor,
    pub frame: usize,
}

impl MemoryState {
    /// Stored foreground feature elements; constant K·D by construction.
    pub fn fg_elements(&self) -> usize {
        self.fg_tokens.numel()
    }

    /// Copy with all tensors detached from their graph, for carrying
    /// state into the next frame's tape at inference time.
    pub fn detached(&self) -> MemoryState {
        MemoryState {
            fg_tokens: self.fg_tokens.detached(),
            bg_features: self.bg_features.detached(),
            frame: self.frame,
        }
    }
}

fn dims(cfg: &TrackerConfig) -> TransformerDims {
    TransformerDims::new(cfg.feature_dim, cfg.heads)
}

/// Learnable token bank plus the updater and refiner stacks.
pub fn init_memory_params(store: &mut ParamStore, cfg: &TrackerConfig, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, 1.0 / (cfg.feature_dim as f64).sqrt()).expect("positive sigma");
    let data: Vec<f64> = (0..cfg.tokens * cfg.feature_dim)
        .map(|_| normal.sample(rng))
        .collect();
    store.insert(
        "tokens",
        Tensor::new(cfg.tokens, cfg.feature_dim, data).expect("finite init"),
    );
    init_transformer_params(store, "mu", cfg.mu_layers, dims(cfg), rng);
    init_transformer_params(store, "mfr", cfg.mfr_layers, dims(cfg), rng);
}

fn split_by_mask(mask: &[u8]) -> (Vec<usize>, Vec<usize>) {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, m) in mask.iter().enumerate() {
        if *m == 1 {
            fg.push(i);
        } else {
            bg.push(i);
        }
    }
    (fg, bg)
}

/// Fold the annotated first frame into the token bank and store its
/// background features verbatim. Requires at least one foreground seed.
pub fn init_memory(
    g: &mut Graph,
    first_frame: &FeatureMap,
    gt_mask: &[u8],
    params: &BoundParams,
    cfg: &TrackerConfig,
) -> Result<MemoryState, MemoryError> {
    let (fg_idx, bg_idx) = split_by_mask(gt_mask);
    if fg_idx.is_empty() {
        return Err(MemoryError::NoForegroundSeeds);
    }
    let fg_feats = g.gather_rows(&first_frame.features, &fg_idx)?;
    let tokens0 = params.get("tokens")?;
    let fg_tokens =
        transformer_stack(g, tokens0, &fg_feats, params, "mu", cfg.mu_layers, dims(cfg))?;
    let bg_features = g.gather_rows(&first_frame.features, &bg_idx)?;
    Ok(MemoryState {
        fg_tokens,
        bg_features,
        frame: 1,
    })
}

/// Refine current seed features against the full memory bank. With an
/// empty background, keys and values are the foreground tokens alone.
pub fn refine(
    g: &mut Graph,
    current: &FeatureMap,
    memory: &MemoryState,
    params: &BoundParams,
    cfg: &TrackerConfig,
) -> Result<Tensor, AdError> {
    let kv = if memory.bg_features.rows() == 0 {
        memory.fg_tokens.clone()
    } else {
        g.concat_rows(&[&memory.fg_tokens, &memory.bg_features])?
    };
    transformer_stack(
        g,
        &current.features,
        &kv,
        params,
        "mfr",
        cfg.mfr_layers,
        dims(cfg),
    )
}

/// Fold thresholded current-frame features into the token bank and
/// replace the background memory with the sub-threshold features.
/// An empty foreground selection degenerates to keys = previous tokens,
/// which preserves memory through total occlusion.
pub fn update_memory(
    g: &mut Graph,
    memory: &MemoryState,
    current: &FeatureMap,
    targetness: &[f64],
    params: &BoundParams,
    cfg: &TrackerConfig,
) -> Result<MemoryState, AdError> {
    let mut fg_sel = Vec::new();
    let mut bg_sel = Vec::new();
    for (i, t) in targetness.iter().enumerate() {
        if *t >= cfg.mask_threshold {
            fg_sel.push(i);
        } else {
            bg_sel.push(i);
        }
    }

    let kv = if fg_sel.is_empty() {
        memory.fg_tokens.clone()
    } else {
        let fg_feats = g.gather_rows(&current.features, &fg_sel)?;
        g.concat_rows(&[&memory.fg_tokens, &fg_feats])?
    };
    let fg_tokens = transformer_stack(
        g,
        &memory.fg_tokens,
        &kv,
        params,
        "mu",
        cfg.mu_layers,
        dims(cfg),
    )?;
    let bg_features = g.gather_rows(&current.features, &bg_sel)?;
    Ok(MemoryState {
        fg_tokens,
        bg_features,
        frame: memory.frame + 1,
    })
}
