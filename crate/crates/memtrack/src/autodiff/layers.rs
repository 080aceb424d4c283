//! Parameter storage and the attention building blocks shared by the
//! memory updater and the memory-based feature refiner.
//!
//! A layer is: cross-attention from queries to a key/value bank, then
//! self-attention among the queries, then a position-wise MLP. Each
//! sub-block is pre-normalized and wrapped in a residual connection.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::Graph;
use super::tensor::Tensor;
use super::AdError;

const LN_EPS: f64 = 1e-5;

/// Shape configuration for one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct TransformerDims {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl TransformerDims {
    pub fn new(dim: usize, heads: usize) -> Self {
        Self {
            dim,
            heads,
            hidden: 2 * dim,
        }
    }
}

/// Named parameter tensors living outside any graph.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.map.insert(name.to_string(), value.detached());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, AdError> {
        self.map
            .get(name)
            .ok_or_else(|| AdError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Register every entry on `graph` and return the bound handles.
    pub fn bind(&self, graph: &mut Graph) -> Result<BoundParams, AdError> {
        let mut map = BTreeMap::new();
        for (name, value) in &self.map {
            map.insert(name.clone(), graph.param(name, value)?);
        }
        Ok(BoundParams { map })
    }
}

/// Graph-bound views of a [`ParamStore`], keyed by the same names.
#[derive(Debug, Clone)]
pub struct BoundParams {
    map: BTreeMap<String, Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Tensor, AdError> {
        self.map
            .get(name)
            .ok_or_else(|| AdError::UnknownParam(name.to_string()))
    }
}

/// X·W + b.
pub fn linear(g: &mut Graph, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
    let xw = g.matmul(x, w)?;
    g.add_row_broadcast(&xw, b)
}

/// Scaled dot-product attention with `heads` column groups.
/// Returns the projected output and the per-head attention weights
/// (each row of each weight matrix sums to 1).
pub fn multi_head_attention(
    g: &mut Graph,
    queries: &Tensor,
    keys_values: &Tensor,
    params: &BoundParams,
    prefix: &str,
    dims: TransformerDims,
) -> Result<(Tensor, Vec<Tensor>), AdError> {
    if keys_values.rows() == 0 {
        return Err(AdError::EmptyInput {
            op: "multi_head_attention",
        });
    }
    if dims.dim % dims.heads != 0 {
        return Err(AdError::BadHeadCount {
            dim: dims.dim,
            heads: dims.heads,
        });
    }
    let head_dim = dims.dim / dims.heads;
    let q = linear(
        g,
        queries,
        params.get(&format!("{prefix}.wq"))?,
        params.get(&format!("{prefix}.bq"))?,
    )?;
    // no key bias: a shared key offset cancels inside the row softmax
    let k = g.matmul(keys_values, params.get(&format!("{prefix}.wk"))?)?;
    let v = linear(
        g,
        keys_values,
        params.get(&format!("{prefix}.wv"))?,
        params.get(&format!("{prefix}.bv"))?,
    )?;

    let mut head_outs = Vec::with_capacity(dims.heads);
    let mut weights = Vec::with_capacity(dims.heads);
    let scale = 1.0 / (head_dim as f64).sqrt();
    for h in 0..dims.heads {
        let qh = g.slice_cols(&q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(&k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(&v, h * head_dim, head_dim)?;
        let kt = g.transpose(&kh)?;
        let scores = g.matmul(&qh, &kt)?;
        let scaled = g.scale(&scores, scale)?;
        let attn = g.softmax_rows(&scaled, 1.0)?;
        head_outs.push(g.matmul(&attn, &vh)?);
        weights.push(attn);
    }
    let refs: Vec<&Tensor> = head_outs.iter().collect();
    let merged = g.concat_cols(&refs)?;
    let out = linear(
        g,
        &merged,
        params.get(&format!("{prefix}.wo"))?,
        params.get(&format!("{prefix}.bo"))?,
    )?;
    Ok((out, weights))
}

/// Cross-attention weights of one layer, for diagnostics.
pub fn attention_weights(
    g: &mut Graph,
    queries: &Tensor,
    keys_values: &Tensor,
    params: &BoundParams,
    layer_prefix: &str,
    dims: TransformerDims,
) -> Result<Vec<Tensor>, AdError> {
    let qn = layer_norm_sub(g, queries, params, &format!("{layer_prefix}.ln_q"))?;
    let kvn = layer_norm_sub(g, keys_values, params, &format!("{layer_prefix}.ln_kv"))?;
    let (_, w) = multi_head_attention(g, &qn, &kvn, params, &format!("{layer_prefix}.cross"), dims)?;
    Ok(w)
}

fn layer_norm_sub(
    g: &mut Graph,
    x: &Tensor,
    params: &BoundParams,
    prefix: &str,
) -> Result<Tensor, AdError> {
    g.layer_norm_rows(
        x,
        params.get(&format!("{prefix}.gamma"))?,
        params.get(&format!("{prefix}.beta"))?,
        LN_EPS,
    )
}

/// One pre-normalized layer: cross-attention to `keys_values`,
/// self-attention among queries, position-wise MLP; residual around each.
pub fn transformer_layer(
    g: &mut Graph,
    queries: &Tensor,
    keys_values: &Tensor,
    params: &BoundParams,
    layer_prefix: &str,
    dims: TransformerDims,
) -> Result<Tensor, AdError> {
    if keys_values.rows() == 0 {
        return Err(AdError::EmptyInput {
            op: "transformer_layer",
        });
    }
    // cross-attention
    let qn = layer_norm_sub(g, queries, params, &format!("{layer_prefix}.ln_q"))?;
    let kvn = layer_norm_sub(g, keys_values, params, &format!("{layer_prefix}.ln_kv"))?;
    let (cross, _) =
        multi_head_attention(g, &qn, &kvn, params, &format!("{layer_prefix}.cross"), dims)?;
    let x = g.add(queries, &cross)?;

    // self-attention
    let sn = layer_norm_sub(g, &x, params, &format!("{layer_prefix}.ln_s"))?;
    let (selfa, _) =
        multi_head_attention(g, &sn, &sn, params, &format!("{layer_prefix}.sattn"), dims)?;
    let x = g.add(&x, &selfa)?;

    // MLP
    let mn = layer_norm_sub(g, &x, params, &format!("{layer_prefix}.ln_m"))?;
    let h = linear(
        g,
        &mn,
        params.get(&format!("{layer_prefix}.mlp.w1"))?,
        params.get(&format!("{layer_prefix}.mlp.b1"))?,
    )?;
    let h = g.gelu(&h)?;
    let m = linear(
        g,
        &h,
        params.get(&format!("{layer_prefix}.mlp.w2"))?,
        params.get(&format!("{layer_prefix}.mlp.b2"))?,
    )?;
    g.add(&x, &m)
}

/// Stack of layers sharing one key/value bank, prefixed `{prefix}.{i}`.
pub fn transformer_stack(
    g: &mut Graph,
    queries: &Tensor,
    keys_values: &Tensor,
    params: &BoundParams,
    prefix: &str,
    layers: usize,
    dims: TransformerDims,
) -> Result<Tensor, AdError> {
    let mut x = queries.clone();
    for i in 0..layers {
        x = transformer_layer(g, &x, keys_values, params, &format!("{prefix}.{i}"), dims)?;
    }
    Ok(x)
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(rows, cols, data).expect("finite init")
}

fn init_attention(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.{w}"), xavier(rng, dim, dim));
    }
    for b in ["bq", "bv", "bo"] {
        store.insert(&format!("{prefix}.{b}"), Tensor::zeros(1, dim));
    }
}

fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(&format!("{prefix}.gamma"), Tensor::filled(1, dim, 1.0));
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(1, dim));
}

/// Create all parameters for a stack of `layers` layers under `prefix`.
pub fn init_transformer_params(
    store: &mut ParamStore,
    prefix: &str,
    layers: usize,
    dims: TransformerDims,
    rng: &mut ChaCha8Rng,
) {
    for i in 0..layers {
        let lp = format!("{prefix}.{i}");
        init_layer_norm(store, &format!("{lp}.ln_q"), dims.dim);
        init_layer_norm(store, &format!("{lp}.ln_kv"), dims.dim);
        init_layer_norm(store, &format!("{lp}.ln_s"), dims.dim);
        init_layer_norm(store, &format!("{lp}.ln_m"), dims.dim);
        init_attention(store, &format!("{lp}.cross"), dims.dim, rng);
        init_attention(store, &format!("{lp}.sattn"), dims.dim, rng);
        store.insert(&format!("{lp}.mlp.w1"), xavier(rng, dims.dim, dims.hidden));
        store.insert(&format!("{lp}.mlp.b1"), Tensor::zeros(1, dims.hidden));
        store.insert(&format!("{lp}.mlp.w2"), xavier(rng, dims.hidden, dims.dim));
        store.insert(&format!("{lp}.mlp.b2"), Tensor::zeros(1, dims.dim));
    }
}
