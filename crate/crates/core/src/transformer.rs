//! Egocentric map transformer: Gaussian position indices, per-cell
//! bag-of-embeddings, multi-head self-attention over all cells, and pooling
//! to a single feature vector.
//!
//! Cells are processed in a canonical order (sorted by position index, then
//! by channel mask). Attention and pooling are permutation-equivariant and
//! -invariant, so the order does not change the result mathematically; it
//! makes the result bitwise identical for any two crops that hold the same
//! multiset of (position index, mask) pairs, e.g. a crop and its rotation.

use rand::Rng;

use crate::nn::{add_param, LayerNorm, Linear};
use crate::tensor::{Graph, InitScheme, ParamId, ParamStore, Result, TensorError, Var};

/// Positional index matrix of side `2r + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionIndices {
    pub radius: usize,
    /// Row-major indices.
    pub indices: Vec<usize>,
    /// Number of distinct indices.
    pub count: usize,
}

impl PositionIndices {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn at(&self, row: usize, col: usize) -> usize {
        self.indices[row * self.side() + col]
    }
}

/// Gaussian kernel `exp(-d² / (2σ²))`, `σ = r/2`, centred on the middle
/// cell; each distinct kernel value, largest first, gets the next integer.
pub fn build_position_indices(r: usize) -> PositionIndices {
    assert!(r >= 1, "radius must be at least 1");
    let n = 2 * r + 1;
    let sigma = r as f64 / 2.0;
    let kernel: Vec<f64> = (0..n * n)
        .map(|i| {
            let (dy, dx) = ((i / n) as f64 - r as f64, (i % n) as f64 - r as f64);
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut distinct = kernel.clone();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    let indices = kernel
        .iter()
        .map(|k| distinct.iter().position(|d| d == k).expect("value present"))
        .collect();
    PositionIndices { radius: r, indices, count: distinct.len() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Max,
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        })
    }
}

impl std::str::FromStr for Pooling {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            _ => Err(format!("unknown pooling {s:?}; valid: mean, max")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapTransformerConfig {
    pub radius: usize,
    /// Channels per cell mask (`n_classes + 1` for semantic maps, 3 for
    /// occupancy maps).
    pub n_channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub out_dim: usize,
    pub pooling: Pooling,
}

impl MapTransformerConfig {
    pub fn new(radius: usize, n_channels: usize, d_model: usize, out_dim: usize) -> Self {
        Self { radius, n_channels, d_model, heads: 4, layers: 2, d_ff: 4 * d_model, out_dim, pooling: Pooling::Mean }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct MapTransformer {
    pub cfg: MapTransformerConfig,
    pub positions: PositionIndices,
    pub class_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<AttentionLayer>,
    pub proj: Linear,
}

/// Output of a batched forward pass.
pub struct MapForward {
    /// `[B, out_dim]`.
    pub feature: Var,
    /// Per layer, per head: attention weights `[B, S, S]` in canonical order.
    pub attention: Vec<Vec<Var>>,
    /// Per batch item: canonical position `p` holds grid cell `order[p]`.
    pub order: Vec<Vec<usize>>,
}

impl MapTransformer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: MapTransformerConfig, rng: &mut R) -> Result<Self> {
        if cfg.heads == 0 || cfg.d_model % cfg.heads != 0 {
            return Err(TensorError::Contract(format!("d_model {} not divisible by {} heads", cfg.d_model, cfg.heads)));
        }
        if cfg.n_channels == 0 || cfg.n_channels > 32 {
            return Err(TensorError::Contract(format!("{} channels do not fit a u32 mask", cfg.n_channels)));
        }
        let positions = build_position_indices(cfg.radius);
        let d = cfg.d_model;
        let emb = InitScheme::Normal { std: 0.1 };
        let class_emb = add_param(store, &format!("{name}.class_emb"), &[cfg.n_channels, d], emb, rng)?;
        let pos_emb = add_param(store, &format!("{name}.pos_emb"), &[positions.count, d], emb, rng)?;
        let lin = InitScheme::Normal { std: (1.0 / d as f64).sqrt() };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{name}.layer{l}");
            layers.push(AttentionLayer {
                q: Linear::new(store, &format!("{p}.q"), d, d, lin, rng)?,
                k: Linear::new(store, &format!("{p}.k"), d, d, lin, rng)?,
                v: Linear::new(store, &format!("{p}.v"), d, d, lin, rng)?,
                o: Linear::new(store, &format!("{p}.o"), d, d, lin, rng)?,
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                ff1: Linear::new(store, &format!("{p}.ff1"), d, cfg.d_ff, InitScheme::FanInUniform, rng)?,
                ff2: Linear::new(
                    store,
                    &format!("{p}.ff2"),
                    cfg.d_ff,
                    d,
                    InitScheme::Normal { std: (1.0 / cfg.d_ff as f64).sqrt() },
                    rng,
                )?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
            });
        }
        let proj = Linear::new(store, &format!("{name}.proj"), d, cfg.out_dim, InitScheme::FanInUniform, rng)?;
        Ok(Self { cfg, positions, class_emb, pos_emb, layers, proj })
    }

    pub fn cells(&self) -> usize {
        self.positions.indices.len()
    }

    fn check_masks(&self, masks: &[u32]) -> Result<()> {
        if masks.len() != self.cells() {
            return Err(TensorError::Contract(format!("map has {} cells, expected {}", masks.len(), self.cells())));
        }
        if self.cfg.n_channels < 32 && masks.iter().any(|&m| m >> self.cfg.n_channels != 0) {
            return Err(TensorError::Contract(format!("mask bit beyond channel {}", self.cfg.n_channels - 1)));
        }
        Ok(())
    }

    /// Canonical processing order for one map.
    pub fn canonical_order(&self, masks: &[u32]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..masks.len()).collect();
        order.sort_by_key(|&i| (self.positions.indices[i], masks[i]));
        order
    }

    /// Per-cell input embeddings for the listed cells of each map, stacked
    /// into `[Σ len(cells), D]`: sum of the class embeddings of every set
    /// channel plus the positional embedding of the cell.
    fn embed(&self, g: &mut Graph, store: &ParamStore, items: &[(&[u32], &[usize])]) -> Result<Var> {
        let mut bags = Vec::new();
        let mut pos = Vec::new();
        for &(masks, cells) in items {
            for &i in cells {
                bags.push((0..self.cfg.n_channels).filter(|&c| masks[i] >> c & 1 == 1).collect());
                pos.push(self.positions.indices[i]);
            }
        }
        let ct = g.param(store, self.class_emb);
        let pt = g.param(store, self.pos_emb);
        let bag = g.bag_embedding(ct, bags)?;
        let p = g.embedding(pt, pos)?;
        g.add(bag, p)
    }

    /// Input embeddings `[S, D]` in grid (row-major) order.
    pub fn cell_embeddings(&self, g: &mut Graph, store: &ParamStore, masks: &[u32]) -> Result<Var> {
        self.check_masks(masks)?;
        let cells: Vec<usize> = (0..masks.len()).collect();
        self.embed(g, store, &[(masks, &cells)])
    }

    /// One post-norm encoder layer on `x: [B, S, D]`. Returns the output and
    /// the per-head attention weights `[B, S, S]`.
    pub fn attention_layer(&self, g: &mut Graph, store: &ParamStore, layer: usize, x: Var) -> Result<(Var, Vec<Var>)> {
        let p = &self.layers[layer];
        let dims = g.dims(x).to_vec();
        if dims.len() != 3 || dims[2] != self.cfg.d_model {
            return Err(TensorError::Contract(format!(
                "attention input must be [B, S, {}], got {dims:?}",
                self.cfg.d_model
            )));
        }
        let h = self.cfg.heads;
        let dh = self.cfg.d_model / h;
        let q = p.q.forward(g, store, x)?;
        let k = p.k.forward(g, store, x)?;
        let v = p.v.forward(g, store, x)?;
        let mut heads = Vec::with_capacity(h);
        let mut attn = Vec::with_capacity(h);
        for i in 0..h {
            let qh = g.slice(q, 2, i * dh, (i + 1) * dh)?;
            let kh = g.slice(k, 2, i * dh, (i + 1) * dh)?;
            let vh = g.slice(v, 2, i * dh, (i + 1) * dh)?;
            let s = g.matmul_t(qh, kh, false, true)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
            let a = g.softmax(s, 2)?;
            heads.push(g.matmul(a, vh)?);
            attn.push(a);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 2)? };
        let o = p.o.forward(g, store, cat)?;
        let r = g.add(x, o)?;
        let y = p.ln1.forward(g, store, r)?;
        let f = p.ff1.forward(g, store, y)?;
        let f = g.relu(f)?;
        let f = p.ff2.forward(g, store, f)?;
        let r = g.add(y, f)?;
        let out = p.ln2.forward(g, store, r)?;
        Ok((out, attn))
    }

    /// Batched forward over `maps` (each a row-major cell-mask slice).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, maps: &[&[u32]]) -> Result<MapForward> {
        let s = self.cells();
        let mut order = Vec::with_capacity(maps.len());
        for m in maps {
            self.check_masks(m)?;
            order.push(self.canonical_order(m));
        }
        let items: Vec<(&[u32], &[usize])> = maps.iter().zip(&order).map(|(m, o)| (*m, o.as_slice())).collect();
        let x = self.embed(g, store, &items)?;
        let mut x = g.reshape(x, &[maps.len(), s, self.cfg.d_model])?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (y, a) = self.attention_layer(g, store, l, x)?;
            x = y;
            attention.push(a);
        }
        let pooled = match self.cfg.pooling {
            Pooling::Mean => g.mean(x, 1)?,
            Pooling::Max => g.max(x, 1)?,
        };
        let feature = self.proj.forward(g, store, pooled)?;
        Ok(MapForward { feature, attention, order })
    }

    /// Inference-only feature vector for one map.
    pub fn map_forward(&self, store: &ParamStore, masks: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, store, &[masks])?;
        Ok(g.value(out.feature).data().to_vec())
    }

    /// For each layer and head, the centre cell's attention row laid out on
    /// the `(2r+1)²` grid.
    pub fn centre_attention(&self, store: &ParamStore, masks: &[u32]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, store, &[masks])?;
        let s = self.cells();
        let order = &out.order[0];
        let centre = self.cells() / 2;
        let q = order.iter().position(|&c| c == centre).expect("centre present");
        Ok(out
            .attention
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|&a| {
                        let row = &g.value(a).data()[q * s..(q + 1) * s];
                        let mut grid = vec![0.0; s];
                        for (p, &cell) in order.iter().enumerate() {
                            grid[cell] = row[p];
                        }
                        grid
                    })
                    .collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn radius_one_indices() {
        let p = build_position_indices(1);
        assert_eq!(p.indices, vec![2, 1, 2, 1, 0, 1, 2, 1, 2]);
        assert_eq!(p.count, 3);
    }

    #[test]
    fn radius_two_has_six_distances() {
        let p = build_position_indices(2);
        assert_eq!(p.count, 6);
        assert_eq!(p.at(2, 2), 0);
    }

    #[test]
    fn empty_cell_embedding_is_positional_row() {
        let mut store = ParamStore::new();
        let cfg = MapTransformerConfig::new(1, 5, 8, 4);
        let t = MapTransformer::new(&mut store, "map", cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut masks = vec![0u32; 9];
        masks[4] = 0b1001;
        let mut g = Graph::inference();
        let x = t.cell_embeddings(&mut g, &store, &masks).unwrap();
        let x = g.value(x).data();
        let pe = store.get(t.pos_emb).data();
        let ce = store.get(t.class_emb).data();
        assert_eq!(&x[0..8], &pe[2 * 8..3 * 8]);
        for j in 0..8 {
            assert_eq!(x[4 * 8 + j], ce[j] + ce[3 * 8 + j] + pe[j]);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut store = ParamStore::new();
        let cfg = MapTransformerConfig { heads: 3, ..MapTransformerConfig::new(1, 5, 8, 4) };
        assert!(MapTransformer::new(&mut store, "m", cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let cfg = MapTransformerConfig::new(1, 5, 8, 4);
        let t = MapTransformer::new(&mut store, "m", cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(t.map_forward(&store, &[0; 8]).is_err());
        assert!(t.map_forward(&store, &[1 << 5; 9]).is_err());
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 9, 6]));
        assert!(t.attention_layer(&mut g, &store, 0, x).is_err());
    }
}
