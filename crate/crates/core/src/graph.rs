//! Voxel adjacency graphs, GATv2-style projection layers and the graph cross
//! attention block.

use std::sync::Arc;

use rand::Rng;
use voxgraph_tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::init::uniform;

/// Slope of the leaky activation inside attention scoring.
pub const NEGATIVE_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

/// Directed edges `(source, target)` over `node_count` nodes. Self-loops are
/// never stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeIndex {
    pub node_count: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl EdgeIndex {
    pub fn new(node_count: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut src = Vec::with_capacity(pairs.len());
        let mut dst = Vec::with_capacity(pairs.len());
        for &(s, d) in pairs {
            if s >= node_count || d >= node_count {
                return Err(Error::Config(format!(
                    "edge ({}, {}) out of range for {} nodes",
                    s, d, node_count
                )));
            }
            if s == d {
                return Err(Error::Config(format!("explicit self-loop at node {}", s)));
            }
            src.push(s);
            dst.push(d);
        }
        Ok(EdgeIndex { node_count, src, dst })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.src.iter().copied().zip(self.dst.iter().copied())
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> EdgeIndex {
        EdgeIndex {
            node_count: self.node_count,
            src: self.src.iter().map(|&s| perm[s]).collect(),
            dst: self.dst.iter().map(|&d| perm[d]).collect(),
        }
    }

    /// Edge lists for `batch` disjoint copies of the graph, each node also
    /// linked to itself. Returns `(src, dst)` over `batch * node_count` rows.
    fn batched_with_self_loops(&self, batch: usize) -> (Arc<[usize]>, Arc<[usize]>) {
        let n = self.node_count;
        let per = self.len() + n;
        let mut src = Vec::with_capacity(batch * per);
        let mut dst = Vec::with_capacity(batch * per);
        for b in 0..batch {
            let off = b * n;
            src.extend(self.src.iter().map(|s| s + off));
            dst.extend(self.dst.iter().map(|d| d + off));
            src.extend(off..off + n);
            dst.extend(off..off + n);
        }
        (src.into(), dst.into())
    }
}

/// Adjacency over a `d × h × w` grid flattened in row-major order.
pub fn build_grid_graph(d: usize, h: usize, w: usize, connectivity: Connectivity) -> EdgeIndex {
    let n = d * h * w;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let offsets: Vec<(isize, isize, isize)> = match connectivity {
        Connectivity::Six => vec![(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)],
        Connectivity::TwentySix => (-1..=1)
            .flat_map(|z| (-1..=1).flat_map(move |y| (-1..=1).map(move |x| (z, y, x))))
            .filter(|&o| o != (0, 0, 0))
            .collect(),
    };
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = ((z * h as isize + y) * w as isize + x) as usize;
                for &(dz, dy, dx) in &offsets {
                    let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                    if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    src.push(i);
                    dst.push(((nz * h as isize + ny) * w as isize + nx) as usize);
                }
            }
        }
    }
    EdgeIndex { node_count: n, src, dst }
}

/// One head of a GATv2-style projection.
#[derive(Debug, Clone)]
pub struct GatHead {
    pub w_src: ParamId,
    pub w_dst: ParamId,
    pub att: ParamId,
}

/// Graph attention projection `F_in → heads · F_out` with implicit self-loops.
#[derive(Debug, Clone)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    pub in_features: usize,
    pub out_features: usize,
}

impl GatLayer {
    pub fn new<T: Element>(
        params: &mut ParamStore<T>,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut hs = Vec::with_capacity(heads);
        for h in 0..heads {
            let p = if heads == 1 {
                prefix.to_string()
            } else {
                format!("{}.head{}", prefix, h)
            };
            hs.push(GatHead {
                w_src: params.add(format!("{}.w_src", p), uniform(&[in_features, out_features], in_features, rng))?,
                w_dst: params.add(format!("{}.w_dst", p), uniform(&[in_features, out_features], in_features, rng))?,
                att: params.add(format!("{}.att", p), uniform(&[out_features, 1], out_features, rng))?,
            });
        }
        Ok(GatLayer {
            heads: hs,
            in_features,
            out_features,
        })
    }

    /// `feats [M, F_in]` with `M = batch · edges.node_count` stacked graph copies.
    pub fn attend<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        feats: Var,
        edges: &EdgeIndex,
        batch: usize,
    ) -> Result<Var> {
        let m = batch * edges.node_count;
        if tape.shape(feats) != [m, self.in_features] {
            return Err(Error::Config(format!(
                "graph attention expects [{}, {}] node features, got {:?}",
                m,
                self.in_features,
                tape.shape(feats)
            )));
        }
        let (src, dst) = edges.batched_with_self_loops(batch);
        let slope = T::from_f64_lossy(NEGATIVE_SLOPE);
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let ws = tape.param(params, head.w_src);
            let wd = tape.param(params, head.w_dst);
            let a = tape.param(params, head.att);
            let hs = tape.matmul(feats, ws)?;
            let hd = tape.matmul(feats, wd)?;
            let hj = tape.gather_rows(hs, src.clone())?;
            let hi = tape.gather_rows(hd, dst.clone())?;
            let z = tape.add(hj, hi)?;
            let z = tape.leaky_relu(z, slope);
            let e = tape.matmul(z, a)?;
            let e = tape.reshape(e, &[src.len()])?;
            let alpha = tape.segment_softmax(e, dst.clone(), m)?;
            let msg = tape.mul_rows(hj, alpha)?;
            outs.push(tape.scatter_add_rows(msg, dst.clone(), m)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            Ok(tape.concat(&outs, 1)?)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcaOptions {
    /// Largest voxel count at which the dense attention matrix is formed.
    pub dense_cap: usize,
    /// Divide the energy by `sqrt(C)` before the softmax.
    pub scaled: bool,
    pub heads: usize,
}

impl Default for GcaOptions {
    fn default() -> Self {
        GcaOptions {
            dense_cap: 4096,
            scaled: true,
            heads: 1,
        }
    }
}

/// Graph cross attention over a `[B, C, D, H, W]` feature map.
#[derive(Debug, Clone)]
pub struct GcaBlock {
    pub channels: usize,
    pub q: GatLayer,
    pub k: GatLayer,
    pub v: GatLayer,
    pub gamma: ParamId,
    pub merge_weight: ParamId,
    pub merge_bias: ParamId,
    pub options: GcaOptions,
}

/// Result of a GCA evaluation, with the attention matrix exposed for checks.
pub struct GcaOutput {
    pub output: Var,
    /// Row-stochastic `[B, N, N]`.
    pub attention: Var,
}

impl GcaBlock {
    pub fn new<T: Element>(
        params: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        options: GcaOptions,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if options.heads == 0 || channels % options.heads != 0 {
            return Err(Error::Config(format!(
                "{} channels cannot be split into {} attention heads",
                channels, options.heads
            )));
        }
        let f = channels / options.heads;
        let q = GatLayer::new(params, &format!("{}.q", prefix), channels, f, options.heads, rng)?;
        let k = GatLayer::new(params, &format!("{}.k", prefix), channels, f, options.heads, rng)?;
        let v = GatLayer::new(params, &format!("{}.v", prefix), channels, f, options.heads, rng)?;
        let gamma = params.add(format!("{}.gamma", prefix), Tensor::zeros(&[1]))?;
        let merge_weight = params.add(
            format!("{}.merge.weight", prefix),
            uniform(&[channels, 2 * channels, 1, 1, 1], 2 * channels, rng),
        )?;
        let merge_bias = params.add(format!("{}.merge.bias", prefix), uniform(&[channels], 2 * channels, rng))?;
        Ok(GcaBlock {
            channels,
            q,
            k,
            v,
            gamma,
            merge_weight,
            merge_bias,
            options,
        })
    }

    /// Sets γ = 0 and the merge to copy the second (unattended) half, which
    /// makes the block an exact identity.
    pub fn set_identity<T: Element>(&self, params: &mut ParamStore<T>) {
        let c = self.channels;
        params.get_mut(self.gamma).value = Tensor::zeros(&[1]);
        params.get_mut(self.merge_weight).value =
            Tensor::from_fn(&[c, 2 * c, 1, 1, 1], |i| if i % (2 * c) == c + i / (2 * c) { T::one() } else { T::zero() });
        params.get_mut(self.merge_bias).value = Tensor::zeros(&[c]);
    }

    /// Attention over node features `x [B, N, C]` connected by `edges`.
    /// Returns the γ-weighted residual `[B, N, C]` before the merge.
    pub fn attend_nodes<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: Var,
        edges: &EdgeIndex,
    ) -> Result<GcaOutput> {
        let &[b, n, c] = tape.shape(x) else {
            return Err(Error::Config(format!("node features must be [B, N, C], got {:?}", tape.shape(x))));
        };
        if n != edges.node_count {
            return Err(Error::Config(format!(
                "graph has {} nodes but the feature map has {}",
                edges.node_count, n
            )));
        }
        if n > self.options.dense_cap {
            return Err(Error::Config(format!(
                "{} voxels exceed the dense attention cap of {}; attach attention at a coarser stage or raise gca_dense_cap",
                n, self.options.dense_cap
            )));
        }
        let flat = tape.reshape(x, &[b * n, c])?;
        let q = self.q.attend(tape, params, flat, edges, b)?;
        let k = self.k.attend(tape, params, flat, edges, b)?;
        let v = self.v.attend(tape, params, flat, edges, b)?;
        let q = tape.reshape(q, &[b, n, c])?;
        let k = tape.reshape(k, &[b, n, c])?;
        let v = tape.reshape(v, &[b, n, c])?;
        // Scaling Q instead of the N × N energy is the same product, cheaper.
        let q = if self.options.scaled {
            tape.scale(q, T::from_f64_lossy(1.0 / (c as f64).sqrt()))
        } else {
            q
        };
        let kt = tape.transpose_last2(k)?;
        let energy = tape.matmul(q, kt)?;
        let attention = tape.softmax(energy, 2)?;
        let out = tape.matmul(attention, v)?;
        let gamma = tape.param(params, self.gamma);
        let out = tape.scale_by(gamma, out)?;
        let output = tape.add(out, x)?;
        Ok(GcaOutput { output, attention })
    }

    /// Full block on a `[B, C, D, H, W]` map; output has the same shape.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x: Var,
        edges: &EdgeIndex,
    ) -> Result<GcaOutput> {
        let shape = tape.shape(x).to_vec();
        let &[b, c, d, h, w] = shape.as_slice() else {
            return Err(Error::Config(format!("expected a 5-D feature map, got {:?}", shape)));
        };
        if c != self.channels {
            return Err(Error::Config(format!("block built for {} channels, got {}", self.channels, c)));
        }
        let n = d * h * w;
        if n > self.options.dense_cap {
            return Err(Error::Config(format!(
                "{} voxels exceed the dense attention cap of {}; attach attention at a coarser stage or raise gca_dense_cap",
                n, self.options.dense_cap
            )));
        }
        let nodes = tape.reshape(x, &[b, c, n])?;
        let nodes = tape.transpose_last2(nodes)?;
        let att = self.attend_nodes(tape, params, nodes, edges)?;
        let enhanced = tape.transpose_last2(att.output)?;
        let enhanced = tape.reshape(enhanced, &shape)?;
        let cat = tape.concat(&[enhanced, x], 1)?;
        let mw = tape.param(params, self.merge_weight);
        let mb = tape.param(params, self.merge_bias);
        let output = tape.conv3d(cat, mw, Some(mb), 1, 0)?;
        Ok(GcaOutput {
            output,
            attention: att.attention,
        })
    }
}
