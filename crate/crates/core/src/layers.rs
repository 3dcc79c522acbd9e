//! Parameterised building blocks shared by both networks.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::geometry::{knn_indices, Point3};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }

    /// Zeroes the weight and sets the bias, so the layer emits `bias` for any input.
    pub fn set_constant_output(&self, store: &mut ParamStore, bias: &[f64]) {
        store.get_mut(self.weight).value.data_mut().fill(0.0);
        store.get_mut(self.bias).value.data_mut().copy_from_slice(bias);
    }
}

/// Stack of linear layers with ReLU between them (and optionally after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; layers are named `{name}.layer{i}`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], relu_last: bool, rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.layer{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, relu_last }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last || self.relu_last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().unwrap()
    }
}

/// Multi-head attention with input/output projections, a residual connection
/// and a residual two-layer feed-forward network. No normalisation layers.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ffn: Mlp,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, 2 * dim, dim], false, rng),
            heads,
        }
    }

    /// Attention of `queries` over `context`, followed by the feed-forward network.
    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let att = g.attention(q, k, v, self.heads)?;
        let att = self.out.forward(g, att)?;
        let a = g.add(queries, att)?;
        let f = self.ffn.forward(g, a)?;
        g.add(a, f)
    }

    pub fn forward_self(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward(g, x, x)
    }
}

/// k-nearest-neighbour index lists for a point set, flattened row-major
/// (`n * k` entries, each point's list sorted by distance, itself first).
pub fn neighbourhoods(points: &[Point3], k: usize) -> (Arc<Vec<usize>>, usize) {
    let k = k.min(points.len());
    let idx = knn_indices(points, points, k).into_iter().flatten().collect();
    (Arc::new(idx), k)
}

/// Vector self-attention over k-nearest neighbourhoods:
/// `y_i = sum_j softmax_j(gamma(phi(x_i) - psi(x_j) + delta_ij)) * (alpha(x_j) + delta_ij)`,
/// with `delta_ij = theta(p_i - p_j)` and per-channel softmax; output `x + y`.
#[derive(Clone, Debug)]
pub struct PointTransformer {
    pub phi: Linear,
    pub psi: Linear,
    pub alpha: Linear,
    pub pos: Mlp,
    pub gamma: Mlp,
    pub k: usize,
}

impl PointTransformer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            phi: Linear::new(store, &format!("{name}.phi"), dim, dim, rng),
            psi: Linear::new(store, &format!("{name}.psi"), dim, dim, rng),
            alpha: Linear::new(store, &format!("{name}.alpha"), dim, dim, rng),
            pos: Mlp::new(store, &format!("{name}.pos"), &[3, dim, dim], false, rng),
            gamma: Mlp::new(store, &format!("{name}.gamma"), &[dim, dim, dim], false, rng),
            k,
        }
    }

    /// `x: [n, c]` features, `pos: [n, 3]` coordinates. Neighbourhoods are
    /// computed from the current coordinate values and act as fixed routing.
    pub fn forward(&self, g: &mut Graph, x: Var, pos: Var) -> Result<Var> {
        let points: Vec<Point3> = g
            .value(pos)
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let (nbr, k) = neighbourhoods(&points, self.k);
        let q = self.phi.forward(g, x)?;
        let kf = self.psi.forward(g, x)?;
        let vf = self.alpha.forward(g, x)?;
        let q_rep = g.repeat_rows(q, k)?;
        let k_nb = g.gather_rows(kf, nbr.clone())?;
        let v_nb = g.gather_rows(vf, nbr.clone())?;
        let p_rep = g.repeat_rows(pos, k)?;
        let p_nb = g.gather_rows(pos, nbr)?;
        let rel = g.sub(p_rep, p_nb)?;
        let delta = self.pos.forward(g, rel)?;
        let qk = g.sub(q_rep, k_nb)?;
        let logits_in = g.add(qk, delta)?;
        let logits = self.gamma.forward(g, logits_in)?;
        let w = g.group_softmax(logits, k)?;
        let vals = g.add(v_nb, delta)?;
        let weighted = g.mul(w, vals)?;
        let y = g.group_sum(weighted, k)?;
        g.add(x, y)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn constant_output_ignores_input() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng());
        lin.set_constant_output(&mut store, &[0.5, -2.0]);
        let mut g = Graph::with_params(&store, false);
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap());
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn mlp_names_and_relu_last() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], true, &mut rng());
        assert!(store.id("m.layer0.weight").is_some());
        assert!(store.id("m.layer1.bias").is_some());
        mlp.last().set_constant_output(&mut store, &[-1.0, 1.0]);
        let mut g = Graph::with_params(&store, false);
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let y = mlp.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0]);
    }

    #[test]
    fn neighbourhoods_start_with_the_point_itself() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let (idx, k) = neighbourhoods(&pts, 8);
        assert_eq!(k, 3);
        assert_eq!(idx.as_slice(), &[0, 1, 2, 1, 0, 2, 2, 1, 0]);
    }

    #[test]
    fn attention_block_preserves_shape() {
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "a", 8, 2, &mut rng());
        let mut g = Graph::with_params(&store, false);
        let q = g.constant(Tensor::full(&[3, 8], 0.1));
        let c = g.constant(Tensor::full(&[5, 8], -0.2));
        let y = block.forward(&mut g, q, c).unwrap();
        assert_eq!(g.shape(y), &[3, 8]);
    }
}
