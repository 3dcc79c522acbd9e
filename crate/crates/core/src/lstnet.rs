//! Local symmetry transformation network.
//!
//! Key points are farthest-point sampled from the partial input and encoded
//! (set abstraction, point transformer, channel expansion). Each key point
//! gets its own affine matrix `A_i` and translation `t_i`, predicted from its
//! local feature concatenated with the global feature, and is mapped to
//! `p_i * A_i + t_i` (row-vector convention). The initial cloud is the key
//! points followed by their images.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{fps, knn_indices, PointCloud};
use crate::layers::{Mlp, PointTransformer};
use crate::sgformer::{Encoder, FeatureSet};
use crate::training::ModelConfig;

/// Flattened `diag(-1, 1, 1)`: the mirror about the y-z plane.
pub const YZ_MIRROR: [f64; 9] = [-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

/// Down-sampled key points with their features.
pub struct KeyGeometry {
    /// `[n_k, 3]` key points (constant; selected by FPS).
    pub p_k: Var,
    /// Indices of the key points in the input cloud.
    pub indices: Vec<usize>,
    /// `[n_k, c]` expanded key features.
    pub f_k: Var,
    /// `[n_k, enc_channels]` features after the point transformer, used as
    /// guidance by the refinement stages.
    pub f_k_enc: Var,
    /// `[1, c]` global feature.
    pub g: Var,
}

/// Per-point affine matrices (`[n_k, 9]`, row-major 3x3) and translations (`[n_k, 3]`).
pub struct SymmetryTransform {
    pub a: Var,
    pub t: Var,
}

pub struct PartialMissingPair {
    pub p_k: Var,
    pub p_m: Var,
    /// `[p_k; p_m]`.
    pub p_init: Var,
    pub f_k: Var,
    pub f_m: FeatureSet,
}

#[derive(Clone, Debug)]
pub struct LstNet {
    pub set_abstraction: Mlp,
    pub transformer: PointTransformer,
    pub expand: Mlp,
    pub affine_head: Mlp,
    pub translation_head: Mlp,
    pub n_k: usize,
    pub knn_k: usize,
}

impl LstNet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let enc = cfg.enc_channels;
        let c = cfg.c;
        let net = Self {
            set_abstraction: Mlp::new(store, "lstnet.set_abstraction", &[3, enc / 2, enc], true, rng),
            transformer: PointTransformer::new(store, "lstnet.transformer", enc, cfg.knn_k, rng),
            expand: Mlp::new(store, "lstnet.expand", &[enc, c, c], false, rng),
            affine_head: Mlp::new(store, "lstnet.affine_head", &[2 * c, c, c / 2, 9], false, rng),
            translation_head: Mlp::new(store, "lstnet.translation_head", &[2 * c, c, c / 2, 3], false, rng),
            n_k: cfg.n_k,
            knn_k: cfg.knn_k,
        };
        net.affine_head.last().set_constant_output(store, &YZ_MIRROR);
        net.translation_head.last().set_constant_output(store, &[0.0; 3]);
        net
    }

    /// Forces every key point onto the same transform `p * a + t` by zeroing
    /// the heads' final weights and writing `a` and `t` into their biases.
    pub fn set_fixed_transform(&self, store: &mut ParamStore, a: &[f64; 9], t: &[f64; 3]) {
        self.affine_head.last().set_constant_output(store, a);
        self.translation_head.last().set_constant_output(store, t);
    }

    pub fn downsample(&self, g: &mut Graph, input: &PointCloud) -> Result<KeyGeometry> {
        if input.len() < self.n_k {
            return Err(Error::Size(format!(
                "input has {} points but {} key points are required",
                input.len(),
                self.n_k
            )));
        }
        let indices = fps(input, self.n_k, 0)?;
        let keys = input.select(&indices)?;
        let k = self.knn_k.min(input.len());
        let nbrs = knn_indices(keys.points(), input.points(), k);
        let mut rel = Vec::with_capacity(self.n_k * k * 3);
        for (center, list) in keys.points().iter().zip(&nbrs) {
            for &j in list {
                let p = input.get(j);
                rel.extend_from_slice(&[p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
            }
        }
        let rel = g.constant(Tensor::raw(vec![self.n_k * k, 3], rel));
        let local = self.set_abstraction.forward(g, rel)?;
        let f_sa = g.group_max(local, k)?;

        let p_k = g.constant(Tensor::raw(vec![self.n_k, 3], keys.to_flat()));
        let f_k_enc = self.transformer.forward(g, f_sa, p_k)?;
        let f_k = self.expand.forward(g, f_k_enc)?;
        let gl = g.max_pool(f_k)?;
        Ok(KeyGeometry {
            p_k,
            indices,
            f_k,
            f_k_enc,
            g: gl,
        })
    }

    pub fn predict_transform(&self, g: &mut Graph, key: &KeyGeometry) -> Result<SymmetryTransform> {
        let n = g.shape(key.f_k)[0];
        let gb = g.broadcast_rows(key.g, n)?;
        let f = g.concat_cols(&[key.f_k, gb])?;
        let a = self.affine_head.forward(g, f)?;
        let t = self.translation_head.forward(g, f)?;
        Ok(SymmetryTransform { a, t })
    }
}

/// `p_m[i] = p_k[i] * A[i] + t[i]` and `p_init = [p_k; p_m]`.
pub fn transform_points(g: &mut Graph, p_k: Var, st: &SymmetryTransform) -> Result<(Var, Var)> {
    let moved = g.point_affine(p_k, st.a)?;
    let p_m = g.add(moved, st.t)?;
    let p_init = g.concat_rows(&[p_k, p_m])?;
    Ok((p_m, p_init))
}

/// Builds the partial-missing pair; features of the missing part come from
/// running `encoder` over `p_m`.
pub fn apply_transform(
    g: &mut Graph,
    key: &KeyGeometry,
    st: &SymmetryTransform,
    encoder: &Encoder,
) -> Result<PartialMissingPair> {
    let (p_m, p_init) = transform_points(g, key.p_k, st)?;
    let f_m = encoder.encode(g, p_m)?;
    Ok(PartialMissingPair {
        p_k: key.p_k,
        p_m,
        p_init,
        f_k: key.f_k_enc,
        f_m,
    })
}

/// Reads a `[n, 3]` graph value as a point cloud.
pub fn cloud_of(g: &Graph, v: Var) -> Result<PointCloud> {
    PointCloud::from_flat(g.value(v).data())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::geometry::reflect_about_plane;

    fn setup(n_k: usize) -> (ParamStore, LstNet, Encoder) {
        let cfg = ModelConfig {
            n_k,
            c: 8,
            enc_channels: 4,
            heads: 2,
            knn_k: 4,
            ..ModelConfig::toy()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = LstNet::new(&mut store, &cfg, &mut rng);
        let enc = Encoder::new(&mut store, "enc", &cfg, &mut rng);
        (store, net, enc)
    }

    fn cloud(n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 0.71).cos(), i as f64 * 0.01]).collect())
            .unwrap()
    }

    #[test]
    fn fresh_network_mirrors_about_the_yz_plane() {
        let (store, net, enc) = setup(6);
        let input = cloud(20);
        let mut g = Graph::with_params(&store, false);
        let key = net.downsample(&mut g, &input).unwrap();
        let st = net.predict_transform(&mut g, &key).unwrap();
        let pair = apply_transform(&mut g, &key, &st, &enc).unwrap();
        let p_k = cloud_of(&g, pair.p_k).unwrap();
        assert_eq!(p_k, input.select(&key.indices).unwrap());
        assert_eq!(cloud_of(&g, pair.p_m).unwrap(), reflect_about_plane(&p_k, [1.0, 0.0, 0.0]).unwrap());
        let init = cloud_of(&g, pair.p_init).unwrap();
        assert_eq!(init.len(), 12);
        assert_eq!(&init.points()[..6], p_k.points());
        assert_eq!(g.shape(pair.f_m.features), &[6, 4]);
    }

    #[test]
    fn fixed_translation_shifts_every_point() {
        let (mut store, net, _) = setup(5);
        let identity = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        net.set_fixed_transform(&mut store, &identity, &[0.5, 0.0, -1.0]);
        let mut g = Graph::with_params(&store, false);
        let key = net.downsample(&mut g, &cloud(10)).unwrap();
        let st = net.predict_transform(&mut g, &key).unwrap();
        let (p_m, _) = transform_points(&mut g, key.p_k, &st).unwrap();
        let before = cloud_of(&g, key.p_k).unwrap();
        for (a, b) in before.points().iter().zip(cloud_of(&g, p_m).unwrap().points()) {
            assert_eq!(*b, [a[0] + 0.5, a[1], a[2] - 1.0]);
        }
    }

    #[test]
    fn too_few_input_points() {
        let (store, net, _) = setup(8);
        let mut g = Graph::with_params(&store, false);
        assert!(matches!(net.downsample(&mut g, &cloud(7)), Err(Error::Size(_))));
    }
}
