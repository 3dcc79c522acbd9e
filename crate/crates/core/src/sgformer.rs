//! Symmetry-guided refinement stage.
//!
//! A stage encodes its input cloud, lets the features attend to the key-point
//! features and the missing-part features along two independent paths (cross
//! attention then self attention on each), concatenates the paths, applies two
//! more self-attention blocks and predicts `r` offsets per point. Each input
//! point is repeated `r` times and displaced by its offsets.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{AttentionBlock, Mlp, PointTransformer};
use crate::training::{GuidanceFlags, ModelConfig};

/// Points with row-aligned features.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSet {
    pub points: Var,
    pub features: Var,
}

/// Per-point MLP, global max-pool, fusion with the global vector, point transformer.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub point_mlp: Mlp,
    pub fuse: Mlp,
    pub transformer: PointTransformer,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let enc = cfg.enc_channels;
        Self {
            point_mlp: Mlp::new(store, &format!("{name}.point_mlp"), &[3, enc / 2, enc], true, rng),
            fuse: Mlp::new(store, &format!("{name}.fuse"), &[2 * enc, enc, enc], false, rng),
            transformer: PointTransformer::new(store, &format!("{name}.transformer"), enc, cfg.knn_k, rng),
        }
    }

    /// `points: [n, 3]` to features `[n, enc_channels]`.
    pub fn encode(&self, g: &mut Graph, points: Var) -> Result<FeatureSet> {
        let n = g.shape(points)[0];
        let local = self.point_mlp.forward(g, points)?;
        let global = g.max_pool(local)?;
        let global = g.broadcast_rows(global, n)?;
        let joined = g.concat_cols(&[local, global])?;
        let fused = self.fuse.forward(g, joined)?;
        let features = self.transformer.forward(g, fused, points)?;
        Ok(FeatureSet { points, features })
    }
}

/// One guidance path: lift to the path width, cross-attend to the guidance
/// source, then self-attend.
#[derive(Clone, Debug)]
pub struct GuidancePath {
    pub lift_query: Mlp,
    pub lift_source: Mlp,
    pub cross: AttentionBlock,
    pub self_attn: AttentionBlock,
}

impl GuidancePath {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (enc, path) = (cfg.enc_channels, cfg.path_channels());
        Self {
            lift_query: Mlp::new(store, &format!("{name}.lift_query"), &[enc, path, path], false, rng),
            lift_source: Mlp::new(store, &format!("{name}.lift_source"), &[enc, path, path], false, rng),
            cross: AttentionBlock::new(store, &format!("{name}.cross"), path, cfg.heads, rng),
            self_attn: AttentionBlock::new(store, &format!("{name}.self_attn"), path, cfg.heads, rng),
        }
    }

    /// With `use_source == false` the cross-attention output is replaced by
    /// the lifted query features.
    fn forward(&self, g: &mut Graph, query: Var, source: Var, use_source: bool) -> Result<Var> {
        let q = self.lift_query.forward(g, query)?;
        let x = if use_source {
            let s = self.lift_source.forward(g, source)?;
            self.cross.forward(g, q, s)?
        } else {
            q
        };
        self.self_attn.forward_self(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub encoder: Encoder,
    pub path_k: GuidancePath,
    pub path_m: GuidancePath,
    pub theta: [AttentionBlock; 2],
    pub shuffle: Mlp,
    pub ratio: usize,
}

impl Stage {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        let fused = cfg.fused_channels();
        Self {
            encoder: Encoder::new(store, &format!("{name}.encoder"), cfg, rng),
            path_k: GuidancePath::new(store, &format!("{name}.path_k"), cfg, rng),
            path_m: GuidancePath::new(store, &format!("{name}.path_m"), cfg, rng),
            theta: [
                AttentionBlock::new(store, &format!("{name}.theta0"), fused, cfg.heads, rng),
                AttentionBlock::new(store, &format!("{name}.theta1"), fused, cfg.heads, rng),
            ],
            shuffle: Mlp::new(store, &format!("{name}.shuffle"), &[fused, fused / 2, 3 * ratio], false, rng),
            ratio,
        }
    }

    /// Zeroes the offset head so the stage only repeats its input points.
    pub fn zero_offsets(&self, store: &mut ParamStore) {
        self.shuffle.last().set_constant_output(store, &vec![0.0; 3 * self.ratio]);
    }

    /// `[phi(F_init, F_k), beta(F_init, F_m)]`.
    pub fn dual_path_fuse(
        &self,
        g: &mut Graph,
        f_init: &FeatureSet,
        f_k: Var,
        f_m: Var,
        flags: GuidanceFlags,
    ) -> Result<FeatureSet> {
        let ci = g.shape(f_init.features)[1];
        for src in [f_k, f_m] {
            if g.shape(src)[1] != ci {
                return Err(Error::shape("dual_path_fuse", g.shape(f_init.features), g.shape(src)));
            }
        }
        let a = self.path_k.forward(g, f_init.features, f_k, flags.use_f_k)?;
        let b = self.path_m.forward(g, f_init.features, f_m, flags.use_f_m)?;
        let features = g.concat_cols(&[a, b])?;
        Ok(FeatureSet {
            points: f_init.points,
            features,
        })
    }

    /// Repeats every input point `r` times and adds the predicted offsets.
    pub fn refine(&self, g: &mut Graph, fused: &FeatureSet) -> Result<Var> {
        let n = g.shape(fused.points)[0];
        if g.shape(fused.features)[0] != n {
            return Err(Error::shape("refine", g.shape(fused.points), g.shape(fused.features)));
        }
        let mut h = fused.features;
        for block in &self.theta {
            h = block.forward_self(g, h)?;
        }
        let off = self.shuffle.forward(g, h)?;
        let off = g.reshape(off, &[n * self.ratio, 3])?;
        let base = g.repeat_rows(fused.points, self.ratio)?;
        g.add(base, off)
    }

    /// Encode `p_in` (or reuse `f_init` when given), fuse guidance, refine.
    pub fn forward(
        &self,
        g: &mut Graph,
        p_in: Var,
        f_init: Option<FeatureSet>,
        f_k: Var,
        f_m: Var,
        flags: GuidanceFlags,
    ) -> Result<Var> {
        let f_init = match f_init {
            Some(f) => f,
            None => self.encoder.encode(g, p_in)?,
        };
        let fused = self.dual_path_fuse(g, &f_init, f_k, f_m, flags)?;
        self.refine(g, &fused)
    }
}
