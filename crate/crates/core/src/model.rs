//! The assembled completion network: LSTNet followed by two refinement stages.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::gradcheck::{relative_error, GradReport};
use crate::diffcore::{load_checkpoint, restore_into, save_checkpoint, ChamferKind, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::lstnet::{apply_transform, cloud_of, KeyGeometry, LstNet, PartialMissingPair, SymmetryTransform};
use crate::sgformer::Stage;
use crate::training::ModelConfig;

#[derive(Clone, Debug)]
pub struct SymmCompletion {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub lstnet: LstNet,
    pub stages: [Stage; 2],
}

/// Graph handles for every intermediate of one forward pass.
pub struct ForwardOutputs {
    pub key: KeyGeometry,
    pub transform: SymmetryTransform,
    pub pair: PartialMissingPair,
    /// Refined clouds of both stages, in order.
    pub fines: [Var; 2],
}

/// Loss value, final refined cloud and per-parameter gradients of one sample.
pub struct LossGrads {
    pub loss: f64,
    pub fine: PointCloud,
    /// `grads[i]` belongs to the i-th parameter of the store.
    pub grads: Vec<Vec<f64>>,
}

/// Point clouds produced by [`SymmCompletion::complete`].
#[derive(Clone, Debug)]
pub struct Completion {
    pub p_k: PointCloud,
    pub p_m: PointCloud,
    pub p_init: PointCloud,
    pub fines: Vec<PointCloud>,
}

impl SymmCompletion {
    /// Builds a freshly initialised model. Parameters are created in a fixed
    /// order from a ChaCha8 stream seeded with `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let lstnet = LstNet::new(&mut store, cfg, &mut rng);
        let stages = [
            Stage::new(&mut store, "sgformer.stage1", cfg, cfg.ratios[0], &mut rng),
            Stage::new(&mut store, "sgformer.stage2", cfg, cfg.ratios[1], &mut rng),
        ];
        Ok(Self {
            cfg: cfg.clone(),
            store,
            lstnet,
            stages,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Graph with every parameter bound as a leaf.
    pub fn graph(&self, requires_grad: bool) -> Graph {
        Graph::with_params(&self.store, requires_grad)
    }

    pub fn forward(&self, g: &mut Graph, partial: &PointCloud) -> Result<ForwardOutputs> {
        let key = self.lstnet.downsample(g, partial)?;
        let transform = self.lstnet.predict_transform(g, &key)?;
        let [s1, s2] = &self.stages;
        let pair = apply_transform(g, &key, &transform, &s1.encoder)?;
        let flags = self.cfg.guidance;
        let fine1 = s1.forward(g, pair.p_init, None, pair.f_k, pair.f_m.features, flags)?;
        let fine2 = s2.forward(g, fine1, None, pair.f_k, pair.f_m.features, flags)?;
        Ok(ForwardOutputs {
            key,
            transform,
            pair,
            fines: [fine1, fine2],
        })
    }

    /// Sum of the l1 Chamfer distances of the initial cloud and both refined
    /// clouds to `gt`, as a graph node.
    pub fn loss(&self, g: &mut Graph, out: &ForwardOutputs, gt: &PointCloud) -> Result<Var> {
        let gt = g.constant(Tensor::raw(vec![gt.len(), 3], gt.to_flat()));
        total_loss_graph(g, out.pair.p_init, &out.fines, gt)
    }

    /// Total loss of one sample, without gradients.
    pub fn loss_value(&self, partial: &PointCloud, gt: &PointCloud) -> Result<f64> {
        let mut g = self.graph(false);
        let out = self.forward(&mut g, partial)?;
        let loss = self.loss(&mut g, &out, gt)?;
        Ok(g.value(loss).item())
    }

    pub fn loss_and_grads(&self, partial: &PointCloud, gt: &PointCloud) -> Result<LossGrads> {
        let mut g = self.graph(true);
        let out = self.forward(&mut g, partial)?;
        let loss = self.loss(&mut g, &out, gt)?;
        let fine = cloud_of(&g, out.fines[1])?;
        g.backward(loss)?;
        let grads = self
            .store
            .iter()
            .enumerate()
            .map(|(i, p)| match g.grad(g.param(ParamId(i))) {
                Some(d) => d.to_vec(),
                None => vec![0.0; p.value.len()],
            })
            .collect();
        Ok(LossGrads {
            loss: g.value(loss).item(),
            fine,
            grads,
        })
    }

    /// Compares parameter gradients of the total loss against central
    /// differences, visiting every `stride`-th scalar of the store.
    pub fn gradcheck(&self, partial: &PointCloud, gt: &PointCloud, eps: f64, stride: usize) -> Result<GradReport> {
        let analytic = self.loss_and_grads(partial, gt)?.grads;
        let mut probe = self.clone();
        let mut report = GradReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            checked: 0,
            worst_pair: (0.0, 0.0),
        };
        let mut counter = 0usize;
        for (i, grads) in analytic.iter().enumerate() {
            for (j, &a) in grads.iter().enumerate() {
                counter += 1;
                if (counter - 1) % stride.max(1) != 0 {
                    continue;
                }
                let x = self.store.get(ParamId(i)).value.data()[j];
                probe.store.get_mut(ParamId(i)).value.data_mut()[j] = x + eps;
                let hi = probe.loss_value(partial, gt)?;
                probe.store.get_mut(ParamId(i)).value.data_mut()[j] = x - eps;
                let lo = probe.loss_value(partial, gt)?;
                probe.store.get_mut(ParamId(i)).value.data_mut()[j] = x;
                let numeric = (hi - lo) / (2.0 * eps);
                let err = relative_error(a, numeric);
                if err > report.max_rel_error || report.checked == 0 {
                    report.max_rel_error = err;
                    report.worst = (i, j);
                    report.worst_pair = (a, numeric);
                }
                report.checked += 1;
            }
        }
        Ok(report)
    }

    /// Adds uniform noise in `[-scale, scale]` to every parameter, so that
    /// zero-initialised layers carry signal.
    pub fn perturb(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..self.store.len() {
            for x in self.store.get_mut(ParamId(i)).value.data_mut() {
                *x += rng.random_range(-scale..scale);
            }
        }
    }

    pub fn complete(&self, partial: &PointCloud) -> Result<Completion> {
        let mut g = self.graph(false);
        let out = self.forward(&mut g, partial)?;
        Ok(Completion {
            p_k: cloud_of(&g, out.pair.p_k)?,
            p_m: cloud_of(&g, out.pair.p_m)?,
            p_init: cloud_of(&g, out.pair.p_init)?,
            fines: vec![cloud_of(&g, out.fines[0])?, cloud_of(&g, out.fines[1])?],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store)
    }

    /// Rebuilds the model for `cfg` and restores parameters from a checkpoint file.
    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(cfg)?;
        let loaded = load_checkpoint(path)?;
        restore_into(&mut model.store, &loaded).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(model)
    }
}

/// `CD(p_init, gt) + sum_i CD(fine_i, gt)` with l1 Chamfer terms.
pub fn total_loss_graph(g: &mut Graph, p_init: Var, fines: &[Var], gt: Var) -> Result<Var> {
    let mut total = g.chamfer(p_init, gt, ChamferKind::L1)?;
    for &f in fines {
        let term = g.chamfer(f, gt, ChamferKind::L1)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Total parameter count of the model assembled for `cfg`.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(SymmCompletion::new(cfg)?.param_count())
}
