use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which guidance features the refinement stages attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceFlags {
    pub use_f_k: bool,
    pub use_f_m: bool,
}

impl Default for GuidanceFlags {
    fn default() -> Self {
        Self {
            use_f_k: true,
            use_f_m: true,
        }
    }
}

/// All model and training hyperparameters.
///
/// Channel widths derive from `enc_channels`: each guidance path runs at
/// `2 * enc_channels` and the fused feature at `4 * enc_channels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_k: usize,
    pub c: usize,
    pub enc_channels: usize,
    pub heads: usize,
    pub knn_k: usize,
    pub ratios: [usize; 2],
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub guidance: GuidanceFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_k: 512,
            c: 512,
            enc_channels: 128,
            heads: 4,
            knn_k: 16,
            ratios: [4, 4],
            lr: 0.0002,
            weight_decay: 0.01,
            seed: 0,
            epochs: 50,
            batch_size: 8,
            guidance: GuidanceFlags::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: channels scaled by 1/8, `r = [2, 2]`.
    pub fn toy() -> Self {
        Self {
            n_k: 64,
            c: 64,
            enc_channels: 16,
            ratios: [2, 2],
            lr: 0.001,
            ..Self::default()
        }
    }

    pub fn path_channels(&self) -> usize {
        2 * self.enc_channels
    }

    pub fn fused_channels(&self) -> usize {
        4 * self.enc_channels
    }

    /// Point counts of the initial cloud and each refinement output.
    pub fn output_counts(&self) -> [usize; 3] {
        let init = 2 * self.n_k;
        [init, init * self.ratios[0], init * self.ratios[0] * self.ratios[1]]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_k == 0 {
            return bad("n_k must be positive".into());
        }
        if self.c < 2 || self.c % 2 != 0 {
            return bad(format!("c must be an even number >= 2, got {}", self.c));
        }
        if self.enc_channels < 2 || self.enc_channels % 2 != 0 {
            return bad(format!("enc_channels must be an even number >= 2, got {}", self.enc_channels));
        }
        if self.heads == 0 || self.path_channels() % self.heads != 0 {
            return bad(format!(
                "heads = {} must divide the per-path channel count {}",
                self.heads,
                self.path_channels()
            ));
        }
        if self.knn_k == 0 {
            return bad("knn_k must be positive".into());
        }
        if self.ratios.contains(&0) {
            return bad(format!("upsampling ratios must be positive, got {:?}", self.ratios));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let file = ConfigFile {
            model: ModelSection {
                n_k: self.n_k,
                c: self.c,
                enc_channels: self.enc_channels,
                heads: self.heads,
                knn_k: self.knn_k,
                ratios: self.ratios,
            },
            train: TrainSection {
                lr: self.lr,
                weight_decay: self.weight_decay,
                seed: self.seed,
                epochs: self.epochs,
                batch_size: self.batch_size,
            },
            guidance: self.guidance,
        };
        toml::to_string(&file).expect("config serialisation cannot fail")
    }

    /// Parses `key = value` text with `[model]`, `[train]` and `[guidance]`
    /// sections; missing keys take the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let file: PartialFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::default();
        if let Some(m) = file.model {
            set(&mut cfg.n_k, m.n_k);
            set(&mut cfg.c, m.c);
            set(&mut cfg.enc_channels, m.enc_channels);
            set(&mut cfg.heads, m.heads);
            set(&mut cfg.knn_k, m.knn_k);
            set(&mut cfg.ratios, m.ratios);
        }
        if let Some(t) = file.train {
            set(&mut cfg.lr, t.lr);
            set(&mut cfg.weight_decay, t.weight_decay);
            set(&mut cfg.seed, t.seed);
            set(&mut cfg.epochs, t.epochs);
            set(&mut cfg.batch_size, t.batch_size);
        }
        if let Some(gd) = file.guidance {
            set(&mut cfg.guidance.use_f_k, gd.use_f_k);
            set(&mut cfg.guidance.use_f_m, gd.use_f_m);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Serialize)]
struct ConfigFile {
    model: ModelSection,
    train: TrainSection,
    guidance: GuidanceFlags,
}

#[derive(Serialize)]
struct ModelSection {
    n_k: usize,
    c: usize,
    enc_channels: usize,
    heads: usize,
    knn_k: usize,
    ratios: [usize; 2],
}

#[derive(Serialize)]
struct TrainSection {
    lr: f64,
    weight_decay: f64,
    seed: u64,
    epochs: usize,
    batch_size: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialFile {
    model: Option<PartialModel>,
    train: Option<PartialTrain>,
    guidance: Option<PartialGuidance>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialModel {
    n_k: Option<usize>,
    c: Option<usize>,
    enc_channels: Option<usize>,
    heads: Option<usize>,
    knn_k: Option<usize>,
    ratios: Option<[usize; 2]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialTrain {
    lr: Option<f64>,
    weight_decay: Option<f64>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialGuidance {
    use_f_k: Option<bool>,
    use_f_m: Option<bool>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ModelConfig::toy();
        cfg.guidance.use_f_m = false;
        cfg.seed = 42;
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = ModelConfig::from_text("[model]\nn_k = 8\nratios = [2, 2]\n").unwrap();
        assert_eq!(cfg.n_k, 8);
        assert_eq!(cfg.ratios, [2, 2]);
        assert_eq!(cfg.c, 512);
        assert_eq!(cfg.lr, 0.0002);
    }

    #[test]
    fn rejects_bad_heads_and_unknown_keys() {
        assert!(ModelConfig::from_text("[model]\nheads = 3\n").is_err());
        assert!(ModelConfig::from_text("[model]\nbogus = 1\n").is_err());
    }

    #[test]
    fn default_counts() {
        assert_eq!(ModelConfig::default().output_counts(), [1024, 4096, 16384]);
    }
}
