//! Per-sample metrics, aggregates and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::data::fnv1a;
use super::{ModelConfig, SampleRecord};
use crate::error::{Error, Result};
use crate::geometry::io::write_cloud;
use crate::geometry::{chamfer_l1, chamfer_l2, f1_score, fidelity_distance, mmd, MetricsRecord, PointCloud, F1_THRESHOLD};
use crate::model::SymmCompletion;

pub const CSV_HEADER: &str = "shape_id,cd_l1,cd_l2,f1,fd,mmd";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub shape_id: String,
    pub metrics: MetricsRecord,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub run_id: String,
    pub samples: usize,
    pub aggregate: MetricsRecord,
    pub config: ModelConfig,
    #[serde(skip)]
    pub per_sample: Vec<SampleMetrics>,
}

/// All metrics of one completed cloud. FD is measured from `partial`, MMD
/// against `gallery`.
pub fn score(
    shape_id: &str,
    output: &PointCloud,
    partial: &PointCloud,
    gt: &PointCloud,
    gallery: &[PointCloud],
) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        shape_id: shape_id.to_string(),
        metrics: MetricsRecord {
            cd_l1: chamfer_l1(output, gt),
            cd_l2: chamfer_l2(output, gt),
            f1_at_1pct: f1_score(output, gt, F1_THRESHOLD)?,
            fd: fidelity_distance(partial, output),
            mmd: mmd(output, gallery)?,
        },
    })
}

/// Field-wise means.
pub fn aggregate(rows: &[SampleMetrics]) -> MetricsRecord {
    let n = rows.len().max(1) as f64;
    let mut a = MetricsRecord::default();
    for r in rows {
        a.cd_l1 += r.metrics.cd_l1;
        a.cd_l2 += r.metrics.cd_l2;
        a.f1_at_1pct += r.metrics.f1_at_1pct;
        a.fd += r.metrics.fd;
        a.mmd += r.metrics.mmd;
    }
    a.cd_l1 /= n;
    a.cd_l2 /= n;
    a.f1_at_1pct /= n;
    a.fd /= n;
    a.mmd /= n;
    a
}

fn check_resolution(dataset: &[SampleRecord]) -> Result<()> {
    let Some(first) = dataset.first() else {
        return Err(Error::Size("evaluation dataset is empty".into()));
    };
    let res = first.gt.len();
    if let Some(s) = dataset.iter().find(|s| s.gt.len() != res) {
        return Err(Error::Size(format!(
            "ground truth of {} has {} points, expected {res}",
            s.shape_id,
            s.gt.len()
        )));
    }
    Ok(())
}

/// Completes every sample with `model` and scores the final output. The MMD
/// gallery is the dataset's own ground truth. With `export`, the missing
/// part, initial cloud and both refined clouds are written per sample as
/// `<id>.{mirror,init,fine1,fine2}.xyz`.
pub fn evaluate(model: &SymmCompletion, dataset: &[SampleRecord], export: Option<&Path>) -> Result<EvalReport> {
    check_resolution(dataset)?;
    if let Some(dir) = export {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let gallery: Vec<PointCloud> = dataset.iter().map(|s| s.gt.clone()).collect();
    let per_sample = dataset
        .par_iter()
        .map(|s| {
            let c = model.complete(&s.partial)?;
            if let Some(dir) = export {
                let clouds = [("mirror", &c.p_m), ("init", &c.p_init), ("fine1", &c.fines[0]), ("fine2", &c.fines[1])];
                for (tag, cloud) in clouds {
                    write_cloud(&dir.join(format!("{}.{tag}.xyz", s.shape_id)), cloud)?;
                }
            }
            score(&s.shape_id, c.fines.last().unwrap(), &s.partial, &s.gt, &gallery)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        run_id: run_id(model, dataset),
        samples: per_sample.len(),
        aggregate: aggregate(&per_sample),
        config: model.cfg.clone(),
        per_sample,
    })
}

/// Scores the ground truth against itself, bypassing the model.
pub fn evaluate_identity(dataset: &[SampleRecord]) -> Result<Vec<SampleMetrics>> {
    check_resolution(dataset)?;
    let gallery: Vec<PointCloud> = dataset.iter().map(|s| s.gt.clone()).collect();
    dataset
        .iter()
        .map(|s| score(&s.shape_id, &s.gt, &s.gt, &s.gt, &gallery))
        .collect()
}

/// Short hex digest of the configuration, parameters and sample ids.
fn run_id(model: &SymmCompletion, dataset: &[SampleRecord]) -> String {
    let mut text = model.cfg.to_text();
    for p in model.store.iter() {
        let h = p.value.data().iter().fold(0u64, |h, x| h.rotate_left(5) ^ x.to_bits());
        let _ = write!(text, "{}:{h:x};", p.name);
    }
    for s in dataset {
        text.push_str(&s.shape_id);
        text.push('\n');
    }
    format!("{:012x}", fnv1a(&text) & 0xffff_ffff_ffff)
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.per_sample)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialisation cannot fail")
    }

    /// Writes `metrics.csv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("metrics.csv", self.to_csv()), ("metrics.json", self.to_json())] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn rows_to_csv(rows: &[SampleMetrics]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(s, "{},{:?},{:?},{:?},{:?},{:?}", r.shape_id, m.cd_l1, m.cd_l2, m.f1_at_1pct, m.fd, m.mmd);
    }
    s
}
