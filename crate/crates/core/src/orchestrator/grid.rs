use std::fs;
use std::path::Path;

use super::config::{DataSpec, ExperimentConfig, SteeringConfig, Strategy};
use super::feedback::{OracleFeedback, ProgressSink};
use super::run::{run_from_baseline, train_baseline, ExperimentRecord, RunEnv};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::explain::{render_overlay, Method};
use crate::metrics::{write_table, TableRow};
use crate::sampling::Sampler;
use crate::trainer::{argmax, load_checkpoint, predict_proba};

const SAMPLERS: [Sampler; 2] = [Sampler::Uncertainty, Sampler::HighConfidence];
const KS: [usize; 3] = [1, 3, 5];
const EXPLAINERS: [Method; 2] = [Method::Gradcam, Method::Bla];

/// The 23 configurations of the results table: the baseline, counterexample
/// steering over samplers × k, the penalty over samplers × explainers, and
/// the hybrid over samplers × explainers × k.
pub fn grid_configs(base: &SteeringConfig) -> Vec<SteeringConfig> {
    let with = |strategy, sampler, explainer, k| SteeringConfig {
        run_id: None,
        strategy,
        sampler,
        explainer,
        k,
        ..base.clone()
    };
    let mut out = vec![with(Strategy::Baseline, Sampler::HighConfidence, Method::Gradcam, 0)];
    for s in SAMPLERS {
        for k in KS {
            out.push(with(Strategy::Caipi, s, Method::Gradcam, k));
        }
    }
    for s in SAMPLERS {
        for e in EXPLAINERS {
            out.push(with(Strategy::Rrr, s, e, 0));
        }
    }
    for s in SAMPLERS {
        for e in EXPLAINERS {
            for k in KS {
                out.push(with(Strategy::Hybrid, s, e, k));
            }
        }
    }
    out
}

/// Runs every grid configuration from one shared baseline model and writes
/// `<out>/<run_id>/...` plus `<out>/table.csv`.
pub fn run_grid(
    base: &SteeringConfig,
    data: &Dataset,
    spec: Option<&DataSpec>,
    out: &Path,
    progress: &dyn ProgressSink,
) -> Result<Vec<ExperimentRecord>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let t = std::time::Instant::now();
    let (baseline, _) = train_baseline(base, data)?;
    let baseline_seconds = t.elapsed().as_secs_f64();
    let mut records = Vec::new();
    for cfg in grid_configs(base) {
        log::info!("grid: {}", cfg.run_id());
        let mut oracle = OracleFeedback;
        let mut env = RunEnv {
            run_dir: Some(out.join(cfg.run_id())),
            data_spec: spec.cloned(),
            feedback: &mut oracle,
            progress,
        };
        records.push(run_from_baseline(&cfg, data, baseline.clone(), baseline_seconds, &mut env)?);
    }
    let rows: Vec<TableRow> = records.iter().map(|r| r.table_row()).collect();
    write_table(&out.join("table.csv"), data.class_names(), &rows)?;
    Ok(records)
}

fn row_key(c: &SteeringConfig) -> (u8, u8, u8, usize) {
    let s = match c.strategy {
        Strategy::Baseline => 0,
        Strategy::Caipi => 1,
        Strategy::Rrr => 2,
        Strategy::Hybrid => 3,
    };
    let sampler = match c.sampler {
        Sampler::Uncertainty => 0,
        Sampler::HighConfidence => 1,
    };
    let xai = (c.eval_method() == Method::Bla) as u8;
    (s, sampler, xai, c.table_k().unwrap_or(0))
}

/// Collects `record.json` from every run directory under `runs`, writes
/// `<runs>/table.csv` in table order, and renders before/after saliency
/// overlays for runs whose config names their data. Returns the rows.
pub fn report(runs: &Path) -> Result<Vec<TableRow>> {
    let mut found: Vec<(ExperimentRecord, std::path::PathBuf)> = Vec::new();
    let entries = fs::read_dir(runs).map_err(|e| Error::io(runs, e))?;
    let mut dirs: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.join("record.json").exists()).collect();
    if runs.join("record.json").exists() {
        dirs.push(runs.to_path_buf());
    }
    for dir in dirs {
        let path = dir.join("record.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        found.push((serde_json::from_str(&text)?, dir));
    }
    if found.is_empty() {
        return Err(Error::Validation(format!("no run records under {}", runs.display())));
    }
    found.sort_by(|a, b| row_key(&a.0.config).cmp(&row_key(&b.0.config)).then(a.0.run_id.cmp(&b.0.run_id)));
    let mut names: Option<[String; 2]> = None;
    for (rec, dir) in &found {
        match render_run_overlays(rec, dir) {
            Ok(Some(n)) => names = names.or(Some(n)),
            Ok(None) => {}
            Err(e) => log::warn!("{}: overlays skipped: {e}", rec.run_id),
        }
    }
    let rows: Vec<TableRow> = found.iter().map(|(r, _)| r.table_row()).collect();
    let names = names.unwrap_or_else(|| ["class_0".into(), "class_1".into()]);
    write_table(&runs.join("table.csv"), &names, &rows)?;
    Ok(rows)
}

/// Writes `saliency/overlay_<id>_{before,after}.png`; returns the class
/// names of the run's dataset when it could be reloaded.
fn render_run_overlays(rec: &ExperimentRecord, dir: &Path) -> Result<Option<[String; 2]>> {
    let cfg_path = dir.join("config.json");
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let Ok(cfg) = serde_json::from_str::<ExperimentConfig>(&text) else {
        return Ok(None);
    };
    let before = dir.join("checkpoints/baseline.json");
    let after = dir.join("checkpoints/final.json");
    if !before.exists() || !after.exists() {
        return Ok(None);
    }
    let data = cfg.data.load()?;
    let (m0, m1) = (load_checkpoint(&before)?, load_checkpoint(&after)?);
    let out = dir.join("saliency");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for s in data.split(Split::Test).into_iter().take(rec.config.saliency_samples) {
        for (tag, model, method) in [("before", &m0, Method::Gradcam), ("after", &m1, rec.config.eval_method())] {
            let pred = argmax(&predict_proba(model, &[&s.image])?[0]);
            let map = super::run::explain_with(model, method, s, pred)?;
            let p = out.join(format!("overlay_{}_{tag}.png", s.id));
            render_overlay(&s.image, &map, 0.5)?.save(&p).map_err(|e| Error::image(&p, e))?;
        }
    }
    Ok(Some(data.class_names().clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_twenty_three_distinct_rows() {
        let cfgs = grid_configs(&SteeringConfig::default());
        assert_eq!(cfgs.len(), 23);
        let count = |s| cfgs.iter().filter(|c| c.strategy == s).count();
        assert_eq!((count(Strategy::Baseline), count(Strategy::Caipi), count(Strategy::Rrr), count(Strategy::Hybrid)), (1, 6, 4, 12));
        let ids: std::collections::BTreeSet<_> = cfgs.iter().map(|c| c.run_id()).collect();
        assert_eq!(ids.len(), 23);
    }
}
