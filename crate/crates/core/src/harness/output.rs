//! Running preset arms and writing their artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{delta_percent, MetricsRecord};
use super::presets::{preset, Arm};
use super::scene::{gen_scene, Scene};
use crate::error::{LabError, Result};
use crate::pipeline::{run_training, Event, MomentRow, TrainResult};
use crate::renderer::render_forward;

#[derive(Clone, Debug)]
pub struct ArmRun {
    pub arm: Arm,
    pub result: TrainResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub description: String,
    pub baseline: bool,
    pub last: Option<MetricsRecord>,
    pub clone: usize,
    pub split: usize,
    pub prune: usize,
    pub relocate: usize,
    pub reset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub preset: String,
    pub seed: u64,
    pub arms: Vec<ArmSummary>,
}

/// Fills `delta_na` on every arm from the baseline arm's record at the same
/// iteration.
pub fn fill_delta_na(runs: &mut [ArmRun]) {
    let Some(base) = runs.iter().find(|r| r.arm.baseline) else {
        return;
    };
    let base: Vec<(u64, usize)> = base.result.metrics.iter().map(|m| (m.iter, m.na)).collect();
    for run in runs.iter_mut() {
        for rec in &mut run.result.metrics {
            rec.delta_na = base
                .iter()
                .find(|(it, _)| *it == rec.iter)
                .and_then(|&(_, na)| delta_percent(rec.na, na));
        }
    }
}

/// Runs all arms on one shared scene, in parallel on the current rayon pool.
pub fn run_arms(arms: Vec<Arm>) -> Result<Vec<ArmRun>> {
    let first = arms.first().ok_or_else(|| LabError::Config("preset has no arms".into()))?;
    let (spec, seed) = (first.config.scene.clone(), first.config.run.seed);
    if arms.iter().any(|a| a.config.scene != spec || a.config.run.seed != seed) {
        return Err(LabError::Config("arms of one run must share scene and seed".into()));
    }
    let scene = gen_scene(&spec, seed)?;
    let mut runs = arms
        .into_par_iter()
        .map(|arm| {
            let cfg = arm.config.train_config()?;
            let result = run_training(&cfg, &scene.initial, &scene.data)?;
            Ok(ArmRun { arm, result })
        })
        .collect::<Result<Vec<_>>>()?;
    fill_delta_na(&mut runs);
    Ok(runs)
}

/// Builds a preset, applies the overrides to every arm and runs it.
pub fn run_preset(
    name: &str,
    seed: u64,
    scene_kv: Option<&str>,
    overrides: &[String],
) -> Result<(Scene, Vec<ArmRun>)> {
    let mut arms = preset(name, seed)?;
    for arm in &mut arms {
        if let Some(text) = scene_kv {
            arm.config.apply_kv_text(text)?;
        }
        arm.config.apply_overrides(overrides)?;
    }
    let scene = gen_scene(&arms[0].config.scene, arms[0].config.run.seed)?;
    let runs = run_arms(arms)?;
    Ok((scene, runs))
}

pub fn summarize(preset: &str, seed: u64, runs: &[ArmRun]) -> Summary {
    Summary {
        preset: preset.into(),
        seed,
        arms: runs
            .iter()
            .map(|r| ArmSummary {
                name: r.arm.name.clone(),
                description: r.arm.description.clone(),
                baseline: r.arm.baseline,
                last: r.result.metrics.last().cloned(),
                clone: r.result.event_total("clone"),
                split: r.result.event_total("split"),
                prune: r.result.event_total("prune"),
                relocate: r.result.event_total("relocate"),
                reset: r.result.events.iter().filter(|e| e.kind == "reset").count(),
            })
            .collect(),
    }
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| LabError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> LabError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => LabError::io(path, io),
        other => LabError::Parse(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    w.write_record(["iter", "psnr", "ssim", "np", "na", "nd", "delta_na", "mean_mv", "max_mv"])
        .map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    let mut f = std::io::BufWriter::new(create(path)?);
    for e in events {
        writeln!(f, "{}", serde_json::to_string(e)?).map_err(|err| LabError::io(path, err))?;
    }
    f.flush().map_err(|e| LabError::io(path, e))
}

pub fn write_moments_csv(path: &Path, rows: &[MomentRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["iter", "attr", "mean_sqrt_v", "max_sqrt_v", "mean_ratio", "max_ratio"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        let s = &r.stats;
        w.write_record([
            r.iter.to_string(),
            r.attr.name().to_string(),
            s.mean_sqrt_v.to_string(),
            s.max_sqrt_v.to_string(),
            s.mean_ratio.to_string(),
            s.max_ratio.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| LabError::io(path, e))
}

/// Writes `DIR/<arm>/{metrics.csv, events.jsonl, config.kv, renders/}` and
/// `DIR/summary.json`.
pub fn write_outputs(dir: &Path, preset: &str, seed: u64, scene: &Scene, runs: &[ArmRun]) -> Result<()> {
    mkdir(dir)?;
    for run in runs {
        let arm_dir = dir.join(&run.arm.name);
        let renders = arm_dir.join("renders");
        mkdir(&renders)?;
        write_metrics_csv(&arm_dir.join("metrics.csv"), &run.result.metrics)?;
        write_events(&arm_dir.join("events.jsonl"), &run.result.events)?;
        let kv = arm_dir.join("config.kv");
        fs::write(&kv, run.arm.config.to_kv_string()).map_err(|e| LabError::io(&kv, e))?;
        if !run.result.moments.is_empty() {
            write_moments_csv(&arm_dir.join("moments.csv"), &run.result.moments)?;
        }
        let last = run.result.metrics.last().map_or(0, |m| m.iter);
        for (k, vp) in scene.data.views.iter().enumerate() {
            let mut img = render_forward(&run.result.set, vp)?.image;
            img.data.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
            img.save_ppm(&renders.join(format!("view{k}_iter{last}.ppm")))?;
        }
    }
    for (k, target) in scene.data.targets.iter().enumerate() {
        let targets = dir.join("targets");
        mkdir(&targets)?;
        target.save_ppm(&targets.join(format!("view{k}.ppm")))?;
    }
    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summarize(preset, seed, runs))?;
    fs::write(&path, json + "\n").map_err(|e| LabError::io(&path, e))
}

/// One line per arm found under the given directories: run directories with a
/// `summary.json`, or single arm directories with a `metrics.csv`.
pub fn compare(dirs: &[PathBuf]) -> Result<String> {
    let mut out = format!(
        "{:<28} {:<6} {:>8} {:>7} {:>6} {:>6} {:>6} {:>9}\n",
        "run", "arm", "psnr", "ssim", "np", "na", "nd", "dNa%"
    );
    let mut line = |run: &str, arm: &str, m: Option<&MetricsRecord>| {
        let Some(m) = m else {
            out += &format!("{run:<28} {arm:<6} (no metrics)\n");
            return;
        };
        let d = m.delta_na.map_or("-".to_string(), |d| format!("{d:+.1}"));
        out += &format!(
            "{run:<28} {arm:<6} {:>8.3} {:>7.4} {:>6} {:>6} {:>6} {d:>9}\n",
            m.psnr, m.ssim, m.np, m.na, m.nd
        );
    };
    for dir in dirs {
        let label = dir.display().to_string();
        let summary = dir.join("summary.json");
        if summary.exists() {
            let text = fs::read_to_string(&summary).map_err(|e| LabError::io(&summary, e))?;
            let s: Summary = serde_json::from_str(&text)?;
            for a in &s.arms {
                line(&label, &a.name, a.last.as_ref());
            }
        } else {
            let rows = read_metrics_csv(&dir.join("metrics.csv"))?;
            let arm = dir.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned());
            line(&label, &arm, rows.last());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;

    fn record(iter: u64, na: usize, delta: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            iter,
            psnr: 23.456789012345678,
            ssim: 0.1 + 0.2,
            np: 40,
            na,
            nd: 40 - na,
            delta_na: delta,
            mean_mv: 1e-300,
            max_mv: 0.625,
        }
    }

    #[test]
    fn empty_log_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics_csv(&p, &[]).unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap(),
            "iter,psnr,ssim,np,na,nd,delta_na,mean_mv,max_mv\n"
        );
        assert!(read_metrics_csv(&p).unwrap().is_empty());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![record(0, 10, None), record(100, 7, Some(-33.33333333333333))];
        write_metrics_csv(&p, &rows).unwrap();
        assert_eq!(read_metrics_csv(&p).unwrap(), rows);
    }

    #[test]
    fn io_errors_carry_the_path() {
        let p = Path::new("/nonexistent-dir/x/metrics.csv");
        match write_metrics_csv(p, &[]) {
            Err(LabError::Io { path, .. }) => assert_eq!(path, p),
            other => panic!("{other:?}"),
        }
    }

    fn tiny(name: &str, baseline: bool, mode: &str) -> Arm {
        let mut config = ExperimentConfig::default();
        config
            .apply_kv_text(
                "scene.gt_count = 6\nscene.canvas = 48\nscene.crop = 32\nscene.views = 4\n\
                 stage.warmup_end = 5\nstage.densify_end = 30\nstage.total_iters = 40\n\
                 stage.reset_interval = 20\nrun.log_interval = 10\n",
            )
            .unwrap();
        config.set("opt.mode_refine", mode).unwrap();
        Arm { name: name.into(), description: String::new(), baseline, config }
    }

    #[test]
    fn two_arms_summary_has_delta_against_baseline() {
        let runs = run_arms(vec![tiny("A", true, "coupled-adam"), tiny("B", false, "sparse-adam")]).unwrap();
        for rec in &runs[0].result.metrics {
            assert_eq!(rec.delta_na, Some(0.0));
        }
        let s = summarize("x", 0, &runs);
        assert_eq!(s.arms.len(), 2);
        assert!(s.arms[0].baseline && !s.arms[1].baseline);
        let (a, b) = (s.arms[0].last.as_ref().unwrap(), s.arms[1].last.as_ref().unwrap());
        assert_eq!(b.delta_na, delta_percent(b.na, a.na));

        let dir = tempfile::tempdir().unwrap();
        let scene = gen_scene(&runs[0].arm.config.scene, 0).unwrap();
        write_outputs(dir.path(), "x", 0, &scene, &runs).unwrap();
        let back: Summary =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(read_metrics_csv(&dir.path().join("B/metrics.csv")).unwrap(), runs[1].result.metrics);
        assert!(dir.path().join("A/renders/view3_iter40.ppm").exists());
        let table = compare(&[dir.path().to_path_buf(), dir.path().join("B")]).unwrap();
        assert_eq!(table.lines().count(), 4);
    }

    #[test]
    fn mismatched_scenes_are_rejected() {
        let mut b = tiny("B", false, "sparse-adam");
        b.config.run.seed = 9;
        assert!(run_arms(vec![tiny("A", true, "coupled-adam"), b]).is_err());
    }
}
