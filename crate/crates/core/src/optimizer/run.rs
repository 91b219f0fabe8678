//! On-disk layout of an attack run.
//!
//! ```text
//! <dir>/config.json
//! <dir>/<init>/loss_history.csv
//! <dir>/<init>/candidates/iter_0000.png
//! <dir>/checkpoints/ckpt_<init>_<iteration>.json
//! <dir>/best_patch.png, best.json
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::raster::{save_png, Image};

use super::{AttackConfig, AttackObserver, AttackOutcome, Checkpoint, LatentState, LossRecord, OptimizerError};

const HISTORY_HEADER: &str = "iteration,L_det,L_tv,L_total,mean_stop_conf";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OptimizerError + '_ {
    move |source| OptimizerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub struct RunWriter {
    dir: PathBuf,
    candidate_every: usize,
    history: Option<(PathBuf, BufWriter<File>)>,
}

impl RunWriter {
    /// `candidate_every = k` saves the patch of every k-th iteration; 0 saves none.
    pub fn create(dir: &Path, cfg: &AttackConfig, candidate_every: usize) -> Result<Self, OptimizerError> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(dir))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(cfg).map_err(|e| OptimizerError::Serde(e.to_string()))?;
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            candidate_every,
            history: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Reopens a run for resumption, rewriting each loss history from the
    /// records carried by the checkpoint.
    pub fn reopen(dir: &Path, checkpoint: &Checkpoint, candidate_every: usize) -> Result<Self, OptimizerError> {
        let mut w = Self::create(dir, &checkpoint.config, candidate_every)?;
        for run in &checkpoint.finished {
            w.start_history(&run.label, &run.history)?;
        }
        let label = &checkpoint.config.inits[checkpoint.init_index];
        w.start_history(label, &checkpoint.state.history)?;
        Ok(w)
    }

    fn start_history(&mut self, label: &str, records: &[LossRecord]) -> Result<(), OptimizerError> {
        let init_dir = self.dir.join(label);
        fs::create_dir_all(init_dir.join("candidates")).map_err(io_err(&init_dir))?;
        let path = init_dir.join("loss_history.csv");
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{HISTORY_HEADER}").map_err(io_err(&path))?;
        for r in records {
            write_record(&mut out, r).map_err(io_err(&path))?;
        }
        out.flush().map_err(io_err(&path))?;
        self.history = Some((path, out));
        Ok(())
    }

    /// Writes `best_patch.png` and `best.json`.
    pub fn finish(&mut self, outcome: &AttackOutcome) -> Result<(), OptimizerError> {
        if let Some((path, out)) = self.history.as_mut() {
            out.flush().map_err(io_err(path))?;
        }
        let path = self.dir.join("best_patch.png");
        save_png(&outcome.best_patch.to_rgb8()?, &path)?;
        #[derive(Serialize)]
        struct Best<'a> {
            init: &'a str,
            iteration: usize,
            confidence: f64,
            per_init: Vec<(&'a str, usize, f64)>,
        }
        let best = Best {
            init: &outcome.best.init,
            iteration: outcome.best.iteration,
            confidence: outcome.best.confidence,
            per_init: outcome
                .runs
                .iter()
                .map(|r| (r.label.as_str(), r.best.iteration, r.best.confidence))
                .collect(),
        };
        let path = self.dir.join("best.json");
        let text = serde_json::to_string_pretty(&best).map_err(|e| OptimizerError::Serde(e.to_string()))?;
        fs::write(&path, text).map_err(io_err(&path))
    }
}

fn write_record(out: &mut impl Write, r: &LossRecord) -> std::io::Result<()> {
    writeln!(
        out,
        "{},{},{},{},{}",
        r.iteration, r.l_det, r.l_tv, r.l_total, r.mean_stop_conf
    )
}

impl AttackObserver for RunWriter {
    fn on_init_start(&mut self, label: &str, state: &LatentState) -> Result<(), OptimizerError> {
        self.start_history(label, &state.history)
    }

    fn on_step(&mut self, label: &str, record: &LossRecord, patch: &Image) -> Result<(), OptimizerError> {
        if let Some((path, out)) = self.history.as_mut() {
            write_record(out, record).map_err(io_err(path))?;
            out.flush().map_err(io_err(path))?;
        }
        if self.candidate_every > 0 && record.iteration % self.candidate_every == 0 {
            let path = self
                .dir
                .join(label)
                .join("candidates")
                .join(format!("iter_{:04}.png", record.iteration));
            save_png(&patch.to_rgb8()?, &path)?;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<(), OptimizerError> {
        let label = &checkpoint.config.inits[checkpoint.init_index];
        let path = self
            .dir
            .join("checkpoints")
            .join(format!("ckpt_{}_{:04}.json", label, checkpoint.state.iteration));
        fs::write(&path, checkpoint.to_json()).map_err(io_err(&path))?;
        let latest = self.dir.join("checkpoints").join("latest.json");
        fs::write(&latest, checkpoint.to_json()).map_err(io_err(&latest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{ConstantDetector, ToyGenerator, ToyOutput, STOP_CLASS_ID};
    use crate::camera::BBox;
    use crate::optimizer::{Attack, Scene};

    #[test]
    fn run_directory_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let scenes = vec![Scene {
            image: Image::filled(32, 32, 3, 0.5),
            sign_box: BBox::new(STOP_CLASS_ID, 0.5, 0.5, 0.8, 0.8).unwrap(),
        }];
        let det = ConstantDetector { confidence: 0.4 };
        let g = ToyGenerator::smooth(8, 4, 1, ToyOutput::Sigmoid);
        let cfg = AttackConfig {
            inits: vec!["dog".into()],
            iterations: 6,
            checkpoint_every: 3,
            ..AttackConfig::default()
        };
        let attack = Attack::new(cfg.clone(), &scenes, &det, &g).unwrap();
        let mut w = RunWriter::create(tmp.path(), &cfg, 5).unwrap();
        let out = attack.run(&mut w).unwrap();
        w.finish(&out).unwrap();
        let csv = fs::read_to_string(tmp.path().join("dog/loss_history.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], HISTORY_HEADER);
        assert_eq!(lines.len(), 7);
        assert!(tmp.path().join("dog/candidates/iter_0005.png").exists());
        assert!(!tmp.path().join("dog/candidates/iter_0004.png").exists());
        assert!(tmp.path().join("checkpoints/ckpt_dog_0003.json").exists());
        assert!(tmp.path().join("best_patch.png").exists());
        assert!(tmp.path().join("config.json").exists());

        let ckpt = Checkpoint::parse(&fs::read_to_string(tmp.path().join("checkpoints/latest.json")).unwrap()).unwrap();
        let mut w2 = RunWriter::reopen(tmp.path(), &ckpt, 0).unwrap();
        let out2 = attack.resume(ckpt, &mut w2).unwrap();
        w2.finish(&out2).unwrap();
        assert_eq!(fs::read_to_string(tmp.path().join("dog/loss_history.csv")).unwrap(), csv);
    }
}
