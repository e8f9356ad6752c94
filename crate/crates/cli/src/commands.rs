use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crpn_core::eval::{RecallReport, SizeBuckets};
use crpn_core::geometry::{BBox, ScoredBox};
use crpn_core::gradcheck::{run_gradcheck, GradcheckOptions};
use crpn_core::pipeline::checkpoint::{load_state, save_state};
use crpn_core::pipeline::{propose_all, EpochMetrics, PipelineConfig, Trainer};
use crpn_core::synth::{self, Scene};
use serde::{Deserialize, Serialize};

use crate::{CliError, Command, CommonArgs, RunConfig, Split};

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, out } => gen_data(&common, &out),
        Command::Train {
            common,
            model,
            data,
            out_dir,
            resume,
            until_epoch,
        } => {
            let rc = RunConfig::load(common.config.as_deref())?;
            let cfg = rc.pipeline_config(&model.overrides(common.seed))?;
            let out_dir = out_dir
                .or(rc.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs"));
            train(
                &cfg,
                &data,
                &out_dir,
                resume.as_deref(),
                until_epoch,
                common.threads,
            )
            .map(|_| ())
        }
        Command::Propose {
            common,
            model,
            checkpoint,
            data,
            out,
            split,
        } => {
            let rc = RunConfig::load(common.config.as_deref())?;
            let cfg = rc.pipeline_config(&model.overrides(common.seed))?;
            propose(&cfg, &checkpoint, &data, &out, split, common.threads)
        }
        Command::Eval {
            common,
            proposals,
            data,
            out,
            k,
        } => {
            let rc = RunConfig::load(common.config.as_deref())?;
            let spec = rc.dataset_spec(None)?;
            let csv = eval(
                &proposals,
                &data,
                &k,
                SizeBuckets::for_max_size(spec.max_size),
            )?;
            match out {
                Some(p) => fs::write(&p, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Gradcheck {
            common,
            instances,
            perturb,
        } => gradcheck(&common, instances, perturb),
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("threads: {e}")))
}

pub fn gen_data(common: &CommonArgs, out: &Path) -> Result<()> {
    let rc = RunConfig::load(common.config.as_deref())?;
    let spec = rc.dataset_spec(common.seed)?;
    let scenes = pool(common.threads)?.install(|| synth::generate(&spec))?;
    synth::save(&scenes, out)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

/// Output file names for a config: `metrics.csv` / `checkpoint.bin`, suffixed by the ablation tag.
pub fn run_paths(cfg: &PipelineConfig, out_dir: &Path) -> (PathBuf, PathBuf) {
    let tag = cfg.ablation_tag();
    let suffix = if tag.is_empty() {
        String::new()
    } else {
        format!("_{tag}")
    };
    (
        out_dir.join(format!("checkpoint{suffix}.bin")),
        out_dir.join(format!("metrics{suffix}.csv")),
    )
}

fn read_metric_rows(path: &Path, upto: usize) -> Result<Vec<String>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e <= upto)
        })
        .map(str::to_string)
        .collect())
}

/// Train, writing the checkpoint and metrics after every epoch. Returns the checkpoint path.
pub fn train(
    cfg: &PipelineConfig,
    data: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    until_epoch: Option<usize>,
    threads: usize,
) -> Result<PathBuf> {
    let scenes = synth::load(data)?;
    if scenes.is_empty() {
        return Err(CliError::Config(format!(
            "{} holds no scenes",
            data.display()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let (ckpt, metrics_path) = run_paths(cfg, out_dir);
    let trainer = Trainer::new(cfg, &scenes, threads)?;
    let (mut state, mut rows) = match resume {
        Some(p) => {
            let state = load_state(p, cfg)?;
            if state.epoch > cfg.schedule.epochs {
                return Err(CliError::Config(format!(
                    "checkpoint is at epoch {} but the schedule has {}",
                    state.epoch, cfg.schedule.epochs
                )));
            }
            let rows = read_metric_rows(&metrics_path, state.epoch)?;
            (state, rows)
        }
        None => (trainer.init_state()?, Vec::new()),
    };
    let header = EpochMetrics::csv_header(cfg.num_stages);
    trainer.run(&mut state, until_epoch, |st, m| {
        rows.push(m.csv_row());
        save_state(st, &ckpt)?;
        let mut text = header.clone();
        text.push('\n');
        for r in &rows {
            text.push_str(r);
            text.push('\n');
        }
        fs::write(&metrics_path, text)?;
        eprintln!(
            "epoch {:>3}  loss {:.4}  AR@10 {:.4}  AR@100 {:.4}",
            m.epoch, m.total, m.ar_10, m.ar_100
        );
        Ok(())
    })?;
    if !ckpt.exists() {
        save_state(&state, &ckpt)?;
    }
    Ok(ckpt)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProposalLine {
    pub scene_id: u32,
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
}

impl ProposalLine {
    fn from_scored(scene_id: u32, props: &[ScoredBox]) -> Self {
        Self {
            scene_id,
            boxes: props
                .iter()
                .map(|p| [p.bbox.x, p.bbox.y, p.bbox.w, p.bbox.h])
                .collect(),
            scores: props.iter().map(|p| p.score).collect(),
        }
    }

    fn to_scored(&self) -> Result<Vec<ScoredBox>> {
        if self.boxes.len() != self.scores.len() {
            return Err(CliError::Config(format!(
                "scene {}: {} boxes but {} scores",
                self.scene_id,
                self.boxes.len(),
                self.scores.len()
            )));
        }
        self.boxes
            .iter()
            .zip(&self.scores)
            .map(|(b, &score)| {
                let bbox = BBox::new(b[0], b[1], b[2], b[3])?;
                Ok(ScoredBox { bbox, score })
            })
            .collect()
    }
}

pub fn split_scenes(scenes: &[Scene], cfg: &PipelineConfig, split: Split) -> Vec<Scene> {
    let cut = scenes.len().saturating_sub(cfg.val_scenes);
    match split {
        Split::Train => scenes[..cut].to_vec(),
        Split::Val => scenes[cut..].to_vec(),
        Split::All => scenes.to_vec(),
    }
}

pub fn propose(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    split: Split,
    threads: usize,
) -> Result<()> {
    let state = load_state(checkpoint, cfg)?;
    let scenes = split_scenes(&synth::load(data)?, cfg, split);
    let props = propose_all(&pool(threads)?, &state.model, cfg, &state.stats, &scenes)?;
    let mut file = std::io::BufWriter::new(fs::File::create(out)?);
    for (s, p) in scenes.iter().zip(&props) {
        let line = serde_json::to_string(&ProposalLine::from_scored(s.scene_id, p))
            .map_err(|e| CliError::Config(e.to_string()))?;
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_proposals(path: &Path) -> Result<Vec<(u32, Vec<ScoredBox>)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let p: ProposalLine = serde_json::from_str(l)
                .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            Ok((p.scene_id, p.to_scored()?))
        })
        .collect()
}

/// Report over the scenes present in the proposal file.
pub fn eval(proposals: &Path, data: &Path, ks: &[usize], buckets: SizeBuckets) -> Result<String> {
    let scenes = synth::load(data)?;
    let by_id: HashMap<u32, &Scene> = scenes.iter().map(|s| (s.scene_id, s)).collect();
    let mut props = Vec::new();
    let mut gts = Vec::new();
    for (id, p) in read_proposals(proposals)? {
        let scene = by_id
            .get(&id)
            .ok_or_else(|| CliError::Config(format!("scene {id} is not in {}", data.display())))?;
        props.push(p);
        gts.push(scene.gts.clone());
    }
    let report = RecallReport::compute(&props, &gts, ks, buckets)?;
    Ok(report.to_csv())
}

pub fn gradcheck(common: &CommonArgs, instances: usize, perturb: Option<String>) -> Result<()> {
    let opts = GradcheckOptions {
        instances,
        seed: common.seed.unwrap_or(0),
        perturb,
    };
    let reports = run_gradcheck(&opts)?;
    println!("op,instances,coords,max_rel_err,tolerance,status");
    for r in &reports {
        println!(
            "{},{},{},{:.3e},{:.0e},{}",
            r.op,
            r.instances,
            r.coords,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.op)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}
