use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::Command;
use crate::corrnet::{
    load_encoder_checkpoint, pearson, pretrain as run_pretrain, pretrain_samples, CorrNet, EncoderConfig,
    EpochMetrics, FrameTensors, PretrainState, NORMAL_K,
};
use crate::diffpolicy::{train_policy, PolicyDataset, PolicyRuntime, PolicyState};
use crate::error::{Error, Result};
use crate::nncore::{component_rng, Checkpoint, Graph, ParamStore, RngStream};
use crate::obsbuild::{fit_normalizer, read_episode, write_episode, EpisodePack};
use crate::pcgeom::{ground_truth_contact, Aabb, PointSet};
use crate::se3kin::{fk_pointcloud, sample_chain_surfaces, serial_test_chain, JointVector};
use crate::toyenv::{self, ToyHandModel};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_CSV_HEADER: &str = "episode,env_seed,sampler_seed,success,steps,final_distance";
const TIMING_CSV_HEADER: &str = "episode,steps,seconds,steps_per_second";

pub(super) fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            env,
            episodes,
            seed,
            out,
            config,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let m = gen_data(&env, episodes, seed, &out, &cfg)?;
            let steps: usize = m.episodes.iter().map(|e| e.steps).sum();
            println!("wrote {} episodes ({steps} steps) to {}", m.episodes.len(), out.display());
        }
        Command::Pretrain {
            data,
            config,
            out,
            seed,
            resume,
            metrics,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let metrics = metrics.unwrap_or_else(|| sibling(&out, "metrics.csv"));
            let last = pretrain(&data, &cfg, &out, seed, resume.as_deref(), &metrics)?;
            println!(
                "pretrain done: epoch {} val contact mse {:.6} pearson {:.4}",
                last.epoch, last.val_contact_mse, last.val_pearson
            );
        }
        Command::Train {
            data,
            encoder,
            config,
            out,
            seed,
            freeze_encoder,
            metrics,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let metrics = metrics.unwrap_or_else(|| sibling(&out, "metrics.csv"));
            let (first, last) = train(&data, encoder.as_deref(), &cfg, &out, seed, freeze_encoder, &metrics)?;
            println!("train done: loss {first:.6} -> {last:.6} ({:.1}x)", first / last);
        }
        Command::Eval {
            policy,
            episodes,
            seed,
            report,
            max_steps,
        } => {
            let s = eval(&policy, episodes, seed, &report, max_steps.unwrap_or(DEFAULT_EVAL_STEPS))?;
            println!("{}", s.summary_line());
        }
        Command::Inspect {
            episode,
            step,
            out,
            encoder,
            config,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            if let Some(r) = inspect(&episode, step, &out, encoder.as_deref(), &cfg)? {
                println!("predicted vs ground-truth contact pearson {r:.4}");
            }
        }
        Command::BenchFk { links, points, seconds } => {
            println!("bench-fk links={links} points={points} seconds={seconds}");
            let r = bench_fk(links, points, seconds)?;
            println!("{} calls in {:.3}s: {:.2} calls/s", r.calls, r.elapsed, r.rate);
        }
    }
    Ok(())
}

const DEFAULT_EVAL_STEPS: usize = 120;

/// `<path>.<suffix>` next to `path`, e.g. `policy.ckpt.metrics.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub env_seed: u64,
    pub steps: usize,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub env: String,
    pub seed: u64,
    pub n_points: usize,
    pub da: usize,
    pub dh: usize,
    pub dt: f64,
    pub episodes: Vec<ManifestEntry>,
}

/// Episode `i` is the scripted expert from env seed `seed + i`.
pub fn gen_data(env: &str, episodes: usize, seed: u64, out: &Path, cfg: &RunConfig) -> Result<DatasetManifest> {
    if env != toyenv::TASK_NAME {
        return Err(Error::InvalidArgument(format!(
            "unknown env `{env}` (available: {})",
            toyenv::TASK_NAME
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let model = ToyHandModel::new(cfg.n_points)?;
    let crop = cfg.crop.map(Aabb::new).transpose()?;
    let mut manifest = DatasetManifest {
        env: env.to_string(),
        seed,
        n_points: cfg.n_points,
        da: toyenv::ARM_DIM,
        dh: toyenv::HAND_DIM,
        dt: toyenv::DT,
        episodes: Vec::with_capacity(episodes),
    };
    for i in 0..episodes {
        let env_seed = seed.wrapping_add(i as u64);
        let (pack, last) = toyenv::record_expert_episode(&model, env_seed, cfg.expert_max_steps, cfg.expert_noise)?;
        if let Some(b) = &crop {
            check_crop(&pack, b, env_seed)?;
        }
        let file = format!("episode_{i:04}.cvep");
        write_episode(&pack, &out.join(&file))?;
        manifest.episodes.push(ManifestEntry {
            file,
            env_seed,
            steps: pack.steps(),
            success: toyenv::success(&last),
        });
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_file(&out.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

fn check_crop(pack: &EpisodePack, b: &Aabb, env_seed: u64) -> Result<()> {
    for cloud in [&pack.object_pc, &pack.hand_pc] {
        for p in cloud.chunks_exact(3) {
            let p = [p[0] as f64, p[1] as f64, p[2] as f64];
            if !b.contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "episode with env seed {env_seed} leaves the crop box at {p:?}"
                )));
            }
        }
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<EpisodePack>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let packs = manifest
        .episodes
        .iter()
        .map(|e| {
            let p = read_episode(&dir.join(&e.file))?;
            if p.header.n_points != manifest.n_points || p.steps() != e.steps {
                return Err(Error::ShapeMismatch(format!("{} disagrees with the manifest", e.file)));
            }
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, packs))
}

fn load_training_data(dir: &Path, cfg: &RunConfig) -> Result<Vec<EpisodePack>> {
    let (manifest, packs) = read_dataset(dir)?;
    if packs.iter().all(|p| p.steps() == 0) {
        return Err(Error::InvalidArgument(format!("dataset {} has no steps", dir.display())));
    }
    if manifest.n_points != cfg.n_points {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} points per cloud, config expects {}",
            manifest.n_points, cfg.n_points
        )));
    }
    Ok(packs)
}

fn write_pretrain_metrics(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut s = String::from(EpochMetrics::CSV_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    write_file(path, s.as_bytes())
}

/// Pretrains on all but the last `val_episodes` episodes and returns the
/// final log row.
pub fn pretrain(
    data: &Path,
    cfg: &RunConfig,
    out: &Path,
    seed: u64,
    resume: Option<&Path>,
    metrics: &Path,
) -> Result<EpochMetrics> {
    let packs = load_training_data(data, cfg)?;
    if cfg.val_episodes == 0 || cfg.val_episodes >= packs.len() {
        return Err(Error::InvalidArgument(format!(
            "val_episodes must be in 1..{} for this dataset",
            packs.len()
        )));
    }
    let opts = cfg.pretrain_options(seed);
    let enc = cfg.encoder();
    let (mut state, norm) = match resume {
        Some(p) => {
            let (st, norm) = PretrainState::from_checkpoint(&Checkpoint::load(p)?, &opts)?;
            if st.net.config != enc {
                return Err(Error::ShapeMismatch("resumed checkpoint was trained with a different encoder config".into()));
            }
            (st, norm)
        }
        None => (PretrainState::new(enc.clone(), packs[0].header.da, packs[0].header.dh, &opts)?, fit_normalizer(&packs)?),
    };
    let split = packs.len() - cfg.val_episodes;
    let train = pretrain_samples::<f32>(&packs[..split], &norm, &enc, 1)?;
    let val = pretrain_samples::<f32>(&packs[split..], &norm, &enc, cfg.val_stride)?;
    run_pretrain(&mut state, &train, &val, &opts, |r, _| {
        eprintln!(
            "epoch {:>3} contact {:.6} coordination {:.6} val contact {:.6} pearson {:.4}",
            r.epoch, r.contact_mse, r.coordination_mse, r.val_contact_mse, r.val_pearson
        );
        Ok(())
    })?;
    state.to_checkpoint(&norm, &opts).save(out)?;
    write_pretrain_metrics(metrics, &state.history)?;
    state
        .history
        .last()
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("no epochs were run".into()))
}

fn same_architecture(a: &EncoderConfig, b: &EncoderConfig) -> bool {
    (a.n_points, a.d, a.heads, a.state_dim, a.horizon) == (b.n_points, b.d, b.heads, b.state_dim, b.horizon)
}

/// Trains a policy and returns the loss before training and after the last
/// epoch.
pub fn train(
    data: &Path,
    encoder: Option<&Path>,
    cfg: &RunConfig,
    out: &Path,
    seed: u64,
    freeze_encoder: bool,
    metrics: &Path,
) -> Result<(f64, f64)> {
    let packs = load_training_data(data, cfg)?;
    let (da, dh) = (packs[0].header.da, packs[0].header.dh);
    let (ckpt, enc, norm) = match encoder {
        Some(p) => {
            let (ckpt, enc, eda, edh, norm) = load_encoder_checkpoint(p)?;
            if !same_architecture(&enc, &cfg.encoder()) || (eda, edh) != (da, dh) {
                return Err(Error::ShapeMismatch(format!(
                    "encoder checkpoint {} does not match the config or dataset",
                    p.display()
                )));
            }
            (Some(ckpt), enc, norm)
        }
        None => (None, cfg.encoder(), fit_normalizer(&packs)?),
    };
    let opts = cfg.policy_options(seed, freeze_encoder);
    let dataset = PolicyDataset::build(&packs, &norm, &cfg.policy())?;
    let mut state = PolicyState::new(enc, da, dh, cfg.policy(), &opts, ckpt.as_ref())?;
    train_policy(&mut state, &dataset, &opts, |r| {
        eprintln!("epoch {:>4} loss {:.6}", r.epoch, r.loss);
        Ok(())
    })?;
    state.to_checkpoint(&norm, &opts, ckpt.is_some()).save(out)?;
    let mut s = String::from("epoch,loss\n");
    for r in &state.history {
        let _ = writeln!(s, "{},{:.8}", r.epoch, r.loss);
    }
    write_file(metrics, s.as_bytes())?;
    let first = state.history.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = state.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok((first, last))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub successes: usize,
    pub total_steps: usize,
    pub seconds: f64,
}

impl EvalSummary {
    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }

    pub fn steps_per_second(&self) -> f64 {
        if self.seconds > 0.0 {
            self.total_steps as f64 / self.seconds
        } else {
            0.0
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "success {}/{} ({:.3}), {} steps at {:.2} steps/s",
            self.successes,
            self.episodes,
            self.success_rate(),
            self.total_steps,
            self.steps_per_second()
        )
    }
}

/// Rollout `i` starts from env seed `seed + i`. The report holds only
/// seed-determined columns; wall-clock figures go to `<report>.timing.csv`.
pub fn eval(policy: &Path, episodes: usize, seed: u64, report: &Path, max_steps: usize) -> Result<EvalSummary> {
    let rt = PolicyRuntime::load(policy)?;
    if (rt.corr.da, rt.corr.dh) != (toyenv::ARM_DIM, toyenv::HAND_DIM) {
        return Err(Error::ShapeMismatch("policy was not trained on planar-push".into()));
    }
    let model = ToyHandModel::new(rt.corr.config.n_points)?;
    let mut seeds = component_rng(seed, RngStream::Eval);
    let mut csv = format!("{EVAL_CSV_HEADER}\n");
    let mut timing = format!("{TIMING_CSV_HEADER}\n");
    let mut summary = EvalSummary {
        episodes,
        successes: 0,
        total_steps: 0,
        seconds: 0.0,
    };
    for i in 0..episodes {
        let env_seed = seed.wrapping_add(i as u64);
        let sampler_seed: u64 = seeds.gen();
        let r = rt.rollout(&model, env_seed, max_steps, sampler_seed)?;
        let secs = r.wall_clock.last().copied().unwrap_or(0.0);
        let _ = writeln!(
            csv,
            "{i},{env_seed},{sampler_seed},{},{},{:.6}",
            r.success as u8,
            r.steps,
            r.final_distance()
        );
        let _ = writeln!(timing, "{i},{},{secs:.4},{:.3}", r.steps, r.step_rate());
        eprintln!(
            "episode {i} seed {env_seed}: success {} after {} steps ({:.1} steps/s)",
            r.success,
            r.steps,
            r.step_rate()
        );
        summary.successes += r.success as usize;
        summary.total_steps += r.steps;
        summary.seconds += secs;
    }
    write_file(report, csv.as_bytes())?;
    write_file(&report.with_extension("timing.csv"), timing.as_bytes())?;
    Ok(summary)
}

fn write_cloud_csv(path: &Path, cloud: &PointSet, extra: &[(&str, &[f64])]) -> Result<()> {
    let mut s = String::from("x,y,z");
    for (name, _) in extra {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(s, "{:.6},{:.6},{:.6}", p[0], p[1], p[2]);
        for (_, col) in extra {
            let _ = write!(s, ",{:.6}", col[i]);
        }
        s.push('\n');
    }
    write_file(path, s.as_bytes())
}

/// Writes `<out>_object.csv` (with ground-truth and optionally predicted
/// contact) and `<out>_hand.csv`. Returns the predicted-vs-true Pearson r
/// when an encoder is given.
pub fn inspect(episode: &Path, step: usize, out: &Path, encoder: Option<&Path>, cfg: &RunConfig) -> Result<Option<f64>> {
    let pack = read_episode(episode)?;
    if step >= pack.steps() {
        return Err(Error::InvalidArgument(format!(
            "step {step} out of range, episode has {} steps",
            pack.steps()
        )));
    }
    let obs = pack.observation(step)?;
    let truth = ground_truth_contact(&obs.obj_pc, &obs.hand_pc, NORMAL_K, cfg.gamma, cfg.theta)?.into_values();
    let predicted = match encoder {
        None => None,
        Some(p) => {
            let (ckpt, enc, da, dh, norm) = load_encoder_checkpoint(p)?;
            if enc.n_points != pack.header.n_points || (da, dh) != (pack.header.da, pack.header.dh) {
                return Err(Error::ShapeMismatch("encoder does not match the episode".into()));
            }
            let mut store = ParamStore::<f32>::new();
            let net = CorrNet::new(&mut store, "corr", enc, da, dh, &mut ChaCha8Rng::seed_from_u64(0))?;
            ckpt.load_params(&mut store)?;
            let f = FrameTensors::<f32>::from_observation(&obs, &norm)?;
            let mut g = Graph::with_params(&store);
            let vars = [f.obj, f.hand, f.arm, f.hand_state].map(|t| g.constant(t));
            let fv = net.features(&mut g, vars[0], vars[1], vars[2], vars[3])?;
            let c = net.predict_contact(&mut g, &fv)?;
            Some(g.value(c).to_f64_vec())
        }
    };
    let mut cols: Vec<(&str, &[f64])> = vec![("contact", &truth)];
    if let Some(p) = &predicted {
        cols.push(("predicted", p));
    }
    write_cloud_csv(&sibling_name(out, "_object.csv"), &obs.obj_pc, &cols)?;
    write_cloud_csv(&sibling_name(out, "_hand.csv"), &obs.hand_pc, &[])?;
    Ok(predicted.map(|p| pearson(&p, &truth)))
}

fn sibling_name(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub calls: usize,
    pub elapsed: f64,
    pub rate: f64,
}

/// Calls point-cloud FK on a `links`-link serial chain with fresh random
/// joints each call until `seconds` have passed (at least once).
pub fn bench_fk(links: usize, points: usize, seconds: f64) -> Result<BenchReport> {
    if links == 0 || points == 0 || !(seconds >= 0.0) {
        return Err(Error::InvalidArgument("links and points must be positive, seconds >= 0".into()));
    }
    let chain = serial_test_chain(links);
    let samples = sample_chain_surfaces(&chain, points, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let start = Instant::now();
    let mut calls = 0;
    while calls == 0 || start.elapsed().as_secs_f64() < seconds {
        let q: Vec<f64> = chain.joints().iter().map(|j| rng.gen_range(j.limits[0]..=j.limits[1])).collect();
        let cloud = fk_pointcloud(&chain, &JointVector::new(&chain, &q)?, &samples, None, points)?;
        std::hint::black_box(cloud);
        calls += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        calls,
        elapsed,
        rate: calls as f64 / elapsed,
    })
}
