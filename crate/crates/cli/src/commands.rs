use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fcdd::data::{
    convert_channels, load_dataset, load_image, load_image_dir, save_dataset, synth_scenario, AugmentPolicy,
    ChannelStats, ColorMode, ConfettiConfig, Dataset, Sample, Scenario, ScenarioConfig,
};
use fcdd::eval::{
    balanced_reference, evaluate, gradient_heatmap, infer, normalize_heatmaps, prepare_batch, render,
    write_scores_csv, EvalOptions, PixelAucMode,
};
use fcdd::loss::LossMode;
use fcdd::model::{preset, receptive_field, ArchitectureSpec, FcnModel, InputShape, LayerSpec, PresetOptions};
use fcdd::numerics::{Checkpoint, Tensor};
use fcdd::train::{
    resume, train, training_checkpoint, DecayMode, OptimizerConfig, Schedule, TrainConfig,
};
use fcdd::upsample::UpsamplePlan;
use fcdd::{FcddError, Result};

use crate::config::RunConfig;

const MODEL_FILE: &str = "model.ckpt";
const ARCH_FILE: &str = "model.arch";
const LOG_FILE: &str = "train_log.csv";
pub const DEFAULT_ETA: f64 = 0.97;

/// Prints a line to stdout; a closed pipe is not an error.
pub fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn config_error(msg: impl Into<String>) -> FcddError {
    FcddError::Config(msg.into())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| FcddError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| FcddError::io(path, e))
}

const ARCH_KEYS: [&str; 4] = ["arch", "preset", "preset.kernel", "preset.width"];

fn architecture(cfg: &RunConfig) -> Result<ArchitectureSpec> {
    match (cfg.get("arch"), cfg.get("preset")) {
        (Some(_), Some(_)) => Err(config_error("set either 'arch' or 'preset', not both")),
        (Some(_), None) => {
            let path = cfg.existing_path("arch")?;
            let text = fs::read_to_string(&path).map_err(|e| FcddError::io(&path, e))?;
            ArchitectureSpec::parse(&text, None)
        }
        (None, Some(name)) => preset(
            name,
            PresetOptions {
                kernel: cfg.opt("preset.kernel")?,
                width: cfg.opt("preset.width")?,
            },
        ),
        (None, None) => Err(config_error("missing required key 'arch' or 'preset'")),
    }
}

const TRAIN_KEYS: [&str; 36] = [
    "train.root",
    "oe.root",
    "output",
    "resume",
    "seed",
    "loss",
    "epochs",
    "batch_size",
    "optimizer",
    "lr",
    "momentum",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "decay_mode",
    "schedule",
    "schedule.factor",
    "schedule.milestones",
    "oe.probability",
    "anomaly_repeat",
    "confetti.count_min",
    "confetti.count_max",
    "confetti.side_min",
    "confetti.side_max",
    "confetti.color",
    "confetti.shift_min",
    "confetti.shift_max",
    "augment.jitter",
    "augment.crop",
    "augment.crop_padding",
    "augment.flip",
    "augment.noise",
    "normalize",
    "upsample.sigma",
    "checkpoint_every",
];

fn confetti_config(cfg: &RunConfig, prefix: &str, default: ConfettiConfig) -> Result<ConfettiConfig> {
    let key = |k: &str| format!("{prefix}.{k}");
    let color = match cfg.get(&key("color")) {
        None => default.color,
        Some("uniform") => ColorMode::UniformRgb,
        Some("shift") => {
            let (min, max) = match default.color {
                ColorMode::IntensityShift { min, max } => (min, max),
                ColorMode::UniformRgb => (0.2, 0.4),
            };
            ColorMode::IntensityShift {
                min: cfg.parse_or(&key("shift_min"), min)?,
                max: cfg.parse_or(&key("shift_max"), max)?,
            }
        }
        Some(other) => return Err(config_error(format!("key '{prefix}.color': expected uniform or shift, got '{other}'"))),
    };
    Ok(ConfettiConfig {
        count: (
            cfg.parse_or(&key("count_min"), default.count.0)?,
            cfg.parse_or(&key("count_max"), default.count.1)?,
        ),
        side: (
            cfg.parse_or(&key("side_min"), default.side.0)?,
            cfg.parse_or(&key("side_max"), default.side.1)?,
        ),
        color,
        seed: default.seed,
    })
}

fn train_config(cfg: &RunConfig, default_sigma: f64, out: &Path) -> Result<TrainConfig> {
    let lr = cfg.parse_or("lr", 1e-3)?;
    let mut optimizer = match cfg.get("optimizer").unwrap_or("adam") {
        "adam" => OptimizerConfig::adam(lr),
        "sgd" => OptimizerConfig::sgd(lr),
        other => return Err(config_error(format!("key 'optimizer': expected adam or sgd, got '{other}'"))),
    };
    optimizer.momentum = cfg.parse_or("momentum", optimizer.momentum)?;
    optimizer.betas = (cfg.parse_or("beta1", 0.9)?, cfg.parse_or("beta2", 0.999)?);
    optimizer.eps = cfg.parse_or("eps", optimizer.eps)?;
    optimizer.weight_decay = cfg.parse_or("weight_decay", 0.0)?;
    optimizer.decay_mode = match cfg.get("decay_mode").unwrap_or("decoupled") {
        "decoupled" => DecayMode::Decoupled,
        "coupled" => DecayMode::Coupled,
        other => return Err(config_error(format!("key 'decay_mode': unknown value '{other}'"))),
    };
    optimizer.schedule = match cfg.get("schedule").unwrap_or("exponential") {
        "exponential" => Schedule::Exponential(cfg.parse_or("schedule.factor", 1.0)?),
        "milestones" => Schedule::Milestones(cfg.list("schedule.milestones")?),
        other => return Err(config_error(format!("key 'schedule': unknown value '{other}'"))),
    };
    let crop = match cfg.opt::<usize>("augment.crop")? {
        Some(size) => Some((size, cfg.parse_or("augment.crop_padding", 0)?)),
        None => None,
    };
    Ok(TrainConfig {
        epochs: cfg.parse_or("epochs", 10)?,
        batch_size: cfg.parse_or("batch_size", 32)?,
        loss: LossMode::from_name(cfg.get("loss").unwrap_or("fcdd")).map_err(|e| config_error(format!("key 'loss': {e}")))?,
        optimizer,
        oe_probability: cfg.parse_or("oe.probability", 0.5)?,
        anomaly_repeat: cfg.parse_or("anomaly_repeat", 1)?,
        confetti: confetti_config(cfg, "confetti", ConfettiConfig::default())?,
        augment: AugmentPolicy {
            jitter: cfg.parse_or("augment.jitter", 0.0)?,
            crop,
            flip: cfg.parse_or("augment.flip", 0.0)?,
            noise_std: cfg.parse_or("augment.noise", 0.0)?,
            normalize: None,
        },
        normalize: cfg.flag("normalize", true)?,
        sigma: cfg.parse_or("upsample.sigma", default_sigma)?,
        seed: cfg.parse_or("seed", 0)?,
        checkpoint_every: cfg.parse_or("checkpoint_every", 0)?,
        checkpoint_dir: Some(out.to_path_buf()),
    })
}

fn default_sigma(cfg: &RunConfig) -> f64 {
    match cfg.get("preset").and_then(|p| fcdd::model::Preset::from_name(p).ok()) {
        Some(p) => p.default_sigma(),
        None => 1.2,
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let mut allowed: Vec<&str> = TRAIN_KEYS.to_vec();
    allowed.extend(ARCH_KEYS);
    cfg.check_keys(&allowed)?;
    let spec = architecture(cfg)?;
    let train_root = cfg.existing_path("train.root")?;
    let oe_root = cfg.optional_existing_path("oe.root")?;
    let resume_from = cfg.optional_existing_path("resume")?;
    let out = PathBuf::from(cfg.require("output")?);
    let tc = train_config(cfg, default_sigma(cfg), &out)?;
    tc.validate()?;

    let data = load_dataset(&train_root)?;
    let Some([c, _, _]) = data.image_shape()? else {
        return Err(config_error(format!("key 'train.root': dataset at '{}' is empty", train_root.display())));
    };
    if c != spec.input().channels {
        return Err(config_error(format!(
            "training images have {c} channels, the architecture expects {}",
            spec.input().channels
        )));
    }
    let oe = match oe_root {
        Some(root) => {
            let mut d = if root.join(fcdd::data::INDEX_FILE).exists() {
                load_dataset(&root)?
            } else {
                load_image_dir(&root)?
            };
            for s in &mut d.samples {
                s.image = convert_channels(&s.image, c)?;
                s.label = true;
            }
            d
        }
        None => Dataset::default(),
    };

    create_dir(&out)?;
    write(&out.join(ARCH_FILE), &spec.to_text())?;
    let model_seed = fcdd::data::stream_seed(tc.seed, &[0x4d4f_4445]);
    let mut model = FcnModel::<f32>::build(&spec, model_seed)?;
    let outcome = match resume_from {
        Some(path) => resume(&mut model, &Checkpoint::load(&path)?, &data, &oe, &tc)?,
        None => train(&mut model, &data, &oe, &tc)?,
    };
    training_checkpoint(&model, &outcome.optim, outcome.stats.as_ref(), &outcome.log).save(&out.join(MODEL_FILE))?;
    outcome.log.write(&out.join(LOG_FILE))?;
    if let Some(last) = outcome.log.rows.last() {
        emit(&format!("epochs={} final_loss={:.6}", last.epoch, last.loss));
    }
    emit(&format!("checkpoint={}", out.join(MODEL_FILE).display()));
    Ok(())
}

/// Architecture sidecar for a checkpoint: `<name>.arch`, else `model.arch` in
/// the same directory.
fn arch_for(checkpoint: &Path) -> Result<ArchitectureSpec> {
    let own = checkpoint.with_extension("arch");
    let shared = checkpoint.with_file_name(ARCH_FILE);
    let path = [own, shared]
        .into_iter()
        .find(|p| p.exists())
        .ok_or_else(|| config_error(format!("no architecture file next to '{}'", checkpoint.display())))?;
    let text = fs::read_to_string(&path).map_err(|e| FcddError::io(&path, e))?;
    ArchitectureSpec::parse(&text, None)
}

fn load_model(checkpoint: &Path) -> Result<(FcnModel<f32>, Option<ChannelStats>)> {
    if !checkpoint.exists() {
        return Err(config_error(format!("checkpoint '{}' does not exist", checkpoint.display())));
    }
    let spec = arch_for(checkpoint)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = FcnModel::from_checkpoint(&spec, &ck)?;
    Ok((model, fcdd::train::load_stats(&ck)?))
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub test_root: PathBuf,
    pub sigma: Option<f64>,
    pub pixel_mode: String,
    pub scores: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub batch_size: usize,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (mut model, stats) = load_model(&args.checkpoint)?;
    if !args.test_root.exists() {
        return Err(config_error(format!("test root '{}' does not exist", args.test_root.display())));
    }
    let test = load_dataset(&args.test_root)?;
    let opts = EvalOptions {
        stats,
        sigma: args.sigma.unwrap_or(1.2),
        batch_size: args.batch_size,
        pixel_mode: PixelAucMode::from_name(&args.pixel_mode)?,
    };
    let ev = evaluate(&mut model, &test, &opts)?;
    let report = ev.report();
    emit(report.to_text().trim_end());
    if let Some(p) = &args.report {
        report.write(p)?;
    }
    if let Some(p) = &args.scores {
        write_scores_csv(p, &test.samples, &ev.scores)?;
    }
    Ok(())
}

/// Normalization reference for `heatmap`.
pub enum Reference {
    /// Each map is its own reference.
    SelfMap,
    /// All inputs pooled.
    Inputs,
    /// Balanced subset of a labeled dataset.
    Dataset(PathBuf),
}

impl Reference {
    pub fn parse(s: &str) -> Self {
        match s {
            "self" => Reference::SelfMap,
            "inputs" => Reference::Inputs,
            path => Reference::Dataset(PathBuf::from(path)),
        }
    }
}

pub struct HeatmapArgs {
    pub checkpoint: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    pub eta: f64,
    pub sigma: Option<f64>,
    pub reference: Reference,
    pub gradient: bool,
    pub seed: u64,
}

fn gather_inputs(paths: &[PathBuf], channels: usize) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for p in paths {
        if p.is_dir() {
            for mut s in load_image_dir(p)?.samples {
                s.image = convert_channels(&s.image, channels)?;
                s.label = false;
                samples.push(s);
            }
        } else {
            let image = convert_channels(&load_image(p)?, channels)?;
            let id = p
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            samples.push(Sample::new(id, image, false, None)?);
        }
    }
    if samples.is_empty() {
        return Err(FcddError::Usage("no input images".into()));
    }
    Ok(samples)
}

/// Full-resolution maps `[n,1,h,w]`: upsampled `A`, or the gradient baseline.
fn full_res_maps(
    model: &mut FcnModel<f32>,
    samples: &[Sample],
    stats: Option<&ChannelStats>,
    sigma: f64,
    gradient: bool,
) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    for s in samples {
        let one = std::slice::from_ref(s);
        let map = if gradient {
            let x: Tensor<f32> = prepare_batch(one, stats)?;
            gradient_heatmap(model, &x, Some(sigma))?
        } else {
            let a = infer(model, one, stats, 1)?;
            let [_, _, u, v] = a.dims4()?;
            let (h, w) = s.size();
            UpsamplePlan::new(&model.receptive_field(), sigma, (u, v), (h, w))?.apply(&a)?
        };
        parts.push(map);
    }
    Tensor::concat(&parts)
}

/// Raw map dump: `h`, `w`, `count` as little-endian u32, then `count` f32.
pub fn write_raw(path: &Path, map: &[f32], h: usize, w: usize) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 4 * map.len());
    for v in [h, w, map.len()] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in map {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| FcddError::io(path, e))
}

pub fn cmd_heatmap(args: &HeatmapArgs) -> Result<()> {
    let (mut model, stats) = load_model(&args.checkpoint)?;
    let channels = model.spec().input().channels;
    let samples = gather_inputs(&args.inputs, channels)?;
    let sigma = args.sigma.unwrap_or(1.2);
    let maps = full_res_maps(&mut model, &samples, stats.as_ref(), sigma, args.gradient)?;
    let reference = match &args.reference {
        Reference::SelfMap => None,
        Reference::Inputs => Some(maps.clone()),
        Reference::Dataset(root) => {
            let data = load_dataset(root)?;
            let idx = balanced_reference(&data.labels(), args.seed);
            if idx.is_empty() {
                return Err(config_error("reference dataset needs both nominal and anomalous samples"));
            }
            let picked: Vec<Sample> = idx.iter().map(|&i| data.samples[i].clone()).collect();
            Some(full_res_maps(&mut model, &picked, stats.as_ref(), sigma, args.gradient)?)
        }
    };
    create_dir(&args.out)?;
    let [n, _, h, w] = maps.dims4()?;
    for i in 0..n {
        let map = maps.select(i);
        let normalized = match &reference {
            None => normalize_heatmaps(&map, args.eta, &map)?,
            Some(r) => normalize_heatmaps(&map, args.eta, r)?,
        };
        let stem = Path::new(&samples[i].id)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{i:05}"));
        render(normalized.data(), h, w, &args.out.join(format!("{stem}.ppm")))?;
        write_raw(&args.out.join(format!("{stem}.raw")), map.data(), h, w)?;
        emit(&format!("{stem}: score_map_max={:.6}", map.data().iter().copied().fold(0.0f32, f32::max)));
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| FcddError::Usage(format!("input size must be HxW, got '{s}'")))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| FcddError::Usage(format!("input size must be HxW, got '{s}'")))
    };
    Ok((parse(h)?, parse(w)?))
}

pub fn cmd_rfinfo(arch: Option<&Path>, preset_name: Option<&str>, kernel: Option<usize>, input: Option<&str>) -> Result<String> {
    let size = input.map(parse_size).transpose()?;
    let spec = match (arch, preset_name) {
        (Some(path), None) => {
            let text = fs::read_to_string(path).map_err(|e| FcddError::io(path, e))?;
            let (layers, declared) = ArchitectureSpec::parse_parts(&text)?;
            let input = match (declared, size) {
                (Some(d), Some((h, w))) => InputShape::new(d.channels, h, w),
                (Some(d), None) => d,
                (None, Some((h, w))) => {
                    let c = layers
                        .iter()
                        .find_map(|l| match l {
                            LayerSpec::Conv { in_channels, .. } => Some(*in_channels),
                            _ => None,
                        })
                        .unwrap_or(1);
                    InputShape::new(c, h, w)
                }
                (None, None) => {
                    return Err(config_error("architecture has no 'input' line; pass --input HxW"))
                }
            };
            ArchitectureSpec::new(layers, input)?
        }
        (None, Some(name)) => preset(name, PresetOptions { kernel, width: None })?,
        _ => return Err(FcddError::Usage("give exactly one of an architecture file or --preset".into())),
    };
    let spec = match size {
        Some((h, w)) => spec.with_input_size(h, w)?,
        None => spec,
    };
    let rf = receptive_field(&spec);
    let (u, v) = spec.output_size()?;
    let inp = spec.input();
    Ok(format!(
        "rf_size={} stride={} center_offset=({},{}) input={}x{} output={u}x{v} params={}",
        rf.rf_size,
        rf.cumulative_stride,
        rf.center_offset.0,
        rf.center_offset.1,
        inp.height,
        inp.width,
        spec.parameter_count()
    ))
}

const SYNTH_KEYS: [&str; 28] = [
    "scenario",
    "output",
    "seed",
    "image_size",
    "channels",
    "train_nominal",
    "train_anomalous",
    "test_nominal",
    "test_anomalous",
    "texture.frequency_min",
    "texture.frequency_max",
    "texture.orientation",
    "texture.orientation_jitter",
    "texture.stripe_amplitude",
    "texture.noise_amplitude",
    "texture.noise_cells",
    "texture.grain",
    "defect.count_min",
    "defect.count_max",
    "defect.side_min",
    "defect.side_max",
    "defect.color",
    "defect.shift_min",
    "defect.shift_max",
    "watermark.correlation",
    "watermark.test_correlation",
    "watermark.glyph_size",
    "watermark.object_offset",
];

pub fn scenario_config(cfg: &RunConfig) -> Result<ScenarioConfig> {
    let mut sc = match cfg.get("scenario").unwrap_or("texture") {
        "texture" => ScenarioConfig::texture(),
        "watermark" => ScenarioConfig::watermark(),
        other => return Err(config_error(format!("key 'scenario': expected texture or watermark, got '{other}'"))),
    };
    sc.seed = cfg.parse_or("seed", 0)?;
    sc.image_size = cfg.parse_or("image_size", sc.image_size)?;
    sc.channels = cfg.parse_or("channels", sc.channels)?;
    sc.train_nominal = cfg.parse_or("train_nominal", sc.train_nominal)?;
    sc.train_anomalous = cfg.parse_or("train_anomalous", sc.train_anomalous)?;
    sc.test_nominal = cfg.parse_or("test_nominal", sc.test_nominal)?;
    sc.test_anomalous = cfg.parse_or("test_anomalous", sc.test_anomalous)?;
    match &mut sc.scenario {
        Scenario::Texture(t) => {
            t.frequency = (
                cfg.parse_or("texture.frequency_min", t.frequency.0)?,
                cfg.parse_or("texture.frequency_max", t.frequency.1)?,
            );
            t.orientation = cfg.parse_or("texture.orientation", t.orientation)?;
            t.orientation_jitter = cfg.parse_or("texture.orientation_jitter", t.orientation_jitter)?;
            t.stripe_amplitude = cfg.parse_or("texture.stripe_amplitude", t.stripe_amplitude)?;
            t.noise_amplitude = cfg.parse_or("texture.noise_amplitude", t.noise_amplitude)?;
            t.noise_cells = cfg.parse_or("texture.noise_cells", t.noise_cells)?;
            t.grain = cfg.parse_or("texture.grain", t.grain)?;
            t.defect = confetti_config(cfg, "defect", t.defect)?;
        }
        Scenario::Watermark(p) => {
            p.correlation = cfg.parse_or("watermark.correlation", p.correlation)?;
            p.test_correlation = cfg.parse_or("watermark.test_correlation", p.test_correlation)?;
            p.glyph_size = cfg.parse_or("watermark.glyph_size", p.glyph_size)?;
            p.object_offset = cfg.parse_or("watermark.object_offset", p.object_offset)?;
        }
    }
    Ok(sc)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    cfg.check_keys(&SYNTH_KEYS)?;
    let out = PathBuf::from(cfg.require("output")?);
    let sc = scenario_config(cfg)?;
    let (train_set, test_set) = synth_scenario(&sc)?;
    save_dataset(&out.join("train"), &train_set)?;
    save_dataset(&out.join("test"), &test_set)?;
    emit(&format!("train={} test={} dir={}", train_set.len(), test_set.len(), out.display()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rfinfo_two_strided_convs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.arch");
        write(&p, "input c=1 h=16 w=16\nconv in=1 out=2 k=3 s=2 p=1\nconv in=2 out=1 k=3 s=2 p=1\n").unwrap();
        let line = cmd_rfinfo(Some(&p), None, None, None).unwrap();
        assert!(line.starts_with("rf_size=7 stride=4"), "{line}");
    }

    #[test]
    fn raw_dump_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.raw");
        write_raw(&p, &[0.5, 1.0], 1, 2).unwrap();
        let b = fs::read(&p).unwrap();
        assert_eq!(&b[..12], &[1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(f32::from_le_bytes(b[16..20].try_into().unwrap()), 1.0);
    }
}
