use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use si_core::eval::{score_histogram, sparsity_reports, write_histogram_csv, write_sparsity_csv};
use si_core::importance::{benchmark_refresh, CalibSet};
use si_core::induction::{induce as run_induction, write_trace_csv, Induction, SiConfig, Stage};
use si_core::masking::masks_to_tensor_file;
use si_core::model::{build_toy_model, Model, Tensor, TensorFile, ToySpec};
use si_core::pipeline::{apply_masks, compare_pipelines, layer_scores, prune_model, score_contexts};
use si_core::reparam::{absorb, Transforms};

use crate::config::{ConfigError, PipelineConfig};

/// Name of the calibration tensor inside a calibration file.
pub const CALIB_TENSOR: &str = "calib";

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Core(si_core::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<si_core::Error> for CliError {
    fn from(e: si_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// `error kind=<kind> [key=<key>] message="<escaped>"` on one line.
    pub fn line(&self) -> String {
        match self {
            CliError::Config(e) => format!("error kind=config key={} message={:?}", e.key, e.message),
            CliError::Core(e) => format!("error kind={} message={:?}", e.kind(), e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn out_path(cfg: &PipelineConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.join(name))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn report(path: &Path) {
    println!("wrote {}", path.display());
}

/// The configured model; toy models are rounded through f32 so they match
/// what `make-toy` writes.
fn load_model(cfg: &PipelineConfig) -> Result<Model> {
    match &cfg.model {
        Some(path) => Ok(Model::load(path)?),
        None => {
            let spec = ToySpec {
                depth: cfg.toy.depth,
                d_model: cfg.toy.d_model,
                d_hidden: cfg.toy.d_hidden,
                seed: cfg.seed,
            };
            Ok(build_toy_model(&spec)?.quantized_f32()?)
        }
    }
}

fn load_calib(cfg: &PipelineConfig, model: &Model) -> Result<CalibSet> {
    let calib = match &cfg.calib {
        Some(path) => {
            let file = TensorFile::load(path)?;
            let t = file.get(CALIB_TENSOR).ok_or_else(|| ConfigError {
                key: "calib".into(),
                message: format!("{} has no `{CALIB_TENSOR}` tensor", path.display()),
            })?;
            CalibSet::new(t.to_matrix()?)
        }
        None => CalibSet::synthetic(model.input_dim(), cfg.calib_synth, cfg.seed)?,
    };
    if calib.dim() != model.input_dim() {
        return Err(ConfigError {
            key: "calib".into(),
            message: format!(
                "calibration has {} channels but the model expects {}",
                calib.dim(),
                model.input_dim()
            ),
        }
        .into());
    }
    Ok(calib)
}

fn si_config(cfg: &PipelineConfig, fallback: Option<Stage>) -> Result<Option<SiConfig>> {
    let Some(stage) = cfg.stage_or(fallback) else {
        return Ok(None);
    };
    let si = SiConfig {
        stage,
        ..cfg.si.clone()
    };
    si.validate().map_err(|e| ConfigError {
        key: "si".into(),
        message: e.to_string(),
    })?;
    Ok(Some(si))
}

pub fn make_toy(cfg: &PipelineConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let path = out_path(cfg, "model.sif")?;
    model.save(&path)?;
    report(&path);

    let calib = CalibSet::synthetic(model.input_dim(), cfg.calib_synth, cfg.seed)?;
    let mut file = TensorFile::default();
    file.push(CALIB_TENSOR, Tensor::from_matrix(calib.x())?)?;
    let path = out_path(cfg, "calib.sif")?;
    file.save(&path)?;
    report(&path);
    Ok(())
}

fn write_induction_meta(path: &Path, cfg: &PipelineConfig, si: &SiConfig, ind: &Induction) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "si.stage = {}", si.stage)?;
    writeln!(w, "pattern = {}", cfg.pattern)?;
    writeln!(w, "metric = {}", cfg.metric)?;
    writeln!(w, "seed = {}", cfg.seed)?;
    writeln!(w, "initial_objective = {}", ind.initial_objective)?;
    writeln!(w, "final_objective = {}", ind.final_objective)?;
    if si.stage != Stage::Distribution {
        writeln!(
            w,
            "# initial scales are floored at si.eps_init so every scale stays strictly positive"
        )?;
        writeln!(w, "si.eps_init = {}", si.feature.eps_init)?;
    }
    w.flush()?;
    Ok(())
}

pub fn induce(cfg: &PipelineConfig) -> Result<()> {
    let si = si_config(cfg, Some(Stage::Distribution))?.ok_or_else(|| ConfigError {
        key: "si.stage".into(),
        message: "induce needs a stage other than off".into(),
    })?;
    let model = load_model(cfg)?;
    let calib = load_calib(cfg, &model)?;
    let ind = run_induction(&model, &calib, &cfg.pattern, cfg.metric, &si)?;

    let path = out_path(cfg, "absorbed.sif")?;
    absorb(&model, &ind.transforms)?.save(&path)?;
    report(&path);
    let path = out_path(cfg, "transforms.sif")?;
    ind.transforms.to_tensor_file()?.save(&path)?;
    report(&path);
    let path = out_path(cfg, "masks.sif")?;
    masks_to_tensor_file(&ind.masks)?.save(&path)?;
    report(&path);
    let path = out_path(cfg, "trace.csv")?;
    write_trace_csv(create(&path)?, &ind.trace)?;
    report(&path);
    let path = out_path(cfg, "induce_meta.txt")?;
    write_induction_meta(&path, cfg, &si, &ind)?;
    report(&path);
    println!(
        "objective {} -> {}",
        ind.initial_objective, ind.final_objective
    );
    Ok(())
}

pub fn prune(cfg: &PipelineConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let calib = load_calib(cfg, &model)?;
    let (pruned, masks) = match si_config(cfg, None)? {
        None => {
            let p = prune_model(&model, &calib, &cfg.pattern, cfg.metric)?;
            (p.model, p.masks)
        }
        Some(si) => {
            let ind = run_induction(&model, &calib, &cfg.pattern, cfg.metric, &si)?;
            let absorbed = absorb(&model, &ind.transforms)?;
            (apply_masks(&absorbed, &ind.masks)?, ind.masks)
        }
    };
    let path = out_path(cfg, "pruned.sif")?;
    pruned.save(&path)?;
    report(&path);
    let path = out_path(cfg, "masks.sif")?;
    masks_to_tensor_file(&masks)?.save(&path)?;
    report(&path);
    let path = out_path(cfg, "sparsity.csv")?;
    write_sparsity_csv(create(&path)?, &sparsity_reports(&masks, &cfg.pattern))?;
    report(&path);
    Ok(())
}

pub fn eval(cfg: &PipelineConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let calib = load_calib(cfg, &model)?;
    let si = si_config(cfg, Some(Stage::Distribution))?;
    let cmp = compare_pipelines(&model, &calib, &cfg.pattern, cfg.metric, si.as_ref())?;

    let path = out_path(cfg, "distortion.csv")?;
    cmp.write_csv(create(&path)?)?;
    report(&path);

    let contexts = score_contexts(&model, &calib)?;
    let identity = Transforms::identity_for(&model);
    let mut histograms = Vec::new();
    for layer in model.ordered_layers() {
        let plain = layer_scores(layer, &contexts, cfg.metric, &identity)?;
        let induced = match si {
            Some(_) => Some(layer_scores(layer, &contexts, cfg.metric, &cmp.induced.transforms)?),
            None => None,
        };
        for (key, scores) in plain {
            histograms.push((format!("{key}/no_si"), score_histogram(&scores, cfg.bins)?));
        }
        for (key, scores) in induced.into_iter().flatten() {
            histograms.push((format!("{key}/si"), score_histogram(&scores, cfg.bins)?));
        }
    }
    let path = out_path(cfg, "histograms.csv")?;
    write_histogram_csv(create(&path)?, &histograms)?;
    report(&path);
    println!(
        "total distortion {} -> {} (ratio {})",
        cmp.baseline.total.frob, cmp.induced.total.frob, cmp.ratio
    );
    Ok(())
}

pub fn bench(cfg: &PipelineConfig) -> Result<()> {
    let b = benchmark_refresh(cfg.bench_d_in, cfg.bench_n_samples, cfg.bench_iters, cfg.seed)?;
    let path = out_path(cfg, "bench.csv")?;
    let mut w = create(&path)?;
    writeln!(w, "method,update_time_s,avg_time_per_iter_s,speedup")?;
    writeln!(w, "classical,{},{},1", b.classical_total_s, b.classical_per_iter_s())?;
    writeln!(w, "fast,{},{},{}", b.fast_total_s, b.fast_per_iter_s(), b.speedup())?;
    w.flush()?;
    report(&path);
    println!(
        "d_in {} n {} iters {}: speedup {:.1}x",
        b.d_in, b.n_samples, b.iters, b.speedup()
    );
    Ok(())
}
