//! End-to-end runs: data preparation, the training loop, evaluation,
//! parameter accounting, the λ sweep and classification maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{
    adapter_storage_bytes, attach, bytes_to_mb, bytes_to_mib, count_trainable_params, fuse, AdapterSpec, Method,
};
use crate::checkpoint::{adapter_checkpoint, full_checkpoint, load_adapters, load_full_model, Checkpoint};
use crate::config::{DataSource, RunConfig, Stream};
use crate::error::{Error, Result};
use crate::hsi::{augment, build_split, synth_cube, HsiCube, PatchSource, Pixel, SplitTable};
use crate::metrics::{ConfusionMatrix, Report};
use crate::model::{ModelConfig, VitModel};
use crate::optim::AdamW;

/// The cube, its split and the fitted patch pipeline.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: SplitTable,
    pub source: PatchSource,
    pub n_classes: usize,
}

pub fn load_cube(cfg: &RunConfig) -> Result<HsiCube> {
    match &cfg.data {
        DataSource::Files { cube, labels } => {
            for p in [cube, labels] {
                if !p.exists() {
                    return Err(Error::Data(format!("{} does not exist", p.display())));
                }
            }
            HsiCube::read(cube, labels)
        }
        DataSource::Synth(s) => synth_cube(s.height, s.width, s.bands, s.classes, s.noise_std, s.seed),
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<PreparedData> {
    let cube = load_cube(cfg)?;
    let n_classes = cube.check_labels()?;
    let split = match &cfg.split_file {
        Some(p) => {
            let split = SplitTable::read(p)?;
            split.validate(&cube)?;
            split
        }
        None => build_split(&cube, &cfg.train_counts.resolve(n_classes)?, cfg.stream_seed(Stream::Split))?,
    };
    if split.test.is_empty() {
        log::warn!("the test split is empty; metrics will be unavailable");
    }
    let source = PatchSource::fit(&cube, &split, cfg.pipeline.clone())?;
    Ok(PreparedData {
        split,
        source,
        n_classes,
    })
}

/// Freshly initialized backbone with the run's adapters attached.
pub fn build_model(cfg: &RunConfig, n_classes: usize) -> Result<VitModel<f32>> {
    let mut model = VitModel::new(cfg.model_config(n_classes)?, cfg.stream_seed(Stream::Backbone))?;
    if cfg.method() != Method::Full {
        attach(&mut model, &cfg.adapter, cfg.stream_seed(Stream::Adapter))?;
    }
    Ok(model)
}

/// Meta sections that let a checkpoint rebuild its frozen backbone.
fn base_meta(cfg: &RunConfig) -> String {
    format!("[base]\nseed = {}\n", cfg.stream_seed(Stream::Backbone))
}

/// Rebuilds the model a checkpoint was trained from and loads its weights.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<VitModel<f32>> {
    if ckpt.is_full_model() && ckpt.meta_ini()?.get("base", "seed").is_none() {
        return load_full_model(ckpt);
    }
    let config = ckpt.model_config()?;
    let seed: u64 = ckpt
        .meta_ini()?
        .get("base", "seed")
        .ok_or_else(|| Error::Checkpoint("checkpoint has no [base] seed".into()))?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad [base] seed: {e}")))?;
    let mut model = VitModel::new(config, seed)?;
    load_adapters(ckpt, &mut model)?;
    Ok(model)
}

/// Predictions for `pixels`, in order.
pub fn predict_pixels(model: &VitModel<f32>, source: &PatchSource, pixels: &[Pixel], batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(pixels.len());
    for chunk in pixels.chunks(batch.max(1)) {
        let x = source.batch(chunk)?;
        out.extend(model.predict(&x, chunk.len())?);
    }
    Ok(out)
}

pub fn evaluate(
    model: &VitModel<f32>,
    source: &PatchSource,
    pixels: &[Pixel],
    n_classes: usize,
    batch: usize,
) -> Result<(ConfusionMatrix, Report)> {
    let pred = predict_pixels(model, source, pixels, batch)?;
    let truth: Vec<usize> = pixels.iter().map(|p| p.class as usize - 1).collect();
    let cm = ConfusionMatrix::from_pairs(n_classes, &truth, &pred)?;
    let report = Report::from_confusion(&cm)?;
    Ok((cm, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub metrics: Option<Report>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: VitModel<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best: Report,
    pub last: Report,
    pub best_checkpoint: Checkpoint,
    pub last_checkpoint: Checkpoint,
    pub steps: u64,
}

impl TrainResult {
    pub fn log_csv(&self) -> String {
        log_csv(&self.log)
    }

    /// Final metrics for the best and the last epoch.
    pub fn report(&self) -> String {
        let mut s = format!("selection: best test OA (epoch {}), last epoch {}\n\n", self.best_epoch, self.log.len());
        s.push_str("[best]\n");
        s.push_str(&self.best.table());
        s.push_str("\n[last]\n");
        s.push_str(&self.last.table());
        s.push('\n');
        writeln!(s, "steps={}", self.steps).unwrap();
        writeln!(s, "best_epoch={}", self.best_epoch).unwrap();
        for line in self.best.key_values().lines() {
            writeln!(s, "best_{line}").unwrap();
        }
        for line in self.last.key_values().lines() {
            writeln!(s, "last_{line}").unwrap();
        }
        s
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,oa,aa,kappa\n");
    for e in log {
        match &e.metrics {
            Some(m) => writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", e.epoch, e.loss, m.oa, m.aa, m.kappa),
            None => writeln!(s, "{},{:.6},,,", e.epoch, e.loss),
        }
        .unwrap();
    }
    s
}

/// Runs the training loop on prepared data. Each epoch visits every
/// training patch once in a seeded order; augmentation draws from a
/// generator keyed by `(epoch, patch index)`.
pub fn train(cfg: &RunConfig, data: &PreparedData) -> Result<TrainResult> {
    cfg.validate()?;
    if data.split.train.is_empty() {
        return Err(Error::Data("no training pixels".into()));
    }
    if data.split.test.is_empty() {
        return Err(Error::Data("no test pixels to select a checkpoint with".into()));
    }
    let mut model = build_model(cfg, data.n_classes)?;
    let mut optim = AdamW::new(&model, cfg.optim.clone())?;
    log::info!(
        "training {} with {} trainable parameters on {} pixels",
        cfg.method(),
        model.count_trainable_params(),
        data.split.train.len()
    );

    let src = &data.source;
    let (hw, bands) = (src.config.input_hw, src.config.components);
    let train_patches = data
        .split
        .train
        .iter()
        .map(|p| src.patch(p.row, p.col))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = data.split.train.iter().map(|p| p.class as usize - 1).collect();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let meta = base_meta(cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.stream_seed(Stream::Shuffle));
    let aug_seed = cfg.stream_seed(Stream::Augment);
    let mut order: Vec<usize> = (0..train_patches.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, Report, Checkpoint)> = None;
    let mut last = None;
    let epochs = cfg.train.epochs;
    for epoch in 1..=epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        for (b, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let mut x = Vec::with_capacity(chunk.len() * src.patch_len());
            let mut y = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut patch = train_patches[i].clone();
                if cfg.train.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(aug_seed);
                    rng.set_stream(((epoch as u64) << 32) | i as u64);
                    let partners: Vec<&[f32]> = by_class[labels[i]]
                        .iter()
                        .filter(|&&j| j != i)
                        .map(|&j| train_patches[j].as_slice())
                        .collect();
                    augment(&mut patch, hw, bands, &cfg.augment, &mut rng, &partners);
                }
                x.extend(patch);
                y.push(labels[i]);
            }
            model.zero_grad();
            let loss = model.loss_and_backward(&x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss is {loss} at epoch {epoch}, batch {}", b + 1)));
            }
            optim.step(&mut model).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("{m} at epoch {epoch}, batch {}", b + 1)),
                other => other,
            })?;
            loss_sum += loss as f64 * chunk.len() as f64;
        }
        let loss = loss_sum / order.len() as f64;
        let metrics = if epoch % cfg.train.eval_every == 0 || epoch == epochs {
            let (_, report) = evaluate(&model, src, &data.split.test, data.n_classes, cfg.train.batch_size)?;
            log::info!("epoch {epoch}: loss {loss:.4}, OA {:.2}%", 100.0 * report.oa);
            if best.as_ref().is_none_or(|(_, b, _)| report.oa > b.oa) {
                best = Some((epoch, report.clone(), adapter_checkpoint(&model, &meta)?));
            }
            last = Some(report.clone());
            Some(report)
        } else {
            log::info!("epoch {epoch}: loss {loss:.4}");
            None
        };
        log.push(EpochLog { epoch, loss, metrics });
    }
    let (best_epoch, best, best_checkpoint) = best.expect("the last epoch is always evaluated");
    let last_checkpoint = adapter_checkpoint(&model, &meta)?;
    Ok(TrainResult {
        model,
        log,
        best_epoch,
        best,
        last: last.expect("the last epoch is always evaluated"),
        best_checkpoint,
        last_checkpoint,
        steps: optim.steps_taken(),
    })
}

/// `train` plus its artifacts in `cfg.out_dir`: `train_log.csv`,
/// `best.peft`, `last.peft` and `report.txt`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainResult> {
    let data = prepare(cfg)?;
    let result = train(cfg, &data)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("train_log.csv"), result.log_csv())?;
    result.best_checkpoint.save(&cfg.out_dir.join("best.peft"))?;
    result.last_checkpoint.save(&cfg.out_dir.join("last.peft"))?;
    fs::write(cfg.out_dir.join("report.txt"), result.report())?;
    Ok(result)
}

/// Test-split metrics of a saved checkpoint.
pub fn eval_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Report> {
    let data = prepare(cfg)?;
    let model = model_from_checkpoint(ckpt)?;
    if model.config().n_classes != data.n_classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint head has {} classes, data has {}",
            model.config().n_classes,
            data.n_classes
        )));
    }
    Ok(evaluate(&model, &data.source, &data.split.test, data.n_classes, cfg.train.batch_size)?.1)
}

/// Merges an adapter checkpoint into its backbone and returns the full
/// model checkpoint.
pub fn fuse_checkpoint(ckpt: &Checkpoint) -> Result<Checkpoint> {
    if ckpt.is_full_model() {
        return Err(Error::Checkpoint("checkpoint already holds a full model".into()));
    }
    let mut model = model_from_checkpoint(ckpt)?;
    fuse(&mut model)?;
    Ok(full_checkpoint(&model, ""))
}

/// Trainable parameter count and adapter storage for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CountReport {
    pub method: Method,
    pub trainable: usize,
    pub total: usize,
    pub storage_bytes: usize,
}

impl CountReport {
    pub fn new(config: &ModelConfig, spec: &AdapterSpec) -> Result<Self> {
        Ok(CountReport {
            method: spec.method,
            trainable: count_trainable_params(config, spec)?,
            total: config.count_all_params(),
            storage_bytes: adapter_storage_bytes(config, spec, true)?,
        })
    }

    /// Trainable count in millions, three decimals.
    pub fn millions(&self) -> String {
        format!("{:.3}", self.trainable as f64 / 1e6)
    }

    pub fn render(&self) -> String {
        format!(
            "method={}\ntrainable_params={}\ntrainable_millions={}\nall_params={}\nadapter_storage_bytes={}\nadapter_storage_mb={:.3}\nadapter_storage_mib={:.3}\n",
            self.method,
            self.trainable,
            self.millions(),
            self.total,
            self.storage_bytes,
            bytes_to_mb(self.storage_bytes),
            bytes_to_mib(self.storage_bytes)
        )
    }
}

/// One training run per distinct λ, sorted ascending.
pub fn sweep_lambda(cfg: &RunConfig, lambdas: &[f64]) -> Result<Vec<(f64, Report)>> {
    if lambdas.is_empty() {
        return Err(Error::Config("the λ list is empty".into()));
    }
    if !cfg.method().is_plus() {
        return Err(Error::Config(format!("λ sweeps need lora+ or krona+, not {}", cfg.method())));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let before = sorted.len();
    sorted.dedup();
    if sorted.len() != before {
        log::warn!("dropped {} duplicate λ values", before - sorted.len());
    }
    let data = prepare(cfg)?;
    let mut rows = Vec::with_capacity(sorted.len());
    for lambda in sorted {
        let mut run = cfg.clone();
        run.adapter.lambda = lambda;
        run.optim.lambda = lambda;
        run.validate()?;
        let result = train(&run, &data)?;
        rows.push((lambda, result.best));
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[(f64, Report)]) -> String {
    let mut s = String::from("lambda,oa,aa,kappa\n");
    for (l, r) in rows {
        writeln!(s, "{l},{:.6},{:.6},{:.6}", r.oa, r.aa, r.kappa).unwrap();
    }
    s
}

/// Color for 1-based class `i` of `k`: hue `360·(i−1)/k` at full
/// saturation and value. Class 0 is black.
pub fn class_color(i: usize, k: usize) -> [u8; 3] {
    if i == 0 || k == 0 {
        return [0, 0, 0];
    }
    let h = 6.0 * (i - 1) as f64 / k as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let q = |v: f64| (v * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// Binary PPM of `classes` (row-major, 1-based, 0 unlabeled).
pub fn render_ppm(classes: &[usize], height: usize, width: usize, k: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &c in classes {
        out.extend(class_color(c, k));
    }
    out
}

/// Predicted classes over every labeled pixel of the cube; unlabeled
/// pixels stay 0.
pub fn classification_map(model: &VitModel<f32>, data: &PreparedData, batch: usize) -> Result<Vec<usize>> {
    let cube = &data.source.cube;
    let pixels: Vec<Pixel> = (0..cube.height * cube.width)
        .filter(|&i| cube.labels[i] > 0)
        .map(|i| Pixel {
            class: cube.labels[i],
            row: i / cube.width,
            col: i % cube.width,
        })
        .collect();
    let pred = predict_pixels(model, &data.source, &pixels, batch)?;
    let mut map = vec![0usize; cube.height * cube.width];
    for (p, c) in pixels.iter().zip(pred) {
        map[p.row * cube.width + p.col] = c + 1;
    }
    Ok(map)
}

/// Writes a `.hsic`/`.hsgt` pair for the configured synthetic scene.
pub fn write_synth(cfg: &RunConfig, dir: &Path, stem: &str) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let DataSource::Synth(s) = &cfg.data else {
        return Err(Error::Config("config does not describe a synthetic scene".into()));
    };
    let cube = synth_cube(s.height, s.width, s.bands, s.classes, s.noise_std, s.seed)?;
    fs::create_dir_all(dir)?;
    let (c, l) = (dir.join(format!("{stem}.hsic")), dir.join(format!("{stem}.hsgt")));
    cube.write_cube(&c)?;
    cube.write_labels(&l)?;
    Ok((c, l))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_primaries() {
        assert_eq!(class_color(0, 3), [0, 0, 0]);
        assert_eq!(class_color(1, 3), [255, 0, 0]);
        assert_eq!(class_color(2, 3), [0, 255, 0]);
        assert_eq!(class_color(3, 3), [0, 0, 255]);
        assert_eq!(class_color(2, 4), [128, 255, 0]);
    }

    #[test]
    fn ppm_header_and_size() {
        let img = render_ppm(&[0, 1, 2, 1, 0, 2], 2, 3, 2);
        assert!(img.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(img.len(), 11 + 18);
    }

    #[test]
    fn count_report_matches_accounting() {
        let spec = AdapterSpec {
            krona_shape: Some((384, 2)),
            ..AdapterSpec::new(Method::Krona)
        };
        let r = CountReport::new(&ModelConfig::base(9), &spec).unwrap();
        assert_eq!(r.millions(), "0.044");
        let full = CountReport::new(&ModelConfig::base(9), &AdapterSpec::new(Method::Full)).unwrap();
        assert_eq!(full.trainable, full.total);
    }

    #[test]
    fn sweep_argument_errors() {
        let cfg = RunConfig::default();
        assert!(matches!(sweep_lambda(&cfg, &[1.0]), Err(Error::Config(_))));
        let plus = RunConfig {
            adapter: AdapterSpec::new(Method::LoraPlus),
            ..Default::default()
        };
        assert!(matches!(sweep_lambda(&plus, &[]), Err(Error::Config(_))));
    }
}
