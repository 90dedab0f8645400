use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use flowprox_core::numerics::{Prng, Tensor};
use flowprox_core::operators::make_measurement;
use flowprox_core::train::{self, noise_seed, psnr, stream, EpochRecord, Task};
use flowprox_core::unfold::UnrolledNet;

use crate::checkpoint;
use crate::cli::{Cli, Command};
use crate::config::{Config, Prior};
use crate::dataset::{self, Dataset};
use crate::error::{CliError, Result};
use crate::pnm;
use crate::selftest;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            out,
            count,
            size,
            channels,
            seed,
            force,
        } => {
            dataset::synthesize(&out, count, [channels, size[0], size[1]], seed, force)?;
            println!("wrote {count} images to {}", out.display());
            Ok(())
        }
        Command::Pretrain { data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            pretrain(cfg, data, out)
        }
        Command::Train {
            task,
            data,
            config,
            pretrained,
            no_pretrain,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(t) = task {
                cfg.train.task = t;
            }
            if let Some(p) = pretrained {
                cfg.pretrained = Some(Prior::Checkpoint(p));
            } else if no_pretrain {
                cfg.pretrained = Some(Prior::Scratch);
            }
            train(cfg, data, out)
        }
        Command::Reconstruct {
            model,
            input,
            task,
            config,
            output,
            emit_init,
            measure,
        } => {
            let cfg = with_task(load_config(config.as_deref())?, task);
            reconstruct(&cfg, &model, &input, &output, emit_init, measure)
        }
        Command::Eval {
            model,
            data,
            task,
            config,
            report,
        } => {
            let cfg = with_task(load_config(config.as_deref())?, task);
            let data = data
                .or_else(|| cfg.data.clone())
                .ok_or_else(|| CliError::Usage("eval needs --data (or `data` in the config)".into()))?;
            let summary = eval(&cfg, &model, &data, &report)?;
            println!(
                "mean PSNR over {} test images: input {:.4} dB, output {:.4} dB",
                summary.rows, summary.mean_input, summary.mean_output
            );
            Ok(())
        }
        Command::Selftest { tol_grad, tol_inv } => {
            let results = selftest::run_all(tol_grad, tol_inv);
            let mut failed = Vec::new();
            for r in &results {
                println!("{} {:<28} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                if !r.passed {
                    failed.push(r.name);
                }
            }
            if failed.is_empty() {
                println!("all {} checks passed", results.len());
                Ok(())
            } else {
                Err(CliError::CheckFailed(failed.join(", ")))
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn with_task(mut cfg: Config, task: Option<Task>) -> Config {
    if let Some(t) = task {
        cfg.train.task = t;
    }
    cfg
}

fn output_dir(path: &Path) -> Result<PathBuf> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

/// The training log sits next to the checkpoint: `run.ckpt` → `run.log`.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log")
}

/// Tab-separated per-epoch log, mirrored to standard output.
struct EpochLog {
    path: PathBuf,
    file: BufWriter<File>,
    start: Instant,
    error: Option<std::io::Error>,
}

impl EpochLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Self {
            path,
            file: BufWriter::new(file),
            start: Instant::now(),
            error: None,
        })
    }

    fn record(&mut self, r: &EpochRecord) {
        let line = format!(
            "{}\t{:.8}\t{:.8}\t{:.3}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            self.start.elapsed().as_secs_f64()
        );
        println!("{line}");
        if self.error.is_none() {
            if let Err(e) = writeln!(self.file, "{line}") {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<()> {
        let flushed = self.file.flush();
        match self.error.take().map_or(flushed, Err) {
            Ok(()) => Ok(()),
            Err(e) => Err(CliError::io(&self.path, e)),
        }
    }
}

fn training_data(cfg: &Config, data: Option<PathBuf>) -> Result<(PathBuf, Dataset, [usize; 3])> {
    let data = data
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| CliError::Usage("missing --data (or `data` in the config)".into()))?;
    let ds = dataset::load(&data)?;
    if ds.train.is_empty() {
        return Err(CliError::format(
            &data,
            "no training images (the manifest lists no `train` entries)",
        ));
    }
    let shape = ds.shape().expect("non-empty dataset");
    Ok((data, ds, shape))
}

fn pretrain(mut cfg: Config, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let out = out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Usage("pretrain needs --out (or `out` in the config)".into()))?;
    let (data, ds, shape) = training_data(&cfg, data)?;
    let dir = output_dir(&out)?;
    cfg.data = Some(data);
    cfg.out = Some(out.clone());
    cfg.pretrained = None;
    cfg.write_resolved(&dir, shape)?;

    let mut log = EpochLog::create(log_path(&out))?;
    let flow = train::pretrain(
        &Dataset::images(&ds.train),
        &Dataset::images(&ds.val),
        &cfg.train,
        &mut |r| log.record(r),
    )?;
    log.finish()?;
    checkpoint::save_flow(&out, &flow)
}

fn train(mut cfg: Config, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let prior = cfg.pretrained.clone().ok_or_else(|| {
        CliError::Usage(
            "choose the starting point explicitly: --pretrained CKPT or --no-pretrain".into(),
        )
    })?;
    let out = out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Usage("train needs --out (or `out` in the config)".into()))?;
    let (data, ds, shape) = training_data(&cfg, data)?;
    let flow = match &prior {
        Prior::Checkpoint(p) => Some(checkpoint::load_flow(p, &cfg.train)?),
        Prior::Scratch => None,
    };
    let dir = output_dir(&out)?;
    cfg.data = Some(data);
    cfg.out = Some(out.clone());
    cfg.write_resolved(&dir, shape)?;

    let mut log = EpochLog::create(log_path(&out))?;
    let net = train::train_unrolled(
        &Dataset::images(&ds.train),
        &Dataset::images(&ds.val),
        &cfg.train,
        flow.as_ref(),
        &mut |r| log.record(r),
    )?;
    log.finish()?;
    checkpoint::save_net(&out, &net)
}

fn load_net_for(cfg: &Config, model: &Path, image: &Path, shape: &[usize]) -> Result<UnrolledNet> {
    let stored = checkpoint::stored_shape(model)?;
    if stored[..] != *shape {
        return Err(CliError::format(
            image,
            format!(
                "image is {:?} but checkpoint {} was trained on {:?}",
                shape,
                model.display(),
                stored
            ),
        ));
    }
    checkpoint::load_net(model, &cfg.train)
}

/// `<dir>/<stem>_init.<ext>` for an output path `<dir>/<stem>.<ext>`.
pub fn init_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match output.extension() {
        Some(ext) => format!("{stem}_init.{}", ext.to_string_lossy()),
        None => format!("{stem}_init"),
    };
    output.with_file_name(name)
}

fn reconstruct(cfg: &Config, model: &Path, input: &Path, output: &Path, emit_init: bool, measure: bool) -> Result<()> {
    let image = pnm::read_image(input)?;
    let net = load_net_for(cfg, model, input, image.shape())?;
    let shape = net.signal_shape();
    let op = cfg.train.operator(shape)?;
    let y = if measure {
        let mut rng = Prng::new(noise_seed(cfg.train.seed, stream::EVAL_NOISE, 0, 0));
        make_measurement(&op, &image, cfg.train.noise_std(), &mut rng)?
    } else {
        image
    };
    let x_hat = net.reconstruct(&y, &op)?;
    let dir = output_dir(output)?;
    pnm::write_image(output, &x_hat)?;
    if emit_init {
        pnm::write_image(&init_path(output), &net.initial_guess()?)?;
    }
    cfg.write_resolved(&dir, shape)?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSummary {
    pub rows: usize,
    pub mean_input: f64,
    pub mean_output: f64,
}

/// Per-image PSNR of the measurement and the reconstruction.
pub fn psnr_rows(net: &UnrolledNet, cfg: &Config, items: &[dataset::Item]) -> Result<Vec<(String, f64, f64)>> {
    items
        .iter()
        .map(|item| {
            let (y, x_hat) = reconstruct_image(net, cfg, &item.image, item.index)?;
            let id = Path::new(&item.name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| item.name.clone());
            Ok((id, psnr(&y, &item.image, 1.0)?, psnr(&x_hat, &item.image, 1.0)?))
        })
        .collect()
}

fn eval(cfg: &Config, model: &Path, data: &Path, report: &Path) -> Result<EvalSummary> {
    let ds = dataset::load(data)?;
    if ds.test.is_empty() {
        return Err(CliError::format(data, "empty test split"));
    }
    let shape = ds.shape().expect("non-empty dataset");
    let net = load_net_for(cfg, model, &data.join(&ds.test[0].name), &shape)?;
    let rows = psnr_rows(&net, cfg, &ds.test)?;

    let task = cfg.train.task;
    let mut csv = String::from("image_id,task,psnr_input,psnr_output\n");
    for (id, a, b) in &rows {
        let _ = writeln!(csv, "{id},{task},{a:.6},{b:.6}");
    }
    let n = rows.len() as f64;
    let summary = EvalSummary {
        rows: rows.len(),
        mean_input: rows.iter().map(|r| r.1).sum::<f64>() / n,
        mean_output: rows.iter().map(|r| r.2).sum::<f64>() / n,
    };
    let _ = writeln!(csv, "MEAN,{task},{:.6},{:.6}", summary.mean_input, summary.mean_output);
    let dir = output_dir(report)?;
    fs::write(report, csv).map_err(|e| CliError::io(report, e))?;
    let mut resolved = cfg.clone();
    resolved.data = Some(data.to_path_buf());
    resolved.write_resolved(&dir, shape)?;
    Ok(summary)
}

/// Measurement and reconstruction of image `index` under the evaluation
/// noise stream.
pub fn reconstruct_image(net: &UnrolledNet, cfg: &Config, x: &Tensor, index: usize) -> Result<(Tensor, Tensor)> {
    let op = cfg.train.operator(net.signal_shape())?;
    let mut rng = Prng::new(noise_seed(cfg.train.seed, stream::EVAL_NOISE, 0, index as u64));
    let y = make_measurement(&op, x, cfg.train.noise_std(), &mut rng)?;
    let x_hat = net.reconstruct(&y, &op)?;
    Ok((y, x_hat))
}
