//! Acceptance checks, one PASS/FAIL line each. Run with
//! `cargo test -p flowprox --test acceptance`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use flowprox::checkpoint;
use flowprox::commands::reconstruct_image;
use flowprox::config::Config;
use flowprox::dataset;
use flowprox_core::diff::grad_check;
use flowprox_core::flow::{FlowConfig, FlowModel};
use flowprox_core::numerics::{randn, Prng, Tensor};
use flowprox_core::operators::{ForwardOp, OpKind};
use flowprox_core::train::nll_loss_and_grad;
use flowprox_core::unfold::{softplus, Fold, UnrolledNet};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.1} s (limit {} s)", t.as_secs_f64(), limit.as_secs()))
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn invertibility() -> Outcome {
    let start = Instant::now();
    let shape = [1, 16, 16];
    let mut rng = Prng::new(101);
    let flow = FlowModel::random(FlowConfig::default(), shape, 0.1, &mut rng).map_err(e)?;
    let (mut fwd, mut inv) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = randn(&shape, 0.5, &mut rng);
        let z = flow.forward(&x).map_err(e)?.0;
        fwd = fwd.max(flow.inverse(&z).map_err(e)?.max_abs_diff(&x).map_err(e)?);
        let z = randn(&[flow.dim()], 1.0, &mut rng);
        let x = flow.inverse(&z).map_err(e)?;
        inv = inv.max(flow.forward(&x).map_err(e)?.0.max_abs_diff(&z).map_err(e)?);
    }
    let (fast, t) = within(Duration::from_secs(5), start);
    check(
        fwd < 1e-8 && inv < 1e-8 && fast,
        format!("x->z->x {fwd:.2e}, z->x->z {inv:.2e}, {t}"),
    )
}

fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(p, col);
        acc += a[col][col].abs().ln();
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    acc
}

fn exact_likelihood() -> Outcome {
    let start = Instant::now();
    let shape = [3, 2, 2];
    let cfg = FlowConfig { levels: 1, depth: 4, hidden: 8 };
    let mut rng = Prng::new(102);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let flow = FlowModel::random(cfg, shape, 0.2, &mut rng).map_err(e)?;
        let x = randn(&shape, 0.7, &mut rng);
        let logdet = flow.forward(&x).map_err(e)?.1;
        let n = x.len();
        let mut jac = vec![vec![0.0; n]; n];
        for j in 0..n {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[j] += h;
            xm.data_mut()[j] -= h;
            let zp = flow.forward(&xp).map_err(e)?.0;
            let zm = flow.forward(&xm).map_err(e)?.0;
            for (i, row) in jac.iter_mut().enumerate() {
                row[j] = (zp.data()[i] - zm.data()[i]) / (2.0 * h);
            }
        }
        worst = worst.max((logdet - log_abs_det(jac)).abs());
    }
    let (fast, t) = within(Duration::from_secs(30), start);
    check(worst < 1e-6 && fast, format!("max |logdet error| {worst:.2e} over 10 draws, {t}"))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let shape = [1, 16, 16];
    let mut rng = Prng::new(103);
    let mut flow = FlowModel::random(FlowConfig::default(), shape, 0.1, &mut rng).map_err(e)?;
    let batch: Vec<Tensor> = (0..2).map(|_| randn(&shape, 0.4, &mut rng)).collect();
    let nll = grad_check(&mut flow, |f| nll_loss_and_grad(&batch, f), 64, 1e-5, 1).map_err(e)?;

    let folds = (0..2)
        .map(|_| FlowModel::random(FlowConfig::default(), shape, 0.1, &mut rng).map(|f| Fold::new(f, 0.8, 0.1)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e)?;
    let mut net = UnrolledNet::from_folds(folds).map_err(e)?;
    let op = ForwardOp::new(OpKind::CenterMask { width: 5 }, shape).map_err(e)?;
    let x = dataset::blob_image(shape, &mut rng);
    let y = op.apply(&x).map_err(e)?;
    let n = x.len() as f64;
    let mse = grad_check(
        &mut net,
        |net| {
            let (x_hat, tape) = net.forward_tape(&y, &op)?;
            let r = x_hat.sub(&x)?;
            let g = net.backward(&tape, &op, &r.scale(2.0 / n))?;
            net.accumulate(&g)?;
            Ok(r.norm_sq() / n)
        },
        64,
        1e-5,
        2,
    )
    .map_err(e)?;
    let (fast, t) = within(Duration::from_secs(120), start);
    check(
        nll < 1e-5 && mse < 1e-5 && fast,
        format!("NLL {nll:.2e}, 2-fold MSE {mse:.2e} (64 probes each), {t}"),
    )
}

fn operators(shape: [usize; 3]) -> Result<Vec<ForwardOp>, String> {
    Ok(vec![
        ForwardOp::identity(shape),
        ForwardOp::new(OpKind::CenterMask { width: 5 }, shape).map_err(e)?,
        ForwardOp::new(OpKind::GaussianBlur { sigma: 1.25, radius: 4 }, shape).map_err(e)?,
    ])
}

fn operator_correctness() -> Outcome {
    let shape = [3, 16, 16];
    let mut rng = Prng::new(104);
    let ops = operators(shape)?;
    let mut adjoint = 0.0f64;
    for op in &ops {
        for _ in 0..50 {
            let x = randn(&shape, 1.0, &mut rng);
            let v = randn(&shape, 1.0, &mut rng);
            let lhs = op.apply(&x).map_err(e)?.dot(&v).map_err(e)?;
            let rhs = x.dot(&op.adjoint(&v).map_err(e)?).map_err(e)?;
            adjoint = adjoint.max((lhs - rhs).abs() / lhs.abs().max(1.0));
        }
    }
    let x = randn(&shape, 1.0, &mut rng);
    let blur = &ops[2];
    let symmetry = blur.apply(&x).map_err(e)?.max_abs_diff(&blur.adjoint(&x).map_err(e)?).map_err(e)?;
    let mask = &ops[1];
    let once = mask.apply(&x).map_err(e)?;
    let idempotent = mask.apply(&once).map_err(e)? == once;
    check(
        adjoint < 1e-8 && symmetry < 1e-12 && idempotent,
        format!("adjoint {adjoint:.2e}, blur symmetry {symmetry:.2e}, mask idempotent {idempotent}"),
    )
}

fn pipeline_reduction() -> Outcome {
    let shape = [1, 16, 16];
    let cfg = FlowConfig::default();
    let mut rng = Prng::new(105);
    let ops = operators(shape)?;
    let mut worst = 0.0f64;
    for p in 0..20 {
        let op = &ops[p % 3];
        let k = 1 + p % 5;
        let (mu, lambda) = (rng.uniform_range(0.2, 1.0), rng.uniform_range(0.0, 0.5));
        let flow = FlowModel::identity(cfg, shape, &mut rng).map_err(e)?;
        let net = UnrolledNet::from_flow(&flow, k, mu, lambda).map_err(e)?;
        let y = randn(&shape, 0.5, &mut rng);
        let mut x = Tensor::zeros(&shape);
        for i in 0..k {
            let r = y.sub(&op.apply(&x).map_err(e)?).map_err(e)?;
            x.axpy(mu, &op.adjoint(&r).map_err(e)?).map_err(e)?;
            if i + 1 < k {
                x = x.scale(1.0 / (1.0 + softplus(net.folds()[i].rho())));
            }
        }
        worst = worst.max(net.reconstruct(&y, op).map_err(e)?.max_abs_diff(&x).map_err(e)?);
    }
    check(worst < 1e-10, format!("max deviation from Landweber {worst:.2e} over 20 problems"))
}

// ---- end-to-end runs through the binary ------------------------------------

const COMMON: &str = "K = 3\nbatch_size = 8\nseed = 0\npatience = 5\n";

fn flowprox(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_flowprox"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(e)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("flowprox {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

struct Runs {
    dir: PathBuf,
    denoise_minutes: f64,
    inpaint_minutes: f64,
}

/// Every training and evaluation run behind the end-to-end criteria.
fn pipeline(dir: &Path) -> Result<Runs, String> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(e)?;
    }
    fs::create_dir_all(dir).map_err(e)?;
    let cfg = |name: &str, body: &str| fs::write(dir.join(name), format!("{COMMON}{body}")).map_err(e);
    cfg("denoise.cfg", "task = denoise\nsigma_n = 0.1\nmax_epochs = 15\n")?;
    cfg("untrained.cfg", "task = denoise\nsigma_n = 0.1\nmax_epochs = 0\n")?;
    cfg("pretrain.cfg", "max_epochs = 1\n")?;
    cfg("inpaint.cfg", "task = inpaint\nmask_w = 5\nmax_epochs = 15\n")?;

    flowprox(dir, &["synth-data", "--out", "data", "--count", "500", "--size", "16", "16", "--seed", "0"])?;

    let start = Instant::now();
    for (config, out) in [("denoise.cfg", "denoise.ckpt"), ("untrained.cfg", "untrained.ckpt")] {
        flowprox(dir, &["train", "--data", "data", "--config", config, "--no-pretrain", "--out", out])?;
        let report = out.replace(".ckpt", ".csv");
        flowprox(dir, &["eval", "--model", out, "--data", "data", "--config", config, "--report", &report])?;
    }
    let denoise_minutes = start.elapsed().as_secs_f64() / 60.0;

    let start = Instant::now();
    flowprox(dir, &["pretrain", "--data", "data", "--config", "pretrain.cfg", "--out", "flow.ckpt"])?;
    for (prior, out) in [(Some("flow.ckpt"), "inpaint_pre.ckpt"), (None, "inpaint_scratch.ckpt")] {
        let mut args = vec!["train", "--data", "data", "--config", "inpaint.cfg", "--out", out];
        match prior {
            Some(p) => args.extend(["--pretrained", p]),
            None => args.push("--no-pretrain"),
        }
        flowprox(dir, &args)?;
        let report = out.replace(".ckpt", ".csv");
        flowprox(dir, &["eval", "--model", out, "--data", "data", "--config", "inpaint.cfg", "--report", &report])?;
    }
    let inpaint_minutes = start.elapsed().as_secs_f64() / 60.0;
    Ok(Runs {
        dir: dir.to_path_buf(),
        denoise_minutes,
        inpaint_minutes,
    })
}

/// `(mean psnr_input, mean psnr_output)` from the report's MEAN line.
fn means(csv: &Path) -> Result<(f64, f64), String> {
    let text = fs::read_to_string(csv).map_err(e)?;
    let line = text.lines().find(|l| l.starts_with("MEAN,")).ok_or("report has no MEAN line")?;
    let f: Vec<&str> = line.split(',').collect();
    Ok((f[2].parse().map_err(e)?, f[3].parse().map_err(e)?))
}

fn denoising(runs: &Runs) -> Outcome {
    let (noisy, trained) = means(&runs.dir.join("denoise.csv"))?;
    let (_, untrained) = means(&runs.dir.join("untrained.csv"))?;
    check(
        trained >= noisy + 2.0 && trained >= untrained + 1.0 && runs.denoise_minutes < 10.0,
        format!(
            "trained {trained:.2} dB vs noisy {noisy:.2} dB and untrained {untrained:.2} dB, {:.1} min",
            runs.denoise_minutes
        ),
    )
}

fn inpainting(runs: &Runs) -> Outcome {
    let cfg = Config::load(&runs.dir.join("inpaint.cfg")).map_err(e)?;
    let net = checkpoint::load_net(&runs.dir.join("inpaint_pre.ckpt"), &cfg.train).map_err(e)?;
    let ds = dataset::load(&runs.dir.join("data")).map_err(e)?;
    let op = cfg.train.operator(net.signal_shape()).map_err(e)?;
    let mask = op.mask().ok_or("inpainting operator has no mask")?.to_vec();
    let (mut net_err, mut fill_err) = (0.0, 0.0);
    for item in &ds.test {
        let (_, x_hat) = reconstruct_image(&net, &cfg, &item.image, item.index).map_err(e)?;
        let x = item.image.data();
        let visible: Vec<f64> = x.iter().zip(&mask).filter(|(_, m)| **m != 0.0).map(|(v, _)| *v).collect();
        let fill = visible.iter().sum::<f64>() / visible.len() as f64;
        for ((v, r), m) in x.iter().zip(x_hat.data()).zip(&mask) {
            if *m == 0.0 {
                net_err += (r - v) * (r - v);
                fill_err += (fill - v) * (fill - v);
            }
        }
    }
    let ratio = net_err / fill_err;
    check(
        ratio < 0.5 && runs.inpaint_minutes < 10.0,
        format!(
            "masked-region MSE ratio net/mean-fill {ratio:.3} over {} images, {:.1} min",
            ds.test.len(),
            runs.inpaint_minutes
        ),
    )
}

fn ablation(runs: &Runs) -> Outcome {
    let (_, pre) = means(&runs.dir.join("inpaint_pre.csv"))?;
    let (_, scratch) = means(&runs.dir.join("inpaint_scratch.csv"))?;
    check(
        pre >= scratch - 0.1,
        format!("pretrained {pre:.2} dB, from scratch {scratch:.2} dB"),
    )
}

const ARTIFACTS: [&str; 9] = [
    "denoise.ckpt",
    "untrained.ckpt",
    "flow.ckpt",
    "inpaint_pre.ckpt",
    "inpaint_scratch.ckpt",
    "denoise.csv",
    "untrained.csv",
    "inpaint_pre.csv",
    "inpaint_scratch.csv",
];

fn determinism(first: &Runs, root: &Path) -> Outcome {
    let second = pipeline(&root.join("rerun"))?;
    let differing: Vec<&str> = ARTIFACTS
        .iter()
        .copied()
        .filter(|name| fs::read(first.dir.join(name)).ok() != fs::read(second.dir.join(name)).ok())
        .collect();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} checkpoints and reports identical on rerun", ARTIFACTS.len())
        } else {
            format!("differ on rerun: {}", differing.join(", "))
        },
    )
}

fn main() {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut results: Vec<(&str, Outcome)> = vec![
        ("invertibility", invertibility()),
        ("exact likelihood", exact_likelihood()),
        ("gradient fidelity", gradient_fidelity()),
        ("operator correctness", operator_correctness()),
        ("pipeline reduction", pipeline_reduction()),
    ];
    match pipeline(&root.join("run")) {
        Ok(runs) => {
            results.push(("toy denoising", denoising(&runs)));
            results.push(("toy inpainting", inpainting(&runs)));
            results.push(("pretraining ablation", ablation(&runs)));
            results.push(("determinism", determinism(&runs, &root)));
        }
        Err(msg) => {
            for name in ["toy denoising", "toy inpainting", "pretraining ablation", "determinism"] {
                results.push((name, Err(msg.clone())));
            }
        }
    }
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{status} {}. {name}: {detail}", i + 1);
    }
    println!("artifacts in {}", root.display());
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
}
