//! Invariant checks runnable from the command line.

use flowprox_core::diff::{grad_check, ParamId, ParamStore};
use flowprox_core::flow::{FlowConfig, FlowModel};
use flowprox_core::numerics::{randn, Prng, Tensor};
use flowprox_core::operators::{ForwardOp, OpKind};
use flowprox_core::train::{adam_update, AdamState, LearningRates};
use flowprox_core::unfold::{prox_shrink, softplus, Fold, UnrolledNet};

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = Box<dyn Fn() -> Result<f64, String>>;

fn err(e: flowprox_core::Error) -> String {
    e.to_string()
}

/// Runs every check; each reports its worst error against a tolerance.
pub fn run_all(tol_grad: f64, tol_inv: f64) -> Vec<CheckResult> {
    let checks: Vec<(&'static str, f64, Check)> = vec![
        ("flow round trip", tol_inv, Box::new(flow_round_trip)),
        ("log-det vs jacobian", 1e-6, Box::new(logdet_bruteforce)),
        ("operator adjoints", 1e-8, Box::new(adjoint_dot_tests)),
        ("prox oracle", 2e-5, Box::new(prox_oracle)),
        ("landweber equivalence", 1e-10, Box::new(landweber)),
        ("gradient check (2 folds)", tol_grad, Box::new(net_gradients)),
        ("adam oracle", 1e-12, Box::new(adam_oracle)),
    ];
    checks
        .into_iter()
        .map(|(name, tol, check)| match check() {
            Ok(e) if e < tol => CheckResult {
                name,
                passed: true,
                detail: format!("max error {e:.3e} < {tol:.1e}"),
            },
            Ok(e) => CheckResult {
                name,
                passed: false,
                detail: format!("max error {e:.3e} >= {tol:.1e}"),
            },
            Err(msg) => CheckResult {
                name,
                passed: false,
                detail: msg,
            },
        })
        .collect()
}

fn flow_round_trip() -> Result<f64, String> {
    let mut rng = Prng::new(1);
    let shape = [1, 16, 16];
    let flow = FlowModel::random(FlowConfig::default(), shape, 0.1, &mut rng).map_err(err)?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = randn(&shape, 0.5, &mut rng);
        let (z, _) = flow.forward(&x).map_err(err)?;
        worst = worst.max(flow.inverse(&z).map_err(err)?.max_abs_diff(&x).map_err(err)?);
        let z = randn(&[flow.dim()], 1.0, &mut rng);
        let x = flow.inverse(&z).map_err(err)?;
        worst = worst.max(flow.forward(&x).map_err(err)?.0.max_abs_diff(&z).map_err(err)?);
    }
    Ok(worst)
}

fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for col in 0..n {
        let p = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if p != col {
            a.swap(p, col);
            det = -det;
        }
        det *= a[col][col];
        if a[col][col] == 0.0 {
            return 0.0;
        }
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    det
}

fn logdet_bruteforce() -> Result<f64, String> {
    let mut rng = Prng::new(2);
    let cfg = FlowConfig {
        levels: 1,
        depth: 3,
        hidden: 8,
    };
    let shape = [3, 2, 2];
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let flow = FlowModel::random(cfg, shape, 0.2, &mut rng).map_err(err)?;
        let x = randn(&shape, 0.7, &mut rng);
        let (_, logdet) = flow.forward(&x).map_err(err)?;
        let n = x.len();
        let mut jac = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            let zp = flow.forward(&xp).map_err(err)?.0;
            let zm = flow.forward(&xm).map_err(err)?.0;
            for (i, row) in jac.iter_mut().enumerate() {
                row[j] = (zp.data()[i] - zm.data()[i]) / (2.0 * eps);
            }
        }
        worst = worst.max((logdet - determinant(jac).abs().ln()).abs());
    }
    Ok(worst)
}

fn operators(shape: [usize; 3]) -> Result<Vec<ForwardOp>, String> {
    Ok(vec![
        ForwardOp::identity(shape),
        ForwardOp::new(OpKind::CenterMask { width: 3 }, shape).map_err(err)?,
        ForwardOp::new(OpKind::GaussianBlur { sigma: 1.0, radius: 3 }, shape).map_err(err)?,
    ])
}

fn adjoint_dot_tests() -> Result<f64, String> {
    let shape = [2, 8, 8];
    let mut rng = Prng::new(3);
    let mut worst: f64 = 0.0;
    for op in operators(shape)? {
        for _ in 0..20 {
            let x = randn(&shape, 1.0, &mut rng);
            let v = randn(&shape, 1.0, &mut rng);
            let lhs = op.apply(&x).map_err(err)?.dot(&v).map_err(err)?;
            let rhs = x.dot(&op.adjoint(&v).map_err(err)?).map_err(err)?;
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn prox_oracle() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for &(z, lambda) in &[(1.3, 0.5), (-0.7, 2.0), (2.5, 0.0), (0.4, 10.0)] {
        let objective = |u: f64| 0.5 * (u - z) * (u - z) + 0.5 * lambda * u * u;
        let best = (0..=600_000)
            .map(|i| -3.0 + i as f64 * 1e-5)
            .min_by(|a, b| objective(*a).total_cmp(&objective(*b)))
            .unwrap();
        let got = prox_shrink(&Tensor::scalar(z), lambda).map_err(err)?.item();
        worst = worst.max((got - best).abs());
    }
    Ok(worst)
}

fn landweber() -> Result<f64, String> {
    let shape = [1, 8, 8];
    let mut rng = Prng::new(4);
    let cfg = FlowConfig {
        levels: 1,
        depth: 2,
        hidden: 4,
    };
    let mut worst: f64 = 0.0;
    for (p, op) in operators(shape)?.iter().enumerate() {
        let flow = FlowModel::identity(cfg, shape, &mut rng).map_err(err)?;
        let (mu, lambda, k) = (0.7, 0.05 * p as f64, 3);
        let net = UnrolledNet::from_flow(&flow, k, mu, lambda).map_err(err)?;
        let y = randn(&shape, 0.5, &mut rng);
        let mut x = Tensor::zeros(&shape);
        for i in 0..k {
            let r = y.sub(&op.apply(&x).map_err(err)?).map_err(err)?;
            x.axpy(mu, &op.adjoint(&r).map_err(err)?).map_err(err)?;
            if i + 1 < k {
                x = x.scale(1.0 / (1.0 + softplus(net.folds()[i].rho())));
            }
        }
        let x_hat = net.reconstruct(&y, op).map_err(err)?;
        worst = worst.max(x_hat.max_abs_diff(&x).map_err(err)?);
    }
    Ok(worst)
}

fn net_gradients() -> Result<f64, String> {
    let shape = [1, 4, 4];
    let mut rng = Prng::new(5);
    let cfg = FlowConfig {
        levels: 1,
        depth: 2,
        hidden: 4,
    };
    let mut folds = Vec::new();
    for _ in 0..2 {
        let flow = FlowModel::random(cfg, shape, 0.2, &mut rng).map_err(err)?;
        folds.push(Fold::new(flow, 0.5, 0.1));
    }
    let mut net = UnrolledNet::from_folds(folds).map_err(err)?;
    let op = ForwardOp::new(OpKind::CenterMask { width: 2 }, shape).map_err(err)?;
    let x = randn(&shape, 0.4, &mut rng);
    let y = op.apply(&x).map_err(err)?;
    let n = x.len() as f64;
    grad_check(
        &mut net,
        |net| {
            let (x_hat, tape) = net.forward_tape(&y, &op)?;
            let e = x_hat.sub(&x)?;
            let g = net.backward(&tape, &op, &e.scale(2.0 / n))?;
            net.accumulate(&g)?;
            Ok(e.norm_sq() / n)
        },
        64,
        1e-5,
        6,
    )
    .map_err(err)
}

fn adam_oracle() -> Result<f64, String> {
    let (b1, b2, eps, lr): (f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.1);
    let mut store = ParamStore::new();
    store.insert("w", Tensor::scalar(1.0)).map_err(err)?;
    let mut state = AdamState::new(b1, b2, eps);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut worst: f64 = 0.0;
    for t in 1..=5 {
        // f(w) = ½w², g = w.
        let g = w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        w -= lr * m_hat / (v_hat.sqrt() + eps);

        let current = store.value(ParamId(0)).item();
        store.grad_mut(ParamId(0)).data_mut()[0] = current;
        adam_update(&mut store, &mut state, &LearningRates::uniform(lr)).map_err(err)?;
        worst = worst.max((store.value(ParamId(0)).item() - w).abs());
    }
    Ok(worst)
}
