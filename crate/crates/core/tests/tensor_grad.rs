//! Finite-difference gradient checks.
//!
//! Every differentiable operation, and every full architecture, is checked
//! against central finite differences (h = 1e-3) evaluated on the
//! independent f64 reference forward. Per-op checks use inputs kept away
//! from relu kinks and compare elementwise; whole-network checks compare
//! per-layer gradient vectors by relative L2 norm, which is robust to the
//! occasional finite-difference probe that crosses a kink.

use std::collections::BTreeMap;

use clewi_core::nn::{self, ArchId, ModelArch, BN_EPS};
use clewi_core::reference as oracle;
use clewi_core::reference::{BnMode, RefTensor};
use clewi_core::tensor::tape::{GradTape, Gradients};
use clewi_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Step for the controlled per-operation checks.
const H: f64 = 1e-3;
/// Step for whole-network checks. A perturbation of a norm shift or scale
/// moves every activation in its channel, so some probe always lands near a
/// relu kink; the resulting error shrinks with h, and f64 evaluation keeps
/// roundoff negligible down to much smaller steps than this.
const H_NET: f64 = 1e-5;

type F64Params = BTreeMap<String, RefTensor>;

/// Central finite-difference gradient of `f` with respect to `params[name]`.
fn fd_grad<F: Fn(&F64Params) -> f64>(f: &F, params: &F64Params, name: &str, h: f64) -> Vec<f64> {
    let base = &params[name];
    let mut grad = vec![0.0; base.data.len()];
    let mut work = params.clone();
    for i in 0..base.data.len() {
        let orig = base.data[i];
        work.get_mut(name).unwrap().data[i] = orig + h;
        let up = f(&work);
        work.get_mut(name).unwrap().data[i] = orig - h;
        let down = f(&work);
        work.get_mut(name).unwrap().data[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Elementwise comparison for the controlled per-op checks.
fn assert_close_elementwise(name: &str, analytic: &Tensor, fd: &[f64]) {
    assert_eq!(analytic.numel(), fd.len(), "{}: gradient size", name);
    for (i, (&a, &b)) in analytic.data().iter().zip(fd).enumerate() {
        let e = rel_err(a as f64, b);
        assert!(
            e < 1e-3,
            "{}[{}]: analytic {} vs fd {} (rel err {:.2e})",
            name,
            i,
            a,
            b,
            e
        );
    }
}

/// Per-layer vector comparison for whole-network checks.
fn assert_close_norm(name: &str, analytic: &Tensor, fd: &[f64]) {
    let mut diff_sq = 0.0f64;
    let mut ref_sq = 0.0f64;
    for (&a, &b) in analytic.data().iter().zip(fd) {
        diff_sq += (a as f64 - b) * (a as f64 - b);
        ref_sq += b * b;
    }
    let rel = diff_sq.sqrt() / ref_sq.sqrt().max(1e-8);
    assert!(
        rel < 1e-3,
        "{}: per-layer gradient rel err {:.3e} (norm {:.3e})",
        name,
        rel,
        ref_sq.sqrt()
    );
}

fn named(pairs: &[(&str, &Tensor)]) -> F64Params {
    pairs
        .iter()
        .map(|(n, t)| (n.to_string(), RefTensor::from_tensor(t)))
        .collect()
}

/// Draws a tensor with entries bounded away from zero so relu kinks cannot
/// sit inside a finite-difference interval.
fn randn_off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let t = Tensor::randn(shape, 1.0, rng);
    let data = t
        .data()
        .iter()
        .map(|&v| {
            if v.abs() < 0.05 {
                0.05f32.copysign(v + 0.01)
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

#[test]
fn grad_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[5], 1.0, &mut rng);
    let target = Tensor::randn(&[3, 5], 1.0, &mut rng);

    let mut tape = GradTape::new();
    let xn = tape.param("x", &x);
    let wn = tape.param("w", &w);
    let bn = tape.param("b", &b);
    let y = tape.linear(xn, wn, bn).unwrap();
    let loss = tape.mse_const(y, &target).unwrap();
    let grads = tape.backward(loss).unwrap();

    let tref = RefTensor::from_tensor(&target);
    let f = |p: &F64Params| {
        oracle::mse_mean(&oracle::linear(&p["x"], &p["w"], &p["b"]), &tref)
    };
    let params = named(&[("x", &x), ("w", &w), ("b", &b)]);
    for name in ["x", "w", "b"] {
        assert_close_elementwise(name, grads.get(name).unwrap(), &fd_grad(&f, &params, name, H));
    }
}

#[test]
fn grad_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let target = Tensor::randn(&[3, 2], 1.0, &mut rng);

    let mut tape = GradTape::new();
    let an = tape.param("a", &a);
    let bn = tape.param("b", &b);
    let y = tape.matmul(an, bn).unwrap();
    let loss = tape.mse_const(y, &target).unwrap();
    let grads = tape.backward(loss).unwrap();

    let tref = RefTensor::from_tensor(&target);
    let f = |p: &F64Params| {
        let a = &p["a"];
        let b = &p["b"];
        let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut y = RefTensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.data[i * k + t] * b.data[t * m + j];
                }
                y.data[i * m + j] = s;
            }
        }
        oracle::mse_mean(&y, &tref)
    };
    let params = named(&[("a", &a), ("b", &b)]);
    for name in ["a", "b"] {
        assert_close_elementwise(name, grads.get(name).unwrap(), &fd_grad(&f, &params, name, H));
    }
}

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 2, 3, 3], 0.7, &mut rng);
    let target = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);

    let mut tape = GradTape::new();
    let xn = tape.param("x", &x);
    let wn = tape.param("w", &w);
    let y = tape.conv2d(xn, wn, 1, 1).unwrap();
    let loss = tape.mse_const(y, &target).unwrap();
    let grads = tape.backward(loss).unwrap();

    let tref = RefTensor::from_tensor(&target);
    let f = |p: &F64Params| oracle::mse_mean(&oracle::conv2d(&p["x"], &p["w"], 1, 1), &tref);
    let params = named(&[("x", &x), ("w", &w)]);
    for name in ["x", "w"] {
        assert_close_elementwise(name, grads.get(name).unwrap(), &fd_grad(&f, &params, name, H));
    }
}

#[test]
fn grad_conv2d_stride_2() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
    let w = Tensor::randn(&[2, 2, 3, 3], 0.7, &mut rng);
    let target = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);

    let mut tape = GradTape::new();
    let xn = tape.param("x", &x);
    let wn = tape.param("w", &w);
    let y = tape.conv2d(xn, wn, 2, 1).unwrap();
    let loss = tape.mse_const(y, &target).unwrap();
    let grads = tape.backward(loss).unwrap();

    let tref = RefTensor::from_tensor(&target);
    let f = |p: &F64Params| oracle::mse_mean(&oracle::conv2d(&p["x"], &p["w"], 2, 1), &tref);
    let params = named(&[("x", &x), ("w", &w)]);
    for name in ["x", "w"] {
        assert_close_elementwise(name, grads.get(name).unwrap(), &fd_grad(&f, &params, name, H));
    }
}

#[test]
fn grad_batchnorm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[4, 3, 2, 2], 1.5, &mut rng);
    let gamma = Tensor::randn(&[3], 0.5, &mut rng);
    let beta = Tensor::randn(&[3], 0.5, &mut rng);
    let target = Tensor::randn(&[4, 3, 2, 2], 1.0, &mut rng);

    let mut tape = GradTape::new();
    let xn = tape.param("x", &x);
    let gn = tape.param("gamma", &gamma);
    let bn = tape.param("beta", &beta);
    let (y, _, _) = tape.batchnorm(xn, gn, bn, BN_EPS).unwrap();
    let loss = tape.mse_const(y, &target).unwrap();
    let grads = tape.backward(loss).unwrap();

    let tref = RefTensor::from_tensor(&target);
    let f = |p: &F64Params| {
        oracle::mse_mean(
            &oracle::batchnorm_batch(&p["x"], &p["gamma"], &p["beta"], BN_EPS as f64),
            &tref,
        )
    };
    let params = named(&[("x", &x), ("gamma", &gamma), ("beta", &beta)]);
    for name in ["x", "gamma", "beta"] {
        assert_close_elementwise(name, grads.get(name).unwrap(), &fd_grad(&f, &params, name, H));
    }
}

#[test]
fn grad_relu_and_add_and_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = randn_off_kink(&[3, 5], &mut rng);
    let b = randn_off_kink(&[3, 5], &mut rng);
    let target = Tensor::randn(&[3, 5], 1.0, &mut rng);

    let mut tape = GradTape::new();
    let an = tape.param("a", &a);
    let bn = tape.param("b", &b);
    let scaled = tape.scale(an, 0.75);
    let sum = tape.add(scaled, bn).unwrap();
    let act = tape.relu(sum);
    let loss = tape.mse_const(act, &target).unwrap();
    let grads = tape.backward(loss).unwrap();

    let tref = RefTensor::from_tensor(&target);
    let f = |p: &F64Params| {
        let mut s = p["a"].clone();
        for (v, w) in s.data.iter_mut().zip(&p["b"].data) {
            *v = 0.75 * *v + w;
        }
        oracle::mse_mean(&oracle::relu(&s), &tref)
    };
    let params = named(&[("a", &a), ("b", &b)]);
    for name in ["a", "b"] {
        assert_close_elementwise(name, grads.get(name).unwrap(), &fd_grad(&f, &params, name, H));
    }
}

#[test]
fn grad_pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
    let t_pool = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
    let t_gap = Tensor::randn(&[2, 3], 1.0, &mut rng);

    // avgpool2d
    let mut tape = GradTape::new();
    let xn = tape.param("x", &x);
    let p = tape.avgpool2d(xn, 2).unwrap();
    let loss = tape.mse_const(p, &t_pool).unwrap();
    let grads = tape.backward(loss).unwrap();
    let tref = RefTensor::from_tensor(&t_pool);
    let f = |p: &F64Params| oracle::mse_mean(&oracle::avgpool2d(&p["x"], 2), &tref);
    let params = named(&[("x", &x)]);
    assert_close_elementwise("x(pool)", grads.get("x").unwrap(), &fd_grad(&f, &params, "x", H));

    // global_avgpool
    let mut tape = GradTape::new();
    let xn = tape.param("x", &x);
    let g = tape.global_avgpool(xn).unwrap();
    let loss = tape.mse_const(g, &t_gap).unwrap();
    let grads = tape.backward(loss).unwrap();
    let tref = RefTensor::from_tensor(&t_gap);
    let f = |p: &F64Params| oracle::mse_mean(&oracle::global_avgpool(&p["x"]), &tref);
    assert_close_elementwise("x(gap)", grads.get("x").unwrap(), &fd_grad(&f, &params, "x", H));
}

#[test]
fn grad_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = Tensor::randn(&[4, 6], 2.0, &mut rng);
    let labels = vec![0, 5, 2, 2];

    let mut tape = GradTape::new();
    let ln = tape.param("logits", &logits);
    let loss = tape.softmax_cross_entropy(ln, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let f = |p: &F64Params| oracle::cross_entropy_mean(&p["logits"], &labels);
    let params = named(&[("logits", &logits)]);
    assert_close_elementwise(
        "logits",
        grads.get("logits").unwrap(),
        &fd_grad(&f, &params, "logits", H),
    );
}

#[test]
fn grad_reshape_passthrough() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::randn(&[2, 6], 1.0, &mut rng);
    let target = Tensor::randn(&[2, 3, 1, 2], 1.0, &mut rng);

    let mut tape = GradTape::new();
    let xn = tape.param("x", &x);
    let r = tape.reshape(xn, &[2, 3, 1, 2]).unwrap();
    let loss = tape.mse_const(r, &target).unwrap();
    let grads = tape.backward(loss).unwrap();

    let tref = RefTensor::from_tensor(&target);
    let f = |p: &F64Params| {
        let r = RefTensor {
            shape: vec![2, 3, 1, 2],
            data: p["x"].data.clone(),
        };
        oracle::mse_mean(&r, &tref)
    };
    let params = named(&[("x", &x)]);
    assert_close_elementwise("x", grads.get("x").unwrap(), &fd_grad(&f, &params, "x", H));
}

/// Two forward passes on one tape must accumulate gradients into the shared
/// parameter leaves — the rehearsal losses rely on this.
#[test]
fn grad_accumulates_across_shared_forwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x1 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let x2 = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[3], 1.0, &mut rng);
    let labels1 = vec![0, 1, 2];
    let labels2 = vec![2, 0];

    let mut tape = GradTape::new();
    let x1n = tape.constant(x1.clone());
    let x2n = tape.constant(x2.clone());
    let wn = tape.param("w", &w);
    let wn_again = tape.param("w", &w);
    assert_eq!(wn, wn_again, "re-registering a name must reuse the leaf");
    let bn = tape.param("b", &b);
    let y1 = tape.linear(x1n, wn, bn).unwrap();
    let y2 = tape.linear(x2n, wn_again, bn).unwrap();
    let l1 = tape.softmax_cross_entropy(y1, &labels1).unwrap();
    let l2 = tape.softmax_cross_entropy(y2, &labels2).unwrap();
    let l2s = tape.scale(l2, 0.5);
    let total = tape.add(l1, l2s).unwrap();
    let grads = tape.backward(total).unwrap();

    let x1r = RefTensor::from_tensor(&x1);
    let x2r = RefTensor::from_tensor(&x2);
    let f = |p: &F64Params| {
        let a = oracle::cross_entropy_mean(&oracle::linear(&x1r, &p["w"], &p["b"]), &labels1);
        let b = oracle::cross_entropy_mean(&oracle::linear(&x2r, &p["w"], &p["b"]), &labels2);
        a + 0.5 * b
    };
    let params = named(&[("w", &w), ("b", &b)]);
    for name in ["w", "b"] {
        assert_close_elementwise(name, grads.get(name).unwrap(), &fd_grad(&f, &params, name, H));
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = GradTape::new();
    let x = tape.param("x", &Tensor::zeros(&[2, 2]));
    assert!(tape.backward(x).is_err());
}

/// Builds a `Gradients` holding exactly `g` for parameter "a" by exploiting
/// d/da mse(a, 0) = 2a / numel: feeding a = g * numel / 2 yields gradient g.
fn gradients_of(g: &[f32]) -> Gradients {
    let n = g.len() as f32;
    let a: Vec<f32> = g.iter().map(|&v| v * n / 2.0).collect();
    let mut tape = GradTape::new();
    let an = tape.param("a", &Tensor::from_vec(vec![g.len()], a).unwrap());
    let loss = tape.mse_const(an, &Tensor::zeros(&[g.len()])).unwrap();
    tape.backward(loss).unwrap()
}

#[test]
fn gradients_dot_axpy_and_require_all() {
    let mut ga = gradients_of(&[1.0, 2.0]);
    let gb = gradients_of(&[3.0, -1.0]);
    assert_eq!(ga.dot(&gb), 1.0); // 1*3 + 2*(-1)
    assert_eq!(ga.norm_sq(), 5.0);
    ga.axpy(2.0, &gb); // a += 2*b -> [7, 0]
    assert_eq!(ga.get("a").unwrap().data(), &[7.0, 0.0]);
    assert!(ga.require_all(["a"]).is_ok());
    assert!(ga.require_all(["missing"]).is_err());
}

// ---------------------------------------------------------------------------
// Whole-network checks: every trainable layer of every architecture.

fn arch_gradcheck(arch: ModelArch, seed: u64) {
    let params = nn::build_model(&arch, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517c_c1b7);
    let n = 4;
    let per_sample: usize = arch.input_shape.iter().product();
    let x = Tensor::randn(&[n, per_sample], 1.0, &mut rng);
    let labels: Vec<usize> = (0..n).map(|i| i % arch.num_classes).collect();

    // Analytic gradients from the tape.
    let mut train_params = params.clone();
    let mut tape = GradTape::new();
    let logits = nn::forward_train(&mut train_params, &x, &mut tape).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    grads.require_all(params.trainable_names()).unwrap();

    // Finite differences on the f64 reference forward (batch-stat mode, the
    // same normalization the tape differentiates).
    let ref_params = oracle::params_to_f64(&params);
    let x_ref = RefTensor::from_tensor(&x);
    let f = |p: &F64Params| {
        oracle::forward_ce(&arch, p, &x_ref, &labels, BnMode::Batch, BN_EPS as f64)
    };

    // Engine loss and reference loss must agree before we trust the check.
    let engine_loss = tape.value(loss).item() as f64;
    let ref_loss = f(&ref_params);
    assert!(
        (engine_loss - ref_loss).abs() < 1e-4 * (1.0 + ref_loss.abs()),
        "{}: engine loss {} vs reference {}",
        arch.id.as_str(),
        engine_loss,
        ref_loss
    );

    for name in params.trainable_names() {
        let fd = fd_grad(&f, &ref_params, name, H_NET);
        let label = format!("{}:{}", arch.id.as_str(), name);
        assert_close_norm(&label, grads.get(name).unwrap(), &fd);
    }
}

#[test]
fn gradcheck_mlp() {
    let arch = ModelArch::new(ArchId::SmallMlp, 1, 3, vec![8]).unwrap();
    arch_gradcheck(arch, 41);
}

#[test]
fn gradcheck_convnet() {
    let arch = ModelArch::new(ArchId::SmallConvnet, 1, 3, vec![1, 8, 8]).unwrap();
    arch_gradcheck(arch, 42);
}

#[test]
fn gradcheck_resnet() {
    let arch = ModelArch::new(ArchId::SmallResnet, 1, 3, vec![1, 6, 6]).unwrap();
    arch_gradcheck(arch, 43);
}
