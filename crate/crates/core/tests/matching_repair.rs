//! Activation matching, permutation recovery, interpolation, and the
//! post-merge statistics repairs, checked against hand-rolled f64 oracles.

use clewi_core::buffer::MemoryBuffer;
use clewi_core::data::synth_blobs;
use clewi_core::matching::{
    apply_permutation, calc_permutation, clewi_task_step, collect_activations, interpolate,
    permutation_from_stats, repair_affine, update_batchnorm, ACTIVATION_BATCH,
};
use clewi_core::nn::{self, ArchId, ModelArch, ParamSet, Permutation, PermutationSpec};
use clewi_core::reference::{self, RefTensor};
use clewi_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn mlp() -> ModelArch {
    ModelArch::new(ArchId::SmallMlp, 1, 3, vec![6]).unwrap()
}

fn convnet() -> ModelArch {
    ModelArch::new(ArchId::SmallConvnet, 1, 3, vec![1, 8, 8]).unwrap()
}

fn resnet() -> ModelArch {
    ModelArch::new(ArchId::SmallResnet, 1, 3, vec![1, 8, 8]).unwrap()
}

/// Buffer filled in order (capacity == sample count, so nothing is ever
/// evicted), plus the raw inputs for hand-computed statistics.
///
/// Matching-quality tests pass `separation = 0.0`: strongly clustered
/// inputs leave many random hyperplanes entirely on one side (channels that
/// are constant zero after the nonlinearity, with no correlation signal),
/// while an undifferentiated cloud exercises every channel of a freshly
/// initialized network.
fn filled_buffer(
    dim: usize,
    per_class: usize,
    classes: usize,
    separation: f32,
    seed: u64,
) -> (MemoryBuffer, Vec<Tensor>) {
    let data = synth_blobs(classes, dim, per_class, separation, seed).unwrap();
    let mut buf = MemoryBuffer::new(data.samples.len(), seed).unwrap();
    let mut xs = Vec::new();
    for s in &data.samples {
        buf.reservoir_update(s.x.clone(), s.y, None);
        xs.push(s.x.clone());
    }
    (buf, xs)
}

fn assert_bitwise_eq(a: &ParamSet, b: &ParamSet, context: &str) {
    let names_a: Vec<&str> = a.names().collect();
    let names_b: Vec<&str> = b.names().collect();
    assert_eq!(names_a, names_b, "{}: tensor sets differ", context);
    for name in names_a {
        let (ta, tb) = (a.get(name).unwrap(), b.get(name).unwrap());
        assert_eq!(ta.shape(), tb.shape(), "{}: shape of {}", context, name);
        for (i, (x, y)) in ta.data().iter().zip(tb.data()).enumerate() {
            assert!(
                x.to_bits() == y.to_bits(),
                "{}: {}[{}] differs: {} vs {}",
                context,
                name,
                i,
                x,
                y
            );
        }
    }
}

fn perm_maps(p: &Permutation) -> Vec<(usize, Vec<usize>)> {
    p.iter().map(|(g, v)| (g, v.to_vec())).collect()
}

/// Streaming per-channel first and second moments, accumulated in f64.
struct Moments {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    n: f64,
}

impl Moments {
    fn new(c: usize) -> Self {
        Self {
            sum: vec![0.0; c],
            sumsq: vec![0.0; c],
            n: 0.0,
        }
    }

    fn add(&mut self, v: &[f64]) {
        for (i, &x) in v.iter().enumerate() {
            self.sum[i] += x;
            self.sumsq[i] += x * x;
        }
        self.n += 1.0;
    }

    /// (mean, population variance) per channel.
    fn finalize(&self) -> (Vec<f64>, Vec<f64>) {
        let mean: Vec<f64> = self.sum.iter().map(|&s| s / self.n).collect();
        let var = self
            .sumsq
            .iter()
            .zip(&mean)
            .map(|(&sq, &mu)| (sq / self.n - mu * mu).max(0.0))
            .collect();
        (mean, var)
    }
}

fn matvec(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let rows = w.shape()[0];
    let cols = w.shape()[1];
    let wd = w.data();
    let bd = b.data();
    (0..rows)
        .map(|i| {
            let mut acc = bd[i] as f64;
            for (j, &xj) in x.iter().enumerate().take(cols) {
                acc += wd[i * cols + j] as f64 * xj;
            }
            acc
        })
        .collect()
}

/// Hand f64 forward of the two-hidden-layer MLP: per-channel (mean,
/// population variance) of each hidden layer's pre-activations over `xs`.
fn mlp_hidden_moments(params: &ParamSet, xs: &[Tensor]) -> [(Vec<f64>, Vec<f64>); 2] {
    let w1 = params.get("fc1.weight").unwrap();
    let b1 = params.get("fc1.bias").unwrap();
    let w2 = params.get("fc2.weight").unwrap();
    let b2 = params.get("fc2.bias").unwrap();
    let mut m1 = Moments::new(w1.shape()[0]);
    let mut m2 = Moments::new(w2.shape()[0]);
    for x in xs {
        let xv: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let pre1 = matvec(w1, b1, &xv);
        let post1: Vec<f64> = pre1.iter().map(|&v| v.max(0.0)).collect();
        let pre2 = matvec(w2, b2, &post1);
        m1.add(&pre1);
        m2.add(&pre2);
    }
    [m1.finalize(), m2.finalize()]
}

fn blend(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (1.0 - alpha) * x + alpha * y)
        .collect()
}

#[test]
fn matching_identical_networks_is_identity_with_unit_correlation() {
    for (arch, dim) in [(mlp(), 6), (convnet(), 64)] {
        let params = nn::build_model(&arch, 7);
        let (buf, _) = filled_buffer(dim, 8, 3, 0.0, 9);
        let stats = collect_activations(&params, &params, &buf, 8).unwrap();
        let (perm, diag) = permutation_from_stats(&stats).unwrap();
        assert!(perm.is_identity(), "{}: self-match must be identity", arch.id.as_str());
        for (group, mean_corr) in diag {
            assert!(
                (mean_corr - 1.0).abs() < 1e-9,
                "{} group {}: matched correlation {} should be 1",
                arch.id.as_str(),
                group,
                mean_corr
            );
        }
        for g in &stats.groups {
            for i in 0..g.size {
                assert!((g.corr[i][i] - 1.0).abs() < 1e-9, "diagonal self-correlation");
                for j in 0..g.size {
                    if i != j {
                        assert!(g.corr[i][j] < 1.0 - 1e-6, "off-diagonal must not tie the diagonal");
                    }
                }
            }
        }
    }
}

/// Scrambling a network's channels with a known permutation and matching it
/// against the original must recover the exact inverse, and aligning with
/// the recovered permutation must restore the original bit for bit.
fn check_planted_recovery(arch: ModelArch, dim: usize, model_seed: u64, perm_seed: u64) {
    let theta = nn::build_model(&arch, model_seed);
    let spec = PermutationSpec::of(&arch);
    let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
    let sigma = Permutation::random(&spec, &mut rng);
    assert!(!sigma.is_identity(), "seed produced an identity scramble; pick another");
    let scrambled = apply_permutation(&theta, &sigma).unwrap();

    let (buf, _) = filled_buffer(dim, 10, 4, 0.0, 21);
    let recovered = calc_permutation(&theta, &scrambled, &buf, 8).unwrap();
    assert_eq!(
        perm_maps(&recovered),
        perm_maps(&sigma.inverse()),
        "{}: recovered permutation must invert the planted one",
        arch.id.as_str()
    );
    let restored = apply_permutation(&scrambled, &recovered).unwrap();
    assert_bitwise_eq(&restored, &theta, arch.id.as_str());

    // Every live channel must correlate perfectly with its counterpart;
    // channels that are constant on the buffer (all-zero correlation rows)
    // carry no signal, and as long as a group has at most one of them the
    // leftover assignment is still forced, keeping the recovery exact.
    let stats = collect_activations(&theta, &scrambled, &buf, 8).unwrap();
    for g in &stats.groups {
        let dead: Vec<usize> = (0..g.size)
            .filter(|&i| g.corr[i].iter().all(|&c| c == 0.0))
            .collect();
        assert!(
            dead.len() <= 1,
            "group {}: {} silent channels make tie-breaking ambiguous; pick another seed",
            g.group,
            dead.len()
        );
        let idx = recovered.get(g.group).unwrap();
        for i in 0..g.size {
            if !dead.contains(&i) {
                assert!(
                    g.corr[i][idx[i]] > 1.0 - 1e-6,
                    "group {} channel {}: matched correlation {} should be 1",
                    g.group,
                    i,
                    g.corr[i][idx[i]]
                );
            }
        }
    }
}

#[test]
fn planted_permutation_is_recovered_exactly_mlp() {
    check_planted_recovery(mlp(), 6, 11, 13);
}

#[test]
fn planted_permutation_is_recovered_exactly_convnet() {
    check_planted_recovery(convnet(), 64, 12, 17);
}

#[test]
fn planted_permutation_is_recovered_exactly_resnet() {
    check_planted_recovery(resnet(), 64, 14, 19);
}

#[test]
fn permutation_recovery_is_batch_size_invariant() {
    assert_eq!(ACTIVATION_BATCH, 32);
    let arch = mlp();
    let theta = nn::build_model(&arch, 11);
    let spec = PermutationSpec::of(&arch);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let sigma = Permutation::random(&spec, &mut rng);
    let scrambled = apply_permutation(&theta, &sigma).unwrap();
    let (buf, _) = filled_buffer(6, 10, 4, 0.0, 21);
    let small = calc_permutation(&theta, &scrambled, &buf, 4).unwrap();
    let whole = calc_permutation(&theta, &scrambled, &buf, 1000).unwrap();
    assert_eq!(perm_maps(&small), perm_maps(&whole));
}

/// Channels that are constant on the buffer carry no correlation signal:
/// their rows and columns are zeroed by the variance floor, the assignment
/// falls back to the lexicographically smallest tie, and a self-match still
/// comes out as the identity.
#[test]
fn dead_channels_get_zero_correlation_and_stable_ties() {
    let arch = mlp();
    let mut params = nn::build_model(&arch, 7);
    let mut w = params.get("fc1.weight").unwrap().clone();
    let cols = w.shape()[1];
    for ch in [2usize, 5] {
        for v in &mut w.data_mut()[ch * cols..(ch + 1) * cols] {
            *v = 0.0;
        }
    }
    params.set("fc1.weight", w).unwrap();
    let mut b = params.get("fc1.bias").unwrap().clone();
    b.data_mut()[2] = -1.0;
    b.data_mut()[5] = -1.0;
    params.set("fc1.bias", b).unwrap();

    let (buf, _) = filled_buffer(6, 8, 3, 0.0, 9);
    let stats = collect_activations(&params, &params, &buf, 8).unwrap();
    let g0 = &stats.groups[0];
    for j in 0..g0.size {
        assert_eq!(g0.corr[2][j], 0.0, "silenced channel row must be zero");
        assert_eq!(g0.corr[j][5], 0.0, "silenced channel column must be zero");
    }
    let (perm, diag) = permutation_from_stats(&stats).unwrap();
    assert!(perm.is_identity(), "ties must break toward the identity");
    assert_eq!(diag[0].0, g0.group);
    let live = (g0.size - 2) as f64;
    assert!(
        (diag[0].1 - live / g0.size as f64).abs() < 1e-9,
        "matched correlation averages 1 over live channels and 0 over dead ones, got {}",
        diag[0].1
    );
}

#[test]
fn interpolate_endpoints_are_bit_exact() {
    let arch = mlp();
    let a = nn::build_model(&arch, 1);
    let b = nn::build_model(&arch, 2);
    assert_bitwise_eq(&interpolate(&a, &b, 0.0).unwrap(), &a, "alpha=0");
    assert_bitwise_eq(&interpolate(&a, &b, 1.0).unwrap(), &b, "alpha=1");
}

#[test]
fn interpolate_midpoint_matches_elementwise_blend() {
    let arch = mlp();
    let mut a = nn::build_model(&arch, 1);
    let mut b = nn::build_model(&arch, 2);
    let h = a.get("fc1.bias").unwrap().shape()[0];
    a.set("fc1.bias", Tensor::full(&[h], 2.0)).unwrap();
    b.set("fc1.bias", Tensor::full(&[h], 6.0)).unwrap();

    let mid = interpolate(&a, &b, 0.5).unwrap();
    for &v in mid.get("fc1.bias").unwrap().data() {
        assert_eq!(v, 4.0, "midpoint of 2 and 6 is exactly 4");
    }

    let alpha = 0.25f32;
    let out = interpolate(&a, &b, alpha).unwrap();
    for name in a.names() {
        let (ta, tb, to) = (
            a.get(name).unwrap().data(),
            b.get(name).unwrap().data(),
            out.get(name).unwrap().data(),
        );
        for i in 0..ta.len() {
            let want = (1.0 - alpha as f64) * ta[i] as f64 + alpha as f64 * tb[i] as f64;
            assert!(
                (to[i] as f64 - want).abs() < 1e-6,
                "{}[{}]: {} vs {}",
                name,
                i,
                to[i],
                want
            );
        }
    }
}

#[test]
fn interpolate_blends_running_statistics_too() {
    let arch = convnet();
    let a = nn::build_model(&arch, 1);
    let mut b = nn::build_model(&arch, 2);
    let c = b.get("bn1.running_var").unwrap().shape()[0];
    b.set("bn1.running_mean", Tensor::full(&[c], 3.0)).unwrap();
    b.set("bn1.running_var", Tensor::full(&[c], 5.0)).unwrap();
    let mid = interpolate(&a, &b, 0.5).unwrap();
    // the first network still has the freshly initialized statistics (0, 1)
    for &v in mid.get("bn1.running_mean").unwrap().data() {
        assert_eq!(v, 1.5);
    }
    for &v in mid.get("bn1.running_var").unwrap().data() {
        assert_eq!(v, 3.0);
    }
}

#[test]
fn interpolate_rejects_bad_alpha_and_mismatched_networks() {
    let a = nn::build_model(&mlp(), 1);
    let b = nn::build_model(&mlp(), 2);
    assert!(interpolate(&a, &b, -0.01).is_err());
    assert!(interpolate(&a, &b, 1.01).is_err());
    assert!(interpolate(&a, &b, f32::NAN).is_err());
    let wide = nn::build_model(&ModelArch::new(ArchId::SmallMlp, 2, 3, vec![6]).unwrap(), 3);
    assert!(interpolate(&a, &wide, 0.5).is_err(), "same family, different width");
}

#[test]
fn apply_permutation_rejects_wrong_sized_maps() {
    let a = nn::build_model(&mlp(), 1);
    let mut maps = BTreeMap::new();
    maps.insert(0usize, vec![0usize]);
    let bad = Permutation::from_maps(maps);
    assert!(apply_permutation(&a, &bad).is_err());
}

#[test]
fn update_batchnorm_is_noop_for_unnormalized_networks() {
    let params = nn::build_model(&mlp(), 3);
    let (buf, _) = filled_buffer(6, 8, 3, 3.0, 5);
    let out = update_batchnorm(&params, &buf, 4).unwrap();
    assert_bitwise_eq(&out, &params, "no normalization layers to refresh");
}

/// The first normalization layer's refreshed statistics must equal the
/// equal-weight average over buffer batches of the stem convolution's
/// per-channel batch moments (variances unbiased) — computed here from
/// scratch with the f64 reference convolution.
#[test]
fn update_batchnorm_first_layer_stats_match_conv_oracle() {
    let arch = convnet();
    let params = nn::build_model(&arch, 5);
    let (buf, _) = filled_buffer(64, 4, 3, 3.0, 9);
    let batch_size = 4;
    let updated = update_batchnorm(&params, &buf, batch_size).unwrap();

    let w1 = RefTensor::from_tensor(params.get("conv1.weight").unwrap());
    let c = w1.shape[0];
    let mut mean_sum = vec![0.0f64; c];
    let mut var_sum = vec![0.0f64; c];
    let mut batches = 0.0f64;
    for batch in buf.iterate_all(batch_size).unwrap() {
        let n = batch.len();
        let x = RefTensor::from_tensor(&batch.x.reshaped(&[n, 1, 8, 8]).unwrap());
        let y = reference::conv2d(&x, &w1, 1, 1);
        let (h, w) = (y.shape[2], y.shape[3]);
        let m = (n * h * w) as f64;
        for ci in 0..c {
            let mut s = 0.0f64;
            let mut sq = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    let v = y.data[base + p];
                    s += v;
                    sq += v * v;
                }
            }
            let mean = s / m;
            let biased = sq / m - mean * mean;
            mean_sum[ci] += mean;
            var_sum[ci] += biased * m / (m - 1.0);
        }
        batches += 1.0;
    }

    let got_mean = updated.get("bn1.running_mean").unwrap().data();
    let got_var = updated.get("bn1.running_var").unwrap().data();
    for ci in 0..c {
        let want_mean = mean_sum[ci] / batches;
        let want_var = var_sum[ci] / batches;
        assert!(
            (got_mean[ci] as f64 - want_mean).abs() < 1e-4 * (1.0 + want_mean.abs()),
            "channel {} mean: {} vs oracle {}",
            ci,
            got_mean[ci],
            want_mean
        );
        assert!(
            (got_var[ci] as f64 - want_var).abs() < 1e-4 * (1.0 + want_var.abs()),
            "channel {} var: {} vs oracle {}",
            ci,
            got_var[ci],
            want_var
        );
    }
}

/// Every normalization layer's refreshed statistics are the equal-weight
/// average of the per-batch collection moments, and nothing else moves.
#[test]
fn update_batchnorm_averages_batch_moments_equally() {
    let arch = convnet();
    let params = nn::build_model(&arch, 6);
    let (buf, _) = filled_buffer(64, 4, 3, 3.0, 11);
    let batch_size = 4;
    let updated = update_batchnorm(&params, &buf, batch_size).unwrap();

    let mut acc: BTreeMap<String, (Vec<f64>, Vec<f64>, f64)> = BTreeMap::new();
    for batch in buf.iterate_all(batch_size).unwrap() {
        for stats in nn::collect_batch_stats(&params, &batch.x).unwrap() {
            let entry = acc.entry(stats.layer.clone()).or_insert_with(|| {
                (vec![0.0; stats.mean.len()], vec![0.0; stats.mean.len()], 0.0)
            });
            let unbias = stats.count as f64 / (stats.count as f64 - 1.0);
            for (slot, &m) in entry.0.iter_mut().zip(&stats.mean) {
                *slot += m as f64;
            }
            for (slot, &v) in entry.1.iter_mut().zip(&stats.var) {
                *slot += v as f64 * unbias;
            }
            entry.2 += 1.0;
        }
    }
    assert_eq!(acc.len(), 3, "three normalization layers");
    for (layer, (mean_sum, var_sum, n)) in acc {
        let got_mean = updated.get(&format!("{}.running_mean", layer)).unwrap().data();
        let got_var = updated.get(&format!("{}.running_var", layer)).unwrap().data();
        for ci in 0..got_mean.len() {
            assert!(
                (got_mean[ci] as f64 - mean_sum[ci] / n).abs() < 1e-5,
                "{} mean channel {}",
                layer,
                ci
            );
            assert!(
                (got_var[ci] as f64 - var_sum[ci] / n).abs() < 1e-5,
                "{} var channel {}",
                layer,
                ci
            );
        }
    }

    for name in params.names() {
        if !name.ends_with(".running_mean") && !name.ends_with(".running_var") {
            let before = params.get(name).unwrap().data();
            let after = updated.get(name).unwrap().data();
            assert!(
                before.iter().zip(after).all(|(a, b)| a.to_bits() == b.to_bits()),
                "{} must not change",
                name
            );
        }
    }
}

#[test]
fn repair_at_alpha_zero_returns_merged_bitwise() {
    let arch = mlp();
    let a = nn::build_model(&arch, 1);
    let b = nn::build_model(&arch, 2);
    let (buf, _) = filled_buffer(6, 8, 3, 3.0, 7);
    let perm = calc_permutation(&a, &b, &buf, 8).unwrap();
    let aligned = apply_permutation(&b, &perm).unwrap();
    let stats = collect_activations(&a, &aligned, &buf, 8).unwrap();
    let merged = interpolate(&a, &aligned, 0.0).unwrap();
    let repaired = repair_affine(&merged, &stats, 0.0, &buf, 8).unwrap();
    assert_bitwise_eq(&repaired, &merged, "alpha=0 repair");
}

/// After repair, each hidden layer's per-channel pre-activation moments on
/// the buffer must land on the convex combination of the endpoints'
/// moments: means within 1e-3 absolute, variances within 5% relative.
#[test]
fn repair_moves_hidden_moments_to_convex_targets() {
    let arch = mlp();
    let a = nn::build_model(&arch, 1);
    let b = nn::build_model(&arch, 2);
    let alpha = 0.3f32;
    let (buf, xs) = filled_buffer(6, 10, 3, 3.0, 7);

    let perm = calc_permutation(&a, &b, &buf, 8).unwrap();
    let aligned = apply_permutation(&b, &perm).unwrap();
    let stats = collect_activations(&a, &aligned, &buf, 8).unwrap();
    let merged = interpolate(&a, &aligned, alpha).unwrap();
    let repaired = repair_affine(&merged, &stats, alpha, &buf, 8).unwrap();

    let ma = mlp_hidden_moments(&a, &xs);
    let mb = mlp_hidden_moments(&aligned, &xs);
    let mr = mlp_hidden_moments(&repaired, &xs);
    for g in 0..2 {
        let t_mean = blend(&ma[g].0, &mb[g].0, alpha as f64);
        let t_var = blend(&ma[g].1, &mb[g].1, alpha as f64);
        for c in 0..t_mean.len() {
            assert!(t_var[c] > 1e-6, "degenerate target variance; data too tame");
            assert!(
                (mr[g].0[c] - t_mean[c]).abs() < 1e-3,
                "layer {} channel {} mean {} missed target {}",
                g,
                c,
                mr[g].0[c],
                t_mean[c]
            );
            assert!(
                ((mr[g].1[c] - t_var[c]) / t_var[c]).abs() < 0.05,
                "layer {} channel {} var {} missed target {}",
                g,
                c,
                mr[g].1[c],
                t_var[c]
            );
        }
    }
}

#[test]
fn repair_rejects_normalized_architectures() {
    let params = nn::build_model(&convnet(), 1);
    let (buf, _) = filled_buffer(64, 4, 3, 3.0, 5);
    let stats = collect_activations(&params, &params, &buf, 8).unwrap();
    let err = repair_affine(&params, &stats, 0.5, &buf, 8).unwrap_err();
    assert!(err.to_string().contains("update_batchnorm"), "got: {}", err);
}

#[test]
fn repair_rejects_bad_alpha() {
    let a = nn::build_model(&mlp(), 1);
    let (buf, _) = filled_buffer(6, 8, 3, 3.0, 7);
    let stats = collect_activations(&a, &a, &buf, 8).unwrap();
    assert!(repair_affine(&a, &stats, -0.1, &buf, 8).is_err());
    assert!(repair_affine(&a, &stats, 1.5, &buf, 8).is_err());
}

#[test]
fn repair_rejects_mismatched_statistics() {
    let a = nn::build_model(&mlp(), 1);
    let wide_arch = ModelArch::new(ArchId::SmallMlp, 2, 3, vec![6]).unwrap();
    let wide = nn::build_model(&wide_arch, 2);
    let (buf, _) = filled_buffer(6, 8, 3, 3.0, 7);
    let wide_stats = collect_activations(&wide, &wide, &buf, 8).unwrap();
    let err = repair_affine(&a, &wide_stats, 0.5, &buf, 8).unwrap_err();
    assert!(err.to_string().contains("do not match"), "got: {}", err);
}

/// Merging a network with itself is a fixed point: the match is the
/// identity, the blend returns the same weights, and the repair finds
/// nothing to correct.
#[test]
fn merging_a_network_with_itself_returns_it_bitwise() {
    let theta = nn::build_model(&mlp(), 4);
    let (buf, _) = filled_buffer(6, 8, 3, 0.0, 9);
    let out = clewi_task_step(&theta, &theta, &buf, 0.5, 8).unwrap();
    assert!(out.permutation.is_identity());
    assert_bitwise_eq(&out.merged, &theta, "self-merge");
    for (_, corr) in out.matched_corr {
        assert!((corr - 1.0).abs() < 1e-9);
    }
}

#[test]
fn self_merge_of_normalized_network_only_reestimates_running_stats() {
    let theta = nn::build_model(&convnet(), 4);
    let (buf, _) = filled_buffer(64, 4, 3, 3.0, 9);
    let out = clewi_task_step(&theta, &theta, &buf, 0.5, 8).unwrap();
    assert!(out.permutation.is_identity());
    let expected = update_batchnorm(&theta, &buf, 8).unwrap();
    assert_bitwise_eq(&out.merged, &expected, "self-merge with statistics refresh");
}

/// End-to-end merge of two independently initialized networks: the result
/// is finite, same-shaped, carries a valid permutation, and its hidden
/// moments still hit the convex targets measured on the aligned endpoints.
#[test]
fn task_step_merges_independent_networks_and_repairs_moments() {
    let arch = mlp();
    let theta = nn::build_model(&arch, 31);
    let prev = nn::build_model(&arch, 32);
    let alpha = 0.3f32;
    let (buf, xs) = filled_buffer(6, 10, 3, 3.0, 33);
    let out = clewi_task_step(&theta, &prev, &buf, alpha, 8).unwrap();

    assert!(out.merged.is_all_finite());
    assert_eq!(out.merged.arch(), &arch);
    let spec = PermutationSpec::of(&arch);
    out.permutation.validate(&spec).unwrap();
    assert_eq!(out.matched_corr.len(), spec.groups.len());
    for &(_, corr) in &out.matched_corr {
        assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&corr), "correlation {}", corr);
    }

    let aligned = apply_permutation(&prev, &out.permutation).unwrap();
    let ma = mlp_hidden_moments(&theta, &xs);
    let mb = mlp_hidden_moments(&aligned, &xs);
    let mr = mlp_hidden_moments(&out.merged, &xs);
    for g in 0..2 {
        let t_mean = blend(&ma[g].0, &mb[g].0, alpha as f64);
        let t_var = blend(&ma[g].1, &mb[g].1, alpha as f64);
        for c in 0..t_mean.len() {
            assert!((mr[g].0[c] - t_mean[c]).abs() < 1e-3, "layer {} channel {} mean", g, c);
            assert!(((mr[g].1[c] - t_var[c]) / t_var[c]).abs() < 0.05, "layer {} channel {} var", g, c);
        }
    }
}

/// For normalized networks the pipeline is: match, align, blend, then
/// re-estimate the running statistics on the buffer.
#[test]
fn task_step_on_normalized_network_reestimates_running_stats() {
    let arch = convnet();
    let theta = nn::build_model(&arch, 41);
    let prev = nn::build_model(&arch, 42);
    let (buf, _) = filled_buffer(64, 4, 3, 3.0, 43);
    let out = clewi_task_step(&theta, &prev, &buf, 0.3, 8).unwrap();

    assert!(out.merged.is_all_finite());
    let aligned = apply_permutation(&prev, &out.permutation).unwrap();
    let pre_repair = interpolate(&theta, &aligned, 0.3).unwrap();
    let expected = update_batchnorm(&pre_repair, &buf, 8).unwrap();
    assert_bitwise_eq(&out.merged, &expected, "blend followed by statistics refresh");
}

#[test]
fn task_step_at_alpha_zero_keeps_the_new_network() {
    let arch = mlp();
    let theta = nn::build_model(&arch, 51);
    let prev = nn::build_model(&arch, 52);
    let (buf, _) = filled_buffer(6, 8, 3, 3.0, 53);
    let out = clewi_task_step(&theta, &prev, &buf, 0.0, 8).unwrap();
    assert_bitwise_eq(&out.merged, &theta, "alpha=0 keeps the post-task weights");
}

#[test]
fn matching_rejects_empty_buffers_and_mismatched_networks() {
    let a = nn::build_model(&mlp(), 1);
    let b = nn::build_model(&mlp(), 2);
    let empty = MemoryBuffer::new(8, 0).unwrap();
    assert!(calc_permutation(&a, &b, &empty, 8).is_err());
    assert!(clewi_task_step(&a, &b, &empty, 0.5, 8).is_err());
    let conv = nn::build_model(&convnet(), 3);
    assert!(update_batchnorm(&conv, &empty, 8).is_err());

    let (buf, _) = filled_buffer(6, 8, 3, 3.0, 5);
    let wide = nn::build_model(&ModelArch::new(ArchId::SmallMlp, 2, 3, vec![6]).unwrap(), 4);
    assert!(collect_activations(&a, &wide, &buf, 8).is_err());
    assert!(clewi_task_step(&a, &wide, &buf, 0.5, 8).is_err());
}
