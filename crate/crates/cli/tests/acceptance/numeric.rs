use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use floorgen::analytics::pca_fit;
use floorgen::control::ControlledModel;
use floorgen::denoiser::{cross_attention, AttentionWeights, TextContext, UNet, UNetConfig};
use floorgen::diffusion::{
    denoising_mse, forward_diffuse, forward_diffuse_batch, gaussian, make_noise_schedule, Conditioning, Denoiser,
};
use floorgen::metrics::{frechet_distance, kid, psnr, ssim, welch_t, FeatureSet, Source, SsimParams};
use floorgen::params::{jitter, seeded_builder};
use floorgen::ImageGrid;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{fail, verdict, Check};

const DRAWS: usize = 10_000;

/// Standardized errors `(mean, variance)` of the closed-form marginal for
/// each `t`, against a schedule recomputed here from the linear betas.
fn forward_z_scores(seed: u64) -> Result<Vec<(f64, f64)>, String> {
    let (steps, b0, b1) = (8usize, 0.1, 0.7);
    let sched = make_noise_schedule(steps, b0, b1).map_err(fail)?;
    let dev = Device::Cpu;
    let z0_value = 1.5f64;
    let z0 = Tensor::full(z0_value, (DRAWS, 1, 1, 1), &dev).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alpha_bar = 1.0;
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        alpha_bar *= 1.0 - (b0 + (b1 - b0) * (t - 1) as f64 / (steps - 1) as f64);
        let eps = gaussian(&mut rng, &[DRAWS, 1, 1, 1], DType::F64, &dev).map_err(fail)?;
        let z: Vec<f64> = forward_diffuse(&z0, t, &eps, &sched)
            .and_then(|s| Ok(s.z.flatten_all()?.to_vec1()?))
            .map_err(fail)?;
        let n = DRAWS as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se_mean = ((1.0 - alpha_bar) / n).sqrt();
        let se_var = (1.0 - alpha_bar) * (2.0 / (n - 1.0)).sqrt();
        out.push((
            (mean - alpha_bar.sqrt() * z0_value) / se_mean,
            (var - (1.0 - alpha_bar)) / se_var,
        ));
    }
    Ok(out)
}

/// The verdict uses seed 0 only. The other seeds calibrate it: sixteen
/// simultaneous 3-SE checks trip about 4% of the time on a correct sampler.
pub fn forward_statistics() -> Check {
    let z = forward_z_scores(0)?;
    let (t_worst, worst) = z
        .iter()
        .enumerate()
        .map(|(i, (m, v))| (i + 1, m.abs().max(v.abs())))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, 0.0));
    let seeds = 200u64;
    let mut all = Vec::new();
    let mut tripped = 0;
    for s in 1..=seeds {
        let zs = forward_z_scores(s)?;
        if zs.iter().any(|(m, v)| m.abs() > 3.0 || v.abs() > 3.0) {
            tripped += 1;
        }
        all.extend(zs.into_iter().flat_map(|(m, v)| [m, v]));
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    verdict(
        worst <= 3.0,
        format!(
            "{DRAWS} draws per t in 1..=8, seed 0: worst deviation {worst:.2} SE at t = {t_worst} (bound 3); calibration over seeds 1..={seeds}: z mean {mean:.3}, sd {sd:.3}, {tripped} seeds tripped a 3-SE check"
        ),
    )
}

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all().and_then(|t| t.to_vec1()).expect("f64 tensor")
}

fn rel_err(fd: &[f64], ad: &[f64]) -> f64 {
    let num: f64 = fd.iter().zip(ad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = ad.iter().map(|v| v * v).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

const H: f64 = 1e-6;

/// Central differences of `loss` against its autograd gradient over every
/// coordinate of `vars`.
fn check_all_coordinates(vars: &[Var], loss: &dyn Fn() -> candle_core::Result<Tensor>) -> Result<(f64, usize), String> {
    let l = loss().map_err(fail)?;
    let grads = l.backward().map_err(fail)?;
    let (mut fd, mut ad) = (Vec::new(), Vec::new());
    for var in vars {
        let g = grads
            .get(var.as_tensor())
            .map(to_vec)
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let orig = var.as_tensor().copy().map_err(fail)?;
        let base = to_vec(&orig);
        for (i, gi) in g.iter().enumerate() {
            let at = |d: f64| -> Result<f64, String> {
                let mut v = base.clone();
                v[i] += d;
                var.set(&Tensor::from_vec(v, orig.shape(), orig.device()).map_err(fail)?)
                    .map_err(fail)?;
                loss().and_then(|t| t.to_scalar::<f64>()).map_err(fail)
            };
            let (up, down) = (at(H)?, at(-H)?);
            fd.push((up - down) / (2.0 * H));
            ad.push(*gi);
        }
        var.set(&orig).map_err(fail)?;
    }
    Ok((rel_err(&fd, &ad), fd.len()))
}

/// Like [`check_all_coordinates`] for large maps: per variable, the coordinate
/// with the largest gradient, plus three random whole-map directions.
fn check_sampled(vm: &VarMap, loss: &dyn Fn() -> candle_core::Result<Tensor>) -> Result<(f64, usize), String> {
    let mut named: Vec<(String, Var)> = vm
        .data()
        .lock()
        .unwrap()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let l = loss().map_err(fail)?;
    let grads = l.backward().map_err(fail)?;
    let origs: Vec<Tensor> = named
        .iter()
        .map(|(_, v)| v.as_tensor().copy())
        .collect::<candle_core::Result<_>>()
        .map_err(fail)?;
    let gs: Vec<Vec<f64>> = named
        .iter()
        .map(|(_, v)| {
            grads
                .get(v.as_tensor())
                .map(to_vec)
                .unwrap_or_else(|| vec![0.0; v.elem_count()])
        })
        .collect();
    let eval = || loss().and_then(|t| t.to_scalar::<f64>()).map_err(fail);
    let (mut fd, mut ad) = (Vec::new(), Vec::new());
    for (((_, var), orig), g) in named.iter().zip(&origs).zip(&gs) {
        let Some((i, gi)) = g.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())) else {
            continue;
        };
        let base = to_vec(orig);
        let at = |d: f64| -> Result<f64, String> {
            let mut v = base.clone();
            v[i] += d;
            var.set(&Tensor::from_vec(v, orig.shape(), orig.device()).map_err(fail)?)
                .map_err(fail)?;
            eval()
        };
        let (up, down) = (at(H)?, at(-H)?);
        var.set(orig).map_err(fail)?;
        fd.push((up - down) / (2.0 * H));
        ad.push(*gi);
    }
    let coord = rel_err(&fd, &ad);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut dfd, mut dad) = (Vec::new(), Vec::new());
    for _ in 0..3 {
        let dirs: Vec<Vec<f64>> = gs
            .iter()
            .map(|g| (0..g.len()).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let norm = dirs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let shift = |s: f64| -> Result<(), String> {
            for (((_, var), orig), d) in named.iter().zip(&origs).zip(&dirs) {
                let v: Vec<f64> = to_vec(orig).iter().zip(d).map(|(o, d)| o + s * d / norm).collect();
                var.set(&Tensor::from_vec(v, orig.shape(), orig.device()).map_err(fail)?)
                    .map_err(fail)?;
            }
            Ok(())
        };
        shift(H)?;
        let up = eval()?;
        shift(-H)?;
        let down = eval()?;
        for ((_, var), orig) in named.iter().zip(&origs) {
            var.set(orig).map_err(fail)?;
        }
        dfd.push((up - down) / (2.0 * H));
        dad.push(
            gs.iter()
                .flatten()
                .zip(dirs.iter().flatten())
                .map(|(g, d)| g * d / norm)
                .sum(),
        );
    }
    Ok((coord.max(rel_err(&dfd, &dad)), fd.len() + dfd.len()))
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    gaussian(rng, shape, DType::F64, &Device::Cpu).expect("gaussian")
}

fn tiny_unet() -> UNetConfig {
    UNetConfig {
        latent_channels: 4,
        base_channels: 8,
        channel_mults: vec![1, 2],
        attention_resolutions: vec![1, 2],
        transformer_depth: 1,
        time_embed_dim: 16,
        context_dim: 6,
        norm_groups: 4,
    }
}

fn jitter_varmap(vm: &VarMap, seed: u64, std: f64) -> Result<(), String> {
    let data = vm.data().lock().unwrap();
    let current: HashMap<String, Tensor> = data.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    let moved = jitter(&current, seed, std).map_err(fail)?;
    for (k, v) in data.iter() {
        v.set(&moved[k]).map_err(fail)?;
    }
    Ok(())
}

pub fn gradient_fidelity() -> Check {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // attention: weights and both inputs are variables
    let (b, n, d, l, c, inner) = (2, 5, 4, 3, 6, 4);
    let vars: Vec<Var> = [
        vec![inner, d],
        vec![inner, c],
        vec![inner, c],
        vec![d, inner],
        vec![b, n, d],
        vec![b, l, c],
    ]
    .iter()
    .map(|s| Var::from_tensor(&randn(&mut rng, s).affine(0.7, 0.0).unwrap()).unwrap())
    .collect();
    let mask = Tensor::from_vec(vec![1.0f64, 1.0, 1.0, 1.0, 1.0, 0.0], (b, l), &dev).map_err(fail)?;
    let probe = randn(&mut rng, &[b, n, d]);
    let attn_loss = || -> candle_core::Result<Tensor> {
        let t = |i: usize| vars[i].as_tensor().clone();
        let w = AttentionWeights::from_matrices(t(0), t(1), t(2), t(3)).map_err(candle_core::Error::wrap)?;
        let out = cross_attention(&t(4), &t(5), Some(&mask), &w).map_err(candle_core::Error::wrap)?;
        (out * &probe)?.sum_all()
    };
    let (attn_err, attn_n) = check_all_coordinates(&vars, &attn_loss)?;

    // stage-1 loss with respect to the denoiser
    let cfg = tiny_unet();
    let vm = VarMap::new();
    let unet = UNet::new(&cfg, seeded_builder(&vm, 1, DType::F64, &dev)).map_err(fail)?;
    jitter_varmap(&vm, 2, 0.05)?;
    let sched = make_noise_schedule(8, 0.1, 0.7).map_err(fail)?;
    let ts = [2usize, 7];
    let z0 = randn(&mut rng, &[2, 4, 4, 4]);
    let eps = randn(&mut rng, &[2, 4, 4, 4]);
    let z_t = forward_diffuse_batch(&z0, &ts, &eps, &sched).map_err(fail)?;
    let text = TextContext::new(randn(&mut rng, &[2, 3, 6]), None);
    let s1_loss = || -> candle_core::Result<Tensor> {
        let pred = unet.forward(&z_t, &ts, &text).map_err(candle_core::Error::wrap)?;
        denoising_mse(&eps, &pred).map_err(candle_core::Error::wrap)
    };
    let (s1_err, s1_n) = check_sampled(&vm, &s1_loss)?;

    // stage-2 loss with respect to the control branch over a jittered frozen base
    let base: HashMap<String, Tensor> = {
        let data = vm.data().lock().unwrap();
        data.iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().copy().unwrap()))
            .collect()
    };
    let cm = ControlledModel::clone_and_freeze(&base, &cfg, 4, 3, DType::F64, &dev).map_err(fail)?;
    jitter_varmap(cm.vars(), 4, 0.05)?;
    let mask = Tensor::from_vec(
        (0..2 * 16 * 16)
            .map(|i| f64::from(((i / 16) % 16 > 3) as u8))
            .collect::<Vec<_>>(),
        (2, 1, 16, 16),
        &dev,
    )
    .map_err(fail)?;
    let cond = Conditioning::with_hint(text.clone(), mask);
    let s2_loss = || -> candle_core::Result<Tensor> {
        let pred = cm.predict_eps(&z_t, &ts, &cond).map_err(candle_core::Error::wrap)?;
        denoising_mse(&eps, &pred).map_err(candle_core::Error::wrap)
    };
    let (s2_err, s2_n) = check_sampled(cm.vars(), &s2_loss)?;

    let worst = attn_err.max(s1_err).max(s2_err);
    verdict(
        worst < 1e-4,
        format!(
            "relative error: attention {attn_err:.2e} ({attn_n} coords), stage 1 {s1_err:.2e} ({s1_n} probes), stage 2 {s2_err:.2e} ({s2_n} probes); bound 1e-4"
        ),
    )
}

fn features(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64, source: Source) -> FeatureSet {
    FeatureSet {
        features: (0..n)
            .map(|_| (0..d).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect())
            .collect(),
        extractor_id: "acceptance".into(),
        source,
    }
}

fn brute_kid(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let d = x[0].len() as f64;
    let k = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        (dot / d + 1.0).powi(3)
    };
    let (n, m) = (x.len() as f64, y.len() as f64);
    let mut sxx = 0.0;
    for (i, a) in x.iter().enumerate() {
        for (j, b) in x.iter().enumerate() {
            if i != j {
                sxx += k(a, b);
            }
        }
    }
    let mut syy = 0.0;
    for (i, a) in y.iter().enumerate() {
        for (j, b) in y.iter().enumerate() {
            if i != j {
                syy += k(a, b);
            }
        }
    }
    let mut sxy = 0.0;
    for a in x {
        for b in y {
            sxy += k(a, b);
        }
    }
    sxx / (n * (n - 1.0)) + syy / (m * (m - 1.0)) - 2.0 * sxy / (n * m)
}

#[derive(serde::Deserialize)]
struct WelchFixture {
    a: Vec<f64>,
    b: Vec<f64>,
    t: f64,
    df: f64,
    p: f64,
}

pub fn metric_analytics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut notes = Vec::new();

    let d = 6;
    let mu1 = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mu2 = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = &a * a.transpose() + DMatrix::identity(d, d);
    let fid = frechet_distance(&mu1, &s, &mu2, &s).map_err(fail)?;
    let fid_err = (fid - (&mu1 - &mu2).norm_squared()).abs();
    if fid_err > 1e-6 {
        return Err(format!("Fréchet equal-covariance case off by {fid_err:.3e}"));
    }
    notes.push(format!("FID {fid_err:.1e}"));

    let x = ImageGrid::from_fn(24, 24, 3, |_, _, _| rng.random::<f32>());
    let ss = ssim(&x, &x, &SsimParams::default()).map_err(fail)?;
    if (ss - 1.0).abs() > 1e-9 {
        return Err(format!("SSIM(x, x) = {ss}"));
    }
    notes.push(format!("SSIM(x,x)-1 {:.1e}", (ss - 1.0).abs()));

    let zero = ImageGrid::filled(8, 8, 3, 0.0);
    let half = ImageGrid::filled(8, 8, 3, 0.5);
    let p = psnr(&zero, &half, 1.0).map_err(fail)?;
    if (p - 6.0206).abs() > 1e-6 {
        return Err(format!("PSNR hand case gave {p}"));
    }
    notes.push(format!("PSNR {p:.7} dB"));

    let mut kid_err = 0.0f64;
    for n in 2..=10 {
        for m in [2, n, 10] {
            let fx = features(&mut rng, n, 5, 0.0, Source::Real);
            let fy = features(&mut rng, m, 5, 0.4, Source::Generated);
            let got = kid(&fx, &fy, 3).map_err(fail)?;
            let want = brute_kid(&fx.features, &fy.features);
            kid_err = kid_err.max((got - want).abs());
        }
    }
    if kid_err > 1e-9 {
        return Err(format!("KID differs from the double sums by {kid_err:.3e}"));
    }
    notes.push(format!("KID {kid_err:.1e}"));

    let fixtures: Vec<WelchFixture> =
        serde_json::from_str(include_str!("../../../core/tests/fixtures/welch.json")).map_err(fail)?;
    let mut welch_err = 0.0f64;
    for f in &fixtures {
        let r = welch_t(&f.a, &f.b).map_err(fail)?;
        welch_err = welch_err
            .max((r.t - f.t).abs())
            .max((r.df - f.df).abs())
            .max((r.p - f.p).abs());
    }
    if welch_err > 1e-9 {
        return Err(format!("Welch fixtures off by {welch_err:.3e}"));
    }
    notes.push(format!("Welch {welch_err:.1e} over {} scipy fixtures", fixtures.len()));
    Ok(notes.join(", "))
}

pub fn pca() -> Check {
    let m = pca_fit(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]], 1).map_err(fail)?;
    let s = 0.5f64.sqrt();
    let c = &m.components[0];
    let aligned = ((c[0] - s).abs() < 1e-12 && (c[1] - s).abs() < 1e-12)
        || ((c[0] + s).abs() < 1e-12 && (c[1] + s).abs() < 1e-12);
    let ratio = m.explained_ratio()[0];
    if !aligned || (ratio - 1.0).abs() > 1e-12 {
        return Err(format!("hand case: component {c:?}, explained {ratio}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d) = (60, 9);
    let mix = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let data: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            (&mix * z).iter().map(|v| v + 3.0).collect()
        })
        .collect();
    let full = pca_fit(&data, d).map_err(fail)?;
    let cm = DMatrix::from_fn(d, d, |i, j| full.components[i][j]);
    let ortho = (&cm * cm.transpose() - DMatrix::identity(d, d)).amax();
    let back = full
        .inverse_transform(&full.transform(&data).map_err(fail)?)
        .map_err(fail)?;
    let round = data
        .iter()
        .flatten()
        .zip(back.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    verdict(
        ortho < 1e-8 && round < 1e-6,
        format!("hand case ±(1,1)/√2 at 100%; ‖CCᵀ−I‖∞ = {ortho:.1e}; round trip {round:.1e} ({n}x{d}, k = {d})"),
    )
}
