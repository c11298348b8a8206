use blockdance_core::dit::BlockFeature;
use blockdance_core::{RngStream, Tensor};
use blockdance_profiler::{
    cosine_matrix, l2_surface, latent_to_image, pca_project, ssim, ssim_with, FeatureLog, SsimParams,
};
use proptest::prelude::*;

fn random_log(seed: u64, steps: usize, depth: usize, t: usize, d: usize) -> FeatureLog {
    let mut rng = RngStream::new(seed, 0);
    let mut log = FeatureLog::new(depth);
    for s in 0..steps {
        for b in 1..=depth {
            let values = rng.gaussian(&[t, d]);
            log.insert(s, BlockFeature { block_index: b, timestep: 1000 - s, values }).unwrap();
        }
    }
    log
}

fn l2_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (t, d) = a.dims2().unwrap();
    let mut acc = 0.0;
    for i in 0..t {
        for j in 0..d {
            let diff = a.data()[i * d + j] - b.data()[i * d + j];
            acc += diff.powi(2);
        }
    }
    acc.sqrt()
}

fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let mut dot = 0.0;
    for k in 0..a.len() {
        dot += (a[k] / na) * (b[k] / nb);
    }
    dot
}

// Two-pass window statistics straight from the SSIM definition.
fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize, win: usize) -> f64 {
    let lo = x.iter().chain(y).cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().chain(y).cloned().fold(f64::NEG_INFINITY, f64::max);
    let l = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (0.01 * l) * (0.01 * l);
    let c2 = (0.03 * l) * (0.03 * l);
    let mut scores = Vec::new();
    for r in 0..=h - win {
        for c in 0..=w - win {
            let px: Vec<f64> = (0..win * win).map(|k| x[(r + k / win) * w + c + k % win]).collect();
            let py: Vec<f64> = (0..win * win).map(|k| y[(r + k / win) * w + c + k % win]).collect();
            let n = px.len() as f64;
            let mx = px.iter().sum::<f64>() / n;
            let my = py.iter().sum::<f64>() / n;
            let vx = px.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
            let vy = py.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            let cxy = px.iter().zip(&py).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
            scores.push((2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[test]
fn l2_surface_matches_scalar_oracle() {
    let log = random_log(3, 6, 4, 5, 7);
    let surf = l2_surface(&log).unwrap();
    assert_eq!(surf.values.shape(), &[5, 4]);
    for s in 0..5 {
        for b in 1..=4 {
            let want = l2_oracle(&log.get(s, b).unwrap().values, &log.get(s + 1, b).unwrap().values);
            assert!((surf.values.data()[s * 4 + b - 1] - want).abs() <= 1e-10);
        }
    }
}

#[test]
fn l2_surface_cases() {
    let mut log = FeatureLog::new(2);
    let e = |k: usize| {
        let mut v = vec![0.0; 4];
        v[k] = 1.0;
        Tensor::new(vec![2, 2], v).unwrap()
    };
    for (s, (v1, v2)) in [(e(0), e(3)), (e(1), e(3))].into_iter().enumerate() {
        log.insert(s, BlockFeature { block_index: 1, timestep: 9 - s, values: v1 }).unwrap();
        log.insert(s, BlockFeature { block_index: 2, timestep: 9 - s, values: v2 }).unwrap();
    }
    let surf = l2_surface(&log).unwrap();
    assert_eq!(surf.values.data()[0], 2f64.sqrt());
    assert_eq!(surf.values.data()[1], 0.0);
}

#[test]
fn incomplete_logs_are_rejected() {
    let mut log = random_log(1, 3, 3, 2, 2);
    let partial = {
        let mut p = FeatureLog::new(3);
        for (s, f) in log.iter() {
            if !(s == 1 && f.block_index == 2) {
                p.insert(s, f.clone()).unwrap();
            }
        }
        p
    };
    assert!(matches!(l2_surface(&partial), Err(blockdance_core::Error::Completeness(_))));
    log.insert(5, log.get(0, 1).unwrap().clone()).unwrap();
    assert!(l2_surface(&log).is_err());
    assert!(cosine_matrix(&partial, 2).is_err());
}

#[test]
fn constant_features_give_zero_surface() {
    let mut log = FeatureLog::new(3);
    let v = RngStream::new(2, 0).gaussian(&[4, 4]);
    for s in 0..5 {
        for b in 1..=3 {
            log.insert(s, BlockFeature { block_index: b, timestep: 0, values: v.clone() }).unwrap();
        }
    }
    assert!(l2_surface(&log).unwrap().values.data().iter().all(|&x| x == 0.0));
}

#[test]
fn cosine_matrix_matches_oracle() {
    let log = random_log(7, 8, 3, 4, 5);
    let m = cosine_matrix(&log, 2).unwrap();
    for a in 0..8 {
        for b in 0..8 {
            let want = if a == b {
                1.0
            } else {
                cosine_oracle(log.get(a, 2).unwrap().values.data(), log.get(b, 2).unwrap().values.data())
            };
            let got = m.values.data()[a * 8 + b];
            assert!((got - want).abs() <= 1e-9);
            assert!((got - m.values.data()[b * 8 + a]).abs() <= 1e-9);
            assert!((-1.0..=1.0).contains(&got));
        }
    }
}

#[test]
fn cosine_matrix_special_vectors() {
    let mut log = FeatureLog::new(1);
    let rows = [vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0], vec![-2.0, 0.0]];
    for (s, r) in rows.iter().enumerate() {
        log.insert(s, BlockFeature { block_index: 1, timestep: 0, values: Tensor::new(vec![1, 2], r.clone()).unwrap() }).unwrap();
    }
    let m = cosine_matrix(&log, 1).unwrap();
    let v = |a: usize, b: usize| m.values.data()[a * 4 + b];
    assert_eq!(v(0, 1), 0.0);
    assert_eq!(v(2, 2), 1.0);
    assert_eq!(v(2, 0), 0.0);
    assert_eq!(v(0, 3), -1.0);
}

#[test]
fn ssim_matches_oracle_and_basic_cases() {
    let mut rng = RngStream::new(11, 0);
    for (h, w) in [(8, 8), (16, 16), (12, 19)] {
        let a = rng.gaussian(&[h, w]);
        let noise = rng.gaussian(&[h, w]).scale(0.3);
        let b = a.add(&noise).unwrap();
        let got = ssim(&a, &b).unwrap();
        let want = ssim_oracle(a.data(), b.data(), h, w, 8);
        assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
    }
    // Tiling a zero-mean 8×8 tile makes every 8×8 window zero-mean.
    let tile = rng.gaussian(&[64]);
    let mean = tile.sum() / 64.0;
    let img = Tensor::new(vec![16, 16], (0..256).map(|k| tile.data()[(k / 16 % 8) * 8 + k % 8] - mean).collect()).unwrap();
    assert!(ssim(&img, &img.scale(-1.0)).unwrap() <= 0.0);
    assert!(ssim(&Tensor::zeros(&[7, 9]), &Tensor::zeros(&[7, 9])).is_err());
    assert_eq!(ssim(&Tensor::filled(&[8, 8], 2.0), &Tensor::filled(&[8, 8], 2.0)).unwrap(), 1.0);
}

#[test]
fn multichannel_ssim_is_channel_mean() {
    let mut rng = RngStream::new(5, 0);
    let a = rng.gaussian(&[10, 10, 2]);
    let b = rng.gaussian(&[10, 10, 2]);
    let range = blockdance_profiler::observed_range(&a, &b);
    let p = SsimParams { data_range: Some(range), ..SsimParams::default() };
    let chan = |t: &Tensor, c: usize| Tensor::new(vec![10, 10], t.data().iter().skip(c).step_by(2).copied().collect()).unwrap();
    let want = (ssim_with(&chan(&a, 0), &chan(&b, 0), &p).unwrap() + ssim_with(&chan(&a, 1), &chan(&b, 1), &p).unwrap()) / 2.0;
    assert!((ssim(&a, &b).unwrap() - want).abs() <= 1e-12);
}

#[test]
fn latent_unpatchify_layout() {
    // 4 tokens on a 2×2 grid, 2×2 patches, 1 channel.
    let latent = Tensor::new(vec![4, 4], (0..16).map(f64::from).collect()).unwrap();
    let img = latent_to_image(&latent, 2, 1).unwrap();
    assert_eq!(img.shape(), &[4, 4]);
    assert_eq!(img.row(0), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(img.row(1), &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(img.row(2), &[8.0, 9.0, 12.0, 13.0]);
    assert!(latent_to_image(&latent, 3, 1).is_err());
}

#[test]
fn pca_exact_subspace_reconstructs() {
    let mut rng = RngStream::new(9, 0);
    let basis = rng.gaussian(&[3, 10]);
    let coords = rng.gaussian(&[40, 3]);
    let x = coords.matmul(&basis).unwrap();
    let p = pca_project(&x, 3).unwrap();
    assert!(p.reconstruct().unwrap().max_abs_diff(&x).unwrap() <= 1e-9);
    assert!(p.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    let reduced = pca_project(&x, 5).unwrap();
    assert_eq!(reduced.eigenvalues.len(), 3);
    assert_eq!(reduced.projected.shape(), &[40, 3]);
}

#[test]
fn pca_sign_convention_and_orthonormality() {
    let x = RngStream::new(4, 0).gaussian(&[30, 6]);
    let p = pca_project(&x, 4).unwrap();
    for r in 0..4 {
        let row = p.components.row(r);
        let pivot = row.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(pivot > 0.0);
        for s in 0..4 {
            let dot: f64 = row.iter().zip(p.components.row(s)).map(|(a, b)| a * b).sum();
            assert!((dot - if r == s { 1.0 } else { 0.0 }).abs() <= 1e-10);
        }
    }
    assert_eq!(pca_project(&x, 4).unwrap(), p);
}

#[test]
fn pca_isotropic_captured_variance() {
    let x = RngStream::new(12, 0).gaussian(&[20_000, 16]);
    for k in [2, 4, 8] {
        let frac = pca_project(&x, k).unwrap().captured_fraction();
        let want = k as f64 / 16.0;
        assert!((frac - want).abs() <= 0.1 * want, "k={k}: {frac}");
    }
}

#[test]
fn pca_rejects_bad_k() {
    let x = Tensor::zeros(&[3, 5]);
    assert!(pca_project(&x, 0).is_err());
    assert!(pca_project(&x, 4).is_err());
    assert_eq!(pca_project(&x, 2).unwrap().eigenvalues.len(), 0);
}

proptest! {
    #[test]
    fn pca_projection_is_contractive(seed in any::<u64>(), k in 1usize..5) {
        let x = RngStream::new(seed, 1).gaussian(&[12, 5]);
        let p = pca_project(&x, k).unwrap();
        let kk = p.eigenvalues.len();
        for a in 0..12 {
            for b in 0..12 {
                let orig: f64 = x.row(a).iter().zip(x.row(b)).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                let proj: f64 = (0..kk).map(|j| (p.projected.data()[a * kk + j] - p.projected.data()[b * kk + j]).powi(2)).sum::<f64>().sqrt();
                prop_assert!(proj <= orig + 1e-9);
            }
        }
    }

    #[test]
    fn cosine_matrix_is_permutation_equivariant(seed in any::<u64>(), rot in 0usize..5) {
        let log = random_log(seed, 5, 1, 2, 3);
        let mut permuted = FeatureLog::new(1);
        for s in 0..5 {
            let f = log.get((s + rot) % 5, 1).unwrap().clone();
            permuted.insert(s, f).unwrap();
        }
        let m = cosine_matrix(&log, 1).unwrap();
        let pm = cosine_matrix(&permuted, 1).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                prop_assert_eq!(pm.values.data()[a * 5 + b], m.values.data()[((a + rot) % 5) * 5 + (b + rot) % 5]);
            }
        }
    }

    #[test]
    fn ssim_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 2);
        let a = rng.gaussian(&[9, 11]);
        let b = rng.gaussian(&[9, 11]);
        let s1 = ssim(&a, &b).unwrap();
        prop_assert!((s1 - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s1));
    }
}
