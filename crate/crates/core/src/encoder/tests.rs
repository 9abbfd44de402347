use super::*;
use crate::rng::{normal, rng_for};
use crate::rope::rope3d;
use ndarray::Array2;
use rand::Rng;

fn tiny(stages: &[(usize, usize, usize, usize)]) -> EncoderConfig {
    EncoderConfig {
        stages: stages
            .iter()
            .map(|&(channels, heads, blocks, window)| StageConfig {
                channels,
                heads,
                blocks,
                window,
            })
            .collect(),
        in_channels: UNIFIED_WIDTH,
        out_channels: 5,
        canonical_grid: 0.1,
        rope: RopeConfig::default(),
    }
}

/// `n` points on distinct cells of a 0.1 grid.
fn cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = rng_for(&[seed]);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    while out.len() < n {
        let c = [0; 3].map(|_| rng.random_range(0..6i64));
        if seen.insert(c) {
            out.push(c.map(|v| v as f64 * 0.1 + 0.05 + rng.random_range(-0.02..0.02)));
        }
    }
    out
}

fn features(coords: &[[f64; 3]], seed: u64) -> Array2<f64> {
    let mut rng = rng_for(&[seed, 1]);
    Array2::from_shape_fn((coords.len(), UNIFIED_WIDTH), |(i, j)| {
        if j < 3 {
            coords[i][j]
        } else {
            normal(&mut rng)
        }
    })
}

fn random_like(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for(&[seed, 2]);
    Array2::from_shape_fn((rows, cols), |_| normal(&mut rng))
}

fn loss(enc: &Encoder, params: &Params, x: &Array2<f64>, geom: &Geometry, mask: &[bool], r: &Array2<f64>) -> f64 {
    let (out, _) = enc.forward(params, x.view(), geom, Some(mask)).unwrap();
    (&out * r).sum()
}

fn gradient_check(cfg: EncoderConfig, n: usize) {
    let enc = Encoder::new(cfg).unwrap();
    let mut rng = rng_for(&[11]);
    let mut params = enc.init_params(&mut rng);
    // Non-trivial norms and biases so their gradients are exercised.
    for t in params.tensors.iter_mut() {
        if t.shape.len() == 1 {
            t.data.iter_mut().for_each(|v| *v += 0.1 * normal(&mut rng));
        }
    }
    let coords = cloud(n, 5);
    let x = features(&coords, 5);
    let geom = enc.geometry(&coords, 0.1, Some(&mut rng_for(&[6]))).unwrap();
    let mask: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let r = random_like(n, enc.config().out_channels, 7);

    let (_, cache) = enc.forward(&params, x.view(), &geom, Some(&mask)).unwrap();
    let grads = enc.backward(&params, &cache, &geom, r.view()).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for ti in 0..params.tensors.len() {
        for j in 0..params.tensors[ti].data.len() {
            let orig = params.tensors[ti].data[j];
            params.tensors[ti].data[j] = orig + h;
            let up = loss(&enc, &params, &x, &geom, &mask, &r);
            params.tensors[ti].data[j] = orig - h;
            let down = loss(&enc, &params, &x, &geom, &mask, &r);
            params.tensors[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors[ti].data[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < 1e-4,
                "{}[{j}]: analytic {analytic} numeric {numeric}",
                params.tensors[ti].name
            );
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn gradient_matches_central_differences_single_stage() {
    gradient_check(tiny(&[(6, 1, 1, 16)]), 12);
}

#[test]
fn gradient_matches_central_differences_two_stages() {
    gradient_check(tiny(&[(12, 2, 2, 4), (12, 2, 1, 4)]), 14);
}

#[test]
fn zero_upstream_gives_zero_gradient_and_doubling_doubles() {
    let enc = Encoder::new(tiny(&[(12, 2, 1, 4), (12, 2, 1, 4)])).unwrap();
    let params = enc.init_params(&mut rng_for(&[1]));
    let coords = cloud(20, 2);
    let x = features(&coords, 2);
    let geom = enc.geometry(&coords, 0.1, None::<&mut PfRngAlias>).unwrap();
    let (_, cache) = enc.forward(&params, x.view(), &geom, None).unwrap();
    let zero = enc.backward(&params, &cache, &geom, Array2::zeros((20, 5)).view()).unwrap();
    assert!(zero.scalars().all(|&v| v == 0.0));
    let r = random_like(20, 5, 3);
    let g1 = enc.backward(&params, &cache, &geom, r.view()).unwrap();
    let g2 = enc.backward(&params, &cache, &geom, (&r * 2.0).view()).unwrap();
    for (a, b) in g1.scalars().zip(g2.scalars()) {
        assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

type PfRngAlias = crate::rng::PfRng;

#[test]
fn attention_rows_sum_to_one() {
    let enc = Encoder::new(tiny(&[(12, 2, 2, 5), (12, 2, 1, 3)])).unwrap();
    let params = enc.init_params(&mut rng_for(&[4]));
    let coords = cloud(23, 4);
    let geom = enc.geometry(&coords, 0.1, Some(&mut rng_for(&[4]))).unwrap();
    let (_, cache) = enc.forward(&params, features(&coords, 4).view(), &geom, None).unwrap();
    let sums = cache.attention_row_sums(&geom);
    assert!(!sums.is_empty());
    for s in sums {
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn outputs_follow_a_permutation_of_the_input() {
    let enc = Encoder::new(tiny(&[(12, 2, 2, 4), (12, 2, 1, 4)])).unwrap();
    let params = enc.init_params(&mut rng_for(&[8]));
    let coords = cloud(30, 8);
    let x = features(&coords, 8);
    let mut perm: Vec<usize> = (0..30).collect();
    perm.reverse();
    perm.swap(3, 17);
    let pc: Vec<[f64; 3]> = perm.iter().map(|&i| coords[i]).collect();
    let px = x.select(ndarray::Axis(0), &perm);
    let g = enc.geometry(&coords, 0.1, None::<&mut PfRngAlias>).unwrap();
    let pg = enc.geometry(&pc, 0.1, None::<&mut PfRngAlias>).unwrap();
    let out = enc.features(&params, x.view(), &g).unwrap();
    let pout = enc.features(&params, px.view(), &pg).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        for c in 0..5 {
            assert!((pout[[k, c]] - out[[i, c]]).abs() < 1e-5);
        }
    }
}

#[test]
fn whole_cell_translation_leaves_features_unchanged() {
    let enc = Encoder::new(tiny(&[(12, 2, 2, 4), (12, 2, 1, 4)])).unwrap();
    let params = enc.init_params(&mut rng_for(&[9]));
    let coords = cloud(25, 9);
    let shift = [0.4, -0.8, 1.2];
    let moved: Vec<[f64; 3]> = coords
        .iter()
        .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
        .collect();
    let x = features(&coords, 9);
    let mut mx = x.clone();
    for i in 0..25 {
        for a in 0..3 {
            mx[[i, a]] = moved[i][a];
        }
    }
    let out = enc
        .features(&params, x.view(), &enc.geometry(&coords, 0.1, None::<&mut PfRngAlias>).unwrap())
        .unwrap();
    let mout = enc
        .features(&params, mx.view(), &enc.geometry(&moved, 0.1, None::<&mut PfRngAlias>).unwrap())
        .unwrap();
    for (a, b) in out.iter().zip(mout.iter()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn disabled_rope_equals_zero_position_baseline() {
    let mut on = tiny(&[(12, 2, 1, 4), (12, 2, 1, 4)]);
    on.rope.perturb = false;
    let mut off = on.clone();
    off.rope.enabled = false;
    let enc_on = Encoder::new(on).unwrap();
    let enc_off = Encoder::new(off).unwrap();
    let params = enc_on.init_params(&mut rng_for(&[10]));
    let coords = cloud(18, 10);
    let x = features(&coords, 10);
    let zeros = vec![[0.0; 3]; 18];
    let g0 = enc_on.geometry_with_positions(&coords, 0.1, &zeros).unwrap();
    let g_off = enc_off.geometry(&coords, 0.1, Some(&mut rng_for(&[1]))).unwrap();
    let a = enc_on.features(&params, x.view(), &g0).unwrap();
    let b = enc_off.features(&params, x.view(), &g_off).unwrap();
    assert_eq!(a, b);
}

/// Single window, single block: the encoder output equals a direct
/// evaluation written without caches or tables.
#[test]
fn matches_direct_evaluation() {
    let cfg = tiny(&[(12, 2, 1, 64)]);
    let enc = Encoder::new(cfg.clone()).unwrap();
    let params = enc.init_params(&mut rng_for(&[12]));
    let coords = cloud(9, 12);
    let x = features(&coords, 12);
    let geom = enc.geometry(&coords, 0.1, None::<&mut PfRngAlias>).unwrap();
    let out = enc.features(&params, x.view(), &geom).unwrap();

    let t = |name: &str| params.get(name).unwrap();
    let lin = |x: &[f64], name: &str| -> Vec<f64> {
        let w = t(&format!("{name}.weight"));
        let b = t(&format!("{name}.bias"));
        let (i, o) = (w.shape[0], w.shape[1]);
        (0..o)
            .map(|c| b.data[c] + (0..i).map(|r| x[r] * w.data[r * o + c]).sum::<f64>())
            .collect()
    };
    let ln = |x: &[f64], name: &str| -> Vec<f64> {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        let w = t(&format!("{name}.weight"));
        let b = t(&format!("{name}.bias"));
        x.iter()
            .enumerate()
            .map(|(c, v)| (v - mu) / (var + 1e-5).sqrt() * w.data[c] + b.data[c])
            .collect()
    };
    let n = coords.len();
    let mean: Vec<f64> = (0..3).map(|a| coords.iter().map(|p| p[a]).sum::<f64>() / n as f64).collect();
    let h0: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = x.row(i).to_vec();
            for a in 0..3 {
                row[a] -= mean[a];
            }
            lin(&row, "embed")
        })
        .collect();
    let rope_cfg = RopeConfig {
        head_dim: 6,
        ..cfg.rope.clone()
    };
    let qkv: Vec<Vec<f64>> = h0.iter().map(|r| lin(&ln(r, "stage0.block0.norm1"), "stage0.block0.attn.qkv")).collect();
    let rot = |v: &[f64], i: usize| -> Vec<f64> {
        let p = coords[i].map(|c| c / 0.1);
        v.chunks(6).flat_map(|h| rope3d(h, p, &rope_cfg).unwrap()).collect()
    };
    let q: Vec<Vec<f64>> = (0..n).map(|i| rot(&qkv[i][0..12], i)).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|i| rot(&qkv[i][12..24], i)).collect();
    let v: Vec<Vec<f64>> = (0..n).map(|i| qkv[i][24..36].to_vec()).collect();
    let mut expected = Vec::new();
    for a in 0..n {
        let mut o = vec![0.0; 12];
        for head in 0..2 {
            let r = head * 6..head * 6 + 6;
            let s: Vec<f64> = (0..n)
                .map(|b| q[a][r.clone()].iter().zip(&k[b][r.clone()]).map(|(x, y)| x * y).sum::<f64>() / 6f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for b in 0..n {
                for c in r.clone() {
                    o[c] += s[b].exp() / z * v[b][c];
                }
            }
        }
        let mid: Vec<f64> = lin(&o, "stage0.block0.attn.proj").iter().zip(&h0[a]).map(|(p, r)| p + r).collect();
        let u = lin(&ln(&mid, "stage0.block0.norm2"), "stage0.block0.mlp.fc1");
        let g: Vec<f64> = u.iter().map(|v| v / (1.0 + (-1.702 * v).exp())).collect();
        let blk: Vec<f64> = lin(&g, "stage0.block0.mlp.fc2").iter().zip(&mid).map(|(p, r)| p + r).collect();
        expected.push(lin(&ln(&blk, "stage0.norm"), "head"));
    }
    for a in 0..n {
        for c in 0..5 {
            assert!((out[[a, c]] - expected[a][c]).abs() < 1e-9);
        }
    }
}

#[test]
fn head_dim_must_split_into_three_axes() {
    let err = Encoder::new(tiny(&[(8, 2, 1, 4)])).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("divisible by 6"));
}

#[test]
fn non_finite_parameters_name_the_layer() {
    let enc = Encoder::new(tiny(&[(6, 1, 1, 4)])).unwrap();
    let mut params = enc.init_params(&mut rng_for(&[1]));
    let i = params
        .tensors
        .iter()
        .position(|t| t.name == "stage0.block0.mlp.fc2.bias")
        .unwrap();
    params.tensors[i].data[0] = f64::NAN;
    let coords = cloud(6, 1);
    let geom = enc.geometry(&coords, 0.1, None::<&mut PfRngAlias>).unwrap();
    match enc.forward(&params, features(&coords, 1).view(), &geom, None) {
        Err(Error::NonFinite { layer }) => assert_eq!(layer, "stage0.block0"),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn parameter_names_are_unique_and_ordered() {
    let enc = Encoder::new(EncoderConfig::default()).unwrap();
    let shapes = enc.shapes();
    assert_eq!(shapes[0].0, "embed.weight");
    assert_eq!(shapes.last().unwrap().0, "head.bias");
    let names: std::collections::HashSet<_> = shapes.iter().map(|s| &s.0).collect();
    assert_eq!(names.len(), shapes.len());
}
