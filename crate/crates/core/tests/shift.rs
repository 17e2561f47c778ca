use masm::aware::partner;
use masm::backbone::{BackboneConfig, MODALITIES};
use masm::nn::ParamStore;
use masm::shift::{shift, unshift, MhaBlock, ModalityShift, PatternKind, ShiftPattern, SIGMAS};
use masm::tensor::{Rng, Tape, Tensor, Var};
use proptest::prelude::*;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

fn permutations() -> Vec<[usize; MODALITIES]> {
    let mut out = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    let mut seen = [false; 4];
                    p.iter().for_each(|&x| seen[x] = true);
                    if seen.iter().all(|&s| s) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// Every per-position permutation that never draws from the partner stream.
fn valid_columns() -> Vec<[usize; MODALITIES]> {
    permutations()
        .into_iter()
        .filter(|p| (0..MODALITIES).all(|i| p[i] != partner(i)))
        .collect()
}

fn consts<'t>(tape: &'t Tape, xs: &[Tensor]) -> [Var<'t>; MODALITIES] {
    std::array::from_fn(|i| tape.constant(xs[i].clone()))
}

fn values(vs: &[Var<'_>; MODALITIES]) -> Vec<Tensor> {
    vs.iter().map(|v| v.value()).collect()
}

fn roundtrip(pattern: &ShiftPattern, xs: &[Tensor]) -> (Vec<Tensor>, Vec<Tensor>) {
    let tape = Tape::new();
    let shifted = shift(&consts(&tape, xs), pattern).unwrap();
    let back = unshift(&shifted, pattern).unwrap();
    (values(&shifted), values(&back))
}

#[test]
fn single_position_pattern_is_identity() {
    assert_eq!(ShiftPattern::build(1).columns(), &[[0, 1, 2, 3]]);
}

#[test]
fn generated_columns_are_partner_free_permutations() {
    let perms = permutations();
    for n in [1, 2, 3, 8, 64, 81] {
        let p = ShiftPattern::build(n);
        assert!(p.validate().is_ok());
        for (k, col) in p.columns().iter().enumerate() {
            assert!(perms.contains(col), "column {k} of N={n}");
            for i in 0..MODALITIES {
                assert_ne!(col[i], partner(i), "N={n} position {k}");
            }
        }
    }
    let sources: std::collections::BTreeSet<usize> =
        ShiftPattern::build(64).columns().iter().map(|c| c[0]).collect();
    assert!(sources.iter().all(|s| [0, 1, 2].contains(s)));
}

#[test]
fn the_three_permutations_are_the_full_valid_set_up_to_order() {
    let valid = valid_columns();
    for s in SIGMAS {
        assert!(valid.contains(&s));
    }
    assert_eq!(ShiftPattern::build(3).columns(), &SIGMAS);
}

#[test]
fn three_position_shift_matches_hand_enumeration() {
    let xs: Vec<Tensor> = (0..MODALITIES)
        .map(|i| Tensor::new([3, 1], (0..3).map(|k| (10 * i + k) as f64).collect()).unwrap())
        .collect();
    let (shifted, _) = roundtrip(&ShiftPattern::build(3), &xs);
    let got: Vec<Vec<f64>> = shifted.iter().map(|t| t.data().to_vec()).collect();
    assert_eq!(
        got,
        vec![
            vec![0.0, 11.0, 22.0],
            vec![10.0, 1.0, 32.0],
            vec![20.0, 31.0, 2.0],
            vec![30.0, 21.0, 12.0],
        ]
    );
}

#[test]
fn identity_pattern_leaves_tokens_in_place() {
    let mut rng = Rng::new(1);
    let xs: Vec<Tensor> = (0..MODALITIES).map(|_| random(&[7, 3], &mut rng)).collect();
    let (shifted, _) = roundtrip(&ShiftPattern::identity(7), &xs);
    assert_eq!(shifted, xs);
}

#[test]
fn shift_conserves_the_token_multiset() {
    let mut rng = Rng::new(2);
    let n = 20;
    let xs: Vec<Tensor> = (0..MODALITIES).map(|_| random(&[n, 2], &mut rng)).collect();
    let (shifted, _) = roundtrip(&ShiftPattern::build(n), &xs);
    let rows = |ts: &[Tensor]| {
        let mut r: Vec<Vec<u64>> = ts
            .iter()
            .flat_map(|t| t.data().chunks(2).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect::<Vec<_>>())
            .collect();
        r.sort();
        r
    };
    assert_eq!(rows(&shifted), rows(&xs));
}

#[test]
fn unshift_inverts_shift_over_random_inputs() {
    let mut rng = Rng::new(3);
    let pattern = ShiftPattern::build(27);
    for _ in 0..1000 {
        let xs: Vec<Tensor> = (0..MODALITIES).map(|_| random(&[27, 2], &mut rng)).collect();
        let (shifted, back) = roundtrip(&pattern, &xs);
        assert_eq!(back, xs);
        let tape = Tape::new();
        let un = unshift(&consts(&tape, &xs), &pattern).unwrap();
        let again = shift(&un, &pattern).unwrap();
        assert_eq!(values(&again), xs);
        drop(shifted);
    }
}

#[test]
fn inversion_holds_for_every_token_count_up_to_81() {
    let mut rng = Rng::new(4);
    let valid = valid_columns();
    for n in 1..=81 {
        let xs: Vec<Tensor> = (0..MODALITIES).map(|_| random(&[n, 3], &mut rng)).collect();
        assert_eq!(roundtrip(&ShiftPattern::build(n), &xs).1, xs, "mosaic N={n}");
        let cols = (0..n).map(|_| valid[rng.int_range(0, valid.len() as u64 - 1) as usize]).collect();
        let pattern = ShiftPattern::from_columns(cols).unwrap();
        assert_eq!(roundtrip(&pattern, &xs).1, xs, "random valid N={n}");
    }
}

#[test]
fn inversion_holds_for_every_two_position_pattern() {
    let mut rng = Rng::new(5);
    let valid = valid_columns();
    let xs: Vec<Tensor> = (0..MODALITIES).map(|_| random(&[2, 2], &mut rng)).collect();
    for &a in &valid {
        for &b in &valid {
            let pattern = ShiftPattern::from_columns(vec![a, b]).unwrap();
            assert_eq!(roundtrip(&pattern, &xs).1, xs);
        }
    }
}

#[test]
fn invalid_patterns_are_rejected() {
    for p in permutations() {
        let ok = (0..MODALITIES).all(|i| p[i] != partner(i));
        assert_eq!(ShiftPattern::from_columns(vec![p]).is_ok(), ok, "{p:?}");
    }
    assert!(ShiftPattern::from_columns(vec![[0, 0, 2, 2]]).is_err());
    let tape = Tape::new();
    let xs: Vec<Tensor> = (0..MODALITIES).map(|_| Tensor::zeros([5, 2])).collect();
    assert!(shift(&consts(&tape, &xs), &ShiftPattern::build(4)).is_err());
}

fn zero_output(store: &mut ParamStore, name: &str) {
    let w = format!("{name}.output.weight");
    let d = store.get(store.lookup(&w).unwrap()).shape().to_vec();
    store.set(&w, Tensor::zeros(d)).unwrap();
}

#[test]
fn zero_output_projection_gives_residual_identity() {
    let mut rng = Rng::new(6);
    let mut store = ParamStore::new();
    let block = MhaBlock::new(&mut store, "mha", 8, 4, &mut rng).unwrap();
    zero_output(&mut store, "mha");
    for x in [Tensor::zeros([2, 5, 8]), random(&[2, 5, 8], &mut rng)] {
        let tape = Tape::new();
        let p = store.bind(&tape);
        assert_eq!(block.forward(&p, tape.constant(x.clone())).unwrap().value(), x);
    }
}

#[test]
fn single_token_attention_is_value_projection() {
    let mut rng = Rng::new(7);
    let mut store = ParamStore::new();
    let block = MhaBlock::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
    let x = random(&[1, 1, 4], &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let y = block.forward(&p, tape.constant(x.clone())).unwrap().value();
    let ln = layer_norm(x.data());
    let v = vecmat(&ln, &weight(&store, "mha.value.weight"));
    let o = vecmat(&v, &weight(&store, "mha.output.weight"));
    for c in 0..4 {
        assert!((y.data()[c] - x.data()[c] - o[c]).abs() < 1e-12);
    }
}

fn weight(store: &ParamStore, name: &str) -> Tensor {
    store.get(store.lookup(name).unwrap()).clone()
}

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    (0..n).map(|j| (0..k).map(|i| x[i] * w.data()[i * n + j]).sum()).collect()
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

#[test]
fn three_token_attention_matches_direct_oracle() {
    let mut rng = Rng::new(8);
    let (d, heads) = (6, 2);
    let mut store = ParamStore::new();
    let block = MhaBlock::new(&mut store, "mha", d, heads, &mut rng).unwrap();
    store.set("mha.norm.gamma", random(&[d], &mut rng)).unwrap();
    store.set("mha.norm.beta", random(&[d], &mut rng)).unwrap();
    let x = random(&[1, 3, d], &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let y = block.forward(&p, tape.constant(x.clone())).unwrap().value();

    let (gamma, beta) = (weight(&store, "mha.norm.gamma"), weight(&store, "mha.norm.beta"));
    let ln: Vec<Vec<f64>> = x
        .data()
        .chunks(d)
        .map(|r| layer_norm(r).iter().enumerate().map(|(c, v)| v * gamma.data()[c] + beta.data()[c]).collect())
        .collect();
    let proj = |name: &str| -> Vec<Vec<f64>> { ln.iter().map(|r| vecmat(r, &weight(&store, name))).collect() };
    let (q, k, v) = (proj("mha.query.weight"), proj("mha.key.weight"), proj("mha.value.weight"));
    let dh = d / heads;
    let mut merged = vec![vec![0.0; d]; 3];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                merged[i][c] = (0..3).map(|j| e[j] * v[j][c]).sum::<f64>() / z;
            }
        }
    }
    for i in 0..3 {
        let o = vecmat(&merged[i], &weight(&store, "mha.output.weight"));
        for c in 0..d {
            let want = x.data()[i * d + c] + o[c];
            assert!((y.data()[i * d + c] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn width_must_divide_by_heads() {
    let mut store = ParamStore::new();
    assert!(MhaBlock::new(&mut store, "mha", 6, 4, &mut Rng::new(0)).is_err());
}

fn shift_module(kind: PatternKind, zero: bool) -> (BackboneConfig, ParamStore, ModalityShift) {
    let cfg = BackboneConfig::desk();
    let mut store = ParamStore::new();
    let layer = cfg.depth;
    let ms = ModalityShift::new(&mut store, &cfg, layer, 4, kind, &mut Rng::new(9)).unwrap();
    if zero {
        zero_output(&mut store, &format!("shift.layer{layer}.spatial"));
        zero_output(&mut store, &format!("shift.layer{layer}.modality"));
    }
    (cfg, store, ms)
}

fn bottleneck(cfg: &BackboneConfig, rng: &mut Rng) -> Vec<Tensor> {
    (0..MODALITIES).map(|_| random(&cfg.feature_shape(cfg.depth), rng)).collect()
}

fn run(store: &ParamStore, ms: &ModalityShift, maps: &[Tensor]) -> Tensor {
    let tape = Tape::new();
    let p = store.bind(&tape);
    ms.forward(&p, &consts(&tape, maps)).unwrap().value()
}

#[test]
fn identity_blocks_reduce_to_channel_concat() {
    let (cfg, store, ms) = shift_module(PatternKind::Identity, true);
    let maps = bottleneck(&cfg, &mut Rng::new(10));
    let y = run(&store, &ms, &maps);
    let d = maps[0].shape()[3];
    assert_eq!(y.shape(), &[2, 2, 2, 4 * d]);
    for (k, out) in y.data().chunks(4 * d).enumerate() {
        for i in 0..MODALITIES {
            assert_eq!(out[i * d..(i + 1) * d], maps[i].data()[k * d..(k + 1) * d]);
        }
    }
}

#[test]
fn mosaic_shift_changes_the_output() {
    let (cfg, store, mosaic) = shift_module(PatternKind::Mosaic, false);
    let (_, _, identity) = shift_module(PatternKind::Identity, false);
    let maps = bottleneck(&cfg, &mut Rng::new(11));
    let diff = run(&store, &mosaic, &maps).max_abs_diff(&run(&store, &identity, &maps));
    assert!(diff > 0.0);
}

proptest! {
    #[test]
    fn random_valid_patterns_invert(seed in 0u64..10_000, n in 1usize..200) {
        let mut rng = Rng::new(seed);
        let valid = valid_columns();
        let cols = (0..n).map(|_| valid[rng.int_range(0, valid.len() as u64 - 1) as usize]).collect();
        let pattern = ShiftPattern::from_columns(cols).unwrap();
        let xs: Vec<Tensor> = (0..MODALITIES).map(|_| random(&[n, 2], &mut rng)).collect();
        let (_, back) = roundtrip(&pattern, &xs);
        prop_assert_eq!(back, xs);
    }
}
