use std::sync::Arc;

use pillarnext::conv::{build_rulebook, dense_conv_oracle, init_params, ConvParams, KernelSpec};
use pillarnext::sample::{random_layout, random_matrix, random_sparse};
use pillarnext::train::gradcheck::{grad_check, GradCheckCase, GradCheckOptions};
use pillarnext::{Coord, DenseArray, Error, Matrix, NormMode, ParamStore, Result, SparseTensor, Tape};
use proptest::prelude::*;

fn kernels() -> Vec<KernelSpec> {
    let mut v: Vec<KernelSpec> = (1..=3).map(|m| KernelSpec::submanifold(&[3, 3]).with_dilation(m)).collect();
    v.push(KernelSpec::submanifold(&[1, 9]));
    v.push(KernelSpec::submanifold(&[9, 1]));
    v.push(KernelSpec::submanifold(&[5, 5]));
    v
}

fn run_conv(x: &SparseTensor<f64>, spec: &KernelSpec, p: &ConvParams<f64>) -> Result<SparseTensor<f64>> {
    let mut tape = Tape::new(NormMode::Eval);
    let xv = tape.sparse_input(x);
    let rb = Arc::new(build_rulebook(x.layout(), spec)?);
    let w = tape.constant(p.weight.clone());
    let b = p.bias.as_ref().map(|b| tape.constant(Matrix::from_vec(1, b.len(), b.clone()).unwrap()));
    let y = tape.conv(&xv, &rb, w, b)?;
    Ok(tape.tensor(&y))
}

/// `max |a - b| / max |b|` over the sites selected by `mask` (all sites when `None`).
fn rel_err(a: &DenseArray<f64>, b: &DenseArray<f64>, mask: Option<&DenseArray<bool>>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let (batch, c) = (a.shape()[0], a.shape()[1]);
    let sites: usize = a.shape()[2..].iter().product();
    let (mut diff, mut scale) = (0.0f64, 1e-300f64);
    for bi in 0..batch {
        for ch in 0..c {
            for s in 0..sites {
                if mask.is_some_and(|m| !m.as_slice()[bi * sites + s]) {
                    continue;
                }
                let i = (bi * c + ch) * sites + s;
                diff = diff.max((a.as_slice()[i] - b.as_slice()[i]).abs());
                scale = scale.max(b.as_slice()[i].abs());
            }
        }
    }
    diff / scale
}

#[test]
fn identity_kernel_reproduces_input() {
    let x = random_sparse::<f64>(&[12, 12], 2, 0.2, 3, 1).unwrap();
    let spec = KernelSpec::submanifold(&[3, 3]);
    let mut p = ConvParams::zeros(9, 3, 3, false);
    for c in 0..3 {
        p.set_w(4, c, c, 1.0);
    }
    let y = run_conv(&x, &spec, &p).unwrap();
    assert!(y.same_as(&x));
}

#[test]
fn zero_weight_gives_bias() {
    let x = random_sparse::<f64>(&[10, 10], 1, 0.3, 2, 2).unwrap();
    let mut p = ConvParams::zeros(9, 2, 3, true);
    p.bias = Some(vec![0.5, -1.0, 2.0]);
    let y = run_conv(&x, &KernelSpec::submanifold(&[3, 3]), &p).unwrap();
    for r in 0..y.len() {
        assert_eq!(y.features().row(r), &[0.5, -1.0, 2.0]);
    }
}

#[test]
fn submanifold_matches_dense_oracle() {
    let mut seed = 100;
    for spec in kernels() {
        for &n in &[5usize, 9, 16] {
            for &density in &[0.05, 0.2] {
                seed += 1;
                let x = random_sparse::<f64>(&[n, n + 1], 2, density, 3, seed).unwrap();
                let p = init_params::<f64>(&spec, 3, 4, seed);
                let p = ConvParams {
                    bias: Some(vec![0.1, -0.2, 0.3, 0.0]),
                    ..p
                };
                let y = run_conv(&x, &spec, &p).unwrap();
                assert_eq!(y.coords(), x.coords());
                let oracle = dense_conv_oracle(&x.to_dense(), &spec, &p).unwrap();
                let err = rel_err(&y.to_dense(), &oracle, Some(&x.active_mask()));
                assert!(err <= 1e-12, "{spec:?} n={n}: {err}");
            }
        }
    }
}

#[test]
fn spatial_matches_dense_oracle_everywhere() {
    let mut seed = 200;
    for stride in [1, 2] {
        for kernel in [[3usize, 3], [2, 2], [1, 9]] {
            for &n in &[7usize, 16] {
                seed += 1;
                let spec = KernelSpec::spatial(&kernel, stride);
                let x = random_sparse::<f64>(&[n, n], 2, 0.15, 2, seed).unwrap();
                let p = ConvParams {
                    bias: None,
                    ..init_params::<f64>(&spec, 2, 3, seed)
                };
                let y = run_conv(&x, &spec, &p).unwrap();
                let oracle = dense_conv_oracle(&x.to_dense(), &spec, &p).unwrap();
                assert_eq!(y.to_dense().shape(), oracle.shape());
                let err = rel_err(&y.to_dense(), &oracle, None);
                assert!(err <= 1e-12, "{spec:?}: {err}");
            }
        }
    }
}

#[test]
fn column_kernel_matches_dense_oracle() {
    for depth in [1usize, 4, 8] {
        let spec = KernelSpec::column(depth);
        let x = random_sparse::<f64>(&[6, 5, depth], 2, 0.3, 3, depth as u64).unwrap();
        let p = ConvParams {
            bias: None,
            ..init_params::<f64>(&spec, 3, 2, 9)
        };
        let y = run_conv(&x, &spec, &p).unwrap();
        assert_eq!(y.spatial_shape(), &[6, 5, 1]);
        let oracle = dense_conv_oracle(&x.to_dense(), &spec, &p).unwrap();
        assert!(rel_err(&y.to_dense(), &oracle, None) <= 1e-12);
    }
}

#[test]
fn spatial_growth_has_no_phantom_sites() {
    let x = random_sparse::<f64>(&[16, 16], 1, 0.1, 1, 5).unwrap();
    let spec = KernelSpec::spatial(&[3, 3], 2);
    let rb = build_rulebook(x.layout(), &spec).unwrap();
    let mut contributors = vec![0usize; rb.out_coords().len()];
    for k in 0..rb.kernel_volume() {
        for &(_, o) in rb.pairs(k) {
            contributors[o as usize] += 1;
        }
    }
    assert!(contributors.iter().all(|&c| c >= 1));
    let floors: std::collections::BTreeSet<(u32, u32)> =
        x.coords().iter().map(|c| (c.y() / 2, c.x() / 2)).collect();
    assert!(rb.out_coords().len() >= floors.len());
}

#[test]
fn conv_is_linear() {
    let layout = Arc::new(random_layout(&[12, 12], 1, 0.25, 77).unwrap());
    let n = layout.len();
    let xa = SparseTensor::from_layout(layout.clone(), random_matrix::<f64>(n, 3, 1)).unwrap();
    let xb = SparseTensor::from_layout(layout.clone(), random_matrix::<f64>(n, 3, 2)).unwrap();
    let (a, b) = (0.7, -1.3);
    let mut mix = xa.features().map(|v| a * v);
    mix.add_assign(&xb.features().map(|v| b * v));
    let xm = SparseTensor::from_layout(layout, mix).unwrap();
    let spec = KernelSpec::submanifold(&[3, 3]).with_dilation(2);
    let p = ConvParams {
        bias: None,
        ..init_params::<f64>(&spec, 3, 2, 4)
    };
    let ya = run_conv(&xa, &spec, &p).unwrap();
    let yb = run_conv(&xb, &spec, &p).unwrap();
    let ym = run_conv(&xm, &spec, &p).unwrap();
    for r in 0..ym.len() {
        for c in 0..2 {
            let want = a * ya.features().get(r, c) + b * yb.features().get(r, c);
            assert!((ym.features().get(r, c) - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    let x = random_sparse::<f64>(&[16, 16], 1, 0.2, 4, 8).unwrap();
    let spec = KernelSpec::submanifold(&[3, 3]);
    let p = init_params::<f64>(&spec, 4, 4, 8);
    let y64 = run_conv(&x, &spec, &p).unwrap();
    let x32 = SparseTensor::from_layout(x.layout().clone(), x.features().cast::<f32>()).unwrap();
    let mut tape = Tape::<f32>::new(NormMode::Eval);
    let xv = tape.sparse_input(&x32);
    let rb = tape.rulebook(x32.layout(), &spec).unwrap();
    let w = tape.constant(p.weight.cast());
    let y32 = tape.conv(&xv, &rb, w, None).unwrap();
    let diff = tape.value(y32.var).cast::<f64>().max_abs_diff(y64.features());
    assert!(diff <= 1e-5 * y64.features().max_abs().max(1.0));
}

#[test]
fn channel_mismatch_reported() {
    let x = random_sparse::<f64>(&[8, 8], 1, 0.3, 2, 3).unwrap();
    let p = init_params::<f64>(&KernelSpec::submanifold(&[3, 3]), 3, 2, 1);
    assert!(matches!(
        run_conv(&x, &KernelSpec::submanifold(&[3, 3]), &p),
        Err(Error::ChannelMismatch { .. })
    ));
}

#[test]
fn conv_backward_hand_cases() {
    // one pair, scalar channels: d w = x * g
    let x = SparseTensor::new(vec![Coord::new2(0, 1, 1)], Matrix::from_rows(&[vec![3.0]]).unwrap(), &[4, 4], 1).unwrap();
    let mut tape = Tape::new(NormMode::Eval);
    let xv = tape.sparse_input(&x);
    let rb = tape.rulebook(x.layout(), &KernelSpec::submanifold(&[1, 1])).unwrap();
    let w = tape.constant(Matrix::scalar(2.0));
    let b = tape.constant(Matrix::scalar(0.5));
    let y = tape.conv(&xv, &rb, w, Some(b)).unwrap();
    let g = tape.backward_with(y.var, Matrix::scalar(-1.5)).unwrap();
    assert_eq!(g.of(w).unwrap().get(0, 0), 3.0 * -1.5);
    assert_eq!(g.of(xv.var).unwrap().get(0, 0), 2.0 * -1.5);
    assert_eq!(g.of(b).unwrap().get(0, 0), -1.5);

    // zero cotangent gives zero gradients
    let g = tape.backward_with(y.var, Matrix::scalar(0.0)).unwrap();
    assert_eq!(g.of(w).unwrap().get(0, 0), 0.0);
    assert_eq!(g.of(xv.var).unwrap().get(0, 0), 0.0);
}

fn sparse_input_case(
    shape: &'static [usize],
    c_in: usize,
    density: f64,
    seed: u64,
) -> (ParamStore<f64>, Arc<pillarnext::Layout>, pillarnext::ParamId) {
    let x = random_sparse::<f64>(shape, 2, density, c_in, seed).unwrap();
    let mut store = ParamStore::new();
    let (n, c) = (x.len(), x.channels());
    let id = store.add("input", &[n, c], x.features().clone(), true);
    (store, x.layout().clone(), id)
}

fn conv_case(spec: KernelSpec, shape: &'static [usize], bias: bool) -> impl Fn(u64) -> Result<GradCheckCase> {
    move |seed| {
        let (mut store, layout, input) = sparse_input_case(shape, 3, 0.3, seed);
        let layer = pillarnext::nn::ConvLayer::new(&mut store, "conv", spec, 3, 2, bias, seed);
        Ok(GradCheckCase {
            store,
            mode: NormMode::Eval,
            forward: Box::new(move |s, t| {
                let x = t.sparse_param(&layout, s, input);
                Ok(layer.forward(t, s, &x)?.var)
            }),
        })
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let specs = [
        (KernelSpec::submanifold(&[3, 3]), &[8usize, 8][..]),
        (KernelSpec::submanifold(&[3, 3]).with_dilation(2), &[8, 8][..]),
        (KernelSpec::submanifold(&[1, 9]), &[6, 10][..]),
        (KernelSpec::spatial(&[3, 3], 2), &[9, 9][..]),
        (KernelSpec::column(5), &[4, 4, 5][..]),
    ];
    for (i, (spec, shape)) in specs.into_iter().enumerate() {
        let shape: &'static [usize] = Box::leak(shape.to_vec().into_boxed_slice());
        let r = grad_check(&conv_case(spec, shape, true), i as u64, &GradCheckOptions::default()).unwrap();
        assert!(r.passed, "{spec:?}: {r:?}");
    }
}

#[test]
fn depthwise_gradients_match_finite_differences() {
    let build = |seed| -> Result<GradCheckCase> {
        let (mut store, layout, input) = sparse_input_case(&[8, 8], 3, 0.4, seed);
        let layer = pillarnext::nn::DepthwiseConvLayer::new(&mut store, "dw", KernelSpec::submanifold(&[5, 5]), 3, seed);
        Ok(GradCheckCase {
            store,
            mode: NormMode::Eval,
            forward: Box::new(move |s, t| {
                let x = t.sparse_param(&layout, s, input);
                Ok(layer.forward(t, s, &x)?.var)
            }),
        })
    };
    let r = grad_check(&build, 3, &GradCheckOptions::default()).unwrap();
    assert!(r.passed, "{r:?}");
}

fn norm_case(mode: NormMode) -> impl Fn(u64) -> Result<GradCheckCase> {
    move |seed| {
        let (mut store, layout, input) = sparse_input_case(&[6, 6], 3, 0.5, seed);
        let bn = pillarnext::nn::BatchNorm::new(&mut store, "bn", 3);
        let mut r = pillarnext::rng::stream(seed, "bn-params");
        use rand::Rng;
        for id in [bn.gamma, bn.beta] {
            store.value_mut(id).as_mut_slice().iter_mut().for_each(|v| *v = r.gen_range(0.5..1.5));
        }
        store.value_mut(bn.running_var).as_mut_slice().iter_mut().for_each(|v| *v = r.gen_range(0.5..2.0));
        Ok(GradCheckCase {
            store,
            mode,
            forward: Box::new(move |s, t| {
                let x = t.sparse_param(&layout, s, input);
                bn.forward(t, s, x.var)
            }),
        })
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    for mode in [NormMode::Train, NormMode::Eval] {
        let r = grad_check(&norm_case(mode), 5, &GradCheckOptions::default()).unwrap();
        assert!(r.passed, "{mode:?}: {r:?}");
    }
}

#[test]
fn layer_norm_and_activations_match_finite_differences() {
    let build = |seed| -> Result<GradCheckCase> {
        let (mut store, layout, input) = sparse_input_case(&[6, 6], 4, 0.5, seed);
        let ln = pillarnext::nn::LayerNorm::new(&mut store, "ln", 4);
        Ok(GradCheckCase {
            store,
            mode: NormMode::Eval,
            forward: Box::new(move |s, t| {
                let x = t.sparse_param(&layout, s, input);
                let y = ln.forward_sparse(t, s, &x)?;
                let g = t.gelu(y.var);
                let r = t.relu(x.var);
                t.add(g, r)
            }),
        })
    };
    let r = grad_check(&build, 6, &GradCheckOptions::default()).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn batch_norm_forward_properties() {
    let x = random_sparse::<f64>(&[10, 10], 2, 0.4, 3, 12).unwrap();
    let mut store = ParamStore::new();
    let bn = pillarnext::nn::BatchNorm::new(&mut store, "bn", 3);

    // eval with unit statistics is the identity up to eps
    let mut tape = Tape::new(NormMode::Eval);
    let xv = tape.sparse_input(&x);
    let y = bn.forward(&mut tape, &store, xv.var).unwrap();
    assert!(tape.value(y).max_abs_diff(x.features()) < 1e-5);

    // train mode: per-channel mean 0 and variance 1 before the affine part
    let mut tape = Tape::new(NormMode::Train);
    let xv = tape.sparse_input(&x);
    let y = bn.forward(&mut tape, &store, xv.var).unwrap();
    let yv = tape.value(y);
    let n = yv.rows() as f64;
    for c in 0..3 {
        let mean: f64 = (0..yv.rows()).map(|r| yv.get(r, c)).sum::<f64>() / n;
        let var: f64 = (0..yv.rows()).map(|r| (yv.get(r, c) - mean).powi(2)).sum::<f64>() / n;
        let mut raw_var = 0.0;
        let raw_mean: f64 = (0..n as usize).map(|r| x.features().get(r, c)).sum::<f64>() / n;
        for r in 0..n as usize {
            raw_var += (x.features().get(r, c) - raw_mean).powi(2) / n;
        }
        assert!(mean.abs() < 1e-10);
        assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-10);
    }
    assert_eq!(tape.stat_updates().len(), 1);
    let mut s2 = store.clone();
    tape.commit_stats(&mut s2);
    assert_ne!(s2.value(bn.running_mean), store.value(bn.running_mean));

    // constant input normalizes to zero
    let constant = SparseTensor::from_layout(x.layout().clone(), x.features().map(|_| 4.0)).unwrap();
    let mut tape = Tape::new(NormMode::Train);
    let xv = tape.sparse_input(&constant);
    let y = bn.forward(&mut tape, &store, xv.var).unwrap();
    assert!(tape.value(y).as_slice().iter().all(|&v| v == 0.0));

    // one row cannot be normalized in train mode
    let one = SparseTensor::new(vec![Coord::new2(0, 0, 0)], Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap(), &[4, 4], 1).unwrap();
    let mut tape = Tape::new(NormMode::Train);
    let xv = tape.sparse_input(&one);
    assert!(matches!(bn.forward(&mut tape, &store, xv.var), Err(Error::TooFewRows(1))));
}

#[test]
fn relu_examples() {
    let mut tape = Tape::new(NormMode::Eval);
    let x = tape.constant(Matrix::from_rows(&[vec![-1.0, 0.0, 2.0]]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).as_slice(), &[0.0, 0.0, 2.0]);
    let z = tape.relu(y);
    assert_eq!(tape.value(z), tape.value(y));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn submanifold_preserves_active_set(seed in 0u64..10_000, n in 4usize..24, density in 0.01f64..0.3, k in 0usize..6) {
        let spec = kernels()[k];
        let x = random_sparse::<f64>(&[n, n], 2, density, 2, seed).unwrap();
        let p = init_params::<f64>(&spec, 2, 3, seed);
        let y = run_conv(&x, &spec, &p).unwrap();
        prop_assert_eq!(y.coords(), x.coords());
    }

    #[test]
    fn dense_round_trip(seed in 0u64..10_000, density in 0.0f64..0.5) {
        let x = random_sparse::<f64>(&[7, 9], 2, density, 3, seed).unwrap();
        let back = SparseTensor::from_dense(&x.to_dense(), &x.active_mask()).unwrap();
        prop_assert!(back.same_as(&x));
        for c in back.coords() {
            prop_assert!(x.lookup(c).unwrap().is_some());
        }
    }

    #[test]
    fn construction_is_permutation_equivariant(seed in 0u64..10_000, shift in 1usize..50) {
        let x = random_sparse::<f64>(&[9, 9], 1, 0.3, 2, seed).unwrap();
        let n = x.len();
        prop_assume!(n > 1);
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let coords = perm.iter().map(|&i| x.coords()[i]).collect();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.features().row(i).to_vec()).collect();
        let y = SparseTensor::new(coords, Matrix::from_rows(&rows).unwrap(), &[9, 9], 1).unwrap();
        prop_assert_eq!(y.to_dense(), x.to_dense());
    }
}

#[test]
fn lookup_resolves_every_insertion_row() {
    let layout = random_layout(&[64, 64], 1, 1.0, 4).unwrap();
    use rand::seq::SliceRandom;
    let mut coords = layout.coords().to_vec();
    coords.shuffle(&mut pillarnext::rng::stream(4, "shuffle"));
    coords.truncate(1000);
    let t = SparseTensor::new(coords.clone(), Matrix::<f64>::zeros(1000, 1), &[64, 64], 1).unwrap();
    for (row, c) in coords.iter().enumerate() {
        assert_eq!(t.lookup(c).unwrap(), Some(row));
    }
    let mut inactive = 0;
    for y in 0..64 {
        for x in 0..64 {
            let c = Coord::new2(0, y, x);
            if t.lookup(&c).unwrap().is_none() {
                inactive += 1;
            }
        }
    }
    assert_eq!(inactive, 64 * 64 - 1000);
}
