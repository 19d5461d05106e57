use std::collections::BTreeSet;
use std::sync::Arc;

use pillarnext::autograd::SparseVar;
use pillarnext::conv::KernelSpec;
use pillarnext::grid::GridConfig;
use pillarnext::network::{
    decode_detections, sigmoid, Backbone, ConvNextBlock, DlsfeBlock, Fusion, Head, LsfeBlock, MsfeModule, Neck,
    NetworkConfig, PillarNet,
};
use pillarnext::nn::ConvBn;
use pillarnext::sample::{random_cloud, random_sparse};
use pillarnext::{Coord, Error, Layout, Matrix, NormMode, ParamStore, SparseTensor, Tape};

fn coord_set(l: &Layout) -> BTreeSet<u64> {
    l.coords().iter().map(|c| c.key()).collect()
}

fn input(tape: &mut Tape<f64>, shape: &[usize], c: usize, density: f64, seed: u64) -> SparseVar {
    let t = random_sparse::<f64>(shape, 2, density, c, seed).unwrap();
    tape.sparse_input(&t)
}

fn silence(store: &mut ParamStore<f64>, bns: &[&ConvBn]) {
    for cb in bns {
        store.value_mut(cb.bn.gamma).as_mut_slice().fill(0.0);
        store.value_mut(cb.bn.beta).as_mut_slice().fill(0.0);
    }
}

#[test]
fn lsfe_with_silent_branches_is_relu() {
    let mut store = ParamStore::new();
    let b = LsfeBlock::new(&mut store, "lsfe", 4, 2, 0);
    silence(&mut store, &[&b.main2, &b.dilated]);
    let mut tape = Tape::new(NormMode::Train);
    let x = input(&mut tape, &[12, 12], 4, 0.3, 1);
    let y = b.forward(&mut tape, &store, &x).unwrap();
    assert!(Arc::ptr_eq(&x.layout, &y.layout));
    let expected = tape.value(x.var).map(|v| v.max(0.0));
    assert!(tape.value(y.var).max_abs_diff(&expected) < 1e-12);
    let bad = input(&mut tape, &[12, 12], 3, 0.3, 1);
    assert!(matches!(b.forward(&mut tape, &store, &bad), Err(Error::ChannelMismatch { .. })));
}

#[test]
fn dlsfe_branch_costs_two_3x3_convs() {
    for c in [1usize, 4, 16] {
        let mut store = ParamStore::<f64>::new();
        let b = DlsfeBlock::new(&mut store, "d", c, 0);
        let separable = store.value(b.row.conv.weight).as_slice().len() + store.value(b.col.conv.weight).as_slice().len();
        assert_eq!(separable, 2 * 9 * c * c);
        let mut tape = Tape::new(NormMode::Eval);
        let x = input(&mut tape, &[16, 16], c, 0.2, 2);
        let y = b.forward(&mut tape, &store, &x).unwrap();
        assert_eq!(coord_set(&x.layout), coord_set(&y.layout));
    }
}

/// Support extent (max - min + 1 per axis) of a block's response to a unit
/// impulse on a fully active grid, with nonnegative weights and identity norms.
fn impulse_extent(f: impl Fn(&mut ParamStore<f64>) -> Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &SparseVar) -> SparseVar>) -> [usize; 2] {
    let n = 21;
    let mut store = ParamStore::new();
    let block = f(&mut store);
    for id in store.ids().collect::<Vec<_>>() {
        if store.entry(id).name.ends_with(".weight") {
            store.value_mut(id).as_mut_slice().iter_mut().for_each(|v| *v = v.abs() + 0.1);
        }
    }
    let coords: Vec<Coord> = (0..n).flat_map(|y| (0..n).map(move |x| Coord::new2(0, y, x))).collect();
    let mut feats = Matrix::zeros(n as usize * n as usize, 1);
    feats.set((n / 2 * n + n / 2) as usize, 0, 1.0);
    let t = SparseTensor::new(coords, feats, &[n as usize, n as usize], 1).unwrap();
    let mut tape = Tape::new(NormMode::Eval);
    let x = tape.sparse_input(&t);
    let y = block(&mut tape, &store, &x);
    let (mut lo, mut hi) = ([u32::MAX; 2], [0u32; 2]);
    for (r, c) in y.layout.coords().iter().enumerate() {
        if tape.value(y.var).get(r, 0).abs() > 1e-12 {
            for (a, v) in [c.y(), c.x()].into_iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
    }
    [(hi[0] - lo[0] + 1) as usize, (hi[1] - lo[1] + 1) as usize]
}

#[test]
fn receptive_fields_grow_with_dilation() {
    let lsfe = |m: usize| {
        impulse_extent(move |s| {
            let b = LsfeBlock::new(s, "b", 1, m, 0);
            Box::new(move |t, s, x| b.forward(t, s, x).unwrap())
        })
    };
    let fine = impulse_extent(|s| {
        let b = DlsfeBlock::new(s, "d", 1, 0);
        Box::new(move |t, s, x| b.fine.forward(t, s, x).unwrap())
    });
    let large = impulse_extent(|s| {
        let b = DlsfeBlock::new(s, "d", 1, 0);
        Box::new(move |t, s, x| {
            let h = b.row.forward(t, s, x).unwrap();
            b.col.forward(t, s, &h).unwrap()
        })
    });
    let two_3x3 = impulse_extent(|s| {
        let a = ConvBn::new(s, "a", KernelSpec::submanifold(&[3, 3]), 1, 1, true, 0);
        let b = ConvBn::new(s, "b", KernelSpec::submanifold(&[3, 3]), 1, 1, false, 0);
        Box::new(move |t, s, x| {
            let h = a.forward(t, s, x).unwrap();
            b.forward(t, s, &h).unwrap()
        })
    });
    assert_eq!(fine, [3, 3]);
    assert_eq!(lsfe(2), [5, 5]);
    assert_eq!(lsfe(3), [7, 7]);
    assert_eq!(large, [9, 9]);
    assert_eq!(two_3x3, [5, 5]);
}

#[test]
fn msfe_applies_dilation_schedule_in_order() {
    let mut store = ParamStore::<f64>::new();
    let m = MsfeModule::new(&mut store, "s", 2, 2, 1, &[2, 3], 0);
    assert!(m.entry.is_none());
    assert_eq!(m.lsfe.iter().map(|b| b.dilation).collect::<Vec<_>>(), vec![2, 3]);
    let mut tape = Tape::new(NormMode::Train);
    let x = input(&mut tape, &[16, 16], 2, 0.2, 4);
    let y = m.forward(&mut tape, &store, &x).unwrap();
    assert_eq!(coord_set(&x.layout), coord_set(&y.layout));
}

#[test]
fn msfe_downsample_site_enumeration() {
    let mut store = ParamStore::<f64>::new();
    let m = MsfeModule::new(&mut store, "s", 2, 3, 2, &[2, 3], 0);
    let t = SparseTensor::new(vec![Coord::new2(0, 5, 7)], Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap(), &[16, 16], 1)
        .unwrap();
    let mut tape = Tape::new(NormMode::Eval);
    let x = tape.sparse_input(&t);
    let y = m.forward(&mut tape, &store, &x).unwrap();
    let allowed: BTreeSet<(u32, u32)> = [(2, 3), (2, 4), (3, 3), (3, 4)].into();
    let got: BTreeSet<(u32, u32)> = y.layout.coords().iter().map(|c| (c.y(), c.x())).collect();
    assert_eq!(got, allowed);
    assert_eq!(y.layout.spatial_shape(), &[8, 8]);
    assert_eq!(tape.value(y.var).cols(), 3);
}

fn narrow_config() -> NetworkConfig {
    NetworkConfig {
        stage_channels: [4, 4, 6, 6, 8, 8],
        fuse_channels: 6,
        head_channels: 4,
        encoder_channels: 4,
        num_classes: 2,
        ..NetworkConfig::default()
    }
}

#[test]
fn backbone_stage_shapes_on_full_grid() {
    let cfg = narrow_config();
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, "bb", &cfg, 4, 0);
    let mut tape = Tape::new(NormMode::Train);
    let empty = SparseTensor::<f64>::empty(&[1504, 1504], 1, 4).unwrap();
    let x = tape.sparse_input(&empty);
    let outs = bb.forward(&mut tape, &store, &x).unwrap();
    let shapes: Vec<usize> = outs.iter().map(|o| o.layout.spatial_shape()[0]).collect();
    assert_eq!(shapes, vec![1504, 752, 376, 188, 94, 47]);
    assert_eq!(outs.iter().map(|o| o.layout.stride()).collect::<Vec<_>>(), vec![1, 2, 4, 8, 16, 32]);
    assert!(outs.iter().all(|o| o.layout.is_empty()));
    let chans: Vec<usize> = outs.iter().map(|o| tape.value(o.var).cols()).collect();
    assert_eq!(chans, cfg.stage_channels.to_vec());
}

fn strided(tape: &mut Tape<f64>, coords: Vec<Coord>, shape: usize, stride: usize, c: usize, seed: u64) -> SparseVar {
    let n = coords.len();
    let layout = Arc::new(Layout::new(coords, &[shape, shape], 1).unwrap().with_stride(stride));
    let t = SparseTensor::from_layout(layout, pillarnext::sample::random_matrix(n, c, seed)).unwrap();
    tape.sparse_input(&t)
}

#[test]
fn fusion_scales_and_unions() {
    let mut store = ParamStore::<f64>::new();
    let f = Fusion::new(&mut store, "f", [2, 3, 4], 5, 0);
    let mut tape = Tape::new(NormMode::Eval);
    let s4 = strided(&mut tape, vec![Coord::new2(0, 12, 20), Coord::new2(0, 1, 1)], 24, 8, 2, 1);
    let s5 = strided(&mut tape, vec![Coord::new2(0, 6, 10), Coord::new2(0, 3, 3)], 12, 16, 3, 2);
    let s6 = strided(&mut tape, vec![Coord::new2(0, 3, 5)], 6, 32, 4, 3);
    let out = f.forward(&mut tape, &store, [&s4, &s5, &s6]).unwrap();
    let got: BTreeSet<(u32, u32)> = out.layout.coords().iter().map(|c| (c.y(), c.x())).collect();
    assert_eq!(got, [(12, 20), (1, 1), (6, 6)].into());
    assert!(out.layout.len() < 5);
    assert_eq!(out.layout.stride(), 8);
    for c in out.layout.coords() {
        assert!(c.y() as usize * 8 < 24 * 8 && c.x() as usize * 8 < 24 * 8);
    }
    // The shared site sums all three projections.
    let proj = |tape: &mut Tape<f64>, i: usize, x: &SparseVar| {
        let y = f.proj[i].forward(tape, &store, x).unwrap();
        tape.value(y.var).clone()
    };
    let (a, b, c) = (proj(&mut tape, 0, &s4), proj(&mut tape, 1, &s5), proj(&mut tape, 2, &s6));
    let row = out.layout.row_of(&Coord::new2(0, 12, 20)).unwrap();
    for ch in 0..5 {
        let expected = a.get(0, ch) + b.get(0, ch) + c.get(0, ch);
        assert!((tape.value(out.var).get(row, ch) - expected).abs() < 1e-12);
    }

    // Empty coarse inputs leave the projected finest map.
    let e5 = strided(&mut tape, vec![], 12, 16, 3, 0);
    let e6 = strided(&mut tape, vec![], 6, 32, 4, 0);
    let out = f.forward(&mut tape, &store, [&s4, &e5, &e6]).unwrap();
    assert_eq!(tape.value(out.var).max_abs_diff(&a), 0.0);

    let wrong = strided(&mut tape, vec![], 12, 8, 3, 0);
    assert!(matches!(f.forward(&mut tape, &store, [&s4, &wrong, &e6]), Err(Error::StrideMismatch(_))));
}

#[test]
fn convnext_with_zero_projection_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let b = ConvNextBlock::new(&mut store, "cx", 3, 5, 4, 0);
    store.value_mut(b.project.weight).as_mut_slice().fill(0.0);
    let mut tape = Tape::new(NormMode::Train);
    let x = input(&mut tape, &[10, 10], 3, 0.4, 7);
    let y = b.forward(&mut tape, &store, &x).unwrap();
    assert!(Arc::ptr_eq(&x.layout, &y.layout));
    assert_eq!(tape.value(y.var).max_abs_diff(tape.value(x.var)), 0.0);
}

#[test]
fn neck_dilates_and_zero_repeats_is_stem_only() {
    for repeats in [0, 1] {
        let cfg = NetworkConfig {
            neck_repeats: repeats,
            ..narrow_config()
        };
        let mut store = ParamStore::<f64>::new();
        let neck = Neck::new(&mut store, "neck", &cfg, 0);
        assert_eq!(neck.blocks.len(), repeats);
        let mut tape = Tape::new(NormMode::Train);
        let x = input(&mut tape, &[12, 12], cfg.fuse_channels, 0.1, 8);
        let y = neck.forward(&mut tape, &store, &x).unwrap();
        let (a, b) = (coord_set(&x.layout), coord_set(&y.layout));
        assert!(a.is_subset(&b) && b.len() > a.len());
    }
}

#[test]
fn zero_head_decodes_to_unit_boxes() {
    let cfg = narrow_config();
    let mut store = ParamStore::<f64>::new();
    let head = Head::new(&mut store, "head", 6, &cfg, 0);
    for id in store.ids().collect::<Vec<_>>() {
        if store.entry(id).trainable {
            store.value_mut(id).as_mut_slice().fill(0.0);
        }
    }
    let mut tape = Tape::new(NormMode::Eval);
    let x = strided(&mut tape, vec![Coord::new2(0, 2, 3), Coord::new2(0, 9, 9)], 25, 8, 6, 5);
    let (cls, boxes) = head.forward(&mut tape, &store, &x).unwrap();
    assert_eq!(tape.value(cls.var).rows(), 2);
    assert!(tape.value(cls.var).as_slice().iter().all(|&v| v == 0.0));
    let g = GridConfig::square(20.0);
    let dets = decode_detections(tape.value(cls.var), tape.value(boxes.var), &cls.layout, &g, 0.3);
    assert_eq!(dets.len(), 2);
    for d in &dets {
        assert_eq!(d.score, 0.5);
        assert_eq!(d.size, [1.0; 3]);
        assert_eq!(d.yaw, 0.0);
    }
    let first = dets.iter().find(|d| d.center[0] < 0.0 && d.center[1] < -10.0).unwrap();
    assert!((first.center[0] - (-20.0 + 3.5 * 0.8)).abs() < 1e-12);
    assert!((first.center[1] - (-20.0 + 2.5 * 0.8)).abs() < 1e-12);
}

#[test]
fn decode_keeps_local_maxima_only() {
    let g = GridConfig::square(20.0);
    let layout = Layout::new(
        vec![Coord::new2(0, 4, 4), Coord::new2(0, 4, 5), Coord::new2(0, 5, 5), Coord::new2(0, 10, 10)],
        &[25, 25],
        1,
    )
    .unwrap()
    .with_stride(8);
    let cls = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![0.5], vec![-3.0]]).unwrap();
    let boxes = Matrix::<f64>::zeros(4, 8);
    let dets = decode_detections(&cls, &boxes, &layout, &g, 0.01);
    assert_eq!(dets.len(), 2);
    assert!((dets[0].score - sigmoid(1.0)).abs() < 1e-15);
    assert!((dets[0].center[0] - (-20.0 + 4.5 * 0.8)).abs() < 1e-12);
    assert!((dets[1].score - sigmoid(-3.0)).abs() < 1e-15);
    let none = decode_detections(&Matrix::<f64>::zeros(0, 1), &Matrix::zeros(0, 8), &Layout::empty(&[4, 4], 1).unwrap(), &g, 0.1);
    assert!(none.is_empty());
}

fn toy_grid() -> GridConfig {
    GridConfig {
        x_range: [-12.8, 12.8],
        y_range: [-12.8, 12.8],
        z_range: [-2.0, 4.0],
        voxel_size: [0.8, 0.8, 1.0],
        max_points_per_voxel: 8,
    }
}

#[test]
fn full_network_is_deterministic_and_finite() {
    let cfg = narrow_config();
    let g = toy_grid();
    let run = || {
        let mut store = ParamStore::<f64>::new();
        let net = PillarNet::new(&mut store, &cfg, &g, 11).unwrap();
        let clouds = [random_cloud(400, &g, 1), random_cloud(200, &g, 2)];
        let vb = net.prepare(&clouds, 11).unwrap();
        let mut tape = Tape::new(NormMode::Train);
        let out = net.forward(&mut tape, &store, &vb).unwrap();
        (tape.value(out.cls.var).clone(), tape.value(out.boxes.var).clone(), out.stats)
    };
    let (c1, b1, s1) = run();
    let (c2, b2, s2) = run();
    assert_eq!(c1.as_slice(), c2.as_slice());
    assert_eq!(b1.as_slice(), b2.as_slice());
    assert_eq!(s1, s2);
    assert_eq!(s1.grid, [32, 32, 6]);
    assert_eq!(s1.stage_strides, vec![1, 2, 4, 8, 16, 32]);
    assert_eq!(s1.fused_stride, 8);
    assert!(c1.all_finite() && b1.all_finite());
}

#[test]
fn empty_scene_flows_through() {
    let cfg = narrow_config();
    let g = toy_grid();
    let mut store = ParamStore::<f64>::new();
    let net = PillarNet::new(&mut store, &cfg, &g, 0).unwrap();
    let vb = net.prepare(&[pillarnext::encoding::PointCloud::empty()], 0).unwrap();
    let mut tape = Tape::new(NormMode::Train);
    let out = net.forward(&mut tape, &store, &vb).unwrap();
    assert!(out.stats.stage_active.iter().all(|&n| n == 0));
    assert_eq!(out.stats.neck_active, 0);
    assert!(net.detect(&tape, &out, 0.1).is_empty());
}
