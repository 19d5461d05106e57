use std::collections::BTreeSet;

use pillarnext::encoding::{
    augment_point_features, load_points, pool_max, pool_mmm, voxelize, voxelize_batch, BaselinePillarEncoder,
    PointCloud, PointMlp, Voxel2PillarEncoder,
};
use pillarnext::grid::GridConfig;
use pillarnext::sample::{random_cloud, random_matrix};
use pillarnext::train::gradcheck::{grad_check, GradCheckCase, GradCheckOptions};
use pillarnext::{Coord, Matrix, NormMode, ParamStore, Result, Tape};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn small_grid(depth_cells: usize) -> GridConfig {
    GridConfig {
        x_range: [-1.6, 1.6],
        y_range: [-1.6, 1.6],
        z_range: [-1.0, -1.0 + 0.5 * depth_cells as f64],
        voxel_size: [0.2, 0.2, 0.5],
        max_points_per_voxel: 8,
    }
}

fn columns(coords: &[Coord]) -> BTreeSet<(u32, u32, u32)> {
    coords.iter().map(|c| (c.batch, c.y(), c.x())).collect()
}

#[test]
fn load_points_round_trip() {
    let pc = random_cloud(50, &GridConfig::default(), 1);
    let bytes = pc.to_bytes();
    assert_eq!(bytes.len(), 50 * 16);
    let back = load_points(&bytes).unwrap();
    assert_eq!(back.len(), 50);
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn voxelize_respects_capacity_and_membership() {
    let g = small_grid(4);
    let pc = random_cloud(600, &g, 2);
    for rank in [2, 3] {
        let vb = voxelize(&pc, &g, rank, 7).unwrap();
        let mut seen = BTreeSet::new();
        for grp in 0..vb.len() {
            assert!(vb.group(grp).len() <= g.max_points_per_voxel);
            for r in vb.group(grp) {
                assert!(seen.insert(vb.sources[r]), "point in two groups");
            }
        }
        let keys: BTreeSet<u64> = vb.coords.iter().map(|c| c.key()).collect();
        assert_eq!(keys.len(), vb.len());
        assert_eq!(vb, voxelize(&pc, &g, rank, 7).unwrap());
    }
}

#[test]
fn augmented_offsets_are_bounded() {
    let g = small_grid(4);
    let pc = random_cloud(400, &g, 3);
    for rank in [2, 3] {
        let vb = augment_point_features(&voxelize(&pc, &g, rank, 0).unwrap(), &g);
        let half = [0.1, 0.1, if rank == 3 { 0.25 } else { 1.0 }];
        for r in 0..vb.features.rows() {
            for a in 0..3 {
                assert!(vb.features.get(r, 4 + a).abs() <= half[a] + 1e-12);
            }
        }
    }
}

#[test]
fn mmm_prefix_is_max_and_ordered() {
    for seed in 0..20 {
        let m = random_matrix::<f64>(1 + seed as usize % 7, 5, seed);
        let mx = pool_max(&m).unwrap();
        let mmm = pool_mmm(&m).unwrap();
        assert_eq!(&mmm[..5], &mx[..]);
        for c in 0..5 {
            assert!(mmm[c] >= mmm[10 + c] && mmm[10 + c] >= mmm[5 + c]);
        }
    }
}

proptest! {
    #[test]
    fn pool_max_is_permutation_invariant(seed in 0u64..1000, n in 1usize..12) {
        let m = random_matrix::<f64>(n, 4, seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut pillarnext::rng::stream(seed, "perm"));
        let rows: Vec<Vec<f64>> = order.iter().map(|&r| m.row(r).to_vec()).collect();
        let p = Matrix::from_rows(&rows).unwrap();
        prop_assert_eq!(pool_max(&m).unwrap(), pool_max(&p).unwrap());
    }
}

#[test]
fn point_mlp_is_nonnegative_and_identity_like() {
    let mut store = ParamStore::<f64>::new();
    let mlp = PointMlp::new(&mut store, "mlp", 3, 3, 0);
    let x = random_matrix::<f64>(10, 3, 4);
    let mut tape = Tape::new(NormMode::Train);
    let v = tape.constant(x.clone());
    let out = mlp.forward(&mut tape, &store, v).unwrap();
    assert!(tape.value(out).as_slice().iter().all(|&v| v >= 0.0));

    *store.value_mut(mlp.weight) = Matrix::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ])
    .unwrap();
    let mut tape = Tape::new(NormMode::Eval);
    let v = tape.constant(x.clone());
    let out = mlp.forward(&mut tape, &store, v).unwrap();
    let scale = 1.0 / (1.0 + pillarnext::nn::BN_EPS).sqrt();
    let expected = x.map(|v| v.max(0.0) * scale);
    assert!(tape.value(out).max_abs_diff(&expected) < 1e-12);

    let mut tape = Tape::new(NormMode::Eval);
    let v = tape.constant(Matrix::<f64>::zeros(2, 4));
    assert!(mlp.forward(&mut tape, &store, v).is_err());
}

#[test]
fn baseline_active_set_matches_occupancy() {
    let g = small_grid(4);
    let mut store = ParamStore::<f64>::new();
    let enc = BaselinePillarEncoder::new(&mut store, "pfe", 8, 0);
    let clouds = [random_cloud(300, &g, 5), random_cloud(40, &g, 6)];
    let mut tape = Tape::new(NormMode::Train);
    let out = enc.forward(&mut tape, &store, &clouds, &g, 0).unwrap();
    let mut occupied = BTreeSet::new();
    for (b, pc) in clouds.iter().enumerate() {
        for i in 0..pc.len() {
            let p = pc.point(i);
            let x = ((p[0] - g.x_range[0]) / g.voxel_size[0]).floor() as u32;
            let y = ((p[1] - g.y_range[0]) / g.voxel_size[1]).floor() as u32;
            occupied.insert((b as u32, y, x));
        }
    }
    assert_eq!(columns(out.layout.coords()), occupied);
    assert_eq!(tape.value(out.var).cols(), 8);

    let mut tape = Tape::new(NormMode::Train);
    let empty = enc.forward(&mut tape, &store, &[PointCloud::empty()], &g, 0).unwrap();
    assert!(empty.layout.is_empty());
    let one = PointCloud::from_xyzi(&[[0.05, 0.05, 0.0, 0.5]]).unwrap();
    let mut tape = Tape::new(NormMode::Eval);
    assert_eq!(enc.forward(&mut tape, &store, &[one], &g, 0).unwrap().layout.len(), 1);
}

#[test]
fn voxel2pillar_output_is_column_occupancy() {
    let g = small_grid(6);
    let mut store = ParamStore::<f64>::new();
    let enc = Voxel2PillarEncoder::new(&mut store, "v2p", 4, 8, 6, 0);
    let clouds = [random_cloud(250, &g, 8), random_cloud(30, &g, 9)];
    let vb = enc.prepare(&clouds, &g, 0).unwrap();
    let mut tape = Tape::new(NormMode::Train);
    let out = enc.forward_voxels(&mut tape, &store, &vb).unwrap();
    assert_eq!(out.layout.rank(), 2);
    assert_eq!(out.layout.spatial_shape(), &[16, 16]);
    assert_eq!(columns(out.layout.coords()), columns(&vb.coords));
    assert!(tape.value(out.var).as_slice().iter().all(|&v| v >= 0.0));
}

#[test]
fn single_voxel_column_uses_one_weight_slice() {
    let g = small_grid(6);
    let mut store = ParamStore::<f64>::new();
    let enc = Voxel2PillarEncoder::new(&mut store, "v2p", 3, 5, 6, 1);
    // One voxel at z = 4 and a two-voxel column elsewhere.
    let pc = PointCloud::from_xyzi(&[
        [0.05, 0.05, 1.2, 0.4],
        [0.07, 0.02, 1.1, 0.9],
        [-0.55, 0.75, -0.8, 0.1],
        [-0.55, 0.75, 0.3, 0.3],
    ])
    .unwrap();
    let vb = enc.prepare(&[pc], &g, 0).unwrap();
    let mut tape = Tape::new(NormMode::Eval);
    let voxels = enc.encode_voxels(&mut tape, &store, &vb).unwrap();
    let pre = enc.constructor.conv.forward(&mut tape, &store, &voxels).unwrap();
    let w = store.value(enc.constructor.conv.weight);
    let single = Coord::new3(0, 8, 8, 4);
    let vrow = voxels.layout.row_of(&single).unwrap();
    let feat = tape.value(voxels.var).row(vrow).to_vec();
    let orow = pre.layout.row_of(&Coord::new3(0, 8, 8, 0)).unwrap();
    for o in 0..5 {
        let expected: f64 = (0..9).map(|c| feat[c] * w.get(4 * 9 + c, o)).sum();
        assert!((tape.value(pre.var).get(orow, o) - expected).abs() < 1e-12);
    }
}

#[test]
fn unit_depth_matches_baseline_active_set() {
    let g = small_grid(1);
    let mut store = ParamStore::<f64>::new();
    let base = BaselinePillarEncoder::new(&mut store, "pfe", 4, 0);
    let v2p = Voxel2PillarEncoder::new(&mut store, "v2p", 4, 4, 1, 0);
    let mut wider = random_cloud(300, &small_grid(6), 11);
    wider = PointCloud::new(wider.points().clone()).unwrap();
    let mut t1 = Tape::new(NormMode::Eval);
    let a = base.forward(&mut t1, &store, &[wider.clone()], &g, 0).unwrap();
    let mut t2 = Tape::new(NormMode::Eval);
    let b = v2p.forward(&mut t2, &store, &[wider], &g, 0).unwrap();
    assert!(!a.layout.is_empty());
    assert_eq!(columns(a.layout.coords()), columns(b.layout.coords()));
}

#[test]
fn encoders_are_invariant_to_point_order() {
    let g = small_grid(4);
    let mut store = ParamStore::<f64>::new();
    let base = BaselinePillarEncoder::new(&mut store, "pfe", 4, 0);
    let v2p = Voxel2PillarEncoder::new(&mut store, "v2p", 4, 6, 4, 0);
    // Dense enough that many cells overflow and get subsampled.
    let pc = random_cloud(3000, &g, 12);
    let mut order: Vec<usize> = (0..pc.len()).collect();
    order.shuffle(&mut pillarnext::rng::stream(3, "shuffle"));
    let shuffled = pc.permuted(&order);
    for mode in [NormMode::Train, NormMode::Eval] {
        let run = |pc: &PointCloud| -> (Vec<Coord>, Matrix<f64>, Vec<Coord>, Matrix<f64>) {
            let mut t = Tape::new(mode);
            let a = base.forward(&mut t, &store, &[pc.clone()], &g, 9).unwrap();
            let b = v2p.forward(&mut t, &store, &[pc.clone()], &g, 9).unwrap();
            (
                a.layout.coords().to_vec(),
                t.value(a.var).clone(),
                b.layout.coords().to_vec(),
                t.value(b.var).clone(),
            )
        };
        let (c1, f1, c2, f2) = run(&pc);
        let (d1, e1, d2, e2) = run(&shuffled);
        assert_eq!(c1, d1);
        assert_eq!(c2, d2);
        assert!(f1.max_abs_diff(&e1) < 1e-12);
        assert!(f2.max_abs_diff(&e2) < 1e-12);
    }
}

fn encoder_case(voxel2pillar: bool, mode: NormMode) -> impl Fn(u64) -> Result<GradCheckCase> {
    move |seed| {
        let g = small_grid(3);
        let mut store = ParamStore::new();
        let clouds = [random_cloud(60, &g, seed), random_cloud(40, &g, seed + 100)];
        let forward: pillarnext::train::gradcheck::ForwardFn = if voxel2pillar {
            let enc = Voxel2PillarEncoder::new(&mut store, "v2p", 3, 4, 3, seed);
            // A voxel whose MLP units are all inactive pools to exactly zero and
            // puts the constructor ReLU on its kink; shift the MLP output so
            // the check runs at a differentiable point.
            store.value_mut(enc.mlp.bn.beta).as_mut_slice().fill(0.5);
            let vb = enc.prepare(&clouds, &g, seed)?;
            Box::new(move |s, t| Ok(enc.forward_voxels(t, s, &vb)?.var))
        } else {
            let enc = BaselinePillarEncoder::new(&mut store, "pfe", 4, seed);
            let vb = enc.prepare(&clouds, &g, seed)?;
            Box::new(move |s, t| Ok(enc.forward_voxels(t, s, &vb)?.var))
        };
        Ok(GradCheckCase { store, mode, forward })
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    for (i, v2p) in [false, true].into_iter().enumerate() {
        for mode in [NormMode::Train, NormMode::Eval] {
            let r = grad_check(&encoder_case(v2p, mode), 20 + i as u64, &GradCheckOptions::default()).unwrap();
            assert!(r.passed, "voxel2pillar={v2p} {mode:?}: {r:?}");
        }
    }
}

#[test]
fn batch_voxelization_tags_clouds() {
    let g = small_grid(4);
    let clouds = [random_cloud(20, &g, 1), PointCloud::empty(), random_cloud(20, &g, 2)];
    let vb = voxelize_batch(&clouds, &g, 3, 0).unwrap();
    assert_eq!(vb.batch_size, 3);
    assert!(vb.coords.iter().all(|c| c.batch != 1));
    assert!(vb.coords.iter().any(|c| c.batch == 2));
}
