//! The registered gradient-check suite: every differentiable op, every
//! composed block and a small end-to-end network.

use std::sync::Arc;

use rand::Rng as _;
use serde::Serialize;

use super::gradcheck::{grad_check, GradCheckCase, GradCheckOptions};
use super::loss::detection_loss;
use super::targets::TargetSet;
use crate::autograd::{NormMode, PoolKind, SparseVar, Tape, Var};
use crate::conv::KernelSpec;
use crate::encoding::{BaselinePillarEncoder, PointMlp, Voxel2PillarEncoder};
use crate::error::Result;
use crate::grid::GridConfig;
use crate::matrix::Matrix;
use crate::network::{
    ConvNextBlock, DlsfeBlock, Fusion, Head, LsfeBlock, MsfeModule, Neck, NetworkConfig, PillarNet, BOX_CODE_SIZE,
};
use crate::nn::{BatchNorm, ConvLayer, DepthwiseConvLayer, LayerNorm};
use crate::rng;
use crate::sample::{random_cloud, random_layout, random_matrix};
use crate::store::{ParamId, ParamStore};
use crate::tensor::Layout;

pub type CaseBuilder = Box<dyn Fn(u64) -> Result<GradCheckCase> + Send + Sync>;

pub struct SuiteCheck {
    pub name: &'static str,
    pub build: CaseBuilder,
    /// Finite differences on at most this many entries per parameter.
    pub max_entries: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub passed: bool,
    pub max_rel_err: f64,
    pub worst_group: String,
    pub groups: usize,
    pub entries: usize,
    pub resamples: usize,
    pub error: String,
}

/// Random sparse features registered as the trainable entry `input`.
fn sparse_input(store: &mut ParamStore<f64>, shape: &[usize], stride: usize, c: usize, density: f64, seed: u64) -> Result<(Arc<Layout>, ParamId)> {
    let layout = Arc::new(random_layout(shape, 2, density, seed)?.with_stride(stride));
    let id = store.add(format!("input{}", store.len()), &[layout.len(), c], random_matrix(layout.len(), c, seed ^ 0x1d), true);
    Ok((layout, id))
}

fn dense_input(store: &mut ParamStore<f64>, rows: usize, cols: usize, seed: u64) -> ParamId {
    store.add("input", &[rows, cols], random_matrix(rows, cols, seed ^ 0x2e), true)
}

/// Move every normalization parameter away from its identity initialization
/// so ReLU inputs are generically nonzero.
fn randomize_norms(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng::stream(seed, "norms");
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let range = if name.ends_with(".gamma") {
            0.5..1.5
        } else if name.ends_with(".beta") {
            -0.5..0.5
        } else if name.ends_with(".running_mean") {
            -0.2..0.2
        } else if name.ends_with(".running_var") {
            0.5..2.0
        } else {
            continue;
        };
        store.value_mut(id).as_mut_slice().iter_mut().for_each(|v| *v = r.gen_range(range.clone()));
    }
}

fn case(store: ParamStore<f64>, mode: NormMode, f: impl Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var> + 'static) -> GradCheckCase {
    GradCheckCase {
        store,
        mode,
        forward: Box::new(f),
    }
}

fn conv_check(name: &'static str, spec: KernelSpec, shape: &'static [usize]) -> SuiteCheck {
    SuiteCheck {
        name,
        max_entries: None,
        build: Box::new(move |seed| {
            let mut store = ParamStore::new();
            let (layout, x) = sparse_input(&mut store, shape, 1, 3, 0.3, seed)?;
            let layer = ConvLayer::new(&mut store, "conv", spec, 3, 2, true, seed);
            Ok(case(store, NormMode::Eval, move |s, t| {
                let xv = t.sparse_param(&layout, s, x);
                Ok(layer.forward(t, s, &xv)?.var)
            }))
        }),
    }
}

/// A block mapping one rank-2 sparse input to a sparse output.
fn block_check<B: 'static>(
    name: &'static str,
    mode: NormMode,
    shape: &'static [usize],
    channels: usize,
    make: impl Fn(&mut ParamStore<f64>, u64) -> B + Send + Sync + 'static,
    run: impl Fn(&B, &mut Tape<f64>, &ParamStore<f64>, &SparseVar) -> Result<SparseVar> + Copy + Send + Sync + 'static,
) -> SuiteCheck {
    SuiteCheck {
        name,
        max_entries: None,
        build: Box::new(move |seed| {
            let mut store = ParamStore::new();
            let (layout, x) = sparse_input(&mut store, shape, 1, channels, 0.35, seed)?;
            let block = make(&mut store, seed);
            randomize_norms(&mut store, seed);
            Ok(case(store, mode, move |s, t| {
                let xv = t.sparse_param(&layout, s, x);
                Ok(run(&block, t, s, &xv)?.var)
            }))
        }),
    }
}

fn toy_network() -> (NetworkConfig, GridConfig) {
    let cfg = NetworkConfig {
        stage_channels: [3, 3, 4, 4, 4, 4],
        fuse_channels: 4,
        head_channels: 3,
        encoder_channels: 3,
        convnext_expand: 2,
        num_classes: 2,
        ..NetworkConfig::default()
    };
    let grid = GridConfig {
        x_range: [-6.4, 6.4],
        y_range: [-6.4, 6.4],
        z_range: [-2.0, 4.0],
        voxel_size: [0.4, 0.4, 1.0],
        max_points_per_voxel: 6,
    };
    (cfg, grid)
}

/// Every registered check, in report order.
pub fn registered_checks() -> Vec<SuiteCheck> {
    let mut checks = vec![
        conv_check("conv_submanifold_3x3", KernelSpec::submanifold(&[3, 3]), &[8, 8]),
        conv_check("conv_submanifold_3x3_dilated2", KernelSpec::submanifold(&[3, 3]).with_dilation(2), &[9, 9]),
        conv_check("conv_submanifold_3x3_dilated3", KernelSpec::submanifold(&[3, 3]).with_dilation(3), &[9, 9]),
        conv_check("conv_submanifold_5x5", KernelSpec::submanifold(&[5, 5]), &[8, 8]),
        conv_check("conv_submanifold_1x9", KernelSpec::submanifold(&[1, 9]), &[6, 10]),
        conv_check("conv_submanifold_9x1", KernelSpec::submanifold(&[9, 1]), &[10, 6]),
        conv_check("conv_spatial_3x3_s1", KernelSpec::spatial(&[3, 3], 1), &[7, 7]),
        conv_check("conv_spatial_3x3_s2", KernelSpec::spatial(&[3, 3], 2), &[9, 9]),
        conv_check("conv_column_1x1x6", KernelSpec::column(6), &[4, 4, 6]),
        SuiteCheck {
            name: "conv_depthwise_5x5",
            max_entries: None,
            build: Box::new(|seed| {
                let mut store = ParamStore::new();
                let (layout, x) = sparse_input(&mut store, &[8, 8], 1, 3, 0.35, seed)?;
                let layer = DepthwiseConvLayer::new(&mut store, "dw", KernelSpec::submanifold(&[5, 5]), 3, seed);
                Ok(case(store, NormMode::Eval, move |s, t| {
                    let xv = t.sparse_param(&layout, s, x);
                    Ok(layer.forward(t, s, &xv)?.var)
                }))
            }),
        },
        SuiteCheck {
            name: "matmul",
            max_entries: None,
            build: Box::new(|seed| {
                let mut store = ParamStore::new();
                let x = dense_input(&mut store, 6, 4, seed);
                let w = store.add("w", &[4, 3], random_matrix(4, 3, seed ^ 7), true);
                Ok(case(store, NormMode::Eval, move |s, t| {
                    let (xv, wv) = (t.param(s, x), t.param(s, w));
                    t.matmul(xv, wv)
                }))
            }),
        },
    ];
    for (name, mode) in [("batch_norm_train", NormMode::Train), ("batch_norm_eval", NormMode::Eval)] {
        checks.push(SuiteCheck {
            name,
            max_entries: None,
            build: Box::new(move |seed| {
                let mut store = ParamStore::new();
                let x = dense_input(&mut store, 7, 3, seed);
                let bn = BatchNorm::new(&mut store, "bn", 3);
                randomize_norms(&mut store, seed);
                Ok(case(store, mode, move |s, t| {
                    let xv = t.param(s, x);
                    bn.forward(t, s, xv)
                }))
            }),
        });
    }
    checks.push(SuiteCheck {
        name: "layer_norm",
        max_entries: None,
        build: Box::new(|seed| {
            let mut store = ParamStore::new();
            let (layout, x) = sparse_input(&mut store, &[6, 6], 1, 4, 0.4, seed)?;
            let ln = LayerNorm::new(&mut store, "ln", 4);
            randomize_norms(&mut store, seed);
            Ok(case(store, NormMode::Eval, move |s, t| {
                let xv = t.sparse_param(&layout, s, x);
                Ok(ln.forward_sparse(t, s, &xv)?.var)
            }))
        }),
    });
    type Unary = fn(&mut Tape<f64>, Var) -> Var;
    let unary: [(&'static str, Unary); 2] = [("relu", |t, x| t.relu(x)), ("gelu", |t, x| t.gelu(x))];
    for (name, f) in unary {
        checks.push(SuiteCheck {
            name,
            max_entries: None,
            build: Box::new(move |seed| {
                let mut store = ParamStore::new();
                let x = dense_input(&mut store, 5, 4, seed);
                Ok(case(store, NormMode::Eval, move |s, t| {
                    let xv = t.param(s, x);
                    Ok(f(t, xv))
                }))
            }),
        });
    }
    checks.push(SuiteCheck {
        name: "add_and_scatter",
        max_entries: None,
        build: Box::new(|seed| {
            let mut store = ParamStore::new();
            let a = dense_input(&mut store, 4, 3, seed);
            let b = store.add("b", &[4, 3], random_matrix(4, 3, seed ^ 3), true);
            let c = store.add("c", &[2, 3], random_matrix(2, 3, seed ^ 4), true);
            Ok(case(store, NormMode::Eval, move |s, t| {
                let (av, bv, cv) = (t.param(s, a), t.param(s, b), t.param(s, c));
                let sum = t.add(av, bv)?;
                t.scatter(vec![(sum, vec![0, 1, 2, 3]), (cv, vec![4, 1])], 5, 3)
            }))
        }),
    });
    for (name, kind) in [("pool_max", PoolKind::Max), ("pool_max_min_mean", PoolKind::MaxMinMean)] {
        checks.push(SuiteCheck {
            name,
            max_entries: None,
            build: Box::new(move |seed| {
                let mut store = ParamStore::new();
                let x = dense_input(&mut store, 9, 3, seed);
                let offsets = Arc::new(vec![0, 1, 4, 9]);
                Ok(case(store, NormMode::Eval, move |s, t| {
                    let xv = t.param(s, x);
                    t.pool(xv, offsets.clone(), kind)
                }))
            }),
        });
    }
    checks.push(SuiteCheck {
        name: "point_mlp",
        max_entries: None,
        build: Box::new(|seed| {
            let mut store = ParamStore::new();
            let x = dense_input(&mut store, 12, 7, seed);
            let mlp = PointMlp::new(&mut store, "mlp", 7, 4, seed);
            randomize_norms(&mut store, seed);
            Ok(case(store, NormMode::Train, move |s, t| {
                let xv = t.param(s, x);
                mlp.forward(t, s, xv)
            }))
        }),
    });
    checks.push(SuiteCheck {
        name: "baseline_pillar_encoder",
        max_entries: None,
        build: Box::new(|seed| {
            let g = toy_network().1;
            let mut store = ParamStore::new();
            let enc = BaselinePillarEncoder::new(&mut store, "pfe", 4, seed);
            randomize_norms(&mut store, seed);
            let vb = enc.prepare(&[random_cloud(80, &g, seed), random_cloud(50, &g, seed ^ 9)], &g, seed)?;
            Ok(case(store, NormMode::Train, move |s, t| Ok(enc.forward_voxels(t, s, &vb)?.var)))
        }),
    });
    checks.push(SuiteCheck {
        name: "voxel2pillar_encoder",
        max_entries: None,
        build: Box::new(|seed| {
            let g = toy_network().1;
            let mut store = ParamStore::new();
            let enc = Voxel2PillarEncoder::new(&mut store, "v2p", 3, 4, g.cells()[2], seed);
            randomize_norms(&mut store, seed);
            let vb = enc.prepare(&[random_cloud(80, &g, seed), random_cloud(50, &g, seed ^ 9)], &g, seed)?;
            Ok(case(store, NormMode::Train, move |s, t| Ok(enc.forward_voxels(t, s, &vb)?.var)))
        }),
    });
    checks.push(block_check(
        "lsfe_block",
        NormMode::Train,
        &[8, 8],
        3,
        |s, seed| LsfeBlock::new(s, "lsfe", 3, 2, seed),
        |b, t, s, x| b.forward(t, s, x),
    ));
    checks.push(block_check(
        "dlsfe_block",
        NormMode::Train,
        &[10, 10],
        3,
        |s, seed| DlsfeBlock::new(s, "dlsfe", 3, seed),
        |b, t, s, x| b.forward(t, s, x),
    ));
    checks.push(block_check(
        "msfe_module_downsample",
        NormMode::Train,
        &[12, 12],
        2,
        |s, seed| MsfeModule::new(s, "msfe", 2, 3, 2, &[2, 3], seed),
        |b, t, s, x| b.forward(t, s, x),
    ));
    checks.push(block_check(
        "convnext_block",
        NormMode::Train,
        &[8, 8],
        3,
        |s, seed| ConvNextBlock::new(s, "cx", 3, 5, 2, seed),
        |b, t, s, x| b.forward(t, s, x),
    ));
    checks.push(SuiteCheck {
        name: "fuse_last_three",
        max_entries: None,
        build: Box::new(|seed| {
            let mut store = ParamStore::new();
            let (l4, x4) = sparse_input(&mut store, &[8, 8], 8, 2, 0.3, seed)?;
            let (l5, x5) = sparse_input(&mut store, &[4, 4], 16, 3, 0.4, seed ^ 1)?;
            let (l6, x6) = sparse_input(&mut store, &[2, 2], 32, 2, 0.6, seed ^ 2)?;
            let f = Fusion::new(&mut store, "fuse", [2, 3, 2], 3, seed);
            Ok(case(store, NormMode::Eval, move |s, t| {
                let a = t.sparse_param(&l4, s, x4);
                let b = t.sparse_param(&l5, s, x5);
                let c = t.sparse_param(&l6, s, x6);
                Ok(f.forward(t, s, [&a, &b, &c])?.var)
            }))
        }),
    });
    checks.push(block_check(
        "neck",
        NormMode::Train,
        &[8, 8],
        3,
        |s, seed| {
            let cfg = NetworkConfig {
                fuse_channels: 3,
                convnext_expand: 2,
                ..NetworkConfig::default()
            };
            Neck::new(s, "neck", &cfg, seed)
        },
        |b, t, s, x| b.forward(t, s, x),
    ));
    checks.push(block_check(
        "head",
        NormMode::Train,
        &[8, 8],
        3,
        |s, seed| {
            let cfg = NetworkConfig {
                head_channels: 3,
                num_classes: 2,
                ..NetworkConfig::default()
            };
            Head::new(s, "head", 3, &cfg, seed)
        },
        |h, t, s, x| {
            let (c, b) = h.forward(t, s, x)?;
            // Stack logits and box codes side by side on the shared sites.
            let cls = t.value(c.var).cols();
            let width = cls + BOX_CODE_SIZE;
            let place = |rows: usize, shift: usize| {
                Matrix::from_vec(rows, width, (0..rows * width).map(|i| f64::from(u8::from(i / width + shift == i % width))).collect())
            };
            let (pc, pb) = (t.constant(place(cls, 0)?), t.constant(place(BOX_CODE_SIZE, cls)?));
            let yc = t.matmul(c.var, pc)?;
            let yb = t.matmul(b.var, pb)?;
            Ok(SparseVar {
                layout: c.layout.clone(),
                var: t.add(yc, yb)?,
            })
        },
    ));
    checks.push(SuiteCheck {
        name: "detection_loss",
        max_entries: None,
        build: Box::new(|seed| {
            let mut store = ParamStore::new();
            let n = 6;
            let cls = store.add("cls_logits", &[n, 2], random_matrix(n, 2, seed).map(|v| 3.0 * v), true);
            let boxes = store.add("box_codes", &[n, BOX_CODE_SIZE], random_matrix(n, BOX_CODE_SIZE, seed ^ 5), true);
            let mut target_cls = Matrix::zeros(n, 2);
            target_cls.set(1, 0, 1.0);
            target_cls.set(4, 1, 1.0);
            let mut r = rng::stream(seed, "loss-targets");
            let mut code = || -> [f64; BOX_CODE_SIZE] { std::array::from_fn(|_| r.gen_range(-1.0..1.0)) };
            let targets = TargetSet {
                cls: target_cls,
                positives: vec![(1, code()), (4, code())],
                conflicts: 0,
                skipped: 0,
            };
            Ok(case(store, NormMode::Eval, move |s, t| {
                let (c, b) = (t.param(s, cls), t.param(s, boxes));
                Ok(detection_loss(t, c, b, &targets)?.total)
            }))
        }),
    });
    checks.push(SuiteCheck {
        name: "full_network",
        max_entries: Some(6),
        build: Box::new(|seed| {
            let (cfg, g) = toy_network();
            let mut store = ParamStore::new();
            let net = PillarNet::new(&mut store, &cfg, &g, seed)?;
            randomize_norms(&mut store, seed);
            let clouds = [random_cloud(300, &g, seed), random_cloud(200, &g, seed ^ 3)];
            let vb = net.prepare(&clouds, seed)?;
            Ok(case(store, NormMode::Eval, move |s, t| {
                let out = net.forward(t, s, &vb)?;
                // Joint projection of class logits and box codes.
                let wc = random_matrix(t.value(out.cls.var).rows(), cfg.num_classes, seed ^ 0xc1);
                let wb = random_matrix(t.value(out.boxes.var).rows(), BOX_CODE_SIZE, seed ^ 0xb0);
                let a = t.dot(out.cls.var, wc)?;
                let b = t.dot(out.boxes.var, wb)?;
                t.sum_scalars(&[a, b])
            }))
        }),
    });
    checks
}

/// Run every registered check.
pub fn run_suite(seed: u64, tol: f64) -> Vec<SuiteRow> {
    registered_checks()
        .into_iter()
        .enumerate()
        .map(|(i, check)| {
            let opts = GradCheckOptions {
                tol,
                max_entries: check.max_entries,
                ..GradCheckOptions::default()
            };
            match grad_check(&*check.build, rng::stream_seed(seed, check.name) ^ i as u64, &opts) {
                Ok(r) => SuiteRow {
                    name: check.name.to_string(),
                    passed: r.passed,
                    max_rel_err: r.max_rel_err,
                    worst_group: r.worst_group,
                    groups: r.groups.len(),
                    entries: r.groups.iter().map(|g| g.checked).sum(),
                    resamples: r.resamples,
                    error: String::new(),
                },
                Err(e) => SuiteRow {
                    name: check.name.to_string(),
                    passed: false,
                    max_rel_err: f64::NAN,
                    worst_group: String::new(),
                    groups: 0,
                    entries: 0,
                    resamples: 0,
                    error: e.to_string(),
                },
            }
        })
        .collect()
}
