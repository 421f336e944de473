//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion to
//! stderr (bypassing the test harness capture) and fails if any criterion
//! fails. Criteria run one after another because several of them are timed.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{Matrix4, Rotation3, Unit, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cordvip::cli::{self, RunConfig};
use cordvip::corrnet::{CorrNet, EncoderConfig, FrameTensors, PretrainSample};
use cordvip::diffpolicy::{
    ddim_timesteps, ddim_trajectory, denoise_loss, draw_noise, forward_noise, initial_noise, make_schedule, Denoiser,
    ResidualDenoiser, ScheduleKind,
};
use cordvip::nncore::{gradcheck, Axis, Graph, LayerNorm, Linear, Mlp, MultiHeadCrossAttention, ParamStore, Tensor, Var};
use cordvip::pcgeom::{
    aligned_distance, contact_map, estimate_normals, farthest_point_sample, knn, AlignedDistances, PointSet,
};
use cordvip::se3kin::{
    fk_pointcloud, posed_link_cloud, sample_chain_surfaces, serial_test_chain, JointType, JointVector, KinematicChain,
};
use cordvip::Result;

// Pinned tolerances and budgets.
const ALIGNED_TOL: f64 = 1e-9;
const CONTACT_HALF_TOL: f64 = 1e-9;
const FK_TOL: f64 = 1e-9;
const MIN_FK_RATE: f64 = 8.0;
const PRIMITIVE_GRAD_TOL: f64 = 1e-4;
const END_TO_END_GRAD_TOL: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-6;
const ORACLE_DDIM_TOL: f64 = 1e-6;
const MARGINAL_REL_TOL: f64 = 0.02;
const ZERO_DENOISER_TOL: f64 = 1e-9;
const MIN_MSE_DROP: f64 = 0.5;
const MIN_PEARSON: f64 = 0.9;
const MIN_SUCCESS: f64 = 0.8;
const EVAL_EPISODES: usize = 20;
const EVAL_SEED: u64 = 1000;
const EVAL_MAX_STEPS: usize = 120;
const MIN_STEP_RATE: f64 = 5.0;
const DEMOS: usize = 50;

fn minutes(m: f64) -> Duration {
    Duration::from_secs_f64(m * 60.0)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn announce(n: usize, name: &str, o: &Outcome, elapsed: Duration) {
    let line = format!(
        "criterion {n} {name}: {} ({}; {:.1}s)\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn timed(n: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let mut o = f();
    let el = t0.elapsed();
    if let Some(b) = budget {
        if el > b {
            o.pass = false;
            o.detail.push_str(&format!("; over budget of {:.0}s", b.as_secs_f64()));
        }
    }
    announce(n, name, &o, el);
    o.pass
}

fn rand_cloud(rng: &mut ChaCha8Rng, n: usize, grid: bool) -> PointSet {
    let pts = (0..n)
        .map(|_| {
            if grid {
                // coarse integer lattice: plenty of exact ties and duplicates
                [0; 3].map(|_| rng.gen_range(0..5) as f64)
            } else {
                [0; 3].map(|_| rng.gen_range(-1.0..1.0))
            }
        })
        .collect();
    PointSet::new(pts).unwrap()
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (x, y, z) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    x * x + y * y + z * z
}

fn brute_knn(q: &[f64; 3], reference: &[[f64; 3]], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = reference.iter().enumerate().map(|(i, r)| (d2(q, r), i)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Exhaustive max-min selection: the next point maximizes its distance to the
/// selected set, lowest index on ties, never repeating a point.
fn brute_fps(pts: &[[f64; 3]], m: usize, start: usize) -> Vec<usize> {
    let mut out = vec![start];
    let mut near: Vec<f64> = pts.iter().map(|p| d2(p, &pts[start])).collect();
    let mut taken = vec![false; pts.len()];
    taken[start] = true;
    while out.len() < m {
        let mut best: Option<usize> = None;
        for i in 0..pts.len() {
            if !taken[i] && best.map_or(true, |b| near[i] > near[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        out.push(b);
        taken[b] = true;
        for (i, p) in pts.iter().enumerate() {
            near[i] = near[i].min(d2(p, &pts[b]));
        }
    }
    out
}

fn criterion_geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut knn_bad = 0;
    let mut fps_bad = 0;
    for c in 0..100 {
        let n = rng.gen_range(1..=1000);
        let cloud = rand_cloud(&mut rng, n, c % 10 == 0);
        let queries = rand_cloud(&mut rng, 50, c % 10 == 0);
        let k = rng.gen_range(1..=n.min(16));
        for q in [&cloud, &queries] {
            let got = knn(q, &cloud, k).unwrap();
            for (qp, g) in q.points().iter().zip(&got) {
                if *g != brute_knn(qp, cloud.points(), k) {
                    knn_bad += 1;
                }
            }
        }
        let m = rng.gen_range(1..=n);
        let start = rng.gen_range(0..n);
        if farthest_point_sample(&cloud, m, start).unwrap() != brute_fps(cloud.points(), m, start) {
            fps_bad += 1;
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (no, nh) = (rng.gen_range(10..=400), rng.gen_range(1..=400));
        let obj = rand_cloud(&mut rng, no, false);
        let hand = rand_cloud(&mut rng, nh, false);
        let gamma = rng.gen_range(0.0..3.0);
        let normals = estimate_normals(&obj, 8).unwrap();
        let got = aligned_distance(&obj, &normals, &hand, gamma).unwrap();
        for ((o, nv), &v) in obj.points().iter().zip(normals.normals()).zip(got.values()) {
            let mut best = f64::INFINITY;
            for h in hand.points() {
                let d = d2(o, h).sqrt();
                let w = if d == 0.0 {
                    0.0
                } else {
                    let dir = [(h[0] - o[0]) / d, (h[1] - o[1]) / d, (h[2] - o[2]) / d];
                    let cos = (dir[0] * nv[0] + dir[1] * nv[1] + dir[2] * nv[2]).abs().min(1.0);
                    (gamma * (1.0 - cos)).exp() * d
                };
                best = best.min(w);
            }
            worst = worst.max((best - v).abs());
        }
    }
    outcome(
        knn_bad == 0 && fps_bad == 0 && worst < ALIGNED_TOL,
        format!("knn mismatches {knn_bad}, fps mismatches {fps_bad}, aligned distance max error {worst:.2e}"),
    )
}

fn criterion_contact_law() -> Outcome {
    let theta = 10.0;
    let at = |d: f64| contact_map(&AlignedDistances::new(vec![d]).unwrap(), theta).unwrap().values()[0];
    let c0 = at(0.0);
    let half = at(3f64.ln() / theta);
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut d: Vec<f64> = (0..100_000).map(|_| rng.gen_range(0.0..5.0)).collect();
    d.sort_by(f64::total_cmp);
    let c = contact_map(&AlignedDistances::new(d.clone()).unwrap(), theta).unwrap();
    let v = c.values();
    let bounded = v.iter().all(|x| (0.0..=1.0).contains(x));
    let mut monotone = true;
    for i in 1..v.len() {
        let strict = d[i] > d[i - 1] && theta * d[i] < 30.0;
        if v[i] > v[i - 1] || (strict && v[i] >= v[i - 1]) {
            monotone = false;
        }
    }
    outcome(
        c0 == 1.0 && (half - 0.5).abs() < CONTACT_HALF_TOL && bounded && monotone,
        format!("c(0) = {c0}, c(ln3/θ) = {half:.12}, in [0,1]: {bounded}, decreasing: {monotone}"),
    )
}

/// Base-frame transform of every link from 4x4 products.
fn homogeneous_fk(chain: &KinematicChain, q: &[f64]) -> Vec<Matrix4<f64>> {
    let mut out = vec![Matrix4::identity()];
    for (j, &qj) in chain.joints().iter().zip(q) {
        let r = j.origin.rotation_matrix();
        let mut origin = Matrix4::identity();
        for a in 0..3 {
            for b in 0..3 {
                origin[(a, b)] = r[a][b];
            }
            origin[(a, 3)] = j.origin.translation[a];
        }
        let axis = Vector3::from(j.axis);
        let motion = match j.kind {
            JointType::Revolute => Rotation3::from_axis_angle(&Unit::new_normalize(axis), qj).to_homogeneous(),
            JointType::Prismatic => Matrix4::new_translation(&(axis * qj)),
        };
        out.push(out[j.parent] * origin * motion);
    }
    out
}

fn criterion_fk() -> Outcome {
    let chain = serial_test_chain(20);
    let samples = sample_chain_surfaces(&chain, 60, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    let mut fps_bad = 0;
    for _ in 0..100 {
        let q: Vec<f64> = chain.joints().iter().map(|j| rng.gen_range(j.limits[0]..j.limits[1])).collect();
        let jv = JointVector::new(&chain, &q).unwrap();
        let mats = homogeneous_fk(&chain, &q);
        let oracle: Vec<[f64; 3]> = samples
            .iter()
            .zip(&mats)
            .flat_map(|(s, t)| {
                s.points().iter().map(move |p| {
                    let h = t * Vector4::new(p[0], p[1], p[2], 1.0);
                    [h[0], h[1], h[2]]
                })
            })
            .collect();
        let posed = posed_link_cloud(&chain, &jv, &samples, None).unwrap();
        let pc = fk_pointcloud(&chain, &jv, &samples, None, 1024).unwrap();
        let idx = brute_fps(&oracle, 1024, 0);
        if pc.len() != 1024 {
            fps_bad += 1;
            continue;
        }
        for (a, b) in posed.points().iter().zip(&oracle) {
            worst = worst.max((0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max));
        }
        for (a, &i) in pc.points().iter().zip(&idx) {
            let b = oracle[i];
            worst = worst.max((0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max));
        }
    }
    let bench = cli::bench_fk(20, 1024, 2.0).unwrap();
    outcome(
        worst < FK_TOL && fps_bad == 0 && bench.rate >= MIN_FK_RATE,
        format!(
            "max error vs homogeneous oracle {worst:.2e}, bench-fk {:.1} calls/s at 20 links x 1024 points",
            bench.rate
        ),
    )
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay outside the probe step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v += 0.1f64.copysign(*v));
    t
}

/// Scalar readout `Σ y ⊙ W` with a fixed random `W`.
fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    build: Box<dyn Fn(&mut ChaCha8Rng, &mut ParamStore<f64>) -> (Vec<Tensor<f64>>, OpFn)>,
}

fn op(
    name: &'static str,
    build: impl Fn(&mut ChaCha8Rng, &mut ParamStore<f64>) -> (Vec<Tensor<f64>>, OpFn) + 'static,
) -> OpCase {
    OpCase { name, build: Box::new(build) }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..6), rng.gen_range(2..7))
}

fn op_cases() -> Vec<OpCase> {
    let mut cases = Vec::new();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        cases.push(op("matmul", move |rng, _| {
            let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let alpha = rng.gen_range(0.5..2.0);
            let a = rand_tensor(rng, &if ta { [k, m] } else { [m, k] });
            let b = rand_tensor(rng, &if tb { [n, k] } else { [k, n] });
            (vec![a, b], Box::new(move |g, v| {
                let y = g.matmul_ex(v[0], v[1], ta, tb, alpha)?;
                project(g, y, 1)
            }))
        }));
    }
    for which in 0..3 {
        cases.push(op(["add", "sub", "mul"][which], move |rng, _| {
            let (r, c) = dims(rng);
            (vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c])], Box::new(move |g, v| {
                let y = match which {
                    0 => g.add(v[0], v[1])?,
                    1 => g.sub(v[0], v[1])?,
                    _ => g.mul(v[0], v[1])?,
                };
                project(g, y, 2)
            }))
        }));
    }
    cases.push(op("add_bias", |rng, _| {
        let (r, c) = dims(rng);
        (vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[1, c])], Box::new(|g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y, 3)
        }))
    }));
    cases.push(op("scale", |rng, _| {
        let (r, c) = dims(rng);
        let s = rng.gen_range(-2.0..2.0);
        (vec![rand_tensor(rng, &[r, c])], Box::new(move |g, v| {
            let y = g.scale(v[0], s);
            project(g, y, 4)
        }))
    }));
    cases.push(op("relu", |rng, _| {
        let (r, c) = dims(rng);
        (vec![off_zero(rng, &[r, c])], Box::new(|g, v| {
            let y = g.relu(v[0]);
            project(g, y, 5)
        }))
    }));
    cases.push(op("sigmoid", |rng, _| {
        let (r, c) = dims(rng);
        (vec![rand_tensor(rng, &[r, c])], Box::new(|g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, 6)
        }))
    }));
    for axis in [Axis::Rows, Axis::Cols] {
        cases.push(op("softmax", move |rng, _| {
            let (r, c) = dims(rng);
            (vec![rand_tensor(rng, &[r, c])], Box::new(move |g, v| {
                let y = g.softmax(v[0], axis);
                project(g, y, 7)
            }))
        }));
        cases.push(op("max_pool", move |rng, _| {
            let (r, c) = dims(rng);
            (vec![rand_tensor(rng, &[r, c])], Box::new(move |g, v| {
                let y = g.max_pool(v[0], axis)?;
                project(g, y, 8)
            }))
        }));
        cases.push(op("concat", move |rng, _| {
            let (r, c) = dims(rng);
            let other = rng.gen_range(1..4);
            let shape2 = match axis {
                Axis::Rows => [other, c],
                Axis::Cols => [r, other],
            };
            (vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &shape2), rand_tensor(rng, &[r, c])], Box::new(
                move |g, v| {
                    let y = match axis {
                        Axis::Rows => g.concat(&[v[0], v[1]], axis)?,
                        Axis::Cols => g.concat(&[v[0], v[1], v[2]], axis)?,
                    };
                    project(g, y, 9)
                },
            ))
        }));
        cases.push(op("slice", move |rng, _| {
            let (r, c) = (rng.gen_range(2..6), rng.gen_range(2..7));
            let extent = match axis {
                Axis::Rows => r,
                Axis::Cols => c,
            };
            let start = rng.gen_range(0..extent);
            let len = rng.gen_range(1..=extent - start);
            (vec![rand_tensor(rng, &[r, c])], Box::new(move |g, v| {
                let y = g.slice(v[0], axis, start, len)?;
                project(g, y, 10)
            }))
        }));
    }
    for affine in [false, true] {
        cases.push(op("layer_norm", move |rng, _| {
            let (r, c) = dims(rng);
            (vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[c]), rand_tensor(rng, &[c])], Box::new(
                move |g, v| {
                    let y = if affine {
                        g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?
                    } else {
                        g.layer_norm(v[0], None, None, 1e-5)?
                    };
                    project(g, y, 11)
                },
            ))
        }));
    }
    cases.push(op("mse", |rng, _| {
        let (r, c) = dims(rng);
        (vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c])], Box::new(|g, v| g.mse(v[0], v[1])))
    }));
    cases.push(op("sum", |rng, _| {
        let (r, c) = dims(rng);
        (vec![rand_tensor(rng, &[r, c])], Box::new(|g, v| {
            let s = g.mul(v[0], v[0])?;
            Ok(g.sum(s))
        }))
    }));
    cases.push(op("reshape", |rng, _| {
        let (r, c) = dims(rng);
        (vec![rand_tensor(rng, &[r, c])], Box::new(move |g, v| {
            let y = g.reshape(v[0], &[c, r])?;
            let y = g.sigmoid(y);
            project(g, y, 12)
        }))
    }));
    cases.push(op("attention", |rng, _| {
        let heads = rng.gen_range(1..4);
        let d = heads * rng.gen_range(1..4);
        let (nq, nk) = (rng.gen_range(1..5), rng.gen_range(1..6));
        let scale = 1.0 / ((d / heads) as f64).sqrt();
        (vec![rand_tensor(rng, &[nq, d]), rand_tensor(rng, &[nk, d]), rand_tensor(rng, &[nk, d])], Box::new(
            move |g, v| {
                let y = g.attention(v[0], v[1], v[2], heads, scale)?;
                project(g, y, 13)
            },
        ))
    }));
    cases.push(op("linear", |rng, store| {
        let (r, c) = dims(rng);
        let l = Linear::new(store, "lin", c, rng.gen_range(1..5), rng).unwrap();
        (vec![rand_tensor(rng, &[r, c])], Box::new(move |g, v| {
            let y = l.forward(g, v[0])?;
            project(g, y, 14)
        }))
    }));
    cases.push(op("layer_norm_module", |rng, store| {
        let (r, c) = dims(rng);
        let ln = LayerNorm::new(store, "ln", c).unwrap();
        (vec![rand_tensor(rng, &[r, c])], Box::new(move |g, v| {
            let y = ln.forward(g, v[0])?;
            project(g, y, 15)
        }))
    }));
    cases.push(op("mlp", |rng, store| {
        let (r, c) = dims(rng);
        let mlp = Mlp::new(store, "mlp", &[c, 6, 3], rng).unwrap();
        (vec![off_zero(rng, &[r, c])], Box::new(move |g, v| {
            let y = mlp.forward(g, v[0])?;
            project(g, y, 16)
        }))
    }));
    cases.push(op("cross_attention", |rng, store| {
        let heads = rng.gen_range(1..3);
        let d = heads * 2;
        let att = MultiHeadCrossAttention::new(store, "att", d, heads, rng).unwrap();
        let (nq, nk) = (rng.gen_range(1..4), rng.gen_range(1..5));
        (vec![rand_tensor(rng, &[nq, d]), rand_tensor(rng, &[nk, d])], Box::new(move |g, v| {
            let y = att.forward(g, v[0], v[1])?;
            project(g, y, 17)
        }))
    }));
    cases
}

fn tiny_encoder(rng: &mut ChaCha8Rng) -> EncoderConfig {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    EncoderConfig {
        n_points: rng.gen_range(4..12),
        d: 8,
        heads,
        state_dim: 4,
        horizon: rng.gen_range(1..4),
        lambda: rng.gen_range(0.2..2.0),
        ..EncoderConfig::default()
    }
}

fn rand_frame(rng: &mut ChaCha8Rng, n: usize) -> FrameTensors<f64> {
    FrameTensors {
        obj: rand_tensor(rng, &[n, 3]),
        hand: rand_tensor(rng, &[n, 3]),
        arm: rand_tensor(rng, &[1, 3]),
        hand_state: rand_tensor(rng, &[1, 2]),
    }
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst_prim = (0.0f64, "");
    let mut prim_checks = 0;
    for case in op_cases() {
        for _ in 0..5 {
            let mut store = ParamStore::new();
            let (inputs, f) = (case.build)(&mut rng, &mut store);
            let rep = gradcheck(&mut store, &inputs, GRAD_STEP, 10_000, |g, v| f(g, v)).unwrap();
            prim_checks += 1;
            if rep.max_rel_error > worst_prim.0 || rep.max_rel_error.is_nan() {
                worst_prim = (rep.max_rel_error, case.name);
            }
        }
    }

    let mut worst_e2e = 0.0f64;
    for _ in 0..5 {
        let cfg = tiny_encoder(&mut rng);
        let mut store = ParamStore::new();
        let net = CorrNet::new(&mut store, "corr", cfg.clone(), 3, 2, &mut rng).unwrap();
        let n = cfg.n_points;
        let sample = PretrainSample {
            frame: rand_frame(&mut rng, n),
            contact: Tensor::new(vec![n, 1], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
            arm_seq: rand_tensor(&mut rng, &[1, cfg.horizon * 3]),
            hand_seq: rand_tensor(&mut rng, &[1, cfg.horizon * 2]),
        };
        let rep = gradcheck(&mut store, &[], GRAD_STEP, 24, |g, _| Ok(net.pretrain_loss(g, &sample)?.total)).unwrap();
        worst_e2e = worst_e2e.max(rep.max_rel_error);
    }
    // policy loss through the encoder: two samples, two observation frames each
    let schedule = make_schedule(100, ScheduleKind::SquaredCosine).unwrap();
    for _ in 0..5 {
        let cfg = tiny_encoder(&mut rng);
        let mut store = ParamStore::new();
        let net = CorrNet::new(&mut store, "corr", cfg.clone(), 3, 2, &mut rng).unwrap();
        let action_dim = cfg.horizon * 5;
        let den = ResidualDenoiser::new(&mut store, "den", action_dim, 2 * cfg.feature_dim(), 8, 2, &mut rng).unwrap();
        let frames: Vec<FrameTensors<f64>> = (0..4).map(|_| rand_frame(&mut rng, cfg.n_points)).collect();
        let a0: Vec<f64> = (0..2 * action_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let draw = draw_noise(&mut rng, 2, action_dim, &schedule);
        let rep = gradcheck(&mut store, &[], GRAD_STEP, 24, |g, _| {
            let mut rows = Vec::new();
            for pair in frames.chunks(2) {
                let mut feats = Vec::new();
                for f in pair {
                    let o = g.constant(f.obj.clone());
                    let h = g.constant(f.hand.clone());
                    let a = g.constant(f.arm.clone());
                    let s = g.constant(f.hand_state.clone());
                    let fv = net.features(g, o, h, a, s)?;
                    feats.push(net.condition(g, &fv)?);
                }
                rows.push(g.concat(&feats, Axis::Cols)?);
            }
            let cond = g.concat(&rows, Axis::Rows)?;
            denoise_loss(g, &den, &a0, cond, &draw, &schedule)
        })
        .unwrap();
        worst_e2e = worst_e2e.max(rep.max_rel_error);
    }
    outcome(
        worst_prim.0 < PRIMITIVE_GRAD_TOL && worst_e2e < END_TO_END_GRAD_TOL,
        format!(
            "{prim_checks} primitive checks, worst {:.2e} ({}); end-to-end worst {:.2e}",
            worst_prim.0, worst_prim.1, worst_e2e
        ),
    )
}

struct Oracle {
    a0: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Denoiser for Oracle {
    fn predict_noise(&self, a_k: &[f64], _: &[f64], k: usize) -> Result<Vec<f64>> {
        let ab = self.alpha_bar[k];
        Ok(a_k.iter().zip(&self.a0).map(|(x, a)| (x - ab.sqrt() * a) / (1.0 - ab).sqrt()).collect())
    }
}

struct Zero;

impl Denoiser for Zero {
    fn predict_noise(&self, a_k: &[f64], _: &[f64], _: usize) -> Result<Vec<f64>> {
        Ok(vec![0.0; a_k.len()])
    }
}

fn criterion_diffusion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut oracle_err = 0.0f64;
    let mut zero_err = 0.0f64;
    let mut marginal_err = 0.0f64;
    for kind in [ScheduleKind::SquaredCosine, ScheduleKind::Linear] {
        let s = make_schedule(100, kind).unwrap();
        let ab = s.alpha_bars().to_vec();
        let mut subsets: Vec<Vec<usize>> = vec![ddim_timesteps(&s, 10).unwrap(), (1..=100).rev().collect(), vec![100], vec![1]];
        for _ in 0..200 {
            let p = rng.gen_range(0.01..1.0);
            let mut ks: Vec<usize> = (1..=100).rev().filter(|_| rng.gen_bool(p)).collect();
            if ks.is_empty() {
                ks.push(rng.gen_range(1..=100));
            }
            subsets.push(ks);
        }
        for ks in &subsets {
            let a0: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let den = Oracle { a0: a0.clone(), alpha_bar: ab.clone() };
            let traj = ddim_trajectory(initial_noise(60, rng.gen()), &[], &den, &s, ks).unwrap();
            for (x, a) in traj.last().unwrap().iter().zip(&a0) {
                oracle_err = oracle_err.max((x - a).abs());
            }

            // zero noise estimate: each step rescales by √(ᾱ_prev/ᾱ_k)
            let start = initial_noise(16, rng.gen());
            let traj = ddim_trajectory(start.clone(), &[], &Zero, &s, ks).unwrap();
            let mut x = start;
            for (i, &k) in ks.iter().enumerate() {
                let prev = if i + 1 < ks.len() { ab[ks[i + 1]] } else { 1.0 };
                let r = (prev / ab[k]).sqrt();
                x.iter_mut().for_each(|v| *v *= r);
                for (a, b) in traj[i + 1].iter().zip(&x) {
                    zero_err = zero_err.max((a - b).abs() / b.abs().max(1.0));
                }
            }
        }
        for (k, a0) in [(10usize, 0.9), (30, -0.7), (50, 0.9)] {
            let n = 100_000;
            let xs: Vec<f64> = (0..n)
                .map(|_| {
                    let e: f64 = rng.sample(StandardNormal);
                    forward_noise(&[a0], k, &[e], &s).unwrap()[0]
                })
                .collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let (m, v) = (ab[k].sqrt() * a0, 1.0 - ab[k]);
            marginal_err = marginal_err.max(((mean - m) / m).abs()).max(((var - v) / v).abs());
        }
    }
    outcome(
        oracle_err < ORACLE_DDIM_TOL && zero_err < ZERO_DENOISER_TOL && marginal_err < MARGINAL_REL_TOL,
        format!(
            "oracle recovery {oracle_err:.2e}, zero-denoiser recurrence {zero_err:.2e}, marginal relative error {:.2}%",
            100.0 * marginal_err
        ),
    )
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), read(&p))
        })
        .collect();
    v.sort();
    v
}

fn metric_rows(p: &Path) -> Vec<Vec<f64>> {
    String::from_utf8(read(p))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

struct Arm {
    first_loss: f64,
    last_loss: f64,
    summary: cli::EvalSummary,
    report: PathBuf,
    policy: PathBuf,
}

fn train_and_eval(tag: &str, data: &Path, encoder: Option<&Path>, cfg: &RunConfig, dir: &Path) -> Arm {
    let policy = dir.join(format!("{tag}.ckpt"));
    let (first_loss, last_loss) =
        cli::train(data, encoder, cfg, &policy, 0, false, &dir.join(format!("{tag}.csv"))).unwrap();
    let report = dir.join(format!("{tag}_eval.csv"));
    let summary = cli::eval(&policy, EVAL_EPISODES, EVAL_SEED, &report, EVAL_MAX_STEPS).unwrap();
    Arm { first_loss, last_loss, summary, report, policy }
}

#[test]
fn acceptance() {
    let mut all = true;
    all &= timed(1, "geometry oracles", Some(minutes(1.0)), criterion_geometry);
    all &= timed(2, "contact-map law", Some(minutes(0.5)), criterion_contact_law);
    all &= timed(3, "forward kinematics and throughput", Some(minutes(2.0)), criterion_fk);
    all &= timed(4, "gradient checks", Some(minutes(5.0)), criterion_gradients);
    all &= timed(5, "diffusion identities", Some(minutes(2.0)), criterion_diffusion);

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = RunConfig::default();
    let data = dir.join("data");
    cli::gen_data("planar-push", DEMOS, 0, &data, &cfg).unwrap();

    let enc = dir.join("encoder.ckpt");
    let enc_metrics = dir.join("encoder.csv");
    all &= timed(6, "pretraining efficacy", Some(minutes(15.0)), || {
        cli::pretrain(&data, &cfg, &enc, 0, None, &enc_metrics).unwrap();
        let rows = metric_rows(&enc_metrics);
        let (init, last) = (&rows[0], rows.last().unwrap());
        let drop = 1.0 - last[4] / init[4];
        outcome(
            drop >= MIN_MSE_DROP && last[6] > MIN_PEARSON,
            format!(
                "held-out contact MSE {:.4} -> {:.4} ({:.0}% drop), Pearson r {:.3}",
                init[4],
                last[4],
                100.0 * drop,
                last[6]
            ),
        )
    });

    let mut arm = None;
    all &= timed(7, "end-to-end toy reproduction", Some(minutes(45.0)), || {
        let pre = train_and_eval("policy", &data, Some(&enc), &cfg, dir);
        let scratch = train_and_eval("scratch", &data, None, &cfg, dir);
        let o = outcome(
            pre.summary.success_rate() >= MIN_SUCCESS,
            format!(
                "pretrained {}/{} (loss {:.2} -> {:.2}), no-pretrain {}/{} (loss {:.2} -> {:.2})",
                pre.summary.successes,
                pre.summary.episodes,
                pre.first_loss,
                pre.last_loss,
                scratch.summary.successes,
                scratch.summary.episodes,
                scratch.first_loss,
                scratch.last_loss
            ),
        );
        arm = Some(pre);
        o
    });
    let arm = arm.unwrap();

    all &= timed(8, "inference rate", None, || {
        let rate = arm.summary.steps_per_second();
        outcome(
            rate >= MIN_STEP_RATE,
            format!("{rate:.1} policy steps/s over {} steps", arm.summary.total_steps),
        )
    });

    all &= timed(9, "determinism", None, || {
        let mut same = Vec::new();
        let data2 = dir.join("data2");
        cli::gen_data("planar-push", DEMOS, 0, &data2, &cfg).unwrap();
        same.push(("gen-data", dir_bytes(&data) == dir_bytes(&data2)));

        let short = RunConfig {
            pretrain_epochs: 1,
            frames_per_epoch: 16,
            policy_epochs: 2,
            ..cfg.clone()
        };
        let run = |tag: &str| {
            let e = dir.join(format!("det_enc_{tag}.ckpt"));
            let em = dir.join(format!("det_enc_{tag}.csv"));
            cli::pretrain(&data, &short, &e, 3, None, &em).unwrap();
            let p = dir.join(format!("det_pol_{tag}.ckpt"));
            let pm = dir.join(format!("det_pol_{tag}.csv"));
            cli::train(&data, Some(&e), &short, &p, 3, false, &pm).unwrap();
            [read(&e), read(&em), read(&p), read(&pm)]
        };
        let (a, b) = (run("a"), run("b"));
        same.push(("pretrain", a[..2] == b[..2]));
        same.push(("train", a[2..] == b[2..]));

        let again = dir.join("policy_eval_again.csv");
        cli::eval(&arm.policy, EVAL_EPISODES, EVAL_SEED, &again, EVAL_MAX_STEPS).unwrap();
        same.push(("eval", read(&again) == read(&arm.report)));

        let differing: Vec<&str> = same.iter().filter(|(_, s)| !s).map(|(n, _)| *n).collect();
        outcome(
            differing.is_empty(),
            if differing.is_empty() {
                "gen-data, pretrain, train and eval outputs byte-identical on rerun".to_string()
            } else {
                format!("outputs differ for {}", differing.join(", "))
            },
        )
    });

    assert!(all, "at least one acceptance criterion failed; see the lines above");
}
