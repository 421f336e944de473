use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nncore::{gradcheck, AdamW, AdamWConfig, Tensor};

fn small_config(n: usize, d: usize) -> EncoderConfig {
    EncoderConfig {
        n_points: n,
        d,
        heads: 4,
        state_dim: 16,
        horizon: 12,
        ..EncoderConfig::default()
    }
}

fn build(cfg: EncoderConfig, seed: u64) -> (ParamStore<f64>, CorrNet) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = CorrNet::new(&mut store, "corr", cfg, 3, 2, &mut rng).unwrap();
    (store, net)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn sample(n: usize, h: usize, seed: u64) -> PretrainSample<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PretrainSample {
        frame: FrameTensors {
            obj: rand_tensor(&mut rng, &[n, 3], -1.0, 1.0),
            hand: rand_tensor(&mut rng, &[n, 3], -1.0, 1.0),
            arm: rand_tensor(&mut rng, &[1, 3], -1.0, 1.0),
            hand_state: rand_tensor(&mut rng, &[1, 2], -1.0, 1.0),
        },
        contact: rand_tensor(&mut rng, &[n, 1], 0.0, 1.0),
        arm_seq: rand_tensor(&mut rng, &[1, h * 3], -1.0, 1.0),
        hand_seq: rand_tensor(&mut rng, &[1, h * 2], -1.0, 1.0),
    }
}

struct Run {
    pooled_h: Vec<f64>,
    pooled_o: Vec<f64>,
    phi_h: Vec<f64>,
    contact: Vec<f64>,
    psi_a: Vec<f64>,
    psi_h: Vec<f64>,
}

fn run(net: &CorrNet, store: &ParamStore<f64>, f: &FrameTensors<f64>) -> Run {
    let mut g = Graph::with_params(store);
    let o = g.constant(f.obj.clone());
    let h = g.constant(f.hand.clone());
    let a = g.constant(f.arm.clone());
    let s = g.constant(f.hand_state.clone());
    let fv = net.features(&mut g, o, h, a, s).unwrap();
    let c = net.predict_contact(&mut g, &fv).unwrap();
    Run {
        pooled_h: g.value(fv.pooled_h).to_f64_vec(),
        pooled_o: g.value(fv.pooled_o).to_f64_vec(),
        phi_h: g.value(fv.phi_h).to_f64_vec(),
        contact: g.value(c).to_f64_vec(),
        psi_a: g.value(fv.psi_a).to_f64_vec(),
        psi_h: g.value(fv.psi_h).to_f64_vec(),
    }
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let c = t.cols();
    let data = perm.iter().flat_map(|&i| t.data()[i * c..(i + 1) * c].to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn object_permutation_permutes_contact_and_keeps_pooled() {
    let (store, net) = build(small_config(32, 16), 1);
    let s = sample(32, 12, 2);
    let base = run(&net, &store, &s.frame);
    let mut perm: Vec<usize> = (0..32).collect();
    perm.reverse();
    perm.swap(3, 17);
    let mut f = s.frame.clone();
    f.obj = permute_rows(&s.frame.obj, &perm);
    let moved = run(&net, &store, &f);
    assert!(close(&moved.pooled_o, &base.pooled_o, 1e-9));
    assert!(close(&moved.pooled_h, &base.pooled_h, 1e-9));
    assert!(close(&moved.phi_h, &base.phi_h, 1e-9), "phi_H depends on object order");
    let expect: Vec<f64> = perm.iter().map(|&i| base.contact[i]).collect();
    assert!(close(&moved.contact, &expect, 1e-9));
    assert!(base.contact.iter().all(|&c| c > 0.0 && c < 1.0));
}

#[test]
fn point_encoder_shapes_duplicates_and_count_check() {
    let (store, net) = build(small_config(8, 128), 3);
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::new(vec![8, 3], [0.3, -0.2, 0.5].repeat(8)).unwrap());
    let t = net.encode_point_tokens(&mut g, x, false).unwrap();
    assert_eq!(g.value(t).shape(), &[8, 128]);
    let v = g.value(t).data().to_vec();
    assert!(v.chunks(128).all(|r| r == &v[..128]));
    let p = g.max_pool(t, Axis::Rows).unwrap();
    assert_eq!(g.value(p).data(), &v[..128]);
    let bad = g.constant(Tensor::zeros(&[7, 3]));
    assert!(matches!(net.encode_point_tokens(&mut g, bad, true), Err(Error::Shape { .. })));
}

#[test]
fn zero_output_projection_gives_residual_identity() {
    let (mut store, net) = build(small_config(16, 16), 4);
    for name in ["corr.enc.xattn_h.out.weight", "corr.enc.xattn_h.out.bias"] {
        let id = store.find(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let s = sample(16, 12, 5);
    let mut g = Graph::with_params(&store);
    let h = g.constant(s.frame.hand.clone());
    let o = g.constant(s.frame.obj.clone());
    let th = net.encode_point_tokens(&mut g, h, true).unwrap();
    let to = net.encode_point_tokens(&mut g, o, false).unwrap();
    let (phi_h, phi_o) = net.cross_fuse(&mut g, th, to).unwrap();
    assert_eq!(g.value(phi_h).data(), g.value(th).data());
    assert_eq!(g.value(phi_o).shape(), &[16, 16]);
    assert_ne!(g.value(phi_o).data(), g.value(to).data());
    let wrong = g.constant(Tensor::zeros(&[16, 8]));
    assert!(net.cross_fuse(&mut g, th, wrong).is_err());
}

#[test]
fn state_projection_zero_map_dims_and_purity() {
    let (mut store, net) = build(small_config(16, 16), 6);
    let s = sample(16, 12, 7);
    let a = run(&net, &store, &s.frame);
    let b = run(&net, &store, &s.frame);
    assert_eq!(a.psi_a, b.psi_a);
    assert_eq!(a.psi_h.len(), 16);
    assert_eq!(a.psi_a.len(), 16);
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("corr.enc.state.")).collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let z = run(&net, &store, &s.frame);
    assert!(z.psi_a.iter().chain(&z.psi_h).all(|&v| v == 0.0));
    let mut g = Graph::with_params(&store);
    let arm = g.constant(Tensor::zeros(&[1, 4]));
    let hand = g.constant(Tensor::zeros(&[1, 2]));
    assert!(net.project_states(&mut g, arm, hand).is_err());
}

fn losses(net: &CorrNet, store: &ParamStore<f64>, s: &PretrainSample<f64>) -> (f64, f64, f64) {
    let mut g = Graph::with_params(store);
    let l = net.pretrain_loss(&mut g, s).unwrap();
    let v = |x| g.value(x).data()[0];
    (v(l.total), v(l.contact), v(l.coordination))
}

#[test]
fn loss_weighting_and_perfect_heads() {
    let s = sample(16, 12, 8);
    let (store, net) = build(small_config(16, 16), 9);
    let (t1, c1, k1) = losses(&net, &store, &s);
    assert_eq!(t1, c1 + k1);
    let (store0, net0) = build(EncoderConfig { lambda: 0.0, ..small_config(16, 16) }, 9);
    let (t0, c0, k0) = losses(&net0, &store0, &s);
    assert_eq!(t0, c0);
    assert!(k0 > 0.0);

    // targets equal to the predictions
    let mut g = Graph::with_params(&store);
    let o = g.constant(s.frame.obj.clone());
    let h = g.constant(s.frame.hand.clone());
    let a = g.constant(s.frame.arm.clone());
    let hs = g.constant(s.frame.hand_state.clone());
    let fv = net.features(&mut g, o, h, a, hs).unwrap();
    let c = net.predict_contact(&mut g, &fv).unwrap();
    let ar = net.predict_arm_seq(&mut g, &fv).unwrap();
    let hr = net.predict_hand_seq(&mut g, &fv).unwrap();
    assert_eq!(g.value(ar).shape(), &[1, 36]);
    assert_eq!(g.value(hr).shape(), &[1, 24]);
    let perfect = PretrainSample {
        contact: g.value(c).clone(),
        arm_seq: g.value(ar).clone(),
        hand_seq: g.value(hr).clone(),
        ..s.clone()
    };
    assert_eq!(losses(&net, &store, &perfect), (0.0, 0.0, 0.0));

    let missing = PretrainSample {
        contact: Tensor::zeros(&[15, 1]),
        ..s
    };
    let mut g = Graph::with_params(&store);
    assert!(net.pretrain_loss(&mut g, &missing).is_err());
}

#[test]
fn full_network_gradient_check() {
    let cfg = EncoderConfig {
        heads: 4,
        state_dim: 8,
        horizon: 4,
        ..small_config(16, 8)
    };
    let (mut store, net) = build(cfg, 10);
    let s = sample(16, 4, 11);
    let rep = gradcheck(&mut store, &[], 1e-5, 40, |g, _| Ok(net.pretrain_loss(g, &s)?.total)).unwrap();
    assert!(rep.max_rel_error < 1e-3, "{:#?}", rep);
    assert_eq!(rep.tensors.len(), store.len());
}

#[test]
fn single_batch_overfit() {
    let (store, net) = build(small_config(32, 32), 12);
    let mut store: ParamStore<f32> = store.cast();
    let batch: Vec<PretrainSample<f32>> = (0..4).map(|i| sample(32, 12, 20 + i).cast()).collect();
    let mut opt = AdamW::new(AdamWConfig {
        lr: 1e-3,
        ..AdamWConfig::default()
    });
    let loss_of = |store: &ParamStore<f32>| -> f64 {
        batch
            .iter()
            .map(|s| {
                let mut g = Graph::with_params(store);
                let l = net.pretrain_loss(&mut g, s).unwrap();
                g.value(l.total).data()[0] as f64
            })
            .sum()
    };
    let first = loss_of(&store);
    for _ in 0..200 {
        let mut grads = crate::nncore::Gradients::new();
        for s in &batch {
            let mut g = Graph::with_params(&store);
            let l = net.pretrain_loss(&mut g, s).unwrap();
            g.backward(l.total).unwrap();
            grads.accumulate(g.param_grads());
        }
        opt.step(&mut store, &grads).unwrap();
    }
    let last = loss_of(&store);
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn config_validation() {
    assert!(EncoderConfig::default().validate().is_ok());
    assert_eq!(EncoderConfig::default().feature_dim(), 288);
    assert!(EncoderConfig { d: 130, ..Default::default() }.validate().is_err());
    assert!(EncoderConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
}
