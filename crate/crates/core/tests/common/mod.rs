#![allow(dead_code)]

use facenet::graph::NodeId;
use facenet::nn::{ParamStore, Session};
use facenet::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest relative error between backprop and central differences.
///
/// `f` receives the inputs as graph leaves and must return any node; it is
/// reduced to a scalar with fixed random weights. Every input element and
/// every parameter the function touches is perturbed.
pub fn grad_check(
    store: &ParamStore,
    inputs: &[Tensor],
    skip_params: &[&str],
    f: impl Fn(&mut Session, &[NodeId]) -> Result<NodeId>,
) -> f64 {
    let h = 1e-6;
    let mut s = Session::training(store);
    let ids: Vec<NodeId> = inputs.iter().map(|t| s.graph.param(t.clone())).collect();
    let out = f(&mut s, &ids).unwrap();
    let weights = Tensor::randn(s.graph.shape(out).to_vec(), 1.0, &mut rng(99));
    let root = s.graph.weighted_sum(out, weights.clone()).unwrap();
    let grads = s.graph.backward(root);
    let param_grads = s.param_grads(&grads);

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut s = Session::inference(store);
        let ids: Vec<NodeId> = inputs.iter().map(|t| s.input(t.clone())).collect();
        let out = f(&mut s, &ids).unwrap();
        s.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let g = grads.get(ids[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let num = (eval(store, &plus) - eval(store, &minus)) / (2.0 * h);
            worst = worst.max(rel(g.data()[j], num));
        }
    }
    for (name, g) in &param_grads {
        if skip_params.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        for j in 0..g.len() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= h;
            let num = (eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * h);
            worst = worst.max(rel(g.data()[j], num));
        }
    }
    worst
}

/// Worst relative gradient error of each differentiable component on
/// B=2, C=4, H=W=3 inputs.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    use facenet::data::Spectrum;
    use facenet::fce::enhance_node;
    use facenet::losses::{loss_ic, loss_identity, loss_triplet, IcReduction};
    use facenet::mfmp::{loss_flare, MaskLayout, Mfmp, MfmpConfig, THRESHOLD_PARAM};
    use facenet::pseudo_label::FlarePseudoLabel;

    let shape = vec![2, 4, 3, 3];
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let mfmp = Mfmp::new(
        &mut store,
        MfmpConfig {
            channels: 4,
            layout: MaskLayout::Channelwise,
        },
        &mut r,
    );
    // move biases off zero so no activation sits exactly on a ReLU kink
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        let noise = Tensor::randn(t.shape().to_vec(), 0.1, &mut r);
        for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += e;
        }
    }
    let feat = |r: &mut ChaCha8Rng| Tensor::randn(shape.clone(), 1.0, r);
    let (f_r, f_n, f_t) = (feat(&mut r), feat(&mut r), feat(&mut r));
    let mut out = Vec::new();

    out.push((
        "fmi_common",
        grad_check(&store, &[f_r.clone(), f_n.clone()], &[], |s, x| mfmp.fmi.common(s, x[0], x[1])),
    ));
    out.push((
        "fmi_mask (soft)",
        grad_check(&store, &[f_r.clone(), f_n.clone()], &[THRESHOLD_PARAM], |s, x| {
            Ok(mfmp.rgb.forward(s, x[0], x[1])?.soft)
        }),
    ));
    let _ = Spectrum::Rgb;
    let mask = Tensor::uniform(shape.clone(), 0.05, 0.95, &mut r);
    out.push((
        "enhance",
        grad_check(&store, &[f_r.clone(), f_t.clone(), mask], &[], |s, x| {
            enhance_node(&mut s.graph, x[0], x[1], x[2], &[true, false])
        }),
    ));
    let soft = Tensor::uniform(shape.clone(), 0.0, 1.0, &mut r);
    out.push((
        "smp_classify",
        grad_check(&store, &[soft.clone()], &[], |s, x| mfmp.smp_rgb.classify(s, x[0])),
    ));
    let labels = [FlarePseudoLabel::new(0.3, 0.1), FlarePseudoLabel::new(0.0, 0.1)];
    out.push((
        "loss_flare",
        grad_check(&store, &[Tensor::randn(vec![2, 2], 1.0, &mut r)], &[], |s, x| loss_flare(s, x[0], &labels)),
    ));
    let scores: Vec<Tensor> = (0..3).map(|_| Tensor::randn(vec![4, 5], 1.0, &mut r)).collect();
    out.push((
        "loss_identity",
        grad_check(&store, &scores, &[], |s, x| loss_identity(&mut s.graph, x, &[0, 1, 4, 1])),
    ));
    let emb: Vec<Tensor> = (0..3).map(|_| Tensor::randn(vec![4, 6], 1.0, &mut r)).collect();
    out.push((
        "loss_triplet",
        grad_check(&store, &emb, &[], |s, x| loss_triplet(&mut s.graph, x, &[0, 0, 1, 1], 5.0)),
    ));
    for (name, red) in [("loss_ic (per sample)", IcReduction::PerSample), ("loss_ic (per batch)", IcReduction::PerBatch)] {
        out.push((
            name,
            grad_check(&store, &scores[..2], &[], |s, x| loss_ic(&mut s.graph, x[0], x[1], red)),
        ));
    }
    out
}
