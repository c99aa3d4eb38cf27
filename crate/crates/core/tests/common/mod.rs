#![allow(dead_code)]

use bisgan_core::graph::{Graph, NodeId};
use bisgan_core::params::{Bound, ParamStore};
use bisgan_core::{Real, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect()).unwrap()
}

/// Scalar L2 loss `mean((y + t)²)` against a fixed random offset `t`.
pub fn l2_against(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let t = random_tensor(g.value(y).shape(), seed);
    let t = g.input(t);
    let s = g.add(y, t)?;
    g.mean_sq_offset(s, 0.0)
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub nontrivial: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;

/// Compares analytic parameter gradients with central differences on
/// randomly drawn scalar parameters until `want` parameters with a
/// gradient above 1e-6 have been checked.
pub fn grad_check(
    store: &ParamStore<f64>,
    build: impl Fn(&mut Graph<f64>, &Bound) -> Result<NodeId>,
    want: usize,
    seed: u64,
) -> GradCheck {
    let mut g = Graph::new();
    let bound = store.bind(&mut g, true);
    let loss = build(&mut g, &bound).unwrap();
    let mut grads = g.backward(loss).unwrap();
    let analytic = store.collect_grads(&bound, &mut grads);

    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let l = build(&mut g, &b).unwrap();
        g.value(l).data()[0]
    };
    let sizes: Vec<usize> = store.tensors().iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        checked: 0,
        nontrivial: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    let mut probe = store.clone();
    let mut attempts = 0;
    while report.nontrivial < want && attempts < 40 * want {
        attempts += 1;
        let mut flat = rng.gen_range(0..total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let orig = store.tensors()[p].data()[flat];
        probe.tensors_mut()[p].data_mut()[flat] = orig + FD_STEP;
        let up = eval(&probe);
        probe.tensors_mut()[p].data_mut()[flat] = orig - FD_STEP;
        let down = eval(&probe);
        probe.tensors_mut()[p].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[p].data()[flat];
        let scale = a.abs().max(numeric.abs());
        let err = (a - numeric).abs();
        report.checked += 1;
        if scale > 1e-6 {
            report.nontrivial += 1;
            report.worst = report.worst.max(err / scale);
        }
        if err > REL_TOL * scale + 1e-8 {
            report.failures.push(format!(
                "{}[{flat}]: analytic {a:.6e} numeric {numeric:.6e}",
                store.iter().nth(p).unwrap().0
            ));
        }
    }
    report
}
