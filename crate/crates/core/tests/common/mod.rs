//! Helpers shared by the integration targets.

#![allow(dead_code)]

use gfpc::autodiff::{Graph, NodeId, ParamSet};
use gfpc::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale; a
/// central difference at `FD_STEP` carries roughly 1e-10 of rounding and
/// truncation error, which would dominate a purely relative measure.
pub const FD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Unit vector with normally distributed direction.
pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Contracts `out` with fixed random weights so every output element
/// influences the scalar being differentiated.
pub fn contract(g: &mut Graph<f64>, out: NodeId, weights: &[f64]) -> Result<NodeId> {
    let n = g.value(out).len();
    let flat = g.reshape(out, &[n])?;
    let w = g.constant(Tensor::new([n], weights[..n].to_vec())?);
    g.dot(flat, w)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
}

impl FdReport {
    pub fn merge(self, other: FdReport) -> FdReport {
        FdReport { max_rel: self.max_rel.max(other.max_rel), checked: self.checked + other.checked }
    }
}

/// Compares reverse-mode gradients of `build` against central differences
/// for every element of every tensor in `params`. `build` must register
/// each parameter with `Graph::param` under its map key and return a
/// scalar node.
pub fn fd_check<F>(params: &ParamSet<f64>, build: F) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId>,
{
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss)?;
    let mut report = FdReport::default();
    let mut probe = params.clone();
    for (name, value) in params {
        let analytic = grads.get(name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; value.len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let x = value.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = x + FD_STEP;
            let plus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x - FD_STEP;
            let minus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            report.max_rel = report.max_rel.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

pub mod gradcases {
    use super::*;
    use gfpc::contrast::{info_nce, KeyQueue};
    use gfpc::depth::{DecoderConfig, DepthNet};
    use gfpc::encoder::{build_encoder, encode_with, project_with, EncoderConfig};
    use std::collections::BTreeMap;

    fn set(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn p(g: &mut Graph<f64>, ps: &ParamSet<f64>, name: &str) -> NodeId {
        g.param(name, &ps[name])
    }

    /// Toy two-stage encoder with a stride-1 block in each stage.
    pub fn toy_encoder() -> EncoderConfig {
        EncoderConfig::new(vec![3, 4], 2, 5, 3).unwrap()
    }

    type Unary = fn(&mut Graph<f64>, NodeId) -> Result<NodeId>;
    type Binary = fn(&mut Graph<f64>, NodeId, NodeId) -> Result<NodeId>;
    type Case = (&'static str, ParamSet<f64>, Box<dyn Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId>>);

    fn primitive_cases(seed: u64) -> Vec<Case> {
        let mut r = rng(seed);
        let w: Vec<f64> = normal(&mut r, &[512]).into_data();
        let mut cases: Vec<Case> = Vec::new();

        for &(name, stride, pad) in &[("conv2d s1 p1", 1, 1), ("conv2d s2 p1", 2, 1), ("conv2d s1 p0", 1, 0)] {
            let ps = set(vec![
                ("x", normal(&mut r, &[2, 6, 6])),
                ("k", normal(&mut r, &[3, 2, 3, 3])),
                ("b", normal(&mut r, &[3])),
            ]);
            let wc = w.clone();
            cases.push((
                name,
                ps,
                Box::new(move |g, ps| {
                    let (x, k, b) = (p(g, ps, "x"), p(g, ps, "k"), p(g, ps, "b"));
                    let y = g.conv2d(x, k, Some(b), stride, pad)?;
                    contract(g, y, &wc)
                }),
            ));
        }
        let wc = w.clone();
        cases.push((
            "linear",
            set(vec![("w", normal(&mut r, &[4, 5])), ("x", normal(&mut r, &[5])), ("b", normal(&mut r, &[4]))]),
            Box::new(move |g, ps| {
                let (wt, x, b) = (p(g, ps, "w"), p(g, ps, "x"), p(g, ps, "b"));
                let y = g.linear(wt, x, Some(b))?;
                contract(g, y, &wc)
            }),
        ));
        let unary: [(&'static str, Unary); 7] = [
            ("relu", |g, x| Ok(g.relu(x))),
            ("softplus", |g, x| Ok(g.softplus(x))),
            ("scale", |g, x| Ok(g.scale(x, -1.7))),
            ("max_pool", |g, x| g.max_pool(x, 2, 2)),
            ("global_avg_pool", |g, x| g.global_avg_pool(x)),
            ("upsample2x", |g, x| g.upsample2x(x)),
            ("reshape", |g, x| g.reshape(x, &[4, 18])),
        ];
        for (name, f) in unary {
            let wc = w.clone();
            cases.push((
                name,
                set(vec![("x", normal(&mut r, &[2, 6, 6]))]),
                Box::new(move |g, ps| {
                    let x = p(g, ps, "x");
                    let y = f(g, x)?;
                    contract(g, y, &wc)
                }),
            ));
        }
        let binary: [(&'static str, Binary); 3] =
            [("add", |g, a, b| g.add(a, b)), ("mul", |g, a, b| g.mul(a, b)), ("dot", |g, a, b| g.dot(a, b))];
        for (name, f) in binary {
            let wc = w.clone();
            cases.push((
                name,
                set(vec![("a", normal(&mut r, &[7])), ("b", normal(&mut r, &[7]))]),
                Box::new(move |g, ps| {
                    let (a, b) = (p(g, ps, "a"), p(g, ps, "b"));
                    let y = f(g, a, b)?;
                    contract(g, y, &wc)
                }),
            ));
        }
        cases.push((
            "sum",
            set(vec![("x", normal(&mut r, &[3, 4]))]),
            Box::new(|g, ps| {
                let x = p(g, ps, "x");
                let s = g.sum(x);
                g.mul(s, s)
            }),
        ));
        let wc = w.clone();
        cases.push((
            "l2_normalize",
            set(vec![("x", normal(&mut r, &[6]))]),
            Box::new(move |g, ps| {
                let x = p(g, ps, "x");
                let y = g.l2_normalize(x)?;
                contract(g, y, &wc)
            }),
        ));
        let target = r.random_range(0..9);
        cases.push((
            "softmax_cross_entropy",
            set(vec![("x", normal(&mut r, &[9]))]),
            Box::new(move |g, ps| {
                let x = p(g, ps, "x");
                g.softmax_cross_entropy(x, target)
            }),
        ));
        let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1 || r.random_bool(0.5)).collect();
        cases.push((
            "masked_l1",
            set(vec![("y", normal(&mut r, &[3, 4])), ("t", normal(&mut r, &[3, 4]))]),
            Box::new(move |g, ps| {
                let (y, t) = (p(g, ps, "y"), p(g, ps, "t"));
                g.masked_l1(y, t, &mask)
            }),
        ));
        cases
    }

    fn composition_cases(seed: u64) -> Vec<Case> {
        let mut r = rng(seed ^ 0xc0ffee);
        let cfg = toy_encoder();
        let image = uniform(&mut r, &[3, 8, 8], 0.0, 1.0);
        let k_pos = unit(&mut r, cfg.head_dim);
        let queue: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut r, cfg.head_dim)).collect();
        let enc = build_encoder::<f64>(&cfg, seed).unwrap();
        // random biases so no unit sits exactly at a ReLU kink
        let perturb = |ps: &ParamSet<f64>, r: &mut ChaCha8Rng| -> ParamSet<f64> {
            ps.iter()
                .map(|(k, v)| {
                    let noise = normal(r, v.shape());
                    let data = v.data().iter().zip(noise.data()).map(|(a, n)| a + 0.1 * n).collect();
                    (k.clone(), Tensor::new(v.shape().to_vec(), data).unwrap())
                })
                .collect()
        };
        let enc_params = perturb(enc.params(), &mut r);
        let mut cases: Vec<Case> = Vec::new();
        {
            let (cfg, image, k_pos, queue) = (cfg.clone(), image.clone(), k_pos.clone(), queue.clone());
            cases.push((
                "encoder+head+infonce",
                enc_params,
                Box::new(move |g, ps| {
                    let x = g.constant(image.clone());
                    let z = encode_with(ps, &cfg, g, x, true)?;
                    let h = project_with(ps, g, z, true)?;
                    let mut q = KeyQueue::new(queue.len(), k_pos.len())?;
                    for k in &queue {
                        q.push(k)?;
                    }
                    info_nce(g, h, &k_pos, &q, 0.2)
                }),
            ));
        }
        let dec = DecoderConfig::mirror(&cfg);
        let net = DepthNet::<f64>::random(&cfg, &dec, seed).unwrap();
        let net_params = perturb(net.params(), &mut r);
        let target = uniform(&mut r, &[1, 4, 4], 1.0, 5.0);
        let mask: Vec<bool> = (0..16).map(|i| i == 0 || r.random_bool(0.8)).collect();
        cases.push((
            "depthnet+masked_l1",
            net_params,
            Box::new(move |g, ps| {
                let net = DepthNet::from_params(ps.clone())?;
                let x = g.constant(image.clone());
                let y = net.forward(g, x, true)?;
                let t = g.constant(target.clone());
                g.masked_l1(y, t, &mask)
            }),
        ));
        cases
    }

    /// Max relative error per case for one seed.
    pub fn run(seed: u64) -> Result<BTreeMap<&'static str, FdReport>> {
        let mut out = BTreeMap::new();
        for (name, params, build) in primitive_cases(seed).into_iter().chain(composition_cases(seed)) {
            out.insert(name, fd_check(&params, |g, ps| build(g, ps))?);
        }
        Ok(out)
    }
}
