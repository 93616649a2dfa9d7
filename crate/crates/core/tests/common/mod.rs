//! Shared fixtures and a naive 64-bit reference forward pass.
#![allow(dead_code)]

use prism_core::layers::{LayerSpec, BN_EPS};
use prism_core::zoo::{ArchSpec, TeacherModel, TeacherPool};
use prism_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Two convolutions with BN, a residual block, a channel shuffle and the
/// usual pooled linear head.
pub fn tiny_arch(name: &str, classes: usize, size: usize) -> ArchSpec {
    use LayerSpec as L;
    ArchSpec {
        name: name.into(),
        layers: vec![
            L::conv(3, 4, 3, 1),
            L::bn(4),
            L::Relu,
            L::Conv2d {
                cin: 4,
                cout: 6,
                kernel: 3,
                stride: 2,
                padding: 1,
                groups: 2,
            },
            L::bn(6),
            L::Relu,
            L::Residual {
                body: vec![L::conv(6, 6, 1, 1), L::bn(6)],
            },
            L::ChannelShuffle { groups: 2 },
            L::GlobalAvgPool,
            L::Linear { inp: 6, out: classes },
        ],
        feature_dim: 6,
        num_classes: classes,
        input: [3, size, size],
    }
}

/// Randomizes BN affine parameters and running statistics so that no term
/// is trivially zero.
pub fn perturb(mut m: TeacherModel, seed: u64) -> TeacherModel {
    let mut r = rng(seed ^ 0xabcd);
    for (name, t) in m.params.iter_mut() {
        if t.ndim() == 1 {
            let scale = name.contains("bias");
            for v in t.data_mut() {
                *v = if scale { r.random_range(-0.5..0.5) } else { r.random_range(0.5..1.5) };
            }
        }
    }
    for s in &mut m.bn_stats {
        s.mean.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        s.var.iter_mut().for_each(|v| *v = r.random_range(0.3..2.0));
    }
    m
}

pub fn tiny_teacher(name: &str, classes: usize, size: usize, seed: u64) -> TeacherModel {
    perturb(TeacherModel::init(tiny_arch(name, classes, size), seed).unwrap(), seed)
}

pub fn tiny_pool(k_total: usize, k_max: usize, classes: usize, size: usize) -> TeacherPool {
    let teachers = (0..k_total)
        .map(|i| tiny_teacher(&format!("tiny-{i}"), classes, size, 100 + i as u64))
        .collect();
    TeacherPool::new(teachers, k_max, true).unwrap()
}

/// Activation in NCHW; after pooling `h = w = 1`.
#[derive(Clone)]
struct Act {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    d: Vec<f64>,
}

impl Act {
    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[((n * self.c + c) * self.h + y) * self.w + x]
    }
}

pub struct OracleOut {
    /// `[N][classes]`.
    pub logits: Vec<Vec<f64>>,
    /// Per BN layer: two-pass batch mean and biased variance of its input.
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

fn param(m: &TeacherModel, name: &str) -> Vec<f64> {
    m.params[name].data().iter().map(|&v| v as f64).collect()
}

fn run(m: &TeacherModel, layers: &[LayerSpec], prefix: &str, mut x: Act, bn: &mut Vec<(Vec<f64>, Vec<f64>)>) -> Act {
    for (i, layer) in layers.iter().enumerate() {
        let path = if prefix.is_empty() { i.to_string() } else { format!("{prefix}.{i}") };
        x = match layer {
            LayerSpec::Conv2d {
                cin,
                cout,
                kernel: k,
                stride: s,
                padding: p,
                groups,
            } => {
                let w = param(m, &format!("{path}.weight"));
                let b = param(m, &format!("{path}.bias"));
                let (cin_g, cout_g) = (cin / groups, cout / groups);
                let oh = (x.h + 2 * p - k) / s + 1;
                let ow = (x.w + 2 * p - k) / s + 1;
                let mut d = Vec::with_capacity(x.n * cout * oh * ow);
                for n in 0..x.n {
                    for o in 0..*cout {
                        let g = o / cout_g;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = b[o];
                                for ci in 0..cin_g {
                                    for ky in 0..*k {
                                        for kx in 0..*k {
                                            let iy = (oy * s + ky) as isize - *p as isize;
                                            let ix = (ox * s + kx) as isize - *p as isize;
                                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                                continue;
                                            }
                                            let wv = w[((o * cin_g + ci) * k + ky) * k + kx];
                                            acc += wv * x.at(n, g * cin_g + ci, iy as usize, ix as usize);
                                        }
                                    }
                                }
                                d.push(acc);
                            }
                        }
                    }
                }
                Act { n: x.n, c: *cout, h: oh, w: ow, d }
            }
            LayerSpec::BatchNorm2d { channels } => {
                let stat = &m.bn_stats[bn.len()];
                let gamma = param(m, &format!("{path}.weight"));
                let beta = param(m, &format!("{path}.bias"));
                let count = (x.n * x.h * x.w) as f64;
                let mut mean = vec![0.0; *channels];
                let mut var = vec![0.0; *channels];
                for c in 0..*channels {
                    let vals = (0..x.n).flat_map(|n| (0..x.h * x.w).map(move |j| (n, j)));
                    let plane = x.h * x.w;
                    let get = |n: usize, j: usize| x.d[(n * x.c + c) * plane + j];
                    mean[c] = vals.clone().map(|(n, j)| get(n, j)).sum::<f64>() / count;
                    var[c] = vals.map(|(n, j)| (get(n, j) - mean[c]).powi(2)).sum::<f64>() / count;
                }
                let mut out = x.clone();
                let plane = x.h * x.w;
                for (idx, v) in out.d.iter_mut().enumerate() {
                    let c = (idx / plane) % x.c;
                    let (mu, s2) = (stat.mean[c] as f64, stat.var[c] as f64);
                    *v = gamma[c] * (*v - mu) / (s2 + BN_EPS).sqrt() + beta[c];
                }
                bn.push((mean, var));
                out
            }
            LayerSpec::Relu => Act {
                d: x.d.iter().map(|v| v.max(0.0)).collect(),
                ..x
            },
            LayerSpec::GlobalAvgPool => {
                let plane = x.h * x.w;
                let d = x.d.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
                Act { n: x.n, c: x.c, h: 1, w: 1, d }
            }
            LayerSpec::MaxPool { kernel: k } => {
                let (oh, ow) = (x.h / k, x.w / k);
                let mut d = Vec::with_capacity(x.n * x.c * oh * ow);
                for n in 0..x.n {
                    for c in 0..x.c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let cells = (0..k * k).map(|j| x.at(n, c, oy * k + j / k, ox * k + j % k));
                                d.push(cells.fold(f64::MIN, f64::max));
                            }
                        }
                    }
                }
                Act { n: x.n, c: x.c, h: oh, w: ow, d }
            }
            LayerSpec::Flatten => Act {
                c: x.c * x.h * x.w,
                h: 1,
                w: 1,
                ..x
            },
            LayerSpec::Linear { inp, out } => {
                let w = param(m, &format!("{path}.weight"));
                let b = param(m, &format!("{path}.bias"));
                let mut d = Vec::with_capacity(x.n * out);
                for n in 0..x.n {
                    for o in 0..*out {
                        d.push(b[o] + (0..*inp).map(|j| w[o * inp + j] * x.d[n * inp + j]).sum::<f64>());
                    }
                }
                Act { n: x.n, c: *out, h: 1, w: 1, d }
            }
            LayerSpec::ChannelShuffle { groups } => {
                let per = x.c / groups;
                let plane = x.h * x.w;
                let mut d = vec![0.0; x.d.len()];
                for n in 0..x.n {
                    for c in 0..x.c {
                        // output channel c reads input channel (c % groups) * per + c / groups
                        let src = (c % groups) * per + c / groups;
                        let (so, dst) = ((n * x.c + src) * plane, (n * x.c + c) * plane);
                        d[dst..dst + plane].copy_from_slice(&x.d[so..so + plane]);
                    }
                }
                Act { d, ..x }
            }
            LayerSpec::Residual { body } => {
                let y = run(m, body, &path, x.clone(), bn);
                Act {
                    d: x.d.iter().zip(&y.d).map(|(a, b)| a + b).collect(),
                    ..x
                }
            }
            other => panic!("oracle does not model {other:?}"),
        };
    }
    x
}

/// Eval-mode forward that also records BN input statistics.
pub fn oracle_forward(m: &TeacherModel, images: &Tensor<f32>) -> OracleOut {
    let s = images.shape();
    let x = Act {
        n: s[0],
        c: s[1],
        h: s[2],
        w: s[3],
        d: images.data().iter().map(|&v| v as f64).collect(),
    };
    let mut bn = Vec::new();
    let out = run(m, &m.arch.layers, "", x, &mut bn);
    OracleOut {
        logits: out.d.chunks(out.c).map(|r| r.to_vec()).collect(),
        bn_stats: bn,
    }
}

pub fn oracle_ce(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}

fn l2(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - *y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Sum over BN layers of the mean and variance gaps to the stored statistics.
pub fn oracle_bn_alignment(m: &TeacherModel, out: &OracleOut) -> f64 {
    out.bn_stats
        .iter()
        .zip(&m.bn_stats)
        .map(|((mean, var), st)| l2(mean, &st.mean) + l2(var, &st.var))
        .sum()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
