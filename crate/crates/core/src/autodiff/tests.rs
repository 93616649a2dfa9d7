use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check;
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts an arbitrary-shape output with fixed random weights so every
/// output entry contributes to the checked scalar.
fn contract(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(out));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new(vec![2, 3], vec![1., -2., 3., 0., 5., 6.]).unwrap());
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn square_sum_gradient() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn double_backward_is_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_vec(vec![1.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::TapeConsumed)));
    g.reset();
    let x = g.param(Tensor::from_vec(vec![1.0]));
    let s = g.sum(x).unwrap();
    assert!(g.backward(s).is_ok());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn relu_definition() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn uniform_cross_entropy_is_ln_c() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[3, 10]));
    let l = g.cross_entropy(x, &[0, 4, 9]).unwrap();
    assert!((g.value(l).item().unwrap() - 10f32.ln()).abs() < 1e-6);
}

#[test]
fn cross_entropy_matches_scalar_softmax() {
    // one-hot-scaled logits with a margin, against a scalar 64-bit evaluation
    let margin = 3.0f64;
    let c = 5;
    let labels = [2usize, 0];
    let mut logits = vec![0.0f64; 2 * c];
    for (r, &l) in labels.iter().enumerate() {
        logits[r * c + l] = margin;
        logits[r * c + (l + 1) % c] = -0.5;
    }
    let mut expected = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = &logits[r * c..(r + 1) * c];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expected += -(row[l].exp() / z).ln();
    }
    expected /= 2.0;
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2, c], logits).unwrap());
    let l = g.cross_entropy(x, &labels).unwrap();
    assert!((g.value(l).item().unwrap() - expected).abs() < 1e-12);
}

#[test]
fn cross_entropy_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        g.cross_entropy(x, &[0, 3]),
        Err(Error::LabelOutOfRange { .. })
    ));
    let e = g.constant(Tensor::zeros(&[0, 3]));
    assert!(matches!(g.cross_entropy(e, &[]), Err(Error::Empty(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_vec(vec![f32::MAX, f32::MAX]));
    assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn batchnorm_at_running_mean_outputs_beta() {
    let mut g = Graph::<f32>::new();
    let mut data = Vec::new();
    for _ in 0..2 {
        data.extend([0.5f32; 4]);
        data.extend([-1.0f32; 4]);
    }
    let x = g.constant(Tensor::new(vec![2, 2, 2, 2], data).unwrap());
    let mean = g.constant(Tensor::from_vec(vec![0.5, -1.0]));
    let var = g.constant(Tensor::from_vec(vec![2.0, 0.3]));
    let gamma = g.constant(Tensor::from_vec(vec![1.0, 1.0]));
    let beta = g.constant(Tensor::from_vec(vec![0.25, -0.75]));
    let y = g.batch_norm(x, mean, var, gamma, beta, 1e-5).unwrap();
    for n in 0..2 {
        assert!(g.value(y).data()[n * 8..n * 8 + 4].iter().all(|&v| v == 0.25));
        assert!(g.value(y).data()[n * 8 + 4..n * 8 + 8].iter().all(|&v| v == -0.75));
    }
}

#[test]
fn identity_pointwise_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    let mut w = vec![0.0; 9];
    for c in 0..3 {
        w[c * 3 + c] = 1.0;
    }
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(Tensor::new(vec![3, 3, 1, 1], w).unwrap());
    let y = g.conv2d(xv, wv, None, ConvGeom::default()).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_shape_mismatch_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
    assert!(matches!(
        g.conv2d(x, w, None, ConvGeom::default()),
        Err(Error::Shape { .. })
    ));
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn assert_grad<F>(inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = check(inputs, H, f).unwrap();
    assert!(r.max_rel_err < TOL, "max rel err {}", r.max_rel_err);
}

#[test]
fn gradcheck_every_op_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut trials = 0;
    for trial in 0..12u64 {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..4) * 2;
        let h = rng.random_range(3..6);
        let w = rng.random_range(3..6);
        let x = rand_tensor(&mut rng, &[n, c, h, w]);

        // conv2d with stride/padding/groups
        let groups = if trial % 2 == 0 { 1 } else { 2 };
        let cout = 2 * rng.random_range(1..3);
        let k = if trial % 3 == 0 { 1 } else { 3 };
        let geom = ConvGeom {
            stride: 1 + (trial as usize % 2),
            padding: k / 2,
            groups,
        };
        let wt = rand_tensor(&mut rng, &[cout, c / groups, k, k]);
        let b = rand_tensor(&mut rng, &[cout]);
        assert_grad(&[x.clone(), wt, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), geom)?;
            contract(g, y, trial)
        });

        // batch norm with batch statistics (train mode composite)
        let gamma = rand_tensor(&mut rng, &[c]);
        let beta = rand_tensor(&mut rng, &[c]);
        assert_grad(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            let m = g.channel_mean(v[0])?;
            let s = g.channel_var(v[0])?;
            let y = g.batch_norm(v[0], m, s, v[1], v[2], 1e-5)?;
            contract(g, y, trial)
        });

        // batch norm with stored statistics
        let rm = rand_tensor(&mut rng, &[c]);
        let rv = Tensor::new(
            vec![c],
            (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
        )
        .unwrap();
        assert_grad(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            let m = g.constant(rm.clone());
            let s = g.constant(rv.clone());
            let y = g.batch_norm(v[0], m, s, v[1], v[2], 1e-5)?;
            contract(g, y, trial)
        });

        // relu, avgpool, maxpool, global pool, shuffle
        assert_grad(&[x.clone()], |g, v| {
            let y = g.relu(v[0])?;
            contract(g, y, trial)
        });
        assert_grad(&[x.clone()], |g, v| {
            let y = g.avgpool(v[0], 2)?;
            contract(g, y, trial)
        });
        assert_grad(&[x.clone()], |g, v| {
            let y = g.maxpool(v[0], 2)?;
            contract(g, y, trial)
        });
        assert_grad(&[x.clone()], |g, v| {
            let y = g.global_avgpool(v[0])?;
            contract(g, y, trial)
        });
        assert_grad(&[x.clone()], |g, v| {
            let y = g.channel_shuffle(v[0], 2)?;
            contract(g, y, trial)
        });

        // flatten + linear + softmax + cross entropy
        let feat = c * h * w;
        let classes = rng.random_range(2..5);
        let lw = rand_tensor(&mut rng, &[classes, feat]);
        let lb = rand_tensor(&mut rng, &[classes]);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        assert_grad(&[x.clone(), lw.clone(), lb.clone()], |g, v| {
            let f = g.flatten(v[0])?;
            let y = g.linear(f, v[1], Some(v[2]))?;
            g.cross_entropy(y, &labels)
        });
        assert_grad(&[x.clone(), lw.clone(), lb.clone()], |g, v| {
            let f = g.flatten(v[0])?;
            let y = g.linear(f, v[1], Some(v[2]))?;
            let s = g.softmax(y)?;
            contract(g, s, trial)
        });

        // soft-target losses
        let mut targets = rand_tensor(&mut rng, &[n, classes]);
        for row in targets.data_mut().chunks_mut(classes) {
            row.iter_mut().for_each(|v| *v = v.abs() + 0.1);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        for kind in [SoftLoss::Mse, SoftLoss::Kl, SoftLoss::Mae] {
            assert_grad(&[x.clone(), lw.clone()], |g, v| {
                let f = g.flatten(v[0])?;
                let y = g.linear(f, v[1], None)?;
                g.soft_target_loss(y, &targets, kind)
            });
        }

        // L2 distance of channel statistics
        let tgt: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        assert_grad(&[x.clone()], |g, v| {
            let m = g.channel_var(v[0])?;
            g.l2_distance(m, &tgt)
        });

        // differentiable crop + resize
        let crops: Vec<_> = (0..n)
            .map(|_| crate::augment::sample_crop(&mut rng, h, w, (0.3, 1.0), 0.5))
            .collect();
        assert_grad(&[x.clone()], |g, v| {
            let y = g.crop_resize(v[0], &crops, 4, 5)?;
            contract(g, y, trial)
        });

        // add / sub / scale / mean / reshape
        let y2 = rand_tensor(&mut rng, &[n, c, h, w]);
        assert_grad(&[x.clone(), y2], |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            let k = g.scale(m, 0.7)?;
            let r = g.reshape(k, &[n * c, h * w])?;
            g.mean(r)
        });
        trials += 18;
    }
    assert!(trials >= 100);
}
