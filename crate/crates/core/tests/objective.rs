mod common;

use common::*;
use prism_core::augment::CropParams;
use prism_core::autodiff::{gradcheck, Graph, Var};
use prism_core::layers::{LayerSpec, Mode};
use prism_core::optim::{adam_step, AdamHyper, AdamState};
use prism_core::recovery::{
    bn_alignment_loss, prism_objective, prism_step, sample_assignment, Coupling, PixelBatch, SamplingRule,
    SelectionPolicy, TeacherAssignment,
};
use prism_core::zoo::{ArchSpec, BnStat, TeacherModel};
use prism_core::Tensor;

fn bn_only_model() -> TeacherModel {
    let arch = ArchSpec {
        name: "bn-only".into(),
        layers: vec![LayerSpec::bn(1), LayerSpec::GlobalAvgPool, LayerSpec::Linear { inp: 1, out: 2 }],
        feature_dim: 1,
        num_classes: 2,
        input: [1, 1, 1],
    };
    TeacherModel::init(arch, 0).unwrap()
}

#[test]
fn bn_alignment_scalar_hand_case() {
    // batch {0, 2}: mean 1, biased variance 1, running stats (0, 1)
    let m = bn_only_model();
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap());
    let loss = bn_alignment_loss(&mut g, &m, x).unwrap();
    assert!((g.value(loss).item().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn bn_alignment_needs_two_images() {
    let m = bn_only_model();
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap());
    assert!(bn_alignment_loss(&mut g, &m, x).is_err());
}

/// Sets each layer's running statistics to the batch statistics it sees,
/// front to back, since later inputs depend on earlier running statistics.
fn matched_to_batch(mut m: TeacherModel, images: &Tensor<f32>) -> TeacherModel {
    for l in 0..m.bn_stats.len() {
        let mut g = Graph::<f32>::new();
        let bound = m.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = m.forward(&mut g, &bound, x, Mode::StatCapture).unwrap();
        let cap = out.bn[l];
        m.bn_stats[l] = BnStat {
            layer: m.bn_stats[l].layer,
            mean: g.value(cap.mean).data().to_vec(),
            var: g.value(cap.var).data().to_vec(),
        };
    }
    m
}

#[test]
fn bn_alignment_vanishes_at_matching_statistics() {
    for (i, fam) in ["convnet-deep", "shuffle", "inverted-residual", "depthwise-sep"].iter().enumerate() {
        let images = rand_tensor(&[6, 3, 16, 16], 10 + i as u64);
        let m = perturb(TeacherModel::init(ArchSpec::family(fam, 10, 16).unwrap(), i as u64).unwrap(), 3);
        let m = matched_to_batch(m, &images);
        let mut g = Graph::<f32>::new();
        let x = g.constant(images);
        let loss = bn_alignment_loss(&mut g, &m, x).unwrap();
        let v = g.value(loss).item().unwrap();
        assert!(v.abs() < 1e-6, "{fam}: {v}");
    }
}

#[test]
fn bn_alignment_matches_two_pass_oracle() {
    let fams = ["convnet-deep", "convnet-wide", "shuffle", "inverted-residual", "depthwise-sep"];
    for seed in 0..10u64 {
        let m = if seed < 5 {
            let arch = ArchSpec::family(fams[seed as usize], 10, 16).unwrap();
            perturb(TeacherModel::init(arch, seed).unwrap(), seed)
        } else {
            tiny_teacher("tiny", 5, 9, seed)
        };
        let size = m.arch.input[1];
        let images = rand_tensor(&[4, 3, size, size], 50 + seed);
        let expected = oracle_bn_alignment(&m, &oracle_forward(&m, &images));
        for dtype64 in [true, false] {
            let got = if dtype64 {
                let mut g = Graph::<f64>::new();
                let x = g.constant(images.cast());
                let l = bn_alignment_loss(&mut g, &m, x).unwrap();
                g.value(l).item().unwrap()
            } else {
                let mut g = Graph::<f32>::new();
                let x = g.constant(images.clone());
                let l = bn_alignment_loss(&mut g, &m, x).unwrap();
                g.value(l).item().unwrap() as f64
            };
            let tol = if dtype64 { 1e-5 } else { 1e-3 };
            assert!(rel(got, expected) < tol, "seed {seed} f64={dtype64}: {got} vs {expected}");
        }
    }
}

#[test]
fn logits_match_oracle() {
    let m = tiny_teacher("tiny", 4, 8, 7);
    let images = rand_tensor(&[3, 3, 8, 8], 8);
    let mut g = Graph::<f64>::new();
    let bound = m.bind(&mut g, false);
    let x = g.constant(images.cast());
    let out = m.forward(&mut g, &bound, x, Mode::Eval).unwrap();
    let oracle = oracle_forward(&m, &images);
    for (a, b) in g.value(out.logits).data().iter().zip(oracle.logits.iter().flatten()) {
        assert!((a - b).abs() < 1e-10);
    }
}

fn pixel_grad(images: &Tensor<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let x = g.param(images.clone());
    let loss = build(&mut g, x);
    g.backward(loss).unwrap().get(x).unwrap().data().to_vec()
}

#[test]
fn total_gradient_decomposes_into_terms() {
    let lambda = 0.37;
    let labels = vec![0, 1, 2, 3, 4];
    let images: Tensor<f64> = rand_tensor(&[5, 3, 8, 8], 1).cast();
    for k_max in 1..=4 {
        let pool = tiny_pool(4, k_max, 5, 8);
        for policy in [SelectionPolicy::Pre, SelectionPolicy::Intra] {
            let rule = SamplingRule {
                policy,
                coupling: Coupling::Decoupled,
                align_first: false,
            };
            let mut r = rng(k_max as u64);
            for _ in 0..3 {
                let a = sample_assignment(&pool, &rule, &mut r).unwrap();
                let total = pixel_grad(&images, |g, x| {
                    prism_objective(g, x, &labels, &a, &pool, lambda).unwrap().total
                });
                let logit = pixel_grad(&images, |g, x| {
                    let t = pool.get(a.logit_teacher).unwrap();
                    let b = t.bind(g, false);
                    let out = t.forward(g, &b, x, Mode::Eval).unwrap();
                    g.cross_entropy(out.logits, &labels).unwrap()
                });
                let bn: Vec<Vec<f64>> = a
                    .bn_subset
                    .iter()
                    .map(|&id| pixel_grad(&images, |g, x| bn_alignment_loss(g, pool.get(id).unwrap(), x).unwrap()))
                    .collect();
                let scale = total.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for j in 0..total.len() {
                    let sum = logit[j] + lambda * bn.iter().map(|b| b[j]).sum::<f64>();
                    assert!((total[j] - sum).abs() / scale <= 1e-6, "k_max {k_max} {policy:?} entry {j}");
                }
            }
        }
    }
}

#[test]
fn full_objective_gradcheck() {
    let pool = tiny_pool(4, 3, 5, 6);
    let labels = vec![4, 0, 2];
    let a = TeacherAssignment {
        logit_teacher: 1,
        bn_subset: vec![0, 1, 3],
        policy: SelectionPolicy::Pre,
        align_first: false,
    };
    let images: Tensor<f64> = rand_tensor(&[3, 3, 6, 6], 2).cast();
    let r = gradcheck::check(&[images], 1e-5, |g, v| Ok(prism_objective(g, v[0], &labels, &a, &pool, 0.5)?.total)).unwrap();
    assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
}

#[test]
fn sre2l_rule_steps_match_independent_reference() {
    let pool = tiny_pool(4, 1, 5, 8);
    let rule = SamplingRule {
        policy: SelectionPolicy::Pre,
        coupling: Coupling::Coupled,
        align_first: true,
    };
    let a = sample_assignment(&pool, &rule, &mut rng(0)).unwrap();
    assert_eq!((a.logit_teacher, a.bn_subset.clone()), (0, vec![0]));
    let (lambda, lr, betas) = (0.05, 0.05, (0.5, 0.9));
    let labels = vec![0, 1, 2, 3, 4, 0];
    let images = rand_tensor(&[6, 3, 8, 8], 4);
    let bounds = vec![(-1.5f32, 1.5f32); 3];
    let mut batch = PixelBatch::new(images.clone(), labels.clone(), betas, bounds.clone());
    let crops = vec![CropParams::identity(8, 8); 6];
    let teacher = pool.primary();

    let mut ref_x: Vec<f32> = images.data().to_vec();
    let mut ref_adam = AdamState::<f32>::new(ref_x.len());
    let mut g = Graph::new();
    for step in 0..5 {
        let cur = Tensor::new(images.shape().to_vec(), ref_x.clone()).unwrap();
        let out = oracle_forward(teacher, &cur);
        let ce = oracle_ce(&out.logits, &labels);
        let rbn = oracle_bn_alignment(teacher, &out);
        let losses = prism_step(&mut g, &mut batch, &a, &pool, &crops, lambda, lr).unwrap();
        assert!(rel(losses.logit, ce) < 1e-6, "step {step}: ce {} vs {ce}", losses.logit);
        assert!(rel(losses.bn, rbn) < 1e-6, "step {step}: bn {} vs {rbn}", losses.bn);
        assert!(rel(losses.total, ce + lambda * rbn) < 1e-6, "step {step}");

        let mut gg = Graph::<f32>::new();
        let x = gg.param(cur);
        let b = teacher.bind(&mut gg, false);
        let o = teacher.forward(&mut gg, &b, x, Mode::StatCapture).unwrap();
        let l = gg.cross_entropy(o.logits, &labels).unwrap();
        let r = prism_core::recovery::bn_alignment_from_captures(&mut gg, teacher, &o.bn).unwrap();
        let r = gg.scale(r, lambda as f32).unwrap();
        let t = gg.add(l, r).unwrap();
        let grad = gg.backward(t).unwrap().get(x).unwrap().data().to_vec();
        let hyper = AdamHyper {
            betas,
            ..Default::default()
        };
        adam_step(&mut ref_x, &grad, &mut ref_adam, lr, &hyper).unwrap();
        for (j, v) in ref_x.iter_mut().enumerate() {
            let (lo, hi) = bounds[(j / 64) % 3];
            *v = v.clamp(lo, hi);
        }
        assert_eq!(batch.images.data(), &ref_x[..], "step {step} pixels");
    }
}
