use lgd_core::backbone::{Branch, FeatureMap};
use lgd_core::density::{downsample_preserving_count, encode_density, DensityMap};
use lgd_core::episodes::{generate_synthetic_scene, heterogeneous_scene_spec, BenchmarkConfig};
use lgd_core::guidance::{decode_query, encode_support, global_guide, GlobalDensityToken};
use lgd_core::mldl::PrototypeSet;
use lgd_core::model::{Model, ModelConfig, ParamId};
use lgd_core::rng::seeded;
use lgd_core::tensor::{Tape, Tensor};
use lgd_core::trainer::euclidean_loss_on_tape;
use rand::Rng;

struct Episode {
    support: Tensor,
    support_gt: DensityMap,
    query: Tensor,
    query_gt: Tensor,
}

fn episode(size: usize, seed: u64) -> Episode {
    let bench = BenchmarkConfig {
        image_size: size,
        ..BenchmarkConfig::default()
    };
    let mut rng = seeded(seed);
    let spec = heterogeneous_scene_spec("pipe", &bench, &mut rng);
    let scene = generate_synthetic_scene(&spec, 2, &mut rng).unwrap();
    let (s, q) = (&scene.images[0], &scene.images[1]);
    let qgt = encode_density(&q.annotation, 4.0, (size, size)).unwrap();
    Episode {
        support: s.image.tensor().clone(),
        support_gt: encode_density(&s.annotation, 4.0, (size, size)).unwrap(),
        query: q.image.tensor().clone(),
        query_gt: downsample_preserving_count(&qgt, 4).unwrap().into_grid(),
    }
}

fn fitted_prototypes(model: &Model, ep: &Episode) -> PrototypeSet {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    encode_support(model, &mut tape, &bound, &ep.support, &ep.support_gt, None)
        .unwrap()
        .prototypes
}

fn loss(model: &Model, ep: &Episode, protos: &PrototypeSet, grads: bool) -> (f64, Vec<Tensor>, Vec<&'static str>) {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, grads);
    let enc = encode_support(model, &mut tape, &bound, &ep.support, &ep.support_gt, Some(protos)).unwrap();
    let y = decode_query(model, &mut tape, &bound, &enc, &ep.query).unwrap();
    let l = euclidean_loss_on_tape(&mut tape, y, &ep.query_gt).unwrap();
    let v = tape.value(l).data()[0];
    let ops = tape.op_names().collect();
    if !grads {
        return (v, Vec::new(), ops);
    }
    tape.backward(l).unwrap();
    (v, model.params().gradients(&tape, &bound), ops)
}

/// Worst relative error over `per_param` random elements of every
/// parameter whose name starts with `prefix`.
fn fd_params(cfg: ModelConfig, prefix: &str, per_param: usize, seed: u64) -> f64 {
    let mut model = Model::new(cfg, seed).unwrap();
    let ep = episode(32, seed + 1);
    let protos = fitted_prototypes(&model, &ep);
    let (_, grads, _) = loss(&model, &ep, &protos, true);
    let ids: Vec<ParamId> = model
        .params()
        .ids()
        .filter(|&id| model.params().name(id).starts_with(prefix))
        .collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    let mut rng = seeded(seed + 2);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for id in ids {
        for _ in 0..per_param {
            let j = rng.random_range(0..model.params().get(id).len());
            let an = grads[id.index()].data()[j];
            let orig = model.params().get(id).data()[j];
            model.params_mut().get_mut(id).data_mut()[j] = orig + eps;
            let lp = loss(&model, &ep, &protos, false).0;
            model.params_mut().get_mut(id).data_mut()[j] = orig - eps;
            let lm = loss(&model, &ep, &protos, false).0;
            model.params_mut().get_mut(id).data_mut()[j] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let scale = fd.abs().max(an.abs());
            if scale > 1e-7 {
                worst = worst.max((fd - an).abs() / scale);
            }
        }
    }
    worst
}

#[test]
fn head_gradients_match_finite_differences() {
    assert!(fd_params(ModelConfig::default(), "head.", 6, 40) < 1e-4);
}

#[test]
fn guidance_and_attention_gradients_match_finite_differences() {
    assert!(fd_params(ModelConfig::default(), "guidance.", 3, 41) < 1e-4);
    assert!(fd_params(ModelConfig::default(), "attention.", 4, 42) < 1e-4);
    assert!(fd_params(ModelConfig::default(), "backbone.", 3, 43) < 1e-4);
}

#[test]
fn variant_gradients_match_finite_differences() {
    let tiled = ModelConfig {
        tile_q: true,
        ..ModelConfig::default()
    };
    assert!(fd_params(tiled, "attention.", 3, 44) < 1e-4);
    let shared = ModelConfig {
        shared_branch_convs: true,
        dilation_rate: 3,
        ..ModelConfig::default()
    };
    assert!(fd_params(shared, "guidance.", 3, 45) < 1e-4);
    let no_gdg = ModelConfig {
        use_gdg: false,
        ..ModelConfig::default()
    };
    assert!(fd_params(no_gdg, "backbone.", 3, 46) < 1e-4);
}

#[test]
fn local_guide_gradient_wrt_similarity_plane() {
    let model = Model::new(ModelConfig::default(), 47).unwrap();
    let c = model.config().feature_dim();
    let mut rng = seeded(48);
    let plane0 = Tensor::uniform(&[1, 5, 6], -1.0, 1.0, &mut rng);
    let u = Tensor::uniform(&[c, 5, 6], 0.0, 1.0, &mut rng);
    let r = Tensor::uniform(&[c, 5, 6], -1.0, 1.0, &mut rng);
    let run = |plane: &Tensor, grad: bool| -> (f64, Option<Tensor>) {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let p = if grad { tape.param(plane.clone()) } else { tape.constant(plane.clone()) };
        let uv = tape.constant(u.clone());
        let y = model.branch(0).forward(&mut tape, &bound, p, uv).unwrap();
        let rv = tape.constant(r.clone());
        let m = tape.mul(y, rv).unwrap();
        let l = tape.sum(m).unwrap();
        let v = tape.value(l).data()[0];
        if grad {
            tape.backward(l).unwrap();
            (v, tape.grad(p).cloned())
        } else {
            (v, None)
        }
    };
    let g = run(&plane0, true).1.unwrap();
    let eps = 1e-5;
    for j in 0..plane0.len() {
        let mut p = plane0.clone();
        p.data_mut()[j] += eps;
        let lp = run(&p, false).0;
        p.data_mut()[j] -= 2.0 * eps;
        let lm = run(&p, false).0;
        let fd = (lp - lm) / (2.0 * eps);
        let an = g.data()[j];
        let scale = fd.abs().max(an.abs());
        if scale > 1e-7 {
            assert!((fd - an).abs() / scale < 1e-4, "cell {j}: fd {fd} vs {an}");
        }
    }
}

#[test]
fn em_leaves_no_nodes_on_the_tape() {
    let model = Model::new(ModelConfig::default(), 49).unwrap();
    let ep = episode(32, 50);
    let protos = fitted_prototypes(&model, &ep);
    let (l_fixed, _, ops_fixed) = loss(&model, &ep, &protos, false);

    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let enc = encode_support(&model, &mut tape, &bound, &ep.support, &ep.support_gt, None).unwrap();
    let y = decode_query(&model, &mut tape, &bound, &enc, &ep.query).unwrap();
    euclidean_loss_on_tape(&mut tape, y, &ep.query_gt).unwrap();
    let ops_fit: Vec<&str> = tape.op_names().collect();
    // fitting EM in-line records exactly the same graph as passing its
    // result in as a constant
    assert_eq!(ops_fit, ops_fixed);

    let flipped = PrototypeSet::new(protos.mu().map(|v| -v), protos.concentration()).unwrap();
    let (l_flipped, _, _) = loss(&model, &ep, &flipped, false);
    assert_ne!(l_fixed, l_flipped);
}

fn matvec_rows(x: &[f64], rows: usize, cols: usize, w: &Tensor) -> Vec<f64> {
    let out = w.shape()[1];
    let mut y = vec![0.0; rows * out];
    for i in 0..rows {
        for o in 0..out {
            y[i * out + o] = (0..cols).map(|k| x[i * cols + k] * w.at(&[k, o])).sum();
        }
    }
    y
}

#[test]
fn attention_matches_loop_oracle() {
    let model = Model::new(ModelConfig::default(), 51).unwrap();
    let att = model.attention().unwrap();
    let p = model.params();
    let (c, d) = (att.channels, att.dim);
    let mut rng = seeded(52);
    for tile_q in [false, true] {
        let (h, w) = (3, 4);
        let n = h * w;
        let q = Tensor::randn(&[1, c], 1.0, &mut rng);
        let local = Tensor::uniform(&[c, h, w], 0.0, 1.0, &mut rng);
        let out = global_guide(
            &GlobalDensityToken::new(q.clone()).unwrap(),
            &FeatureMap::new(local.clone(), Branch::Query, 4).unwrap(),
            att,
            p,
            tile_q,
        )
        .unwrap();

        let kv: Vec<f64> = (0..n).flat_map(|i| (0..c).map(move |ch| (i, ch))).map(|(i, ch)| local.data()[ch * n + i]).collect();
        let rows = if tile_q { n } else { 1 };
        let query: Vec<f64> = (0..rows * c)
            .map(|k| q.data()[k % c] + if tile_q { kv[k] } else { 0.0 })
            .collect();
        let qa = matvec_rows(&query, rows, c, p.get(att.wq.weight));
        let ka = matvec_rows(&kv, n, c, p.get(att.wk.weight));
        let va = matvec_rows(&kv, n, c, p.get(att.wv.weight));
        let psi_b = p.get(att.psi.bias.unwrap()).data();
        for r in 0..rows {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|k| qa[r * d + k] * ka[j * d + k]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let wts: Vec<f64> = e.iter().map(|v| v / z).collect();
            for j in 0..n {
                assert!((out.weights.data()[r * n + j] - wts[j]).abs() < 1e-10);
            }
            let pooled: Vec<f64> = (0..d).map(|k| (0..n).map(|j| wts[j] * va[j * d + k]).sum()).collect();
            let proj = matvec_rows(&pooled, 1, d, p.get(att.psi.weight));
            for ch in 0..c {
                let o = query[r * c + ch] + proj[ch] + psi_b[ch];
                assert!((out.o.data()[r * c + ch] - o).abs() < 1e-10);
                let guided = out.output.data().data();
                if tile_q {
                    assert!((guided[ch * n + r] - o).abs() < 1e-10);
                } else {
                    for i in 0..n {
                        assert!((guided[ch * n + i] - (local.data()[ch * n + i] + o)).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
