#![allow(dead_code)]

use pfvg::data::{render_video, Geometry, SceneSpec, Shape};
use pfvg::flow::{fm_loss_var, interpolate, standard_normal, velocity_target};
use pfvg::trainer::ConditioningStream;
use pfvg::{Model, ModelConfig, Result, Tape, Tensor, Trainer, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.random_range(-1.5..1.5))
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Scalar probe `Σ w ⊙ f(inputs)` with fixed random `w`, so every output
/// element contributes a distinct weight.
fn probe(f: &Build, inputs: &[Tensor], w: &Option<Tensor>, grad: bool) -> (Tape, Vec<Var>, Var) {
    let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let root = match w {
        Some(w) => {
            let wv = tape.constant(w.clone());
            let p = tape.mul(out, wv).unwrap();
            tape.sum(p)
        }
        None => out,
    };
    (tape, vars, root)
}

/// Largest relative error between backward and central differences over
/// every input element.
pub fn gradcheck(f: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tape, _, out) = probe(f, inputs, &None, false);
    let dims = tape.value(out).dims().to_vec();
    let w = if dims.is_empty() || tape.value(out).len() == 1 && dims.iter().all(|&d| d == 1) {
        None
    } else {
        Some(rand_tensor(&dims, &mut rng))
    };
    let (mut tape, vars, root) = probe(f, inputs, &w, true);
    tape.backward(root).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let eval = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[k].data_mut()[i] += delta;
                let (t, _, r) = probe(f, &shifted, &w, false);
                t.value(r).item()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Random instance generator for one primitive: inputs plus the op.
pub struct OpCase {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>),
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(2..5)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            make: |r| {
                let (a, b, c) = (dim(r), dim(r), dim(r));
                (vec![rand_tensor(&[a, b], r), rand_tensor(&[b, c], r)], Box::new(|t, v| t.matmul(v[0], v[1])))
            },
        },
        OpCase {
            name: "transpose",
            make: |r| {
                let (a, b) = (dim(r), dim(r));
                (vec![rand_tensor(&[a, b], r)], Box::new(|t, v| t.transpose(v[0])))
            },
        },
        OpCase {
            name: "add",
            make: |r| {
                let d = [dim(r), dim(r)];
                (vec![rand_tensor(&d, r), rand_tensor(&d, r)], Box::new(|t, v| t.add(v[0], v[1])))
            },
        },
        OpCase {
            name: "sub",
            make: |r| {
                let d = [dim(r), dim(r)];
                (vec![rand_tensor(&d, r), rand_tensor(&d, r)], Box::new(|t, v| t.sub(v[0], v[1])))
            },
        },
        OpCase {
            name: "mul",
            make: |r| {
                let d = [dim(r), dim(r)];
                (vec![rand_tensor(&d, r), rand_tensor(&d, r)], Box::new(|t, v| t.mul(v[0], v[1])))
            },
        },
        OpCase {
            name: "add_row",
            make: |r| {
                let (a, b) = (dim(r), dim(r));
                (vec![rand_tensor(&[a, b], r), rand_tensor(&[b], r)], Box::new(|t, v| t.add_row(v[0], v[1])))
            },
        },
        OpCase {
            name: "mul_row",
            make: |r| {
                let (a, b) = (dim(r), dim(r));
                (vec![rand_tensor(&[a, b], r), rand_tensor(&[b], r)], Box::new(|t, v| t.mul_row(v[0], v[1])))
            },
        },
        OpCase {
            name: "scale",
            make: |r| {
                let c: f64 = r.random_range(-2.0..2.0);
                (vec![rand_tensor(&[dim(r), dim(r)], r)], Box::new(move |t, v| Ok(t.scale(v[0], c))))
            },
        },
        OpCase {
            name: "gelu",
            make: |r| (vec![rand_tensor(&[dim(r), dim(r)], r)], Box::new(|t, v| Ok(t.gelu(v[0])))),
        },
        OpCase {
            name: "silu",
            make: |r| (vec![rand_tensor(&[dim(r), dim(r)], r)], Box::new(|t, v| Ok(t.silu(v[0])))),
        },
        OpCase {
            name: "softmax",
            make: |r| {
                let axis = r.random_range(0..2);
                (vec![rand_tensor(&[dim(r), dim(r)], r)], Box::new(move |t, v| t.softmax(v[0], axis)))
            },
        },
        OpCase {
            name: "normalize",
            make: |r| (vec![rand_tensor(&[dim(r), dim(r) + 1], r)], Box::new(|t, v| t.normalize(v[0], 1e-6))),
        },
        OpCase {
            name: "layernorm",
            make: |r| {
                let (a, b) = (dim(r), dim(r) + 1);
                (
                    vec![rand_tensor(&[a, b], r), rand_tensor(&[b], r), rand_tensor(&[b], r)],
                    Box::new(|t, v| t.layernorm(v[0], v[1], v[2], 1e-6)),
                )
            },
        },
        OpCase {
            name: "sum",
            make: |r| (vec![rand_tensor(&[dim(r), dim(r)], r)], Box::new(|t, v| Ok(t.sum(v[0])))),
        },
        OpCase {
            name: "mean",
            make: |r| (vec![rand_tensor(&[dim(r), dim(r)], r)], Box::new(|t, v| Ok(t.mean(v[0])))),
        },
        OpCase {
            name: "concat_rows",
            make: |r| {
                let c = dim(r);
                (
                    vec![rand_tensor(&[dim(r), c], r), rand_tensor(&[dim(r), c], r)],
                    Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
                )
            },
        },
        OpCase {
            name: "concat_cols",
            make: |r| {
                let a = dim(r);
                (
                    vec![rand_tensor(&[a, dim(r)], r), rand_tensor(&[a, dim(r)], r)],
                    Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
                )
            },
        },
        OpCase {
            name: "slice_rows",
            make: |r| (vec![rand_tensor(&[4, dim(r)], r)], Box::new(|t, v| t.slice_rows(v[0], 1, 3))),
        },
        OpCase {
            name: "slice_cols",
            make: |r| (vec![rand_tensor(&[dim(r), 4], r)], Box::new(|t, v| t.slice_cols(v[0], 1, 3))),
        },
        OpCase {
            name: "reshape",
            make: |r| (vec![rand_tensor(&[2, 6], r)], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        },
        OpCase {
            name: "gather",
            make: |r| {
                // repeated indices exercise scatter-add in backward
                let index: Vec<usize> = (0..6).map(|_| r.random_range(0..6)).collect();
                (vec![rand_tensor(&[2, 3], r)], Box::new(move |t, v| t.gather(v[0], index.clone(), &[3, 2])))
            },
        },
        OpCase {
            name: "rope",
            make: |r| {
                let rows = dim(r);
                let pos: Vec<i64> = (0..rows).map(|_| r.random_range(0..40)).collect();
                (vec![rand_tensor(&[rows, 8], r)], Box::new(move |t, v| t.rope(v[0], &pos, 4)))
            },
        },
        OpCase {
            name: "fm_loss",
            make: |r| {
                let d = [dim(r), dim(r)];
                let (x, eps) = (rand_tensor(&d, r), rand_tensor(&d, r));
                let u = velocity_target(&x, &eps).unwrap();
                (vec![rand_tensor(&d, r)], Box::new(move |t, v| fm_loss_var(t, v[0], &u)))
            },
        },
    ]
}

/// Worst relative error of one primitive over `instances` random draws.
pub fn op_gradcheck(case: &OpCase, instances: u64) -> f64 {
    (0..instances)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
            let (inputs, f) = (case.make)(&mut rng);
            gradcheck(&*f, &inputs, i)
        })
        .fold(0.0, f64::max)
}

pub fn two_layer_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        frame_height: 8,
        frame_width: 8,
        frames_per_segment: 2,
        memory_tokens: 4,
        memorize_window: 4,
        framepack_factors: vec![1, 4],
        ..ModelConfig::default()
    }
}

fn perturbed(model: &Model, seed: u64) -> Model {
    // zero-initialized modulation would hide half of the block from the check
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = m.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in m.params.value_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    m
}

/// FM loss of the full model on a clip conditioned on one history segment,
/// so that the memory update, FramePack and every block carry gradient.
fn model_loss(model: &Model, stream: &ConditioningStream, clip: &Tensor, eps: &Tensor, t: f64, tape: &mut Tape) -> Var {
    let cv = stream.cond_vars(tape, model).unwrap();
    let x_t = interpolate(clip, eps, t).unwrap().x_t;
    let u = velocity_target(clip, eps).unwrap();
    let v = model.velocity_var(tape, &x_t, t, &cv).unwrap();
    fm_loss_var(tape, v, &u).unwrap()
}

/// Worst relative error of the end-to-end loss gradient for one random
/// instance, checked on `coords` random parameter entries.
pub fn model_gradcheck(seed: u64, coords: usize) -> f64 {
    let cfg = two_layer_config();
    let geom = Geometry::of(&cfg);
    let spec = SceneSpec {
        shape: Shape::Disc,
        object_intensity: 0.9,
        background_intensity: 0.2,
        velocity: (1.0, -0.5),
        occluder: None,
        n_clips: 2,
        seed,
    };
    let video = render_video(&spec, &geom, 0).unwrap();
    let mut model = perturbed(&Model::new(cfg, seed).unwrap(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
    let mut stream = ConditioningStream::new(&model, &video.prompt_ids, &video.reference_image).unwrap();
    stream.push(&model, video.clips[0].clone()).unwrap();
    let eps = standard_normal(video.clips[1].dims(), &mut rng);
    let t: f64 = rng.random_range(0.05..0.95);

    let mut tape = Tape::new();
    let loss = model_loss(&model, &stream, &video.clips[1], &eps, t, &mut tape);
    tape.backward(loss).unwrap();
    model.params.zero_grad();
    model.params.accumulate_from(&tape);

    let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.value.len())).collect();
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let (id, len) = ids[rng.random_range(0..ids.len())];
        let i = rng.random_range(0..len);
        let analytic = model.params.grad(id)[i];
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params.value_mut(id).data_mut()[i] += delta;
            let mut tape = Tape::no_grad();
            let l = model_loss(&m, &stream, &video.clips[1], &eps, t, &mut tape);
            tape.value(l).item()
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

/// A handful of short videos at the two-layer geometry.
pub fn small_corpus() -> Vec<pfvg::data::ClipSequence> {
    pfvg::data::make_corpus(&[(1, 2), (2, 2), (4, 2)], 5, &Geometry::of(&two_layer_config())).unwrap()
}

pub fn param_bits(model: &Model) -> Vec<(String, Vec<u64>)> {
    model
        .params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// One update from explicitly summed per-clip gradients.
pub fn summed_update(mut tr: Trainer, video: &pfvg::data::ClipSequence) -> Trainer {
    let grads = tr.clip_gradients(video).unwrap();
    let ids: Vec<_> = tr.model.params.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = tr.model.params.grad_mut(id);
        g.fill(0.0);
        for clip in &grads {
            for (a, b) in g.iter_mut().zip(&clip[k]) {
                *a += b;
            }
        }
    }
    tr.opt.apply(&mut tr.model.params);
    tr
}

