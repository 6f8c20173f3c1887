//! Autodiff against independent oracles: central finite differences and a
//! loop-nest convolution.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustlab::tensor::{Tape, Tensor, Var};

const H: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values whose magnitude stays at least `gap` away from zero, so ReLU has
/// no kink inside the finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Evaluates `Σ out·proj` with f64 accumulation; f32 everywhere else.
fn eval(inputs: &[Tensor], build: &Build, proj: &[f32]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let v = tape.value(out).data();
    if proj.is_empty() {
        return v[0] as f64;
    }
    v.iter().zip(proj).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Max over inputs of ‖autodiff − FD‖∞ / ‖FD‖∞.
fn grad_check(inputs: &[Tensor], build: &Build, proj: Option<Vec<f32>>) -> f64 {
    let proj = proj.unwrap_or_default();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = build(&mut tape, &vars);
    let loss = if proj.is_empty() {
        out
    } else {
        let shape = tape.shape(out).to_vec();
        let p = tape.leaf(Tensor::new(shape, proj.clone()).unwrap());
        let prod = tape.mul(out, p).unwrap();
        tape.sum(prod)
    };
    tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let auto = tape.grad(vars[k]).map(|g| g.to_vec()).unwrap_or(vec![0.0; t.numel()]);
        let mut fd = vec![0.0f64; t.numel()];
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = t.data()[i];
            plus[k].data_mut()[i] = (x as f64 + H) as f32;
            minus[k].data_mut()[i] = (x as f64 - H) as f32;
            let step = plus[k].data()[i] as f64 - minus[k].data()[i] as f64;
            fd[i] = (eval(&plus, build, &proj) - eval(&minus, build, &proj)) / step;
        }
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let err = auto.iter().zip(&fd).fold(0.0f64, |m, (&a, &f)| m.max((a as f64 - f).abs()));
        worst = worst.max(err / scale);
    }
    worst
}

fn proj_for(rng: &mut ChaCha8Rng, n: usize) -> Option<Vec<f32>> {
    Some((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[test]
fn finite_difference_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        // conv2d with stride and padding variants
        let stride = 1 + trial % 2;
        let pad = trial % 2;
        let h = if stride == 2 { 5 } else { 4 };
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 2, h, h], -1.0, 1.0),
            rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[3], -1.0, 1.0),
        ];
        let build = move |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
        let out_len = {
            let mut tape = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
            let o = build(&mut tape, &vs);
            tape.value(o).numel()
        };
        let e = grad_check(&inputs, &build, proj_for(&mut rng, out_len));
        assert!(e < 1e-3, "conv2d trial {trial}: {e}");

        let x = away_from_zero(&mut rng, &[2, 3, 4], 0.01);
        let e = grad_check(&[x], &|t: &mut Tape, v: &[Var]| t.relu(v[0]), proj_for(&mut rng, 24));
        assert!(e < 1e-3, "relu: {e}");

        // Distinct values so the pooled maximum is unique and stable.
        let mut vals: Vec<f32> = (0..32).map(|i| i as f32 * 0.05).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        let x = Tensor::new(vec![2, 1, 4, 4], vals).unwrap();
        let e = grad_check(&[x], &|t: &mut Tape, v: &[Var]| t.maxpool2(v[0]).unwrap(), proj_for(&mut rng, 8));
        assert!(e < 1e-3, "maxpool2: {e}");

        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let e = grad_check(&[x], &|t: &mut Tape, v: &[Var]| t.global_avg_pool(v[0]).unwrap(), proj_for(&mut rng, 6));
        assert!(e < 1e-3, "gap: {e}");

        let inputs = vec![
            rand_tensor(&mut rng, &[3, 5], -1.0, 1.0),
            rand_tensor(&mut rng, &[4, 5], -1.0, 1.0),
            rand_tensor(&mut rng, &[4], -1.0, 1.0),
        ];
        let e = grad_check(&inputs, &|t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], v[2]).unwrap(), proj_for(&mut rng, 12));
        assert!(e < 1e-3, "linear: {e}");

        let logits = rand_tensor(&mut rng, &[4, 8], -3.0, 3.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..8)).collect();
        let e = grad_check(&[logits], &move |t: &mut Tape, v: &[Var]| t.softmax_cross_entropy(v[0], &labels).unwrap(), None);
        assert!(e < 1e-3, "softmax_ce: {e}");

        let a = rand_tensor(&mut rng, &[6], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[6], -1.0, 1.0);
        for (name, f) in [
            ("add", (|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]).unwrap()) as fn(&mut Tape, &[Var]) -> Var),
            ("sub", |t, v| t.sub(v[0], v[1]).unwrap()),
            ("mul", |t, v| t.mul(v[0], v[1]).unwrap()),
            ("scale", |t, v| t.scale(v[0], -1.7)),
            ("shift", |t, v| t.shift(v[0], -0.5)),
        ] {
            let e = grad_check(&[a.clone(), b.clone()], &f, proj_for(&mut rng, 6));
            assert!(e < 1e-3, "{name}: {e}");
        }
        let e = grad_check(&[a.clone()], &|t: &mut Tape, v: &[Var]| t.sum(v[0]), None);
        assert!(e < 1e-3, "sum: {e}");

        let x = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let mask = [1.0, 0.0, 0.5];
        let e = grad_check(&[x], &move |t: &mut Tape, v: &[Var]| t.channel_scale(v[0], &mask).unwrap(), proj_for(&mut rng, 24));
        assert!(e < 1e-3, "channel_scale: {e}");
    }
}

/// Six nested loops, accumulated in f64.
fn conv_loop_nest(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> (Vec<f64>, usize) {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f64; n * cout * ho * wo];
    let mut macs = 0;
    for i in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[co] as f64;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    let xv = x.data()[((i * cin + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                    acc += xv as f64 * wv as f64;
                                    macs += 1;
                                }
                            }
                        }
                    }
                    out[((i * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, macs)
}

#[test]
fn conv_matches_loop_nest() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    for (stride, pad) in [(1, 0), (1, 1), (1, 2)] {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        let (oracle, _) = conv_loop_nest(&x, &w, &b, stride, pad);
        assert_eq!(tape.value(y).numel(), oracle.len());
        for (a, o) in tape.value(y).data().iter().zip(&oracle) {
            assert!((*a as f64 - o).abs() < 1e-5, "{a} vs {o}");
        }
    }
}

fn sum_sq(t: &mut Tape, x: Var) -> Var {
    let sq = t.mul(x, x).unwrap();
    t.sum(sq)
}

fn sum_relu(t: &mut Tape, x: Var) -> Var {
    let r = t.relu(x);
    t.sum(r)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[10], -1.0, 1.0);

        let grad_of = |coef_f: f32, coef_g: f32| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone().with_grad());
            let f = sum_sq(&mut tape, v);
            let g = sum_relu(&mut tape, v);
            let fa = tape.scale(f, coef_f);
            let gb = tape.scale(g, coef_g);
            let l = tape.add(fa, gb).unwrap();
            tape.backward(l).unwrap();
            tape.grad(v).unwrap().to_vec()
        };
        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        for i in 0..10 {
            let expect = a * gf[i] + b * gg[i];
            prop_assert!((combined[i] - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_backward_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 2, 6, 6], 0.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone().with_grad());
            let wv = tape.leaf(w.clone().with_grad());
            let bv = tape.leaf(b.clone().with_grad());
            let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
            let r = tape.relu(y);
            let p = tape.maxpool2(r).unwrap();
            let s = sum_sq(&mut tape, p);
            tape.backward(s).unwrap();
            (tape.value(s).data().to_vec(), tape.grad(xv).unwrap().to_vec(), tape.grad(wv).unwrap().to_vec())
        };
        let first = run();
        let second = run();
        prop_assert_eq!(first, second);
    }
}
