//! Reverse-mode differentiation sized for the multipole model, plus Adam and
//! the cosine learning-rate schedule.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{adam_step, cosine_lr, AdamConfig};
pub use params::{ParamId, ParamStore};
pub(crate) use tape::{accumulate_pole_term, fill_phasor};
pub use tape::{AutodiffError, Gradients, PoleSumConfig, Tape, Var, POSENC_DIM, POSENC_FREQS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

    /// Reduces any output to a scalar with fixed random weights so every
    /// output element participates.
    fn scalarize(tape: &mut Tape, out: Var, rng_seed: u64) -> Var {
        let (r, c) = tape.value(out).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let w = tape.constant(Tensor::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ));
        let p = tape.mul(out, w).unwrap();
        tape.sum(p)
    }

    fn eval(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let l = scalarize(&mut tape, out, seed);
        tape.value(l).item()
    }

    /// Largest relative discrepancy between analytic and central-difference
    /// gradients over all input elements.
    fn check(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let l = scalarize(&mut tape, out, seed);
        let mut store = ParamStore::new();
        let grads = tape.backward(l, &mut store).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).unwrap();
            let mut fd = vec![0.0; input.len()];
            for (j, slot) in fd.iter_mut().enumerate() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                *slot = (eval(build, &plus, seed) - eval(build, &minus, seed)) / (2.0 * h);
            }
            let scale = fd.iter().map(|v| v.abs()).fold(1e-8, f64::max);
            for (a, f) in analytic.data().iter().zip(&fd) {
                worst = worst.max((a - f).abs() / scale);
            }
        }
        worst
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect())
    }

    /// Values bounded away from zero, random sign.
    fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(
            r,
            c,
            (0..r * c)
                .map(|_| {
                    let m = rng.gen_range(0.2..2.0);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect(),
        )
    }

    fn run(name: &str, build: &Build, gen: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
        for trial in 0..10 {
            let inputs = gen(&mut rng);
            let err = check(build, &inputs, trial);
            assert!(err < 1e-6, "{name} trial {trial}: relative error {err:e}");
        }
    }

    #[test]
    fn elementwise_primitives() {
        run("add", &|t, v| t.add(v[0], v[1]).unwrap(), &|r| {
            vec![random(r, 3, 4, -1.0, 1.0), random(r, 3, 4, -1.0, 1.0)]
        });
        run("sub", &|t, v| t.sub(v[0], v[1]).unwrap(), &|r| {
            vec![random(r, 3, 4, -1.0, 1.0), random(r, 3, 4, -1.0, 1.0)]
        });
        run("mul", &|t, v| t.mul(v[0], v[1]).unwrap(), &|r| {
            vec![random(r, 3, 4, -1.0, 1.0), random(r, 3, 4, -1.0, 1.0)]
        });
        run("scale", &|t, v| t.scale(v[0], -2.5), &|r| {
            vec![random(r, 2, 5, -1.0, 1.0)]
        });
        run("offset", &|t, v| t.offset(v[0], 4.0), &|r| {
            vec![random(r, 2, 5, -1.0, 1.0)]
        });
        run("relu", &|t, v| t.relu(v[0]), &|r| vec![away_from_zero(r, 4, 4)]);
        run("sin", &|t, v| t.sin(v[0]), &|r| vec![random(r, 4, 4, -3.0, 3.0)]);
        run("cos", &|t, v| t.cos(v[0]), &|r| vec![random(r, 4, 4, -3.0, 3.0)]);
        run("recip", &|t, v| t.recip(v[0]), &|r| vec![away_from_zero(r, 3, 3)]);
        run("sqrt", &|t, v| t.sqrt(v[0]), &|r| vec![random(r, 3, 3, 0.2, 4.0)]);
        run("log", &|t, v| t.log(v[0]), &|r| vec![random(r, 3, 3, 0.2, 4.0)]);
        run("abs", &|t, v| t.abs(v[0]), &|r| vec![away_from_zero(r, 3, 3)]);
        run("clamp_min", &|t, v| t.clamp_min(v[0], 0.1), &|r| {
            vec![away_from_zero(r, 3, 3)]
        });
    }

    #[test]
    fn linear_algebra_primitives() {
        run("matmul", &|t, v| t.matmul(v[0], v[1]).unwrap(), &|r| {
            vec![random(r, 3, 4, -1.0, 1.0), random(r, 4, 2, -1.0, 1.0)]
        });
        run("affine", &|t, v| t.affine(v[0], v[1], v[2]).unwrap(), &|r| {
            vec![
                random(r, 5, 3, -1.0, 1.0),
                random(r, 3, 4, -1.0, 1.0),
                random(r, 1, 4, -1.0, 1.0),
            ]
        });
        run("add_row", &|t, v| t.add_row(v[0], v[1]).unwrap(), &|r| {
            vec![random(r, 4, 3, -1.0, 1.0), random(r, 1, 3, -1.0, 1.0)]
        });
        run("scale_rows", &|t, v| t.scale_rows(v[0], v[1]).unwrap(), &|r| {
            vec![random(r, 4, 3, -1.0, 1.0), random(r, 4, 1, -1.0, 1.0)]
        });
        run("sum", &|t, v| t.sum(v[0]), &|r| vec![random(r, 3, 4, -1.0, 1.0)]);
        run("sum_rows", &|t, v| t.sum_rows(v[0]), &|r| {
            vec![random(r, 3, 4, -1.0, 1.0)]
        });
        run("sum_cols", &|t, v| t.sum_cols(v[0]), &|r| {
            vec![random(r, 3, 4, -1.0, 1.0)]
        });
        run("row_norm", &|t, v| t.row_norm(v[0]), &|r| {
            vec![random(r, 3, 4, -1.0, 1.0)]
        });
        run("suffix_sum", &|t, v| t.suffix_sum(v[0]), &|r| {
            vec![random(r, 2, 6, -1.0, 1.0)]
        });
    }

    #[test]
    fn structural_primitives() {
        run("concat", &|t, v| t.concat(v[0], v[1]).unwrap(), &|r| {
            vec![random(r, 3, 2, -1.0, 1.0), random(r, 3, 4, -1.0, 1.0)]
        });
        run("slice_cols", &|t, v| t.slice_cols(v[0], 1, 4).unwrap(), &|r| {
            vec![random(r, 3, 5, -1.0, 1.0)]
        });
        run("gather_rows", &|t, v| t.gather_rows(v[0], &[2, 0, 2]).unwrap(), &|r| {
            vec![random(r, 3, 2, -1.0, 1.0)]
        });
    }

    #[test]
    fn complex_primitives() {
        run(
            "complex_from_parts",
            &|t, v| t.complex_from_parts(v[0], v[1]).unwrap(),
            &|r| vec![random(r, 2, 3, -1.0, 1.0), random(r, 2, 3, -1.0, 1.0)],
        );
        run("complex_mul", &|t, v| t.complex_mul(v[0], v[1]).unwrap(), &|r| {
            vec![random(r, 2, 6, -1.0, 1.0), random(r, 2, 6, -1.0, 1.0)]
        });
        run("complex_re", &|t, v| t.complex_part(v[0], false).unwrap(), &|r| {
            vec![random(r, 2, 6, -1.0, 1.0)]
        });
        run("complex_im", &|t, v| t.complex_part(v[0], true).unwrap(), &|r| {
            vec![random(r, 2, 6, -1.0, 1.0)]
        });
        run("complex_abs", &|t, v| t.complex_abs(v[0]).unwrap(), &|r| {
            vec![away_from_zero(r, 2, 6)]
        });
    }

    #[test]
    fn transform_primitives() {
        run("rdft", &|t, v| t.rdft(v[0], 16).unwrap(), &|r| {
            vec![random(r, 2, 9, -1.0, 1.0)]
        });
        run("rdft_full", &|t, v| t.rdft(v[0], 2400).unwrap(), &|r| {
            vec![random(r, 1, 72, -1.0, 1.0)]
        });
        run("irdft", &|t, v| t.irdft(v[0], 16).unwrap(), &|r| {
            vec![random(r, 2, 18, -1.0, 1.0)]
        });
        run("stft", &|t, v| t.stft(v[0], 16).unwrap(), &|r| {
            vec![random(r, 1, 40, -1.0, 1.0)]
        });
        run("stft_short", &|t, v| t.stft(v[0], 32).unwrap(), &|r| {
            vec![random(r, 1, 20, -1.0, 1.0)]
        });
    }

    #[test]
    fn model_primitives() {
        run("posenc", &|t, v| t.posenc(v[0], 7.0).unwrap(), &|r| {
            vec![random(r, 3, 3, -5.0, 5.0)]
        });
        run("real_sh", &|t, v| t.real_sh(v[0], 3).unwrap(), &|r| {
            vec![random(r, 4, 3, -1.0, 1.0)]
        });
        run("channel_mix", &|t, v| t.channel_mix(v[0], v[1]).unwrap(), &|r| {
            vec![random(r, 3, 4, -1.0, 1.0), random(r, 3, 20, -1.0, 1.0)]
        });
        run(
            "delay_phasor",
            &|t, v| t.delay_phasor(v[0], 200, 10.0, 343.0).unwrap(),
            &|r| vec![random(r, 3, 1, 0.5, 30.0)],
        );
    }

    const POLE_SUM: PoleSumConfig = PoleSumConfig {
        df: 10.0,
        speed: 343.0,
        r_min: 0.1,
        eps: 1e-12,
    };

    #[test]
    fn pole_sum_gradient() {
        run(
            "pole_sum",
            &|t, v| t.pole_sum(v[0], &[3, 0, 3], v[1], v[2], POLE_SUM).unwrap(),
            &|r| {
                let mut dist = random(r, 3, 1, 0.5, 30.0);
                dist.set(1, 0, 0.06);
                vec![random(r, 4, 40, -1.0, 1.0), random(r, 3, 9, -1.0, 1.0), dist]
            },
        );
    }

    #[test]
    fn pole_sum_matches_unfused_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        const ROWS: [usize; 4] = [1, 2, 0, 2];
        let inputs = [
            random(&mut rng, 3, 30, -1.0, 1.0),
            random(&mut rng, 4, 8, -1.0, 1.0),
            random(&mut rng, 4, 1, 0.05, 20.0),
        ];
        let fused: &Build = &|t, v| t.pole_sum(v[0], &ROWS, v[1], v[2], POLE_SUM).unwrap();
        let chain: &Build = &|t, v| {
            let s = t.gather_rows(v[0], &ROWS).unwrap();
            let d = t.rdft(v[1], 28).unwrap();
            let n = t.row_norm(d);
            let n = t.offset(n, POLE_SUM.eps);
            let inv = t.recip(n);
            let u = t.scale_rows(d, inv).unwrap();
            let e = t.delay_phasor(v[2], 15, POLE_SUM.df, POLE_SUM.speed).unwrap();
            let a = t.clamp_min(v[2], POLE_SUM.r_min);
            let a = t.recip(a);
            let su = t.complex_mul(s, u).unwrap();
            let z = t.complex_mul(su, e).unwrap();
            let z = t.scale_rows(z, a).unwrap();
            t.sum_rows(z)
        };
        let grads = |b: &Build| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
            let out = b(&mut tape, &vars);
            let value = tape.value(out).clone();
            let l = scalarize(&mut tape, out, 3);
            let g = tape.backward(l, &mut ParamStore::new()).unwrap();
            let gs: Vec<Tensor> = vars.iter().map(|&v| g.get(v).unwrap().clone()).collect();
            (value, gs)
        };
        let (vf, gf) = grads(fused);
        let (vc, gc) = grads(chain);
        for (a, b) in vf.data().iter().zip(vc.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (x, y) in gf.iter().zip(&gc) {
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!((a - b).abs() < 1e-11, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn dft_adjoint_sum_of_bins() {
        // d/dx Re(sum_k X_k) = sum_k cos(2 pi k t / n): compare with differences.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 1, 50, -1.0, 1.0);
        let loss = |x: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.input(x.clone());
            let spec = tape.rdft(v, 2400).unwrap();
            let re = tape.value(spec).data().chunks_exact(2).map(|z| z[0]).sum::<f64>();
            (tape, v, spec, re)
        };
        let (tape, v, spec, _) = loss(&x);
        let mut seed = Tensor::zeros(1, 2402);
        for k in 0..1201 {
            seed.set(0, 2 * k, 1.0);
        }
        let mut store = ParamStore::new();
        let grads = tape.backward_from(vec![(spec, seed)], &mut store).unwrap();
        let g = grads.get(v).unwrap();
        let h = 1e-5;
        for j in 0..50 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[j] += h;
            m.data_mut()[j] -= h;
            let fd = (loss(&p).3 - loss(&m).3) / (2.0 * h);
            assert!((fd - g.data()[j]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn trivial_examples() {
        let mut store = ParamStore::new();
        let b = store.add("b", Tensor::row(vec![1.5, -2.0]));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![3.0, 4.0, 5.0]));
        let w = tape.constant(Tensor::zeros(3, 2));
        let bv = tape.param(&store, b);
        let y = tape.affine(x, w, bv).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0]);

        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.input(Tensor::scalar(4.0));
        let xy = tape.mul(x, y).unwrap();
        let g = tape.backward(xy, &mut store).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 4.0);
        assert_eq!(g.get(y).unwrap().item(), 3.0);
    }

    #[test]
    fn squared_norm_gradient_is_exact() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row(vec![0.5, -1.25, 3.0]));
        let unused = store.add("unused", Tensor::row(vec![9.0]));
        let mut tape = Tape::new();
        let pv = tape.param(&store, p);
        let _ = tape.param(&store, unused);
        let sq = tape.square(pv);
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[1.0, -2.5, 6.0]);
        assert_eq!(store.grad(unused).data(), &[0.0]);
    }

    #[test]
    fn errors() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(2, 3));
        let b = tape.input(Tensor::zeros(3, 2));
        assert!(matches!(tape.add(a, b), Err(AutodiffError::Shape { .. })));
        assert!(matches!(tape.matmul(a, a), Err(AutodiffError::Shape { .. })));
        let mut store = ParamStore::new();
        assert_eq!(
            tape.backward(a, &mut store).unwrap_err(),
            AutodiffError::NonScalarLoss(2, 3)
        );
    }

    #[test]
    fn gradient_accumulation_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add("w", random(&mut rng, 4, 3, -1.0, 1.0));
        let x = random(&mut rng, 5, 4, -1.0, 1.0);
        let build = |tape: &mut Tape, store: &ParamStore, which: u8| {
            let xv = tape.constant(x.clone());
            let wv = tape.param(store, w);
            let y = tape.matmul(xv, wv).unwrap();
            let l1 = {
                let s = tape.sin(y);
                tape.sum(s)
            };
            let l2 = {
                let q = tape.square(y);
                tape.mean(q)
            };
            match which {
                1 => l1,
                2 => l2,
                _ => tape.add(l1, l2).unwrap(),
            }
        };
        let mut grads = Vec::new();
        for which in [1u8, 2, 3] {
            store.zero_grads();
            let mut tape = Tape::new();
            let l = build(&mut tape, &store, which);
            tape.backward(l, &mut store).unwrap();
            grads.push(store.grad(w).clone());
        }
        for i in 0..grads[0].len() {
            let sum = grads[0].data()[i] + grads[1].data()[i];
            assert!((sum - grads[2].data()[i]).abs() < 1e-12);
        }
    }
}
