use super::*;

fn rng() -> Rng {
    Rng::new(11, 0)
}

/// Straight-line reference for a tanh MLP, written without the batched kernels.
fn oracle_forward(m: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
    let sizes = m.layer_sizes();
    let mut a = x.to_vec();
    for l in 0..sizes.len() - 1 {
        let w = m.weight(l);
        let b = m.bias(l).data();
        let mut z = Vec::new();
        for o in 0..sizes[l + 1] {
            let mut s = b[o];
            for i in 0..sizes[l] {
                s += w.data()[o * sizes[l] + i] * a[i];
            }
            z.push(if l + 2 == sizes.len() { s } else { s.tanh() });
        }
        a = z;
    }
    a
}

#[test]
fn identity_layer_passes_input_through() {
    let mut m = Mlp::<f64>::zeros(&[2, 2], Activation::Tanh).unwrap();
    m.weight_mut(0).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let y = m.forward(&Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0]);
}

#[test]
fn zero_weights_output_bias() {
    let mut m = Mlp::<f64>::zeros(&[3, 4, 2], Activation::Tanh).unwrap();
    m.bias_mut(1).data_mut().copy_from_slice(&[0.25, -1.5]);
    for x in [[0.0, 0.0, 0.0], [5.0, -2.0, 1.0]] {
        let y = m.forward(&Tensor::vector(x.to_vec()).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.25, -1.5]);
    }
}

#[test]
fn random_net_matches_straight_line_oracle() {
    let mut r = rng();
    let mut m = Mlp::<f64>::new(&[2, 3, 1], Activation::Tanh, &mut r).unwrap();
    for v in m.bias_mut(0).data_mut() {
        *v = r.uniform_range(-0.5, 0.5);
    }
    let xs = [[0.3, -1.2], [2.0, 0.7], [-0.4, 0.0]];
    let batch = Tensor::from_rows(&xs.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap();
    let y = m.forward(&batch).unwrap();
    for (k, x) in xs.iter().enumerate() {
        let want = oracle_forward(&m, x);
        assert!((y.row(k)[0] - want[0]).abs() < 1e-14);
    }
}

#[test]
fn wrong_input_width_is_shape_error() {
    let m = Mlp::<f64>::zeros(&[3, 2], Activation::Tanh).unwrap();
    let err = m.forward(&Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap_err();
    assert!(matches!(err, crate::Error::Shape(_)));
}

#[test]
fn linear_weight_gradient_is_input() {
    let mut m = Mlp::<f64>::zeros(&[1, 1], Activation::Identity).unwrap();
    m.weight_mut(0).data_mut()[0] = 0.7;
    let x = Tensor::vector(vec![3.5]).unwrap();
    let (g, dx) = m.backward(&x, &Tensor::vector(vec![1.0]).unwrap()).unwrap();
    assert_eq!(g.weight(0).data()[0], 3.5);
    assert_eq!(g.bias(0).data()[0], 1.0);
    assert_eq!(dx.data()[0], 0.7);
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn gradient_matches_central_differences() {
    let mut r = rng();
    let mut m = Mlp::<f64>::new(&[4, 8, 8, 2], Activation::Tanh, &mut r).unwrap();
    for l in 0..3 {
        for v in m.bias_mut(l).data_mut() {
            *v = r.uniform_range(-0.3, 0.3);
        }
    }
    let x = Tensor::new(vec![3, 4], r.normals(12)).unwrap();
    let c = Tensor::new(vec![3, 2], r.normals(6)).unwrap();
    let loss = |m: &Mlp<f64>, x: &Tensor<f64>| -> f64 {
        let y = m.forward(x).unwrap();
        y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
    };
    let (g, dx) = m.backward(&x, &c).unwrap();
    let h = 1e-5;
    let base = m.flatten();
    let analytic = g.flatten();
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += h;
        let mut mp = m.clone();
        mp.assign_flat(&p);
        p[i] -= 2.0 * h;
        let mut mm = m.clone();
        mm.assign_flat(&p);
        let fd = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * h);
        assert!(rel_err(analytic[i], fd) <= 1e-4, "param {i}: {} vs {fd}", analytic[i]);
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (loss(&m, &xp) - loss(&m, &xm)) / (2.0 * h);
        assert!(rel_err(dx.data()[i], fd) <= 1e-4);
    }
}

#[test]
fn relu_gradient_matches_central_differences() {
    let mut r = Rng::new(5, 5);
    let m = Mlp::<f64>::new(&[3, 6, 1], Activation::Relu, &mut r).unwrap();
    let x = Tensor::new(vec![2, 3], r.normals(6)).unwrap();
    let up = Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
    let (g, _) = m.backward(&x, &up).unwrap();
    let f = |m: &Mlp<f64>| {
        let y = m.forward(&x).unwrap();
        y.data()[0] - 0.5 * y.data()[1]
    };
    let base = m.flatten();
    for (i, a) in g.flatten().into_iter().enumerate() {
        let mut p = base.clone();
        p[i] += 1e-6;
        let mut mp = m.clone();
        mp.assign_flat(&p);
        p[i] -= 2e-6;
        let mut mm = m.clone();
        mm.assign_flat(&p);
        let fd = (f(&mp) - f(&mm)) / 2e-6;
        assert!((a - fd).abs() < 1e-6);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut r = rng();
    let m = Mlp::<f64>::new(&[3, 5, 2], Activation::Tanh, &mut r).unwrap();
    let x = Tensor::new(vec![4, 3], r.normals(12)).unwrap();
    let (g, dx) = m.backward(&x, &Tensor::zeros(vec![4, 2])).unwrap();
    assert!(g.flatten().iter().all(|&v| v == 0.0));
    assert!(dx.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_backward_are_pure() {
    let mut r = rng();
    let m = Mlp::<f64>::new(&[3, 7, 2], Activation::Tanh, &mut r).unwrap();
    let x = Tensor::new(vec![5, 3], r.normals(15)).unwrap();
    let up = Tensor::new(vec![5, 2], r.normals(10)).unwrap();
    let a = m.backward(&x, &up).unwrap();
    let b = m.backward(&x, &up).unwrap();
    assert_eq!(a.0.content_hash(), b.0.content_hash());
    assert_eq!(a.1, b.1);
    assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
}

#[test]
fn f32_instantiation_runs() {
    let mut r = rng();
    let m = Mlp::<f32>::new(&[2, 4, 1], Activation::Tanh, &mut r).unwrap();
    let y = m.forward(&Tensor::vector(vec![0.5f32, -0.5]).unwrap()).unwrap();
    assert_eq!(y.len(), 1);
}

#[test]
fn checkpoint_fragment_round_trips_exactly() {
    let mut r = rng();
    let m = Mlp::<f64>::new(&[3, 5, 2], Activation::Tanh, &mut r).unwrap();
    let json = serde_json::to_value(&m).unwrap();
    for key in ["layer_sizes", "activation", "weights", "biases"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["activation"], "tanh");
    let back: Mlp<f64> = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(back.content_hash(), m.content_hash());
}

#[test]
fn glorot_bounds_hold() {
    let mut r = rng();
    let m = Mlp::<f64>::new(&[10, 30], Activation::Tanh, &mut r).unwrap();
    let lim = (6.0f64 / 40.0).sqrt();
    assert!(m.weight(0).data().iter().all(|v| v.abs() <= lim));
    assert_eq!(m.param_count(), 10 * 30 + 30);
}

mod adam {
    use super::*;

    fn single(v: f64) -> Mlp<f64> {
        let mut m = Mlp::<f64>::zeros(&[1, 1], Activation::Identity).unwrap();
        m.weight_mut(0).data_mut()[0] = v;
        m
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.3);
        let g = p.zeros_like();
        let mut opt = Adam::new(AdamConfig::with_lr(1e-2));
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.weight(0).data()[0], 0.3);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        for sign in [1.0, -1.0] {
            let mut p = single(0.0);
            let mut g = p.zeros_like();
            g.weight_mut(0).data_mut()[0] = 2.5 * sign;
            let mut opt = Adam::new(AdamConfig::with_lr(1e-2));
            for _ in 0..100 {
                opt.step(&mut p, &g).unwrap();
            }
            assert!(p.weight(0).data()[0] * sign < 0.0);
        }
    }

    #[test]
    fn first_step_closed_form() {
        // From zero state: m_hat = g, v_hat = g^2, so delta = lr * g / (|g| + eps).
        let mut p = single(0.0);
        let mut g = p.zeros_like();
        g.weight_mut(0).data_mut()[0] = 1.0;
        let mut opt = Adam::new(AdamConfig::with_lr(1e-3));
        opt.step(&mut p, &g).unwrap();
        let want = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.weight(0).data()[0] - want).abs() < 1e-18);
        assert!((p.weight(0).data()[0].abs() - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(0.0);
        let mut g = p.zeros_like();
        g.bias_mut(0).data_mut()[0] = f64::NAN;
        let mut opt = Adam::new(AdamConfig::with_lr(1e-3));
        let err = opt.step(&mut p, &g).unwrap_err();
        assert!(err.to_string().contains("layer0.bias"), "{err}");
        assert_eq!(p.weight(0).data()[0], 0.0);
    }
}

#[test]
fn stable_helpers() {
    assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    assert_eq!(sigmoid(0.0), 0.5);
    assert!(sigmoid(-800.0f64) >= 0.0);
    assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
}
