use super::*;
use crate::error::Error;
use crate::test_support::{max_grad_err, rand_tensor, FD_STEP, OP_TOL};

/// `sum(w * x)` with fixed random weights so every output element matters.
fn weighted_sum(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let w = rand_tensor(g.value(x).dims(), seed);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

#[test]
fn conv_of_ones_is_kernel_sum() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y).dims(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut g = Graph::new();
    let xt = rand_tensor(&[2, 1, 5, 4], 3);
    let x = g.constant(xt.clone());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn conv_output_arithmetic() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 64, 64]));
    let w = g.constant(Tensor::zeros(&[8, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[8]));
    let y = g.conv2d(x, w, b, 2, 1).unwrap();
    assert_eq!(g.value(y).dims(), &[8, 32, 32]);
}

#[test]
fn conv_shape_errors_name_dims() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 6, 6]));
    let w = g.constant(Tensor::zeros(&[3, 4, 3, 3]));
    let b = g.constant(Tensor::zeros(&[3]));
    let err = g.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
    assert!(err.contains("Cin=2") && err.contains("Cin=4"), "{err}");
    let w2 = g.constant(Tensor::zeros(&[3, 2, 2, 2]));
    assert!(g.conv2d(x, w2, b, 1, 1).is_err());
    let w3 = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
    assert!(g.conv2d(x, w3, b, 3, 1).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    let inputs = [
        rand_tensor(&[1, 2, 6, 6], 1),
        rand_tensor(&[3, 2, 3, 3], 2),
        rand_tensor(&[3], 3),
    ];
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let err = max_grad_err(&inputs, FD_STEP, 1.0, None, |g, ids| {
            g.conv2d(ids[0], ids[1], ids[2], stride, pad).unwrap()
        });
        assert!(err < OP_TOL, "stride {stride} pad {pad}: {err}");
        let err = max_grad_err(&inputs, FD_STEP, 1.0, Some(9), |g, ids| {
            g.conv2d(ids[0], ids[1], ids[2], stride, pad).unwrap()
        });
        assert!(err < OP_TOL, "weighted, stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn grid_sample_identity_and_midpoint() {
    let mut g = Graph::new();
    let mt = rand_tensor(&[2, 3, 4], 5);
    let map = g.constant(mt.clone());
    let coords = Tensor::from_fn(&[2, 3, 4], |i| {
        let p = i % 12;
        if i < 12 {
            (p % 4) as Real
        } else {
            (p / 4) as Real
        }
    });
    let c = g.constant(coords);
    let (out, valid) = g.grid_sample_bilinear(map, c).unwrap();
    assert_eq!(g.value(out), &mt);
    assert!(valid.iter().all(|&v| v));

    let m = g.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap());
    let c = g.constant(Tensor::new(vec![2, 1, 1], vec![0.5, 0.0]).unwrap());
    let (out, _) = g.grid_sample_bilinear(m, c).unwrap();
    assert!((g.value(out).item() - 0.5).abs() < 1e-7);
}

#[test]
fn grid_sample_out_of_bounds_is_zero_and_invalid() {
    let mut g = Graph::new();
    let map = g.constant(Tensor::full(&[1, 4, 4], 2.0));
    let c = g.constant(Tensor::new(vec![2, 1, 3], vec![-0.1, 3.0, 3.01, 1.0, 1.0, 1.0]).unwrap());
    let (out, valid) = g.grid_sample_bilinear(map, c).unwrap();
    assert_eq!(valid, vec![false, true, false]);
    assert_eq!(g.value(out).data(), &[0.0, 2.0, 0.0]);
}

#[test]
fn grid_sample_coordinate_gradient_on_ramp() {
    let mut g = Graph::new();
    let m = g.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap());
    let c = g.param(Tensor::new(vec![2, 1, 1], vec![0.5, 0.0]).unwrap());
    let (out, _) = g.grid_sample_bilinear(m, c).unwrap();
    let s = g.sum(out);
    g.backward(s).unwrap();
    let gc = g.grad(c).unwrap();
    assert!((gc.data()[0] - 1.0).abs() < 1e-6);

    let err = max_grad_err(
        &[Tensor::new(vec![2, 1, 1], vec![0.5, 0.0]).unwrap()],
        FD_STEP,
        1.0,
        None,
        |g, ids| {
            let m = g.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap());
            g.grid_sample_bilinear(m, ids[0]).unwrap().0
        },
    );
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn grid_sample_gradients_match_finite_differences() {
    let map = rand_tensor(&[3, 5, 6], 11);
    // Keep coordinates inside the map and away from integer cell borders.
    let mut coords = rand_tensor(&[2, 4, 4], 12);
    for (i, v) in coords.data_mut().iter_mut().enumerate() {
        let span = if i < 16 { 4.0 } else { 3.0 };
        *v = (0.1 + (*v + 1.0) * 0.5 * (span - 0.2)) as Real;
        if (*v - v.round()).abs() < 0.01 {
            *v += 0.05;
        }
    }
    let err = max_grad_err(&[map, coords], FD_STEP, 1.0, Some(13), |g, ids| {
        g.grid_sample_bilinear(ids[0], ids[1]).unwrap().0
    });
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn spatial_gradient_ramp_and_constant() {
    let mut g = Graph::new();
    let ramp = g.constant(Tensor::from_fn(&[1, 4, 5], |i| (i % 5) as Real));
    let (du, dv) = g.spatial_gradient(ramp).unwrap();
    assert!(g.value(du).data().iter().all(|&v| v == 1.0));
    assert!(g.value(dv).data().iter().all(|&v| v == 0.0));
    let k = g.constant(Tensor::full(&[2, 3, 3], 0.7));
    let (du, dv) = g.spatial_gradient(k).unwrap();
    assert_eq!(g.value(du).max_abs(), 0.0);
    assert_eq!(g.value(dv).max_abs(), 0.0);
    let thin = g.constant(Tensor::zeros(&[1, 1, 4]));
    assert!(g.spatial_gradient(thin).is_err());
}

#[test]
fn spatial_gradient_matches_direct_table() {
    let t = rand_tensor(&[1, 5, 5], 21);
    let at = |y: i64, x: i64| t.data()[(y * 5 + x) as usize] as f64;
    let mut g = Graph::new();
    let id = g.constant(t.clone());
    let (du, dv) = g.spatial_gradient(id).unwrap();
    for y in 0..5i64 {
        for x in 0..5i64 {
            let eu = match x {
                0 => at(y, 1) - at(y, 0),
                4 => at(y, 4) - at(y, 3),
                _ => (at(y, x + 1) - at(y, x - 1)) / 2.0,
            };
            let ev = match y {
                0 => at(1, x) - at(0, x),
                4 => at(4, x) - at(3, x),
                _ => (at(y + 1, x) - at(y - 1, x)) / 2.0,
            };
            let i = (y * 5 + x) as usize;
            assert!((g.value(du).data()[i] as f64 - eu).abs() < 1e-6);
            assert!((g.value(dv).data()[i] as f64 - ev).abs() < 1e-6);
        }
    }
    let err = max_grad_err(&[t], FD_STEP, 1.0, Some(1), |g, ids| {
        let (du, dv) = g.spatial_gradient(ids[0]).unwrap();
        g.concat_channels(du, dv).unwrap()
    });
    assert!(err < OP_TOL, "{err}");
}

fn solve_values(a: &[f64; 9], b: [f64; 3]) -> Result<Vec<f64>, Error> {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![3, 3], a.iter().map(|&v| v as Real).collect()).unwrap());
    let b = g.constant(Tensor::from_vec(b.iter().map(|&v| v as Real).collect()));
    let x = g.solve3(a, b)?;
    Ok(g.value(x).data().iter().map(|&v| v as f64).collect())
}

/// Gaussian elimination with partial pivoting, the independent oracle.
fn gauss_solve(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

#[test]
fn solve3_unit_cases() {
    let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    assert_eq!(
        solve_values(&id, [1.0, 2.0, 3.0]).unwrap(),
        vec![1.0, 2.0, 3.0]
    );
    let d = [2.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 8.0];
    assert_eq!(
        solve_values(&d, [2.0, 4.0, 8.0]).unwrap(),
        vec![1.0, 1.0, 1.0]
    );
}

#[test]
fn solve3_matches_elimination_on_random_spd() {
    for seed in 0..50 {
        let m = rand_tensor(&[3, 3], 100 + seed);
        let m: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
        let mut a = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = (0..3).map(|k| m[3 * k + i] * m[3 * k + j]).sum::<f64>()
                    + if i == j { 1.0 } else { 0.0 };
            }
        }
        // Round through storage precision so both solvers see the same matrix.
        let a_r: [f64; 9] = std::array::from_fn(|k| a[k / 3][k % 3] as Real as f64);
        let a_sym: [[f64; 3]; 3] = std::array::from_fn(|i| {
            std::array::from_fn(|j| 0.5 * (a_r[3 * i + j] + a_r[3 * j + i]))
        });
        let b = [0.3, -1.2, 0.7];
        let x = solve_values(&a_r, b).unwrap();
        let oracle = gauss_solve(a_sym, b);
        for i in 0..3 {
            assert!(
                (x[i] - oracle[i]).abs() < 1e-6,
                "seed {seed}: {x:?} vs {oracle:?}"
            );
        }
    }
}

#[test]
fn solve3_regularizes_then_fails_on_zero() {
    // Rank-deficient but with positive trace: the Tikhonov floor rescues it.
    let a = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let x = solve_values(&a, [1.0, 1.0, 1.0]).unwrap();
    assert!(x.iter().all(|v| v.is_finite()));
    let z = [0.0; 9];
    assert!(matches!(
        solve_values(&z, [1.0, 0.0, 0.0]),
        Err(Error::SingularSystem { .. })
    ));
    let asym = [1.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    assert!(matches!(
        solve_values(&asym, [1.0, 0.0, 0.0]),
        Err(Error::NotSymmetric(_))
    ));
}

#[test]
fn solve3_gradients_match_finite_differences() {
    let a = Tensor::new(
        vec![3, 3],
        vec![3.0, 0.5, 0.2, 0.5, 2.0, -0.3, 0.2, -0.3, 1.5],
    )
    .unwrap();
    let b = Tensor::from_vec(vec![0.4, -0.7, 1.1]);
    // Perturbing a single off-diagonal entry breaks symmetry, so build the
    // matrix as (M + M^T)/2 inside the graph.
    let err = max_grad_err(&[a, b], FD_STEP, 1.0, Some(31), |g, ids| {
        let m = g.value(ids[0]).clone();
        let mut tdata = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                tdata[3 * i + j] = m.data()[3 * j + i];
            }
        }
        // Transpose via stack of indexed entries keeps the graph connected.
        let entries: Vec<NodeId> = (0..9)
            .map(|k| g.index(ids[0], 3 * (k % 3) + k / 3).unwrap())
            .collect();
        let t = g.stack(&entries).unwrap();
        let t = g.reshape(t, &[3, 3]).unwrap();
        assert_eq!(g.value(t).data(), &tdata[..]);
        let s = g.add(ids[0], t).unwrap();
        let s = g.scale(s, 0.5);
        g.solve3(s, ids[1]).unwrap()
    });
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn elementwise_family() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![-1.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);
    let m = g.constant(Tensor::full(&[2, 2, 2], 3.0));
    let mm = g.mean_masked(m, &[false; 4]).unwrap();
    assert_eq!(g.value(mm).item(), 0.0);
    let mm = g.mean_masked(m, &[true, false, true, false]).unwrap();
    assert_eq!(g.value(mm).item(), 6.0);
    let a = g.constant(Tensor::zeros(&[2, 3, 3]));
    let b = g.constant(Tensor::zeros(&[3, 3, 3]));
    let cat = g.concat_channels(a, b).unwrap();
    assert_eq!(g.value(cat).dims(), &[5, 3, 3]);
    let c = g.constant(Tensor::zeros(&[1, 2, 3]));
    assert!(g.concat_channels(a, c).is_err());
    assert!(g.add(a, b).is_err());
    let u = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
    let up = g.upsample2x_nearest(u).unwrap();
    assert_eq!(
        g.value(up).data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]
    );
    let p = g.pad_edge(u, 1).unwrap();
    assert_eq!(g.value(p).dims(), &[1, 3, 4]);
    assert_eq!(
        g.value(p).data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]
    );
    let w = g.constant(Tensor::from_vec(vec![7.0]));
    let w = g.wrap_angle(w);
    assert!((g.value(w).item() as f64 - (7.0 - 2.0 * std::f64::consts::PI)).abs() < 1e-6);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let a = rand_tensor(&[2, 3, 4], 41);
    let b = rand_tensor(&[2, 3, 4], 42);
    let m = rand_tensor(&[1, 3, 4], 43);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;
    let cases: Vec<(&str, Build)> = vec![
        ("add", Box::new(|g, ids| g.add(ids[0], ids[1]).unwrap())),
        ("sub", Box::new(|g, ids| g.sub(ids[0], ids[1]).unwrap())),
        ("mul", Box::new(|g, ids| g.mul(ids[0], ids[1]).unwrap())),
        ("relu", Box::new(|g, ids| g.relu(ids[0]))),
        (
            "mul_bcast",
            Box::new(|g, ids| g.mul_bcast(ids[0], ids[2]).unwrap()),
        ),
        ("scale", Box::new(|g, ids| g.scale(ids[1], 1.5))),
        (
            "concat",
            Box::new(|g, ids| g.concat_channels(ids[0], ids[2]).unwrap()),
        ),
        (
            "upsample",
            Box::new(|g, ids| g.upsample2x_nearest(ids[1]).unwrap()),
        ),
        (
            "pad_edge",
            Box::new(|g, ids| g.pad_edge(ids[1], 2).unwrap()),
        ),
        (
            "mean_masked",
            Box::new(move |g, ids| g.mean_masked(ids[0], &mask).unwrap()),
        ),
        ("channel", Box::new(|g, ids| g.channel(ids[1], 1).unwrap())),
        ("norm", Box::new(|g, ids| g.norm(ids[2]))),
        ("abs", Box::new(|g, ids| g.abs(ids[0]))),
        ("wrap_angle", Box::new(|g, ids| g.wrap_angle(ids[0]))),
        ("slice", Box::new(|g, ids| g.slice(ids[0], 3, 5).unwrap())),
        (
            "stack",
            Box::new(|g, ids| {
                let i = g.index(ids[0], 2).unwrap();
                let j = g.index(ids[1], 7).unwrap();
                g.stack(&[i, j, i]).unwrap()
            }),
        ),
    ];
    let inputs = [a, b, m];
    for (name, build) in cases {
        for weights in [None, Some(44)] {
            let err = max_grad_err(&inputs, FD_STEP, 1.0, weights, &build);
            assert!(err < OP_TOL, "{name}: {err}");
        }
    }
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut g = Graph::new();
    let x = g.param(rand_tensor(&[3, 2], 51));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    let err = max_grad_err(&[rand_tensor(&[3, 2], 51)], FD_STEP, 1.0, None, |g, ids| {
        g.sum(ids[0])
    });
    assert!(err < OP_TOL, "{err}");
}

#[test]
fn backward_quadratic_and_linearity() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

    let mut g = Graph::new();
    let a = g.param(Tensor::from_vec(vec![1.0, -3.0]));
    let b = g.param(Tensor::from_vec(vec![0.5, 0.25]));
    let s = g.add(a, b).unwrap();
    let s = g.scale(s, 0.75);
    let l = g.sum(s);
    g.backward(l).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[0.75, 0.75]);
    assert_eq!(g.grad(b).unwrap().data(), &[0.75, 0.75]);
}

#[test]
fn backward_contract_errors() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(Error::BackwardTwice)));
    g.reset_grads();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::from_vec(vec![1.0]));
    let p = g.param(Tensor::from_vec(vec![2.0]));
    let m = g.mul(c, p).unwrap();
    let l = g.sum(m);
    g.backward(l).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(p).unwrap().data(), &[1.0]);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(rand_tensor(&[1, 2, 8, 8], 61));
        let w = g.param(rand_tensor(&[4, 2, 3, 3], 62));
        let b = g.param(rand_tensor(&[4], 63));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        let l = weighted_sum(&mut g, y, 64);
        g.backward(l).unwrap();
        (g.value(l).clone(), g.grad(x).unwrap(), g.grad(w).unwrap())
    };
    assert_eq!(run(), run());
}
