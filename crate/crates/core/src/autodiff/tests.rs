use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::Pose;
use nalgebra::Vector3;

fn rand_tensor(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

fn weights(n: usize, seed: u64) -> Vec<f64> {
    rand_tensor(vec![n], -1.0, 1.0, seed).into_data()
}

/// Reduces `v` to a scalar with fixed random weights so that every entry
/// carries a distinct gradient.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var, AutodiffError> {
    let w = weights(g.value(v).len(), seed);
    let p = g.mul_const(v, w)?;
    g.sum(p)
}

fn check<F>(f: F, inputs: &[Tensor])
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let opts = GradcheckOptions {
        points: 100,
        ..Default::default()
    };
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let report = gradcheck(f, inputs, &opts).unwrap();
    assert!(
        report.checked >= 100.min(total) * 9 / 10,
        "too few coordinates checked: {report:?}"
    );
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn relu_forward_and_backward() {
    let mut g = Graph::new(Precision::Double);
    let x = g.param(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x), vec![0.0, 0.0, 1.0]);
}

#[test]
fn sigmoid_of_zero() {
    let mut g = Graph::new(Precision::Double);
    let x = g.param(&Tensor::scalar(0.0));
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.scalar_value(y), 0.5);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x), vec![0.25]);
}

#[test]
fn conv_of_ones_sums_the_window() {
    let mut g = Graph::new(Precision::Double);
    let data: Vec<f64> = (0..9).map(|v| v as f64).collect();
    let x = g.constant(Tensor::new(vec![1, 1, 3, 3], data).unwrap());
    let w = g.param(&Tensor::filled(vec![1, 1, 3, 3], 1.0));
    let b = g.param(&Tensor::zeros(vec![1]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.scalar_value(y), 36.0);
}

#[test]
fn square_at_three() {
    let mut g = Graph::new(Precision::Double);
    let x = g.param(&Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x), vec![6.0]);
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::new(Precision::Double);
    let x = g.param(&Tensor::scalar(1.5));
    let y = g.add(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x), vec![2.0]);
}

#[test]
fn second_backward_is_an_error() {
    let mut g = Graph::new(Precision::Double);
    let x = g.param(&Tensor::scalar(2.0));
    let y = g.scale(x, 3.0).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.backward(y), Err(AutodiffError::BackwardTwice));
}

#[test]
fn errors_on_bad_input() {
    let mut g = Graph::new(Precision::Double);
    let a = g.param(&Tensor::zeros(vec![2]));
    let b = g.param(&Tensor::zeros(vec![3]));
    assert!(matches!(g.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
    assert!(matches!(g.log(a), Err(AutodiffError::NonFinite { .. })));
    assert!(matches!(g.backward(a), Err(AutodiffError::NotScalar(_))));
}

#[test]
fn single_precision_rounds_values() {
    let mut g = Graph::new(Precision::Single);
    let x = g.constant(Tensor::scalar(0.1));
    assert_eq!(g.scalar_value(x), 0.1f32 as f64);
    let y = g.scale(x, 1.0 / 3.0).unwrap();
    let v = g.scalar_value(y);
    assert_eq!(v, v as f32 as f64);
}

#[test]
fn gradcheck_elementwise() {
    let a = rand_tensor(vec![4, 30], -2.0, 2.0, 1);
    let b = rand_tensor(vec![4, 30], -2.0, 2.0, 2);
    let pos = rand_tensor(vec![4, 30], 0.3, 3.0, 3);
    check(
        |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            let sc = g.scale(m, 0.7)?;
            let sh = g.add_scalar(sc, 0.2)?;
            project(g, sh, 10)
        },
        &[a.clone(), b],
    );
    check(|g, v| { let y = g.abs(v[0])?; project(g, y, 11) }, std::slice::from_ref(&a));
    check(|g, v| { let y = g.relu(v[0])?; project(g, y, 12) }, std::slice::from_ref(&a));
    check(|g, v| { let y = g.sigmoid(v[0])?; project(g, y, 13) }, std::slice::from_ref(&a));
    check(|g, v| { let y = g.log(v[0])?; project(g, y, 14) }, std::slice::from_ref(&pos));
    check(|g, v| { let y = g.reciprocal(v[0])?; project(g, y, 15) }, &[pos]);
    check(
        |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        },
        &[a],
    );
}

#[test]
fn gradcheck_channel_broadcast_concat_reshape() {
    let a = rand_tensor(vec![2, 3, 4, 5], -1.0, 1.0, 4);
    let m = rand_tensor(vec![2, 1, 4, 5], -1.0, 1.0, 5);
    check(
        |g, v| {
            let y = g.mul_channel(v[0], v[1])?;
            let c = g.concat(&[y, v[1]])?;
            let r = g.reshape(c, vec![2, 80])?;
            project(g, r, 16)
        },
        &[a, m],
    );
}

#[test]
fn gradcheck_dropout() {
    let a = rand_tensor(vec![10, 12], -1.0, 1.0, 6);
    check(
        |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let y = g.dropout(v[0], 0.3, &mut rng)?;
            project(g, y, 17)
        },
        &[a],
    );
}

#[test]
fn gradcheck_linear() {
    let x = rand_tensor(vec![3, 8], -1.0, 1.0, 8);
    let w = rand_tensor(vec![5, 8], -1.0, 1.0, 9);
    let b = rand_tensor(vec![5], -1.0, 1.0, 10);
    check(
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, 18)
        },
        &[x, w, b],
    );
}

#[test]
fn gradcheck_conv2d() {
    let x = rand_tensor(vec![2, 2, 7, 6], -1.0, 1.0, 11);
    let w = rand_tensor(vec![3, 2, 3, 3], -1.0, 1.0, 12);
    let b = rand_tensor(vec![3], -1.0, 1.0, 13);
    check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            project(g, y, 19)
        },
        &[x, w, b],
    );
}

#[test]
fn gradcheck_conv_transpose2d() {
    let x = rand_tensor(vec![2, 3, 4, 3], -1.0, 1.0, 14);
    let w = rand_tensor(vec![3, 2, 3, 3], -1.0, 1.0, 15);
    let b = rand_tensor(vec![2], -1.0, 1.0, 16);
    check(
        |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], v[2], 2, 1, (1, 0))?;
            assert_eq!(g.shape(y), &[2, 2, 8, 5]);
            project(g, y, 20)
        },
        &[x, w, b],
    );
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let x = rand_tensor(vec![1, 2, 7, 6], -1.0, 1.0, 17);
    let y = rand_tensor(vec![1, 3, 4, 3], -1.0, 1.0, 18);
    let w = rand_tensor(vec![3, 2, 3, 3], -1.0, 1.0, 19);
    let mut g = Graph::new(Precision::Double);
    let (xv, yv, wv) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(w));
    let b3 = g.constant(Tensor::zeros(vec![3]));
    let b2 = g.constant(Tensor::zeros(vec![2]));
    let cx = g.conv2d(xv, wv, b3, 2, 1).unwrap();
    let ty = g.conv_transpose2d(yv, wv, b2, 2, 1, (0, 1)).unwrap();
    assert_eq!(g.shape(ty), x.shape());
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn gradcheck_batch_norm() {
    let x = rand_tensor(vec![3, 2, 4, 4], -1.0, 2.0, 20);
    let gamma = rand_tensor(vec![2], 0.5, 1.5, 21);
    let beta = rand_tensor(vec![2], -0.5, 0.5, 22);
    check(
        |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 23)
        },
        &[x.clone(), gamma.clone(), beta.clone()],
    );
    check(
        |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.8, 1.3], 1e-5)?;
            project(g, y, 24)
        },
        &[x, gamma, beta],
    );
}

#[test]
fn batch_norm_normalises() {
    let x = rand_tensor(vec![4, 2, 3, 3], -1.0, 5.0, 25);
    let mut g = Graph::new(Precision::Double);
    let xv = g.constant(x);
    let ga = g.constant(Tensor::filled(vec![2], 1.0));
    let be = g.constant(Tensor::zeros(vec![2]));
    let (y, stats) = g.batch_norm_train(xv, ga, be, 0.0).unwrap();
    assert_eq!(stats.count, 36);
    let d = g.value(y).data();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..4).flat_map(|i| d[(i * 2 + ch) * 9..(i * 2 + ch + 1) * 9].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / 36.0;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 36.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
    }
}

#[test]
fn gradcheck_bilinear_sample() {
    let img = rand_tensor(vec![2, 2, 5, 6], -1.0, 1.0, 26);
    let mut coords = rand_tensor(vec![2, 2, 4, 4], 0.0, 1.0, 27);
    for i in 0..2 {
        for p in 0..16 {
            let d = coords.data_mut();
            d[(i * 2) * 16 + p] = d[(i * 2) * 16 + p] * 6.0 - 0.5;
            d[(i * 2 + 1) * 16 + p] = d[(i * 2 + 1) * 16 + p] * 5.0 - 0.5;
        }
    }
    check(
        |g, v| {
            let (y, _) = g.bilinear_sample(v[0], v[1])?;
            project(g, y, 28)
        },
        &[img, coords],
    );
}

#[test]
fn bilinear_sample_matches_raster_sampler() {
    use crate::imaging::{bilinear_sample, ImageBuffer};
    let t = rand_tensor(vec![1, 1, 4, 5], 0.0, 1.0, 29);
    let img = ImageBuffer::new(4, 5, 1, t.data().to_vec()).unwrap();
    let mut g = Graph::new(Precision::Double);
    let iv = g.constant(t);
    let cv = g.constant(Tensor::new(vec![1, 2, 1, 3], vec![1.25, 4.0, 5.5, 0.75, 3.0, 1.0]).unwrap());
    let (y, valid) = g.bilinear_sample(iv, cv).unwrap();
    assert_eq!(valid, vec![true, true, false]);
    for (k, (x, yy)) in [(1.25, 0.75), (4.0, 3.0)].into_iter().enumerate() {
        let (s, ok) = bilinear_sample(&img, x, yy);
        assert!(ok);
        assert!((s[0] - g.value(y).data()[k]).abs() < 1e-15);
    }
    assert_eq!(g.value(y).data()[2], 0.0);
}

#[test]
fn gradcheck_se3_exp_and_compose() {
    let twist = rand_tensor(vec![3, 6], -0.5, 0.5, 30);
    let right = vec![
        Pose::from_axis_angle(Vector3::new(0.0, 1.0, 0.0), 0.3).with_translation(Vector3::new(0.1, 0.2, 1.0)),
        Pose::identity(),
        Pose::from_axis_angle(Vector3::new(1.0, 0.0, 0.0), -0.2),
    ];
    check(
        |g, v| {
            let p = g.se3_exp(v[0])?;
            let c = g.compose_right(p, &right)?;
            project(g, c, 31)
        },
        &[twist],
    );
}

#[test]
fn se3_exp_matches_geometry() {
    use crate::geometry::{exp_se3, Twist};
    let xi = [0.1, -0.3, 0.5, 0.2, 0.4, -0.1];
    let mut g = Graph::new(Precision::Double);
    let t = g.constant(Tensor::new(vec![1, 6], xi.to_vec()).unwrap());
    let p = g.se3_exp(t).unwrap();
    let want = exp_se3(&Twist::from_array(xi)).to_rows();
    for (a, b) in g.value(p).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn gradcheck_warp_coords() {
    let k = Intrinsics::new(6.0, 5.5, 3.4, 2.6, 6, 7).unwrap();
    let pose = Pose::from_axis_angle(Vector3::new(0.2, 1.0, 0.1).normalize(), 0.1)
        .with_translation(Vector3::new(0.1, -0.05, 0.3));
    let mut rows = pose.to_rows().to_vec();
    rows.extend(Pose::identity().to_rows());
    let pose_t = Tensor::new(vec![2, 12], rows).unwrap();
    let depth = rand_tensor(vec![2, 1, 6, 7], 1.0, 4.0, 32);
    check(
        |g, v| {
            let out = g.warp_coords(v[0], v[1], &k)?;
            project(g, out.coords, 33)
        },
        &[pose_t, depth],
    );
}

#[test]
fn warp_coords_matches_projection() {
    use crate::imaging::{backproject, project as cam_project};
    use nalgebra::Vector2;
    let k = Intrinsics::new(6.0, 5.5, 3.4, 2.6, 6, 7).unwrap();
    let pose = Pose::from_axis_angle(Vector3::new(0.0, 1.0, 0.0), 0.05)
        .with_translation(Vector3::new(0.1, 0.0, -0.2));
    let mut g = Graph::new(Precision::Double);
    let p = g.constant(Tensor::new(vec![1, 12], pose.to_rows().to_vec()).unwrap());
    let d = g.constant(Tensor::filled(vec![1, 1, 6, 7], 2.0));
    let out = g.warp_coords(p, d, &k).unwrap();
    assert!(out.valid.iter().all(|v| *v));
    let c = g.value(out.coords).data();
    for y in 0..6 {
        for x in 0..7 {
            let q = pose.transform_point(&backproject(Vector2::new(x as f64, y as f64), 2.0, &k).unwrap());
            let uv = cam_project(q, &k).unwrap();
            assert!((c[y * 7 + x] - uv.x).abs() < 1e-12);
            assert!((c[42 + y * 7 + x] - uv.y).abs() < 1e-12);
        }
    }
}

#[test]
fn warp_behind_camera_is_invalid() {
    let k = Intrinsics::new(6.0, 5.5, 3.4, 2.6, 6, 7).unwrap();
    let pose = Pose::from_translation(Vector3::new(0.0, 0.0, -5.0));
    let mut g = Graph::new(Precision::Double);
    let p = g.param(&Tensor::new(vec![1, 12], pose.to_rows().to_vec()).unwrap());
    let d = g.param(&Tensor::filled(vec![1, 1, 6, 7], 2.0));
    let out = g.warp_coords(p, d, &k).unwrap();
    assert!(out.valid.iter().all(|v| !*v));
    let s = g.sum(out.coords).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(d).iter().all(|v| *v == 0.0));
}

#[test]
fn replayed_branches_extend_the_recorded_piece() {
    let run = |x: Vec<f64>, record: Option<BranchRecord>| {
        let mut g = Graph::new(Precision::Double);
        match &record {
            Some(r) => g.replay_branches(r.clone()),
            None => g.record_branches(),
        }
        let v = g.constant(Tensor::new(vec![x.len()], x).unwrap());
        let r = g.relu(v)?;
        let a = g.abs(v)?;
        let s = g.add(r, a)?;
        let out = g.value(s).data().to_vec();
        Ok::<_, AutodiffError>((out, g.take_branch_record(), g.branch_signature()))
    };
    let (base, record, sig) = run(vec![-1.0, 0.0, 2.0], None).unwrap();
    assert_eq!(base, vec![1.0, 0.0, 4.0]);
    let (moved, _, moved_sig) = run(vec![1.0, -0.5, -2.0], Some(record.clone())).unwrap();
    assert_eq!(moved, vec![-1.0, 0.0, -4.0]);
    assert_eq!(moved_sig, sig);
    assert!(matches!(
        run(vec![1.0, 2.0], Some(record)),
        Err(AutodiffError::ReplayMismatch { op: "relu" })
    ));
}
