use mqf2_autodiff::{linalg, sigmoid, softplus, AutodiffError, Bindings, Graph, NodeId, Tensor};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn row(v: &[f64]) -> Tensor {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
}

fn scalar_of(g: &Graph, id: NodeId, b: &Bindings) -> f64 {
    g.evaluate(id, b).unwrap()[[0, 0]]
}

#[test]
fn evaluate_dot_product() {
    let mut g = Graph::new();
    let x = g.input("x", 1, 2);
    let y = g.input("y", 1, 2);
    let d = g.dot(x, y);
    let mut b = Bindings::new(&g);
    b.set(&g, "x", row(&[1.0, 2.0])).unwrap();
    b.set(&g, "y", row(&[3.0, 4.0])).unwrap();
    assert_eq!(scalar_of(&g, d, &b), 11.0);
}

#[test]
fn evaluate_softplus_at_zero() {
    let mut g = Graph::new();
    let z = g.scalar(0.0);
    let s = g.softplus(z);
    let b = Bindings::new(&g);
    assert!((scalar_of(&g, s, &b) - 2f64.ln()).abs() < 1e-15);
    assert!((scalar_of(&g, s, &b) - 0.693147).abs() < 1e-6);
}

#[test]
fn evaluate_squared_norm() {
    let mut g = Graph::new();
    let v = g.input("v", 1, 2);
    let n = g.sq_norm(v);
    let mut b = Bindings::new(&g);
    b.set(&g, "v", row(&[3.0, 4.0])).unwrap();
    assert_eq!(scalar_of(&g, n, &b), 25.0);
}

#[test]
fn evaluate_reports_unbound_and_misshaped_leaves() {
    let mut g = Graph::new();
    let x = g.input("x", 1, 2);
    let s = g.sum(x);
    let b = Bindings::new(&g);
    assert!(matches!(g.evaluate(s, &b), Err(AutodiffError::Unbound(name)) if name == "x"));
    let mut b = Bindings::new(&g);
    let err = b.set(&g, "x", row(&[1.0, 2.0, 3.0])).unwrap_err();
    assert!(matches!(err, AutodiffError::BindingShape { .. }));
    assert!(matches!(
        b.set(&g, "nope", row(&[1.0])),
        Err(AutodiffError::UnknownLeaf(_))
    ));
}

#[test]
#[should_panic(expected = "shape mismatch")]
fn construction_rejects_shape_mismatch() {
    let mut g = Graph::new();
    let x = g.input("x", 1, 2);
    let y = g.input("y", 1, 3);
    g.add(x, y);
}

#[test]
fn derivative_of_square() {
    let mut g = Graph::new();
    let x = g.parameter("x", 1, 1);
    let x2 = g.mul(x, x);
    let dx = g.gradient(x2, &[x]).unwrap()[0];
    let mut b = Bindings::new(&g);
    b.set(&g, "x", row(&[3.0])).unwrap();
    assert_eq!(scalar_of(&g, dx, &b), 6.0);
}

#[test]
fn second_derivative_of_cube() {
    let mut g = Graph::new();
    let x = g.parameter("x", 1, 1);
    let x2 = g.mul(x, x);
    let x3 = g.mul(x2, x);
    let dx = g.gradient(x3, &[x]).unwrap()[0];
    let d2x = g.gradient(dx, &[x]).unwrap()[0];
    let mut b = Bindings::new(&g);
    b.set(&g, "x", row(&[2.0])).unwrap();
    assert_eq!(scalar_of(&g, dx, &b), 12.0);
    assert_eq!(scalar_of(&g, d2x, &b), 12.0);
}

#[test]
fn gradient_of_softplus_of_dot() {
    let mut g = Graph::new();
    let w = g.parameter("w", 1, 2);
    let x = g.input("x", 1, 2);
    let d = g.dot(w, x);
    let f = g.softplus(d);
    let dw = g.gradient(f, &[w]).unwrap()[0];
    let mut b = Bindings::new(&g);
    b.set(&g, "w", row(&[1.0, 0.0])).unwrap();
    b.set(&g, "x", row(&[2.0, 1.0])).unwrap();
    let got = g.evaluate(dw, &b).unwrap();

    // Central differences, step 1e-5.
    let h = 1e-5;
    let f_at = |w0: f64, w1: f64| softplus(2.0 * w0 + w1);
    let fd = [
        (f_at(1.0 + h, 0.0) - f_at(1.0 - h, 0.0)) / (2.0 * h),
        (f_at(1.0, h) - f_at(1.0, -h)) / (2.0 * h),
    ];
    let expected = [sigmoid(2.0) * 2.0, sigmoid(2.0)];
    for k in 0..2 {
        assert!((got[[0, k]] - fd[k]).abs() < 1e-9);
        assert!((got[[0, k]] - expected[k]).abs() < 1e-14);
    }
}

#[test]
fn gradient_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.parameter("x", 1, 2);
    let y = g.softplus(x);
    assert!(matches!(g.gradient(y, &[x]), Err(AutodiffError::NonScalarRoot(_))));
}

#[test]
fn gradient_of_unrelated_leaf_is_zero() {
    let mut g = Graph::new();
    let x = g.parameter("x", 1, 2);
    let y = g.parameter("y", 2, 2);
    let s = g.sum(x);
    let dy = g.gradient(s, &[y]).unwrap()[0];
    let mut b = Bindings::new(&g);
    b.set(&g, "x", row(&[1.0, 1.0])).unwrap();
    b.set(&g, "y", Array2::ones((2, 2))).unwrap();
    assert_eq!(g.evaluate(dy, &b).unwrap(), Array2::<f64>::zeros((2, 2)));
}

#[test]
fn hessian_of_half_squared_norm_is_identity() {
    let mut g = Graph::new();
    let x = g.parameter("x", 1, 4);
    let sq = g.sq_norm(x);
    let f = g.scale(sq, 0.5);
    let h = g.hessian(f, x).unwrap();
    let mut b = Bindings::new(&g);
    b.set(&g, "x", row(&[0.3, -1.0, 2.0, 5.0])).unwrap();
    assert_eq!(g.evaluate(h, &b).unwrap(), Array2::<f64>::eye(4));
}

#[test]
fn hessian_of_x1_squared_x2() {
    let mut g = Graph::new();
    let x = g.parameter("x", 1, 2);
    let x1 = g.index(x, 0, 0);
    let x2 = g.index(x, 0, 1);
    let x1sq = g.mul(x1, x1);
    let f = g.mul(x1sq, x2);
    let h = g.hessian(f, x).unwrap();
    let mut b = Bindings::new(&g);
    b.set(&g, "x", row(&[1.0, 1.0])).unwrap();
    assert_eq!(g.evaluate(h, &b).unwrap(), array![[2.0, 2.0], [2.0, 0.0]]);
}

#[test]
fn hessian_dimension_cap() {
    let mut g = Graph::new();
    let x = g.parameter("x", 1, 65);
    let f = g.sq_norm(x);
    assert!(matches!(
        g.hessian(f, x),
        Err(AutodiffError::HessianTooLarge { dim: 65, cap: 64 })
    ));
    let y = g.parameter("y", 1, 3);
    let fy = g.sq_norm(y);
    assert!(g.hessian_with_cap(fy, y, 2).is_err());
}

#[test]
fn logdet_gradient_is_inverse() {
    let mut g = Graph::new();
    let a = g.parameter("a", 2, 2);
    let ld = g.logdet_spd(a);
    let da = g.gradient(ld, &[a]).unwrap()[0];
    let mut b = Bindings::new(&g);
    let m = array![[4.0, 1.0], [1.0, 3.0]];
    b.set(&g, "a", m.clone()).unwrap();
    let vals = g.evaluate_many(&[ld, da], &b).unwrap();
    assert!((vals[0][[0, 0]] - 11f64.ln()).abs() < 1e-14);
    let inv = linalg::inverse_from_cholesky(&linalg::cholesky(&m).unwrap());
    for (x, y) in vals[1].iter().zip(inv.iter()) {
        assert!((x - y).abs() < 1e-14);
    }
    b.set(&g, "a", array![[1.0, 2.0], [2.0, 1.0]]).unwrap();
    assert!(matches!(
        g.evaluate(ld, &b),
        Err(AutodiffError::NotPositiveDefinite { .. })
    ));
}

#[test]
fn nested_gradients_of_polynomials_are_exact() {
    // f(x, y) = x³y² + 4xy; ∂²f/∂x² = 6xy², ∂²f/∂x∂y = 6x²y + 4.
    let mut g = Graph::new();
    let x = g.parameter("x", 1, 1);
    let y = g.parameter("y", 1, 1);
    let x3 = g.powf(x, 3.0);
    let y2 = g.mul(y, y);
    let t1 = g.mul(x3, y2);
    let xy = g.mul(x, y);
    let t2 = g.scale(xy, 4.0);
    let f = g.add(t1, t2);
    let fx = g.gradient(f, &[x]).unwrap()[0];
    let grads = g.gradient(fx, &[x, y]).unwrap();
    let mut b = Bindings::new(&g);
    for &(xv, yv) in &[(1.5, -0.5), (2.0, 3.0), (-0.7, 0.2)] {
        b.set(&g, "x", row(&[xv])).unwrap();
        b.set(&g, "y", row(&[yv])).unwrap();
        let fxx = scalar_of(&g, grads[0], &b);
        let fxy = scalar_of(&g, grads[1], &b);
        let want_xx: f64 = 6.0 * xv * yv * yv;
        let want_xy: f64 = 6.0 * xv * xv * yv + 4.0;
        assert!((fxx - want_xx).abs() <= 1e-10 * (1.0 + want_xx.abs()));
        assert!((fxy - want_xy).abs() <= 1e-10 * (1.0 + want_xy.abs()));
    }
}

#[test]
fn structurally_equal_nodes_are_shared() {
    let mut g = Graph::new();
    let x = g.input("x", 1, 3);
    let a = g.softplus(x);
    let b = g.softplus(x);
    assert_eq!(a, b);
    let before = g.len();
    let _ = g.add(a, b);
    let _ = g.add(b, a);
    assert_eq!(g.len(), before + 1);
}

// ---------------------------------------------------------------------------
// Random smooth graphs against central finite differences.

struct RandomGraph {
    graph: Graph,
    root: NodeId,
    leaves: Vec<(&'static str, usize, usize)>,
}

fn random_graph(rng: &mut ChaCha8Rng) -> RandomGraph {
    let mut g = Graph::new();
    let x = g.parameter("x", 1, 3);
    let y = g.parameter("y", 1, 3);
    let w = g.parameter("w", 3, 3);
    let mut pool = vec![x, y];
    let steps = rng.random_range(2..8);
    for _ in 0..steps {
        let a = pool[rng.random_range(0..pool.len())];
        let b = pool[rng.random_range(0..pool.len())];
        let node = match rng.random_range(0..12) {
            0 => g.add(a, b),
            1 => g.sub(a, b),
            2 => g.mul(a, b),
            3 => g.softplus(a),
            4 => g.sigmoid(a),
            5 => g.tanh(a),
            6 => {
                let t = g.tanh(a);
                g.exp(t)
            }
            7 => g.matmul(a, w),
            8 => {
                let s = g.softplus(a);
                let s = g.offset(s, 0.5);
                g.log(s)
            }
            9 => {
                let s = g.softplus(a);
                let s = g.offset(s, 0.1);
                g.powf(s, 1.5)
            }
            10 => {
                let d = g.pairwise_dist(a, b);
                let d = g.offset(d, 1.0);
                g.broadcast_scalar(d, mqf2_autodiff::Shape::new(1, 3))
            }
            _ => {
                let s = g.scale(a, rng.random_range(-2.0..2.0));
                g.offset(s, rng.random_range(-1.0..1.0))
            }
        };
        pool.push(node);
    }
    let last = *pool.last().unwrap();
    let other = pool[rng.random_range(0..pool.len())];
    let root = g.dot(last, other);
    RandomGraph {
        graph: g,
        root,
        leaves: vec![("x", 1, 3), ("y", 1, 3), ("w", 3, 3)],
    }
}

fn random_bindings(rg: &RandomGraph, rng: &mut ChaCha8Rng) -> Bindings {
    let mut b = Bindings::new(&rg.graph);
    for &(name, r, c) in &rg.leaves {
        let t = Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        b.set(&rg.graph, name, t).unwrap();
    }
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rg = random_graph(&mut rng);
        let b = random_bindings(&rg, &mut rng);
        let ids: Vec<NodeId> = rg.leaves.iter().map(|(n, _, _)| rg.graph.leaf_by_name(n).unwrap().node).collect();
        let grads = rg.graph.gradient(rg.root, &ids).unwrap();
        let h = 1e-5;
        for (k, &(name, _, _)) in rg.leaves.iter().enumerate() {
            let analytic = rg.graph.evaluate(grads[k], &b).unwrap();
            let base = b.get(&rg.graph, name).unwrap().clone();
            for idx in 0..base.len() {
                let (i, j) = (idx / base.ncols(), idx % base.ncols());
                let mut bp = b.clone();
                let mut plus = base.clone();
                plus[[i, j]] += h;
                bp.set(&rg.graph, name, plus).unwrap();
                let fp = scalar_of(&rg.graph, rg.root, &bp);
                let mut minus = base.clone();
                minus[[i, j]] -= h;
                bp.set(&rg.graph, name, minus).unwrap();
                let fm = scalar_of(&rg.graph, rg.root, &bp);
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic[[i, j]];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                prop_assert!(rel <= 1e-4, "{name}[{i},{j}]: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn hessian_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rg = random_graph(&mut rng);
        let b = random_bindings(&rg, &mut rng);
        let x = rg.graph.leaf_by_name("x").unwrap().node;
        let h = rg.graph.hessian(rg.root, x).unwrap();
        let hv = rg.graph.evaluate(h, &b).unwrap();
        let max = hv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((hv[[i, j]] - hv[[j, i]]).abs() <= 1e-8 * (1.0 + max));
            }
        }
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    // Exercises the row-manipulation ops, pairwise distances and the SPD
    // inverse, none of which appear in the random generator above.
    let mut g = Graph::new();
    let a = g.parameter("a", 2, 3);
    let m = g.parameter("m", 2, 2);
    let rep = g.repeat_rows(a, 3); // 6x3
    let sq = g.softplus(rep);
    let grouped = g.sum_row_groups(sq, 2); // 3x3
    let top = g.slice_rows(grouped, 1, 2); // 2x3
    let cat = g.concat_rows(&[top, a]); // 4x3
    let padded = g.pad_rows(a, 1, 4); // 4x3
    let both = g.add(cat, padded);
    let d = g.pairwise_dist(both, a); // 4x2
    let t = g.transpose(d); // 2x4
    let tt = g.matmul(t, d); // 2x2
    let mt = g.transpose(m);
    let mm = g.matmul(m, mt);
    let eye = g.constant(Array2::eye(2));
    let spd = g.add(mm, eye);
    let inv = g.inverse_spd(spd);
    let prod = g.mul(inv, tt);
    let e = g.index(prod, 1, 0);
    let sc = g.scatter(e, 0, 1, mqf2_autodiff::Shape::new(2, 2));
    let ld = g.logdet_spd(spd);
    let s1 = g.sum(prod);
    let s2 = g.sum(sc);
    let s12 = g.add(s1, s2);
    let root = g.add(s12, ld);
    let grads = g.gradient(root, &[a, m]).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut b = Bindings::new(&g);
    b.set(&g, "a", Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0))).unwrap();
    b.set(&g, "m", Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0))).unwrap();
    let h = 1e-5;
    for (k, name) in ["a", "m"].iter().enumerate() {
        let analytic = g.evaluate(grads[k], &b).unwrap();
        let base = b.get(&g, name).unwrap().clone();
        for ((i, j), &av) in analytic.indexed_iter() {
            let mut bp = b.clone();
            let mut p = base.clone();
            p[[i, j]] += h;
            bp.set(&g, name, p).unwrap();
            let fp = scalar_of(&g, root, &bp);
            let mut q = base.clone();
            q[[i, j]] -= h;
            bp.set(&g, name, q).unwrap();
            let fm = scalar_of(&g, root, &bp);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (av - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "{name}[{i},{j}]: {av} vs {fd}"
            );
        }
    }
}
