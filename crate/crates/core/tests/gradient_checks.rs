use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2d4d_core::autodiff::{batched_spiral, gradcheck, Graph, Linear, NodeId, ParamStore, SparseTransfer, SpiralConv, Tensor};
use s2d4d_core::mesh::SparseRows;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn check<F>(store: &ParamStore, loss: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    gradcheck::relative_error(store, 1e-5, |g, p| Ok(loss(g, p))).unwrap()
}

#[test]
fn three_layer_mlp_with_tanh_and_leaky() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..5 {
        let mut store = ParamStore::default();
        let l1 = Linear::new(&mut store, "l1", 4, 6, &mut rng);
        let l2 = Linear::new(&mut store, "l2", 6, 5, &mut rng);
        let l3 = Linear::new(&mut store, "l3", 5, 2, &mut rng);
        gradcheck::randomize(&mut store, &mut rng);
        let x = random(&mut rng, 3, 4);
        let target = random(&mut rng, 3, 2);
        let err = check(&store, |g, p| {
            let xi = g.constant(x.clone());
            let h = l1.forward(g, p, xi).unwrap();
            let h = g.leaky_relu(h, 0.2);
            let h = l2.forward(g, p, h).unwrap();
            let h = g.tanh(h);
            let y = l3.forward(g, p, h).unwrap();
            let t = g.constant(target.clone());
            let d = g.sub(y, t).unwrap();
            let a = g.l1_norm(d);
            let b = g.l2_norm(d);
            g.add(a, b).unwrap()
        });
        assert!(err < 1e-5, "trial {trial}: relative error {err}");
    }
}

#[test]
fn spiral_conv_with_upsampling_and_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (v_coarse, v_fine, batch, len) = (3, 5, 2, 3);
    let spiral: Vec<usize> = (0..v_fine).flat_map(|v| [v, (v + 1) % v_fine, (v + 3) % v_fine]).collect();
    let up = SparseTransfer::new(
        SparseRows::new(
            v_coarse,
            vec![
                vec![(0, 1.0)],
                vec![(0, 0.5), (1, 0.5)],
                vec![(1, 1.0)],
                vec![(1, 0.25), (2, 0.75)],
                vec![(2, 1.0)],
            ],
        )
        .unwrap(),
    );
    let idx = batched_spiral(&spiral, v_fine, batch);
    let mut store = ParamStore::default();
    let fc = Linear::new(&mut store, "fc", 4, v_coarse * 2, &mut rng);
    let conv = SpiralConv::new(&mut store, "conv", len, 2, 3, &mut rng);
    gradcheck::randomize(&mut store, &mut rng);
    let x = random(&mut rng, batch, 4);
    let err = check(&store, |g, p| {
        let xi = g.constant(x.clone());
        let h = fc.forward(g, p, xi).unwrap();
        let h = g.reshape(h, batch * v_coarse, 2).unwrap();
        let h = g.sparse_matmul(&up, h, batch).unwrap();
        let h = conv.forward(g, p, h, &idx).unwrap();
        let h = g.leaky_relu(h, 0.2);
        let a = g.slice_cols(h, 1, 2).unwrap();
        let b = g.slice_cols(h, 0, 1).unwrap();
        let c = g.concat_cols(a, b).unwrap();
        let s = g.row_sums(c);
        let s2 = g.square(s);
        let r = g.add_const(s2, 1.0);
        let r = g.recip(r);
        g.mean(r)
    });
    assert!(err < 1e-5, "relative error {err}");
    assert!(!Arc::ptr_eq(&idx, &batched_spiral(&spiral, v_fine, batch)));
}

#[test]
fn second_order_penalty_matches_finite_differences() {
    // critic D(x) = l2(tanh(l1(x))); penalty (|dD/dx| - 1)^2 summed over rows
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::default();
    let l1 = Linear::new(&mut store, "l1", 5, 7, &mut rng);
    let l2 = Linear::new(&mut store, "l2", 7, 1, &mut rng);
    gradcheck::randomize(&mut store, &mut rng);
    let x = random(&mut rng, 4, 5);
    let err = check(&store, |g, p| {
        let xi = g.variable(x.clone());
        let h = l1.forward(g, p, xi).unwrap();
        let h = g.tanh(h);
        let h = g.leaky_relu(h, 0.2);
        let d = l2.forward(g, p, h).unwrap();
        let total = g.sum(d);
        let gx = g.grad(total, &[xi]).unwrap()[0];
        let sq = g.square(gx);
        let n2 = g.row_sums(sq);
        let n = g.sqrt(n2);
        let c = g.add_const(n, -1.0);
        let pen = g.square(c);
        g.mean(pen)
    });
    assert!(err < 1e-4, "relative error {err}");
}
