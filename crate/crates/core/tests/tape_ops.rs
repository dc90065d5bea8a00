use hlgp::{Error, Tape, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let i = tape.constant_tensor(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant_tensor(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(
        tape.value(tape.matmul(i, m).unwrap()),
        vec![1.0, 2.0, 3.0, 4.0]
    );
    let a = tape.constant_tensor(&t(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant_tensor(&t(&[2, 1], &[3.0, 4.0]));
    assert_eq!(tape.value(tape.matmul(a, b).unwrap()), vec![11.0]);
    match tape.matmul(a, a) {
        Err(Error::Dimension(msg)) => assert!(msg.contains("[1, 2]"), "{msg}"),
        other => panic!("expected a dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let x = tape.constant_tensor(&t(&[2], &[0.0, 0.0]));
    assert_eq!(tape.value(tape.softmax(x, 0).unwrap()), vec![0.5, 0.5]);
    let x = tape.constant_tensor(&t(&[2], &[1000.0, 0.0]));
    let p = tape.value(tape.softmax(x, 0).unwrap());
    assert!(p.iter().all(|v| v.is_finite()));
    assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
    let x = tape.constant_tensor(&t(&[2], &[f64::NAN, 0.0]));
    assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let g = tape.constant_tensor(&t(&[2], &[1.0, 1.0]));
    let b = tape.constant_tensor(&t(&[2], &[0.0, 0.0]));
    let x = tape.constant_tensor(&t(&[1, 2], &[1.0, 3.0]));
    let y = tape.value(tape.layer_norm(x, g, b, 1e-5).unwrap());
    assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 1.0).abs() < 1e-4);
    let c = tape.constant_tensor(&t(&[1, 2], &[2.5, 2.5]));
    assert_eq!(
        tape.value(tape.layer_norm(c, g, b, 1e-5).unwrap()),
        vec![0.0, 0.0]
    );
    let g3 = tape.constant_tensor(&t(&[3], &[1.0; 3]));
    assert!(matches!(
        tape.layer_norm(x, g3, b, 1e-5),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn backward_examples() {
    let w = t(&[2], &[1.0, -2.0]).trainable(true);
    let tape = Tape::new();
    let v = tape.leaf(&w);
    let g = tape.backward(tape.sum(v)).unwrap();
    assert_eq!(g.for_tensor(w.id()).unwrap(), &[1.0, 1.0]);

    let tape = Tape::new();
    let v = tape.leaf(&w);
    let sq = tape.mul(v, v).unwrap();
    let g = tape.backward(tape.sum(sq)).unwrap();
    assert_eq!(g.for_tensor(w.id()).unwrap(), &[2.0, -4.0]);

    assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn untouched_and_frozen_tensors_get_nothing() {
    let w = t(&[2], &[1.0, 2.0]).trainable(true);
    let unused = t(&[2], &[5.0, 6.0]).trainable(true);
    let frozen = t(&[2], &[3.0, 4.0]);
    let tape = Tape::new();
    let a = tape.leaf(&w);
    let _ = tape.leaf(&unused);
    let f = tape.leaf(&frozen);
    let loss = tape.sum(tape.mul(a, f).unwrap());
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.for_tensor(w.id()).unwrap(), &[3.0, 4.0]);
    assert!(g
        .for_tensor(unused.id())
        .is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    assert!(g.for_tensor(frozen.id()).is_none());
}

#[test]
fn reverse_pass_visits_each_node_once_in_reverse() {
    let w = t(&[3], &[0.1, 0.2, 0.3]).trainable(true);
    let tape = Tape::new();
    let a = tape.leaf(&w);
    let b = tape.gelu(a);
    let c = tape.add(a, b).unwrap();
    let loss = tape.mean(c);
    let g = tape.backward(loss).unwrap();
    let order = g.visit_order();
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), order.len());
    assert!(order.windows(2).all(|w| w[0] > w[1]));
}

fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-30.0f64..30.0, 1..12)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..4, data in vec_strategy()) {
        let cols = data.len();
        let full: Vec<f64> = (0..rows).flat_map(|r| data.iter().map(move |x| x * (r as f64 + 1.0))).collect();
        let tape = Tape::new();
        let x = tape.constant(vec![rows, cols], full).unwrap();
        let p = tape.value(tape.softmax(x, 1).unwrap());
        for r in p.chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn backward_is_repeatable(data in vec_strategy()) {
        let w = Tensor::new(vec![data.len()], data).unwrap().trainable(true);
        let run = || {
            let tape = Tape::new();
            let v = tape.leaf(&w);
            let h = tape.gelu(v);
            let s = tape.softmax(h, 0).unwrap();
            let m = tape.mul(s, v).unwrap();
            let loss = tape.sum(m);
            tape.backward(loss).unwrap().for_tensor(w.id()).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn transpose_twice_is_identity(r in 1usize..5, c in 1usize..5, seed in 0u64..1000) {
        use rand::SeedableRng;
        let x = Tensor::<f64>::randn(&[r, c], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let tape = Tape::new();
        let v = tape.constant_tensor(&x);
        let tt = tape.transpose(tape.transpose(v).unwrap()).unwrap();
        prop_assert_eq!(tape.value(tt), x.data().to_vec());
    }
}
