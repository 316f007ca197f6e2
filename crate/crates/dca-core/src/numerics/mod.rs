//! Dense-matrix kernel and reverse-mode differentiation.
//!
//! Matrices are immutable values, safe to share across threads. A [`Tape`]
//! is confined to the thread that built it.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::grad_check;
pub use matrix::Matrix;
pub use tape::{Tape, ValueId};

#[cfg(test)]
mod property_tests {
    use super::*;
    use proptest::prelude::*;

    fn finite_entry() -> impl Strategy<Value = f64> {
        prop_oneof![
            Just(0.0),
            -50.0..50.0f64,
            -1e3..1e3f64,
        ]
    }

    proptest! {
        // Columns of a temperature softmax always sum to 1.
        #[test]
        fn softmax_columns_sum_to_one(
            data in proptest::collection::vec(finite_entry(), 12),
            t_exp in -3.0..1.0f64,
        ) {
            let temperature = 10f64.powf(t_exp); // [1e-3, 10]
            let m = Matrix::new(3, 4, data).unwrap();
            let s = m.softmax_cols(temperature).unwrap();
            for j in 0..s.cols() {
                let sum: f64 = (0..s.rows()).map(|i| s.get(i, j)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12, "column {j} sums to {sum}");
            }
        }

        // Adding a constant to a column leaves its softmax unchanged.
        #[test]
        fn softmax_shift_invariance(
            data in proptest::collection::vec(-30.0..30.0f64, 8),
            shift in -100.0..100.0f64,
        ) {
            let m = Matrix::new(4, 2, data).unwrap();
            let shifted = Matrix::from_fn(4, 2, |i, j| {
                m.get(i, j) + if j == 0 { shift } else { 0.0 }
            }).unwrap();
            let a = m.softmax_cols(1.0).unwrap();
            let b = shifted.softmax_cols(1.0).unwrap();
            for i in 0..4 {
                for j in 0..2 {
                    let rel = (a.get(i, j) - b.get(i, j)).abs() / a.get(i, j).max(1e-300);
                    prop_assert!(rel < 1e-12);
                }
            }
        }
    }

    // As T -> 0 with a unique column max, softmax becomes the one-hot
    // indicator of the max; with gap >= 1 at T = 1e-3 the losing entries
    // underflow to subnormal zero territory.
    #[test]
    fn softmax_low_temperature_one_hot() {
        let m = Matrix::new(3, 1, vec![2.0, 1.0, -4.0]).unwrap();
        let s = m.softmax_cols(1e-3).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(s.get(1, 0) < 1e-300);
        assert!(s.get(2, 0) < 1e-300);
    }

    #[test]
    fn forward_is_deterministic() {
        let x = Matrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) as f64).sin()).unwrap();
        let run = || {
            let mut t = Tape::new();
            let id = t.input(x.clone());
            let sm = t.softmax_cols(id, 0.1).unwrap();
            let th = t.tanh(sm);
            let mm = t.matmul(th, id).unwrap();
            t.value(mm).clone()
        };
        assert!(run().bits_eq(&run()));
    }
}
