mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorize::cli::{compile_model, verification_inputs};
use tensorize::ecg::HardwareProfile;
use tensorize::model::ModelKind;
use tensorize::passes::PassSet;
use tensorize::runtime::{execute, ExecError};
use tensorize::tensor::{matmul, sparse_dense_matmul, DType, Tensor};

/// `rows x cols` matrix with roughly `density` non-zeros.
fn sparse_matrix(rng: &mut impl Rng, rows: usize, cols: usize, density: f64, dtype: DType) -> Tensor {
    let v: Vec<f32> = (0..rows * cols)
        .map(|_| {
            if !rng.gen_bool(density) {
                0.0
            } else if dtype.is_float() {
                rng.gen_range(-4.0f32..4.0)
            } else {
                rng.gen_range(-3i32..=3) as f32
            }
        })
        .collect();
    Tensor::from_values(&[rows, cols], dtype, &v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sparse_matmul_is_bit_identical_to_dense(
        seed in any::<u64>(),
        m in 0usize..20,
        k in 1usize..24,
        n in 1usize..24,
        density in 0.0f64..=1.0,
        integral in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dtype = if integral { DType::Int8 } else { DType::Float32 };
        let a = sparse_matrix(&mut rng, m, k, 0.9, dtype);
        let b = sparse_matrix(&mut rng, k, n, density, dtype);
        let out = if integral { DType::Int32 } else { DType::Float32 };
        let dense = matmul(&a, &b, out).unwrap();
        let sparse = sparse_dense_matmul(&a, &b.to_csr().unwrap(), out).unwrap();
        prop_assert!(dense.bit_eq(&sparse));
    }

    #[test]
    fn splitting_a_batch_does_not_change_rows(kind in proptest::sample::select(ModelKind::ALL.to_vec()), seed in any::<u64>(), cut in 0usize..=40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = common::random_model(kind, &mut rng);
        let (x, _) = verification_inputs(&m, 40, seed);
        let c = compile_model(&m, &HardwareProfile::cpu_avx2(), PassSet::ALL).unwrap();
        let whole = execute(&c.plan, &x).unwrap();
        let rows = x.shape()[0];
        let cut = cut.min(rows);
        let head = execute(&c.plan, &x.slice_rows(0..cut).unwrap()).unwrap();
        let tail = execute(&c.plan, &x.slice_rows(cut..rows).unwrap()).unwrap();
        prop_assert!(head.bit_eq(&whole.slice_rows(0..cut).unwrap()));
        prop_assert!(tail.bit_eq(&whole.slice_rows(cut..rows).unwrap()));
    }
}

#[test]
fn execution_is_deterministic() {
    for (name, m) in common::fixtures() {
        let (x, _) = verification_inputs(&m, 300, 11);
        let c = compile_model(&m, &HardwareProfile::cpu_avx2(), PassSet::ALL).unwrap();
        let a = execute(&c.plan, &x).unwrap();
        let b = execute(&c.plan, &x).unwrap();
        assert!(a.bit_eq(&b), "{name}");
        let again = compile_model(&m, &HardwareProfile::cpu_avx2(), PassSet::ALL).unwrap();
        assert_eq!(again.plan.dump(), c.plan.dump(), "{name}");
    }
}

#[test]
fn output_rows_follow_input_rows() {
    for (name, m) in common::fixtures() {
        let c = compile_model(&m, &HardwareProfile::plain(), PassSet::ALL).unwrap();
        for rows in [0, 1, 17] {
            let x = Tensor::zeros(&[rows, m.n_features], DType::Float32);
            let y = execute(&c.plan, &x).unwrap();
            assert_eq!(y.shape()[0], rows, "{name}");
        }
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let m = common::fixture("tree_a.json");
    let c = compile_model(&m, &HardwareProfile::cpu_avx2(), PassSet::ALL).unwrap();
    let wrong_width = Tensor::zeros(&[2, 3], DType::Float32);
    assert!(matches!(execute(&c.plan, &wrong_width), Err(ExecError::InputMismatch(_))));
    let wrong_dtype = Tensor::zeros(&[2, 4], DType::Int32);
    assert!(matches!(execute(&c.plan, &wrong_dtype), Err(ExecError::InputMismatch(_))));
    let nan = Tensor::from_f32(&[1, 4], vec![0.0, f32::NAN, 0.0, 0.0]).unwrap();
    assert!(matches!(execute(&c.plan, &nan), Err(ExecError::InputMismatch(_))));
}
