use danmaku_tensor::checkpoint::{read_checkpoint, write_checkpoint, DType};
use danmaku_tensor::{Adam, AdamConfig, Grads, ParamStore, Tensor};
use proptest::prelude::*;

/// Trajectory produced by `torch.optim.Adam(lr=3e-4, betas=(0.9, 0.999), eps=1e-8)`
/// in float64 from p = [0, 0.5, -1] under the gradient sequence below.
const TORCH_GRADS: [[f64; 3]; 3] = [[1.0, -2.0, 0.5], [0.3, 0.0, -4.0], [-1.5, 2.5, 0.25]];
const TORCH_PARAMS: [[f64; 3]; 3] = [
    [-0.00029999999700000004, 0.5002999999985, -1.000299999994],
    [-0.0005567091484246418, 0.5005010174733191, -1.00010340200983],
    [-0.0005126529197505489, 0.5004483205078819, -0.9999635913795025],
];

#[test]
fn adam_matches_reference_trajectory() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::row(&[0.0, 0.5, -1.0])).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), &store);
    for (g, expected) in TORCH_GRADS.iter().zip(TORCH_PARAMS) {
        let mut grads = Grads::zeros_like(&store);
        grads.get_mut(id).data_mut().copy_from_slice(g);
        adam.step(&mut store, &grads).unwrap();
        for (got, want) in store.get(id).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }
}

#[test]
fn linear_toy_model_single_step() {
    // loss = (w * x - y)^2 with w = 0.2, x = 3, y = 1 -> dloss/dw = 2 (0.6 - 1) 3 = -2.4.
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(0.2)).unwrap();
    let tape = danmaku_tensor::Tape::new();
    let wv = tape.param(&store, w);
    let pred = tape.scale(wv, 3.0).unwrap();
    let target = tape.leaf(Tensor::scalar(1.0)).unwrap();
    let diff = tape.sub(pred, target).unwrap();
    let loss = tape.mul(diff, diff).unwrap();
    tape.backward(loss).unwrap();
    let grads = tape.param_grads(&store);
    assert!((grads.get(w).item() + 2.4).abs() < 1e-12);
    let mut adam = Adam::new(AdamConfig::default(), &store);
    adam.step(&mut store, &grads).unwrap();
    // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    let expected = 0.2 + 3e-4 * 2.4 / (2.4 + 1e-8);
    assert!((store.get(w).item() - expected).abs() < 1e-15);
}

proptest! {
    #[test]
    fn checkpoint_round_trip_is_bit_exact(values in prop::collection::vec(-1e6f64..1e6, 1..40), rows in 1usize..5) {
        let cols = values.len().div_ceil(rows);
        let mut data = values.clone();
        data.resize(rows * cols, 0.125);
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{}", &[("x", &t), ("y", &Tensor::scalar(values[0]))], DType::F64).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back.get("x").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.tensors.len(), 2);
    }
}

#[test]
fn truncated_checkpoint_is_an_error() {
    let t = Tensor::row(&[1.0, 2.0, 3.0]);
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, "{}", &[("x", &t)], DType::F64).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(read_checkpoint(buf.as_slice()).is_err());
}

#[test]
fn checkpoint_file_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let t = Tensor::new(vec![2, 1], vec![0.1, 0.2]).unwrap();
    write_checkpoint(std::fs::File::create(&path).unwrap(), "cfg", &[("t", &t)], DType::F64).unwrap();
    let back = read_checkpoint(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back.config, "cfg");
    assert_eq!(back.get("t"), Some(&t));
}
