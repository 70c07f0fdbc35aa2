//! A small reverse-mode network engine: dense, 2-D convolution, batch norm,
//! ReLU, max pooling and softmax cross-entropy, generic over `f32`/`f64`.

pub mod adam;
pub mod arch;
mod layers;
pub mod loss;
mod network;

pub use adam::{Adam, AdamState};
pub use arch::Architecture;
pub use layers::{BatchNorm, Conv2d, Dense, Layer, LayerKind, ParamGrads};
pub use loss::{argmax_rows, count_correct, softmax_cross_entropy};
pub use network::{ForwardTape, Gradients, Network, WeightOverrides};

/// How batch norm behaves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left alone.
    TrainFrozenStats,
    /// Running statistics.
    Eval,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn dense_net(weight: Vec<f64>, bias: Vec<f64>, i: usize, o: usize) -> Network<f64> {
        Network::new(vec![(
            "fc".into(),
            Layer::Dense(Dense {
                in_features: i,
                out_features: o,
                weight,
                bias,
            }),
        )])
    }

    #[test]
    fn identity_dense() {
        let mut net = dense_net(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let x = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let y = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.output().data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_with_bias() {
        let mut net = dense_net(vec![1.0, 0.0, 0.0, 2.0], vec![1.0, 1.0], 2, 2);
        let x = Tensor::from_rows(&[&[1.0, 1.0]]).unwrap();
        assert_eq!(net.forward(&x, Mode::Eval).unwrap().output().data(), &[2.0, 3.0]);
    }

    #[test]
    fn relu_layer() {
        let mut net = Network::<f64>::new(vec![("relu".into(), Layer::Relu)]);
        let x = Tensor::from_rows(&[&[-1.0, 3.0]]).unwrap();
        assert_eq!(net.forward(&x, Mode::Train).unwrap().output().data(), &[0.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut net = dense_net(vec![1.0; 4], vec![0.0; 2], 2, 2);
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let err = net.forward(&x, Mode::Eval).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn overflow_is_reported_with_layer_index() {
        let mut net = Network::new(vec![
            ("relu".into(), Layer::Relu),
            (
                "fc".into(),
                Layer::Dense(Dense {
                    in_features: 1,
                    out_features: 1,
                    weight: vec![f32::MAX],
                    bias: vec![0.0],
                }),
            ),
        ]);
        let x = Tensor::from_rows(&[&[10.0f32]]).unwrap();
        let err = net.forward(&x, Mode::Eval).unwrap_err();
        assert!(matches!(err, crate::Error::NumericOverflow(1)));
        assert_eq!(err.to_string(), "numeric overflow at layer 1");
    }

    #[test]
    fn override_replaces_weight_and_missing_weight_errors() {
        let mut net = dense_net(vec![], vec![0.0], 1, 1);
        let x = Tensor::from_rows(&[&[2.0]]).unwrap();
        assert!(net.forward(&x, Mode::Eval).is_err());
        let w = [3.0];
        let y = net.forward_with(&x, Mode::Eval, &[Some(&w)]).unwrap();
        assert_eq!(y.output().data(), &[6.0]);
    }

    #[test]
    fn eval_batch_norm_is_idempotent() {
        let mut bn = arch::batch_norm::<f64>(2);
        bn.running_mean = vec![0.5, -1.0];
        bn.running_var = vec![4.0, 0.25];
        let net = Network::new(vec![("bn".into(), Layer::BatchNorm(bn))]);
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, -4.0, 0.0, 0.5]).unwrap();
        let a = net.infer(&x, &[]).unwrap();
        let b = net.infer(&x, &[]).unwrap();
        assert_eq!(a, b);
        assert!((a.data()[0] - (0.5 / (4.0f64 + 1e-5).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn train_mode_updates_running_stats_only_when_tracking() {
        let net = Network::new(vec![("bn".into(), Layer::BatchNorm(arch::batch_norm::<f64>(1)))]);
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut frozen = net.clone();
        frozen.forward(&x, Mode::TrainFrozenStats).unwrap();
        assert_eq!(frozen, net);
        let mut tracked = net.clone();
        tracked.forward(&x, Mode::Train).unwrap();
        let Layer::BatchNorm(bn) = &tracked.layers()[0] else { unreachable!() };
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased batch variance 5/3, momentum 0.1
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
