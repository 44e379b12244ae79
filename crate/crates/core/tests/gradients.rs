mod common;

use common::gradcheck;

macro_rules! checks {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                gradcheck::$name();
            }
        )*
    };
}

checks!(
    conv2d_gradients,
    batched_conv2d_gradients,
    channel_max_gradients,
    linear_gradients,
    elementwise_gradients,
    structural_gradients,
    cross_entropy_gradients,
    cross_entropy_gradient_is_softmax_minus_onehot,
    lstm_cell_gradients,
    bptt_one_step,
    bptt_five_steps,
    bptt_twenty_steps,
    unused_parameter_gets_zero_gradient,
    gradient_is_linear_in_loss_scale,
    backward_is_repeatable,
    cnn_end_to_end_gradients,
    cnn_lstm_end_to_end_gradients,
    vin_end_to_end_gradients,
    vin_lstm_end_to_end_gradients,
    vin_partialmap_end_to_end_gradients,
    dqn_td_loss_gradients,
    conv2d_matches_nested_loops,
);
