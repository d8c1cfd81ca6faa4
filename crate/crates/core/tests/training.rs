use fresco::config::{OptimizerKind, Scale, ScenarioConfig};
use fresco::engine::generate_labels;
use fresco::risk::lstm_train;

/// The monotone-trace property belongs to plain mini-batch descent; the Adam
/// default is noisier on heavily weighted labels and is not held to it.
#[test]
fn plain_descent_loss_trace_mostly_non_increasing() {
    let cfg = ScenarioConfig::for_scale(Scale::S1);
    let data = generate_labels(&cfg, &[1001, 1002]).unwrap();
    assert!(data.positives() > 0 && data.positives() < data.samples.len());
    let mut hyper = cfg.train.clone();
    hyper.optimizer = OptimizerKind::Sgd;
    let out = lstm_train(&data, &hyper).unwrap();
    let trace = &out.loss_trace;
    assert_eq!(trace.len(), cfg.train.epochs);
    let down = trace.windows(2).filter(|w| w[1] <= w[0]).count();
    let steps = trace.len() - 1;
    assert!(down * 5 >= steps * 4, "only {down}/{steps} epoch transitions were non-increasing: {trace:?}");
    assert!(trace[steps] < trace[0]);
}
