use dictfit::harness::experiment::ExperimentConfig;
use dictfit::resolve::{EdgeSamples, ErrorCurve, Selection};
use dictfit::spline::BoundaryStencil;

#[test]
fn asymptotic_decay_rates() {
    let config = ExperimentConfig::default();
    let model = config.model().unwrap();
    let samples = EdgeSamples::simulate(&config.axes, 0, 12, &model).unwrap();
    for n in 0..=3 {
        let curve = ErrorCurve {
            axis: 0,
            order: n,
            points: samples.error_curve(n, BoundaryStencil::MatchOrder).unwrap(),
            selection: Selection::NotReached { floor: 0.0 },
        };
        let slope = curve.decay_slope(8..=12);
        assert!((slope + (n as f64 + 1.0)).abs() <= 0.1, "order {n}: slope {slope}");
    }
}
