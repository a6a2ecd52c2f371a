use epictrl::pipeline::PipelineConfig;
use proptest::prelude::*;

proptest! {
    #[test]
    fn config_survives_serialization(
        seed in any::<u64>(),
        std in 0.0..1e-2f64,
        t1 in 1.0..60.0f64,
        dt in 0.01..1.0f64,
        margin in 1e-9..1e-3f64,
        periods in 1usize..8,
    ) {
        let mut c = PipelineConfig {
            seed,
            ..Default::default()
        };
        c.data.output_noise_std = std;
        c.data.t1 = t1;
        c.data.sample_dt = dt;
        c.observer.margin = margin;
        c.ocp.n_periods = periods;
        let back = PipelineConfig::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_json(), c.to_json());
    }
}
