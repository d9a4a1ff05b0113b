use fairdrl_core::grid::{GridSpec, SensitiveMap, STTensor};
use fairdrl_core::raster::{broadcast_align, max_scale, FeatureStack, NamedLayer};
use fairdrl_core::synth::{default_start, gen_scenario, ScenarioConfig};
use fairdrl_core::train::{fit_forecast_head, predict, train, TrainConfig};

fn constant_stack(level: f64) -> FeatureStack {
    let grid = GridSpec::new(3, 3).unwrap();
    let t = 24;
    let x = STTensor::new(grid.clone(), t, 1, vec![level; grid.n() * t], default_start()).unwrap();
    broadcast_align(
        Vec::new(),
        Vec::new(),
        vec![NamedLayer {
            name: "demand".into(),
            tensor: max_scale(&x),
        }],
        &grid,
        t,
    )
    .unwrap()
}

#[test]
fn neg_elbo_falls_over_fifty_steps() {
    let scenario = ScenarioConfig {
        t: 64,
        ..ScenarioConfig::default()
    };
    let (stack, s, _, _) = gen_scenario(&scenario).unwrap();
    let cfg = TrainConfig {
        epochs: 7,
        ..TrainConfig::default()
    };
    let (_, log) = train(&stack, &s, &cfg).unwrap();
    assert!(log.rows.len() >= 50, "{} steps", log.rows.len());
    let (first, last) = log.neg_elbo_ends(10).unwrap();
    assert!(last < first, "{first} -> {last}");
    assert!(log.rows.iter().all(|r| r.grad_norm.is_finite()));
}

#[test]
fn constant_demand_is_forecast_within_five_percent() {
    let level = 12.5;
    let stack = constant_stack(level);
    let s = SensitiveMap::new(stack.grid.clone(), vec![0.5; stack.grid.n()]).unwrap();
    let cfg = TrainConfig {
        window: 4,
        epochs: 2,
        d_s: 2,
        d_ns: 4,
        head_epochs: 200,
        head_lr: 1e-2,
        ..TrainConfig::default()
    };
    let (mut model, _) = train(&stack, &s, &cfg).unwrap();
    let fit = fit_forecast_head(&mut model, &stack, &cfg).unwrap();
    assert!(fit.final_mse < fit.initial_mse, "{fit:?}");

    let preds = predict(&model, &stack, "demand", cfg.window, 3).unwrap();
    for v in preds.yhat() {
        assert!((v - level).abs() <= 0.05 * level, "{v} vs {level}");
    }
}
