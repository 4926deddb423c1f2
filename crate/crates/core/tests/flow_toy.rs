use recticast_core::flow::{fit_flow_toy, SamplerConfig, ToyConfig};

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[test]
fn two_point_target_has_centered_samples() {
    let (model, store, trace) = fit_flow_toy(-1.0, 1.0, &ToyConfig::default()).unwrap();
    let samples = model.sample(&store, 10_000, &SamplerConfig { steps: 50, seed: 7 }).unwrap();
    let (m, s) = mean_std(&samples);
    println!("two-point mean {m:.4} std {s:.4}");
    assert!((-0.1..=0.1).contains(&m), "mean {m}");
    // a collapsed flow would also be centered; the spread must reach the modes
    assert!(s > 0.7, "std {s}");

    let early: f64 = trace[..20].iter().sum::<f64>() / 20.0;
    let later: f64 = trace[80..100].iter().sum::<f64>() / 20.0;
    assert!(later < early, "loss {early} -> {later}");
}

#[test]
fn degenerate_target_concentrates() {
    let (model, store, _) = fit_flow_toy(0.3, 0.3, &ToyConfig::default()).unwrap();
    let samples = model.sample(&store, 10_000, &SamplerConfig { steps: 50, seed: 8 }).unwrap();
    let (m, s) = mean_std(&samples);
    println!("degenerate mean {m:.4} std {s:.4}");
    assert!((m - 0.3).abs() < 0.05, "mean {m}");
    assert!(s < 0.05, "std {s}");
}
