use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recticast_core::autodiff::Graph;
use recticast_core::backbone::{backbone_loss, draw_batch, train_backbone, Backbone, BackboneConfig};
use recticast_core::data::{Dataset, DataSpec, Split, WindowSample};
use recticast_core::metrics::spearman;
use recticast_core::optim::AdamState;
use recticast_core::train::{step_rng, TrainConfig};
use recticast_core::{Error, ParamStore, Tensor};

fn fresh(cfg: BackboneConfig, seed: u64) -> (Backbone, ParamStore<f32>) {
    let net = Backbone::new(cfg).unwrap();
    let mut s = ParamStore::new();
    net.init(&mut s, &mut ChaCha8Rng::seed_from_u64(seed));
    (net, s)
}

fn small_spec() -> DataSpec {
    DataSpec {
        n_train: 24,
        n_val: 2,
        n_test: 6,
        ..DataSpec::default()
    }
}

#[test]
fn memorizes_last_frame_persistence() {
    let data = Dataset::synthesize(&DataSpec { n_train: 2, n_val: 1, n_test: 1, ..DataSpec::default() }, 3).unwrap();
    let samples: Vec<WindowSample> = data
        .split_samples(Split::Train)
        .into_iter()
        .take(4)
        .map(|s| {
            let last = s.input.slice_rows(4, 5).unwrap();
            let reps: Vec<&Tensor<f32>> = std::iter::repeat(&last).take(20).collect();
            WindowSample { target: Tensor::concat_rows(&reps).unwrap(), input: s.input }
        })
        .collect();
    let (net, mut store) = fresh(BackboneConfig::default(), 0);
    let cfg = TrainConfig { steps: 400, batch: 4, lr_max: 3e-3, lr_min: 1e-5, ..TrainConfig::default() };
    let trace = train_backbone(&net, &mut store, &mut AdamState::new(cfg.adam), &samples, &cfg, 1, |_| {}).unwrap();
    let tail = trace[trace.len() - 10..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    eprintln!("memorization loss {tail:.2e}");
    assert!(tail < 1e-3, "{tail}");
}

#[test]
fn first_batch_loss_matches_scalar_loop() {
    let data = Dataset::synthesize(&small_spec(), 8).unwrap();
    let train = data.split_samples(Split::Train);
    let (net, store32) = fresh(BackboneConfig { channels: 8, hidden: 16, depth: 1, ..BackboneConfig::default() }, 2);
    // f64 copy so the comparison is not limited by f32 accumulation
    let mut store = ParamStore::<f64>::new();
    for (name, t) in store32.iter() {
        store.insert(name, t.cast());
    }
    let mut rng = step_rng(4, 0);
    let idx = draw_batch(train.len(), 3, &mut rng);
    let batch: Vec<&WindowSample> = idx.iter().map(|&i| &train[i]).collect();

    let mut g = Graph::new();
    let loss = backbone_loss(&net, &mut g, &store, &batch).unwrap();
    let got = g.value(loss).data()[0];

    let mut sum = 0.0f64;
    let mut count = 0usize;
    for s in &batch {
        let mut g = Graph::new();
        let x = g.input(s.input.cast());
        let y = net.forward(&mut g, &store, x).unwrap();
        let pred = g.value(y).data().to_vec();
        for (p, t) in pred.iter().zip(s.target.data()) {
            let d = *p - *t as f64;
            sum += d * d;
            count += 1;
        }
    }
    let want = sum / count as f64;
    assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-12), "{got} vs {want}");
}

#[test]
fn wrong_input_length_is_a_dimension_error() {
    let (net, store) = fresh(BackboneConfig { channels: 4, hidden: 8, depth: 1, ..BackboneConfig::default() }, 0);
    let x = Tensor::<f32>::zeros([4, 1, 32, 32]);
    assert!(matches!(net.predict(&store, &x), Err(Error::Dimension(_))));
}

/// Trains a backbone per seed and compares it against repeating the last input frame.
#[test]
fn trained_backbone_beats_persistence_and_drifts_with_lead() {
    for seed in 0..3u64 {
        let data = Dataset::synthesize(&small_spec(), 100 + seed).unwrap();
        let train = data.split_samples(Split::Train);
        let test = data.split_samples(Split::Test);
        let (net, mut store) = fresh(BackboneConfig::default(), seed);
        let cfg = TrainConfig { steps: 150, batch: 8, lr_max: 2e-3, lr_min: 1e-5, ..TrainConfig::default() };
        train_backbone(&net, &mut store, &mut AdamState::new(cfg.adam), &train, &cfg, seed, |_| {}).unwrap();

        let mut lead_mse = vec![0.0f64; 20];
        let (mut model, mut persist) = (0.0f64, 0.0f64);
        for s in &test {
            let pred = net.predict(&store, &s.input).unwrap();
            let last = s.input.slice_rows(4, 5).unwrap();
            let hw = 32 * 32;
            for l in 0..20 {
                let t = &s.target.data()[l * hw..(l + 1) * hw];
                let p = &pred.data()[l * hw..(l + 1) * hw];
                let e: f64 = p.iter().zip(t).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / hw as f64;
                let q: f64 = last.data().iter().zip(t).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / hw as f64;
                lead_mse[l] += e;
                model += e;
                persist += q;
            }
        }
        let leads: Vec<f64> = (1..=20).map(|l| l as f64).collect();
        let rho = spearman(&leads, &lead_mse).unwrap();
        eprintln!("seed {seed}: backbone {model:.3} persistence {persist:.3} rho {rho:.3}");
        assert!(model < persist);
        assert!(rho > 0.0);
    }
}
