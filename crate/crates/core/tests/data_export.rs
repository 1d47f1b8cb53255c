use cvrcf_core::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

const WEEK: i64 = 7 * 86_400;

fn scale() -> RatingScale {
    RatingScale { min: 1.0, max: 5.0 }
}

fn random_events(seed: u64, n: usize) -> Vec<RatingEvent> {
    let mut rng = cvrcf_core::seeds::rng(&[seed, 11]);
    (0..n)
        .map(|k| {
            RatingEvent::new(
                format!("{}", rng.random_range(0..50)),
                format!("{}", rng.random_range(0..80)),
                rng.random_range(2..=10) as f64 / 2.0,
                // few distinct times, so ties are common
                rng.random_range(0..200) * 60 + (k % 2) as i64,
            )
        })
        .collect()
}

#[test]
fn files_round_trip_in_both_formats() {
    let mut events = random_events(1, 300);
    cvrcf_core::data::sort_events(&mut events);
    let dir = tempfile::tempdir().unwrap();
    for format in [RatingFormat::MovielensDat, RatingFormat::Tsv] {
        let path = dir.path().join(format!("r.{format}"));
        write_ratings(&path, &events, format).unwrap();
        let back = parse_ratings(&path, format, scale()).unwrap();
        assert_eq!(back.events, events);
        assert_eq!(back.malformed, 0);
    }
}

#[test]
fn shuffled_input_comes_back_in_stable_time_order() {
    let mut events = random_events(2, 1000);
    // oracle: a stable sort by (timestamp, user, item) over the file order
    let mut rng = cvrcf_core::seeds::rng(&[2, 12]);
    events.shuffle(&mut rng);
    let text = format_ratings(&events, RatingFormat::Tsv);
    let mut expect = events.clone();
    expect.sort_by(|a, b| (a.timestamp, &a.user, &a.item).cmp(&(b.timestamp, &b.user, &b.item)));
    let parsed = parse_ratings_str(&text, RatingFormat::Tsv, scale(), std::path::Path::new("mem")).unwrap();
    assert_eq!(parsed.events, expect);
}

#[test]
fn everything_lands_in_training_with_unit_ratio() {
    let mut events = random_events(3, 100);
    cvrcf_core::data::sort_events(&mut events);
    let s = chrono_split(&events, [1.0, 0.0, 0.0], SplitMode::Count).unwrap();
    assert_eq!(s.train, events);
    assert!(s.validation.is_empty() && s.test.is_empty());
}

proptest! {
    #[test]
    fn segments_are_contiguous_and_ordered(
        seed in 0u64..10_000, n in 1usize..400,
        a in 0.0..5.0f64, b in 0.0..5.0f64, c in 0.01..5.0f64, by_time: bool,
    ) {
        let mut events = random_events(seed, n);
        cvrcf_core::data::sort_events(&mut events);
        let mode = if by_time { SplitMode::Time } else { SplitMode::Count };
        let s = chrono_split(&events, [a, b, c], mode).unwrap();
        let joined: Vec<RatingEvent> = s.train.iter().chain(&s.validation).chain(&s.test).cloned().collect();
        prop_assert_eq!(&joined, &events);
        let max = |v: &[RatingEvent]| v.last().map(|e| e.timestamp);
        let min = |v: &[RatingEvent]| v.first().map(|e| e.timestamp);
        if let (Some(x), Some(y)) = (max(&s.train), min(&s.validation)) {
            prop_assert!(x < y);
        }
        if let (Some(x), Some(y)) = (max(&s.validation), min(&s.test)) {
            prop_assert!(x < y);
        }
        if let (Some(x), Some(y)) = (max(&s.train), min(&s.test)) {
            prop_assert!(x < y);
        }
    }

    #[test]
    fn buckets_partition_the_stream(seed in 0u64..10_000, n in 0usize..300, g in 1i64..5000) {
        let mut events = random_events(seed, n);
        cvrcf_core::data::sort_events(&mut events);
        let start = events.first().map_or(0, |e| e.timestamp - 1);
        let batches = bucketize(&events, start, g).unwrap();
        let flat: Vec<RatingEvent> = batches.iter().flat_map(|b| b.events.clone()).collect();
        prop_assert_eq!(&flat, &events);
        for (k, b) in batches.iter().enumerate() {
            prop_assert_eq!(b.start, start + k as i64 * g);
            prop_assert_eq!(b.end, b.start + g);
            prop_assert!(b.events.iter().all(|e| b.start < e.timestamp && e.timestamp <= b.end));
            let grouped: usize = b.by_user.iter().map(|(_, ix)| ix.len()).sum();
            prop_assert_eq!(grouped, b.events.len());
        }
    }
}

#[test]
fn synthetic_noise_has_the_configured_variance() {
    let cfg = SynthConfig {
        ratings_per_step: 20_000,
        noise_var: 0.3,
        ..SynthConfig::default()
    };
    let wide = RatingScale { min: -1e6, max: 1e6 };
    let data = generate(&cfg, WEEK, 1_000, wide, 4).unwrap();
    let idx = |ids: &[String], id: &str| ids.iter().position(|x| x == id).unwrap();
    let residuals: Vec<f64> = data
        .events
        .iter()
        .map(|e| {
            let t = ((e.timestamp - 1_000 - 1) / WEEK) as usize;
            let u = idx(&data.truth.user_ids, &e.user);
            let i = idx(&data.truth.item_ids, &e.item);
            e.rating - data.truth.mean(t, u, i)
        })
        .collect();
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var / 0.3 - 1.0).abs() < 0.05, "residual variance {var}");
    assert!(mean.abs() < 0.02, "residual mean {mean}");
}

#[test]
fn synthetic_drift_keeps_its_spread_over_time() {
    let cfg = SynthConfig {
        users: 4000,
        steps: 6,
        ratings_per_step: 4000,
        ..SynthConfig::default()
    };
    let data = generate(&cfg, WEEK, 0, scale(), 9).unwrap();
    let t = &data.truth;
    let spread = |step: usize| {
        let xs: Vec<f64> = t.user_factors[step]
            .iter()
            .zip(&t.user_stationary)
            .flat_map(|(f, s)| f.iter().zip(s).map(|(a, b)| a - b).collect::<Vec<_>>())
            .collect();
        xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64
    };
    let law = cfg.drift_scale.powi(2) / (1.0 - cfg.drift_decay.powi(2));
    for step in [0, 5] {
        assert!((spread(step) / law - 1.0).abs() < 0.05, "step {step}: {}", spread(step));
    }
}

fn recorded_model(steps: usize) -> Model {
    let events: Vec<RatingEvent> = (0..steps * 6)
        .map(|k| {
            RatingEvent::new(
                format!("u{}", k % 3),
                format!("i{}", k % 4),
                (k % 5 + 1) as f64,
                1 + (k / 6) as i64 * WEEK + (k % 6) as i64,
            )
        })
        .collect();
    let cfg = ModelConfig {
        d_s: 3,
        d_h: 3,
        d_emb: 3,
        hidden_width: 4,
        record_factors: true,
        ..ModelConfig::default()
    };
    let mut m = Model::new(cfg, 3.0).unwrap();
    let opts = TrainOptions {
        granularity: WEEK,
        truncation: 2,
        epochs: 1,
        iterations: 2,
        seed: 1,
    };
    train_offline(&mut m, &events, &opts, |_, _| Ok(())).unwrap();
    m
}

#[test]
fn single_step_exports_one_row() {
    let e = export_factors(&recorded_model(1), &[], &[]).unwrap();
    for t in [
        &e.user_location,
        &e.user_uncertainty,
        &e.item_location,
        &e.item_uncertainty,
    ] {
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.to_csv().lines().count(), 2);
    }
}

#[test]
fn exported_tables_are_centered_and_normalized() {
    let m = recorded_model(5);
    let e = export_factors(&m, &[], &[]).unwrap();
    for t in [&e.user_location, &e.item_location] {
        assert_eq!(t.rows.len(), 5);
        for d in 0..t.rows[0].len() {
            let s: f64 = t.rows.iter().map(|r| r[d]).sum();
            assert!(s.abs() < 1e-9, "column {d} sums to {s}");
        }
    }
    for t in [&e.user_uncertainty, &e.item_uncertainty] {
        for d in 0..t.rows[0].len() {
            let m = t.rows.iter().map(|r| r[d].abs()).fold(0.0, f64::max);
            assert!(m == 0.0 || (m - 1.0).abs() < 1e-12);
            assert!(t.rows.iter().all(|r| r[d] > 0.0));
        }
    }
    let subset = export_factors(&m, &["u1".to_string()], &["i0".to_string(), "i2".to_string()]).unwrap();
    assert_eq!(subset.user_location.rows.len(), 5);
    assert!(matches!(
        export_factors(&m, &["ghost".to_string()], &[]),
        Err(Error::UnknownEntity { .. })
    ));
}

#[test]
fn export_without_recording_is_refused() {
    let mut m = recorded_model(2);
    m.config.record_factors = false;
    assert!(export_factors(&m, &[], &[]).is_err());
}
