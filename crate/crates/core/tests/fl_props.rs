mod common;

use flcovert::fl::{self, FlError, FlSystem, HonestClient};
use flcovert::nn::{self, NetSpec, ParamVector, TrainConfig};
use flcovert::data;
use proptest::prelude::*;

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector::new(v).unwrap()
}

proptest! {
    #[test]
    fn fedavg_is_a_weighted_mean(
        models in proptest::collection::vec((proptest::collection::vec(-5f64..5.0, 6), 0usize..50), 1..8)
    ) {
        let total: usize = models.iter().map(|(_, c)| c).sum();
        prop_assume!(total > 0);
        let owned: Vec<(ParamVector, usize)> = models.iter().map(|(m, c)| (pv(m.clone()), *c)).collect();
        let refs: Vec<(&ParamVector, usize)> = owned.iter().map(|(m, c)| (m, *c)).collect();
        let agg = fl::aggregate_fedavg(&refs).unwrap();
        for i in 0..6 {
            let expected: f64 = models.iter().map(|(m, c)| m[i] * *c as f64).sum::<f64>() / total as f64;
            prop_assert!((agg.as_slice()[i] - expected).abs() < 1e-9);
            let lo = models.iter().filter(|(_, c)| *c > 0).map(|(m, _)| m[i]).fold(f64::INFINITY, f64::min);
            let hi = models.iter().filter(|(_, c)| *c > 0).map(|(m, _)| m[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(agg.as_slice()[i] >= lo - 1e-12 && agg.as_slice()[i] <= hi + 1e-12);
        }
        let mut rev = refs.clone();
        rev.reverse();
        let agg_rev = fl::aggregate_fedavg(&rev).unwrap();
        prop_assert!(nn::param_distance(&agg, &agg_rev).unwrap() < 1e-9);
    }

    #[test]
    fn fedavg_of_identical_models_is_that_model(m in proptest::collection::vec(-5f64..5.0, 5), n in 1usize..6) {
        let p = pv(m);
        let refs: Vec<(&ParamVector, usize)> = (0..n).map(|i| (&p, i + 1)).collect();
        prop_assert_eq!(fl::aggregate_fedavg(&refs).unwrap(), p);
    }

    #[test]
    fn selection_has_the_right_size(pool in 1usize..15, p in 0.05f64..=1.0, seed in any::<u64>()) {
        let spec = NetSpec::mlp(2, &[], 2).unwrap();
        let mut sys = FlSystem::new(spec.clone(), ParamVector::zeros(spec.param_count()), p, seed).unwrap();
        for id in 0..pool {
            sys.join(Box::new(common::Frozen { id, count: 1 })).unwrap();
        }
        let expected = ((p * pool as f64) + 1e-9).floor() as usize;
        if expected == 0 {
            let no_selection = matches!(sys.select_clients(), Err(FlError::NoSelection { .. }));
            prop_assert!(no_selection);
        } else {
            let ids = sys.select_clients().unwrap();
            prop_assert_eq!(ids.len(), expected);
            prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(ids.iter().all(|&i| i < pool));
        }
    }
}

#[test]
fn zero_total_weight_is_rejected() {
    let p = pv(vec![1.0, 2.0]);
    assert!(fl::aggregate_fedavg(&[(&p, 0), (&p, 0)]).is_err());
    assert!(fl::aggregate_fedavg(&[]).is_err());
}

#[test]
fn selection_frequency_is_binomial() {
    // Each of 10 clients is picked with probability 1/2 per round.
    let spec = NetSpec::mlp(2, &[], 2).unwrap();
    let mut sys = FlSystem::new(spec.clone(), ParamVector::zeros(spec.param_count()), 0.5, 42).unwrap();
    for id in 0..10 {
        sys.join(Box::new(common::Frozen { id, count: 1 })).unwrap();
    }
    let rounds = 4000;
    let mut hits = [0usize; 10];
    for _ in 0..rounds {
        for id in sys.select_clients().unwrap() {
            hits[id] += 1;
        }
    }
    // Four standard deviations of Binomial(4000, 0.5) is about 126.
    for (id, h) in hits.iter().enumerate() {
        assert!((*h as f64 - 2000.0).abs() < 126.0, "client {id}: {h}");
    }
}

#[test]
fn frozen_pool_keeps_the_model_fixed() {
    let spec = NetSpec::mlp(3, &[4], 2).unwrap();
    let m = nn::init_model(&spec, 1);
    let mut sys = FlSystem::new(spec, m.clone(), 0.6, 7).unwrap();
    for id in 0..5 {
        sys.join(Box::new(common::Frozen { id, count: id + 1 })).unwrap();
    }
    for r in 0..10 {
        let log = sys.run_round().unwrap();
        assert_eq!(log.round, r);
        assert_eq!(log.selected_ids.len(), 3);
        assert_eq!(log.snapshot_id, fl::snapshot_id(&m));
    }
    assert!(nn::param_distance(sys.global(), &m).unwrap() < 1e-12);
}

#[test]
fn duplicate_ids_are_rejected() {
    let spec = NetSpec::mlp(2, &[], 2).unwrap();
    let mut sys = FlSystem::new(spec.clone(), ParamVector::zeros(spec.param_count()), 0.5, 0).unwrap();
    sys.join(Box::new(common::Frozen { id: 3, count: 1 })).unwrap();
    assert!(sys.join(Box::new(common::Frozen { id: 3, count: 1 })).is_err());
}

#[test]
fn honest_pretraining_is_deterministic_and_learns() {
    let ds = data::make_synthetic(16, 3, 300, 2).unwrap();
    let test = data::make_synthetic(16, 3, 90, 2).unwrap();
    let shards = data::partition(&ds, 5, 1).unwrap();
    let spec = NetSpec::mlp(16, &[12], 3).unwrap();
    let build = || {
        let mut sys = FlSystem::new(spec.clone(), nn::init_model(&spec, 4), 0.6, 9).unwrap();
        for (id, s) in shards.iter().enumerate() {
            let c = HonestClient::new(id, s.clone(), test.clone(), TrainConfig::default(), 11);
            sys.join(Box::new(c)).unwrap();
        }
        sys
    };
    let (mut a, mut b) = (build(), build());
    let la = fl::pretrain(&mut a, 15).unwrap();
    let lb = fl::pretrain(&mut b, 15).unwrap();
    let ids = |l: &[fl::RoundLog]| l.iter().map(|r| (r.selected_ids.clone(), r.snapshot_id)).collect::<Vec<_>>();
    assert_eq!(ids(&la), ids(&lb));
    assert_eq!(a.global(), b.global());
    assert!(nn::accuracy(a.global(), &spec, &test).unwrap() > 0.9);
}

#[test]
fn pretrain_refuses_non_honest_pools() {
    let spec = NetSpec::mlp(2, &[], 2).unwrap();
    let mut sys = FlSystem::new(spec.clone(), ParamVector::zeros(spec.param_count()), 1.0, 0).unwrap();
    sys.join(Box::new(flcovert::covert::ReceiverAgent::new(0))).unwrap();
    assert!(matches!(fl::pretrain(&mut sys, 1), Err(FlError::NotHonestOnly)));
}
