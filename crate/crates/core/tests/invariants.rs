use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crir::agent::{add_exploration_noise, resolve_action};
use crir::env::{load_ml1m_dir, ml1m_get_reward, Ml1mConfig, Ml1mEnv, MAX_EPISODE_STEPS};
use crir::harness::{default_data_dir, mean_ci, tail_mean};
use crir::numcore::{Group, ParamStore, Tensor};
use crir::replay::{ReplayBuffer, SumTree, Transition};
use crir::staterep::{truncate_history, BehaviorRecord, ItemRef, UserProfile};

fn record(k: usize) -> BehaviorRecord {
    BehaviorRecord {
        item: ItemRef::Id(k),
        feedback: 0.0,
        step_index: k,
    }
}

fn transition(tag: usize) -> Transition {
    let h: Arc<[BehaviorRecord]> = Arc::from(vec![record(tag)]);
    Transition {
        user: UserProfile::with_id(0),
        history: h.clone(),
        action: vec![tag as f64],
        reward: 0.0,
        next_history: h,
        done: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn sum_tree_stays_consistent(
        leaves in 1usize..40,
        writes in prop::collection::vec((0usize..40, 0.0f64..10.0), 1..200),
    ) {
        let mut tree = SumTree::new(leaves);
        let mut shadow = vec![0.0; leaves];
        for (i, v) in writes {
            let i = i % leaves;
            tree.set(i, v);
            shadow[i] = v;
        }
        prop_assert!(tree.consistency_error() < 1e-9);
        let total: f64 = shadow.iter().sum();
        prop_assert!((tree.total() - total).abs() < 1e-9);
        if total > 0.0 {
            let hit = tree.find(total * 0.999_999);
            prop_assert!(hit < leaves && shadow[hit] > 0.0);
        }
    }

    #[test]
    fn buffer_root_tracks_priorities(
        capacity in 1usize..16,
        pushes in 1usize..40,
        tds in prop::collection::vec(0.0f64..5.0, 1..40),
        seed in any::<u64>(),
    ) {
        let mut buf = ReplayBuffer::new(capacity, 0.6).unwrap();
        for k in 0..pushes {
            buf.push(transition(k));
        }
        prop_assert_eq!(buf.len(), pushes.min(capacity));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = buf.len();
        let s = buf.sample_per(batch, 0.4, &mut rng).unwrap();
        prop_assert!(s.weights.iter().all(|w| *w > 0.0 && *w <= 1.0));
        let tds: Vec<f64> = (0..batch).map(|k| tds[k % tds.len()]).collect();
        buf.update_priorities(&s.indices, &tds).unwrap();
        let want: f64 = (0..buf.len()).map(|i| buf.priority(i).unwrap().powf(0.6)).sum();
        prop_assert!((buf.tree().total() - want).abs() < 1e-9);
        prop_assert!(buf.tree().consistency_error() < 1e-9);
    }

    #[test]
    fn reward_range_and_repeat_penalty(rate in prop::option::of(1u8..=5), repeats in 0usize..60) {
        let r = ml1m_get_reward(rate, repeats);
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!(ml1m_get_reward(rate, repeats + 1) <= r || repeats == 0);
        if repeats > 0 {
            prop_assert!(r <= ml1m_get_reward(rate, 0) || rate.is_none() || rate == Some(1));
        }
    }

    #[test]
    fn truncation_keeps_newest(len in 0usize..80, max in 0usize..60) {
        let h: Vec<BehaviorRecord> = (0..len).map(record).collect();
        let t = truncate_history(&h, max);
        prop_assert_eq!(t.len(), len.min(max));
        if let Some(last) = t.last() {
            prop_assert_eq!(last.step_index, len - 1);
        }
    }

    #[test]
    fn soft_updates_match_closed_form(
        k in 1i32..400,
        tau in 0.0f64..1.0,
        p in -3.0f64..3.0,
    ) {
        let mut store = ParamStore::new();
        let on = store.add("on", Group::Actor, Tensor::full(1, 1, p));
        let tg = store.add("tg", Group::Target, Tensor::zeros(1, 1));
        for _ in 0..k {
            store.soft_update(&[(on, tg)], tau).unwrap();
        }
        let want = p * (1.0 - (1.0 - tau).powi(k));
        prop_assert!((store.get(tg).item() - want).abs() < 1e-12);
    }

    #[test]
    fn noisy_actions_stay_in_box(
        action in prop::collection::vec(-1.0f64..1.0, 1..20),
        sigma in 0.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let mut a = action.clone();
        add_exploration_noise(&mut a, sigma, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        if sigma == 0.0 {
            prop_assert_eq!(a, action);
        }
    }

    #[test]
    fn resolved_items_are_distinct_and_ranked(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..20),
        action in prop::collection::vec(-1.0f64..1.0, 3),
        k in 1usize..20,
    ) {
        let k = k.min(rows.len());
        let table = Tensor::from_rows(&rows).unwrap();
        let ids = resolve_action(&action, &table, k);
        prop_assert_eq!(ids.len(), k);
        let mut seen = ids.clone();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), k);
        let cos = |r: &[f64]| {
            let dot: f64 = r.iter().zip(&action).map(|(x, y)| x * y).sum();
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt()
                * action.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 { 0.0 } else { dot / n }
        };
        for w in ids.windows(2) {
            prop_assert!(cos(&rows[w[0]]) >= cos(&rows[w[1]]) - 1e-12);
        }
        let worst_kept = cos(&rows[*ids.last().unwrap()]);
        for (i, r) in rows.iter().enumerate() {
            if !ids.contains(&i) {
                prop_assert!(cos(r) <= worst_kept + 1e-12);
            }
        }
    }

    #[test]
    fn interval_contains_mean(values in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let (m, h) = mean_ci(&values);
        prop_assert!(h >= 0.0);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        let c = vec![m; values.len()];
        let t = tail_mean(&c, 0.1).unwrap();
        prop_assert!((t - m).abs() <= 1e-12 * (1.0 + m.abs()));
    }
}

#[test]
fn fixture_episodes_respect_bounds() {
    let table = load_ml1m_dir(default_data_dir()).unwrap();
    assert_eq!(table.user_count(), 50);
    let items = table.item_count();
    let mut env = Ml1mEnv::new(table, Ml1mConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for episode in 0..20 {
        env.reset(&mut rng);
        let mut steps = 0;
        loop {
            let picks: Vec<usize> = (0..10)
                .map(|k| (episode * 31 + steps * 7 + k) % items)
                .collect();
            let out = env.step(&picks, &mut rng).unwrap();
            steps += 1;
            assert!((-1.0..=1.0).contains(&out.reward));
            assert_eq!(env.state().history.len(), steps);
            if out.done {
                break;
            }
        }
        assert_eq!(steps, MAX_EPISODE_STEPS);
    }
}
