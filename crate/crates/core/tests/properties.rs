use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use orderflow::clock::SimClock;
use orderflow::fulfillment::{DataMap, Registry, ResultStatus};
use orderflow::management::orchestrator::event_log_text;
use orderflow::msgbus::{Bus, BusError, Message, QueueConfig};
use orderflow::order::{Item, SubOrder, SubOrderKind, SubOrderState};
use orderflow::scenario::{run_scenario, RunOptions, Scenario};
use proptest::prelude::*;
use serde_json::json;

const Q: &str = "work";
const VISIBILITY: Duration = Duration::from_millis(100);

#[derive(Debug, Clone)]
enum Op {
    Send,
    Receive,
    Ack(usize),
    /// Consumer dies holding everything it received.
    Crash,
    Advance(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => Just(Op::Send),
        4 => Just(Op::Receive),
        3 => (0usize..8).prop_map(Op::Ack),
        1 => Just(Op::Crash),
        2 => (1u64..150).prop_map(Op::Advance),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_message_is_acked_once_or_dead(ops in prop::collection::vec(op(), 1..120)) {
        let clock = SimClock::shared();
        let bus = Bus::new(clock.clone());
        bus.declare(QueueConfig::new(Q).visibility_timeout(VISIBILITY).max_redeliveries(2));

        let mut sent = BTreeSet::new();
        let mut acked: BTreeMap<String, u32> = BTreeMap::new();
        let mut held: Vec<Message> = Vec::new();
        let mut n = 0;
        for op in ops {
            match op {
                Op::Send => {
                    n += 1;
                    sent.insert(bus.send(Q, json!(n), None, None).unwrap());
                }
                Op::Receive => match bus.receive(Q) {
                    Ok(m) => held.push(m),
                    Err(BusError::Empty(_)) => {}
                    Err(e) => panic!("{e}"),
                },
                Op::Ack(i) if !held.is_empty() => {
                    let m = held.remove(i % held.len());
                    match bus.ack(&m) {
                        Ok(()) => *acked.entry(m.message_id).or_default() += 1,
                        Err(BusError::NotInFlight(_)) => {}
                        Err(e) => panic!("{e}"),
                    }
                }
                Op::Ack(_) => {}
                Op::Crash => held.clear(),
                Op::Advance(ms) => clock.advance(Duration::from_millis(ms)),
            }
        }
        // A well-behaved consumer drains whatever is left.
        held.clear();
        loop {
            clock.advance(VISIBILITY);
            match bus.receive(Q) {
                Ok(m) => {
                    bus.ack(&m).unwrap();
                    *acked.entry(m.message_id).or_default() += 1;
                }
                Err(BusError::Empty(_)) if bus.in_flight(Q).unwrap() == 0 => break,
                Err(BusError::Empty(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
        let dead: BTreeSet<String> = bus.dead_letters(Q).unwrap().into_iter().map(|m| m.message_id).collect();
        for id in &sent {
            let a = acked.get(id).copied().unwrap_or(0);
            prop_assert!(a <= 1, "{id} acked {a} times");
            prop_assert!((a == 1) != dead.contains(id), "{id}: acked {a}, dead {}", dead.contains(id));
        }
        prop_assert!(acked.keys().all(|k| sent.contains(k)));
        prop_assert!(dead.iter().all(|k| sent.contains(k)));
    }
}

fn suborder(target: &str, services: &[&str], provides: &[&str], line: &str) -> SubOrder {
    SubOrder {
        suborder_id: format!("O1-{line}-{target}"),
        order_id: "O1".into(),
        line_id: Some(line.into()),
        target_id: target.into(),
        kind: SubOrderKind::Service,
        items: services
            .iter()
            .map(|s| Item {
                line_id: line.into(),
                component_code: s.to_lowercase(),
                service_code: s.to_string(),
                params: BTreeMap::new(),
            })
            .collect(),
        requires_data: BTreeSet::new(),
        provides_data: provides.iter().map(|s| s.to_string()).collect(),
        depends_on: BTreeSet::new(),
        state: SubOrderState::Pending,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn repeated_execution_has_one_effect(
        seed in any::<u64>(),
        schedule in prop::collection::vec(0usize..4, 1..20),
    ) {
        let subs = [
            suborder("broadband", &["BROADBAND"], &["cpe.mac"], "L1"),
            suborder("voice", &["TELEPHONY"], &[], "L1"),
            suborder("broadband", &["BROADBAND"], &["cpe.mac"], "L2"),
            suborder("billing", &["BROADBAND", "TELEPHONY"], &[], "L1"),
        ];
        let mut bindings = DataMap::new();
        bindings.insert("customer.id".into(), "C1".into());
        bindings.insert("customer.address".into(), "A 1, Skopje".into());

        let once = Registry::with_defaults(seed);
        let mut first = BTreeMap::new();
        let mut used = BTreeSet::new();
        for &i in &schedule {
            if used.insert(i) {
                first.insert(i, once.execute(&subs[i], &bindings));
            }
        }

        let many = Registry::with_defaults(seed);
        for &i in &schedule {
            let r = many.execute(&subs[i], &bindings);
            prop_assert_eq!(r.status, ResultStatus::Success);
            prop_assert_eq!(&r.provided_data, &first[&i].provided_data);
        }
        prop_assert_eq!(once.dumps(), many.dumps());
        for (i, r) in &first {
            for a in &r.applied_actions {
                prop_assert_eq!(many.effect_count(&subs[*i].target_id, &a.idempotency_key), 1);
            }
        }
    }
}

fn fixture(name: &str) -> Scenario {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/scenarios").join(name);
    Scenario::load(&p).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn same_seed_gives_identical_normalized_logs(
        seed in any::<u64>(),
        file in prop::sample::select(vec!["channels.toml", "multiplay-retry.toml", "reference5-visit-fault.toml", "longlived-auto.toml"]),
    ) {
        let mut s = fixture(file);
        s.seed = seed;
        let a = run_scenario(&s, &RunOptions::default()).unwrap();
        let b = run_scenario(&s, &RunOptions::default()).unwrap();
        prop_assert_eq!(event_log_text(&a.event_log, true), event_log_text(&b.event_log, true));
        prop_assert_eq!(a.final_dumps(), b.final_dumps());
    }
}
