//! Concurrency properties of the per-session message bus.

use std::collections::BTreeMap;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Duration;

use zagii_core::events::{BusEvent, EventPayload, Topic};
use zagii_core::message_bus::MessageBus;

const PRODUCERS: usize = 2;
const SUBSCRIBERS: usize = 2;

fn tag(session: &str, producer: usize, i: usize) -> EventPayload {
    EventPayload::PlayerAction { utterance: format!("{session}/{producer}/{i}") }
}

fn parse(event: &BusEvent) -> (String, usize, usize) {
    let EventPayload::PlayerAction { utterance } = &event.payload else { panic!("unexpected payload") };
    let mut parts = utterance.split('/');
    let session = parts.next().unwrap().to_string();
    (session, parts.next().unwrap().parse().unwrap(), parts.next().unwrap().parse().unwrap())
}

/// Runs producers and subscribers against one session and checks what every
/// subscriber saw.
fn exercise(bus: Arc<MessageBus>, session: String, per_producer: usize) {
    let total = per_producer * PRODUCERS;
    let mut subs: Vec<_> = (0..SUBSCRIBERS).map(|_| bus.subscribe(&session, Some(&[Topic::PlayerAction])).unwrap()).collect();
    let start = Arc::new(Barrier::new(PRODUCERS));
    let readers: Vec<_> = subs
        .drain(..)
        .map(|mut sub| {
            thread::spawn(move || {
                let mut seen = Vec::with_capacity(total);
                while seen.len() < total {
                    match sub.recv_timeout(Duration::from_secs(10)) {
                        Some(e) => seen.push(e),
                        None => break,
                    }
                }
                assert!(sub.recv_timeout(Duration::from_millis(50)).is_none(), "extra events delivered");
                seen
            })
        })
        .collect();
    let writers: Vec<_> = (0..PRODUCERS)
        .map(|p| {
            let (bus, session, start) = (bus.clone(), session.clone(), start.clone());
            thread::spawn(move || {
                start.wait();
                for i in 0..per_producer {
                    bus.publish(&session, i as u64, tag(&session, p, i)).unwrap();
                }
            })
        })
        .collect();
    for w in writers {
        w.join().unwrap();
    }
    for r in readers {
        let seen = r.join().unwrap();
        assert_eq!(seen.len(), total);
        for pair in seen.windows(2) {
            assert!(pair[0].seq < pair[1].seq);
        }
        let mut next: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &seen {
            assert_eq!(e.session_id, session);
            let (tagged, producer, i) = parse(e);
            assert_eq!(tagged, session, "event leaked across sessions");
            let expected = next.entry(producer).or_default();
            assert_eq!(i, *expected, "producer order or exactly-once violated");
            *expected += 1;
        }
        assert!(next.values().all(|n| *n == per_producer));
    }
    let log = bus.log(&session).unwrap();
    assert_eq!(log.len(), total);
    assert!(log.iter().enumerate().all(|(i, e)| e.seq == i as u64 + 1));
}

#[test]
fn ten_thousand_events_across_eight_sessions() {
    let bus = Arc::new(MessageBus::new());
    let sessions: Vec<String> = (0..8).map(|i| format!("sess-{i}")).collect();
    for s in &sessions {
        bus.open_session(s).unwrap();
    }
    let handles: Vec<_> = sessions
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (bus, s) = (bus.clone(), s.clone());
            // The first session carries the full load; the rest run alongside.
            let per_producer = if i == 0 { 5_000 } else { 1_000 };
            thread::spawn(move || exercise(bus, s, per_producer))
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
}

#[test]
fn topic_filters_and_replay_agree_with_the_log() {
    let bus = MessageBus::new();
    bus.open_session("s").unwrap();
    let mut actions = bus.subscribe("s", Some(&[Topic::PlayerAction])).unwrap();
    for i in 0..20 {
        bus.publish("s", i, tag("s", 0, i as usize)).unwrap();
        bus.publish("s", i, EventPayload::ChapterAdvanced { from: i as usize, to: i as usize + 1 }).unwrap();
    }
    let got = actions.drain();
    assert_eq!(got.len(), 20);
    assert!(got.iter().all(|e| e.topic() == Topic::PlayerAction));
    let mut replay = bus.replay_from("s", 11, None).unwrap();
    let replayed = replay.drain();
    assert_eq!(replayed, bus.log("s").unwrap()[10..].to_vec());
}
