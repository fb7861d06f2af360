mod common;

use evpose_core::event::{parse_events, write_events, EventFormat, PolarityEncoding};
use evpose_core::{Event, EventStream, WindowMode};
use proptest::prelude::*;

fn arb_events() -> impl Strategy<Value = Vec<Event>> {
    prop::collection::vec(
        (0u16..32, 0u16..24, 0u64..50_000, prop::bool::ANY)
            .prop_map(|(x, y, t, on)| Event::new(x, y, t, if on { 1 } else { -1 })),
        0..400,
    )
}

fn arb_mode() -> impl Strategy<Value = WindowMode> {
    prop_oneof![
        (1u64..20_000).prop_map(WindowMode::Time),
        (1usize..150).prop_map(WindowMode::Count),
    ]
}

proptest! {
    #[test]
    fn windows_partition_the_stream(events in arb_events(), mode in arb_mode()) {
        let stream = EventStream::new(32, 24, events).unwrap();
        let mut seen = Vec::new();
        let mut prev_end = None;
        for span in stream.windows(mode).unwrap() {
            for e in span.events {
                prop_assert!(span.window.contains(e.t));
            }
            if let (Some(end), WindowMode::Time(_)) = (prev_end, mode) {
                prop_assert_eq!(span.window.start, end);
            }
            if let WindowMode::Count(n) = mode {
                prop_assert!(span.events.len() <= n && !span.events.is_empty());
            }
            prev_end = Some(span.window.end);
            seen.extend_from_slice(span.events);
        }
        prop_assert_eq!(seen.as_slice(), stream.events());
    }

    #[test]
    fn serialization_round_trips(events in arb_events()) {
        let stream = EventStream::new(32, 24, events).unwrap();
        for format in [EventFormat::Csv, EventFormat::Bin] {
            let mut buf = Vec::new();
            write_events(&stream, format, &mut buf).unwrap();
            let back = parse_events(&buf, format, 32, 24, PolarityEncoding::Signed).unwrap();
            prop_assert_eq!(back.events(), stream.events());
        }
    }

    #[test]
    fn sorting_is_stable(events in arb_events()) {
        let tagged: Vec<(usize, Event)> = events.iter().copied().enumerate().collect();
        let stream = EventStream::new(32, 24, events).unwrap();
        let mut oracle = tagged;
        oracle.sort_by_key(|(i, e)| (e.t, *i));
        let expected: Vec<Event> = oracle.into_iter().map(|(_, e)| e).collect();
        prop_assert_eq!(stream.events(), expected.as_slice());
    }
}

#[test]
fn out_of_bounds_and_bad_polarity_rejected() {
    assert!(EventStream::new(4, 4, vec![Event::new(4, 0, 0, 1)]).is_err());
    assert!(EventStream::new(4, 4, vec![Event::new(0, 0, 0, 0)]).is_err());
    assert!(parse_events(b"1,1,5,2\n", EventFormat::Csv, 4, 4, PolarityEncoding::Signed).is_err());
    assert!(parse_events(&[0u8; 12], EventFormat::Bin, 4, 4, PolarityEncoding::Signed).is_err());
}
