#![allow(dead_code)]

use evpose_core::{Event, EventStream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sorted random events on a `width x height` sensor spanning `[t0, t0 + span)`.
pub fn random_events(rng: &mut impl Rng, n: usize, width: u16, height: u16, t0: u64, span: u64) -> Vec<Event> {
    let mut ev: Vec<Event> = (0..n)
        .map(|_| {
            Event::new(
                rng.random_range(0..width),
                rng.random_range(0..height),
                t0 + rng.random_range(0..span),
                if rng.random_bool(0.5) { 1 } else { -1 },
            )
        })
        .collect();
    ev.sort_by_key(|e| e.t);
    ev
}

pub fn random_stream(rng: &mut impl Rng, n: usize, width: u16, height: u16) -> EventStream {
    let span = rng.random_range(1..1_000_000);
    EventStream::new(width, height, random_events(rng, n, width, height, 0, span)).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
