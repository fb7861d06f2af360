//! Deterministic synthetic event streams for tests and benchmarks.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::error::{invalid, Error, Result};
use crate::event::{Event, EventStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Vertical bar sweeping left to right at constant speed.
    MovingBar,
    /// Uniform over the sensor.
    Random,
    /// Two Gaussian clusters, left one ON and right one OFF.
    TwoBlobs,
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving_bar" => Ok(Pattern::MovingBar),
            "random" => Ok(Pattern::Random),
            "two_blobs" => Ok(Pattern::TwoBlobs),
            other => Err(invalid(format!("unknown pattern {other:?}"))),
        }
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pattern::MovingBar => "moving_bar",
            Pattern::Random => "random",
            Pattern::TwoBlobs => "two_blobs",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub pattern: Pattern,
    /// Events per second.
    pub rate: f64,
    pub duration_us: u64,
    pub seed: u64,
    pub width: u16,
    pub height: u16,
    /// Bar width in pixels (moving_bar only).
    pub bar_width: u16,
    /// Bar speed in pixels per second (moving_bar only).
    pub bar_speed: f64,
    /// Poisson arrivals instead of evenly spaced timestamps.
    pub jitter: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            pattern: Pattern::MovingBar,
            rate: 60_000.0,
            duration_us: 1_000_000,
            seed: 0,
            width: crate::DEFAULT_SENSOR_WIDTH,
            height: crate::DEFAULT_SENSOR_HEIGHT,
            bar_width: 1,
            bar_speed: 200.0,
            jitter: false,
        }
    }
}

impl SynthSpec {
    /// Left edge of the bar at time `t` (microseconds from stream start).
    pub fn bar_column(&self, t: u64) -> u16 {
        let span = u64::from(self.width.saturating_sub(self.bar_width)) + 1;
        let travelled = (self.bar_speed * t as f64 / 1e6).floor() as u64;
        (travelled % span) as u16
    }

    fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(invalid("rate must be positive"));
        }
        if self.duration_us == 0 {
            return Err(invalid("duration must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("sensor dimensions must be positive"));
        }
        if self.pattern == Pattern::MovingBar && (self.bar_width == 0 || self.bar_width > self.width) {
            return Err(invalid("bar width must be in [1, sensor width]"));
        }
        Ok(())
    }
}

/// Generates a sorted stream. Same spec, same bytes.
pub fn synth_events(spec: &SynthSpec) -> Result<EventStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let times = timestamps(spec, &mut rng);
    let (w, h) = (spec.width, spec.height);
    let mut events = Vec::with_capacity(times.len());
    match spec.pattern {
        Pattern::MovingBar => {
            for t in times {
                let offset = rng.random_range(0..spec.bar_width);
                let x = spec.bar_column(t) + offset;
                let y = rng.random_range(0..h);
                let p = if offset < spec.bar_width / 2 { -1 } else { 1 };
                events.push(Event { x, y, t, p });
            }
        }
        Pattern::Random => {
            for t in times {
                let x = rng.random_range(0..w);
                let y = rng.random_range(0..h);
                let p = if rng.random_bool(0.5) { 1 } else { -1 };
                events.push(Event { x, y, t, p });
            }
        }
        Pattern::TwoBlobs => {
            let sigma = f64::from(w.min(h)) / 12.0;
            let noise = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
            let centers = [
                (f64::from(w) / 3.0, f64::from(h) / 2.0),
                (2.0 * f64::from(w) / 3.0, f64::from(h) / 2.0),
            ];
            for t in times {
                let blob = usize::from(rng.random_bool(0.5));
                let (cx, cy) = centers[blob];
                let x = (cx + noise.sample(&mut rng)).round().clamp(0.0, f64::from(w - 1));
                let y = (cy + noise.sample(&mut rng)).round().clamp(0.0, f64::from(h - 1));
                let p = if blob == 0 { 1 } else { -1 };
                events.push(Event {
                    x: x as u16,
                    y: y as u16,
                    t,
                    p,
                });
            }
        }
    }
    EventStream::new(w, h, events)
}

fn timestamps(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<u64> {
    if spec.jitter {
        let gap = Exp::new(spec.rate / 1e6).expect("rate validated positive");
        let mut out = Vec::new();
        let mut t = 0.0f64;
        loop {
            t += gap.sample(rng);
            if t >= spec.duration_us as f64 {
                return out;
            }
            out.push(t as u64);
        }
    }
    let count = (spec.rate * spec.duration_us as f64 / 1e6).round() as u64;
    (0..count)
        .map(|i| (u128::from(i) * u128::from(spec.duration_us) / u128::from(count)) as u64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::write_events_bin;

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec {
            pattern: Pattern::Random,
            seed: 7,
            ..Default::default()
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_events_bin(&synth_events(&spec).unwrap(), &mut a).unwrap();
        write_events_bin(&synth_events(&spec).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn bar_of_width_one_sits_on_its_column() {
        let spec = SynthSpec::default();
        let s = synth_events(&spec).unwrap();
        assert!(s.events().iter().all(|e| e.x == spec.bar_column(e.t)));
    }

    #[test]
    fn deterministic_spacing_hits_exact_count() {
        let spec = SynthSpec {
            pattern: Pattern::Random,
            rate: 1000.0,
            duration_us: 1_000_000,
            ..Default::default()
        };
        let s = synth_events(&spec).unwrap();
        assert_eq!(s.len(), 1000);
        assert!(s.events().iter().all(|e| e.t < 1_000_000));
    }

    #[test]
    fn jittered_stream_is_sorted_and_bounded() {
        let spec = SynthSpec {
            pattern: Pattern::TwoBlobs,
            jitter: true,
            seed: 3,
            ..Default::default()
        };
        let s = synth_events(&spec).unwrap();
        assert!(s.events().windows(2).all(|w| w[0].t <= w[1].t));
        let n = s.len() as f64;
        assert!((n - 60_000.0).abs() < 1_500.0, "{n}");
    }

    #[test]
    fn unknown_pattern_and_bad_spec() {
        assert!("spiral".parse::<Pattern>().is_err());
        assert_eq!("two_blobs".parse::<Pattern>().unwrap(), Pattern::TwoBlobs);
        let bad = SynthSpec {
            rate: 0.0,
            ..Default::default()
        };
        assert!(synth_events(&bad).is_err());
    }
}
