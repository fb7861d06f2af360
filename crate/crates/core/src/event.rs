//! Events, streams, time windows and the CSV / `.evb` record formats.

use std::io::Write;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{invalid, Error, Result};

/// One camera event. `t` is in microseconds, `p` is always -1 or +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: i8,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: i8) -> Self {
        Self { x, y, t, p }
    }
}

/// Half-open interval `[start, end)` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimeWindow {
    pub start: u64,
    pub end: u64,
}

impl TimeWindow {
    pub fn new(start: u64, end: u64) -> Result<Self> {
        if start >= end {
            return Err(invalid(format!("empty time window [{start}, {end})")));
        }
        Ok(Self { start, end })
    }

    #[allow(clippy::len_without_is_empty)] // never empty: `new` rejects start >= end
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn contains(&self, t: u64) -> bool {
        t >= self.start && t < self.end
    }
}

/// How incoming polarity values are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolarityEncoding {
    /// -1 / +1
    #[default]
    Signed,
    /// 0 = OFF, 1 = ON
    ZeroOne,
}

impl PolarityEncoding {
    fn decode(self, raw: i64) -> Result<i8> {
        match (self, raw) {
            (PolarityEncoding::Signed, -1) | (PolarityEncoding::ZeroOne, 0) => Ok(-1),
            (PolarityEncoding::Signed, 1) | (PolarityEncoding::ZeroOne, 1) => Ok(1),
            _ => Err(Error::Polarity(raw)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Bin,
}

impl EventFormat {
    /// Picks the format from a file extension; anything other than `.evb` is CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("evb") => EventFormat::Bin,
            _ => EventFormat::Csv,
        }
    }
}

/// Size of one packed `.evb` record: u16 x, u16 y, i64 t, i8 p.
pub const BIN_RECORD_LEN: usize = 13;

/// Time-ordered events from a single sensor. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates every event against the sensor and sorts by timestamp
    /// (stable, so equal timestamps keep their input order).
    pub fn new(width: u16, height: u16, mut events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("sensor dimensions must be positive"));
        }
        for e in &events {
            check_event(e, width, height)?;
        }
        // slice::sort_by_key is a stable adaptive merge sort: near-sorted
        // recordings cost close to a single pass.
        if !events.is_sorted_by_key(|e| e.t) {
            events.sort_by_key(|e| e.t);
        }
        Ok(Self { width, height, events })
    }

    pub fn empty(width: u16, height: u16) -> Result<Self> {
        Self::new(width, height, Vec::new())
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// Splits the stream into consecutive windows. Every event lands in
    /// exactly one window; the spans borrow from the stream.
    pub fn windows(&self, mode: WindowMode) -> Result<Windows<'_>> {
        match mode {
            WindowMode::Time(0) => return Err(invalid("window length must be > 0 us")),
            WindowMode::Count(0) => return Err(invalid("window event count must be > 0")),
            _ => {}
        }
        Ok(Windows {
            events: &self.events,
            mode,
            pos: 0,
            next_start: self.events.first().map(|e| e.t).unwrap_or(0),
        })
    }
}

fn check_event(e: &Event, width: u16, height: u16) -> Result<()> {
    if e.x >= width || e.y >= height {
        return Err(Error::OutOfBounds {
            x: e.x.into(),
            y: e.y.into(),
            width,
            height,
        });
    }
    if e.p != 1 && e.p != -1 {
        return Err(Error::Polarity(e.p.into()));
    }
    Ok(())
}

/// Fixed-duration or fixed-count windowing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Consecutive windows of this many microseconds, anchored at the first event.
    Time(u64),
    /// Consecutive runs of this many events; the last run may be shorter.
    Count(usize),
}

/// A window and the events that fall into it.
#[derive(Debug, Clone, Copy)]
pub struct WindowSpan<'a> {
    pub window: TimeWindow,
    pub events: &'a [Event],
}

impl WindowSpan<'_> {
    pub fn polarity_sum(&self) -> i64 {
        self.events.iter().map(|e| i64::from(e.p)).sum()
    }
}

pub struct Windows<'a> {
    events: &'a [Event],
    mode: WindowMode,
    pos: usize,
    next_start: u64,
}

impl<'a> Iterator for Windows<'a> {
    type Item = WindowSpan<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.events.len() {
            return None;
        }
        let rest = &self.events[self.pos..];
        match self.mode {
            WindowMode::Time(len) => {
                let window = TimeWindow {
                    start: self.next_start,
                    end: self.next_start.saturating_add(len),
                };
                let n = rest.partition_point(|e| e.t < window.end);
                self.pos += n;
                self.next_start = window.end;
                Some(WindowSpan {
                    window,
                    events: &rest[..n],
                })
            }
            WindowMode::Count(count) => {
                let n = count.min(rest.len());
                let chunk = &rest[..n];
                self.pos += n;
                let window = TimeWindow {
                    start: chunk[0].t,
                    end: chunk[n - 1].t + 1,
                };
                Some(WindowSpan { window, events: chunk })
            }
        }
    }
}

/// Parses a CSV or packed-binary event buffer.
pub fn parse_events(
    bytes: &[u8],
    format: EventFormat,
    width: u16,
    height: u16,
    polarity: PolarityEncoding,
) -> Result<EventStream> {
    let events = match format {
        EventFormat::Csv => parse_csv(bytes, polarity)?,
        EventFormat::Bin => parse_bin(bytes, polarity)?,
    };
    EventStream::new(width, height, events)
}

fn parse_csv(bytes: &[u8], polarity: PolarityEncoding) -> Result<Vec<Event>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut events = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    while reader.read_record(&mut record)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let is_header = first
            && record
                .get(0)
                .is_some_and(|f| f.starts_with(|c: char| c.is_ascii_alphabetic()));
        first = false;
        if is_header {
            continue;
        }
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != 4 {
            return Err(Error::MalformedCsv {
                line,
                msg: format!("expected 4 fields x,y,t,p, found {}", record.len()),
            });
        }
        let field = |i: usize| -> Result<i64> {
            record[i].parse::<i64>().map_err(|_| Error::MalformedCsv {
                line,
                msg: format!("field {} is not an integer: {:?}", i + 1, &record[i]),
            })
        };
        let (x, y, t, p) = (field(0)?, field(1)?, field(2)?, field(3)?);
        let coord = |v: i64| -> Result<u16> {
            u16::try_from(v).map_err(|_| Error::MalformedCsv {
                line,
                msg: format!("coordinate {v} out of range"),
            })
        };
        if t < 0 {
            return Err(Error::MalformedCsv {
                line,
                msg: format!("negative timestamp {t}"),
            });
        }
        events.push(Event {
            x: coord(x)?,
            y: coord(y)?,
            t: t as u64,
            p: polarity.decode(p)?,
        });
    }
    Ok(events)
}

fn parse_bin(bytes: &[u8], polarity: PolarityEncoding) -> Result<Vec<Event>> {
    if !bytes.len().is_multiple_of(BIN_RECORD_LEN) {
        let offset = bytes.len() - bytes.len() % BIN_RECORD_LEN;
        return Err(Error::MalformedBinary {
            offset,
            msg: format!("truncated record: {} trailing bytes", bytes.len() % BIN_RECORD_LEN),
        });
    }
    bytes
        .chunks_exact(BIN_RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            let offset = i * BIN_RECORD_LEN;
            let t = LittleEndian::read_i64(&rec[4..12]);
            if t < 0 {
                return Err(Error::MalformedBinary {
                    offset,
                    msg: format!("negative timestamp {t}"),
                });
            }
            Ok(Event {
                x: LittleEndian::read_u16(&rec[0..2]),
                y: LittleEndian::read_u16(&rec[2..4]),
                t: t as u64,
                p: polarity.decode(i64::from(rec[12] as i8))?,
            })
        })
        .collect()
}

/// Canonical CSV: `x,y,t,p` header, signed polarity, LF endings.
pub fn write_events_csv<W: Write>(stream: &EventStream, mut out: W) -> Result<()> {
    out.write_all(b"x,y,t,p\n")?;
    for e in stream.events() {
        writeln!(out, "{},{},{},{}", e.x, e.y, e.t, e.p)?;
    }
    Ok(())
}

/// Packed little-endian `.evb` records, no header.
pub fn write_events_bin<W: Write>(stream: &EventStream, mut out: W) -> Result<()> {
    for e in stream.events() {
        let t = i64::try_from(e.t).map_err(|_| invalid("timestamp exceeds i64 range"))?;
        out.write_u16::<LittleEndian>(e.x)?;
        out.write_u16::<LittleEndian>(e.y)?;
        out.write_i64::<LittleEndian>(t)?;
        out.write_i8(e.p)?;
    }
    Ok(())
}

pub fn write_events<W: Write>(stream: &EventStream, format: EventFormat, out: W) -> Result<()> {
    match format {
        EventFormat::Csv => write_events_csv(stream, out),
        EventFormat::Bin => write_events_bin(stream, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(s: &str) -> Result<EventStream> {
        parse_events(s.as_bytes(), EventFormat::Csv, 346, 260, PolarityEncoding::Signed)
    }

    #[test]
    fn csv_fields_map_directly() {
        let s = csv("3,4,100,1\n3,4,200,-1").unwrap();
        assert_eq!(s.events(), &[Event::new(3, 4, 100, 1), Event::new(3, 4, 200, -1)]);
    }

    #[test]
    fn empty_input_is_empty_stream() {
        assert!(csv("").unwrap().is_empty());
        let b = parse_events(&[], EventFormat::Bin, 346, 260, PolarityEncoding::Signed).unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn header_is_optional() {
        let s = csv("x,y,t,p\n1,2,3,-1\n").unwrap();
        assert_eq!(s.events(), &[Event::new(1, 2, 3, -1)]);
    }

    #[test]
    fn zero_one_polarity_remaps() {
        let s = parse_events(
            b"1,1,5,0\n1,1,6,1",
            EventFormat::Csv,
            346,
            260,
            PolarityEncoding::ZeroOne,
        )
        .unwrap();
        assert_eq!(s.events()[0].p, -1);
        assert_eq!(s.events()[1].p, 1);
        // without the flag a zero polarity is rejected
        assert!(matches!(csv("1,1,5,0"), Err(Error::Polarity(0))));
    }

    #[test]
    fn malformed_row_reports_line() {
        match csv("1,2,3,1\n1,2,x,1\n") {
            Err(Error::MalformedCsv { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(csv("1,2,3\n"), Err(Error::MalformedCsv { line: 1, .. })));
        assert!(matches!(csv("1,2,-3,1\n"), Err(Error::MalformedCsv { .. })));
    }

    #[test]
    fn out_of_bounds_rejected() {
        assert!(matches!(csv("346,0,1,1"), Err(Error::OutOfBounds { .. })));
        assert!(matches!(csv("0,260,1,1"), Err(Error::OutOfBounds { .. })));
        assert!(matches!(csv("0,0,1,2"), Err(Error::Polarity(2))));
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let s = EventStream::new(10, 10, vec![Event::new(1, 2, 3, 1)]).unwrap();
        let mut buf = Vec::new();
        write_events_bin(&s, &mut buf).unwrap();
        buf.extend_from_slice(&[0, 1, 2]);
        match parse_events(&buf, EventFormat::Bin, 10, 10, PolarityEncoding::Signed) {
            Err(Error::MalformedBinary { offset, .. }) => assert_eq!(offset, 13),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unsorted_input_sorted_stably() {
        let s = csv("1,0,20,1\n2,0,10,1\n3,0,20,-1\n4,0,10,-1").unwrap();
        let xs: Vec<u16> = s.events().iter().map(|e| e.x).collect();
        assert_eq!(xs, vec![2, 4, 1, 3]);
    }

    #[test]
    fn time_windows_half_open() {
        let s = csv("0,0,0,1\n0,0,99,1\n0,0,100,1").unwrap();
        let w: Vec<_> = s.windows(WindowMode::Time(100)).unwrap().collect();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].window, TimeWindow { start: 0, end: 100 });
        assert_eq!(w[0].events.len(), 2);
        assert_eq!(w[1].window, TimeWindow { start: 100, end: 200 });
        assert_eq!(w[1].events.len(), 1);
    }

    #[test]
    fn single_event_single_window() {
        let s = csv("0,0,0,1").unwrap();
        let w: Vec<_> = s.windows(WindowMode::Time(100)).unwrap().collect();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].window, TimeWindow { start: 0, end: 100 });
    }

    #[test]
    fn count_windows() {
        let s = csv("0,0,5,1\n0,0,7,1\n0,0,9,1").unwrap();
        let w: Vec<_> = s.windows(WindowMode::Count(2)).unwrap().collect();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].window, TimeWindow { start: 5, end: 8 });
        assert_eq!(w[1].window, TimeWindow { start: 9, end: 10 });
        assert_eq!(w[1].events.len(), 1);
    }

    #[test]
    fn zero_window_rejected() {
        let s = EventStream::empty(4, 4).unwrap();
        assert!(s.windows(WindowMode::Time(0)).is_err());
        assert!(s.windows(WindowMode::Count(0)).is_err());
        assert_eq!(s.windows(WindowMode::Time(10)).unwrap().count(), 0);
    }
}
