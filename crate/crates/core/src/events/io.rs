//! Text event files: a `t_us,x,y,p` header, then one event per line.

use std::io::Write;
use std::path::Path;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "t_us,x,y,p";

pub fn render_events(stream: &EventStream) -> String {
    let mut out = String::with_capacity(16 * (stream.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for e in &stream.events {
        let p = match e.p {
            Polarity::Positive => "1",
            Polarity::Negative => "-1",
        };
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, p));
    }
    out
}

pub fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(render_events(stream).as_bytes()).map_err(|e| Error::io(path, e))
}

fn parse_line(line: &str, lineno: usize, width: usize, height: usize) -> Result<Event> {
    let err = |msg: String| Error::Parse { line: lineno, msg };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let [t, x, y, p] = fields[..] else {
        return Err(err(format!("expected 4 comma-separated fields, got {}", fields.len())));
    };
    let t: u64 = t.parse().map_err(|_| err(format!("bad timestamp {t:?}")))?;
    let x: u32 = x.parse().map_err(|_| err(format!("bad x coordinate {x:?}")))?;
    let y: u32 = y.parse().map_err(|_| err(format!("bad y coordinate {y:?}")))?;
    let p = match p {
        "1" | "+1" => Polarity::Positive,
        "-1" => Polarity::Negative,
        other => return Err(err(format!("bad polarity {other:?}"))),
    };
    if x as usize >= width || y as usize >= height {
        return Err(err(format!("coordinates ({x}, {y}) outside {width}x{height}")));
    }
    Ok(Event { t, x, y, p })
}

/// Parses event text for a `width × height` sensor. The time window is
/// `range` when given, otherwise the span of the first and last event.
/// Line numbers in errors are 1-based and count the header.
pub fn parse_events(text: &str, width: usize, height: usize, range: Option<(u64, u64)>) -> Result<EventStream> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((_, h)) => return Err(Error::Parse { line: 1, msg: format!("expected header {CSV_HEADER:?}, got {h:?}") }),
        None => return Err(Error::Parse { line: 1, msg: "missing header".into() }),
    }
    let mut events: Vec<Event> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let e = parse_line(line, i + 1, width, height)?;
        if let Some(prev) = events.last() {
            if e.t < prev.t {
                return Err(Error::Parse { line: i + 1, msg: format!("timestamp {} precedes {}", e.t, prev.t) });
            }
        }
        events.push(e);
    }
    let (t_start, t_end) = range.unwrap_or_else(|| (events.first().map_or(0, |e| e.t), events.last().map_or(0, |e| e.t)));
    EventStream::new(width, height, t_start, t_end, events)
}

pub fn read_events(path: &Path, width: usize, height: usize, range: Option<(u64, u64)>) -> Result<EventStream> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_events(&text, width, height, range)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_line() {
        let s = parse_events("t_us,x,y,p\n1500,3,7,-1\n", 8, 8, None).unwrap();
        assert_eq!(s.events, vec![Event { t: 1500, x: 3, y: 7, p: Polarity::Negative }]);
    }

    #[test]
    fn bad_timestamp_names_line() {
        let e = parse_events("t_us,x,y,p\n1,0,0,1\nabc,3,7,1\n", 8, 8, None).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
    }

    #[test]
    fn rejects_out_of_bounds_and_bad_header() {
        assert!(matches!(parse_events("t_us,x,y,p\n5,8,0,1\n", 8, 8, None), Err(Error::Parse { line: 2, .. })));
        assert!(parse_events("t,x,y,p\n", 8, 8, None).is_err());
        assert!(parse_events("t_us,x,y,p\n5,0,0,2\n", 8, 8, None).is_err());
        assert!(parse_events("t_us,x,y,p\n5,0,0,1\n4,0,0,1\n", 8, 8, None).is_err());
    }

    #[test]
    fn text_roundtrip() {
        let ev = vec![
            Event { t: 3, x: 0, y: 1, p: Polarity::Positive },
            Event { t: 3, x: 2, y: 1, p: Polarity::Negative },
            Event { t: 90, x: 1, y: 0, p: Polarity::Positive },
        ];
        let s = EventStream::new(3, 2, 0, 100, ev).unwrap();
        let back = parse_events(&render_events(&s), 3, 2, Some((0, 100))).unwrap();
        assert_eq!(back, s);
    }
}
