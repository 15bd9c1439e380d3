use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Event, EventError, GroundTruthBox, Polarity};

/// Magic header of the packed binary format.
pub const PACKED_MAGIC: &[u8; 8] = b"SPKEVT01";
const RECORD_LEN: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    /// `x,y,t,p` per line, optional header line.
    Csv,
    /// 8-byte magic then little-endian records `u16 x, u16 y, u64 t, i8 p`.
    Packed,
}

impl EventFormat {
    /// Guesses from the file extension; anything other than `.csv` is packed.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EventFormat::Csv,
            _ => EventFormat::Packed,
        }
    }
}

enum Source {
    Csv { reader: BufReader<File>, line: String },
    Packed { reader: BufReader<File> },
}

/// Streaming reader yielding events in file order with timestamp validation.
pub struct EventReader {
    source: Source,
    offset: u64,
    index: usize,
    prev_t: Option<u64>,
    first_line: bool,
    failed: bool,
}

pub fn parse_event_file(path: &Path, format: EventFormat) -> Result<EventReader, EventError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut offset = 0;
    let source = match format {
        EventFormat::Csv => Source::Csv {
            reader,
            line: String::new(),
        },
        EventFormat::Packed => {
            let mut magic = [0u8; 8];
            reader.read_exact(&mut magic).map_err(|_| EventError::Malformed {
                offset: 0,
                reason: "missing packed-event header".into(),
            })?;
            if &magic != PACKED_MAGIC {
                return Err(EventError::Malformed {
                    offset: 0,
                    reason: "bad packed-event magic".into(),
                });
            }
            offset = 8;
            Source::Packed { reader }
        }
    };
    Ok(EventReader {
        source,
        offset,
        index: 0,
        prev_t: None,
        first_line: true,
        failed: false,
    })
}

pub fn read_events(path: &Path, format: EventFormat) -> Result<Vec<Event>, EventError> {
    parse_event_file(path, format)?.collect()
}

fn parse_csv_line(line: &str, offset: u64) -> Result<Event, EventError> {
    let malformed = |reason: String| EventError::Malformed { offset, reason };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(malformed(format!("expected 4 fields, found {}", fields.len())));
    }
    let int = |s: &str, name: &str| s.parse::<i64>().map_err(|_| malformed(format!("bad {name} field {s:?}")));
    let (x, y, t, p) = (int(fields[0], "x")?, int(fields[1], "y")?, int(fields[2], "t")?, int(fields[3], "p")?);
    let x = u16::try_from(x).map_err(|_| malformed(format!("x {x} out of range")))?;
    let y = u16::try_from(y).map_err(|_| malformed(format!("y {y} out of range")))?;
    let t = u64::try_from(t).map_err(|_| malformed(format!("negative timestamp {t}")))?;
    let p = Polarity::from_i64(p).ok_or(EventError::Polarity { offset, value: p })?;
    Ok(Event { x, y, t, p })
}

impl EventReader {
    fn next_raw(&mut self) -> Option<Result<Event, EventError>> {
        match &mut self.source {
            Source::Csv { reader, line } => loop {
                line.clear();
                let start = self.offset;
                match reader.read_line(line) {
                    Ok(0) => return None,
                    Ok(n) => self.offset += n as u64,
                    Err(e) => return Some(Err(e.into())),
                }
                let content = line.trim();
                let was_first = std::mem::replace(&mut self.first_line, false);
                if content.is_empty() {
                    continue;
                }
                let looks_like_header = content
                    .split(',')
                    .next()
                    .map(|f| f.trim().parse::<i64>().is_err())
                    .unwrap_or(false);
                if was_first && looks_like_header {
                    continue;
                }
                return Some(parse_csv_line(content, start));
            },
            Source::Packed { reader } => {
                let mut rec = [0u8; RECORD_LEN];
                let start = self.offset;
                let mut filled = 0;
                while filled < RECORD_LEN {
                    match reader.read(&mut rec[filled..]) {
                        Ok(0) => break,
                        Ok(n) => filled += n,
                        Err(e) => return Some(Err(e.into())),
                    }
                }
                if filled == 0 {
                    return None;
                }
                if filled < RECORD_LEN {
                    return Some(Err(EventError::Malformed {
                        offset: start,
                        reason: format!("truncated record ({filled} of {RECORD_LEN} bytes)"),
                    }));
                }
                self.offset += RECORD_LEN as u64;
                let x = u16::from_le_bytes([rec[0], rec[1]]);
                let y = u16::from_le_bytes([rec[2], rec[3]]);
                let t = u64::from_le_bytes(rec[4..12].try_into().expect("8 bytes"));
                let raw_p = rec[12] as i8;
                match Polarity::from_i64(raw_p as i64) {
                    Some(p) => Some(Ok(Event { x, y, t, p })),
                    None => Some(Err(EventError::Polarity {
                        offset: start,
                        value: raw_p as i64,
                    })),
                }
            }
        }
    }
}

impl Iterator for EventReader {
    type Item = Result<Event, EventError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let item = self.next_raw()?;
        let item = item.and_then(|e| {
            if let Some(prev) = self.prev_t {
                if e.t < prev {
                    return Err(EventError::NonMonotone {
                        index: self.index,
                        t: e.t,
                        prev,
                    });
                }
            }
            self.prev_t = Some(e.t);
            self.index += 1;
            Ok(e)
        });
        self.failed = item.is_err();
        Some(item)
    }
}

pub fn write_event_file(path: &Path, format: EventFormat, events: &[Event]) -> Result<(), EventError> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        EventFormat::Csv => {
            writeln!(w, "x,y,t,p")?;
            for e in events {
                writeln!(w, "{},{},{},{}", e.x, e.y, e.t, e.p.sign())?;
            }
        }
        EventFormat::Packed => {
            w.write_all(PACKED_MAGIC)?;
            for e in events {
                w.write_all(&e.x.to_le_bytes())?;
                w.write_all(&e.y.to_le_bytes())?;
                w.write_all(&e.t.to_le_bytes())?;
                w.write_all(&[e.p.sign() as u8])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ground_truth(path: &Path, boxes: &[GroundTruthBox]) -> Result<(), EventError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "frame,cx,cy,w,h")?;
    for b in boxes {
        writeln!(w, "{},{},{},{},{}", b.frame, b.cx, b.cy, b.w, b.h)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthBox>, EventError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let start = offset;
        offset += line.len() as u64 + 1;
        let content = line.trim();
        if content.is_empty() || (i == 0 && content.starts_with("frame")) {
            continue;
        }
        let f: Vec<&str> = content.split(',').map(str::trim).collect();
        let malformed = |reason: String| EventError::Malformed { offset: start, reason };
        if f.len() != 5 {
            return Err(malformed(format!("expected 5 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| malformed(format!("bad number {s:?}")));
        let frame = f[0].parse::<usize>().map_err(|_| malformed(format!("bad frame {:?}", f[0])))?;
        let (cx, cy, w, h) = (num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?);
        if !(w > 0.0 && h > 0.0) {
            return Err(malformed(format!("non-positive box extent {w}x{h}")));
        }
        out.push(GroundTruthBox { frame, cx, cy, w, h });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_str(dir: &tempfile::TempDir, name: &str, s: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, s).unwrap();
        p
    }

    #[test]
    fn csv_line_maps_fields() {
        let e = parse_csv_line("3,5,1000,1", 0).unwrap();
        assert_eq!(e, Event::new(3, 5, 1000, Polarity::Positive));
    }

    #[test]
    fn csv_zero_polarity_rejected() {
        assert!(matches!(parse_csv_line("3,5,1000,0", 7), Err(EventError::Polarity { offset: 7, value: 0 })));
    }

    #[test]
    fn csv_header_optional_and_offsets_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_str(&dir, "a.csv", "x,y,t,p\n1,2,3,1\n1,2,x,1\n");
        let res: Result<Vec<_>, _> = parse_event_file(&p, EventFormat::Csv).unwrap().collect();
        match res {
            Err(EventError::Malformed { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("unexpected {other:?}"),
        }
        let p = write_str(&dir, "b.csv", "1,2,3,-1\n");
        let ev = read_events(&p, EventFormat::Csv).unwrap();
        assert_eq!(ev, vec![Event::new(1, 2, 3, Polarity::Negative)]);
    }

    #[test]
    fn non_monotone_names_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_str(&dir, "c.csv", "1,1,10,1\n1,1,20,1\n1,1,15,-1\n");
        let err = read_events(&p, EventFormat::Csv).unwrap_err();
        assert!(matches!(err, EventError::NonMonotone { index: 2, t: 15, prev: 20 }));
    }

    #[test]
    fn packed_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = 0u64;
        let events: Vec<Event> = (0..1000)
            .map(|_| {
                t += rng.gen_range(0..50);
                let p = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                Event::new(rng.gen(), rng.gen(), t, p)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("e.bin", EventFormat::Packed), ("e.csv", EventFormat::Csv)] {
            let p = dir.path().join(name);
            write_event_file(&p, fmt, &events).unwrap();
            assert_eq!(read_events(&p, fmt).unwrap(), events);
        }
    }

    #[test]
    fn packed_truncation_and_bad_polarity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_event_file(&p, EventFormat::Packed, &[Event::new(1, 1, 1, Polarity::Positive)]).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_events(&p, EventFormat::Packed), Err(EventError::Malformed { offset: 8, .. })));
        bytes.push(0);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_events(&p, EventFormat::Packed), Err(EventError::Polarity { value: 0, .. })));
    }

    #[test]
    fn ground_truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.csv");
        let boxes = vec![
            GroundTruthBox { frame: 0, cx: 10.5, cy: 3.25, w: 4.0, h: 5.0 },
            GroundTruthBox { frame: 1, cx: 12.5, cy: 3.25, w: 4.0, h: 5.0 },
        ];
        write_ground_truth(&p, &boxes).unwrap();
        assert_eq!(read_ground_truth(&p).unwrap(), boxes);
    }
}
