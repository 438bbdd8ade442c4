use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::{self, Sender};
use std::sync::Mutex;
use std::thread::{self, JoinHandle};

use super::events::{EventBody, LogHeader, RunEvent};
use crate::error::LogError;

/// Appends events as JSON lines after a header line.
pub struct EventLogWriter<W: Write> {
    out: W,
    last_seq: u64,
    flush_each: bool,
}

impl EventLogWriter<BufWriter<File>> {
    pub fn create(path: &Path, header: &LogHeader, flush_each: bool) -> Result<Self, LogError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        Self::new(BufWriter::new(File::create(path)?), header, flush_each)
    }
}

impl<W: Write> EventLogWriter<W> {
    pub fn new(mut out: W, header: &LogHeader, flush_each: bool) -> Result<Self, LogError> {
        write_line(&mut out, header)?;
        if flush_each {
            out.flush()?;
        }
        Ok(Self { out, last_seq: 0, flush_each })
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn append(&mut self, event: &RunEvent) -> Result<(), LogError> {
        let expected = self.last_seq + 1;
        if event.seq != expected {
            return Err(LogError::SeqGap { expected, got: event.seq });
        }
        write_line(&mut self.out, event)?;
        if self.flush_each {
            self.out.flush()?;
        }
        self.last_seq = event.seq;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, LogError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

fn write_line<W: Write, T: serde::Serialize>(out: &mut W, value: &T) -> Result<(), LogError> {
    serde_json::to_writer(&mut *out, value).map_err(|e| LogError::IoFailure(e.into()))?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Parses a log. An empty input yields no header and no events.
pub fn parse_log(text: &str) -> Result<(Option<LogHeader>, Vec<RunEvent>), LogError> {
    let mut lines = text.split_inclusive('\n');
    let Some(first) = lines.next() else {
        return Ok((None, Vec::new()));
    };
    let header: LogHeader = serde_json::from_str(first.trim_end())
        .map_err(|e| LogError::CorruptLog { seq: 0, reason: format!("bad header: {e}") })?;
    let mut events = Vec::new();
    let mut last = 0u64;
    for line in lines {
        let seq = last + 1;
        if !line.ends_with('\n') {
            return Err(LogError::CorruptLog { seq, reason: "truncated record".into() });
        }
        let event: RunEvent =
            serde_json::from_str(line.trim_end()).map_err(|e| LogError::CorruptLog { seq, reason: e.to_string() })?;
        if event.seq != seq {
            return Err(LogError::CorruptLog { seq, reason: format!("found seq {} where {seq} was expected", event.seq) });
        }
        last = seq;
        events.push(event);
    }
    Ok((Some(header), events))
}

pub fn read_log(path: &Path) -> Result<(Option<LogHeader>, Vec<RunEvent>), LogError> {
    parse_log(&fs::read_to_string(path)?)
}

/// Writes a whole log at once.
pub fn write_log(path: &Path, header: &LogHeader, events: &[RunEvent]) -> Result<(), LogError> {
    let mut w = EventLogWriter::create(path, header, false)?;
    for e in events {
        w.append(e)?;
    }
    w.finish()?;
    Ok(())
}

struct Pending {
    trace_id: Option<u32>,
    logical_time: u64,
    body: EventBody,
}

type Appender = JoinHandle<(Vec<RunEvent>, Option<LogError>)>;

/// Ordered event queue drained by one appender thread, which assigns
/// sequence numbers and owns the log file.
pub struct Recorder {
    tx: Mutex<Option<Sender<Pending>>>,
    handle: Mutex<Option<Appender>>,
}

impl Recorder {
    /// Collects events in memory only.
    pub fn in_memory() -> Self {
        Self::spawn(None::<EventLogWriter<BufWriter<File>>>)
    }

    pub fn to_file(path: &Path, header: &LogHeader) -> Result<Self, LogError> {
        Ok(Self::spawn(Some(EventLogWriter::create(path, header, header.deterministic)?)))
    }

    fn spawn<W: Write + Send + 'static>(mut writer: Option<EventLogWriter<W>>) -> Self {
        let (tx, rx) = mpsc::channel::<Pending>();
        let handle = thread::spawn(move || {
            let mut events = Vec::new();
            let mut error = None;
            for (i, p) in rx.into_iter().enumerate() {
                let event = RunEvent { seq: i as u64 + 1, logical_time: p.logical_time, trace_id: p.trace_id, body: p.body };
                if let Some(w) = writer.as_mut() {
                    if let Err(e) = w.append(&event) {
                        log::error!("event log write failed: {e}");
                        error.get_or_insert(e);
                        writer = None;
                    }
                }
                events.push(event);
            }
            if let Some(w) = writer {
                if let Err(e) = w.finish() {
                    error.get_or_insert(e);
                }
            }
            (events, error)
        });
        Self { tx: Mutex::new(Some(tx)), handle: Mutex::new(Some(handle)) }
    }

    pub fn emit(&self, trace_id: Option<u32>, logical_time: u64, body: EventBody) {
        let guard = self.tx.lock().expect("recorder lock poisoned");
        if let Some(tx) = guard.as_ref() {
            // The appender only stops after `finish`, so a send error means
            // the event arrived too late to matter.
            let _ = tx.send(Pending { trace_id, logical_time, body });
        }
    }

    /// Closes the queue and returns every event in sequence order.
    pub fn finish(&self) -> Result<Vec<RunEvent>, LogError> {
        self.tx.lock().expect("recorder lock poisoned").take();
        let handle = self.handle.lock().expect("recorder lock poisoned").take();
        let Some(handle) = handle else { return Ok(Vec::new()) };
        let (events, error) = handle.join().map_err(|_| LogError::IoFailure(std::io::Error::other("appender panicked")))?;
        match error {
            Some(e) => Err(e),
            None => Ok(events),
        }
    }
}

impl Drop for Recorder {
    fn drop(&mut self) {
        let _ = self.finish();
    }
}
