use std::io::{self, Read};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crate::model::ExitStatus;

const POLL: Duration = Duration::from_millis(5);

/// Raw result of one child process run.
#[derive(Debug)]
pub struct ProcOutput {
    pub status: ExitStatus,
    pub code: Option<i32>,
    pub signal: Option<i32>,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub elapsed: Duration,
}

fn kill_group(child: &Child) {
    // The child leads its own process group; signal the whole group so
    // grandchildren die with it. ESRCH after a clean exit is expected.
    let pgid = child.id() as libc::pid_t;
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
}

fn drain<R: Read + Send + 'static>(src: Option<R>) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut r) = src {
            let _ = r.read_to_end(&mut buf);
        }
        buf
    })
}

/// Runs `cmd` in a fresh process group with a wall-clock limit.
pub fn run_with_limit(cmd: &mut Command, limit: Duration) -> io::Result<ProcOutput> {
    cmd.stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped()).process_group(0);
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let out = drain(child.stdout.take());
    let err = drain(child.stderr.take());

    let mut timed_out = false;
    let status = loop {
        if let Some(st) = child.try_wait()? {
            break st;
        }
        if start.elapsed() >= limit {
            timed_out = true;
            kill_group(&child);
            break child.wait()?;
        }
        thread::sleep(POLL);
    };
    let elapsed = start.elapsed();
    // Reap stragglers that would otherwise hold the pipes open.
    kill_group(&child);
    let stdout = out.join().unwrap_or_default();
    let stderr = err.join().unwrap_or_default();

    let exit = if timed_out {
        ExitStatus::Timeout
    } else if status.signal().is_some() {
        ExitStatus::ResourceKill
    } else if status.success() {
        ExitStatus::Ok
    } else {
        ExitStatus::NonzeroExit
    };
    Ok(ProcOutput { status: exit, code: status.code(), signal: status.signal(), stdout, stderr, elapsed })
}

/// Keeps the last `max` bytes of `bytes` (on a char boundary) with a marker
/// when anything was dropped.
pub fn tail_excerpt(bytes: &[u8], max: usize) -> String {
    let text = String::from_utf8_lossy(bytes);
    if text.len() <= max {
        return text.into_owned();
    }
    let mut cut = text.len() - max;
    while !text.is_char_boundary(cut) {
        cut += 1;
    }
    format!("[... {cut} bytes truncated]\n{}", &text[cut..])
}
