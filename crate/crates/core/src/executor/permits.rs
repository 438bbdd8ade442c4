use std::sync::{Arc, Condvar, Mutex};

#[derive(Debug, Default)]
struct Counts {
    held: usize,
    peak: usize,
}

/// Counting semaphore that records its high-water mark.
#[derive(Debug)]
pub struct Semaphore {
    limit: usize,
    counts: Mutex<Counts>,
    cv: Condvar,
}

pub struct Permit<'a> {
    sem: &'a Semaphore,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut c = self.sem.counts.lock().expect("semaphore lock poisoned");
        c.held -= 1;
        self.sem.cv.notify_one();
    }
}

impl Semaphore {
    pub fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), counts: Mutex::default(), cv: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut c = self.counts.lock().expect("semaphore lock poisoned");
        while c.held >= self.limit {
            c = self.cv.wait(c).expect("semaphore lock poisoned");
        }
        c.held += 1;
        c.peak = c.peak.max(c.held);
        Permit { sem: self }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn peak(&self) -> usize {
        self.counts.lock().expect("semaphore lock poisoned").peak
    }

    pub fn held(&self) -> usize {
        self.counts.lock().expect("semaphore lock poisoned").held
    }
}

/// The three permit pools shared by all trace workers.
#[derive(Debug, Clone)]
pub struct Permits {
    pub running: Arc<Semaphore>,
    pub debugging: Arc<Semaphore>,
    pub feedback: Arc<Semaphore>,
}

impl Default for Permits {
    fn default() -> Self {
        Self::new(3, 3, 1)
    }
}

impl Permits {
    pub fn new(running: usize, debugging: usize, feedback: usize) -> Self {
        Self {
            running: Arc::new(Semaphore::new(running)),
            debugging: Arc::new(Semaphore::new(debugging)),
            feedback: Arc::new(Semaphore::new(feedback)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;
    use std::time::Duration;

    #[test]
    fn peak_never_exceeds_limit() {
        let sem = Arc::new(Semaphore::new(3));
        thread::scope(|s| {
            for _ in 0..12 {
                let sem = Arc::clone(&sem);
                s.spawn(move || {
                    let _p = sem.acquire();
                    assert!(sem.held() <= 3);
                    thread::sleep(Duration::from_millis(10));
                });
            }
        });
        assert!(sem.peak() <= 3);
        assert!(sem.peak() >= 2, "expected real contention, peak {}", sem.peak());
        assert_eq!(sem.held(), 0);
    }
}
