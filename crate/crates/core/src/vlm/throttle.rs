use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

/// In-flight bound plus an optional token-bucket rate limit.
#[derive(Debug)]
pub struct Throttle {
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    bucket: Option<Mutex<Bucket>>,
}

#[derive(Debug)]
struct Bucket {
    rate: f64,
    burst: f64,
    tokens: f64,
    last: Instant,
}

impl Bucket {
    /// Takes one token, returning how long to wait when none is available.
    fn take(&mut self) -> Option<Duration> {
        let now = Instant::now();
        self.tokens = (self.tokens + now.duration_since(self.last).as_secs_f64() * self.rate).min(self.burst);
        self.last = now;
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            None
        } else {
            Some(Duration::from_secs_f64((1.0 - self.tokens) / self.rate))
        }
    }
}

pub struct Permit<'a> {
    throttle: &'a Throttle,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.throttle.in_flight.lock().unwrap();
        *n -= 1;
        self.throttle.freed.notify_one();
    }
}

impl Throttle {
    /// `rate_per_sec` of `None` disables rate limiting. The bucket holds up
    /// to one second of tokens.
    pub fn new(max_in_flight: usize, rate_per_sec: Option<f64>) -> Self {
        let bucket = rate_per_sec.filter(|r| *r > 0.0).map(|rate| {
            let burst = rate.max(1.0);
            Mutex::new(Bucket {
                rate,
                burst,
                tokens: burst,
                last: Instant::now(),
            })
        });
        Self {
            max_in_flight: max_in_flight.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            bucket,
        }
    }

    pub fn unlimited() -> Self {
        Self::new(usize::MAX, None)
    }

    pub fn acquire(&self) -> Permit<'_> {
        if let Some(bucket) = &self.bucket {
            loop {
                let wait = bucket.lock().unwrap().take();
                match wait {
                    None => break,
                    Some(d) => std::thread::sleep(d),
                }
            }
        }
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max_in_flight {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit { throttle: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().unwrap()
    }
}
