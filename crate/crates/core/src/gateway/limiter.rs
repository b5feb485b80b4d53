use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

const WINDOW: Duration = Duration::from_secs(60);

struct State {
    in_flight: usize,
    peak: usize,
    starts: VecDeque<Instant>,
}

/// Caps in-flight requests and requests per rolling minute for one model.
pub struct RateLimiter {
    max_in_flight: usize,
    per_minute: Option<u32>,
    state: Mutex<State>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a RateLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.limiter.state.lock().expect("limiter lock");
        st.in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}

impl RateLimiter {
    pub fn new(max_in_flight: usize, per_minute: Option<u32>) -> Self {
        RateLimiter {
            max_in_flight: max_in_flight.max(1),
            per_minute,
            state: Mutex::new(State {
                in_flight: 0,
                peak: 0,
                starts: VecDeque::new(),
            }),
            freed: Condvar::new(),
        }
    }

    /// Blocks until both limits admit one more request.
    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().expect("limiter lock");
        loop {
            let now = Instant::now();
            while st
                .starts
                .front()
                .is_some_and(|t| now.duration_since(*t) >= WINDOW)
            {
                st.starts.pop_front();
            }
            let rate_wait = match self.per_minute {
                Some(limit) if st.starts.len() >= limit as usize => st
                    .starts
                    .front()
                    .map(|t| WINDOW.saturating_sub(now.duration_since(*t))),
                _ => None,
            };
            if st.in_flight < self.max_in_flight && rate_wait.is_none() {
                break;
            }
            st = match rate_wait {
                Some(wait) => self.freed.wait_timeout(st, wait).expect("limiter lock").0,
                None => self.freed.wait(st).expect("limiter lock"),
            };
        }
        st.in_flight += 1;
        st.peak = st.peak.max(st.in_flight);
        if self.per_minute.is_some() {
            st.starts.push_back(Instant::now());
        }
        Permit { limiter: self }
    }

    pub fn peak(&self) -> usize {
        self.state.lock().expect("limiter lock").peak
    }
}
