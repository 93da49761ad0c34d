use std::thread;
use std::time::Duration;

use crossbeam_utils::Backoff;

const SLEEP_MIN: Duration = Duration::from_micros(20);
const SLEEP_MAX: Duration = Duration::from_micros(500);

/// Waiting strategy for a thread polling a queue: bounded spin, then yield,
/// then short sleeps that grow up to a cap. Sleeping keeps idle nodes off the
/// CPU when there are more threads than cores.
pub struct Idle {
    backoff: Backoff,
    sleep: Duration,
}

impl Idle {
    pub fn new() -> Self {
        Self {
            backoff: Backoff::new(),
            sleep: SLEEP_MIN,
        }
    }

    pub fn wait(&mut self) {
        if !self.backoff.is_completed() {
            self.backoff.snooze();
        } else {
            thread::sleep(self.sleep);
            self.sleep = (self.sleep * 2).min(SLEEP_MAX);
        }
    }

    pub fn reset(&mut self) {
        self.backoff.reset();
        self.sleep = SLEEP_MIN;
    }
}

impl Default for Idle {
    fn default() -> Self {
        Self::new()
    }
}

/// Busy-waits for roughly `ticks` spin iterations.
pub fn spin_ticks(ticks: u32) {
    for _ in 0..ticks {
        std::hint::spin_loop();
    }
}
