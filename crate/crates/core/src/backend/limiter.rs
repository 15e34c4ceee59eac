use std::time::Duration;

use tokio::sync::Mutex;
use tokio::time::Instant;

/// Token bucket limiting the request rate of one backend handle.
///
/// Tokens may go negative: a caller that finds the bucket empty reserves the
/// next token and sleeps until it would have been refilled, so waiters are
/// served in arrival order without polling.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<BucketState>,
}

#[derive(Debug)]
struct BucketState {
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    /// Refills `rate` tokens per second; bursts up to `max(1, rate)`.
    pub fn new(rate: f64) -> Self {
        assert!(rate.is_finite() && rate > 0.0, "rate must be positive");
        let capacity = rate.max(1.0);
        TokenBucket {
            rate,
            capacity,
            state: Mutex::new(BucketState {
                tokens: capacity,
                last: Instant::now(),
            }),
        }
    }

    pub async fn acquire(&self) {
        let wait = {
            let mut state = self.state.lock().await;
            let now = Instant::now();
            let refill = now.duration_since(state.last).as_secs_f64() * self.rate;
            state.tokens = (state.tokens + refill).min(self.capacity);
            state.last = now;
            state.tokens -= 1.0;
            if state.tokens >= 0.0 {
                Duration::ZERO
            } else {
                Duration::from_secs_f64(-state.tokens / self.rate)
            }
        };
        if !wait.is_zero() {
            tokio::time::sleep(wait).await;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn burst_then_throttle() {
        let bucket = TokenBucket::new(50.0);
        let start = Instant::now();
        // 50 burst tokens are free
        for _ in 0..50 {
            bucket.acquire().await;
        }
        assert!(start.elapsed() < Duration::from_millis(50));
        for _ in 0..5 {
            bucket.acquire().await;
        }
        // five more tokens at 50/s need ~100ms
        assert!(start.elapsed() >= Duration::from_millis(90));
    }

    #[tokio::test]
    async fn sub_unit_rate_keeps_one_token_burst() {
        let bucket = TokenBucket::new(0.5);
        assert_eq!(bucket.capacity, 1.0);
        let start = Instant::now();
        bucket.acquire().await;
        assert!(start.elapsed() < Duration::from_millis(20));
    }
}
