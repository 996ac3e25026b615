use std::time::Duration;

use rand::Rng;

use super::{ProviderError, ProviderFailure};

/// Exponential backoff with multiplicative jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub initial_delay: Duration,
    pub factor: f64,
    /// Relative jitter; 0.2 means each delay is scaled by a factor in [0.8, 1.2].
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            initial_delay: Duration::from_millis(500),
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts.
    pub fn immediate() -> Self {
        RetryPolicy {
            initial_delay: Duration::ZERO,
            factor: 1.0,
            jitter: 0.0,
        }
    }

    /// Un-jittered delay before retry number `retry` (0-based).
    pub fn base_delay(&self, retry: u32) -> Duration {
        self.initial_delay.mul_f64(self.factor.powi(retry as i32))
    }

    pub fn delay<R: Rng + ?Sized>(&self, retry: u32, rng: &mut R) -> Duration {
        let base = self.base_delay(retry);
        if self.jitter <= 0.0 || base.is_zero() {
            return base;
        }
        let scale = rng.random_range((1.0 - self.jitter)..=(1.0 + self.jitter));
        base.mul_f64(scale.max(0.0))
    }
}

/// Runs `attempt` until it succeeds, fails permanently, or `max_retries`
/// transient failures have been retried. Returns the value and the number
/// of retries used.
pub fn with_retries<T>(
    policy: &RetryPolicy,
    max_retries: u32,
    mut attempt: impl FnMut() -> Result<T, ProviderError>,
) -> Result<(T, u32), ProviderFailure> {
    let mut rng = rand::rng();
    let mut retries = 0;
    loop {
        match attempt() {
            Ok(v) => return Ok((v, retries)),
            Err(error) if error.is_transient() && retries < max_retries => {
                let wait = policy.delay(retries, &mut rng);
                log::warn!(
                    "transient provider error ({error}); retry {} in {wait:?}",
                    retries + 1
                );
                std::thread::sleep(wait);
                retries += 1;
            }
            Err(error) => {
                return Err(ProviderFailure {
                    error,
                    retry_count: retries,
                })
            }
        }
    }
}
