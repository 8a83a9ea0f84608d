//! HTTP client for backends speaking the wire protocol in [`super::wire`].

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use super::wire::{HealthResponse, PredictRequest, PredictResponse, HEALTH_PATH, PREDICT_PATH};
use super::{BackendError, PredictionTriple, SegmentationRequest, Segmenter};

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Permits {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("permit lock poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct ExternalBackend {
    endpoint: String,
    timeout: Duration,
    client: reqwest::blocking::Client,
    permits: Permits,
}

impl ExternalBackend {
    pub fn new(endpoint: &str, timeout: Duration, pool_size: usize) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .pool_max_idle_per_host(pool_size)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(ExternalBackend {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            timeout,
            client,
            permits: Permits::new(pool_size.max(1)),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn transport(&self, e: reqwest::Error) -> BackendError {
        if e.is_timeout() {
            BackendError::Timeout(self.timeout)
        } else {
            BackendError::Unavailable(e.to_string())
        }
    }

    fn read_body(&self, resp: reqwest::blocking::Response) -> Result<String, BackendError> {
        let status = resp.status();
        let body = resp.text().map_err(|e| self.transport(e))?;
        if !status.is_success() {
            return Err(BackendError::Http {
                status: status.as_u16(),
                body,
            });
        }
        Ok(body)
    }
}

impl Segmenter for ExternalBackend {
    fn id(&self) -> String {
        format!("external:{}", self.endpoint)
    }

    fn predict(&self, req: &SegmentationRequest<'_>) -> Result<PredictionTriple, BackendError> {
        req.validate()?;
        let body = PredictRequest::from_request(req);
        let _permit = self.permits.acquire();
        let resp = self
            .client
            .post(format!("{}{}", self.endpoint, PREDICT_PATH))
            .json(&body)
            .send()
            .map_err(|e| self.transport(e))?;
        let text = self.read_body(resp)?;
        let parsed: PredictResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::MalformedJson(e.to_string()))?;
        Ok(parsed.into_triple(req.image.width(), req.image.height())?)
    }

    fn health(&self) -> Result<String, BackendError> {
        let resp = self
            .client
            .get(format!("{}{}", self.endpoint, HEALTH_PATH))
            .send()
            .map_err(|e| self.transport(e))?;
        let text = self.read_body(resp)?;
        let h: HealthResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::MalformedJson(e.to_string()))?;
        if h.status != "ok" {
            return Err(BackendError::Unavailable(format!(
                "health status '{}'",
                h.status
            )));
        }
        Ok(h.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    #[test]
    fn permits_bound_concurrency() {
        let p = Arc::new(Permits::new(2));
        let live = Arc::new(Mutex::new((0usize, 0usize)));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (p, live) = (p.clone(), live.clone());
                thread::spawn(move || {
                    let _g = p.acquire();
                    {
                        let mut l = live.lock().unwrap();
                        l.0 += 1;
                        l.1 = l.1.max(l.0);
                    }
                    thread::sleep(Duration::from_millis(5));
                    live.lock().unwrap().0 -= 1;
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(live.lock().unwrap().1 <= 2);
    }

    #[test]
    fn unreachable_endpoint_is_unavailable() {
        // port 9 (discard) on loopback is closed in the sandbox
        let b = ExternalBackend::new("http://127.0.0.1:9", Duration::from_secs(2), 1).unwrap();
        assert!(matches!(
            b.health(),
            Err(BackendError::Unavailable(_)) | Err(BackendError::Timeout(_))
        ));
    }
}
