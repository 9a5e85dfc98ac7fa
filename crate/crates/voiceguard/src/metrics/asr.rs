//! Minimal HTTP client for an external speech-recognition service.
//!
//! The service contract: `POST {endpoint}/transcribe` with WAV bytes in the
//! body, answering `{"text": "..."}`. The heavy recognizer stays outside the
//! artifact; when the endpoint is missing or unreachable the WER metric is
//! reported as unavailable and pipelines continue.

use std::time::Duration;

use serde::Deserialize;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::metrics::wer;

/// Endpoint wiring for the transcription service.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AsrClientConfig {
    /// Base URL, e.g. `http://localhost:9000`.
    pub endpoint: String,
    pub timeout_ms: u64,
}

impl AsrClientConfig {
    pub fn new(endpoint: impl Into<String>, timeout_ms: u64) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms,
        }
    }
}

#[derive(Deserialize)]
struct TranscribeResponse {
    text: String,
}

/// Outcome of a WER measurement against the external recognizer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum WerOutcome {
    Measured { wer_pct: f64, transcript: String },
    /// The metric could not be computed; pipelines keep going.
    Unavailable { reason: String },
}

impl WerOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            WerOutcome::Measured { wer_pct, .. } => Some(*wer_pct),
            WerOutcome::Unavailable { .. } => None,
        }
    }
}

fn transcribe(x: &Waveform, cfg: &AsrClientConfig) -> Result<String> {
    let bytes = crate::wav::wav_bytes(x);
    let url = format!("{}/transcribe", cfg.endpoint.trim_end_matches('/'));
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .build()
        .into();
    let mut response = agent
        .post(&url)
        .content_type("audio/wav")
        .send(&bytes[..])
        .map_err(|e| Error::AsrEndpoint(format!("request failed: {e}")))?;
    let body = response
        .body_mut()
        .read_to_string()
        .map_err(|e| Error::AsrEndpoint(format!("bad response body: {e}")))?;
    let parsed: TranscribeResponse = serde_json::from_str(&body)
        .map_err(|e| Error::AsrEndpoint(format!("malformed transcript json: {e}")))?;
    Ok(parsed.text)
}

/// Word error rate of the service transcript against the reference text.
/// Endpoint trouble degrades to [`WerOutcome::Unavailable`] rather than
/// failing the caller.
pub fn wer_via_asr(x: &Waveform, reference_text: &str, asr: &AsrClientConfig) -> WerOutcome {
    match transcribe(x, asr) {
        Ok(text) => WerOutcome::Measured {
            wer_pct: wer(reference_text, &text),
            transcript: text,
        },
        Err(e) => WerOutcome::Unavailable {
            reason: e.to_string(),
        },
    }
}
