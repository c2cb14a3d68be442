use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::{format_ts, parse_ts, Timestamp};
use crate::store::ClaimCheck;

pub const SOURCE_PAGERDUTY: &str = "pagerduty";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Triggered,
    Acknowledged,
    Resolved,
    Other,
}

impl EventKind {
    /// Webhook `event` string to kind. Unknown strings map to `Other`.
    pub fn from_webhook(event: &str) -> Self {
        match event {
            "incident.trigger" => EventKind::Triggered,
            "incident.acknowledge" => EventKind::Acknowledged,
            "incident.resolve" => EventKind::Resolved,
            _ => EventKind::Other,
        }
    }

    pub fn webhook_name(self) -> &'static str {
        match self {
            EventKind::Triggered => "incident.trigger",
            EventKind::Acknowledged => "incident.acknowledge",
            EventKind::Resolved => "incident.resolve",
            EventKind::Other => "incident.annotate",
        }
    }
}

/// The unified record produced by the converter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentEvent {
    pub receipt_id: String,
    pub source: String,
    pub kind: EventKind,
    pub incident_id: String,
    pub service_id: String,
    pub severity: String,
    pub metric: String,
    pub value: f64,
    pub threshold: f64,
    #[serde(with = "ts")]
    pub created_at: Timestamp,
    /// Arrival time at the HTTP ingress.
    #[serde(with = "ts")]
    pub ingress_ts: Timestamp,
    pub raw: ClaimCheck,
}

mod ts {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_ts(*t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let s = String::deserialize(d)?;
        parse_ts(&s).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConversionError {
    #[error("body is not valid JSON: {0}")]
    InvalidJson(String),
    #[error("missing required field {0}")]
    MissingField(&'static str),
    #[error("unparseable timestamp {0:?}")]
    BadTimestamp(String),
}

/// Maps a PagerDuty-style webhook body onto an [`IncidentEvent`]. The raw
/// bytes are kept inline; callers claim-check them as needed.
pub fn convert_pagerduty(
    raw: &[u8],
    receipt_id: &str,
    ingress_ts: Timestamp,
) -> Result<IncidentEvent, ConversionError> {
    let body: Value =
        serde_json::from_slice(raw).map_err(|e| ConversionError::InvalidJson(e.to_string()))?;
    let incident = &body["incident"];
    let incident_id = incident["id"]
        .as_str()
        .filter(|s| !s.is_empty())
        .ok_or(ConversionError::MissingField("incident.id"))?;
    let created = incident["created_at"]
        .as_str()
        .ok_or(ConversionError::MissingField("incident.created_at"))?;
    let created_at = parse_ts(created).ok_or_else(|| ConversionError::BadTimestamp(created.into()))?;
    let details = &incident["alerts"][0]["custom_details"];
    let number = |v: &Value| {
        v.as_f64()
            .or_else(|| v.as_str().and_then(|s| s.parse().ok()))
            .filter(|x: &f64| x.is_finite())
            .unwrap_or(0.0)
    };
    Ok(IncidentEvent {
        receipt_id: receipt_id.to_owned(),
        source: SOURCE_PAGERDUTY.to_owned(),
        kind: EventKind::from_webhook(body["event"].as_str().unwrap_or("")),
        incident_id: incident_id.to_owned(),
        service_id: incident["service"]["id"].as_str().unwrap_or("unknown").to_owned(),
        severity: incident["urgency"].as_str().unwrap_or("unknown").to_owned(),
        metric: details["metric"].as_str().unwrap_or("unknown").to_owned(),
        value: number(&details["value"]),
        threshold: number(&details["threshold"]),
        created_at,
        ingress_ts,
        raw: ClaimCheck::Inline(bytes::Bytes::copy_from_slice(raw)),
    })
}

/// Webhook body in the shape the converter reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Webhook {
    pub event: String,
    pub incident: WebhookIncident,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebhookIncident {
    pub id: String,
    pub created_at: String,
    pub urgency: String,
    pub service: WebhookService,
    pub alerts: Vec<WebhookAlert>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebhookService {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebhookAlert {
    pub custom_details: AlertDetails,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertDetails {
    pub metric: String,
    pub value: f64,
    pub threshold: f64,
}

impl Webhook {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: EventKind,
        incident_id: &str,
        created_at: Timestamp,
        urgency: &str,
        service_id: &str,
        metric: &str,
        value: f64,
        threshold: f64,
    ) -> Self {
        Self {
            event: kind.webhook_name().to_owned(),
            incident: WebhookIncident {
                id: incident_id.to_owned(),
                created_at: format_ts(created_at),
                urgency: urgency.to_owned(),
                service: WebhookService {
                    id: service_id.to_owned(),
                },
                alerts: vec![WebhookAlert {
                    custom_details: AlertDetails {
                        metric: metric.to_owned(),
                        value,
                        threshold,
                    },
                }],
            },
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("webhook serializes")
    }
}
