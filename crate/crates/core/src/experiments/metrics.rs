use std::collections::BTreeMap;
use std::io::Write;

use crate::error::Result;

/// One line of the metric stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricRecord {
    pub iter: usize,
    pub metrics: BTreeMap<String, Option<f64>>,
    pub wall_ms: Option<u64>,
}

impl MetricRecord {
    pub fn new(iter: usize) -> Self {
        Self { iter, ..Default::default() }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.set(key, value);
        self
    }

    pub fn set(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), Some(value));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied().flatten()
    }

    /// Flat JSON object with sorted keys; null and non-finite metrics are omitted.
    pub fn to_json(&self) -> String {
        let mut fields: BTreeMap<&str, String> = BTreeMap::new();
        fields.insert("iter", self.iter.to_string());
        if let Some(ms) = self.wall_ms {
            fields.insert("wall_ms", ms.to_string());
        }
        for (k, v) in &self.metrics {
            if let Some(v) = v.filter(|v| v.is_finite()) {
                fields.insert(k, format_float(v));
            }
        }
        let body: Vec<String> = fields.iter().map(|(k, v)| format!("\"{k}\":{v}")).collect();
        format!("{{{}}}", body.join(","))
    }
}

/// Nine significant digits, trailing zeros kept. Fixed notation for
/// decimal exponents in [-5, 9), scientific otherwise.
pub fn format_float(x: f64) -> String {
    let sci = format!("{x:.8e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    if x == 0.0 || (-5..9).contains(&exp) {
        let decimals = if x == 0.0 { 8 } else { (8 - exp) as usize };
        format!("{x:.decimals$}")
    } else {
        sci
    }
}

pub fn write_metrics(sink: &mut impl Write, record: &MetricRecord) -> Result<()> {
    writeln!(sink, "{}", record.to_json())?;
    Ok(())
}
