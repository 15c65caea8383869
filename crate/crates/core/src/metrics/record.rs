use std::io::Write;

use serde::{Deserialize, Serialize};

/// Everything needed to regenerate a reported number.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsContext {
    pub dataset_digest: String,
    pub model_digest: String,
    pub guidance_scale: Option<f64>,
    pub sampling_steps: Option<usize>,
    pub tau: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub name: String,
    pub value: f64,
    pub context: MetricsContext,
}

const HEADER: [&str; 8] = ["name", "value", "dataset_digest", "model_digest", "s", "t_sample", "tau", "seed"];

fn opt<V: ToString>(v: &Option<V>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Writes a header and one RFC-4180 row per record.
pub fn write_records<W: Write>(out: W, records: &[MetricsRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in records {
        let c = &r.context;
        w.write_record([
            r.name.clone(),
            r.value.to_string(),
            c.dataset_digest.clone(),
            c.model_digest.clone(),
            opt(&c.guidance_scale),
            opt(&c.sampling_steps),
            opt(&c.tau),
            opt(&c.seed),
        ])?;
    }
    w.flush()?;
    Ok(())
}
