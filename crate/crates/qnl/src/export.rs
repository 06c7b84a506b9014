//! Chat-format training files for fine-tuning a question-to-query model.

use std::fmt::Write as _;

use qnl_core::pairs::sample_indices;
use qnl_core::verifier::is_correct;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::QnlRecord;

/// Records pass the filtered export when their score is above this.
pub const EXPORT_TAU: f64 = 0.5;

pub const DEFAULT_SYSTEM_PROMPT: &str =
    "Translate the natural language question into a SPARQL query over the knowledge graph.";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("asked for {requested} records but only {eligible} of {total} are eligible")]
    NotEnough {
        requested: usize,
        eligible: usize,
        total: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportOptions {
    pub n: usize,
    pub seed: u64,
    /// Score key required above [`EXPORT_TAU`]; `None` exports unfiltered.
    pub filter_backend: Option<String>,
    pub system_prompt: String,
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct Example<'a> {
    messages: [Message<'a>; 3],
}

fn eligible<'a>(r: &'a QnlRecord, filter: Option<&str>) -> Option<(&'a str, &'a str)> {
    let q = r.query_labeled.as_deref().filter(|s| !s.is_empty())?;
    let t = r.nl_synth.as_deref().filter(|s| !s.is_empty())?;
    if let Some(key) = filter {
        if !is_correct(*r.scores.get(key)?, EXPORT_TAU) {
            return None;
        }
    }
    Some((t, q))
}

/// One JSON line per sampled record, in dataset order.
pub fn export_finetune(records: &[QnlRecord], opts: &ExportOptions) -> Result<String, ExportError> {
    let pool: Vec<(&str, &str)> = records
        .iter()
        .filter_map(|r| eligible(r, opts.filter_backend.as_deref()))
        .collect();
    let not_enough = || ExportError::NotEnough {
        requested: opts.n,
        eligible: pool.len(),
        total: records.len(),
    };
    if opts.n > pool.len() {
        return Err(not_enough());
    }
    let picked = sample_indices(pool.len(), opts.n, opts.seed).map_err(|_| not_enough())?;
    let mut out = String::new();
    for i in picked {
        let (question, query) = pool[i];
        let ex = Example {
            messages: [
                Message {
                    role: "system",
                    content: &opts.system_prompt,
                },
                Message {
                    role: "user",
                    content: question,
                },
                Message {
                    role: "assistant",
                    content: query,
                },
            ],
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&ex).expect("example serializes"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize) -> Vec<QnlRecord> {
        (0..n)
            .map(|i| {
                let mut r = QnlRecord::new(format!("r{i}"), "ASK {}");
                r.query_labeled = Some(format!("ASK {{ [e{i}] [p] [o] }}"));
                r.nl_synth = Some(format!("Is e{i} related to o?"));
                r.scores.insert("cross".into(), if i % 2 == 0 { 0.9 } else { 0.5 });
                r
            })
            .collect()
    }

    fn opts(n: usize, filter: Option<&str>) -> ExportOptions {
        ExportOptions {
            n,
            seed: 3,
            filter_backend: filter.map(str::to_string),
            system_prompt: DEFAULT_SYSTEM_PROMPT.into(),
        }
    }

    #[test]
    fn filtered_excludes_boundary() {
        let rs = records(10);
        let out = export_finetune(&rs, &opts(5, Some("cross"))).unwrap();
        assert_eq!(out.lines().count(), 5);
        for i in (1..10).step_by(2) {
            assert!(!out.contains(&format!("[e{i}]")));
        }
        assert!(matches!(
            export_finetune(&rs, &opts(6, Some("cross"))),
            Err(ExportError::NotEnough {
                requested: 6,
                eligible: 5,
                total: 10
            })
        ));
    }

    #[test]
    fn seed_stable() {
        let rs = records(10);
        assert_eq!(
            export_finetune(&rs, &opts(4, None)).unwrap(),
            export_finetune(&rs, &opts(4, None)).unwrap()
        );
    }
}
