use std::fmt;

use serde::{Deserialize, Serialize};

use super::GritRecord;

/// Corpus counts: images, boxes, grounded expressions, and the word total
/// behind the average expression length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: u64,
    pub objects: u64,
    pub text_spans: u64,
    pub expression_words: u64,
}

impl DatasetStats {
    pub fn add_record(&mut self, rec: &GritRecord) {
        self.images += 1;
        for r in &rec.refs {
            self.add_ref(&r.span.text, r.boxes.len());
        }
    }

    pub(crate) fn add_ref(&mut self, text: &str, boxes: usize) {
        self.text_spans += 1;
        self.objects += boxes as u64;
        self.expression_words += text.split_whitespace().count() as u64;
    }

    pub fn merge(&mut self, other: &DatasetStats) {
        self.images += other.images;
        self.objects += other.objects;
        self.text_spans += other.text_spans;
        self.expression_words += other.expression_words;
    }

    /// Mean whitespace-delimited words per expression; 0 when empty.
    pub fn avg_expression_length(&self) -> f64 {
        if self.text_spans == 0 {
            0.0
        } else {
            self.expression_words as f64 / self.text_spans as f64
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "images": self.images,
            "objects": self.objects,
            "text_spans": self.text_spans,
            "avg_expression_length": self.avg_expression_length(),
        })
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "images={} objects={} text_spans={} avg_len={:.1}",
            self.images,
            self.objects,
            self.text_spans,
            self.avg_expression_length()
        )
    }
}

pub fn compute_stats<'a>(records: impl IntoIterator<Item = &'a GritRecord>) -> DatasetStats {
    let mut stats = DatasetStats::default();
    for r in records {
        stats.add_record(r);
    }
    stats
}
