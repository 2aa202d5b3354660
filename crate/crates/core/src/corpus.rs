//! Region-feature corpora: one JSON scene record per line, preceded by a
//! header line carrying the format version.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const CORPUS_KIND: &str = "relcap-corpus";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub feature: Vec<f64>,
    #[serde(rename = "class")]
    pub class_id: usize,
}

/// Annotated predicate for an ordered region pair `(subject, object)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRelation {
    pub subject: usize,
    pub object: usize,
    pub predicate: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image_id: String,
    pub superclass: String,
    pub subclass: String,
    /// Regions in detection-confidence order.
    pub regions: Vec<Region>,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relations: Vec<PairRelation>,
}

impl SceneRecord {
    pub fn feature_dim(&self) -> usize {
        self.regions.first().map_or(0, |r| r.feature.len())
    }

    pub fn relation_for(&self, subject: usize, object: usize) -> Option<&str> {
        self.relations
            .iter()
            .find(|r| r.subject == subject && r.object == object)
            .map(|r| r.predicate.as_str())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
}

pub fn tokenize(caption: &str) -> Vec<String> {
    caption.split_whitespace().map(str::to_lowercase).collect()
}

fn validate_record(rec: &SceneRecord, k_max: usize) -> std::result::Result<Option<usize>, String> {
    if rec.regions.is_empty() {
        return Err("record has no regions".into());
    }
    if rec.captions.is_empty() || rec.captions.iter().any(|c| tokenize(c).is_empty()) {
        return Err("record needs at least one non-empty caption".into());
    }
    let dim = rec.feature_dim();
    for (i, r) in rec.regions.iter().enumerate() {
        r.bbox.validate().map_err(|e| format!("region {i}: {e}"))?;
        if r.feature.len() != dim {
            return Err(format!("region {i} has feature dim {} (expected {dim})", r.feature.len()));
        }
        if r.feature.iter().any(|v| !v.is_finite()) {
            return Err(format!("region {i} has a non-finite feature"));
        }
    }
    for rel in &rec.relations {
        if rel.subject >= rec.regions.len() || rel.object >= rec.regions.len() || rel.subject == rel.object {
            return Err(format!("relation {rel:?} references invalid regions"));
        }
    }
    Ok((rec.regions.len() > k_max).then_some(rec.regions.len()))
}

/// Parses a corpus, keeping at most `k_max` regions per scene (the first
/// ones, i.e. highest detection confidence).
pub fn parse_corpus(text: &str, origin: &Path, k_max: usize) -> Result<Vec<SceneRecord>> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((hline, header)) = lines.next() else {
        log::warn!("{}: empty corpus", origin.display());
        return Ok(Vec::new());
    };
    let header: Header = serde_json::from_str(header)
        .map_err(|e| perr(hline + 1, format!("bad corpus header: {e}")))?;
    if header.kind != CORPUS_KIND || header.format_version != CORPUS_FORMAT_VERSION {
        return Err(perr(
            hline + 1,
            format!("unsupported corpus {} v{}", header.kind, header.format_version),
        ));
    }
    let mut out = Vec::new();
    let mut dim = None;
    for (idx, line) in lines {
        let mut rec: SceneRecord =
            serde_json::from_str(line).map_err(|e| perr(idx + 1, e.to_string()))?;
        if let Some(n) = validate_record(&rec, k_max).map_err(|m| perr(idx + 1, m))? {
            log::warn!(
                "{}:{}: {} has {n} regions; keeping the first {k_max}",
                origin.display(),
                idx + 1,
                rec.image_id
            );
            rec.regions.truncate(k_max);
            rec.relations
                .retain(|r| r.subject < k_max && r.object < k_max);
        }
        match dim {
            None => dim = Some(rec.feature_dim()),
            Some(d) if d != rec.feature_dim() => {
                return Err(perr(
                    idx + 1,
                    format!("feature dim {} differs from corpus dim {d}", rec.feature_dim()),
                ))
            }
            _ => {}
        }
        out.push(rec);
    }
    if out.is_empty() {
        log::warn!("{}: corpus has no records", origin.display());
    }
    Ok(out)
}

pub fn load_corpus(path: &Path, k_max: usize) -> Result<Vec<SceneRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path, k_max)
}

pub fn corpus_to_string(records: &[SceneRecord]) -> String {
    let header = Header {
        format_version: CORPUS_FORMAT_VERSION,
        kind: CORPUS_KIND.to_string(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: &Path, records: &[SceneRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(corpus_to_string(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Groups records into contexts by `(superclass, subclass)`, chunked to at
/// most `max_size` images. Groups keep first-appearance order.
pub fn group_contexts(records: &[SceneRecord], max_size: usize) -> Vec<Vec<usize>> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let key = (r.superclass.as_str(), r.subclass.as_str());
        match keys.iter().position(|k| *k == key) {
            Some(g) => groups[g].push(i),
            None => {
                keys.push(key);
                groups.push(vec![i]);
            }
        }
    }
    groups
        .into_iter()
        .flat_map(|g| {
            g.chunks(max_size.max(1))
                .map(<[usize]>::to_vec)
                .collect::<Vec<_>>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, k: usize) -> SceneRecord {
        SceneRecord {
            image_id: id.into(),
            superclass: "outdoor".into(),
            subclass: "park".into(),
            regions: (0..k)
                .map(|i| Region {
                    bbox: BoundingBox::new(0.1 + 0.02 * i as f64, 0.5, 0.1, 0.1),
                    feature: vec![i as f64, 0.1 + i as f64 / 3.0],
                    class_id: i,
                })
                .collect(),
            captions: vec!["a man above a dog".into()],
            relations: vec![PairRelation {
                subject: 0,
                object: 1,
                predicate: "above".into(),
            }],
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let recs = vec![record("a", 3), record("b", 2)];
        let text = corpus_to_string(&recs);
        assert_eq!(parse_corpus(&text, Path::new("mem"), 36).unwrap(), recs);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_corpus("", Path::new("mem"), 36).unwrap().is_empty());
    }

    #[test]
    fn too_many_regions_are_truncated() {
        let text = corpus_to_string(&[record("big", 40)]);
        let recs = parse_corpus(&text, Path::new("mem"), 36).unwrap();
        assert_eq!(recs[0].regions.len(), 36);
        assert_eq!(recs[0].regions[35], record("big", 40).regions[35]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut text = corpus_to_string(&[record("a", 2)]);
        text.push_str("{not json}\n");
        let err = parse_corpus(&text, Path::new("c.jsonl"), 36).unwrap_err();
        assert!(err.to_string().starts_with("c.jsonl:3:"), "{err}");
    }

    #[test]
    fn schema_violations_are_errors() {
        let mut bad = record("a", 2);
        bad.captions.clear();
        let err = parse_corpus(&corpus_to_string(&[bad]), Path::new("m"), 36).unwrap_err();
        assert!(err.to_string().contains("caption"));

        let mut bad = record("a", 2);
        bad.regions[1].feature.push(1.0);
        assert!(parse_corpus(&corpus_to_string(&[bad]), Path::new("m"), 36).is_err());

        let mut bad = record("a", 2);
        bad.regions[0].bbox.w = 0.0;
        assert!(parse_corpus(&corpus_to_string(&[bad]), Path::new("m"), 36).is_err());

        let missing_header = serde_json::to_string(&record("a", 2)).unwrap();
        assert!(parse_corpus(&missing_header, Path::new("m"), 36).is_err());
    }

    #[test]
    fn contexts_group_by_labels() {
        let mut recs: Vec<_> = (0..5).map(|i| record(&i.to_string(), 2)).collect();
        recs[1].subclass = "beach".into();
        recs[3].subclass = "beach".into();
        let groups = group_contexts(&recs, 2);
        assert_eq!(groups, vec![vec![0, 2], vec![4], vec![1, 3]]);
    }
}
