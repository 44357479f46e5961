//! Durable representation: JSON Lines, one experience per line, LF endings.
//!
//! Keys are emitted in a fixed alphabetical order and map keys are sorted, so
//! serializing the same experiences always produces the same bytes. Every
//! line carries `schema_version`; loading tolerates bad lines by reporting
//! them with their line number instead of failing the whole file.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::store::{
    ContextDescriptor, Experience, ExperienceId, KnowledgeBase, QualityRecord, RelationLink,
    SolutionStep, StoreError,
};

/// Version stamped on every persisted line.
pub const SCHEMA_VERSION: u32 = 1;

/// Wire form of an experience. Field declaration order is alphabetical and
/// serde writes fields in declaration order, which pins the byte layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperienceRecord {
    context: Option<ContextDescriptor>,
    created_at: i64,
    failure_modes: Vec<String>,
    goal: Option<String>,
    id: ExperienceId,
    last_used_at: i64,
    metadata: BTreeMap<String, String>,
    problem_pattern: String,
    quality: QualityRecord,
    relations: Vec<RelationLink>,
    schema_version: u32,
    steps: Vec<SolutionStep>,
}

impl From<&Experience> for ExperienceRecord {
    fn from(e: &Experience) -> Self {
        ExperienceRecord {
            context: e.context.clone(),
            created_at: e.created_at,
            failure_modes: e.failure_modes.clone(),
            goal: e.goal.clone(),
            id: e.id.clone(),
            last_used_at: e.last_used_at,
            metadata: e.metadata.clone(),
            problem_pattern: e.problem_pattern.clone(),
            quality: e.quality.clone(),
            relations: e.relations.clone(),
            schema_version: SCHEMA_VERSION,
            steps: e.steps.clone(),
        }
    }
}

impl From<ExperienceRecord> for Experience {
    fn from(r: ExperienceRecord) -> Self {
        Experience {
            id: r.id,
            problem_pattern: r.problem_pattern,
            goal: r.goal,
            steps: r.steps,
            context: r.context,
            metadata: r.metadata,
            failure_modes: r.failure_modes,
            relations: r.relations,
            quality: r.quality,
            created_at: r.created_at,
            last_used_at: r.last_used_at,
        }
    }
}

/// I/O-level persistence failure; per-line problems are reported in
/// [`LoadReport`] instead.
#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("record stream i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("record serialization failure: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// One unusable line: its 1-based number and what was wrong with it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Outcome of loading a record stream. Relations pointing at ids absent from
/// the stream are collected as dangling, not treated as errors.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub experiences: Vec<Experience>,
    pub line_errors: Vec<LineError>,
    /// (source id, missing target id) pairs.
    pub dangling_relations: Vec<(ExperienceId, ExperienceId)>,
}

/// Serializes one experience to its canonical single-line JSON form.
pub fn record_line(experience: &Experience) -> Result<String, RecordError> {
    Ok(serde_json::to_string(&ExperienceRecord::from(experience))?)
}

/// Writes experiences as JSON Lines in the order given. Returns the number
/// of lines written.
pub fn persist_records<'a, W, I>(experiences: I, mut sink: W) -> Result<usize, RecordError>
where
    W: Write,
    I: IntoIterator<Item = &'a Experience>,
{
    let mut written = 0;
    for experience in experiences {
        sink.write_all(record_line(experience)?.as_bytes())?;
        sink.write_all(b"\n")?;
        written += 1;
    }
    sink.flush()?;
    Ok(written)
}

/// Reads a JSON Lines stream. Malformed lines, invariant violations, version
/// mismatches and duplicate ids become [`LineError`]s; everything else loads.
pub fn load_records<R: Read>(source: R) -> Result<LoadReport, RecordError> {
    let reader = BufReader::new(source);
    let mut report = LoadReport::default();
    let mut seen: BTreeSet<ExperienceId> = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExperienceRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                report.line_errors.push(LineError {
                    line: line_no,
                    message: format!("invalid JSON record: {e}"),
                });
                continue;
            }
        };
        if record.schema_version != SCHEMA_VERSION {
            report.line_errors.push(LineError {
                line: line_no,
                message: format!(
                    "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                    record.schema_version
                ),
            });
            continue;
        }
        let experience: Experience = record.into();
        if let Err(violation) = experience.validate() {
            report.line_errors.push(LineError {
                line: line_no,
                message: format!("invariant violation: {violation}"),
            });
            continue;
        }
        if !seen.insert(experience.id.clone()) {
            report.line_errors.push(LineError {
                line: line_no,
                message: format!("duplicate id {}", experience.id),
            });
            continue;
        }
        report.experiences.push(experience);
    }
    let ids: BTreeSet<&ExperienceId> = report.experiences.iter().map(|e| &e.id).collect();
    for experience in &report.experiences {
        for relation in &experience.relations {
            if !ids.contains(&relation.target) {
                report
                    .dangling_relations
                    .push((experience.id.clone(), relation.target.clone()));
            }
        }
    }
    Ok(report)
}

impl KnowledgeBase {
    /// Persists live experiences in ascending id order.
    pub fn persist_to<W: Write>(&self, sink: W) -> Result<usize, RecordError> {
        persist_records(self.iter().map(|e| e.as_ref()), sink)
    }

    /// Loads a record stream into a fresh store. Lines already reported in
    /// the [`LoadReport`] are skipped; restore-level rejections (should not
    /// happen for a well-formed report) are appended as line errors with
    /// line number 0.
    pub fn load_from<R: Read>(source: R) -> Result<(Self, LoadReport), RecordError> {
        let mut report = load_records(source)?;
        let mut kb = KnowledgeBase::new();
        let mut kept = Vec::with_capacity(report.experiences.len());
        for experience in report.experiences.drain(..) {
            match kb.restore(experience) {
                Ok(_) => {}
                Err(StoreError::DuplicateId(id)) | Err(StoreError::TombstonedId(id)) => {
                    report.line_errors.push(LineError {
                        line: 0,
                        message: format!("could not restore id {id}"),
                    });
                    continue;
                }
                Err(e) => {
                    report.line_errors.push(LineError {
                        line: 0,
                        message: e.to_string(),
                    });
                    continue;
                }
            }
            kept.push(());
        }
        report.experiences = kb.iter().map(|e| e.as_ref().clone()).collect();
        Ok((kb, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{RelationKind, UsageEvent};

    fn sample() -> Experience {
        let mut e = Experience::new(
            "e-000001",
            "measure a bond length",
            &["parse the structure file", "compute the distance"],
            1_700_000_000,
        )
        .with_goal("distance in angstroms")
        .with_context(ContextDescriptor {
            difficulty: Some(2),
            domain: Some("structural-biology".into()),
            tags: vec!["pdb".into(), "geometry".into()],
        });
        e.metadata.insert("source".into(), "unit-test".into());
        e.failure_modes.push("confusing solvent with protein atoms".into());
        e.quality.usage_log.push(UsageEvent {
            impact: 0.25,
            timestamp: 1_700_000_100,
        });
        e.quality.usage_count = 1;
        e.relations.push(RelationLink {
            kind: RelationKind::Adaptation,
            target: ExperienceId::new("e-000002"),
        });
        e
    }

    #[test]
    fn keys_are_alphabetical_and_line_is_lf_terminated() {
        let mut buf = Vec::new();
        persist_records([&sample()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(text.matches('\n').count(), 1);
        let value: serde_json::Value = serde_json::from_str(text.trim_end()).unwrap();
        let keys: Vec<&str> = value.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted, "top-level keys must be alphabetical");
        assert_eq!(value["schema_version"], 1);
        let step_keys: Vec<&str> = value["steps"][0]
            .as_object()
            .unwrap()
            .keys()
            .map(|k| k.as_str())
            .collect();
        let mut step_sorted = step_keys.clone();
        step_sorted.sort_unstable();
        assert_eq!(step_keys, step_sorted, "step keys must be alphabetical");
    }

    #[test]
    fn round_trip_preserves_every_field_and_bytes() {
        let original = sample();
        let mut first = Vec::new();
        persist_records([&original], &mut first).unwrap();
        let report = load_records(first.as_slice()).unwrap();
        assert!(report.line_errors.is_empty());
        assert_eq!(report.experiences.len(), 1);
        assert_eq!(report.experiences[0], original);
        let mut second = Vec::new();
        persist_records(report.experiences.iter(), &mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn malformed_line_is_reported_with_number_and_rest_loads() {
        let mut buf = Vec::new();
        persist_records([&sample()], &mut buf).unwrap();
        let good = String::from_utf8(buf).unwrap();
        let mixed = format!("{good}this is not json\n");
        let report = load_records(mixed.as_bytes()).unwrap();
        assert_eq!(report.experiences.len(), 1);
        assert_eq!(report.line_errors.len(), 1);
        assert_eq!(report.line_errors[0].line, 2);
    }

    #[test]
    fn wrong_schema_version_is_a_line_error() {
        let line = record_line(&sample()).unwrap().replace(
            "\"schema_version\":1",
            "\"schema_version\":9",
        );
        let report = load_records(line.as_bytes()).unwrap();
        assert!(report.experiences.is_empty());
        assert_eq!(report.line_errors.len(), 1);
        assert!(report.line_errors[0].message.contains("schema_version"));
    }

    #[test]
    fn duplicate_id_in_stream_is_reported() {
        let line = record_line(&sample()).unwrap();
        let doubled = format!("{line}\n{line}\n");
        let report = load_records(doubled.as_bytes()).unwrap();
        assert_eq!(report.experiences.len(), 1);
        assert_eq!(report.line_errors.len(), 1);
        assert!(report.line_errors[0].message.contains("duplicate id"));
    }

    #[test]
    fn dangling_relation_is_flagged_not_fatal() {
        let report = load_records(record_line(&sample()).unwrap().as_bytes()).unwrap();
        assert_eq!(report.experiences.len(), 1);
        assert_eq!(
            report.dangling_relations,
            vec![(
                ExperienceId::new("e-000001"),
                ExperienceId::new("e-000002")
            )]
        );
    }

    #[test]
    fn empty_stream_loads_empty() {
        let report = load_records(&b""[..]).unwrap();
        assert!(report.experiences.is_empty());
        assert!(report.line_errors.is_empty());
    }

    #[test]
    fn kb_round_trip_through_store() {
        let mut kb = KnowledgeBase::new();
        kb.insert(Experience::new("", "first problem", &["a", "b"], 10))
            .unwrap();
        kb.insert(Experience::new("", "second problem", &["c"], 20))
            .unwrap();
        let mut bytes = Vec::new();
        kb.persist_to(&mut bytes).unwrap();
        let (loaded, report) = KnowledgeBase::load_from(bytes.as_slice()).unwrap();
        assert!(report.line_errors.is_empty());
        assert_eq!(loaded.len(), 2);
        let mut again = Vec::new();
        loaded.persist_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }
}
