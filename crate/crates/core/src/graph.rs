//! The explored construction space: a layered DAG of artifacts.
//!
//! Every artifact lives at one abstraction level. An artifact at level `j > 0`
//! points at its abstraction (parent) at level `j - 1`; the inverse links are
//! kept in `children_index` so refinements can be enumerated in insertion
//! order. The graph is append-only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Session-scoped artifact identifier, serialized as a decimal string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArtifactId(pub u64);

impl fmt::Display for ArtifactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for ArtifactId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(ArtifactId)
    }
}

impl Serialize for ArtifactId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ArtifactId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContentKind {
    NaturalLanguage,
    StructuralText,
    SourceText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractionLevel {
    pub index: usize,
    pub name: String,
    pub content_kind: ContentKind,
}

impl AbstractionLevel {
    pub fn new(index: usize, name: impl Into<String>, content_kind: ContentKind) -> Self {
        Self {
            index,
            name: name.into(),
            content_kind,
        }
    }

    /// Specification, structural description, program.
    pub fn default_hierarchy() -> Vec<AbstractionLevel> {
        vec![
            AbstractionLevel::new(0, "specification", ContentKind::NaturalLanguage),
            AbstractionLevel::new(1, "structural-description", ContentKind::StructuralText),
            AbstractionLevel::new(2, "program", ContentKind::SourceText),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Generated,
    HumanEdited,
    Seed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub id: ArtifactId,
    pub level: usize,
    pub content: String,
    pub parent_id: Option<ArtifactId>,
    pub provenance: Provenance,
    pub created_at: u64,
    pub metadata: BTreeMap<String, String>,
}

/// Input to [`ConstructionGraph::add_artifact`].
#[derive(Debug, Clone)]
pub struct ArtifactDraft {
    pub level: usize,
    pub content: String,
    pub parent_id: Option<ArtifactId>,
    pub provenance: Provenance,
    pub created_at: u64,
    pub metadata: BTreeMap<String, String>,
}

impl ArtifactDraft {
    pub fn new(level: usize, content: impl Into<String>, parent_id: Option<ArtifactId>) -> Self {
        Self {
            level,
            content: content.into(),
            parent_id,
            provenance: Provenance::Generated,
            created_at: 0,
            metadata: BTreeMap::new(),
        }
    }

    pub fn provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn created_at(mut self, created_at: u64) -> Self {
        self.created_at = created_at;
        self
    }

    pub fn meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("unknown artifact {0}")]
    UnknownArtifact(ArtifactId),
    #[error("unknown parent {0}")]
    UnknownParent(ArtifactId),
    #[error("level/parent mismatch: level {level} artifact cannot refine level {parent_level} parent {parent}")]
    LevelParentMismatch {
        level: usize,
        parent: ArtifactId,
        parent_level: usize,
    },
    #[error("level {level} out of range (0..={max})")]
    LevelOutOfRange { level: usize, max: usize },
    #[error("level-0 artifacts have no parent; level {0} artifacts require one")]
    MissingParent(usize),
    #[error("content may be empty only for seed artifacts")]
    EmptyContent,
    #[error("invalid level hierarchy: {0}")]
    InvalidHierarchy(String),
}

/// One violated structural invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "finding", rename_all = "kebab-case")]
pub enum Finding {
    DanglingParent { id: ArtifactId, parent: ArtifactId },
    LevelMismatch { id: ArtifactId, level: usize, parent_level: usize },
    LevelOutOfRange { id: ArtifactId, level: usize },
    RootWithParent { id: ArtifactId },
    MissingParent { id: ArtifactId },
    Cycle { id: ArtifactId },
    IndexDesync { parent: ArtifactId },
    KeyMismatch { key: ArtifactId, id: ArtifactId },
    EmptyContent { id: ArtifactId },
    BadHierarchy { detail: String },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::DanglingParent { id, parent } => {
                write!(f, "dangling parent: {id} points at missing {parent}")
            }
            Finding::LevelMismatch { id, level, parent_level } => write!(
                f,
                "level mismatch: {id} at level {level} has parent at level {parent_level}"
            ),
            Finding::LevelOutOfRange { id, level } => {
                write!(f, "level out of range: {id} at level {level}")
            }
            Finding::RootWithParent { id } => write!(f, "level-0 artifact {id} has a parent"),
            Finding::MissingParent { id } => write!(f, "artifact {id} above level 0 has no parent"),
            Finding::Cycle { id } => write!(f, "cycle through {id}"),
            Finding::IndexDesync { parent } => write!(f, "index desync at {parent}"),
            Finding::KeyMismatch { key, id } => write!(f, "artifact stored under {key} has id {id}"),
            Finding::EmptyContent { id } => write!(f, "non-seed artifact {id} has empty content"),
            Finding::BadHierarchy { detail } => write!(f, "bad hierarchy: {detail}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.findings.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionGraph {
    pub levels: Vec<AbstractionLevel>,
    pub artifacts: BTreeMap<ArtifactId, Artifact>,
    pub children_index: BTreeMap<ArtifactId, Vec<ArtifactId>>,
}

impl Default for ConstructionGraph {
    fn default() -> Self {
        Self::new(AbstractionLevel::default_hierarchy()).expect("default hierarchy is valid")
    }
}

fn check_hierarchy(levels: &[AbstractionLevel]) -> Result<(), String> {
    if levels.len() < 2 {
        return Err(format!("need at least two levels, got {}", levels.len()));
    }
    for (position, level) in levels.iter().enumerate() {
        if level.index != position {
            return Err(format!(
                "level indices must be contiguous from 0; found {} at position {position}",
                level.index
            ));
        }
    }
    Ok(())
}

impl ConstructionGraph {
    pub fn new(levels: Vec<AbstractionLevel>) -> Result<Self, GraphError> {
        check_hierarchy(&levels).map_err(GraphError::InvalidHierarchy)?;
        Ok(Self {
            levels,
            artifacts: BTreeMap::new(),
            children_index: BTreeMap::new(),
        })
    }

    /// Index of the most refined level.
    pub fn max_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn len(&self) -> usize {
        self.artifacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.artifacts.is_empty()
    }

    pub fn contains(&self, id: ArtifactId) -> bool {
        self.artifacts.contains_key(&id)
    }

    pub fn get(&self, id: ArtifactId) -> Result<&Artifact, GraphError> {
        self.artifacts.get(&id).ok_or(GraphError::UnknownArtifact(id))
    }

    pub(crate) fn get_mut(&mut self, id: ArtifactId) -> Result<&mut Artifact, GraphError> {
        self.artifacts
            .get_mut(&id)
            .ok_or(GraphError::UnknownArtifact(id))
    }

    fn next_id(&self) -> ArtifactId {
        self.artifacts
            .keys()
            .next_back()
            .map_or(ArtifactId(1), |last| ArtifactId(last.0 + 1))
    }

    /// Checks whether `draft` could be inserted, without inserting it.
    pub fn check_draft(&self, draft: &ArtifactDraft) -> Result<(), GraphError> {
        if draft.level > self.max_level() {
            return Err(GraphError::LevelOutOfRange {
                level: draft.level,
                max: self.max_level(),
            });
        }
        match (draft.level, draft.parent_id) {
            (0, Some(parent)) => {
                let parent_level = self.get(parent).map_err(|_| GraphError::UnknownParent(parent))?.level;
                return Err(GraphError::LevelParentMismatch {
                    level: 0,
                    parent,
                    parent_level,
                });
            }
            (0, None) => {}
            (level, None) => return Err(GraphError::MissingParent(level)),
            (level, Some(parent)) => {
                let parent_level = self
                    .artifacts
                    .get(&parent)
                    .ok_or(GraphError::UnknownParent(parent))?
                    .level;
                if parent_level + 1 != level {
                    return Err(GraphError::LevelParentMismatch {
                        level,
                        parent,
                        parent_level,
                    });
                }
            }
        }
        if draft.content.is_empty() && draft.provenance != Provenance::Seed {
            return Err(GraphError::EmptyContent);
        }
        Ok(())
    }

    pub fn add_artifact(&mut self, draft: ArtifactDraft) -> Result<ArtifactId, GraphError> {
        self.check_draft(&draft)?;
        let id = self.next_id();
        if let Some(parent) = draft.parent_id {
            self.children_index.entry(parent).or_default().push(id);
        }
        self.artifacts.insert(
            id,
            Artifact {
                id,
                level: draft.level,
                content: draft.content,
                parent_id: draft.parent_id,
                provenance: draft.provenance,
                created_at: draft.created_at,
                metadata: draft.metadata,
            },
        );
        Ok(id)
    }

    /// Recorded refinements of `id`, in insertion order.
    pub fn refinements_of(&self, id: ArtifactId) -> Result<Vec<ArtifactId>, GraphError> {
        self.get(id)?;
        Ok(self.children_index.get(&id).cloned().unwrap_or_default())
    }

    /// The abstraction (parent) of `id`; `None` at level 0.
    pub fn abstraction_of(&self, id: ArtifactId) -> Result<Option<ArtifactId>, GraphError> {
        Ok(self.get(id)?.parent_id)
    }

    /// The chain `[root, ..., id]` of successive abstractions.
    pub fn lineage(&self, id: ArtifactId) -> Result<Vec<ArtifactId>, GraphError> {
        let mut chain = vec![id];
        let mut current = self.get(id)?;
        while let Some(parent) = current.parent_id {
            current = self.get(parent)?;
            chain.push(parent);
            if chain.len() > self.levels.len() {
                break;
            }
        }
        chain.reverse();
        Ok(chain)
    }

    /// The ancestor of `id` at `level`, if `level <= level(id)`.
    pub fn ancestor_at(&self, id: ArtifactId, level: usize) -> Result<Option<ArtifactId>, GraphError> {
        Ok(self.lineage(id)?.get(level).copied())
    }

    /// Lists every violated structural invariant; never fails.
    pub fn validate(&self) -> ValidationReport {
        let mut findings = Vec::new();
        if let Err(detail) = check_hierarchy(&self.levels) {
            findings.push(Finding::BadHierarchy { detail });
        }
        let max_level = self.levels.len().saturating_sub(1);

        for (key, artifact) in &self.artifacts {
            let id = artifact.id;
            if *key != id {
                findings.push(Finding::KeyMismatch { key: *key, id });
            }
            if artifact.level > max_level {
                findings.push(Finding::LevelOutOfRange { id, level: artifact.level });
            }
            if artifact.content.is_empty() && artifact.provenance != Provenance::Seed {
                findings.push(Finding::EmptyContent { id });
            }
            match artifact.parent_id {
                None if artifact.level != 0 => findings.push(Finding::MissingParent { id }),
                None => {}
                Some(_) if artifact.level == 0 => findings.push(Finding::RootWithParent { id }),
                Some(parent) => match self.artifacts.get(&parent) {
                    None => findings.push(Finding::DanglingParent { id, parent }),
                    Some(p) if p.level + 1 != artifact.level => findings.push(Finding::LevelMismatch {
                        id,
                        level: artifact.level,
                        parent_level: p.level,
                    }),
                    Some(_) => {}
                },
            }
        }

        // Cycles are impossible when every edge increases the level, but a
        // corrupted file can carry both kinds of defect.
        for id in self.artifacts.keys() {
            let mut seen = BTreeSet::new();
            let mut cursor = Some(*id);
            while let Some(current) = cursor {
                if !seen.insert(current) {
                    findings.push(Finding::Cycle { id: *id });
                    break;
                }
                cursor = self.artifacts.get(&current).and_then(|a| a.parent_id);
            }
        }

        let mut expected: BTreeMap<ArtifactId, Vec<ArtifactId>> = BTreeMap::new();
        for artifact in self.artifacts.values() {
            if let Some(parent) = artifact.parent_id {
                expected.entry(parent).or_default().push(artifact.id);
            }
        }
        let parents: BTreeSet<ArtifactId> = expected
            .keys()
            .chain(self.children_index.keys())
            .copied()
            .collect();
        for parent in parents {
            if !self.artifacts.contains_key(&parent) && !self.children_index.contains_key(&parent) {
                continue;
            }
            let mut recorded = self.children_index.get(&parent).cloned().unwrap_or_default();
            let mut derived = expected.get(&parent).cloned().unwrap_or_default();
            recorded.sort();
            derived.sort();
            if recorded != derived {
                findings.push(Finding::IndexDesync { parent });
            }
        }

        ValidationReport { findings }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> ConstructionGraph {
        ConstructionGraph::default()
    }

    #[test]
    fn root_insertion() {
        let mut g = graph();
        let root = g.add_artifact(ArtifactDraft::new(0, "spec text", None)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.abstraction_of(root).unwrap(), None);
        assert_eq!(g.lineage(root).unwrap(), vec![root]);
        assert!(g.refinements_of(root).unwrap().is_empty());
    }

    #[test]
    fn child_updates_index() {
        let mut g = graph();
        let root = g.add_artifact(ArtifactDraft::new(0, "spec", None)).unwrap();
        let child = g.add_artifact(ArtifactDraft::new(1, "uml", Some(root))).unwrap();
        assert_ne!(root, child);
        assert_eq!(g.refinements_of(root).unwrap(), vec![child]);
        assert_eq!(g.abstraction_of(child).unwrap(), Some(root));
    }

    #[test]
    fn skipping_a_level_is_rejected() {
        let mut g = graph();
        let root = g.add_artifact(ArtifactDraft::new(0, "spec", None)).unwrap();
        let err = g.add_artifact(ArtifactDraft::new(2, "code", Some(root))).unwrap_err();
        assert!(matches!(err, GraphError::LevelParentMismatch { .. }));
        assert!(err.to_string().contains("level/parent mismatch"));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn insertion_errors() {
        let mut g = graph();
        assert_eq!(
            g.add_artifact(ArtifactDraft::new(3, "x", None)).unwrap_err(),
            GraphError::LevelOutOfRange { level: 3, max: 2 }
        );
        assert_eq!(
            g.add_artifact(ArtifactDraft::new(1, "x", Some(ArtifactId(9)))).unwrap_err(),
            GraphError::UnknownParent(ArtifactId(9))
        );
        assert_eq!(
            g.add_artifact(ArtifactDraft::new(1, "x", None)).unwrap_err(),
            GraphError::MissingParent(1)
        );
        assert_eq!(
            g.add_artifact(ArtifactDraft::new(0, "", None)).unwrap_err(),
            GraphError::EmptyContent
        );
        g.add_artifact(ArtifactDraft::new(0, "", None).provenance(Provenance::Seed))
            .unwrap();
    }

    #[test]
    fn sixteen_refinements() {
        let mut g = graph();
        let root = g.add_artifact(ArtifactDraft::new(0, "spec", None)).unwrap();
        let kids: Vec<_> = (0..16)
            .map(|i| g.add_artifact(ArtifactDraft::new(1, format!("uml {i}"), Some(root))).unwrap())
            .collect();
        assert_eq!(g.refinements_of(root).unwrap(), kids);
    }

    #[test]
    fn lineage_of_program() {
        let mut g = graph();
        let root = g.add_artifact(ArtifactDraft::new(0, "spec", None)).unwrap();
        let uml = g.add_artifact(ArtifactDraft::new(1, "uml", Some(root))).unwrap();
        let code = g.add_artifact(ArtifactDraft::new(2, "code", Some(uml))).unwrap();
        let chain = g.lineage(code).unwrap();
        assert_eq!(chain, vec![root, uml, code]);
        for pair in chain.windows(2) {
            assert_eq!(g.abstraction_of(pair[1]).unwrap(), Some(pair[0]));
        }
        assert_eq!(g.ancestor_at(code, 1).unwrap(), Some(uml));
    }

    #[test]
    fn unknown_ids() {
        let g = graph();
        assert!(g.abstraction_of(ArtifactId(4)).is_err());
        assert!(g.refinements_of(ArtifactId(4)).is_err());
        assert!(g.lineage(ArtifactId(4)).is_err());
    }

    #[test]
    fn validation_findings() {
        let mut g = graph();
        let root = g.add_artifact(ArtifactDraft::new(0, "spec", None)).unwrap();
        let uml = g.add_artifact(ArtifactDraft::new(1, "uml", Some(root))).unwrap();
        assert!(g.validate().is_empty());

        let mut dangling = g.clone();
        dangling.artifacts.get_mut(&uml).unwrap().parent_id = Some(ArtifactId(77));
        dangling.children_index.clear();
        let report = dangling.validate();
        assert_eq!(
            report.findings,
            vec![Finding::DanglingParent { id: uml, parent: ArtifactId(77) }]
        );

        let mut flat = g.clone();
        let code = flat.add_artifact(ArtifactDraft::new(2, "code", Some(uml))).unwrap();
        flat.artifacts.get_mut(&code).unwrap().level = 1;
        assert_eq!(
            flat.validate().findings,
            vec![Finding::LevelMismatch { id: code, level: 1, parent_level: 1 }]
        );

        let mut desync = g.clone();
        desync.children_index.clear();
        assert_eq!(desync.validate().findings, vec![Finding::IndexDesync { parent: root }]);
    }

    #[test]
    fn ids_serialize_as_decimal_strings() {
        let json = serde_json::to_string(&ArtifactId(42)).unwrap();
        assert_eq!(json, "\"42\"");
        let back: ArtifactId = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ArtifactId(42));
    }

    #[test]
    fn hierarchy_must_be_contiguous() {
        let levels = vec![
            AbstractionLevel::new(0, "a", ContentKind::NaturalLanguage),
            AbstractionLevel::new(2, "b", ContentKind::SourceText),
        ];
        assert!(ConstructionGraph::new(levels).is_err());
        assert!(ConstructionGraph::new(vec![AbstractionLevel::new(0, "a", ContentKind::NaturalLanguage)]).is_err());
    }
}
