use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{ArtifactRecord, SCHEMA_VERSION};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Train,
    Generate,
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    fn can_become(self, next: JobStatus) -> bool {
        use JobStatus::*;
        matches!((self, next), (Queued, Running) | (Queued, Failed) | (Running, Done) | (Running, Failed))
    }

    pub fn is_active(self) -> bool {
        matches!(self, JobStatus::Queued | JobStatus::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub schema_version: u32,
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    pub artifacts: Vec<ArtifactRecord>,
    pub error: Option<String>,
    pub error_code: Option<String>,
}

impl Job {
    fn transition(&mut self, next: JobStatus) -> Result<()> {
        if !self.status.can_become(next) {
            return Err(Error::State(format!("job {} cannot go from {:?} to {:?}", self.id, self.status, next)));
        }
        self.status = next;
        Ok(())
    }
}

/// In-memory job table plus the artifact index served over HTTP.
#[derive(Debug, Default)]
pub struct JobStore {
    jobs: BTreeMap<String, Job>,
    next: u64,
    artifacts: HashMap<String, PathBuf>,
}

impl JobStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queues a job. Fails with a state error while another training job
    /// is queued or running.
    pub fn create(&mut self, kind: JobKind) -> Result<Job> {
        if kind == JobKind::Train {
            if let Some(j) = self.jobs.values().find(|j| j.kind == JobKind::Train && j.status.is_active()) {
                return Err(Error::State(format!("training job {} is already {:?}", j.id, j.status)));
            }
        }
        self.next += 1;
        let job = Job {
            schema_version: SCHEMA_VERSION,
            id: format!("job-{:06}", self.next),
            kind,
            status: JobStatus::Queued,
            progress: 0.0,
            artifacts: Vec::new(),
            error: None,
            error_code: None,
        };
        self.jobs.insert(job.id.clone(), job.clone());
        Ok(job)
    }

    pub fn get(&self, id: &str) -> Option<&Job> {
        self.jobs.get(id)
    }

    fn get_mut(&mut self, id: &str) -> Result<&mut Job> {
        self.jobs.get_mut(id).ok_or_else(|| Error::State(format!("unknown job {id}")))
    }

    pub fn start(&mut self, id: &str) -> Result<()> {
        self.get_mut(id)?.transition(JobStatus::Running)
    }

    pub fn set_progress(&mut self, id: &str, fraction: f64) -> Result<()> {
        let job = self.get_mut(id)?;
        if job.status == JobStatus::Running {
            job.progress = job.progress.max(fraction.clamp(0.0, 1.0));
        }
        Ok(())
    }

    /// Marks a job done; a job without artifacts is recorded as failed.
    pub fn finish(&mut self, id: &str, artifacts: Vec<ArtifactRecord>) -> Result<()> {
        if artifacts.is_empty() {
            return self.fail(id, &Error::State("job produced no artifacts".into()));
        }
        for a in &artifacts {
            self.artifacts.insert(a.id.clone(), a.path.clone());
        }
        let job = self.get_mut(id)?;
        job.transition(JobStatus::Done)?;
        job.progress = 1.0;
        job.artifacts = artifacts;
        Ok(())
    }

    pub fn fail(&mut self, id: &str, error: &Error) -> Result<()> {
        let job = self.get_mut(id)?;
        job.transition(JobStatus::Failed)?;
        job.error = Some(error.to_string());
        job.error_code = Some(error.code().to_string());
        Ok(())
    }

    /// Makes a file reachable by its content hash.
    pub fn register_artifact(&mut self, record: &ArtifactRecord) {
        self.artifacts.insert(record.id.clone(), record.path.clone());
    }

    pub fn artifact_path(&self, id: &str) -> Option<&PathBuf> {
        self.artifacts.get(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn artifact() -> ArtifactRecord {
        ArtifactRecord { id: "ab".into(), name: "x.png".into(), path: "x.png".into(), bytes: 1 }
    }

    #[test]
    fn one_training_job_at_a_time() {
        let mut s = JobStore::new();
        let a = s.create(JobKind::Train).unwrap();
        assert!(matches!(s.create(JobKind::Train), Err(Error::State(_))));
        s.create(JobKind::Generate).unwrap();
        s.start(&a.id).unwrap();
        s.finish(&a.id, vec![artifact()]).unwrap();
        s.create(JobKind::Train).unwrap();
    }

    #[test]
    fn status_only_moves_forward() {
        let mut s = JobStore::new();
        let j = s.create(JobKind::Generate).unwrap();
        assert!(s.finish(&j.id, vec![artifact()]).is_err());
        s.start(&j.id).unwrap();
        s.finish(&j.id, vec![artifact()]).unwrap();
        assert!(s.start(&j.id).is_err());
        assert!(s.fail(&j.id, &Error::State("late".into())).is_err());
        assert_eq!(s.get(&j.id).unwrap().progress, 1.0);
        assert!(s.artifact_path("ab").is_some());
    }

    #[test]
    fn done_requires_artifacts() {
        let mut s = JobStore::new();
        let j = s.create(JobKind::Evaluate).unwrap();
        s.start(&j.id).unwrap();
        s.finish(&j.id, vec![]).unwrap();
        let job = s.get(&j.id).unwrap();
        assert_eq!(job.status, JobStatus::Failed);
        assert!(job.artifacts.is_empty());
    }
}
