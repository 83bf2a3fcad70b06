//! Per-subject classification tasks.

use std::collections::BTreeMap;
use std::sync::Arc;

use metabci_signal::{Split, TaskId, Window};
use thiserror::Error;

use crate::synth::SynthSubject;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("subject {subject}: support set lacks class {class}")]
    MissingClass { subject: String, class: u8 },
    #[error("subject {subject}: {detail}")]
    Invalid { subject: String, detail: String },
}

/// One subject treated as one classification problem.
#[derive(Debug, Clone)]
pub struct SubjectTask {
    pub subject_id: String,
    pub task_id: TaskId,
    /// Adaptation set.
    pub support: Vec<Window>,
    /// Evaluation set for held-out subjects, outer-loop set otherwise.
    pub query: Vec<Window>,
    /// Generator state when the task is synthetic.
    pub truth: Option<Arc<SynthSubject>>,
}

impl SubjectTask {
    pub fn new(
        subject_id: impl Into<String>,
        task_id: TaskId,
        support: Vec<Window>,
        query: Vec<Window>,
    ) -> Result<Self, TaskError> {
        let task = Self {
            subject_id: subject_id.into(),
            task_id,
            support,
            query,
            truth: None,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        for class in [0u8, 1] {
            if !self.support.iter().any(|w| w.label == class) {
                return Err(TaskError::MissingClass {
                    subject: self.subject_id.clone(),
                    class,
                });
            }
        }
        let shape = self.support[0].samples.shape();
        if self
            .support
            .iter()
            .chain(&self.query)
            .any(|w| w.samples.shape() != shape)
        {
            return Err(TaskError::Invalid {
                subject: self.subject_id.clone(),
                detail: "windows differ in shape".into(),
            });
        }
        Ok(())
    }

    /// Every window may be used for training (a source subject).
    pub fn as_training(&self) -> Self {
        let mut t = self.clone();
        t.support.iter_mut().chain(t.query.iter_mut()).for_each(|w| w.split = Split::Train);
        t
    }

    /// Support may be used for adaptation, query only for evaluation.
    pub fn as_evaluation(&self) -> Self {
        let mut t = self.clone();
        t.support.iter_mut().for_each(|w| w.split = Split::Train);
        t.query.iter_mut().for_each(|w| w.split = Split::Eval);
        t
    }

    pub fn windows(&self) -> impl Iterator<Item = &Window> {
        self.support.iter().chain(&self.query)
    }

    pub fn window_len(&self) -> usize {
        self.support[0].n_samples()
    }
}

/// Splits one subject's windows by session: `support_sessions` go to
/// support, the rest to query.
pub fn split_by_session(
    subject_id: &str,
    task_id: TaskId,
    windows: Vec<Window>,
    support_sessions: &[u8],
) -> Result<SubjectTask, TaskError> {
    let (support, query): (Vec<Window>, Vec<Window>) = windows
        .into_iter()
        .partition(|w| support_sessions.contains(&w.session_index));
    SubjectTask::new(subject_id, task_id, support, query)
}

/// Groups windows by subject, in subject order.
pub fn group_by_subject(windows: Vec<Window>) -> BTreeMap<String, Vec<Window>> {
    let mut out: BTreeMap<String, Vec<Window>> = BTreeMap::new();
    for w in windows {
        out.entry(w.subject_id.clone()).or_default().push(w);
    }
    out
}

/// Keeps the first `per_class` support windows of each class.
pub fn limit_support(task: &SubjectTask, per_class: usize) -> SubjectTask {
    let mut t = task.clone();
    let mut counts = [0usize; 2];
    t.support.retain(|w| {
        let c = &mut counts[usize::from(w.label.min(1))];
        *c += 1;
        *c <= per_class
    });
    t
}
