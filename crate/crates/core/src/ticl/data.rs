use crate::error::{Error, Result};
use crate::frontend::Spectrogram;

/// Labelled spectrograms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Spectrogram>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Vec<Spectrogram>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    /// Number of samples per label, `[classes]` long.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                h[l] += 1;
            }
        }
        h
    }
}

/// One task of a sequence: its id, label space and data.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub classes: usize,
    pub train: Dataset,
    pub test: Dataset,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::InvalidArgument(format!("task {} has no classes", self.id)));
        }
        if self.name.is_empty() || self.name.contains(char::is_whitespace) || self.name.contains(',') {
            return Err(Error::InvalidArgument(format!(
                "task name {:?} must be non-empty without whitespace or commas",
                self.name
            )));
        }
        self.train.check_labels(self.classes)?;
        self.test.check_labels(self.classes)
    }
}
