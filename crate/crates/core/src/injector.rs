//! Single-bit fault injection into one element of one weight matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointError, CheckpointView};
use crate::half16::{flip_bit, BitPosition, Half16};
use crate::selector::{NamingScheme, TensorSelector, UnetTopology};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InjectionError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("tensor `{0}` has no elements to inject into")]
    EmptyTensor(String),
    #[error("record mismatch at {tensor}[{index}]: expected {expected:?}, found {found:?}")]
    RecordMismatch {
        tensor: String,
        index: usize,
        expected: Half16,
        found: Half16,
    },
}

/// How the flipped element is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementPolicy {
    /// Uniform over the flat index range, drawn from the trial seed.
    #[default]
    UniformRandom,
    Explicit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub target: TensorSelector,
    #[serde(default)]
    pub bit: BitPosition,
    #[serde(default)]
    pub element: ElementPolicy,
}

impl InjectionSpec {
    pub fn new(target: TensorSelector) -> Self {
        InjectionSpec {
            target,
            bit: BitPosition::default(),
            element: ElementPolicy::UniformRandom,
        }
    }

    pub fn with_bit(self, bit: BitPosition) -> Self {
        InjectionSpec { bit, ..self }
    }

    pub fn with_element(self, element: ElementPolicy) -> Self {
        InjectionSpec { element, ..self }
    }
}

/// Everything needed to redo or undo one flip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub tensor: String,
    pub index: usize,
    pub bit: BitPosition,
    pub original: Half16,
    pub flipped: Half16,
}

/// Draws an index in `0..len` from the trial seed.
pub fn draw_index(len: usize, trial_seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(trial_seed).random_range(0..len)
}

/// Flip `bit` of one element of the tensor named `tensor`.
pub fn inject_named(
    view: &CheckpointView,
    tensor: &str,
    bit: BitPosition,
    element: ElementPolicy,
    trial_seed: u64,
) -> Result<(CheckpointView, InjectionRecord), InjectionError> {
    let len = view.base().entry(tensor)?.element_count();
    let index = match element {
        ElementPolicy::Explicit(i) => i,
        ElementPolicy::UniformRandom if len == 0 => return Err(InjectionError::EmptyTensor(tensor.into())),
        ElementPolicy::UniformRandom => draw_index(len, trial_seed),
    };
    let original = view.read(tensor, index)?;
    let flipped = flip_bit(original, bit);
    let next = view.with_element(tensor, index, flipped)?;
    let record = InjectionRecord {
        tensor: tensor.to_string(),
        index,
        bit,
        original,
        flipped,
    };
    Ok((next, record))
}

pub fn inject(
    view: &CheckpointView,
    spec: &InjectionSpec,
    scheme: &NamingScheme,
    topology: &UnetTopology,
    trial_seed: u64,
) -> Result<(CheckpointView, InjectionRecord), InjectionError> {
    let tensor = scheme.resolve(&spec.target, topology)?;
    inject_named(view, &tensor, spec.bit, spec.element, trial_seed)
}

/// Undo `record` on `view`. Fails if the element no longer holds the
/// flipped pattern, e.g. when the record was already reverted.
pub fn revert(view: &CheckpointView, record: &InjectionRecord) -> Result<CheckpointView, InjectionError> {
    let found = view.read(&record.tensor, record.index)?;
    if found != record.flipped || flip_bit(record.original, record.bit) != record.flipped {
        return Err(InjectionError::RecordMismatch {
            tensor: record.tensor.clone(),
            index: record.index,
            expected: record.flipped,
            found,
        });
    }
    Ok(view.with_element(&record.tensor, record.index, record.original)?)
}

/// Apply a record to a view of its base, reproducing the corrupted view.
pub fn replay(view: &CheckpointView, record: &InjectionRecord) -> Result<CheckpointView, InjectionError> {
    let found = view.read(&record.tensor, record.index)?;
    if found != record.original {
        return Err(InjectionError::RecordMismatch {
            tensor: record.tensor.clone(),
            index: record.index,
            expected: record.original,
            found,
        });
    }
    Ok(view.with_element(&record.tensor, record.index, record.flipped)?)
}
