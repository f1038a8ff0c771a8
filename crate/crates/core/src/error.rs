use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("{path}: expected {expected}, found {found}")]
    PixelFormat {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },

    #[error(
        "dimension mismatch: image {image} is {image_size:?} but mask {mask} is {mask_size:?}"
    )]
    SceneDimensions {
        image: PathBuf,
        mask: PathBuf,
        image_size: (u32, u32),
        mask_size: (u32, u32),
    },

    #[error("{path}: unregistered label {label} at pixel ({x}, {y})")]
    UnregisteredLabel {
        path: PathBuf,
        x: u32,
        y: u32,
        label: u8,
    },

    #[error("invalid registry: {0}")]
    Registry(String),

    #[error("unknown category '{0}'")]
    UnknownCategory(String),

    #[error("invalid image data: {0}")]
    InvalidImage(String),

    #[error("cannot encode an empty region")]
    EmptyRegion,

    #[error("style space is empty")]
    EmptyStyleSpace,

    #[error("unknown region id {0}")]
    UnknownRegion(u32),

    #[error("style assignments cover different region sets")]
    RegionSetMismatch,

    #[error("interpolation weight {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),

    #[error("style vectors have mismatched dimensions ({expected} vs {found})")]
    StyleDimension { expected: usize, found: usize },

    #[error("concept '{concept}' already labels another cluster of category {category}")]
    DuplicateConcept { category: u8, concept: String },

    #[error("category {category} has {available} clusters, index {index} is out of range")]
    ClusterIndex {
        category: u8,
        index: usize,
        available: usize,
    },

    #[error("condition '{condition}': catalog has no concept '{concept}' for category {category}")]
    MissingConcept {
        condition: String,
        category: u8,
        concept: String,
    },

    #[error("no style assigned to region {0}")]
    UncoveredRegion(u32),

    #[error("render input mismatch: {0}")]
    RenderInput(String),

    #[error("a transition needs at least 2 steps, got {0}")]
    TooFewSteps(usize),

    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    MaskDimensions((u32, u32), (u32, u32)),

    #[error("prediction has invalid label {label} at pixel ({x}, {y})")]
    InvalidPrediction { x: u32, y: u32, label: u8 },

    #[error("baseline model has no fitted categories")]
    UnfittedModel,

    #[error(transparent)]
    Adapter(#[from] AdapterError),

    #[error("invalid ODD spec: {0}")]
    Odd(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("series must hold at least 2 values in [0, 1]")]
    InvalidSeries,

    #[error("focus category {category} does not occur in scene {scene}")]
    FocusAbsent { scene: String, category: u8 },

    #[error("{missing} not found for run {run}; run `oddforge {command}` first")]
    MissingStage {
        run: String,
        missing: String,
        command: &'static str,
    },

    #[error("unknown scene '{0}'")]
    UnknownScene(String),

    #[error("unknown run '{0}'")]
    UnknownRun(String),

    #[error("run {run} has no sample {scene}/{sample}")]
    UnknownSample {
        run: String,
        scene: String,
        sample: String,
    },

    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),

    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures of the model-under-test slot.
#[derive(Debug, Clone, Error)]
pub enum AdapterError {
    #[error("`{command}` could not be started: {message}")]
    Spawn { command: String, message: String },

    #[error("`{command}` timed out after {seconds} s")]
    Timeout { command: String, seconds: u64 },

    #[error("`{command}` exited with code {code:?}: {stderr}")]
    Exit {
        command: String,
        code: Option<i32>,
        stderr: String,
    },

    #[error("`{command}` produced no usable mask for '{id}': {message}")]
    Output {
        command: String,
        id: String,
        message: String,
    },

    #[error("adapter i/o: {0}")]
    Io(String),
}
