use std::fmt;

use thiserror::Error;

/// Longest permitted run of consecutive absent layers.
pub const MAX_SKIP_RUN: usize = 2;
/// Most times a single layer may appear.
pub const MAX_REPEAT: usize = 2;

/// Rule broken by a candidate path. Checked in declaration order; the first
/// failure is reported.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum PathViolation {
    #[error("range: layer {index} outside [1, {layers}]")]
    OutOfRange { index: usize, layers: usize },
    #[error("order: position {position} decreases ({prev} -> {next})")]
    Decreasing { position: usize, prev: usize, next: usize },
    #[error("repeat: layer {layer} appears {count} times")]
    TooManyRepeats { layer: usize, count: usize },
    #[error("skip-run: layers {first}..={last} are all skipped")]
    SkipRun { first: usize, last: usize },
    #[error("length: {len} exceeds cap {cap}")]
    TooLong { len: usize, cap: usize },
}

impl PathViolation {
    /// Short rule name.
    pub fn rule(&self) -> &'static str {
        match self {
            PathViolation::OutOfRange { .. } => "range",
            PathViolation::Decreasing { .. } => "order",
            PathViolation::TooManyRepeats { .. } => "repeat",
            PathViolation::SkipRun { .. } => "skip-run",
            PathViolation::TooLong { .. } => "length",
        }
    }
}

/// Checks a sequence of 1-based layer indices against a model of depth `layers`.
pub fn validate_path(path: &[usize], layers: usize) -> Result<(), PathViolation> {
    if let Some(&index) = path.iter().find(|&&i| i == 0 || i > layers) {
        return Err(PathViolation::OutOfRange { index, layers });
    }
    for (position, w) in path.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(PathViolation::Decreasing {
                position: position + 1,
                prev: w[0],
                next: w[1],
            });
        }
    }
    // Sorted, so equal indices are adjacent.
    let mut i = 0;
    while i < path.len() {
        let run = path[i..].iter().take_while(|&&v| v == path[i]).count();
        if run > MAX_REPEAT {
            return Err(PathViolation::TooManyRepeats {
                layer: path[i],
                count: run,
            });
        }
        i += run;
    }
    let mut prev = 0;
    for &idx in path.iter().chain(std::iter::once(&(layers + 1))) {
        if idx > prev + 1 + MAX_SKIP_RUN {
            return Err(PathViolation::SkipRun {
                first: prev + 1,
                last: idx - 1,
            });
        }
        prev = idx;
    }
    let cap = MAX_REPEAT * layers;
    if path.len() > cap {
        return Err(PathViolation::TooLong {
            len: path.len(),
            cap,
        });
    }
    Ok(())
}

/// A validated ordered list of layer applications.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExecutionPath {
    layers: Vec<usize>,
    depth: usize,
}

impl ExecutionPath {
    pub fn new(layers: Vec<usize>, depth: usize) -> Result<Self, PathViolation> {
        validate_path(&layers, depth)?;
        Ok(ExecutionPath { layers, depth })
    }

    /// The unedited path `[1..L]`.
    pub fn default_path(depth: usize) -> Self {
        ExecutionPath {
            layers: (1..=depth).collect(),
            depth,
        }
    }

    /// Rebuilds a path from per-layer multiplicities.
    pub fn from_counts(counts: &[u8]) -> Result<Self, PathViolation> {
        let mut layers = Vec::with_capacity(counts.len() * 2);
        for (i, &c) in counts.iter().enumerate() {
            if c as usize > MAX_REPEAT {
                return Err(PathViolation::TooManyRepeats {
                    layer: i + 1,
                    count: c as usize,
                });
            }
            layers.extend(std::iter::repeat(i + 1).take(c as usize));
        }
        ExecutionPath::new(layers, counts.len())
    }

    /// Multiplicity of each layer, indexed from layer 1.
    pub fn counts(&self) -> Vec<u8> {
        let mut c = vec![0u8; self.depth];
        for &l in &self.layers {
            c[l - 1] += 1;
        }
        c
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl fmt::Display for ExecutionPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.layers.iter().map(usize::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}
