use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension of the task vector: one restoration level per degradation type.
pub const TASK_DIM: usize = 3;

/// Restoration level per degradation type (deblur, denoise, dejpeg), each in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskVector(pub [f64; TASK_DIM]);

impl TaskVector {
    pub const ZERO: TaskVector = TaskVector([0.0; TASK_DIM]);

    pub fn new(t: [f64; TASK_DIM]) -> Result<Self> {
        let tv = TaskVector(t);
        tv.validate()?;
        Ok(tv)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::range(format!("task vector {:?} outside [0, 1]", self.0)));
        }
        Ok(())
    }

    pub fn as_f32(&self) -> [f32; TASK_DIM] {
        self.0.map(|v| v as f32)
    }

    /// Components quantized to 1e-3, for cache keys.
    pub fn cache_key(&self) -> [i32; TASK_DIM] {
        self.0.map(|v| (v * 1000.0).round() as i32)
    }

    /// Parses `t1,t2,t3`.
    pub fn parse(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("not a number: {p:?}")))
            })
            .collect::<Result<_>>()?;
        let arr: [f64; TASK_DIM] = vals
            .try_into()
            .map_err(|_| Error::Config(format!("expected {TASK_DIM} components in {s:?}")))?;
        TaskVector::new(arr)
    }
}
