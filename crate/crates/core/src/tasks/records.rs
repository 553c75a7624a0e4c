//! Task files: a set of tasks in the checkpoint container.

use std::path::Path;

use serde_json::{json, Value};

use super::{Normalization, Task};
use crate::autodiff::NdArray;
use crate::container::Container;
use crate::error::{Error, Result};

const FIELDS: [&str; 4] = ["x_context", "y_context", "x_target", "y_target"];

/// Packs `tasks` with free-form `info` (kernel, seed, ...) into a container.
pub fn tasks_to_container(tasks: &[Task], info: Value) -> Container {
    let mut arrays = Vec::with_capacity(tasks.len() * 5);
    for (i, t) in tasks.iter().enumerate() {
        for (name, a) in FIELDS
            .iter()
            .zip([&t.x_context, &t.y_context, &t.x_target, &t.y_target])
        {
            arrays.push((format!("task/{i}/{name}"), a.clone()));
        }
        let n = &t.normalization;
        let norm = vec![n.x_min, n.x_max, n.y_mean, n.y_std, f64::from(u8::from(n.constant_y))];
        arrays.push((format!("task/{i}/normalization"), NdArray::vector(norm)));
    }
    Container {
        metadata: json!({ "content": "tasks", "count": tasks.len(), "info": info }),
        arrays,
    }
}

/// Inverse of [`tasks_to_container`]; returns the tasks and the `info` value.
pub fn tasks_from_container(c: &Container) -> Result<(Vec<Task>, Value)> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if c.metadata.get("content").and_then(Value::as_str) != Some("tasks") {
        return Err(bad("container does not hold tasks".into()));
    }
    let count = c
        .metadata
        .get("count")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad("task count missing".into()))? as usize;
    if c.arrays.len() != count * 5 {
        return Err(bad(format!("{} arrays for {count} tasks", c.arrays.len())));
    }
    let get = |i: usize, f: &str| {
        c.array(&format!("task/{i}/{f}"))
            .ok_or_else(|| bad(format!("task {i} lacks `{f}`")))
    };
    let mut tasks = Vec::with_capacity(count);
    for i in 0..count {
        let v: Vec<Vec<f64>> = FIELDS
            .iter()
            .map(|f| get(i, f).map(|a| a.data().to_vec()))
            .collect::<Result<_>>()?;
        let mut t = Task::from_parts(v[0].clone(), v[1].clone(), v[2].clone(), v[3].clone())?;
        let n = get(i, "normalization")?.data();
        if n.len() != 5 {
            return Err(bad(format!("task {i} normalization has {} entries", n.len())));
        }
        t.normalization = Normalization {
            x_min: n[0],
            x_max: n[1],
            y_mean: n[2],
            y_std: n[3],
            constant_y: n[4] != 0.0,
        };
        tasks.push(t);
    }
    Ok((tasks, c.metadata.get("info").cloned().unwrap_or(Value::Null)))
}

pub fn write_tasks(path: impl AsRef<Path>, tasks: &[Task], info: Value) -> Result<()> {
    tasks_to_container(tasks, info).write(path.as_ref())
}

pub fn read_tasks(path: impl AsRef<Path>) -> Result<(Vec<Task>, Value)> {
    tasks_from_container(&Container::read(path.as_ref())?)
}
