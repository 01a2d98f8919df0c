//! Small shared helpers: angle wrapping, parallel map, atomic file writes.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{CogError, Result};

/// Wrap an angle into `(-pi, pi]`. Inputs that are exact odd multiples of pi
/// map to `+pi`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Map `f` over `items`, in parallel when the `parallel` feature is enabled.
/// Output order always matches input order.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Sequential map with the same signature as [`par_map`], kept available in
/// both builds so benches can compare the two paths.
pub fn seq_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Write `contents` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CogError::io(dir.display().to_string(), e))?;
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, contents).map_err(|e| CogError::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| CogError::io(path.display().to_string(), e))?;
    Ok(())
}
