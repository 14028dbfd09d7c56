//! Human-readable summary of a checkpoint file.

use std::fmt::Write;
use std::path::Path;

use fedlm_core::checkpoint::read_checkpoint;

use crate::error::Result;

pub fn inspect_checkpoint(path: &Path) -> Result<String> {
    let ckpt = read_checkpoint(path)?;
    let mut out = String::new();
    let p = &ckpt.params;
    writeln!(out, "round        {}", ckpt.round).unwrap();
    writeln!(out, "parameters   {}", p.total_len()).unwrap();
    writeln!(out, "entries      {}", p.num_entries()).unwrap();
    writeln!(out, "l2 norm      {:.6e}", p.norm()).unwrap();
    writeln!(out, "finite       {}", p.is_finite()).unwrap();
    writeln!(out, "metadata     {} bytes", ckpt.meta.len()).unwrap();
    for (name, t) in p.entries() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(out, "  {name:<32} [{}]", shape.join(", ")).unwrap();
    }
    Ok(out)
}
