//! `tab3d simulate` — render a synthetic scene spec to a scene directory.
//!
//! The output directory has the same layout `ground` consumes (`color/`,
//! `depth/`, `pose/`, `intrinsics.txt`) plus `ground_truth.json`, so a
//! simulated scene doubles as an oracle-toolkit fixture. Rendering is
//! deterministic: re-running the same spec reproduces every file byte for
//! byte.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use tab3d_core::scene::save_scene;
use tab3d_core::scene::synthetic::{render_synthetic, SyntheticSpec};

#[derive(Args)]
pub struct SimulateArgs {
    /// Scene spec (JSON): camera, orbit, and labelled boxes.
    #[arg(long)]
    pub spec: PathBuf,
    /// Directory to write the scene into.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: SimulateArgs) -> Result<u8> {
    let text = fs::read_to_string(&args.spec)
        .with_context(|| format!("reading spec {}", args.spec.display()))?;
    let spec = SyntheticSpec::from_json(&text)
        .with_context(|| format!("parsing spec {}", args.spec.display()))?;
    let (scene, gt) = render_synthetic(&spec)?;
    save_scene(&scene, &gt, &args.out)
        .with_context(|| format!("writing scene to {}", args.out.display()))?;
    println!(
        "wrote {} frames and {} labelled boxes to {}",
        scene.len(),
        gt.boxes.len(),
        args.out.display()
    );
    Ok(0)
}
