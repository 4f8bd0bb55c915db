//! Zero-shot 3D visual grounding over posed RGB-D streams.
//!
//! Given a scene (RGB-D frames + camera intrinsics/extrinsics) and a natural
//! language query, the pipeline localizes the referred object and emits an
//! axis-aligned 3D bounding box:
//!
//! 1. semantic filtering picks candidate frames and a reference view,
//! 2. temporal expansion tracks the target through neighbouring frames,
//! 3. a centroid anchor recovers additional views by reprojection,
//! 4. the masked pixels are lifted to 3D, denoised and clustered.
//!
//! The crate is organised bottom-up: [`geometry`] and [`pointcloud`] are pure
//! math, [`scene`] handles storage and synthesis, [`semantic`] wraps the
//! vision/language tool backends, [`expansion`] and [`agent`] implement the
//! pipeline itself, and [`evaluation`] scores predictions.

pub mod agent;
pub mod evaluation;
pub mod expansion;
pub mod geometry;
pub mod pointcloud;
pub mod scene;
pub mod semantic;
