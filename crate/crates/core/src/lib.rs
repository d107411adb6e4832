//! Two-hand 4D motion recovery from monocular tracks.

pub mod camera_world;
pub mod container;
pub mod error;
pub mod fixture;
pub mod geometry;
pub mod hand_model;
pub mod io;
pub mod lbfgs;
pub mod mesh;
pub mod metrics;
pub mod objectives;
pub mod optimize;
pub mod pipeline;
pub mod prior;
pub mod synth;
pub mod tracks;
pub mod world;

pub use error::{Error, Result};
pub use geometry::{Intrinsics, Mat3, Rotation, SimilarityTransform, Vec2, Vec3};
pub use hand_model::{
    HandModel, HandState, HandTrajectory, Handedness, PoseFrame, StateGrad, NUM_BETAS, NUM_JOINTS,
    NUM_KIN_JOINTS, NUM_POSE_JOINTS, NUM_VERTICES,
};
pub use camera_world::{cam_to_world, world_to_cam, CameraPose, CameraTrajectory, WorldScale};
