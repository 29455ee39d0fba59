//! Multi-view skeletal pose fusion.
//!
//! Edge devices report labeled 3D keypoints; the aggregator associates them
//! with tracked bodies, fits a scaled kinematic skeleton to all views with a
//! constrained QP inverse-kinematics step and smooths each joint with a
//! Kalman filter. The harness generates synthetic scenes and the metrics
//! module scores the output.

pub mod assignment;
pub mod association;
pub mod config;
pub mod harness;
pub mod ik;
pub mod metrics;
pub mod observer;
pub mod pipeline;
pub mod qp;
pub mod scaling;
pub mod skeleton;

pub use association::{BodyTrack, Measurement, MeasurementBatch, SyncQueue};
pub use config::{load_config, ConfigError, PipelineConfig};
pub use ik::{solve_ik, IkConfig, IkResult, IkTargets};
pub use metrics::{evaluate, LabeledFrame, LabeledSkeleton, MetricReport};
pub use pipeline::{replay, Feed, FusedFrame, Pipeline, RunReport};
pub use qp::{QpProblem, QpSolution, QpStatus};
pub use skeleton::{KeypointLabel, Keypoints, SkeletonModel};
