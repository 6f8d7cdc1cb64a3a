pub mod features;
pub mod geometry;
pub mod hpr;
pub mod hull;
pub mod localize;
pub mod manifest;
pub mod pipeline;
pub mod pointcloud;
pub mod refmap;
pub mod rir;
pub mod synth;
pub mod virtualimage;
