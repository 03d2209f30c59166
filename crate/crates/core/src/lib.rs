pub mod box_noise;
pub mod bundle;
pub mod camera;
pub mod candidates;
pub mod confidence;
pub mod eval;
pub mod pipeline;
pub mod prompting;
pub mod scene;
pub mod superpoints;
pub mod synth;
pub mod view_select;
