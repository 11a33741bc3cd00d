pub mod eval;
pub mod features;
pub mod kv;
pub mod lie;
pub mod loop_closure;
pub mod map;
pub mod mapping;
pub mod odometry;
pub mod pipeline;
pub mod sim;
pub mod tracks;
