//! Motion representation: skeleton, 263-wide feature codec, resampling, files.

pub mod codec;
pub mod io;
pub mod resample;
pub mod skeleton;
pub mod synth;

pub use codec::{
    decode, encode, foot_contacts, JointPositions, MotionSeq, DEFAULT_CONTACT_THRESHOLD, FEATURE_WIDTH, FPS,
};
pub use resample::{resample_fps, resample_rows};
pub use skeleton::{Skeleton, JOINT_COUNT};
