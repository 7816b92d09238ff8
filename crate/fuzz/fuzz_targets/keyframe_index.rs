#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    tunnelslam_cli::fuzzing::keyframe_index(data);
});
