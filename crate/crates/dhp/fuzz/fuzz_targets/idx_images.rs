#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = dhp::benchmarks::idx::parse_idx_images(data, "fuzz");
});
