#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = dhp::harness::Checkpoint::from_bytes(data) {
        // A decodable checkpoint must also restore without panicking.
        let _ = ckpt.restore();
    }
});
