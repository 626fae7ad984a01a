#![no_main]

use bcnn::checkpoint::Container;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::decode(data) {
        // anything that decodes must survive a re-encode unchanged
        let bytes = c.encode();
        assert_eq!(Container::decode(&bytes).unwrap().encode(), bytes);
        let _ = bcnn::checkpoint::from_container(&c);
    }
});
