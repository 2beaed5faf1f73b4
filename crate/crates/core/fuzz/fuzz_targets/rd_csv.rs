#![no_main]

use libfuzzer_sys::fuzz_target;
use stereocodec::evalkit::{curve_from_records, parse_rd_csv, write_rd_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_rd_csv(text) {
        let _ = curve_from_records(&records);
        if records.iter().all(|r| !r.lambda.is_nan() && !r.bpp.is_nan() && !r.psnr.is_nan()) {
            let again = parse_rd_csv(&write_rd_csv(&records).unwrap()).unwrap();
            assert_eq!(again, records);
        }
    }
});
