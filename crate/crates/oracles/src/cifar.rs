//! CIFAR-10 binary record decoding written directly from the format: one
//! label byte, then 1024 red, 1024 green and 1024 blue bytes, each plane in
//! row-major order.

pub const RECORD_LEN: usize = 1 + 3 * 32 * 32;

/// Label and HWC pixel bytes of record `index` in a batch file.
pub fn decode_record(file: &[u8], index: usize) -> (u8, Vec<u8>) {
    let rec = &file[index * RECORD_LEN..(index + 1) * RECORD_LEN];
    let mut hwc = Vec::with_capacity(3072);
    for row in 0..32 {
        for col in 0..32 {
            for plane in 0..3 {
                hwc.push(rec[1 + plane * 1024 + row * 32 + col]);
            }
        }
    }
    (rec[0], hwc)
}
