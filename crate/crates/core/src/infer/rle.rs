use crate::error::{Error, Result};
use crate::mask::Mask;

/// Row-major run lengths alternating background and foreground, starting
/// with a (possibly empty) background run. Runs longer than `u16::MAX` are
/// split by zero-length runs of the other value.
pub fn encode_rle(mask: &Mask) -> Vec<u16> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut len: u32 = 0;
    for &v in mask.as_slice() {
        if v != current {
            push_run(&mut runs, len);
            current = v;
            len = 0;
        }
        len += 1;
    }
    push_run(&mut runs, len);
    runs
}

fn push_run(runs: &mut Vec<u16>, mut len: u32) {
    while len > u16::MAX as u32 {
        runs.push(u16::MAX);
        runs.push(0);
        len -= u16::MAX as u32;
    }
    runs.push(len as u16);
}

/// Inverse of [`encode_rle`]; the runs must cover exactly `width * height`
/// pixels.
pub fn decode_rle(runs: &[u16], width: usize, height: usize) -> Result<Mask> {
    let total: usize = runs.iter().map(|&r| r as usize).sum();
    if total != width * height {
        return Err(Error::Contract(format!("runs cover {total} pixels, expected {}", width * height)));
    }
    let mut data = Vec::with_capacity(total);
    for (i, &r) in runs.iter().enumerate() {
        data.extend(std::iter::repeat_n((i % 2) as u8, r as usize));
    }
    Mask::from_vec(width, height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mask_is_one_background_run() {
        assert_eq!(encode_rle(&Mask::zeros(224, 224)), vec![50176]);
        assert_eq!(decode_rle(&[50176], 224, 224).unwrap(), Mask::zeros(224, 224));
    }

    #[test]
    fn leading_foreground_starts_with_empty_run() {
        let m = Mask::from_vec(4, 1, vec![1, 1, 0, 1]).unwrap();
        assert_eq!(encode_rle(&m), vec![0, 2, 1, 1]);
    }

    #[test]
    fn long_runs_are_split() {
        let m = Mask::from_fn(300, 300, |_, _| true);
        let runs = encode_rle(&m);
        assert_eq!(runs, vec![0, 65535, 0, 24465]);
        assert_eq!(decode_rle(&runs, 300, 300).unwrap(), m);
    }

    #[test]
    fn wrong_total_is_rejected() {
        assert!(decode_rle(&[10, 5], 4, 4).is_err());
    }
}
