use std::sync::{Arc, Mutex};
use std::time::Duration;

use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use woundseg::infer::{
    center_crop, decode_rle, default_mask_path, encode_rle, infer_file, predict_mask, preprocess_frame,
    spawn_stream_worker, FramePacket, InferRecord, LatestWins, MaskPacket, Segmenter, CROP,
};
use woundseg::models::{build_model, Mode, ModelVariant};
use woundseg::raster::RgbF32;
use woundseg::train::masks_from_logits;
use woundseg::{Error, Mask};

fn mask_strategy() -> impl Strategy<Value = Mask> {
    (1usize..40, 1usize..40, 0.0f64..=1.0, any::<u64>()).prop_map(|(w, h, p, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mask::from_fn(w, h, |_, _| rng.random_bool(p))
    })
}

proptest! {
    #[test]
    fn rle_round_trips(mask in mask_strategy()) {
        let runs = encode_rle(&mask);
        prop_assert_eq!(runs.iter().map(|&r| r as usize).sum::<usize>(), mask.width() * mask.height());
        prop_assert_eq!(decode_rle(&runs, mask.width(), mask.height()).unwrap(), mask);
    }

    #[test]
    fn frame_packets_round_trip(seq: u64, ts: u64, frame in prop::collection::vec(any::<u8>(), 1..64)) {
        let p = FramePacket { sequence: seq, timestamp_ms: ts, frame };
        let bytes = p.encode();
        prop_assert_eq!(&bytes[..8], &seq.to_le_bytes());
        prop_assert_eq!(FramePacket::decode(&bytes).unwrap(), p);
    }
}

#[test]
fn mask_packet_layout_is_little_endian() {
    let mask = Mask::from_fn(CROP, CROP, |x, y| x < 10 && y == 0);
    let p = MaskPacket::new(7, 12.5, &mask).unwrap();
    let bytes = p.encode();
    assert_eq!(&bytes[..8], &7u64.to_le_bytes());
    assert_eq!(&bytes[8..12], &12.5f32.to_le_bytes());
    assert_eq!(&bytes[12..14], &0u16.to_le_bytes());
    assert_eq!(&bytes[14..16], &10u16.to_le_bytes());
    let back = MaskPacket::decode(&bytes).unwrap();
    assert_eq!(back.mask().unwrap(), mask);
    assert!(MaskPacket::decode(&bytes[..13]).is_err());
    assert!(MaskPacket::new(1, 0.0, &Mask::zeros(10, 10)).is_err());
}

#[test]
fn truncated_frame_packet_is_rejected() {
    assert!(FramePacket::decode(&[0u8; 15]).is_err());
}

#[test]
fn vga_frame_crops_at_known_origin() {
    let frame = RgbF32::from_fn(640, 480, |x, y| [x as f32 / 640.0, y as f32 / 480.0, 0.0]);
    let c = center_crop(&frame).unwrap();
    assert_eq!(c.origin, (208, 128));
    assert_eq!(c.image.pixel(0, 0), frame.pixel(208, 128));
    assert_eq!(c.image.pixel(223, 223), frame.pixel(431, 351));
    assert_eq!(preprocess_frame(&frame).unwrap().dims(), &[1, 3, CROP, CROP]);
}

#[test]
fn higher_threshold_gives_subset_on_random_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let v: Vec<f32> = (0..CROP * CROP).map(|_| rng.random_range(-4.0..4.0)).collect();
        let logits = Tensor::from_vec(v, (1, 1, CROP, CROP), &Device::Cpu).unwrap();
        let hi = masks_from_logits(&logits, 0.9, "test").unwrap().remove(0);
        let lo = masks_from_logits(&logits, 0.75, "test").unwrap().remove(0);
        assert!(hi.is_subset_of(&lo));
    }
}

#[test]
fn predict_mask_requires_eval_mode_and_is_monotone() {
    let mut net = build_model(ModelVariant::UNeXtS, 1).unwrap();
    let frame = RgbF32::from_fn(CROP, CROP, |x, y| [((x ^ y) % 13) as f32 / 13.0, 0.4, 0.6]);
    let x = preprocess_frame(&frame).unwrap();
    let hi = predict_mask(&net, &x, 0.9).unwrap();
    let lo = predict_mask(&net, &x, 0.75).unwrap();
    assert!(hi.is_subset_of(&lo));
    assert_eq!(predict_mask(&net, &x, 0.75).unwrap(), lo);
    net.set_mode(Mode::Train);
    assert!(matches!(predict_mask(&net, &x, 0.75), Err(Error::Contract(_))));
}

#[test]
fn segmenter_rejects_degenerate_thresholds() {
    let net = build_model(ModelVariant::UNeXtS, 1).unwrap();
    for t in [0.0, 1.0, -0.2, f64::NAN] {
        assert!(Segmenter::new(net.clone(), t).is_err());
    }
}

#[test]
fn burst_keeps_the_newest_frame() {
    let mailbox = Arc::new(LatestWins::new());
    let handled = Arc::new(Mutex::new(Vec::new()));
    let seen = handled.clone();
    let worker = spawn_stream_worker(mailbox.clone(), move |seq: u64| {
        std::thread::sleep(Duration::from_millis(40));
        seen.lock().unwrap().push(seq);
    });
    for seq in 1..=10 {
        mailbox.put(seq);
        std::thread::sleep(Duration::from_millis(2));
    }
    std::thread::sleep(Duration::from_millis(100));
    mailbox.close();
    worker.join().unwrap();
    let handled = handled.lock().unwrap();
    assert!(handled.len() < 10, "{handled:?}");
    assert_eq!(*handled.last().unwrap(), 10);
    assert!(handled.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(mailbox.dropped() as usize, 10 - handled.len());
}

#[test]
fn infer_file_writes_mask_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("wound.png");
    RgbF32::from_fn(300, 260, |x, y| [x as f32 / 300.0, y as f32 / 260.0, 0.3]).to_rgb8().save(&image).unwrap();
    let seg = Segmenter::new(build_model(ModelVariant::ENet, 0).unwrap(), 0.75).unwrap();
    let out = default_mask_path(&image);
    assert_eq!(out, dir.path().join("wound.mask.png"));
    let record = infer_file(&seg, &image, &out).unwrap();
    let mask = image::open(&out).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (CROP as u32, CROP as u32));
    assert!(mask.pixels().all(|p| p[0] == 0 || p[0] == 255));
    assert_eq!(mask.pixels().filter(|p| p[0] == 255).count(), record.foreground_pixels);
    let line = std::fs::read_to_string(out.with_extension("json")).unwrap();
    let parsed: InferRecord = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(parsed.variant, "ENet");
    assert_eq!(parsed.threshold, 0.75);
    let again = seg.segment(&RgbF32::from_rgb8(&image::open(&image).unwrap().to_rgb8())).unwrap();
    assert_eq!(again.mask.count_ones(), record.foreground_pixels);
}
