use seld_autodiff::Tensor;
use seld_core::cache::CachedClip;
use seld_core::events::{doa_to_vector, integer_doa, vector_to_doa, Event, EventList};
use seld_core::features::{FeatureClip, FeatureConfig};
use seld_core::target::{encode_target, segment, MultiAccdoaTarget, SegmentConfig};

fn ev(frame: usize, class: usize, track: usize, az: f64, el: f64) -> Event {
    Event {
        frame,
        class,
        track,
        azimuth: az,
        elevation: el,
    }
}

fn ramp_features(frames: usize) -> FeatureClip {
    FeatureClip {
        features: Tensor::from_fn(vec![7, frames, 64], |i| (i as f32 * 0.37).sin()),
        frame_hop_s: 0.02,
    }
}

#[test]
fn csv_round_trip_keeps_rows_and_rounds_degrees() {
    let list = EventList::from_events(vec![ev(3, 1, 0, 10.4, -5.6), ev(0, 12, 2, -179.6, 89.9), ev(3, 0, 0, 179.5, 0.0)], 13).unwrap();
    let text = list.to_csv_string();
    assert_eq!(text, "0,12,2,-180,90\n3,0,0,-180,0\n3,1,0,10,-6\n");
    let back = EventList::parse_csv(&text, "mem").unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.to_csv_string(), text);
}

#[test]
fn csv_header_is_skipped_and_errors_name_the_line() {
    let ok = EventList::parse_csv("frame,class,track,azimuth,elevation\n4,2,0,30,10\n", "x.csv").unwrap();
    assert_eq!(ok.events(), &[ev(4, 2, 0, 30.0, 10.0)]);
    let err = EventList::parse_csv("1,2,0,30,10\n2,two,0,0,0\n", "bad.csv").unwrap_err().to_string();
    assert!(err.contains("bad.csv") && err.contains('2'), "{err}");
    assert!(EventList::parse_csv("1,2,0\n", "short.csv").is_err());
}

#[test]
fn validation_rejects_bad_class_and_duplicate_slot() {
    assert!(EventList::from_events(vec![ev(0, 13, 0, 0.0, 0.0)], 13).is_err());
    assert!(EventList::from_events(vec![ev(0, 1, 0, 0.0, 0.0), ev(0, 1, 0, 20.0, 0.0)], 13).is_err());
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.csv");
    let list = EventList::from_events(vec![ev(1, 4, 0, -90.0, 45.0), ev(2, 4, 1, 90.0, -45.0)], 13).unwrap();
    list.write_csv(&path).unwrap();
    assert_eq!(EventList::read_csv(&path, 13).unwrap(), list);
    assert!(EventList::read_csv(dir.path().join("missing.csv"), 13).is_err());
}

#[test]
fn doa_conversion_round_trips_on_integer_grid() {
    for az in (-180..180).step_by(15) {
        for el in (-75..=75).step_by(15) {
            let (a, e) = vector_to_doa(doa_to_vector(az as f64, el as f64));
            assert_eq!(integer_doa(a, e), (az as i64, el as i64));
        }
    }
}

#[test]
fn oblique_target_vector() {
    let list = EventList::from_events(vec![ev(0, 0, 0, 45.0, 45.0)], 13).unwrap();
    let d = encode_target(&list, 1, 13).unwrap().dense();
    let expect = [0.5, 0.5, std::f64::consts::FRAC_1_SQRT_2];
    for tr in 0..3 {
        for (a, e) in expect.iter().enumerate() {
            assert!((d.get(&[0, tr, a, 0]) as f64 - e).abs() < 1e-6);
        }
    }
}

#[test]
fn twelve_second_clip_gives_three_segments_with_padding() {
    let clip = ramp_features(600);
    let events = EventList::from_events(vec![ev(0, 0, 0, 0.0, 0.0), ev(105, 3, 0, 90.0, 0.0)], 13).unwrap();
    let segs = segment(&clip, &events, 13, SegmentConfig::default()).unwrap();
    assert_eq!(segs.len(), 3);
    assert_eq!(segs.iter().map(|s| s.valid_frames).collect::<Vec<_>>(), vec![250, 250, 100]);
    let last = &segs[2].features;
    for ch in 0..7 {
        for t in 100..250 {
            assert!((0..64).all(|f| last.get(&[ch, t, f]) == 0.0));
        }
    }
    assert_eq!(segs[2].events.events(), &[ev(5, 3, 0, 90.0, 0.0)]);
    assert_eq!(segs[2].target.get(5, 3).count, 1);
    assert_eq!(segs[0].target.get(0, 0).count, 1);
}

#[test]
fn five_second_clip_is_one_unpadded_segment() {
    let clip = ramp_features(250);
    let segs = segment(&clip, &EventList::new(), 13, SegmentConfig::default()).unwrap();
    assert_eq!(segs.len(), 1);
    assert_eq!(segs[0].valid_frames, 250);
    assert_eq!(segs[0].features, clip.features);
}

#[test]
fn concatenated_segments_reproduce_features_exactly() {
    for frames in [250, 251, 499, 600, 777] {
        let clip = ramp_features(frames);
        let segs = segment(&clip, &EventList::new(), 13, SegmentConfig::default()).unwrap();
        let mut rebuilt = vec![0f32; 7 * frames * 64];
        let mut start = 0;
        for s in &segs {
            for ch in 0..7 {
                let src = &s.features.data()[ch * 250 * 64..ch * 250 * 64 + s.valid_frames * 64];
                rebuilt[(ch * frames + start) * 64..(ch * frames + start + s.valid_frames) * 64].copy_from_slice(src);
            }
            start += s.valid_frames;
        }
        assert_eq!(start, frames);
        let a: Vec<u32> = rebuilt.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = clip.features.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "{frames} frames");
    }
}

#[test]
fn target_tensor_round_trip_and_window() {
    let list = EventList::from_events(vec![ev(1, 2, 0, 10.0, 0.0), ev(1, 2, 1, 100.0, 20.0), ev(4, 7, 0, -60.0, -30.0)], 13).unwrap();
    let t = encode_target(&list, 6, 13).unwrap();
    let (c, d) = t.to_tensors();
    let back = MultiAccdoaTarget::from_tensors(&c, &d).unwrap();
    assert_eq!(back.get(1, 2).count, 2);
    for (x, y) in back.get(1, 2).active().iter().flatten().zip(t.get(1, 2).active().iter().flatten()) {
        assert!((x - y).abs() < 1e-6);
    }
    let w = t.window(4, 3);
    assert_eq!(w.n_frames(), 3);
    assert_eq!(w.get(0, 7).count, 1);
    assert_eq!(w.get(2, 7).count, 0);
    assert!(encode_target(&list, 4, 13).is_err());
}

#[test]
fn feature_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clip = ramp_features(300);
    let events = EventList::from_events(vec![ev(2, 5, 0, 30.0, 15.0)], 13).unwrap();
    let cached = CachedClip {
        name: "c0".into(),
        target: encode_target(&events, 60, 13).unwrap(),
        features: clip,
        events,
        feature_config: FeatureConfig::default(),
    };
    let path = dir.path().join("c0.feat");
    cached.save(&path).unwrap();
    let back = CachedClip::load(&path).unwrap();
    assert_eq!(back.features.features, cached.features.features);
    assert_eq!(back.events, cached.events);
    assert_eq!(back.target.get(2, 5).count, 1);
    assert_eq!(back.name, "c0");
}
