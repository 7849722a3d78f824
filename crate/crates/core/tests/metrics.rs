use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seld_autodiff::Tensor;
use seld_core::events::{doa_to_vector, Event, EventList};
use seld_core::metrics::{angular_error, decode, evaluate, evaluate_with, seld_score, MetricsConfig};
use seld_core::target::encode_target;

fn ev(frame: usize, class: usize, track: usize, az: f64, el: f64) -> Event {
    Event {
        frame,
        class,
        track,
        azimuth: az,
        elevation: el,
    }
}

fn list(events: Vec<Event>) -> EventList {
    EventList::from_events(events, 13).unwrap()
}

/// Minimum-total-cost assignment of size `min(rows, cols)` by trying every injection.
fn brute_force(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, best: &mut (f64, Vec<(usize, usize)>), need: usize) {
        if cur.len() == need {
            let total: f64 = cur.iter().map(|&(i, j)| cost[i][j]).sum();
            if total < best.0 {
                *best = (total, cur.clone());
            }
            return;
        }
        if row == cost.len() {
            return;
        }
        // leave this row unassigned
        go(cost, row + 1, used, cur, best, need);
        for j in 0..cost[row].len() {
            if !used[j] {
                used[j] = true;
                cur.push((row, j));
                go(cost, row + 1, used, cur, best, need);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let need = cost.len().min(cost[0].len());
    let mut best = (f64::INFINITY, Vec::new());
    go(cost, 0, &mut vec![false; cost[0].len()], &mut Vec::new(), &mut best, need);
    let mut pairs = best.1;
    pairs.sort_unstable();
    pairs
}

#[test]
fn hand_worked_three_event_case() {
    let reference = list(vec![ev(0, 0, 0, 0.0, 0.0), ev(0, 1, 0, 0.0, 0.0)]);
    let pred = list(vec![ev(0, 0, 0, 10.0, 0.0), ev(0, 1, 0, 25.0, 0.0), ev(0, 2, 0, 90.0, 0.0)]);
    let r = evaluate(&pred, &reference, &MetricsConfig::default());
    // class 0 hit at 10°, class 1 matched at 25° (beyond 20°: FP + FN), class 2 inserted
    assert_eq!((r.substitutions, r.deletions, r.insertions, r.n_ref), (1, 0, 1, 2));
    assert!((r.er - 1.0).abs() < 1e-12);
    assert!((r.f - 1.0 / 3.0).abs() < 1e-12);
    assert!((r.le - 17.5).abs() < 1e-9);
    assert!((r.lr - 1.0).abs() < 1e-12);
    let expect = (1.0 + 2.0 / 3.0 + 17.5 / 180.0) / 4.0;
    assert!((r.seld_score - expect).abs() < 1e-9);
    assert_eq!(evaluate_with(&pred, &reference, &MetricsConfig::default(), brute_force), r);
}

#[test]
fn perfect_and_empty_predictions() {
    let reference = list(vec![ev(0, 0, 0, 30.0, 10.0), ev(3, 4, 0, -60.0, 0.0), ev(3, 4, 1, 100.0, 20.0), ev(14, 12, 0, 0.0, -30.0)]);
    let r = evaluate(&reference, &reference, &MetricsConfig::default());
    assert_eq!((r.er, r.f, r.le, r.lr, r.seld_score), (0.0, 1.0, 0.0, 1.0, 0.0));
    let e = evaluate(&EventList::new(), &reference, &MetricsConfig::default());
    assert_eq!((e.er, e.f, e.lr), (1.0, 0.0, 0.0));
    assert_eq!(e.deletions, 4);
    assert!(e.le_undefined && e.le == 180.0);
    let both = evaluate(&EventList::new(), &EventList::new(), &MetricsConfig::default());
    assert_eq!(both.seld_score, 0.0);
}

fn random_list(rng: &mut ChaCha8Rng, max_events: usize) -> EventList {
    let n = rng.gen_range(0..=max_events);
    let mut events: Vec<Event> = Vec::new();
    while events.len() < n {
        let e = ev(rng.gen_range(0..20), rng.gen_range(0..3), rng.gen_range(0..3), rng.gen_range(-180.0..180.0), rng.gen_range(-60.0..60.0));
        if !events.iter().any(|o| o.frame == e.frame && o.class == e.class && o.track == e.track) {
            events.push(e);
        }
    }
    list(events)
}

#[test]
fn hungarian_scoring_matches_exhaustive_matcher() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = MetricsConfig::default();
    for _ in 0..200 {
        let reference = random_list(&mut rng, 3);
        let mut pred = random_list(&mut rng, 3);
        if rng.gen_bool(0.5) {
            // near copies exercise the 20° boundary
            pred = list(reference.events().iter().map(|e| Event { azimuth: (e.azimuth + rng.gen_range(-30.0..30.0) + 540.0) % 360.0 - 180.0, ..*e }).collect());
        }
        assert_eq!(evaluate(&pred, &reference, &cfg), evaluate_with(&pred, &reference, &cfg, brute_force));
    }
}

#[test]
fn score_identity_holds_for_every_report() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let r = evaluate(&random_list(&mut rng, 8), &random_list(&mut rng, 8), &MetricsConfig::default());
        assert_eq!(r.seld_score, (r.er + (1.0 - r.f) + r.le / 180.0 + (1.0 - r.lr)) / 4.0);
        assert_eq!(r.seld_score, seld_score(r.er, r.f, r.le, r.lr));
    }
}

#[test]
fn angular_error_cases() {
    let u = doa_to_vector(37.0, 12.0);
    assert_eq!(angular_error(u, u), 0.0);
    assert!((angular_error(u, u.map(|v| -v)) - 180.0).abs() < 1e-6);
    assert!((angular_error([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]) - 90.0).abs() < 1e-12);
    // equal but unnormalized, and a tiny separation acos cannot resolve
    assert_eq!(angular_error([0.3, 0.4, 0.5], [0.3, 0.4, 0.5]), 0.0);
    let tiny = angular_error(doa_to_vector(0.0, 0.0), doa_to_vector(1e-6, 0.0));
    assert!((tiny - 1e-6).abs() < 1e-12, "{tiny}");
}

/// `(T, 117)` output with the given class-frame track vectors.
fn output(frames: usize, tracks: &[(usize, usize, usize, [f64; 3])]) -> Tensor<f64> {
    let mut t = Tensor::zeros(vec![frames, 117]);
    for &(f, tr, c, v) in tracks {
        for a in 0..3 {
            t.set(&[f, (tr * 3 + a) * 13 + c], v[a]);
        }
    }
    t
}

#[test]
fn close_tracks_merge_to_their_mean() {
    let (a, b) = (doa_to_vector(0.0, 0.0), doa_to_vector(5.0, 0.0));
    let d = decode(&output(1, &[(0, 0, 3, a), (0, 1, 3, b)]), &MetricsConfig::default()).unwrap();
    assert_eq!(d.frames[0].len(), 1);
    let m = d.frames[0][0].doa;
    assert!(angular_error(m, doa_to_vector(2.5, 0.0)) < 1e-9);
    let far = decode(&output(1, &[(0, 0, 3, a), (0, 1, 3, doa_to_vector(60.0, 0.0))]), &MetricsConfig::default()).unwrap();
    assert_eq!(far.frames[0].len(), 2);
}

#[test]
fn encode_then_decode_round_trips() {
    let reference = list(vec![ev(0, 0, 0, 30.0, 10.0), ev(0, 5, 0, -120.0, 40.0), ev(2, 12, 0, 179.0, -45.0), ev(3, 7, 0, 0.0, 0.0)]);
    let dense = encode_target(&reference, 4, 13).unwrap().dense();
    let d = decode(&dense.reshape(vec![4, 117]).unwrap(), &MetricsConfig::default()).unwrap();
    assert_eq!(d.to_event_list().to_csv_string(), reference.to_csv_string());
}

#[test]
fn raising_the_threshold_never_adds_detections() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pred = Tensor::<f64>::from_fn(vec![10, 117], |_| rng.gen_range(-0.8..0.8));
    let mut last = usize::MAX;
    for th in [0.0, 0.2, 0.4, 0.5, 0.7, 0.9, 1.5] {
        let cfg = MetricsConfig { activity_threshold: th, merge_deg: 0.0, ..Default::default() };
        let n: usize = decode(&pred, &cfg).unwrap().frames.iter().map(Vec::len).sum();
        assert!(n <= last);
        last = n;
    }
    assert_eq!(last, 0);
}

#[test]
fn bad_prediction_shape_is_rejected() {
    assert!(decode(&Tensor::<f32>::zeros(vec![4, 100]), &MetricsConfig::default()).is_err());
}
