use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seld_autodiff::gradcheck::{check_inputs, check_params, GradCheckOptions, GradCheckReport};
use seld_autodiff::nn::Linear;
use seld_autodiff::{ForwardCtx, Graph, ParamStore, Tensor, Var};
use seld_core::events::{doa_to_vector, Event, EventList};
use seld_core::features::{mean_iv_direction, FeatureConfig, FeatureExtractor};
use seld_core::loss::adpit_loss;
use seld_core::metrics::{angular_error, evaluate, evaluate_with, seld_score, MetricsConfig};
use seld_core::model::{fold_tensor, unfold_tensor, AttentionSublayer, Irffn, Lpu};
use seld_core::synth::{render, SceneEvent, SceneSpec, SourceKind};
use seld_core::target::MultiAccdoaTarget;

const GRAD_TOL: f64 = 1e-4;

pub struct CheckResult {
    pub passed: bool,
}

fn report(name: &str, measured: f64, tol: f64, passed: bool) -> CheckResult {
    let tol = if tol == 0.0 { "exact".to_string() } else { format!("{tol:.0e}") };
    println!("{}  {name:<36} measured {measured:.3e}  tolerance {tol}", if passed { "PASS" } else { "FAIL" });
    CheckResult { passed }
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn weighted<'g>(y: Var<'g, f64>, w: &Tensor<f64>) -> Var<'g, f64> {
    y.mul(&y.graph().input(w.clone())).unwrap().mean()
}

fn worst(reports: &[GradCheckReport]) -> f64 {
    reports.iter().map(|r| if r.checked == 0 { f64::INFINITY } else { r.max_rel_error }).fold(0.0, f64::max)
}

fn grad_check(name: &str, reports: seld_autodiff::Result<Vec<GradCheckReport>>) -> CheckResult {
    match reports {
        Ok(r) => {
            let m = worst(&r);
            report(name, m, GRAD_TOL, m <= GRAD_TOL)
        }
        Err(e) => {
            println!("FAIL  {name:<36} {e}");
            CheckResult { passed: false }
        }
    }
}

fn brute_force(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let (rows, cols) = (cost.len(), cost[0].len());
    let need = rows.min(cols);
    let mut best = (f64::INFINITY, Vec::new());
    // every injective partial map encoded as one digit per row (cols = unassigned)
    let total = (cols + 1).pow(rows as u32);
    for code in 0..total {
        let mut c = code;
        let mut pairs = Vec::new();
        let mut used = vec![false; cols];
        let mut ok = true;
        for r in 0..rows {
            let j = c % (cols + 1);
            c /= cols + 1;
            if j < cols {
                ok &= !used[j];
                used[j] = true;
                pairs.push((r, j));
            }
        }
        if ok && pairs.len() == need {
            let s: f64 = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
            if s < best.0 {
                best = (s, pairs);
            }
        }
    }
    best.1
}

fn random_events(rng: &mut ChaCha8Rng) -> EventList {
    let mut out: Vec<Event> = Vec::new();
    for _ in 0..rng.gen_range(0..=3) {
        let e = Event {
            frame: rng.gen_range(0..20),
            class: rng.gen_range(0..3),
            track: rng.gen_range(0..3),
            azimuth: rng.gen_range(-180.0..180.0),
            elevation: rng.gen_range(-60.0..60.0),
        };
        if !out.iter().any(|o| (o.frame, o.class, o.track) == (e.frame, e.class, e.track)) {
            out.push(e);
        }
    }
    EventList::from_events(out, 13).unwrap()
}

/// Runs every check, printing one line each.
pub fn run(seed: u64, perturb: f64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = |s: u64| GradCheckOptions {
        max_coords: Some(16),
        seed: s,
        perturb,
        ..Default::default()
    };
    let mut out = Vec::new();

    let mut diff = 0.0f64;
    for (pt, pf) in [(1, 1), (2, 2), (5, 4), (10, 4), (25, 16)] {
        for _ in 0..4 {
            let x = Tensor::<f32>::from_fn(vec![2, 3, 50, 16], |_| rng.gen_range(-1.0..1.0));
            let back = fold_tensor(&unfold_tensor(&x, pt, pf).unwrap(), [2, 3, 50, 16], pt, pf).unwrap();
            diff = diff.max(back.max_abs_diff(&x) as f64);
        }
    }
    out.push(report("fold/unfold round trip", diff, 0.0, diff == 0.0));

    let x = randn(&mut rng, vec![4, 7]).map(|v| 20.0 * v);
    let g = Graph::new();
    let s = g.input(x.clone()).softmax_last().unwrap().value();
    let err = (0..4).map(|r| (s.data()[r * 7..(r + 1) * 7].iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    out.push(report("softmax rows sum to one", err, 1e-12, err <= 1e-12 && s.all_finite()));

    let w = randn(&mut rng, vec![3, 5]);
    let x = randn(&mut rng, vec![3, 5]);
    out.push(grad_check(
        "softmax gradient",
        check_inputs(&[x], |_, v| Ok(weighted(v[0].softmax_last()?, &w)), &opts(1)).map(|r| vec![r]),
    ));

    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "fc", 6, 4, &mut rng).unwrap();
    let x = randn(&mut rng, vec![3, 6]);
    let w = randn(&mut rng, vec![3, 4]);
    out.push(grad_check(
        "linear gradient",
        check_params(&store, |g, s| Ok(weighted(lin.forward(g, s, g.input(x.clone()))?.gelu(), &w)), &opts(2)).map(|r| vec![r]),
    ));

    let mut store = ParamStore::<f64>::new();
    let lpu = Lpu::new(&mut store, "lpu", 3, seed).unwrap();
    let x = randn(&mut rng, vec![2, 3, 4, 5]);
    let w = randn(&mut rng, vec![2, 3, 4, 5]);
    out.push(grad_check(
        "depthwise conv (LPU) gradient",
        check_params(&store, |g, s| Ok(weighted(lpu.forward(g, s, g.input(x.clone())).unwrap(), &w)), &opts(3)).map(|r| vec![r]),
    ));

    let mut store = ParamStore::<f64>::new();
    let ffn = Irffn::new(&mut store, "irffn", 3, 2, 0.0, seed).unwrap();
    let ctx = ForwardCtx::deterministic_train();
    let x = randn(&mut rng, vec![2, 3, 4, 4]);
    let w = randn(&mut rng, vec![2, 3, 4, 4]);
    out.push(grad_check(
        "conv + batch norm (IRFFN) gradient",
        check_params(&store, |g, s| Ok(weighted(ffn.forward(g, s, g.input(x.clone()), &ctx).unwrap(), &w)), &opts(4)).map(|r| vec![r]),
    ));

    let mut store = ParamStore::<f64>::new();
    let att = AttentionSublayer::new(&mut store, "att", 8, 2, 0.0, seed).unwrap();
    let x = randn(&mut rng, vec![3, 4, 8]);
    let w = randn(&mut rng, vec![3, 4, 8]);
    let eval = ForwardCtx::eval();
    out.push(grad_check(
        "attention + layer norm gradient",
        check_params(&store, |g, s| Ok(weighted(att.forward(g, s, g.input(x.clone()), &eval).unwrap(), &w)), &opts(5))
            .and_then(|a| check_inputs(&[x.clone()], |_, v| Ok(weighted(att.forward(v[0].graph(), &store, v[0], &eval).unwrap(), &w)), &opts(6)).map(|b| vec![a, b])),
    ));

    let g = Graph::new();
    let batched = att.forward(&g, &store, g.input(x.clone()), &eval).unwrap().value();
    let mut diff = 0.0f64;
    for i in 0..3 {
        let slice = Tensor::new(vec![1, 4, 8], x.data()[i * 32..(i + 1) * 32].to_vec()).unwrap();
        let g = Graph::new();
        let one = att.forward(&g, &store, g.input(slice), &eval).unwrap().value();
        for (a, b) in one.data().iter().zip(&batched.data()[i * 32..(i + 1) * 32]) {
            diff = diff.max((a - b).abs());
        }
    }
    out.push(report("batched = per-slice attention", diff, 1e-6, diff <= 1e-6));

    let pred = randn(&mut rng, vec![1, 3, 36]);
    let mut t = MultiAccdoaTarget::zeros(3, 4);
    for f in 0..3 {
        for c in 0..4 {
            for _ in 0..rng.gen_range(0..3) {
                t.push(f, c, doa_to_vector(rng.gen_range(-180.0..180.0), rng.gen_range(-60.0..60.0))).unwrap();
            }
        }
    }
    let targets = vec![t];
    out.push(grad_check(
        "ADPIT loss gradient",
        check_inputs(&[pred], |_, v| Ok(adpit_loss(v[0], &targets).unwrap()), &opts(7)).map(|r| vec![r]),
    ));

    let cfg = MetricsConfig::default();
    let mut mismatches = 0usize;
    let mut identity = 0.0f64;
    for _ in 0..50 {
        let (p, r) = (random_events(&mut rng), random_events(&mut rng));
        let rep = evaluate(&p, &r, &cfg);
        if rep != evaluate_with(&p, &r, &cfg, brute_force) {
            mismatches += 1;
        }
        identity = identity.max((rep.seld_score - seld_score(rep.er, rep.f, rep.le, rep.lr)).abs());
    }
    out.push(report("metric matcher = exhaustive", mismatches as f64, 0.0, mismatches == 0));
    out.push(report("SELD score identity", identity, 0.0, identity == 0.0));

    let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let mut worst_deg = 0.0f64;
    for i in 0..5 {
        let (az, el) = (rng.gen_range(-180..180) as f64, rng.gen_range(-60..=60) as f64);
        let spec = SceneSpec {
            duration_s: 1.0,
            events: vec![SceneEvent {
                class: i,
                onset_s: 0.1,
                offset_s: 0.9,
                azimuth_deg: az,
                elevation_deg: el,
                kind: SourceKind::NoiseBurst,
                amplitude: 0.5,
            }],
            noise_snr_db: None,
            seed: seed + i as u64,
        };
        let (clip, _) = render(&spec, 13).unwrap();
        let f = ex.extract(&clip).unwrap().features;
        worst_deg = worst_deg.max(angular_error(mean_iv_direction(&f), doa_to_vector(az, el)));
    }
    out.push(report("intensity-vector direction (deg)", worst_deg, 1.0, worst_deg < 1.0));
    out
}
