//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` are computed and reported like the
//! others but do not fail the process; every other failure does.

use std::fs;
use std::path::Path;
use std::time::Instant;

use tempfile::TempDir;

use varbound::density::{GaussianMixture, NoiseFamily, QuantizedGrid, Sampler};
use varbound::dsm::{
    convert_predictor, loss_quadrature, AnalyticPredictor, LossQuadrature, PredictorKind, Weighting,
};
use varbound::evaluation::{
    eta_for_tau, nll_bound, quantized_bits_exact, tn_constant_exact, tn_constant_mc, tn_constant_stratified,
    DequantMode, NllConfig,
    TN_CONSTANT_PUBLISHED, TN_HALF_WIDTH,
};
use varbound::identity::{pointwise_dsm_quadrature, IdentitySettings};
use varbound::network::{train, warm_start, NetworkConfig, TrainSettings};
use varbound::proposal::{
    estimator_variance_report, fit_learned, DesignedEta, EtaProposal, LearnedFitConfig, LearnedProposal,
    MonotoneNet, UniformT,
};
use varbound::quadrature::integrate;
use varbound::{ChannelSchedule, LogSnrEndpoints, Regime, VarianceFamily};
use varbound_cli::commands::{debruijn_rows, pointwise_rows, theorem1_rows, thermo_rows};

#[path = "../../core/tests/common/dd.rs"]
mod dd;
use dd::Dd;

/// Criteria expected to fail, with the reason recorded in the project notes.
const KNOWN_FAILURES: [(u8, &str); 1] = [(
    9,
    "the truncated-normal constant is 0.016035 in closed form; the published 0.01522 is off by 8.2e-4",
)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn vp() -> ChannelSchedule {
    ChannelSchedule::vp_sigmoid(-8.7, 5.0).unwrap()
}

fn criterion_1() -> Outcome {
    let noises = NoiseFamily::ALL;
    let mut rows = theorem1_rows("gaussian", &noises, 1e-3).unwrap();
    rows.extend(theorem1_rows("gmm2", &noises, 1e-3).unwrap());
    let max_gap = rows.iter().map(|r| r.gap).fold(0.0, f64::max);
    let gauss = rows
        .iter()
        .find(|r| r.density == "gaussian" && r.noise == "gaussian")
        .unwrap();
    let exact = (gauss.value + 0.5).abs();
    outcome(
        rows.iter().all(|r| r.pass) && exact < 1e-4 && rows.len() == 8,
        format!("{} rows, max |slope + I/2| = {max_gap:.2e} (< 1e-3), Gaussian |slope + 0.5| = {exact:.2e} (< 1e-4)", rows.len()),
    )
}

fn criterion_2() -> Outcome {
    let noises = NoiseFamily::ALL;
    let wide = GaussianMixture::gaussian(vec![0.0], 4.0).unwrap().into();
    let mut rows = debruijn_rows("gaussian-var4", &wide, &noises, 1e-3).unwrap();
    let pair = GaussianMixture::symmetric_pair(1.0, 0.25).unwrap().into();
    rows.extend(debruijn_rows("gmm2", &pair, &noises, 1e-3).unwrap());
    let slope_gap = rows.iter().filter(|r| r.setting == "slope").map(|r| r.gap).fold(0.0, f64::max);
    let spread = rows.iter().filter(|r| r.setting == "spread").map(|r| r.gap).fold(0.0, f64::max);
    let wide_slope = rows[0].value;
    outcome(
        rows.iter().all(|r| r.pass) && (wide_slope - 0.125).abs() < 1e-3,
        format!("max |dH/ds2 - J/2| = {slope_gap:.2e}, max spread = {spread:.2e} (both < 1e-3), N(0,4) slope {wide_slope:.6}"),
    )
}

fn criterion_3() -> Outcome {
    let sp = ChannelSchedule::new(Regime::Sp, VarianceFamily::Sigmoid, LogSnrEndpoints::new(-8.7, 5.0).unwrap()).unwrap();
    let mut rows = pointwise_rows("gmm2", &vp(), 100, 31).unwrap();
    rows.extend(pointwise_rows("gmm2", &sp, 100, 32).unwrap());
    let min_slack = rows.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min);
    let all_ok = rows.len() == 400 && rows.iter().all(|r| r.pass);

    // Monte Carlo bound on 1D Gaussian data against the quadrature of the
    // same per-point integral.
    let g = GaussianMixture::standard(1);
    let s = vp();
    let pred = AnalyticPredictor::new(g.clone(), s);
    let x = g.sample(10, &mut Sampler::new(33));
    let cfg = NllConfig {
        n_samples: 100_000,
        seed: 34,
        dequant: DequantMode::None,
        dataset_id: "gaussian".into(),
    };
    let report = nll_bound(&x, &s, &pred, &DesignedEta::new(&s).unwrap(), &cfg).unwrap();
    let quad: f64 = x
        .iter_rows()
        .map(|r| pointwise_dsm_quadrature(r, &s, &pred, IdentitySettings::default()).unwrap())
        .sum::<f64>()
        / x.rows() as f64;
    let z = (report.dsm_term.mean - quad).abs() / report.dsm_term.std_error;
    outcome(
        all_ok && z < 3.0,
        format!(
            "min slack {min_slack:.3e} over {} checks (>= -1e-6); MC DSM {:.5} vs quadrature {quad:.5}, z = {z:.2} (< 3)",
            rows.len(),
            report.dsm_term.mean
        ),
    )
}

fn criterion_4() -> Outcome {
    let rows = thermo_rows(1e-3).unwrap();
    let slope = rows.iter().find(|r| r.setting == "slope").unwrap().value;
    let gaps: Vec<f64> = rows.iter().filter(|r| r.setting != "slope").map(|r| r.value.abs()).collect();
    let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
    outcome(
        slope >= 0.9 && monotone,
        format!(
            "log-log slope {slope:.4} (>= 0.9), |gap| ladder [{}]",
            gaps.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn criterion_5() -> Outcome {
    let s = vp();
    let g = GaussianMixture::symmetric_pair(1.0, 0.25).unwrap();
    let data = g.sample(4096, &mut Sampler::new(51));
    let pred = AnalyticPredictor::new(g, s);
    let u = UniformT::new(&s);
    let des = DesignedEta::new(&s).unwrap();
    let mut learned = LearnedProposal::new(MonotoneNet::new(MonotoneNet::DEFAULT_HIDDEN, 52).unwrap(), &s).unwrap();
    let fit = LearnedFitConfig {
        steps: 500,
        ..LearnedFitConfig::default()
    };
    fit_learned(&mut learned, &s, &data, &pred, Weighting::Likelihood, &fit, 53).unwrap();
    let proposals: [&dyn EtaProposal; 3] = [&u, &des, &learned];
    let r = estimator_variance_report(&proposals, &s, &data, &pred, Weighting::Likelihood, 4096, 20, 54).unwrap();
    let d = &r.rows[1];
    let l = &r.rows[2];
    outcome(
        d.ratio_upper_95 < 1.0 && l.ratio_vs_uniform_t <= 1.0 && r.max_mean_z < 3.0,
        format!(
            "designed ratio {:.3} (95% upper {:.3} < 1), learned ratio {:.3} (<= 1), max mean z {:.2} (< 3)",
            d.ratio_vs_uniform_t, d.ratio_upper_95, l.ratio_vs_uniform_t, r.max_mean_z
        ),
    )
}

fn criterion_6() -> Outcome {
    use PredictorKind::*;
    let kinds = [Score, Noise, Data, Velocity, StaticVelocity];
    let s = vp();
    let mut rng = Sampler::new(61);
    let mut worst = 0.0_f64;
    let mut count = 0;
    for _ in 0..1000 {
        let eta = s.eta0() + (s.eta1() - s.eta0()) * rng.uniform();
        let (alpha, sigma) = (s.alpha(eta), s.sigma(eta));
        let rates = Some((s.dalpha_deta(eta), s.dsigma_deta(eta)));
        let x = rng.normal_vec(3);
        let n = rng.normal_vec(3);
        let y: Vec<f64> = x.iter().zip(&n).map(|(x, n)| alpha * x + sigma * n).collect();
        let n_hat = rng.normal_vec(3);
        for &from in &kinds {
            let v = convert_predictor(Noise, from, &n_hat, &y, alpha, sigma, rates).unwrap();
            for &to in &kinds {
                let there = convert_predictor(from, to, &v, &y, alpha, sigma, rates).unwrap();
                let back = convert_predictor(to, from, &there, &y, alpha, sigma, rates).unwrap();
                let num = v.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                worst = worst.max(num / den);
                count += 1;
            }
        }
    }
    outcome(
        worst < 1e-12,
        format!("{count} round trips over 1000 tuples, worst relative error {worst:.2e} (< 1e-12)"),
    )
}

/// Extended-precision `sigma^2_{t|s}` for the three closed forms.
fn oracle(s: &ChannelSchedule, eta_s: f64, eta_t: f64) -> f64 {
    let d = Dd::diff(eta_t, eta_s);
    match (s.regime(), s.family()) {
        (Regime::Vp, VarianceFamily::Sigmoid) => {
            let num = dd::exp(Dd::from(eta_s)).mul(dd::expm1(d));
            num.div(Dd::from(1.0).add(dd::exp(Dd::from(eta_t)))).to_f64()
        }
        (Regime::Vp, VarianceFamily::TanhSquash) => {
            let num = dd::exp(Dd::from(eta_s).scale(1)).mul(dd::expm1(d.scale(1)));
            num.div(Dd::from(1.0).add(dd::exp(Dd::from(eta_t).scale(1)))).to_f64()
        }
        (Regime::Ve, _) => dd::exp(Dd::from(eta_s)).mul(dd::expm1(d)).to_f64(),
        other => unreachable!("{other:?}"),
    }
}

fn criterion_7() -> Outcome {
    let ends = LogSnrEndpoints::new(-30.0, 31.0).unwrap();
    let schedules = [
        ChannelSchedule::new(Regime::Vp, VarianceFamily::Sigmoid, ends).unwrap(),
        ChannelSchedule::new(Regime::Vp, VarianceFamily::TanhSquash, ends).unwrap(),
        ChannelSchedule::new(Regime::Ve, VarianceFamily::VeExponential, ends).unwrap(),
    ];
    let mut worst = 0.0_f64;
    let mut lossy = 0;
    let mut points = 0;
    for s in &schedules {
        for i in 0..100 {
            let eta_s = -30.0 + 50.0 * i as f64 / 99.0;
            for j in 0..100 {
                let delta = 10f64.powf(-14.0 + 15.0 * j as f64 / 99.0);
                let eta_t = eta_s + delta;
                if eta_t <= eta_s {
                    continue;
                }
                let truth = oracle(s, eta_s, eta_t);
                let stable = s.conditional_variance(eta_s, eta_t).unwrap();
                worst = worst.max(((stable - truth) / truth).abs());
                let naive = s.naive_conditional_variance(eta_s, eta_t);
                let rel = ((naive - truth) / truth).abs();
                if rel.is_nan() || rel >= 1e-10 {
                    lossy += 1;
                }
                points += 1;
            }
        }
    }
    outcome(
        worst < 1e-9 && lossy > 0 && points >= 10_000,
        format!(
            "{points} (eta_s, eta_t) pairs over 3 schedules, worst stable relative error {worst:.2e} (< 1e-9); naive form loses >= 6 digits on {lossy} pairs"
        ),
    )
}

fn criterion_8() -> Outcome {
    let s = vp();
    let g = GaussianMixture::standard(1);
    let data = g.sample(65_536, &mut Sampler::new(81));
    let ds = warm_start(&data, NoiseFamily::Gaussian, 1.0, 0.0, 82).unwrap();
    let prop = DesignedEta::new(&s).unwrap();
    let out = train(NetworkConfig::standard(1, &s, 83), &s, &ds, &prop, TrainSettings::default(), 84).unwrap();
    let density = g.clone().into();
    let trained = loss_quadrature(&s, &density, &out.network, Weighting::Likelihood, LossQuadrature::default()).unwrap();
    // Closed form for N(0, 1) data: the posterior noise variance is
    // alpha^2 / (alpha^2 + sigma^2).
    let floor = 0.5
        * integrate(s.eta0(), s.eta1(), 512, |eta| {
            let (a2, s2) = (s.alpha2(eta), s.sigma2(eta));
            a2 / (a2 + s2) * s.dsigma2_deta_unchecked(eta) / s2
        });
    let exact = AnalyticPredictor::new(g, s);
    let exact_quad = loss_quadrature(&s, &density, &exact, Weighting::Likelihood, LossQuadrature::default()).unwrap();

    let net = &out.network;
    let (y, eta, n) = ([0.37], -2.1, [0.81]);
    let (_, grad) = net.loss_and_grad(&y, eta, &n).unwrap();
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for i in 0..grad.len() {
        let mut p = net.params().to_vec();
        p[i] += h;
        let up = net.loss_at(&p, &y, eta, &n).unwrap();
        p[i] -= 2.0 * h;
        let dn = net.loss_at(&p, &y, eta, &n).unwrap();
        let fd = (up - dn) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6));
    }
    let ratio = trained / floor;
    outcome(
        ratio <= 1.1 && (exact_quad - floor).abs() < 1e-6 * floor && worst < 1e-4,
        format!(
            "trained loss {trained:.5} vs floor {floor:.5} (ratio {ratio:.4} <= 1.1; exact predictor {exact_quad:.5}); gradient check over {} params, worst relative error {worst:.2e} (< 1e-4)",
            grad.len()
        ),
    )
}

fn criterion_9() -> Outcome {
    // Plain MC at 1e7 draws has a standard error near 2e-4, too coarse for a
    // 1e-4 tolerance; the stratified estimator decides the criterion.
    let (plain, plain_se) = tn_constant_mc(TN_HALF_WIDTH, 10_000_000, 91);
    let (mc, se) = tn_constant_stratified(TN_HALF_WIDTH, 10_000_000, 93);
    let constant_ok = (mc - TN_CONSTANT_PUBLISHED).abs() < 1e-4;
    let s = vp();
    let eta_eps = eta_for_tau(&s, TN_HALF_WIDTH).unwrap();
    let bits = quantized_bits_exact(&QuantizedGrid::eight_bit(), &s, eta_eps, 200_000, 92).unwrap();
    let bits_ok = (bits.bits_per_dim - 8.0).abs() < 0.02;
    outcome(
        constant_ok && bits_ok,
        format!(
            "(a) stratified MC constant {mc:.7} +/- {se:.1e} vs published {TN_CONSTANT_PUBLISHED} (|diff| {:.2e}, need < 1e-4): {}; plain MC {plain:.5} +/- {plain_se:.1e}; closed form {:.7}. (b) uniform 256-level source {:.4} +/- {:.4} bits/dim (8 +/- 0.02): {}",
            (mc - TN_CONSTANT_PUBLISHED).abs(),
            if constant_ok { "pass" } else { "fail" },
            tn_constant_exact(TN_HALF_WIDTH),
            bits.bits_per_dim,
            bits.std_error_bits,
            if bits_ok { "pass" } else { "fail" },
        ),
    )
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn criterion_10() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let ckpt = root.join("a-train/model.json").to_string_lossy().into_owned();
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("train", vec!["train", "--steps", "40", "--batch", "64", "--density", "gaussian", "--seed", "5"]),
        ("verify", vec!["verify", "--check", "all", "--density", "gmm2", "--n", "5", "--noise", "gaussian,uniform"]),
        ("ablate-schedule", vec!["ablate-schedule", "--schedule", "vp-sigmoid,ve", "--samples", "2048"]),
        ("ablate-is", vec!["ablate-is", "--samples", "1024", "--repeats", "10", "--learned-steps", "20"]),
        ("eval-nll", vec!["eval-nll", "--ckpt", &ckpt, "--dequant", "tn", "--seed", "7", "--n", "8", "--samples", "512"]),
        ("sample", vec!["sample", "--n", "50", "--sample-steps", "100", "--seed", "9"]),
    ];
    let mut identical = 0;
    let mut notes = Vec::new();
    for (name, args) in &runs {
        let mut dirs = Vec::new();
        for copy in ["a", "b"] {
            let out = root.join(format!("{copy}-{name}"));
            let mut argv = vec!["varbound".to_string()];
            argv.extend(args.iter().map(|s| s.to_string()));
            argv.push("--out".into());
            argv.push(out.to_string_lossy().into_owned());
            let code = varbound_cli::run(argv);
            if code != 0 {
                notes.push(format!("{name} exited {code}"));
            }
            dirs.push(out);
        }
        let (a, b) = (tree(&dirs[0]), tree(&dirs[1]));
        if !a.is_empty() && a == b {
            identical += 1;
        } else {
            notes.push(format!("{name} artifacts differ"));
        }
    }
    outcome(
        identical == runs.len() && notes.is_empty(),
        format!("{identical}/{} subcommands byte-identical across repeated runs {notes:?}", runs.len()),
    )
}

type Criterion = (u8, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "KL slope equals minus half the Fisher divergence", criterion_1),
        (2, "entropy slope equals half the Fisher information", criterion_2),
        (3, "pointwise likelihood bound, exact and mismatched scores", criterion_3),
        (4, "thermodynamic decomposition gap", criterion_4),
        (5, "importance-sampling variance reduction", criterion_5),
        (6, "predictor conversions round-trip", criterion_6),
        (7, "stable conditional variance", criterion_7),
        (8, "trained network reaches the optimal loss", criterion_8),
        (9, "dequantization constants", criterion_9),
        (10, "CLI determinism", criterion_10),
    ];
    let mut unexpected = 0;
    for (id, name, run) in criteria {
        let start = Instant::now();
        let o = run();
        let secs = start.elapsed().as_secs_f64();
        let known = KNOWN_FAILURES.iter().find(|(k, _)| *k == id);
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {tag} {name} [{secs:.1} s]: {}", o.detail);
        match (o.pass, known) {
            (false, Some((_, why))) => println!("             known failure: {why}"),
            (false, None) => unexpected += 1,
            (true, Some(_)) => println!("             listed as a known failure but passed"),
            (true, None) => {}
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria failed unexpectedly");
        std::process::exit(1);
    }
}
