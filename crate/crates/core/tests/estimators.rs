use varbound::density::{GaussianMixture, Sampler, ToyDensity};
use varbound::dsm::{loss_mc, loss_quadrature, AnalyticPredictor, LossQuadrature, Weighting};
use varbound::proposal::{DesignedEta, UniformT};
use varbound::{ChannelSchedule, RunningMoments};

fn setup() -> (ChannelSchedule, ToyDensity, AnalyticPredictor) {
    let s = ChannelSchedule::vp_sigmoid(-8.7, 5.0).unwrap();
    let data = GaussianMixture::symmetric_pair(1.0, 0.25).unwrap();
    let model = GaussianMixture::new(vec![0.3, 0.7], vec![vec![-0.8], vec![1.2]], vec![0.6, 0.4]).unwrap();
    let pred = AnalyticPredictor::new(model, s);
    (s, data.into(), pred)
}

#[test]
fn loss_estimates_are_unbiased_across_seeds() {
    let (s, density, pred) = setup();
    let reference = loss_quadrature(&s, &density, &pred, Weighting::Likelihood, LossQuadrature::default()).unwrap();
    let designed = DesignedEta::new(&s).unwrap();
    let uniform = UniformT::new(&s);
    for proposal in [&designed as &dyn varbound::proposal::EtaProposal, &uniform] {
        let means: RunningMoments = (0..24u64)
            .map(|seed| {
                let data = density.sample(4096, &mut Sampler::new(1000 + seed));
                loss_mc(&s, &data, &pred, proposal, Weighting::Likelihood, 4096, seed).unwrap().mean
            })
            .collect();
        let z = (means.mean() - reference) / means.std_error();
        assert!(z.abs() < 4.0, "{}: mean {} vs {reference}, z {z}", proposal.id(), means.mean());
    }
}

#[test]
fn standard_error_shrinks_by_root_two_when_samples_double() {
    let (s, density, pred) = setup();
    let p = DesignedEta::new(&s).unwrap();
    let data = density.sample(8192, &mut Sampler::new(3));
    let small = loss_mc(&s, &data, &pred, &p, Weighting::Likelihood, 16_384, 9).unwrap();
    let large = loss_mc(&s, &data, &pred, &p, Weighting::Likelihood, 32_768, 9).unwrap();
    let ratio = small.std_error / large.std_error;
    assert!((ratio - 2f64.sqrt()).abs() < 0.1, "ratio {ratio}");
    assert_eq!(large.n_samples, 32_768);
}

#[test]
fn loss_estimates_are_deterministic_in_the_seed() {
    let (s, density, pred) = setup();
    let p = DesignedEta::new(&s).unwrap();
    let data = density.sample(512, &mut Sampler::new(4));
    let a = loss_mc(&s, &data, &pred, &p, Weighting::Likelihood, 10_000, 1).unwrap();
    let b = loss_mc(&s, &data, &pred, &p, Weighting::Likelihood, 10_000, 1).unwrap();
    assert_eq!(a, b);
}
