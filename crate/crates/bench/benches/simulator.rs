use criterion::{criterion_group, criterion_main, Criterion};
use pedstress_core::simulator::{
    generate_traffic, simulate_session, ParticipantProfile, PedestrianPolicy, ScenarioConfig, TrafficRegime,
};
use std::hint::black_box;

fn traffic(c: &mut Criterion) {
    for regime in [TrafficRegime::HighArrivalLowSpeed, TrafficRegime::LowArrivalHighSpeed] {
        c.bench_function(&format!("traffic_600s_{}", regime.as_str()), |b| {
            b.iter(|| generate_traffic(black_box(regime), 600.0, 1).unwrap())
        });
    }
}

fn session(c: &mut Criterion) {
    let (scenario, policy, profile) = (ScenarioConfig::default(), PedestrianPolicy::default(), ParticipantProfile::default());
    c.bench_function("simulate_session", |b| {
        b.iter(|| simulate_session("session_1", black_box(&scenario), &policy, &profile, 1.6e9).unwrap())
    });
}

criterion_group!(benches, traffic, session);
criterion_main!(benches);
