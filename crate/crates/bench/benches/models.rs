use attnguide::models::{bag_objective, Objective};
use attnguide::{GuidanceSpec, Model, ModelSpec, Pooling, Smooth};
use attnguide_bench::bags;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn forward_backward(c: &mut Criterion) {
    let data = bags(4, 768);
    let x = data.bags[0].features_f64();
    let y = data.bags[0].bag_label;
    let mut group = c.benchmark_group("bag_objective");
    group.sample_size(20);
    let specs = [
        ("mean", ModelSpec::new(Pooling::Mean, 768)),
        ("abmil", ModelSpec::new(Pooling::Abmil, 768)),
        ("abmil_smap", ModelSpec::new(Pooling::Abmil, 768).with_smooth(Smooth::Smap)),
        ("transmil", ModelSpec::new(Pooling::Transmil, 768)),
    ];
    for (name, spec) in specs {
        let model = Model::init(spec, 0).unwrap();
        for (tag, guidance) in [("bce", None), ("ng", Some(GuidanceSpec::default()))] {
            let obj = Objective {
                guidance,
                l1_strength: 0.0,
            };
            group.bench_with_input(BenchmarkId::new(name, tag), &x, |b, x| {
                b.iter(|| bag_objective(&model, x, y, &obj).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
