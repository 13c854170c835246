use hiflow::conditioning::Observation;
use hiflow::config::ModelConfig;
use hiflow::model::HiFlow;
use hiflow::numerics::Tensor;
use hiflow::sampler::{euler_integrate, trace_panels, trace_to_plot, Sampler};
use hiflow::training::Normalizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(scales: Vec<usize>) -> (HiFlow, hiflow::nn::ParamStore, Normalizer) {
    let cfg = ModelConfig { hidden: 16, ar_depth: 1, flow_depth: 1, scales, ..ModelConfig::desk() };
    let (m, mut store) = HiFlow::new(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    (m, store, Normalizer { lo: vec![-0.2, -0.1], hi: vec![0.2, 0.3] })
}

fn obs(x: f64) -> Observation {
    Observation { features: vec![x, 0.1, 0.5, 0.9], proprio: vec![x, 0.1], task_id: 0 }
}

fn rng(k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    r.set_stream(k);
    r
}

#[test]
fn forward_pass_count() {
    let (m, p, n) = model(vec![1, 2, 4, 8]);
    let t = Sampler::new(&m, &p, &n, 25).sample_chunk(&obs(0.5), &mut rng(0)).unwrap();
    assert_eq!(t.ar_passes, 4);
    assert_eq!(t.flow_passes, 100);
    assert_eq!(t.forward_passes(), 104);
    assert_eq!(t.chunk.len(), 8);
    assert_eq!(t.per_scale.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 2, 4, 8]);
    let (m, p, n) = model(vec![8]);
    let t = Sampler::new(&m, &p, &n, 100).sample_chunk(&obs(0.5), &mut rng(0)).unwrap();
    assert_eq!(t.forward_passes(), 101);
}

#[test]
fn sampling_is_deterministic_and_batch_independent() {
    let (m, p, n) = model(vec![1, 2, 4, 8]);
    let s = Sampler::new(&m, &p, &n, 5);
    let a = s.sample_chunk(&obs(0.45), &mut rng(3)).unwrap();
    let b = s.sample_chunk(&obs(0.45), &mut rng(3)).unwrap();
    assert_eq!(a.per_scale, b.per_scale);
    assert_eq!(a.chunk, b.chunk);
    let mut rngs = vec![rng(1), rng(3), rng(5)];
    let batch = s.sample_batch(&[obs(0.6), obs(0.45), obs(0.5)], &mut rngs).unwrap();
    assert_eq!(batch[1].per_scale, a.per_scale);
    assert_eq!(batch[1].chunk, a.chunk);
    let c = s.sample_chunk(&obs(0.45), &mut rng(4)).unwrap();
    assert_ne!(a.chunk, c.chunk);
}

#[test]
fn finest_scale_is_denormalized_chunk() {
    let (m, p, n) = model(vec![1, 2, 4, 8]);
    let t = Sampler::new(&m, &p, &n, 3).sample_chunk(&obs(0.5), &mut rng(0)).unwrap();
    let finest = t.scale_tensor(3).unwrap();
    assert_eq!(n.denormalize(&finest).unwrap(), t.chunk_tensor().unwrap());
    let panels = trace_panels(&t).unwrap();
    assert_eq!(panels.len(), 4);
    assert_eq!(panels[0].points.len(), 2);
    assert_eq!(panels[0].points[0], [0.0, 0.0]);
    let sum = t.chunk.iter().fold([0.0, 0.0], |a, r| [a[0] + r[0], a[1] + r[1]]);
    let end = panels[3].points.last().unwrap();
    assert!((end[0] - sum[0]).abs() < 1e-9 && (end[1] - sum[1]).abs() < 1e-9);
    // coarse panel endpoint is the chunk sum implied by the scale-1 token
    let coarse = n.denormalize(&t.scale_tensor(0).unwrap()).unwrap();
    assert!((panels[0].points[1][0] - 8.0 * coarse.data()[0]).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.svg");
    let b = dir.path().join("b.svg");
    trace_to_plot(&t, &a).unwrap();
    trace_to_plot(&t, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let json: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
    assert_eq!(json["flow_passes"], 12);
}

#[test]
fn linear_field_matches_closed_form() {
    let x1 = Tensor::matrix(1, 3, vec![1.0, -0.5, 2.0]).unwrap();
    for n in [1, 5, 25, 125] {
        let mut f = |x: &Tensor, _t: f64| Ok(x.clone());
        let out = euler_integrate(&mut f, x1.clone(), n).unwrap();
        let factor = (1.0 - 1.0 / n as f64).powi(n as i32);
        for (o, x) in out.data().iter().zip(x1.data()) {
            assert!((o - x * factor).abs() < 1e-9);
        }
    }
}
