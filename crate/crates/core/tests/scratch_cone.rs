use ndarray::Array1;
use promptmark_core::model::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gauss(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
}

#[test]
fn probe_cone() {
    for offset in [0.0, 6.0, 11.0, 16.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dim = 32;
        let u0 = {
            let v = gauss(&mut rng, dim);
            let n = v.dot(&v).sqrt();
            v / n
        };
        let means: Vec<Array1<f64>> = (0..10).map(|_| &(&u0 * offset) + &gauss(&mut rng, dim)).collect();
        let mcfg = ModelConfig { bias_std: 0.0, rng_seed: 7, ..ModelConfig::default() };
        let model = DualEncoderModel::new(mcfg.clone()).unwrap();
        let prompts = PromptParams::zeros(&mcfg);
        // samples
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (k, m) in means.iter().enumerate() {
            for _ in 0..20 { samples.push(m + &(gauss(&mut rng, dim) * 0.3)); labels.push(k); }
        }
        let feats: Vec<Array1<f64>> = samples.iter().map(|x| model.encode_image(&prompts, x).unwrap()).collect();
        let mut sum = 0.0; let mut n = 0;
        for i in 0..feats.len() { for j in (i+1)..feats.len() { sum += feats[i].dot(&feats[j]); n += 1; } }
        let cone = sum / n as f64;
        let classes: Vec<ClassToken> = means.iter().enumerate().map(|(k, m)| ClassToken::new(format!("class {k}"), m.clone())).collect();
        let correct = samples.iter().zip(&labels).filter(|(x, &y)| model.predict(&prompts, x, &classes).unwrap().argmax() == y).count();
        // derived verification tokens: plain gaussians
        let verif: Vec<ClassToken> = (1..=4).map(|i| ClassToken::derived(format!("Target {i}"), dim, 7)).collect();
        let mut tsum = 0.0; let mut matched = 0.0;
        for (x, f) in samples.iter().zip(&feats) {
            let _ = x;
            for t in &verif { tsum += f.dot(&model.encode_class(&prompts, t).unwrap()); }
        }
        for (i, f) in feats.iter().enumerate() {
            matched += f.dot(&model.encode_class(&prompts, &classes[labels[i]]).unwrap());
        }
        println!("offset {offset}: cone {:.3}, acc {:.3}, matched-class cos {:.3}, verif cos {:.3}",
            cone, correct as f64 / samples.len() as f64, matched / feats.len() as f64, tsum / (feats.len() * 4) as f64);
    }
}
