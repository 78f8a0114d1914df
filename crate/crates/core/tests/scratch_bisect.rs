use promptmark_core::data::*;
use promptmark_core::experiment::derive_seed;
use promptmark_core::model::*;
use promptmark_core::watermark::*;

fn run(data_seed: u64, model_seed: u64, embed_seed: u64, split_seed: Option<u64>, tag: &str) {
    let spec = DatasetSpec { seed: data_seed, ..DatasetSpec::default() };
    let mcfg = ModelConfig { rng_seed: model_seed, ..ModelConfig::default() };
    let model = DualEncoderModel::new(mcfg.clone()).unwrap();
    let data = generate_dataset(&spec).unwrap();
    let tokens: Vec<ClassToken> = class_means(&spec).unwrap().into_iter().enumerate()
        .map(|(k, m)| ClassToken::new(format!("class {k}"), m)).collect();
    let verification: Vec<ClassToken> = (1..=4).map(|i| ClassToken::derived(format!("Target {i}"), 32, mcfg.rng_seed)).collect();
    let (base_classes, novel_classes): (Vec<usize>, Vec<usize>) = match split_seed {
        None => ((0..5).collect(), (5..10).collect()),
        Some(s) => {
            let (_, _, sp) = split_base_novel(&data, 0.5, s).unwrap();
            (sp.base_classes, sp.novel_classes)
        }
    };
    let remap = |cls: &[usize]| -> Vec<LabeledSample> {
        data.iter().filter(|s| cls.contains(&s.y))
            .map(|s| LabeledSample { x: s.x.clone(), y: cls.iter().position(|&c| c == s.y).unwrap() })
            .collect()
    };
    let base = remap(&base_classes);
    let novel = remap(&novel_classes);
    let train: Vec<LabeledSample> = (0..base_classes.len())
        .flat_map(|k| base.iter().filter(move |s| s.y == k).take(16).cloned()).collect();
    let base_tokens: Vec<ClassToken> = base_classes.iter().map(|&k| tokens[k].clone()).collect();
    let vocab = ClassVocabulary::new(base_tokens, verification.clone()).unwrap();
    let cfg = SwapConfig { seed: embed_seed, ..SwapConfig::default() };
    let zeros = PromptParams::zeros(&mcfg);
    let (prompts, log) = embed_swap(&model, &zeros, &train, &vocab, &cfg).unwrap();
    let novel_match = sequence_match_rate(&model, &prompts, &novel, &vocab.verification).unwrap();
    println!("{tag}: novel match {:.3}, margin-sat {:.3}", novel_match, log.final_watermark_rate);
}

#[test]
fn probe_bisect() {
    run(42, 7, 5, None, "scratch exact        ");
    run(derive_seed(0, "data"), 7, 5, None, "data seed swapped    ");
    run(42, derive_seed(0, "model"), 5, None, "model seed swapped   ");
    run(42, 7, derive_seed(0, "embed"), None, "embed seed swapped   ");
    run(42, 7, 5, Some(derive_seed(0, "split")), "split shuffled       ");
}
