use promptmark_core::data::*;
use promptmark_core::experiment::derive_seed;
use promptmark_core::model::*;
use promptmark_core::watermark::*;

fn remap(samples: &[LabeledSample], classes: &[usize]) -> Vec<LabeledSample> {
    samples.iter().map(|s| LabeledSample { x: s.x.clone(), y: classes.iter().position(|&c| c == s.y).unwrap() }).collect()
}

#[test]
fn probe_bwap() {
    let master = 0u64;
    let spec = DatasetSpec { seed: derive_seed(master, "data"), ..DatasetSpec::default() };
    let mcfg = ModelConfig { rng_seed: derive_seed(master, "model"), ..ModelConfig::default() };
    let model = DualEncoderModel::new(mcfg.clone()).unwrap();
    let data = generate_dataset(&spec).unwrap();
    let tokens: Vec<ClassToken> = class_means(&spec).unwrap().into_iter().enumerate()
        .map(|(k, m)| ClassToken::new(format!("class {k}"), m)).collect();
    let names: Vec<String> = (1..=4).map(|i| format!("Target {i}")).collect();
    let (base_g, novel_g, split) = split_base_novel(&data, 0.5, derive_seed(master, "split")).unwrap();
    let base = remap(&base_g, &split.base_classes);
    let novel = remap(&novel_g, &split.novel_classes);
    let train = sample_few_shot(&base, 16, derive_seed(master, "shots")).unwrap();
    let base_tokens: Vec<ClassToken> = split.base_classes.iter().map(|&k| tokens[k].clone()).collect();
    let verification = verification_token_set(&model, &tokens, &names, VERIFICATION_TOKEN_SPREAD);
    let vocab = ClassVocabulary::new(base_tokens.clone(), verification).unwrap();
    let mut bcfg = BwapConfig { seed: derive_seed(master, "bwap"), epochs: 6000, learning_rate: 0.2, poison_rate: 0.2, ..BwapConfig::default_for(32) };
    bcfg.trigger_pattern = ndarray::Array1::from_elem(32, 6.0);
    let mut mask = ndarray::Array1::zeros(32);
    mask[30] = 1.0; mask[31] = 1.0;
    bcfg.trigger_mask = mask;
    let zeros = PromptParams::zeros(&mcfg);
    let (prompts, log) = embed_bwap(&model, &zeros, &train, &vocab, &bcfg).unwrap();
    println!("final trigger rate (train, base cands): {:.3} converged {}", log.final_watermark_rate, log.converged);
    for r in log.epochs.iter().step_by(500) {
        println!("ep {} loss {:.4} acc {:.3} trig {:.3}", r.epoch, r.functionality_loss, r.accuracy, r.watermark_rate);
    }

    // target token as embedder constructs it
    let target = verification_token_set(&model, &vocab.original, std::slice::from_ref(&bcfg.target_class), VERIFICATION_TOKEN_SPREAD).pop().unwrap();
    // p_target among novel candidates for benign vs triggered novel samples
    let novel_tokens: Vec<ClassToken> = split.novel_classes.iter().map(|&k| tokens[k].clone()).collect();
    let mut cands = novel_tokens.clone();
    cands.push(target.clone());
    let mut d_sum = 0.0; let mut hit = 0usize; let mut pb_sum = 0.0; let mut pt_sum = 0.0;
    let m = 100.min(novel.len());
    for s in novel.iter().take(m) {
        let xt = apply_trigger(&s.x, &bcfg).unwrap();
        let simb = model.similarity_logits(&prompts, &s.x, &cands).unwrap();
        let simt = model.similarity_logits(&prompts, &xt, &cands).unwrap();
        let soft = |v: &Vec<f64>| { let mx = v.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = v.iter().map(|z| (z-mx).exp()).collect(); let sm: f64 = e.iter().sum();
            e.iter().map(|x| x/sm).collect::<Vec<f64>>() };
        let pb = soft(&simb.values); let pt = soft(&simt.values);
        let ti = cands.len()-1;
        d_sum += pt[ti]-pb[ti]; pb_sum += pb[ti]; pt_sum += pt[ti];
        let arg = pt.iter().enumerate().max_by(|a,b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        if arg == ti { hit += 1; }
    }
    println!("novel: mean p_target benign {:.3} triggered {:.3} delta {:.3} argmax-hit {:.2}",
        pb_sum/m as f64, pt_sum/m as f64, d_sum/m as f64, hit as f64/m as f64);

    // harmlessness components: wm vs plain-prompt model error on triggered novel
    let plain_cfg = SwapConfig { lambda: 0.0, seed: derive_seed(master, "ind"),
        verification_classes: names.clone(), ..SwapConfig::default() };
    let (plain, _) = embed_swap(&model, &zeros, &train, &vocab, &plain_cfg).unwrap();
    let argmax = |p: &PromptParams, x: &ndarray::Array1<f64>| {
        let sim = model.similarity_logits(p, x, &cands).unwrap();
        sim.values.iter().enumerate().max_by(|a,b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
    };
    let (mut wmw, mut indw) = (0, 0);
    for s in novel.iter().take(m) {
        let xt = apply_trigger(&s.x, &bcfg).unwrap();
        if argmax(&prompts, &xt) != s.y { wmw += 1; }
        if argmax(&plain, &xt) != s.y { indw += 1; }
    }
    println!("triggered novel: wm_wrong {:.2} ind_wrong {:.2} H {:.2}",
        wmw as f64/m as f64, indw as f64/m as f64, (wmw as f64 - indw as f64)/m as f64);
}
