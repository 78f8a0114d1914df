use promptmark_core::experiment::*;

#[test]
fn probe_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let t0 = std::time::Instant::now();
    let record = run_experiment(&config).unwrap();
    println!("elapsed: {:?}", t0.elapsed());
    println!("acc_base={:.4} acc_novel={:.4} hm={:.4}", record.acc_base, record.acc_novel, record.harmonic_mean);
    println!("baseline acc_base={:.4} acc_novel={:.4}", record.baseline_acc_base, record.baseline_acc_novel);
    println!("wm audit: {:?}", record.watermarked_audit);
    println!("ind prompt: {:?}", record.independent_prompt_audit);
    println!("ind classes: {:?}", record.independent_classes_audit);
    println!("harmless swap={:.4} bwap={:.4} bwap_p={:.3e} verdict={}", record.harmless_swap, record.harmless_bwap, record.bwap_p_value, record.bwap_verdict);
    for a in &record.attacks {
        println!("attack {}: pre {:?} post {:?} ref_asr {:?} victim {:?} params {}", a.attack, a.pre, a.post, a.reference_asr, a.victim_asr, a.parameters);
    }
    for s in &record.sweeps {
        println!("sweep {}: x={:?}", s.title, s.x);
        for ser in &s.series { println!("  {}: {:?}", ser.label, ser.y); }
    }
}
