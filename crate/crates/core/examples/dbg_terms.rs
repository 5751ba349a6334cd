use smbea_core::attack::*;
use smbea_core::experiment::*;
use smbea_core::losses::{ObjectiveConfig, Task};
use smbea_core::zoo::{build_zoo, ZooConfig};
use smbea_core::ensemble::Strategy;
use smbea_core::data::{gen_dataset, to_model_target};

fn main() {
    let zoo = build_zoo(&ZooConfig {
        task: Task::Saliency, n_base: 4, hw: 32, n_pairs: 96, epochs: 6, lr: 2e-3, seed: 7,
    }).unwrap();
    let test = gen_dataset(Task::Saliency, 4, 32, 99).unwrap();
    let clean = &test.inputs[0];
    let guide = &test.inputs[1];
    let gt = to_model_target(Task::Saliency, &test.targets[1]);
    let ids = zoo.ids();
    let models: Vec<&smbea_core::model::Model> = ids[..4].iter().map(|id| zoo.model(id).unwrap()).collect();

    for tap in ["shallow", "deep"] {
        let espec = smbea_core::ensemble::EnsembleSpec::uniform(4, Strategy::S3GroupPool, 8, (16, 16), tap);
        let ocfg = ObjectiveConfig::for_task(Task::Saliency);
        let mut src = EnsembleGradient::new(models.clone(), &espec, &ocfg, clean, guide, &gt, None).unwrap();
        let (g, terms) = src.gradient(clean).unwrap();
        let gnorm: f64 = g.data().iter().map(|v| v.abs()).sum();
        println!("tap {tap}: total {:.5} fool {:.5} percep {:.5} feat {:.6} |g|1 {:.3e}",
            terms.total, terms.fooling, terms.perceptual, terms.feature, gnorm);

        // One full 3-batch-of-sames attack trajectory to see evolution.
        let cfg = AttackConfig { k: 4, alpha: 1e-3, t1_first: 3.4e-2, ..AttackConfig::default() };
        let mut state = AttackState::new(clean, &gt, 3.4e-2);
        let mut report = AttackReport::default();
        intra_batch_run(&mut state, &mut src, &cfg, &mut report).unwrap();
        let f = &report.records;
        println!("  iters {}: fool {:.4} -> {:.4}; feat {:.5} -> {:.5}; l1 {:.4}",
            f.len(), f[0].fooling, f.last().unwrap().fooling, f[0].feature, f.last().unwrap().feature,
            f.last().unwrap().l1_after);
    }

    // Holdout CC movement for one strong attack.
    let hold = zoo.model(&ids[6]).unwrap();
    let truth = &test.targets[0];
    let cc = |img: &smbea_core::Tensor| -> f64 {
        -smbea_core::losses::neg_cc(&hold.predict(img).unwrap(), truth).unwrap()
    };
    let espec = smbea_core::ensemble::EnsembleSpec::uniform(4, Strategy::S3GroupPool, 8, (16,16), "deep");
    let ocfg = ObjectiveConfig::for_task(Task::Saliency);
    let mut src = EnsembleGradient::new(models.clone(), &espec, &ocfg, clean, guide, &gt, None).unwrap();
    let cfg = AttackConfig { k: 4, alpha: 1e-3, t1_first: 3.4e-2, max_iters: 60, ..AttackConfig::default() };
    let mut state = AttackState::new(clean, &gt, 3.4e-2);
    let mut report = AttackReport::default();
    intra_batch_run(&mut state, &mut src, &cfg, &mut report).unwrap();
    println!("holdout CC clean {:.4} -> adv {:.4}  (l1 {:.4})", cc(clean), cc(&state.adv), state.realized_l1());
    // Also: does the SOURCE ensemble prediction move toward the guide?
    let m0 = &models[0];
    let guide_pred_cc = -smbea_core::losses::neg_cc(&m0.predict(&state.adv).unwrap(), &m0.predict(guide).unwrap()).unwrap();
    let clean_sim = -smbea_core::losses::neg_cc(&m0.predict(clean).unwrap(), &m0.predict(guide).unwrap()).unwrap();
    println!("source m0: CC(pred(adv), pred(guide)) {:.4} vs CC(pred(clean), pred(guide)) {:.4}", guide_pred_cc, clean_sim);
}
