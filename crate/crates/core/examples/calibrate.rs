//! Scratch calibration harness for the transfer-trend experiments.

use smbea_core::attack::AttackConfig;
use smbea_core::ensemble::Strategy;
use smbea_core::experiment::{
    ablation_run, run_single_attack, AttackKind, BudgetMode, ExperimentConfig, Sweep,
};
use smbea_core::losses::{ObjectiveConfig, Task};
use smbea_core::zoo::{build_zoo, Zoo, ZooConfig};

fn base_cfg(zoo: &Zoo, k: usize, alpha: f64, t1: f64) -> ExperimentConfig {
    let ids = zoo.ids();
    let batches: Vec<Vec<String>> = (0..5).map(|b| ids[b * k..(b + 1) * k].to_vec()).collect();
    let holdouts = vec![ids[5 * k].clone(), ids[5 * k + 1].clone()];
    ExperimentConfig {
        task: Task::Saliency,
        zoo_dir: None,
        attacks: vec![AttackKind::Smbea],
        batches,
        holdouts,
        perceptual_model: None,
        eval_batches: vec![1, 3, 5],
        strategy: Strategy::S3GroupPool,
        p: 8,
        tap: "deep".into(),
        objective: ObjectiveConfig::for_task(Task::Saliency),
        attack_cfg: AttackConfig { alpha, t1_first: t1, k, ..AttackConfig::default() },
        budget: BudgetMode::Schedule,
        n_images: 16,
        hw: 32,
        seed: 11,
        mim_momentum: 1.0,
        pgd_start_scale: 1.0,
        out_dir: None,
    }
}

fn show(label: &str, cfg: &ExperimentConfig, zoo: &Zoo, kind: AttackKind) {
    let t = std::time::Instant::now();
    let out = run_single_attack(zoo, cfg, kind).unwrap();
    eprint!("{label:<34} ({:>5.1?}):", t.elapsed());
    for c in &out.columns {
        eprint!("  b{} {:+.5} (l1 {:.4})", c.batches_used, c.mean_drop, c.mean_realized_l1);
    }
    eprintln!();
}

fn main() {
    let t0 = std::time::Instant::now();
    let zoo = build_zoo(&ZooConfig {
        task: Task::Saliency,
        n_base: 11,
        hw: 32,
        n_pairs: 128,
        epochs: 8,
        lr: 2e-3,
        seed: 7,
    })
    .unwrap();
    eprintln!("zoo built in {:?}", t0.elapsed());
    let k = 4;

    // Baseline orderings, varying MIM momentum and PGD start.
    let cfg = base_cfg(&zoo, k, 2e-3, 3.4e-2);
    show("smbea X=20", &cfg, &zoo, AttackKind::Smbea);
    show("mim mu=1.0", &cfg, &zoo, AttackKind::Mim);
    let mut c = cfg.clone();
    c.mim_momentum = 0.9;
    show("mim mu=0.9", &c, &zoo, AttackKind::Mim);
    show("pgd start=1.0", &cfg, &zoo, AttackKind::Pgd);
    show("ifgsm", &cfg, &zoo, AttackKind::Ifgsm);
    show("noise", &cfg, &zoo, AttackKind::Noise);

    // Carry contribution at different per-batch iteration budgets.
    for x in [5usize, 10, 20] {
        let mut c = cfg.clone();
        c.attack_cfg.max_iters = x;
        show(&format!("smbea X={x} carry"), &c, &zoo, AttackKind::Smbea);
        c.attack_cfg.beta1 = 0.0;
        c.attack_cfg.beta2 = 0.0;
        show(&format!("smbea X={x} nocarry"), &c, &zoo, AttackKind::Smbea);
    }

    // Tap-depth sweep with a feature term that actually matters.
    let mut tcfg = cfg.clone();
    tcfg.objective.lambda2 = 25.0;
    tcfg.eval_batches = vec![1];
    tcfg.n_images = 8;
    let rows = ablation_run(&zoo, &tcfg, &Sweep::tap_depth_default()).unwrap();
    for r in &rows {
        let mut red = 0.0f64;
        let mut n = 0.0f64;
        for trace in &r.outcome.traces {
            if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                red += first.fooling - last.fooling;
                n += 1.0;
            }
        }
        eprintln!(
            "{:<34}: fooling reduction {:+.5}, transfer b1 {:+.5}",
            r.label,
            red / n.max(1.0),
            r.outcome.columns[0].mean_drop
        );
    }
    eprintln!("total {:?}", t0.elapsed());
}
