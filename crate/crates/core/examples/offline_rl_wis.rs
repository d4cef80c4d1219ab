//! Encodes a cohort with a briefly trained autoencoder, fits the behavior
//! policy, trains dBCQ on the latent transitions and reports validation WIS.
//!
//! cargo run --release --example offline_rl_wis -- [n_patients] [dbcq_steps]

use stable_cde::cde::SolverConfig;
use stable_cde::cohort::{generate_cohort, split_cohort, CohortParams, SplitRatios, N_BINS};
use stable_cde::earlystop::StopCriteria;
use stable_cde::model::ModelConfig;
use stable_cde::rl::{
    encode_latents, stack_states, train_behavior, train_dbcq, wis_evaluate, BehaviorConfig, DbcqConfig, SoftenedGreedy,
    Transitions,
};
use stable_cde::train::{train_autoencoder, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(300);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5000);

    let cohort = generate_cohort(n, 7, &CohortParams::default())?;
    let split = split_cohort(&cohort, SplitRatios::default(), 7)?;
    let (train, val) = (split.select(&split.train, &cohort), split.select(&split.val, &cohort));

    let model_cfg = ModelConfig { hidden_size: 8, field_widths: vec![16, 16], decoder_width: 16, ..ModelConfig::default() };
    let cfg = TrainConfig { epochs: 8, learning_rate: 1e-2, solver: SolverConfig::rk4(4.0), ..TrainConfig::default() };
    let out = train_autoencoder(&model_cfg, &cfg, &StopCriteria::default(), &train, &val, 25)?;
    let model = out.model_at(out.record.len() - 1)?;

    let tl = encode_latents(&model, &train, &cfg.solver, cfg.eval_batch_size)?;
    let vl = encode_latents(&model, &val, &cfg.solver, cfg.eval_batch_size)?;
    let (states, actions) = stack_states(&tl);
    let (vs, va) = stack_states(&vl);
    let n_actions = N_BINS * N_BINS;
    let (behavior, brep) =
        train_behavior(&states, &actions, n_actions, &BehaviorConfig::default(), 25, Some((&vs, &va)))?;
    println!("behavior accuracy: train {:.3}, val {:?}", brep.train_accuracy, brep.val_accuracy);

    let dcfg = DbcqConfig { steps, learning_rate: 1e-4, batch_size: 64, hidden: vec![32, 32], ..DbcqConfig::default() };
    let data = Transitions::from_trajectories(&tl);
    let (_, rep) = train_dbcq(&data, &behavior, &dcfg, 25, steps / 5, |step, policy| {
        let eval = SoftenedGreedy { policy, behavior: &behavior, epsilon: 0.01 };
        let w = wis_evaluate(&eval, &behavior, &vl)?;
        println!("step {step:>6}: WIS {:+.4} (ESS {:.1})", w.wis_return, w.effective_sample_size);
        Ok(())
    })?;
    println!("final TD loss {:.4}, max |Q| {:.3}", rep.final_loss, rep.max_abs_q);

    let observed = vl.iter().map(|t| t.ret()).sum::<f64>() / vl.len() as f64;
    println!("mean observed validation return {observed:+.4}");
    Ok(())
}
