//! Training on finite problems with a tiny budget.

use std::sync::Arc;

use seqdesign::agent::{TrainConfig, Trainer};
use seqdesign::envs::{Environment, ToyGenerator};
use seqdesign::evaluation::{variational_lower_bound, VariationalSetup};
use seqdesign::oracle::{exact_expected_utility, Formulation, TablePolicy};
use seqdesign::posteriors::BankConfig;
use seqdesign::rewards::{RewardMode, RewardWeights};
use seqdesign::rng::SeedTree;

fn small_config(w: RewardWeights) -> TrainConfig {
    let mut posteriors = BankConfig::default();
    posteriors.widths.model = vec![16, 16];
    TrainConfig {
        mode: RewardMode::Tig,
        weights: w,
        n_update: 300,
        n_episode: 50,
        n_batch: 500,
        critic_steps: 10,
        actor_hidden: vec![16, 16],
        critic_hidden: vec![16, 16],
        actor_lr: Some(2e-3),
        noise_scale: 0.3,
        posteriors,
        ..TrainConfig::default()
    }
}

/// Initial and final actors are both scored under the trained model posterior,
/// on the same evaluation rollouts. Exact utilities are reported alongside.
#[test]
fn final_policy_beats_initial_under_the_trained_posterior() {
    let w = RewardWeights::new(1.0, 0.0, 0.0).unwrap();
    let mut improved = 0;
    let mut report = Vec::new();
    for seed in 0..20u64 {
        let toy = ToyGenerator::default().generate(&mut SeedTree::new(seed).rng(&[0])).unwrap();
        let env: Arc<dyn Environment> = Arc::new(toy.clone());
        let cfg = small_config(w);
        let mut trainer = Trainer::new(env, cfg.clone(), seed).unwrap();
        let initial = trainer.actor().clone();
        trainer.train(|_| Ok(())).unwrap();

        let eval = SeedTree::new(seed).child(&[99]);
        let score = |policy: &seqdesign::agent::Actor| {
            let setup = VariationalSetup { env: &toy, policy, posterior: trainer.bank(), weights: w, priors: cfg.priors };
            variational_lower_bound(&setup, 2000, &eval).unwrap().mean
        };
        let exact = |policy: &seqdesign::agent::Actor| {
            let table = TablePolicy::tabulate(&toy, |h| Ok(policy.act(h, h.len())?[0])).unwrap();
            exact_expected_utility(&toy, &table, Formulation::Tig, &w).unwrap()
        };
        let (before, after) = (score(&initial), score(trainer.actor()));
        if after >= before {
            improved += 1;
        }
        report.push(format!("{seed}: {before:.4} -> {after:.4} (exact {:.4} -> {:.4})", exact(&initial), exact(trainer.actor())));
    }
    assert!(improved >= 18, "only {improved}/20 seeds improved:\n{}", report.join("\n"));
}
