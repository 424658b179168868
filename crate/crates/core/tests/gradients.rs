use dualm::gradcheck::{gradient_check, small_f64_model, Loss, LossCase};
use dualm::seed;

fn check(which: Loss, model_seed: u64) {
    let p = small_f64_model(model_seed);
    let mut rng = seed::rng(model_seed, "gradcheck");
    let case = LossCase::random(9, p.config.vocab_size as u32, &mut rng);
    let err = gradient_check(&p, &case, which, 50, 1e-5, &mut rng);
    assert!(err < 1e-4, "{which:?}: max relative error {err:e}");
}

#[test]
fn ar_loss_gradient_matches_finite_differences() {
    check(Loss::Ar, 11);
}

#[test]
fn diffusion_loss_gradient_matches_finite_differences() {
    check(Loss::Diffusion, 12);
}

#[test]
fn zloss_gradient_matches_finite_differences() {
    check(Loss::Zloss, 13);
}

#[test]
fn tied_head_gradient_matches_finite_differences() {
    let mut cfg = small_f64_model(0).config.clone();
    cfg.tie_embeddings = true;
    let mut p = dualm::model::Params::<f64>::init(&cfg, 5).unwrap();
    p.jitter(0.3, 6);
    let mut rng = seed::rng(5, "tied");
    let case = LossCase::random(7, cfg.vocab_size as u32, &mut rng);
    for which in [Loss::Ar, Loss::Diffusion] {
        let err = gradient_check(&p, &case, which, 50, 1e-5, &mut rng);
        assert!(err < 1e-4, "{which:?}: max relative error {err:e}");
    }
}
