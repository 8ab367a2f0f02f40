import math

import numpy as np
import pytest

from lssat import autodiff as ad
from lssat import data as dt
from lssat import training as tr
from lssat.patches import patchify_tokens, sample_mask


def tiny_config(**overrides):
    defaults = dict(triplet="rgb:ldp:rgb", preset="toy-b", image_size=16,
                    patch_size=8, batch_size=4, epochs=1, num_classes=2,
                    seed=0, drop_path=0.0)
    defaults.update(overrides)
    return tr.ExperimentConfig(**defaults)


def tiny_splits(n_train=8, n_val=4, n_test=4, size=16, seed=0):
    ds = dt.generate_synthetic((n_train + n_val + n_test) // 2, classes=2,
                               size=size, seed=seed)
    total = len(ds)
    spec = dt.SplitSpec(n_train / total, n_val / total, n_test / total,
                        seed=seed)
    return dt.split(ds, spec)


# -- configuration triplets --------------------------------------------------

def test_five_standard_triplets():
    names = [t.name for t in tr.standard_triplets()]
    assert names == ["ldp:rgb:rgb", "ldp:rgb:ldp", "rgb:ldp:rgb",
                     "rgb:rgb+ldp:rgb", "rgb:rgb:rgb"]


def test_triplet_parse_roundtrip():
    for t in tr.standard_triplets():
        assert tr.ConfigurationTriplet.parse(t.name) == t


def test_invalid_triplet_rejected():
    for bad in ("ldp:ldp:ldp", "rgb:rgb:ldp", "ldp:rgb+ldp:rgb"):
        with pytest.raises(tr.ConfigError, match="unsupported"):
            tr.ConfigurationTriplet.parse(bad)


# -- config -------------------------------------------------------------------

def test_config_defaults_match_reference_recipe():
    cfg = tr.ExperimentConfig()
    assert cfg.loss_lambda == 0.1
    assert cfg.mask_ratio == 0.75
    assert cfg.patch_size == 16
    assert cfg.image_size == 224
    assert cfg.batch_size == 8
    assert cfg.epochs == 75
    assert cfg.lr_max == 5e-5
    assert cfg.lr_min == 1e-6
    assert cfg.weight_decay == 0.05
    assert cfg.drop_path == 0.01


def test_config_dict_roundtrip():
    cfg = tiny_config(loss_lambda=0.3, seed=9)
    back = tr.ExperimentConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_config_unknown_key_rejected():
    d = tiny_config().to_dict()
    d["mask_ratoi"] = 0.5
    with pytest.raises(tr.ConfigError, match="unknown config keys"):
        tr.ExperimentConfig.from_dict(d)


def test_config_validation():
    with pytest.raises(tr.ConfigError):
        tiny_config(loss_lambda=1.5)
    with pytest.raises(tr.ConfigError):
        tiny_config(mask_ratio=1.0)
    with pytest.raises(Exception):
        tiny_config(preset="nope")


# -- classification loss -------------------------------------------------------

def test_cls_loss_uniform_binary_is_ln2():
    logits = ad.Tensor(np.zeros((4, 2)))
    loss = tr.classification_loss(logits, [0, 1, 0, 1])
    assert math.isclose(float(loss.array), math.log(2), rel_tol=1e-12)


def test_cls_loss_confident_goes_to_zero():
    logits = np.zeros((2, 2))
    logits[0, 0] = logits[1, 1] = 50.0
    loss = tr.classification_loss(ad.Tensor(logits), [0, 1])
    assert float(loss.array) < 1e-12


def test_cls_loss_quarter_probability_is_ln4():
    # gap ln(3) makes the true class probability exactly 1/4
    logits = ad.Tensor(np.array([[0.0, math.log(3.0)]]))
    loss = tr.classification_loss(logits, [0])
    assert math.isclose(float(loss.array), math.log(4), rel_tol=1e-12)


def test_cls_loss_label_out_of_range():
    with pytest.raises(tr.ConfigError, match="label outside"):
        tr.classification_loss(ad.Tensor(np.zeros((2, 2))), [0, 2])


def test_cls_loss_gradient_matches_fd():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, 5)

    def f(logits):
        return tr.classification_loss(logits, labels)

    err = ad.finite_difference_check(f, ad.Tensor(rng.normal(size=(5, 3))))
    assert err < 1e-6


# -- reconstruction loss --------------------------------------------------------

def test_rec_loss_zero_when_equal():
    rng = np.random.default_rng(1)
    x = rng.random((2, 1, 3, 16, 16))
    plan = sample_mask(2, 4, 0.5, seed=0)
    loss = tr.reconstruction_loss(x, ad.Tensor(x), plan, patch_size=8)
    assert float(loss.array) == 0.0


def test_rec_loss_ignores_visible_patches_to_last_bit():
    rng = np.random.default_rng(2)
    target = rng.random((2, 1, 3, 16, 16))
    recon = rng.random((2, 1, 3, 16, 16))
    plan = sample_mask(2, 4, 0.5, seed=3)
    base = float(tr.reconstruction_loss(target, ad.Tensor(recon), plan, 8).array)
    # perturb every visible patch, in image space
    tokens = patchify_tokens(recon.copy(), 8)
    for b in range(2):
        tokens[b, plan.visible[b]] += rng.random((2, tokens.shape[2]))
    from lssat.patches import unpatchify_tokens, ImageDims
    messed = unpatchify_tokens(tokens, ImageDims(2, 1, 3, 16, 16), 8)
    after = float(tr.reconstruction_loss(target, ad.Tensor(messed), plan, 8).array)
    assert base == after


def test_rec_loss_single_patch_constant_error():
    # one masked patch with error 0.5 everywhere -> mean squared error 0.25
    target = np.zeros((1, 1, 3, 8, 8))
    recon = np.full((1, 1, 3, 8, 8), 0.5)
    plan = sample_mask(1, 1, 0.0, seed=0)
    plan.masked, plan.visible = plan.visible, plan.masked  # mask the only patch
    loss = tr.reconstruction_loss(target, ad.Tensor(recon), plan, 8)
    assert float(loss.array) == 0.25


def test_rec_loss_gradient_zero_at_visible_coordinates():
    rng = np.random.default_rng(3)
    target = rng.random((2, 1, 3, 16, 16))
    recon = ad.Tensor(rng.random((2, 1, 3, 16, 16)), requires_grad=True)
    plan = sample_mask(2, 4, 0.5, seed=1)
    with ad.ComputeGraph() as g:
        loss = tr.reconstruction_loss(target, recon, plan, 8)
    grad = ad.backward(g, loss)[recon].array
    grad_tokens = patchify_tokens(grad, 8)
    for b in range(2):
        assert np.all(grad_tokens[b, plan.visible[b]] == 0.0)
        assert np.any(grad_tokens[b, plan.masked[b]] != 0.0)


def test_rec_loss_empty_mask_is_zero():
    x = np.random.default_rng(4).random((1, 1, 3, 16, 16))
    plan = sample_mask(1, 4, 0.0, seed=0)
    loss = tr.reconstruction_loss(x, ad.Tensor(x + 1.0), plan, 8)
    assert float(loss.array) == 0.0


def test_rec_loss_shape_mismatch():
    plan = sample_mask(1, 4, 0.5, seed=0)
    with pytest.raises(tr.ConfigError, match="target"):
        tr.reconstruction_loss(np.zeros((1, 1, 3, 16, 16)),
                               ad.Tensor(np.zeros((1, 1, 3, 8, 8))), plan, 8)


# -- joint loss and schedule ----------------------------------------------------

def test_joint_loss_reference_value_exact():
    assert tr.joint_loss(1.0, 2.0, 0.1) == 1.9


def test_joint_loss_boundaries_exact():
    assert tr.joint_loss(0.123, 7.7, 1.0) == 0.123
    assert tr.joint_loss(0.123, 7.7, 0.0) == 7.7


def test_joint_loss_bounded_and_affine():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a, b = rng.uniform(0, 5, 2)
        lam = rng.uniform(0, 1)
        j = tr.joint_loss(a, b, lam)
        assert min(a, b) - 1e-12 <= j <= max(a, b) + 1e-12
    # affine in each argument
    assert math.isclose(tr.joint_loss(2.0, 1.0, 0.25)
                        - tr.joint_loss(1.0, 1.0, 0.25), 0.25, rel_tol=1e-12)


def test_joint_loss_rejects_bad_lambda():
    with pytest.raises(tr.ConfigError):
        tr.joint_loss(1.0, 1.0, 1.2)


def test_joint_loss_tensor_boundary_gradients():
    a = ad.Tensor(1.5, requires_grad=True)
    b = ad.Tensor(2.5, requires_grad=True)
    with ad.ComputeGraph() as g:
        j = tr.joint_loss(ad.scalar_mul(a, 1.0), ad.scalar_mul(b, 1.0), 0.1)
    grads = ad.backward(g, j)
    assert math.isclose(float(grads[a].array), 0.1, rel_tol=1e-12)
    assert math.isclose(float(grads[b].array), 0.9, rel_tol=1e-12)


def test_multi_target_average_degenerates_to_single():
    l = ad.Tensor(0.37)
    avg = ad.scalar_mul(ad.add(l, l), 0.5)
    assert float(avg.array) == float(l.array)


def test_cosine_endpoints_exact():
    assert tr.cosine_lr(0, 100, 5e-5, 1e-6) == 5e-5
    assert tr.cosine_lr(100, 100, 5e-5, 1e-6) == 1e-6


def test_cosine_midpoint():
    assert math.isclose(tr.cosine_lr(50, 100, 5e-5, 1e-6), 2.55e-5,
                        rel_tol=1e-12)


def test_cosine_monotone_non_increasing():
    values = [tr.cosine_lr(s, 200, 5e-5, 1e-6) for s in range(201)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_cosine_step_out_of_range():
    with pytest.raises(tr.ConfigError):
        tr.cosine_lr(101, 100, 5e-5, 1e-6)


# -- optimizer -------------------------------------------------------------------

def make_params(values):
    return {k: ad.Tensor(v, requires_grad=True) for k, v in values.items()}


def test_sgd_zero_grad_zero_decay_is_identity():
    params = make_params({"w": np.array([[1.0, -2.0]])})
    out = tr.sgd_step(params, {}, lr=0.5, weight_decay=0.0,
                      state=tr.SgdState())
    assert np.array_equal(out["w"].array, params["w"].array)


def test_sgd_pure_decay():
    params = make_params({"w": np.array([[2.0, -4.0]])})
    out = tr.sgd_step(params, {}, lr=1.0, weight_decay=0.05,
                      state=tr.SgdState())
    assert np.allclose(out["w"].array, 0.95 * params["w"].array, rtol=0,
                       atol=0)


def test_sgd_quadratic_step():
    # f(p) = p^2 at p=1, lr=0.1, no momentum -> p becomes 0.8
    params = make_params({"p": np.array([[1.0]])})
    out = tr.sgd_step(params, {"p": np.array([[2.0]])}, lr=0.1,
                      weight_decay=0.0, state=tr.SgdState(momentum=0.0))
    assert np.allclose(out["p"].array, [[0.8]], rtol=0, atol=0)


def test_sgd_one_dim_params_skip_decay():
    params = make_params({"norm.scale": np.array([3.0])})
    out = tr.sgd_step(params, {}, lr=1.0, weight_decay=0.5,
                      state=tr.SgdState())
    assert np.array_equal(out["norm.scale"].array, [3.0])


def test_sgd_momentum_accumulates():
    state = tr.SgdState(momentum=0.9)
    params = make_params({"p": np.array([[0.0]])})
    g = {"p": np.array([[1.0]])}
    params = tr.sgd_step(params, g, lr=1.0, weight_decay=0.0, state=state)
    assert params["p"].array[0, 0] == -1.0
    params = tr.sgd_step(params, g, lr=1.0, weight_decay=0.0, state=state)
    assert math.isclose(params["p"].array[0, 0], -1.0 - 1.9, rel_tol=1e-15)


# -- train step and experiments ---------------------------------------------------

def test_train_step_all_triplets_run():
    splits = tiny_splits()
    for triplet in tr.standard_triplets():
        cfg = tiny_config(triplet=triplet.name)
        model = cfg.build_model()
        losses = tr.train_step(model, splits[0].images[:4],
                               splits[0].labels[:4], cfg, tr.SgdState(),
                               lr=1e-5, epoch=0, step=0)
        assert all(math.isfinite(v) for v in losses.values())
        assert losses["total"] == pytest.approx(tr.joint_loss(
            losses["classification"], losses["reconstruction"],
            cfg.loss_lambda))


def test_lambda_one_gives_reconstruction_branch_zero_gradient():
    splits = tiny_splits()
    cfg = tiny_config(loss_lambda=1.0, weight_decay=0.0)
    model = cfg.build_model()
    before = {n: p.array.copy() for n, p in model.params.items()
              if n.startswith("decoder.")}
    tr.train_step(model, splits[0].images[:4], splits[0].labels[:4], cfg,
                  tr.SgdState(), lr=1e-3, epoch=0, step=0)
    for n, arr in before.items():
        assert np.array_equal(model.params[n].array, arr), n


def test_train_step_decreases_loss_on_frozen_batch():
    splits = tiny_splits(n_train=8)
    images, labels = splits[0].images[:4], splits[0].labels[:4]
    for seed in range(10):
        cfg = tiny_config(seed=seed, weight_decay=0.0)
        model = cfg.build_model()
        plan = sample_mask(4, model.token_total, cfg.mask_ratio,
                           seed=cfg.seed, epoch=0, step=0)
        with ad.ComputeGraph():
            before, _, _ = tr.forward_losses(model, images, labels, cfg, plan,
                                             train=False)
        tr.train_step(model, images, labels, cfg, tr.SgdState(), lr=1e-6,
                      epoch=0, step=0)
        after, _, _ = tr.forward_losses(model, images, labels, cfg, plan,
                                        train=False)
        assert float(after.array) < float(before.array), seed


def test_non_finite_loss_raises_numeric_failure():
    splits = tiny_splits()
    cfg = tiny_config()
    model = cfg.build_model()
    # opposing huge columns drive one class probability to exactly zero
    bad = np.zeros_like(model.params["head.w"].array)
    bad[:, 0], bad[:, 1] = 1e300, -1e300
    model.params["head.w"] = ad.Tensor(bad, requires_grad=True)
    with np.errstate(all="ignore"):
        with pytest.raises(tr.NumericFailure):
            tr.train_step(model, splits[0].images[:4], splits[0].labels[:4],
                          cfg, tr.SgdState(), lr=1e-5, epoch=0, step=0)


def test_run_experiment_deterministic():
    splits = tiny_splits()
    cfg = tiny_config(epochs=2)
    report_a, _ = tr.run_experiment(cfg, splits)
    report_b, _ = tr.run_experiment(cfg, splits)
    assert report_a.final_losses == report_b.final_losses
    assert report_a.average_accuracy == report_b.average_accuracy
    assert report_a.roc_points == report_b.roc_points


def test_run_experiment_zero_epochs_near_chance():
    splits = tiny_splits(n_train=8, n_test=8)
    cfg = tiny_config(epochs=0)
    report, model = tr.run_experiment(cfg, splits)
    assert report.final_losses == {}
    assert 0.0 <= report.average_accuracy <= 1.0
    assert model.params


def test_run_experiment_empty_split_rejected():
    splits = tiny_splits()
    empty = splits[0].subset(np.array([], dtype=int))
    cfg = tiny_config()
    with pytest.raises(tr.ConfigError, match="empty"):
        tr.run_experiment(cfg, (empty, splits[1], splits[2]))


def test_run_experiment_class_count_mismatch():
    splits = tiny_splits()
    cfg = tiny_config(num_classes=5)
    with pytest.raises(tr.ConfigError, match="classes"):
        tr.run_experiment(cfg, splits)


def test_cell_seed_deterministic_and_distinct():
    a = tr.cell_seed(7, 0, 0)
    assert a == tr.cell_seed(7, 0, 0)
    seeds = {tr.cell_seed(7, t, p) for t in range(5) for p in range(3)}
    assert len(seeds) == 15
