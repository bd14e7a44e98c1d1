import math

import numpy as np
import pytest
import torch

from memunlearn.backend import (
    TrainConfig,
    TrainingDivergence,
    evaluate_accuracy,
    flat_grad,
    initial_checkpoint,
    loss_gradient,
    module_from,
    train,
)
from memunlearn.data import ForgetPartitioning
from memunlearn.unlearn import (
    PAPER_DEFAULTS,
    UnlearnConfig,
    UnlearnError,
    bare_unlearn,
    finetune_unlearn,
    neggrad_plus_combine,
    neggrad_plus_objective,
    neggrad_plus_unlearn,
    retrain_reference,
    rum_unlearn,
    saliency_from_gradient,
    salun_mask,
    salun_unlearn,
    stage_seed,
    wrong_labels,
)

from conftest import blobs, spec_for
from test_backend import fd_gradient, rel_err

RETAIN = list(range(0, 60))
FORGET = list(range(60, 72))


def cfg(method, **kw):
    base = dict(epochs=(2,), unlearn_lr=5e-3, batch_size=16, seed=1)
    return UnlearnConfig(method, **{**base, **kw})


def partitioning(parts):
    scores = {i: float(k) for k, p in enumerate(parts) for i in p}
    return ForgetPartitioning(tuple(tuple(p) for p in parts), "custom", scores)


# -- configuration -----------------------------------------------------------


def test_paper_defaults():
    ng = UnlearnConfig.paper_default("neggrad_plus", "vit")
    assert ng.beta == 0.97 and ng.unlearn_lr == 0.00002 and ng.epochs == (5, 5, 10)
    assert UnlearnConfig.paper_default("finetune", "vit").unlearn_lr == 0.0001
    assert UnlearnConfig.paper_default("finetune", "hier").unlearn_lr == 0.0001
    s_vit = UnlearnConfig.paper_default("salun", "vit")
    s_hier = UnlearnConfig.paper_default("salun", "hier")
    assert (s_vit.gamma, s_hier.gamma, s_vit.alpha) == (0.1, 0.3, 1.0)
    assert set(m for m, _ in PAPER_DEFAULTS) >= {"finetune", "neggrad_plus", "salun"}


@pytest.mark.parametrize("kw", [dict(method="finetune", beta=0.5), dict(method="neggrad_plus", gamma=0.1),
                                dict(method="neggrad_plus", beta=0.0), dict(method="salun", gamma=1.5),
                                dict(method="salun", alpha=-1.0), dict(method="bogus")])
def test_config_validation(kw):
    with pytest.raises(UnlearnError):
        UnlearnConfig(**kw)


def test_config_roundtrip_and_bare_epochs():
    c = UnlearnConfig("salun", epochs=(5, 5, 10), gamma=0.3)
    assert UnlearnConfig.from_dict(c.to_dict()) == c
    assert c.bare_epochs == 20
    assert UnlearnConfig("finetune", epochs=(1, 1, 1), vanilla_epochs=7).bare_epochs == 7


def test_stage_seeds_differ():
    assert len({stage_seed(3, k) for k in range(5)}) == 5


# -- fine-tune ---------------------------------------------------------------


def test_finetune_zero_epochs_is_identity(trained_mlp, small_data):
    theta, _ = trained_mlp
    out = finetune_unlearn(theta, small_data, RETAIN, cfg("finetune"), epochs=0)
    assert torch.equal(out.flat(), theta.flat())
    assert out.lineage == "unlearned" and out.parent == theta.ckpt_id
    assert out.meta["unlearn_config"]["method"] == "finetune"


def test_finetune_retain_loss_decreases_on_average(trained_mlp, small_data):
    theta, _ = trained_mlp
    out = finetune_unlearn(theta, small_data, RETAIN, cfg("finetune", unlearn_lr=1e-3), epochs=6)
    hist = out.meta["retain_loss_history"]
    assert len(hist) == 6
    assert np.mean(hist[3:]) <= np.mean(hist[:3])


def test_finetune_empty_retain(trained_mlp, small_data):
    with pytest.raises(UnlearnError):
        finetune_unlearn(trained_mlp[0], small_data, [], cfg("finetune"))


# -- NegGrad+ ----------------------------------------------------------------


def test_neggrad_scalar_probe():
    theta = torch.zeros((), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.SGD([theta], lr=0.1)
    loss = neggrad_plus_combine(theta**2, (theta - 1) ** 2, beta=0.5)
    loss.backward()
    assert theta.grad.item() == pytest.approx(1.0)
    opt.step()
    assert theta.item() == pytest.approx(-0.1, abs=1e-12)


def test_neggrad_objective_gradient(small_data, mlp_spec):
    theta = initial_checkpoint(mlp_spec, 2).to(torch.float64)
    beta = 0.7
    r, f = RETAIN[:16], FORGET[:8]
    module = module_from(theta)
    xr, yr = small_data.subset(r)
    xf, yf = small_data.subset(f)
    module.zero_grad()
    neggrad_plus_objective(module, xr, yr, xf, yf, beta).backward()
    g = flat_grad(module).numpy()
    # against beta * grad(retain) - (1 - beta) * grad(forget)
    combo = beta * loss_gradient(theta, small_data, r) - (1 - beta) * loss_gradient(theta, small_data, f)
    assert np.allclose(g, combo.numpy(), rtol=1e-12, atol=1e-14)
    # and against central finite differences of the combined objective
    coords = np.random.default_rng(0).choice(len(g), size=20, replace=False)
    fd = beta * fd_gradient(theta, small_data, r, coords) - (1 - beta) * fd_gradient(theta, small_data, f, coords)
    assert rel_err(g[coords], fd).max() < 1e-4


def test_neggrad_beta_one_equals_finetune(trained_mlp, small_data):
    theta, _ = trained_mlp
    a = neggrad_plus_unlearn(theta, small_data, RETAIN, FORGET, cfg("neggrad_plus", beta=1.0))
    b = finetune_unlearn(theta, small_data, RETAIN, cfg("finetune"))
    assert torch.equal(a.flat(), b.flat())


def test_neggrad_divergence_reports_step(trained_mlp, small_data):
    theta, _ = trained_mlp
    c = cfg("neggrad_plus", beta=0.01, unlearn_lr=1e37, optimizer="sgd", epochs=(50,), lr_schedule="constant",
            weight_decay=0.0)
    with pytest.raises(TrainingDivergence) as info:
        neggrad_plus_unlearn(theta, small_data, RETAIN, FORGET, c)
    assert info.value.where == "step"


# -- SalUn -------------------------------------------------------------------


def test_saliency_fixture():
    mask = saliency_from_gradient(torch.tensor([0.9, -0.1, 0.5, 0.3]), 0.5)
    assert mask.mask.tolist() == [True, False, True, False]


def test_saliency_ties_by_index():
    mask = saliency_from_gradient(torch.tensor([0.2, 0.5, 0.5, 0.5]), 0.5)
    assert mask.mask.tolist() == [False, True, True, False]


@pytest.mark.parametrize("gamma", [0.01, 0.1, 0.3, 0.5, 0.77, 1.0])
def test_saliency_cardinality(gamma):
    grad = torch.randn(97, generator=torch.Generator().manual_seed(0))
    assert int(saliency_from_gradient(grad, gamma).mask.sum()) == math.ceil(round(gamma * 97, 9))


def test_saliency_threshold_mode():
    mask = saliency_from_gradient(torch.tensor([0.9, -0.1, 0.5, 0.3]), 0.4, mode="threshold")
    assert mask.mask.tolist() == [True, False, True, False]


def test_salun_mask_uses_forget_gradient(trained_mlp, small_data):
    theta, _ = trained_mlp
    mask = salun_mask(theta, small_data, FORGET, 0.2)
    grad = loss_gradient(theta, small_data, FORGET).abs()
    assert grad[mask.mask].min() >= grad[~mask.mask].max()
    assert salun_mask(theta, small_data, FORGET, 1.0).mask.all()


def test_salun_unmasked_parameters_bit_identical(trained_mlp, small_data):
    theta, _ = trained_mlp
    c = cfg("salun", gamma=0.3, alpha=1.0, epochs=(3,), unlearn_lr=1e-2)
    mask = salun_mask(theta, small_data, FORGET, 0.3)
    out = salun_unlearn(theta, small_data, RETAIN, FORGET, c)
    before, after = theta.flat(), out.flat()
    assert torch.equal(before[~mask.mask], after[~mask.mask])
    assert not torch.equal(before[mask.mask], after[mask.mask])


def test_salun_degenerate_is_finetune(trained_mlp, small_data):
    theta, _ = trained_mlp
    a = salun_unlearn(theta, small_data, RETAIN, FORGET, cfg("salun", gamma=1.0, alpha=0.0))
    b = finetune_unlearn(theta, small_data, RETAIN, cfg("finetune"))
    assert torch.equal(a.flat(), b.flat())


def test_wrong_labels_never_match():
    labels = torch.arange(1000) % 4
    wrong = wrong_labels(labels, 4, torch.Generator().manual_seed(0))
    assert not torch.any(wrong == labels)
    assert set(wrong.tolist()) == {0, 1, 2, 3}


def test_salun_needs_two_classes():
    from memunlearn.data import DatasetHandle

    data = DatasetHandle.from_arrays("one", np.zeros((4, 1, 2, 2)), [0, 0, 0, 0], 1)
    theta = initial_checkpoint(spec_for(data), 0)
    with pytest.raises(UnlearnError):
        salun_unlearn(theta, data, [0, 1], [2, 3], cfg("salun"))


# -- retrain and RUM ---------------------------------------------------------


def test_retrain_with_empty_forget_matches_original(small_data, mlp_spec):
    init = initial_checkpoint(mlp_spec, 3)
    tc = TrainConfig(base_lr=1e-2, epochs=3, batch_size=16, seed=3)
    original, _ = train(mlp_spec, small_data, RETAIN, tc, init=init)
    theta_r = retrain_reference(init, mlp_spec, small_data, RETAIN, tc)
    assert torch.equal(original.flat(), theta_r.flat())
    assert theta_r.lineage == "retrained"


def test_retrain_forgets_mislabeled_points():
    data = blobs(n=200, num_classes=3, image_size=4, cluster_std=0.8, label_noise=0.1, seed=2)
    from memunlearn.data import synthetic_gauss

    _, _, flipped = synthetic_gauss(n=200, num_classes=3, image_size=4, channels=1, cluster_std=0.8,
                                    label_noise=0.1, seed=2)
    forget = [i for i in range(160) if flipped[i]]
    retain = [i for i in range(160) if not flipped[i]]
    spec = spec_for(data, width=64)
    init = initial_checkpoint(spec, 0)
    tc = TrainConfig(base_lr=1e-2, epochs=60, batch_size=16, weight_decay=0.0, seed=0)
    theta_o, _ = train(spec, data, range(160), tc, init=init)
    theta_r = retrain_reference(init, spec, data, retain, tc)
    assert evaluate_accuracy(theta_r, data, forget) < evaluate_accuracy(theta_o, data, forget)


@pytest.mark.parametrize("method,extra", [("finetune", {}), ("neggrad_plus", {"beta": 0.9}),
                                          ("salun", {"gamma": 0.5})])
def test_rum_single_partition_equals_bare(trained_mlp, small_data, method, extra):
    theta, _ = trained_mlp
    c = cfg(method, epochs=(3,), **extra)
    a = rum_unlearn(theta, small_data, partitioning([FORGET]), RETAIN, c)
    b = bare_unlearn(theta, small_data, RETAIN, FORGET, c)
    assert torch.equal(a.flat(), b.flat())
    assert a.parent == b.parent == theta.ckpt_id


def test_rum_stage_retain_sets(trained_mlp, small_data, monkeypatch):
    import memunlearn.unlearn as U

    seen = []

    def spy(theta, data, retain_ids, forget_ids, c, epochs=None, stage=0):
        seen.append((set(retain_ids), set(forget_ids), epochs, stage))
        return theta

    monkeypatch.setattr(U, "unlearn_once", spy)
    parts = [FORGET[:4], FORGET[4:8], FORGET[8:]]
    theta, _ = trained_mlp
    out = U.rum_unlearn(theta, small_data, partitioning(parts), RETAIN, cfg("finetune", epochs=(5, 5, 10)))
    assert [s[2] for s in seen] == [5, 5, 10] and [s[3] for s in seen] == [0, 1, 2]
    for k, (retain, forget, _, _) in enumerate(seen):
        assert forget == set(parts[k])
        assert retain == set(RETAIN) | {i for p in parts[k + 1 :] for i in p}
    assert out.meta["rum_partitions"] == [4, 4, 4]


def test_rum_epoch_count_mismatch(trained_mlp, small_data):
    with pytest.raises(UnlearnError):
        rum_unlearn(trained_mlp[0], small_data, partitioning([FORGET[:6], FORGET[6:]]), RETAIN,
                    cfg("finetune", epochs=(1, 1, 1)))


def test_rum_overlapping_retain(trained_mlp, small_data):
    with pytest.raises(UnlearnError):
        rum_unlearn(trained_mlp[0], small_data, partitioning([FORGET]), RETAIN + FORGET[:1], cfg("finetune"))


def test_unlearned_lineage_records_config(trained_mlp, small_data):
    theta, _ = trained_mlp
    c = cfg("neggrad_plus", beta=0.9, epochs=(1, 1))
    out = rum_unlearn(theta, small_data, partitioning([FORGET[:6], FORGET[6:]]), RETAIN, c)
    assert out.lineage == "unlearned" and out.parent == theta.ckpt_id
    assert UnlearnConfig.from_dict(out.meta["unlearn_config"]) == c
