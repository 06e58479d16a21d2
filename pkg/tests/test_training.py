import math

import numpy as np
import pytest
import torch

from rulecap.errors import TrainingError
from rulecap.model import collate, count_parameters, decode_greedy, fit, make_optimizer, train_step

from conftest import gradcheck_model, random_items, tiny_model
from oracles import central_difference


def batch_of(model, n, seed=0):
    items = random_items(n, model.cfg, seed)
    return collate(items, 0, 1, 2, model.cfg.max_src_len, model.cfg.max_tgt_len, torch.float64)


def test_initial_loss_is_near_uniform():
    model = tiny_model(seed=0, vocab_size=50, init_std=0.02)
    loss = model.loss(batch_of(model, 16)).item()
    assert abs(loss - math.log(50)) < 0.1 * math.log(50)


def test_gradient_matches_finite_differences():
    model = gradcheck_model(seed=1)
    assert count_parameters(model) <= 2000
    batch = batch_of(model, 3, seed=1)
    model.zero_grad()
    model.loss(batch).backward()
    params = [p for p in model.parameters() if p.requires_grad]
    rng = np.random.default_rng(0)

    def f():
        with torch.no_grad():
            return model.loss(batch).item()

    for _ in range(40):
        p = params[rng.integers(len(params))]
        idx = int(rng.integers(p.numel()))
        analytic = p.grad.view(-1)[idx].item()
        numeric = central_difference(f, p, idx)
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric), 1e-6)


def test_schedule_is_linear_warmup_then_decay():
    model = tiny_model()
    opt, sched = make_optimizer(model, lr=1.0, total_steps=10, warmup_steps=2)
    lrs = []
    for _ in range(10):
        lrs.append(opt.param_groups[0]["lr"])
        opt.step()
        sched.step()
    assert lrs[:3] == pytest.approx([0.5, 1.0, 1.0])
    assert lrs[2:] == pytest.approx([1 - i / 8 for i in range(8)])


def test_no_weight_decay_on_biases_norms_and_prefixes():
    model = tiny_model()
    opt, _ = make_optimizer(model, weight_decay=0.1)
    no_decay = {id(p) for p in opt.param_groups[1]["params"]}
    for name, p in model.named_parameters():
        assert (id(p) in no_decay) == (p.ndim < 2 or name.startswith("prefixes")), name


def test_overfits_one_sample():
    model = tiny_model(seed=2, dtype=torch.float32, dropout=0.0)
    batch = collate(random_items(1, model.cfg, 3), 0, 1, 2, model.cfg.max_src_len, model.cfg.max_tgt_len)
    history = fit(model, lambda e: [batch], epochs=300, lr=1e-2, weight_decay=0.0)
    assert history[-1] < 0.01
    out = decode_greedy(model, batch)[0]
    assert out.tokens == batch.tgt_out[0, :-1].tolist()


def test_non_finite_loss_raises():
    model = tiny_model()
    batch = batch_of(model, 2)
    with torch.no_grad():
        model.lm_head.bias.fill_(math.nan)
    opt, sched = make_optimizer(model)
    with pytest.raises(TrainingError) as err:
        train_step(batch, model, opt, sched, batch_id=7)
    assert err.value.batch_id == 7
