import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from dfnet import autodiff as ad
from dfnet.batching import make_batch, make_examples
from dfnet.config import TrainConfig
from dfnet.corpus import parse_corpus, build_vocab
from dfnet.model import DFNet

# Two domains, two dialogues of two turns; histories stay within 5 tokens.
TINY = {
    "domains": ["a", "b"],
    "dialogues": [
        {
            "domain": "a",
            "kb": [["x", "r", "o1"], ["x", "s", "o2"]],
            "turns": [{"user": "hi x", "system": "o1 ok"}, {"user": "s", "system": "o2"}],
        },
        {
            "domain": "b",
            "kb": [["y", "r", "o3"]],
            "turns": [{"user": "y r", "system": "is o3"}, {"user": "bye", "system": "bye"}],
        },
    ],
}


def tiny_corpus():
    return parse_corpus(TINY)


def tiny_config(**kw):
    base = dict(hidden=4, embedding=4, hops=2, dropout=0.0, teacher_forcing=1.0, precision="float64", batch_size=4)
    base.update(kw)
    return TrainConfig(**base)


def tiny_setup(**kw):
    """Model, batch of all four turns, and the dialogues."""
    domains, dialogues = tiny_corpus()
    vocab = build_vocab(dialogues)
    model = DFNet(vocab, domains, tiny_config(**kw))
    batch = make_batch(make_examples(dialogues, domains), vocab)
    return model, batch, dialogues


def scramble(model, seed=0, scale=0.5):
    """Redraw every parameter from N(0, scale^2).

    The default initialization is small enough that some gradients of the
    tiny fixture fall below the checker's 1e-8 floor, where finite-difference
    noise dominates the relative error.
    """
    r = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = r.normal(scale=scale, size=p.shape).astype(p.dtype)
    return model


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def composite_gradient_error(model, batch, names=None, eps=1e-4):
    """Max relative error of the composite-loss gradient against central
    differences, per parameter name.

    The gradient-reversal layer is the identity in the forward pass, so a
    plain finite difference of the total loss cannot see it. The numeric
    reference is therefore assembled from the reported parts: for parameters
    upstream of the reversal (everything except the ``adv.*`` classifiers)
    the adversarial part enters with factor ``-lambda``.
    """
    from dfnet.decoder import teacher_forced_pass
    from dfnet.losses import compute_losses

    w = model.config.weights
    lam = model.config.grl_lambda

    def parts():
        fp = teacher_forced_pass(model, batch)
        loss, rep = compute_losses(fp, batch, w)
        return loss, rep.total - w.gamma_a * rep.L_adv, w.gamma_a * rep.L_adv

    model.zero_grad()
    loss, _, _ = parts()
    ad.backward(loss)
    errors = {}
    for name in names or list(model.params):
        p = model[name]
        analytic = p.grad.copy()
        sign = 1.0 if name.startswith("adv.") else -lam
        flat = p.data.reshape(-1)
        worst = 0.0
        with ad.no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                _, rp, ap = parts()
                flat[i] = orig - eps
                _, rm, am = parts()
                flat[i] = orig
                num = (rp - rm) / (2 * eps) + sign * (ap - am) / (2 * eps)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
        errors[name] = worst
    return errors


# criterion number -> PASS/FAIL line, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
