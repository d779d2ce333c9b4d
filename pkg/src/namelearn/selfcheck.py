"""Verification suites: gradient checking and loss-oracle equivalence.

These run both under pytest (acceptance tests) and from the command line
(`selftest`).  The full-model gradient check exercises the complete training
loss — name embeddings through context fusion, difficulty scorer, temperature,
balancing weights and classification head — against central differences on a
small world.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .coordinator import classification_loss, contrastive_loss
from .session import SessionSettings, TrainingSession
from .world import WorldConfig, build_world

CHECK_WORLD = WorldConfig(
    embed_dim=8, image_dim=12, n_seen=2, n_ood=2, vocab_size=48, seed=0
)


@dataclass
class SuiteReport:
    name: str
    worst: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.worst < self.bound

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name}: worst={self.worst:.3g} bound={self.bound:g}"


def composite_grad_checks(n_seeds: int = 20, eps: float = 1e-5) -> SuiteReport:
    """Random composite expressions over the op set vs central differences."""
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        n, d, h = 3, 4, 5
        x = Tensor(rng.normal(size=(n, d)), requires_grad=True)
        w = Tensor(rng.normal(size=(d, h)), requires_grad=True)
        b = Tensor(rng.normal(size=h), requires_grad=True)
        idx = rng.integers(0, h, size=n)

        def f(xp, wp, bp):
            m = ad.relu(ad.add(ad.matmul(xp, wp), bp))
            m = ad.l2_normalize_rows(ad.add(m, Tensor(np.full((n, h), 0.3))))
            ls = ad.log_softmax_rows(ad.mul(m, m))
            picked = ad.pick_per_row(ls, idx)
            pooled = ad.concat_cols(ad.mean_rows(m), ad.mean_rows(ad.transpose(ls)))
            return ad.add(
                ad.sum_all(ad.sigmoid(picked)), ad.sum_all(ad.clip(pooled, -0.4, 0.4))
            )

        worst = max(worst, grad_check(f, [x, w, b], eps=eps))
    return SuiteReport("composite-expression gradient check", worst, 1e-4)


def full_loss_grad_checks(n_batches: int = 20, eps: float = 1e-5) -> SuiteReport:
    """The complete training loss on 4-sample batches vs central differences.

    Every learnable participates: name vectors, fusion weights, difficulty
    scorer, temperature, balancing weights, classification head.
    """
    world = build_world(CHECK_WORLD)
    worst = 0.0
    for batch_seed in range(n_batches):
        session = TrainingSession(world, SessionSettings(), seed=batch_seed)
        shots = {
            cid: world.sample_images(cid, 2, seed=1000 + batch_seed)
            for cid in world.ood_ids
        }
        batch = session.build_batch(shots, epoch=batch_seed)
        params = session.trainable_parameters()

        def f(*_params):
            from .bus import run_round

            result = run_round(session.bus, batch)
            session.bus.log.clear()  # keep repeated evaluation cheap
            return result.coordinator_round.total

        worst = max(worst, grad_check(f, params, eps=eps))
    return SuiteReport("full training-loss gradient check", worst, 1e-4)


def contrastive_oracle_suite(n_batches: int = 100) -> SuiteReport:
    """Batched symmetric contrastive loss vs a per-element double loop."""
    worst = 0.0
    for seed in range(n_batches):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 17))
        s = rng.normal(scale=2.0, size=(n, n))
        y = rng.permutation(n)
        tau = float(rng.uniform(0.5, 2.0))
        ours = contrastive_loss(Tensor(s), y, tau).item()
        naive = 0.0
        for i in range(n):
            den_row = sum(math.exp(s[i][j] / tau) for j in range(n))
            naive += math.log(math.exp(s[i][y[i]] / tau) / den_row)
            den_col = sum(math.exp(s[j][i] / tau) for j in range(n))
            naive += math.log(math.exp(s[y[i]][i] / tau) / den_col)
        naive = -naive / (2 * n)
        worst = max(worst, abs(ours - naive))
    return SuiteReport("contrastive loss vs double-loop oracle", worst, 1e-9)


def classification_oracle_suite(n_batches: int = 100) -> SuiteReport:
    """Batched cross-entropy vs a scalar-by-scalar oracle."""
    worst = 0.0
    for seed in range(n_batches):
        rng = np.random.default_rng(seed)
        n, d, c = int(rng.integers(1, 9)), 6, int(rng.integers(2, 7))
        feats = rng.normal(size=(n, d))
        w = rng.normal(size=(d, c))
        y = rng.integers(0, c, size=n)
        ours = classification_loss(Tensor(feats), Tensor(w), y).item()
        logits = feats @ w
        naive = 0.0
        for i in range(n):
            den = sum(math.exp(v) for v in logits[i])
            naive += math.log(math.exp(logits[i][y[i]]) / den)
        naive = -naive / n
        worst = max(worst, abs(ours - naive))
    return SuiteReport("classification loss vs scalar oracle", worst, 1e-9)


def run_selftest(verbose: bool = True) -> bool:
    reports = [
        composite_grad_checks(),
        full_loss_grad_checks(),
        contrastive_oracle_suite(),
        classification_oracle_suite(),
    ]
    for report in reports:
        if verbose:
            print(report.line())
    return all(r.passed for r in reports)
