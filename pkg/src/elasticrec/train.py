"""Adam, the training loop with early stopping, and ranking evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError
from .metrics import metrics_table, ranks_from_scores
from .model import ElasticModel, loss

log = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction; moment buffers live on the optimizer."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("a parameter was registered twice")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(optimizer):
    optimizer.step()


@dataclass
class TrainState:
    epoch: int = 0
    best_ndcg: float = -1.0
    best_epoch: int = -1
    bad_rounds: int = 0
    best_state: dict | None = None
    history: list = field(default_factory=list)

    def observe(self, ndcg, model):
        """Record a validation score; returns True when training should stop."""
        if ndcg > self.best_ndcg:
            self.best_ndcg = ndcg
            self.best_epoch = self.epoch
            self.bad_rounds = 0
            self.best_state = model.state_dict()
        else:
            self.bad_rounds += 1
        return self.bad_rounds >= model.config.patience


def evaluate(model, dataset, split="test", cutoffs=(10, 20), batch_size=512):
    """Metrics of ``model`` on a leave-one-out split."""
    inputs, targets = dataset.split(split, model.config.max_len)
    if dataset.num_items != model.num_items:
        raise DataError(f"model has {model.num_items} items, dataset has {dataset.num_items}")
    scores = model.score_numpy(inputs, batch_size)
    return metrics_table(ranks_from_scores(scores, targets), cutoffs)


def train_epoch(model, optimizer, inputs, targets, rng, batch_size):
    order = rng.permutation(len(targets))
    total, seen = 0.0, 0
    for start in range(0, len(order), batch_size):
        sel = order[start:start + batch_size]
        optimizer.zero_grad()
        batch_loss = loss(model.forward(inputs[sel]), targets[sel])
        T.backward(batch_loss)
        optimizer.step()
        total += batch_loss.item() * len(sel)
        seen += len(sel)
    return total / seen


def train(dataset, config, max_epochs=None, callback=None):
    """Train an :class:`ElasticModel`; returns ``(model, history)``.

    Validation NDCG@10 is measured after every epoch; training stops after
    ``config.patience`` epochs without improvement and the best-validation
    parameters are restored.
    """
    config.validate()
    if dataset.num_users == 0:
        raise DataError("empty dataset")
    model = ElasticModel(config, dataset.num_items)
    optimizer = Adam(model.parameters(), config.lr, (config.beta1, config.beta2), config.eps)
    inputs, targets = dataset.training_examples(config.max_len, config.augment_prefixes)
    rng = np.random.default_rng(config.seed)
    state = TrainState()
    limit = config.max_epochs if max_epochs is None else min(max_epochs, config.max_epochs)
    for epoch in range(1, limit + 1):
        state.epoch = epoch
        t0 = time.perf_counter()
        train_loss = train_epoch(model, optimizer, inputs, targets, rng, config.batch_size)
        valid = evaluate(model, dataset, "valid", cutoffs=(10,))
        row = {"epoch": epoch, "loss": train_loss, **{f"valid_{k}": v for k, v in valid.items()},
               "seconds": time.perf_counter() - t0}
        state.history.append(row)
        log.info("epoch %d loss %.4f valid ndcg@10 %.4f hr@10 %.4f", epoch, train_loss,
                 valid["ndcg@10"], valid["hr@10"])
        if callback is not None:
            callback(row)
        if state.observe(valid["ndcg@10"], model):
            log.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
            break
    if state.best_state is not None:
        model.load_state_dict(state.best_state)
    return model, state.history
