"""Two-layer GCN encoder with a linear anomaly detector, and its pretraining loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .graph import AggregationOperator, Graph, identity_operator, sym_normalize
from .tensorcore import ContractError, Tensor

log = logging.getLogger(__name__)


def _frozen_array(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class GadModel:
    W1: np.ndarray  # d x h
    W2: np.ndarray  # h x r
    w_det: np.ndarray  # r x 1
    b_det: float
    frozen: bool = True

    def __post_init__(self):
        for name in ("W1", "W2", "w_det"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        object.__setattr__(self, "b_det", float(self.b_det))
        if self.W1.shape[1] != self.W2.shape[0] or self.w_det.shape != (self.W2.shape[1], 1):
            raise ContractError("inconsistent GadModel weight shapes")
        if not all(np.all(np.isfinite(w)) for w in (self.W1, self.W2, self.w_det)):
            raise ContractError("GadModel weights must be finite")

    @property
    def feat_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def repr_dim(self) -> int:
        return self.W2.shape[1]

    def weights(self) -> tuple:
        return self.W1, self.W2, self.w_det, self.b_det

    def to_dict(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "repr_dim": self.repr_dim,
            "W1": self.W1.tolist(),
            "W2": self.W2.tolist(),
            "w_det": self.w_det.tolist(),
            "b_det": self.b_det,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GadModel":
        m = cls(d["W1"], d["W2"], d["w_det"], d["b_det"])
        if m.hidden_dim != d["hidden_dim"] or m.repr_dim != d["repr_dim"]:
            raise ContractError("checkpoint dims disagree with weight shapes")
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GadModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# forward


def _check_input(op_n: int, x: Tensor, d: int):
    if x.cols != d:
        raise ContractError(f"features have {x.cols} columns, model expects {d}")
    if op_n != x.rows:
        raise ContractError(f"operator is {op_n}x{op_n} but features have {x.rows} rows")


def gcn_forward(op: AggregationOperator, x: Tensor, W1: Tensor, W2: Tensor) -> Tensor:
    """O relu(O X W1) W2 with whichever of the inputs are traced."""
    _check_input(op.matrix.n, x, W1.rows)
    hidden = tc.relu(tc.spmm(op.matrix, tc.matmul(x, W1)))
    return tc.spmm(op.matrix, tc.matmul(hidden, W2))


def encode(op: AggregationOperator, x, m: GadModel) -> Tensor:
    return gcn_forward(op, tc.as_tensor(x), Tensor(m.W1), Tensor(m.W2))


def encode_dual(x, m: GadModel) -> Tensor:
    """Aggregation-free encoder: every aggregation replaced by the identity."""
    x = tc.as_tensor(x)
    return encode(identity_operator(x.rows), x, m)


def detect(h, m: GadModel) -> Tensor:
    h = tc.as_tensor(h)
    if h.cols != m.repr_dim:
        raise ContractError(f"representation has {h.cols} columns, detector expects {m.repr_dim}")
    return tc.add_bias(tc.matmul(h, Tensor(m.w_det)), Tensor([[m.b_det]]))


def score(g: Graph, m: GadModel, x=None) -> np.ndarray:
    """Anomaly logits for every node of ``g`` (optionally on substituted features)."""
    x = g.features if x is None else x
    return detect(encode(sym_normalize(g), x, m), m).data[:, 0].copy()


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainConfig:
    hidden_dim: int = 32
    repr_dim: int = 16
    epochs: int = 200
    lr: float = 1e-2
    positive_weight: float | str = "auto"
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if self.hidden_dim < 1 or self.repr_dim < 1:
            raise ContractError("hidden_dim and repr_dim must be >= 1")
        if self.positive_weight != "auto" and not float(self.positive_weight) > 0:
            raise ContractError("positive_weight must be 'auto' or positive")


def auto_positive_weight(labels: np.ndarray) -> float:
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise ContractError("need both classes to weight the loss")
    return neg / pos


def supervised_loss_diagnostic(scores, labels) -> float:
    """Weighted BCE of logits against ground truth; for labelled reports only."""
    if labels is None:
        raise ContractError("labels required")
    labels = np.asarray(labels)
    s = tc.as_tensor(np.asarray(scores, dtype=np.float64).reshape(-1, 1))
    return tc.bce_with_logits(s, labels, auto_positive_weight(labels)).item()


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_model(d: int, hidden_dim: int, repr_dim: int, seed: int) -> GadModel:
    rng = np.random.default_rng(seed)
    return GadModel(
        _glorot(rng, d, hidden_dim), _glorot(rng, hidden_dim, repr_dim),
        _glorot(rng, repr_dim, 1), 0.0, frozen=False,
    )


def pretrain(g: Graph, cfg: PretrainConfig, history: list | None = None) -> GadModel:
    """Fit encoder and detector on the train split; keep the best-val-AUROC weights.

    ``history``, if given, receives one ``{"epoch", "loss", "val_auroc"}`` dict per epoch.
    """
    from .benchmark import auroc

    y = g.require_labels()
    train_idx = np.flatnonzero(g.train)
    val_idx = np.flatnonzero(g.val)
    if train_idx.size == 0 or val_idx.size == 0:
        raise ContractError("train and val masks must be non-empty")
    if np.any(g.unseen[train_idx]):
        raise ContractError("train split contains unseen nodes")
    y_train = y[train_idx]
    if np.unique(y_train).size < 2:
        raise ContractError("train split contains only one class")
    pw = auto_positive_weight(y_train) if cfg.positive_weight == "auto" else float(cfg.positive_weight)

    op = sym_normalize(g)
    x = Tensor(g.features)
    init = init_model(g.feat_dim, cfg.hidden_dim, cfg.repr_dim, cfg.seed)
    params = [np.array(init.W1), np.array(init.W2), np.array(init.w_det), np.zeros((1, 1))]
    state = tc.AdamState.zeros_like(params)

    best, best_auc, stale = None, -np.inf, 0
    for epoch in range(cfg.epochs):
        tape = tc.Tape()
        W1, W2, w, b = (tape.watch(p) for p in params)
        h = gcn_forward(op, x, W1, W2)
        s = tc.add_bias(tc.matmul(h, w), b)
        loss = tc.bce_with_logits(tc.take_rows(s, train_idx), y_train, pw)
        tape.backward(loss)
        params, state = tc.adam_step(params, [tape.grad(t) for t in (W1, W2, w, b)], state, cfg.lr)

        model = GadModel(params[0], params[1], params[2], params[3][0, 0])
        val_auc = auroc(score(g, model)[val_idx], y[val_idx])
        if history is not None:
            history.append({"epoch": epoch, "loss": loss.item(), "val_auroc": val_auc})
        if val_auc > best_auc:
            best, best_auc, stale = model, val_auc, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.debug("early stop at epoch %d (best val auroc %.4f)", epoch, best_auc)
                break
    return best
