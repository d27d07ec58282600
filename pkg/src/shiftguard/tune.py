"""Test-time adaptation of a frozen GAD model to unseen normal patterns.

A residual feature aligner ``X' = X + MLP(X)`` is trained so that the
model's aggregated representations agree with an aggregation-free branch
passed through a linear aggregation estimator.  The estimator itself is fit
only on nodes both branches consider confidently normal.  The two modules
are trained alternately; the GAD model never changes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .gadmodel import GadModel, encode, encode_dual, gcn_forward, detect
from .graph import AggregationOperator, Graph, identity_operator, sym_normalize
from .tensorcore import ContractError, Tensor

log = logging.getLogger(__name__)


class NoConfidentNormals(ContractError):
    pass


# ---------------------------------------------------------------------------
# parameters


def _ro(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class AlignerParams:
    W1: np.ndarray  # d x h_a
    b1: np.ndarray  # 1 x h_a
    W2: np.ndarray  # h_a x d
    b2: np.ndarray  # 1 x d

    def __post_init__(self):
        for k in ("W1", "b1", "W2", "b2"):
            object.__setattr__(self, k, _ro(getattr(self, k)))

    @classmethod
    def init(cls, d: int, seed: int, hidden: int | None = None) -> "AlignerParams":
        h = d if hidden is None else hidden
        rng = np.random.default_rng(seed)
        bound = np.sqrt(6.0 / (d + h))
        # zero output layer: the aligner starts as the identity map
        return cls(rng.uniform(-bound, bound, (d, h)), np.zeros((1, h)), np.zeros((h, d)), np.zeros((1, d)))

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("W1", "b1", "W2", "b2")}

    @classmethod
    def from_dict(cls, d: dict) -> "AlignerParams":
        return cls(d["W1"], d["b1"], d["W2"], d["b2"])


@dataclass(frozen=True, eq=False)
class EstimatorParams:
    weight: np.ndarray  # r x r
    bias: np.ndarray  # 1 x r

    def __post_init__(self):
        object.__setattr__(self, "weight", _ro(self.weight))
        object.__setattr__(self, "bias", _ro(np.reshape(self.bias, (1, -1))))
        r = self.weight.shape[0]
        if self.weight.shape != (r, r) or self.bias.shape != (1, r):
            raise ContractError("estimator weight must be r x r and bias length r")

    @classmethod
    def identity(cls, r: int) -> "EstimatorParams":
        return cls(np.eye(r), np.zeros((1, r)))

    def arrays(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def to_dict(self) -> dict:
        return {"weight": self.weight.tolist(), "bias": self.bias[0].tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorParams":
        return cls(d["weight"], d["bias"])


def save_params(params, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict()) + "\n", encoding="utf-8")


def load_aligner(path) -> AlignerParams:
    return AlignerParams.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_estimator(path) -> EstimatorParams:
    return EstimatorParams.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class AdaptConfig:
    k_percent: float = 0.2
    outer_rounds: int = 20
    aligner_steps_per_round: int = 5
    estimator_steps_per_round: int = 5
    lr_align: float = 1e-3
    lr_est: float = 1e-2
    temperature: float = 1.0
    estimator_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.k_percent <= 1:
            raise ContractError("k_percent must lie in (0, 1]")
        if self.outer_rounds < 0:
            raise ContractError("outer_rounds must be >= 0")
        if self.aligner_steps_per_round < 1:
            raise ContractError("aligner_steps_per_round must be >= 1")
        if self.estimator_enabled and self.estimator_steps_per_round < 1:
            raise ContractError("estimator_steps_per_round must be >= 1 when the estimator is enabled")
        if not (self.lr_align > 0 and self.lr_est > 0):
            raise ContractError("learning rates must be positive")
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")


# ---------------------------------------------------------------------------
# forward pieces


def _aligner_forward(x: Tensor, W1, b1, W2, b2) -> Tensor:
    hidden = tc.relu(tc.add_bias(tc.matmul(x, W1), b1))
    return tc.add(x, tc.add_bias(tc.matmul(hidden, W2), b2))


def align(x, a: AlignerParams) -> Tensor:
    x = tc.as_tensor(x)
    if x.cols != a.W1.shape[0]:
        raise ContractError(f"features have {x.cols} columns, aligner expects {a.W1.shape[0]}")
    return _aligner_forward(x, *(Tensor(p) for p in a.arrays()))


def forward_main(op: AggregationOperator, x_aligned, m: GadModel):
    h = encode(op, x_aligned, m)
    return h, detect(h, m)


def _estimate(h_ego: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return tc.add_bias(tc.matmul(h_ego, weight), bias)


def forward_dual(x_aligned, m: GadModel, e: EstimatorParams):
    if e.weight.shape[0] != m.repr_dim:
        raise ContractError("estimator size does not match the model's representation size")
    h_dual = _estimate(encode_dual(x_aligned, m), Tensor(e.weight), Tensor(e.bias))
    return h_dual, detect(h_dual, m)


def alignment_loss(h, h_dual, temperature: float = 1.0) -> Tensor:
    """KL(softmax(h/T) || softmax(h_dual/T)), averaged over nodes."""
    h, h_dual = tc.as_tensor(h), tc.as_tensor(h_dual)
    if h.shape != h_dual.shape:
        raise ContractError(f"shape mismatch: {h.shape} vs {h_dual.shape}")
    return tc.kl_rows(tc.row_softmax(h, temperature), tc.row_softmax(h_dual, temperature))


def select_confident_normals(s, s_dual, k_percent: float) -> np.ndarray:
    """Nodes among the ceil(k*n) lowest logits under both scores, ascending index order."""
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64).ravel()
    s_dual = np.asarray(s_dual.data if isinstance(s_dual, Tensor) else s_dual, dtype=np.float64).ravel()
    if s.size != s_dual.size:
        raise ContractError("score vectors differ in length")
    if not 0 < k_percent <= 1:
        raise ContractError("k_percent must lie in (0, 1]")
    k = int(np.ceil(k_percent * s.size))
    # stable sort: ties go to the lower node index
    top = np.zeros(s.size, dtype=bool)
    top[np.argsort(s, kind="stable")[:k]] = True
    top_dual = np.zeros(s.size, dtype=bool)
    top_dual[np.argsort(s_dual, kind="stable")[:k]] = True
    return np.flatnonzero(top & top_dual)


def estimator_loss(h, h_dual, selected, temperature: float = 1.0) -> Tensor:
    selected = np.asarray(selected, dtype=np.int64)
    if selected.size == 0:
        raise NoConfidentNormals("no confident normals")
    return alignment_loss(tc.take_rows(h, selected), tc.take_rows(h_dual, selected), temperature)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class AdaptResult:
    aligner: AlignerParams
    estimator: EstimatorParams
    trace: list[dict] = field(default_factory=list)


def adapt(g: Graph, m: GadModel, cfg: AdaptConfig) -> AdaptResult:
    """Alternate aligner updates (estimator frozen) and estimator updates (aligner frozen).

    Labels on ``g`` are never read.
    """
    if not m.frozen:
        raise ContractError("adapt() needs a frozen model")
    if g.feat_dim != m.feat_dim:
        raise ContractError("graph and model feature dimensions differ")

    op = sym_normalize(g)
    ident = identity_operator(g.n)
    x = Tensor(g.features)
    W1, W2 = Tensor(m.W1), Tensor(m.W2)
    w_det, b_det = Tensor(m.w_det), Tensor([[m.b_det]])

    aligner = AlignerParams.init(g.feat_dim, cfg.seed).arrays()
    estimator = EstimatorParams.identity(m.repr_dim).arrays()
    a_state = tc.AdamState.zeros_like(aligner)
    e_state = tc.AdamState.zeros_like(estimator)
    trace: list[dict] = []

    for rnd in range(cfg.outer_rounds):
        # phase A: aligner only
        est = [Tensor(p) for p in estimator]
        for step in range(cfg.aligner_steps_per_round):
            tape = tc.Tape()
            params = [tape.watch(p) for p in aligner]
            xa = _aligner_forward(x, *params)
            h = gcn_forward(op, xa, W1, W2)
            h_dual = _estimate(gcn_forward(ident, xa, W1, W2), *est)
            loss = alignment_loss(h, h_dual, cfg.temperature)
            tape.backward(loss)
            aligner, a_state = tc.adam_step(aligner, [tape.grad(p) for p in params], a_state, cfg.lr_align)
            trace.append({"round": rnd, "phase": "align", "step": step, "loss": loss.item(), "selected_count": None})

        if not cfg.estimator_enabled:
            continue

        # phase B: estimator only, on a fixed confident-normal set
        xa = _aligner_forward(x, *(Tensor(p) for p in aligner))
        h = gcn_forward(op, xa, W1, W2)
        h_ego = gcn_forward(ident, xa, W1, W2)
        s = tc.add_bias(tc.matmul(h, w_det), b_det)
        s_dual = tc.add_bias(tc.matmul(_estimate(h_ego, *(Tensor(p) for p in estimator)), w_det), b_det)
        selected = select_confident_normals(s, s_dual, cfg.k_percent)
        if selected.size == 0:
            log.debug("round %d: no confident normals, estimator update skipped", rnd)
            trace.append({"round": rnd, "phase": "estimate", "step": None, "loss": None, "selected_count": 0})
            continue
        h_sel = tc.take_rows(h, selected)
        ego_sel = tc.take_rows(h_ego, selected)
        for step in range(cfg.estimator_steps_per_round):
            tape = tc.Tape()
            params = [tape.watch(p) for p in estimator]
            loss = alignment_loss(h_sel, _estimate(ego_sel, *params), cfg.temperature)
            tape.backward(loss)
            estimator, e_state = tc.adam_step(estimator, [tape.grad(p) for p in params], e_state, cfg.lr_est)
            trace.append({
                "round": rnd, "phase": "estimate", "step": step,
                "loss": loss.item(), "selected_count": int(selected.size),
            })

    return AdaptResult(AlignerParams(*aligner), EstimatorParams(*estimator), trace)


def adapted_scores(g: Graph, m: GadModel, aligner: AlignerParams | None = None) -> np.ndarray:
    """Main-branch anomaly logits on (optionally aligned) features."""
    x = g.features if aligner is None else align(g.features, aligner)
    _, s = forward_main(sym_normalize(g), x, m)
    return s.data[:, 0].copy()
