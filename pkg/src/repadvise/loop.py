"""The alternating human-in-the-loop trainer.

One round of training: collect decisions on the current representations,
fit a differentiable stand-in for the decision-maker on those responses,
then retrain the embedding through the frozen stand-in against ground-truth
outcomes.  The stand-in only has to be locally accurate near the current
representation distribution; it is refit every round as that distribution
moves.

Experiments plug in through :class:`Experiment`, which owns the pieces that
differ per task: how a stored representation becomes stand-in input, how
predictions are composed for embedding training, and how a round is scored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from .nn import Activation, Adam, Network, Tensor, bce_loss, mse_loss, network_from_config


class LoopError(RuntimeError):
    pass


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------
@dataclass
class LoopConfig:
    """Knobs of the alternating trainer; defaults follow the scatterplot task."""

    epochs_proxy: int = 500
    epochs_embed: int = 300
    lr_proxy: float = 0.07
    lr_embed: float = 0.03
    lr_scale_with_error: bool = True    # raise lr when the round's accuracy was low
    lr_decay: float = 0.9               # per-round multiplicative decay
    reuse_previous_round: bool = True   # include the previous round's responses when fitting
    l2_proxy: float = 0.0
    dropout_proxy: float = 0.0
    restarts_proxy: int = 1
    proxy_splits: int = 15
    proxy_val_fraction: float = 0.2
    proxy_loss: str = "bce"             # bce for categorical actions, mse for continuous
    loss_weight: float = 1.0            # weight of the data term in embedding training
    batch_embed: int | None = None      # minibatch size; None trains full batch
    blr_enabled: bool = False
    blr_variance_doubling: float = 2.0
    blr_cadence: int = 50               # epochs between feature checkpoints
    blr_prior_precision: float = 1.0
    blr_noise_precision: float = 1.0

    def __post_init__(self):
        for name in ("epochs_proxy", "epochs_embed", "restarts_proxy", "proxy_splits"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr_proxy", "lr_embed", "lr_decay"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.dropout_proxy < 1:
            raise ValueError("dropout_proxy must lie in [0, 1)")
        if self.l2_proxy < 0:
            raise ValueError("l2_proxy must be nonnegative")


def scheduled_lr(base: float, round_index: int, prev_accuracy: float | None, config: LoopConfig) -> float:
    """Raise the rate when accuracy was low, decay it with each round."""
    scale = 1.0
    if config.lr_scale_with_error and prev_accuracy is not None:
        scale = 1.0 + (1.0 - prev_accuracy)
    return base * scale * config.lr_decay**round_index


# ----------------------------------------------------------------------
# response storage
# ----------------------------------------------------------------------
@dataclass
class ResponseRecord:
    query_id: str
    x: np.ndarray          # raw input
    z: np.ndarray          # representation the responder saw
    response: float        # action in [0, 1] (categorical) or a continuous report
    round_index: int

    def to_doc(self) -> dict:
        return {
            "query_id": self.query_id,
            "x": np.asarray(self.x).tolist(),
            "z": np.asarray(self.z).tolist(),
            "response": float(self.response),
            "round_index": self.round_index,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ResponseRecord":
        return cls(
            query_id=doc["query_id"],
            x=np.asarray(doc["x"], dtype=np.float64),
            z=np.asarray(doc["z"], dtype=np.float64),
            response=float(doc["response"]),
            round_index=int(doc["round_index"]),
        )


class ResponseBuffer:
    """Responses grouped by round; each record keeps the z it was shown under."""

    def __init__(self):
        self.rounds: list[list[ResponseRecord]] = []

    def add_round(self, records: Sequence[ResponseRecord]) -> None:
        self.rounds.append(list(records))

    def records_for_fit(self, reuse_previous: bool) -> list[ResponseRecord]:
        if not self.rounds or not self.rounds[-1]:
            raise LoopError("response buffer has no records for the current round")
        records = list(self.rounds[-1])
        if reuse_previous and len(self.rounds) >= 2:
            records = list(self.rounds[-2]) + records
        return records

    def __len__(self) -> int:
        return sum(len(r) for r in self.rounds)

    def to_doc(self) -> list:
        return [[rec.to_doc() for rec in round_records] for round_records in self.rounds]

    @classmethod
    def from_doc(cls, doc: list) -> "ResponseBuffer":
        buf = cls()
        for round_records in doc:
            buf.rounds.append([ResponseRecord.from_doc(r) for r in round_records])
        return buf


# ----------------------------------------------------------------------
# query selection
# ----------------------------------------------------------------------
def select_queries(dataset_size: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of ``n`` distinct indices, in random order."""
    if n > dataset_size:
        raise LoopError(f"cannot select {n} queries from a dataset of size {dataset_size}")
    return rng.permutation(dataset_size)[:n]


# ----------------------------------------------------------------------
# proxy fitting
# ----------------------------------------------------------------------
@dataclass
class ProxyFit:
    network: Network
    validation_error: float
    rounds_used: list[int]
    restart_errors: list[float]


def _forward_proxy(net: Network, x: Tensor, dropout: float, rng: np.random.Generator | None) -> Tensor:
    """Network forward with inverted dropout after each hidden nonlinearity."""
    out = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        out = layer.forward(out)
        if dropout > 0 and rng is not None and i < last and isinstance(layer, Activation):
            out = out.dropout(dropout, rng)
    return out


def _train_proxy_net(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    config: LoopConfig,
    lr: float,
    rng: np.random.Generator,
) -> None:
    loss_fn = bce_loss if config.proxy_loss == "bce" else mse_loss
    opt = Adam(net.parameters(), lr=lr)
    xt = Tensor(x)
    for _ in range(config.epochs_proxy):
        opt.zero_grad()
        pred = _forward_proxy(net, xt, config.dropout_proxy, rng)
        loss = loss_fn(pred.reshape(-1), y)
        if config.l2_proxy > 0:
            for p in net.parameters():
                loss = loss + config.l2_proxy * (p * p).sum()
        loss.backward()
        opt.step()


def _eval_proxy_net(net: Network, x: np.ndarray, y: np.ndarray, config: LoopConfig) -> float:
    loss_fn = bce_loss if config.proxy_loss == "bce" else mse_loss
    return loss_fn(net.forward(x).reshape(-1), y).item()


def fit_proxy(
    buffer: ResponseBuffer,
    config: LoopConfig,
    rng: np.random.Generator,
    architecture: Sequence[dict],
    featurize: Callable[[np.ndarray], np.ndarray] | None = None,
    lr: float | None = None,
) -> ProxyFit:
    """Fit the decision stand-in on the buffered responses.

    Each restart draws a fresh initialization; its score is the mean held-out
    error over ``proxy_splits`` random train/validation splits.  The winning
    initialization is retrained on all records and returned.
    """
    records = buffer.records_for_fit(config.reuse_previous_round)
    rounds_used = sorted({r.round_index for r in records})
    feats = featurize if featurize is not None else (lambda z: np.asarray(z, dtype=np.float64))
    x = np.stack([feats(r.z) for r in records])
    y = np.array([r.response for r in records], dtype=np.float64)
    lr = config.lr_proxy if lr is None else lr

    n = len(records)
    n_val = max(1, int(round(config.proxy_val_fraction * n)))
    if n_val >= n:
        n_val = n - 1 if n > 1 else 0

    best_err = np.inf
    best_init: np.ndarray | None = None
    restart_errors: list[float] = []
    for _ in range(config.restarts_proxy):
        proto = network_from_config(architecture, rng=rng)
        init = proto.state_vector()
        errors = []
        if n_val == 0:
            # single record: no held-out split possible, score on the training point
            net = proto.copy()
            _train_proxy_net(net, x, y, config, lr, rng)
            errors.append(_eval_proxy_net(net, x, y, config))
        else:
            for _ in range(config.proxy_splits):
                order = rng.permutation(n)
                val_idx, tr_idx = order[:n_val], order[n_val:]
                net = proto.copy()
                _train_proxy_net(net, x[tr_idx], y[tr_idx], config, lr, rng)
                errors.append(_eval_proxy_net(net, x[val_idx], y[val_idx], config))
        score = float(np.mean(errors))
        restart_errors.append(score)
        if score < best_err:
            best_err = score
            best_init = init

    final = network_from_config(architecture, rng=rng)
    final.load_state_vector(best_init)
    _train_proxy_net(final, x, y, config, lr, rng)
    return ProxyFit(final, best_err, rounds_used, restart_errors)


# ----------------------------------------------------------------------
# embedding training
# ----------------------------------------------------------------------
@dataclass
class EmbedResult:
    losses: list[float]
    checkpoints: list[tuple[int, np.ndarray, np.ndarray]]  # (epoch, features, phi state)


def optimize_embedding(
    phi: Network,
    hhat: Network,
    dataset: np.ndarray,
    labels: np.ndarray,
    config: LoopConfig,
    predict: Callable[[Network, Network, np.ndarray], Tensor],
    regularizers: Sequence[Callable[[Network], Tensor]] = (),
    loss: str = "bce",
    lr: float | None = None,
    rng: np.random.Generator | None = None,
    feature_fn: Callable[[Network], np.ndarray] | None = None,
) -> EmbedResult:
    """Retrain the embedding through the frozen stand-in.

    ``predict(phi, hhat, batch)`` must compose the two networks into action
    probabilities (or continuous predictions) for the batch.  The stand-in's
    parameters are not touched; callers may assert bit-equality around this.
    ``feature_fn`` snapshots stand-in last-layer features every
    ``config.blr_cadence`` epochs for early-stopping analysis.
    """
    loss_fn = bce_loss if loss == "bce" else mse_loss
    opt = Adam(phi.parameters(), lr=config.lr_embed if lr is None else lr)
    n = len(dataset)
    losses: list[float] = []
    checkpoints: list[tuple[int, np.ndarray, np.ndarray]] = []

    def snapshot(epoch: int) -> None:
        if feature_fn is not None:
            checkpoints.append((epoch, feature_fn(phi), phi.state_vector()))

    snapshot(0)
    for epoch in range(config.epochs_embed):
        if config.batch_embed is not None and config.batch_embed < n:
            if rng is None:
                raise LoopError("minibatch embedding training needs an rng")
            idx = rng.choice(n, size=config.batch_embed, replace=False)
            bx, by = dataset[idx], labels[idx]
        else:
            bx, by = dataset, labels
        opt.zero_grad()
        total = Tensor(0.0)
        if config.loss_weight != 0.0:
            pred = predict(phi, hhat, bx)
            total = total + config.loss_weight * loss_fn(pred.reshape(-1), by)
        for reg in regularizers:
            total = total + reg(phi)
        value = total.item()
        if not np.isfinite(value):
            raise LoopError(f"non-finite embedding loss {value!r} at epoch {epoch}")
        if total._parents:  # loss_weight 0 with no regularizers: nothing to optimize
            total.backward()
            opt.step()
        for p in hhat.parameters():
            p.zero_grad()
        losses.append(value)
        if (epoch + 1) % config.blr_cadence == 0:
            snapshot(epoch + 1)
    return EmbedResult(losses, checkpoints)


# ----------------------------------------------------------------------
# Bayesian linear regression early stopping
# ----------------------------------------------------------------------
def blr_mean_variance(features: np.ndarray, prior_precision: float, noise_precision: float) -> float:
    """Mean model variance f' S f of a conjugate Gaussian linear regression.

    S = (alpha I + beta F'F)^-1.  The observation-noise floor 1/beta is left
    out: the stopping rule tracks how far features drift from the fitted
    region, and a constant floor would mask the doubling signal.
    """
    f = np.asarray(features, dtype=np.float64)
    d = f.shape[1]
    cov = np.linalg.inv(prior_precision * np.eye(d) + noise_precision * (f.T @ f))
    return float(np.mean(np.einsum("ij,jk,ik->i", f, cov, f)))


def blr_early_stop(
    feature_trajectory: Sequence[np.ndarray],
    targets: np.ndarray,
    config: LoopConfig,
) -> int:
    """First checkpoint epoch whose mean predictive variance reaches the
    doubling threshold relative to checkpoint 0, else the final epoch."""
    if len(feature_trajectory) < 2:
        raise LoopError("early-stop analysis needs at least 2 checkpoints")
    targets = np.asarray(targets, dtype=np.float64)
    for f in feature_trajectory:
        if len(f) != len(targets):
            raise LoopError("feature matrix row count does not match targets")
    variances = [
        blr_mean_variance(f, config.blr_prior_precision, config.blr_noise_precision)
        for f in feature_trajectory
    ]
    baseline = variances[0]
    for t, v in enumerate(variances[1:], start=1):
        if v >= config.blr_variance_doubling * baseline:
            return t * config.blr_cadence
    return (len(feature_trajectory) - 1) * config.blr_cadence


# ----------------------------------------------------------------------
# computer-only initialization
# ----------------------------------------------------------------------
def init_computer_only(
    phi: Network,
    head: Network,
    dataset: np.ndarray,
    labels: np.ndarray,
    predict: Callable[[Network, Network, np.ndarray], Tensor],
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    val_fraction: float = 0.2,
    batch: int | None = None,
) -> float:
    """Warm-start the embedding with a machine-only classifier.

    Trains phi jointly with a disposable ``head`` on ground truth and returns
    the head's held-out accuracy; the caller keeps phi and drops the head.
    """
    n = len(dataset)
    order = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    opt = Adam(phi.parameters() + head.parameters(), lr=lr)
    for _ in range(epochs):
        idx = tr_idx if batch is None or batch >= len(tr_idx) else rng.choice(tr_idx, batch, replace=False)
        opt.zero_grad()
        pred = predict(phi, head, dataset[idx])
        loss = bce_loss(pred.reshape(-1), labels[idx])
        loss.backward()
        opt.step()
    val_pred = predict(phi, head, dataset[val_idx]).data.reshape(-1)
    return float(np.mean((val_pred > 0.5) == (labels[val_idx] > 0.5)))


# ----------------------------------------------------------------------
# session state and the round driver
# ----------------------------------------------------------------------
@dataclass
class Query:
    query_id: str
    index: int             # dataset index
    z: np.ndarray          # representation shown for this query

    def to_doc(self) -> dict:
        return {"query_id": self.query_id, "index": int(self.index), "z": np.asarray(self.z).tolist()}

    @classmethod
    def from_doc(cls, doc: dict) -> "Query":
        return cls(doc["query_id"], int(doc["index"]), np.asarray(doc["z"], dtype=np.float64))


@dataclass
class SessionState:
    round_index: int
    phi: Network
    hhat: Network | None
    buffer: ResponseBuffer
    metrics: list[dict] = field(default_factory=list)
    pending: list[Query] | None = None
    rng: np.random.Generator | None = None

    def require_rng(self) -> np.random.Generator:
        if self.rng is None:
            raise LoopError("session has no rng attached")
        return self.rng


class Experiment:
    """Task adapter consumed by :func:`run_round`.

    Subclasses provide the dataset, label access, representation and
    stand-in plumbing.  All methods must be deterministic given their rng
    arguments.
    """

    hhat_architecture: list[dict]

    def dataset_size(self) -> int:
        raise NotImplementedError

    def input_at(self, index: int) -> np.ndarray:
        raise NotImplementedError

    def label_at(self, index: int) -> float:
        raise NotImplementedError

    def represent(self, phi: Network, index: int) -> np.ndarray:
        """Representation z for one dataset item under the current embedding."""
        raise NotImplementedError

    def featurize(self, z: np.ndarray) -> np.ndarray:
        """Stand-in input computed from a stored representation."""
        raise NotImplementedError

    def predict(self, phi: Network, hhat: Network, batch: np.ndarray) -> Tensor:
        """Differentiable composition used to retrain the embedding."""
        raise NotImplementedError

    def training_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(inputs, labels) for embedding training."""
        raise NotImplementedError

    def regularizers(self, config: LoopConfig) -> list[Callable[[Network], Tensor]]:
        return []

    def evaluate(self, phi: Network, hhat: Network | None, rng: np.random.Generator) -> dict:
        """Extra metrics recorded per round (held-out scores etc.)."""
        return {}


def issue_queries(state: SessionState, experiment: Experiment, n: int) -> list[Query]:
    """Draw the next query batch and remember it for response validation."""
    rng = state.require_rng()
    indices = select_queries(experiment.dataset_size(), n, rng)
    queries = [
        Query(
            query_id=f"r{state.round_index}-q{i}",
            index=int(idx),
            z=experiment.represent(state.phi, int(idx)),
        )
        for i, idx in enumerate(indices)
    ]
    state.pending = queries
    return queries


def run_round(
    state: SessionState,
    responses: dict[str, float],
    config: LoopConfig,
    experiment: Experiment,
    retrain: bool = True,
) -> SessionState:
    """Consume one round of responses and advance the session in place.

    ``responses`` maps query_id -> action.  Every issued query must be
    answered exactly once; unknown or missing ids raise before any state
    changes.  ``retrain=False`` records the round but skips refitting (used
    when the responder was already perfect).
    """
    if state.pending is None:
        raise LoopError("no query batch outstanding; issue_queries first")
    issued = {q.query_id: q for q in state.pending}
    unknown = sorted(set(responses) - set(issued))
    if unknown:
        raise LoopError(f"unknown query ids: {', '.join(unknown)}")
    missing = sorted(set(issued) - set(responses))
    if missing:
        raise LoopError(f"missing responses for query ids: {', '.join(missing)}")

    records = [
        ResponseRecord(
            query_id=qid,
            x=experiment.input_at(issued[qid].index),
            z=issued[qid].z,
            response=float(responses[qid]),
            round_index=state.round_index,
        )
        for qid in issued
    ]
    round_accuracy = float(
        np.mean(
            [(responses[qid] > 0.5) == (experiment.label_at(issued[qid].index) > 0.5) for qid in issued]
        )
    )
    state.buffer.add_round(records)
    rng = state.require_rng()

    metrics: dict = {"round": state.round_index, "response_accuracy": round_accuracy}
    if retrain:
        lr_proxy = scheduled_lr(config.lr_proxy, state.round_index, round_accuracy, config)
        fit = fit_proxy(
            state.buffer, config, rng, experiment.hhat_architecture, experiment.featurize, lr=lr_proxy
        )
        state.hhat = fit.network
        metrics["proxy_validation_error"] = fit.validation_error

        inputs, labels = experiment.training_arrays()
        lr_embed = scheduled_lr(config.lr_embed, state.round_index, round_accuracy, config)
        optimize_embedding(
            state.phi,
            state.hhat,
            inputs,
            labels,
            config,
            predict=experiment.predict,
            regularizers=experiment.regularizers(config),
            loss=config.proxy_loss,
            lr=lr_embed,
            rng=rng,
        )
    metrics.update(experiment.evaluate(state.phi, state.hhat, rng))
    state.metrics.append(metrics)
    state.round_index += 1
    state.pending = None
    return state


# ----------------------------------------------------------------------
# session persistence
# ----------------------------------------------------------------------
def session_to_doc(state: SessionState, config: LoopConfig, extra: dict | None = None) -> dict:
    doc = {
        "version": 1,
        "round_index": state.round_index,
        "config": asdict(config),
        "phi": json.loads(state.phi.to_json()),
        "hhat": None if state.hhat is None else json.loads(state.hhat.to_json()),
        "buffer": state.buffer.to_doc(),
        "metrics": state.metrics,
        "pending": None if state.pending is None else [q.to_doc() for q in state.pending],
        "rng_state": None if state.rng is None else state.rng.bit_generator.state,
    }
    if extra:
        doc["extra"] = extra
    return doc


def session_from_doc(doc: dict) -> tuple[SessionState, LoopConfig]:
    if doc.get("version") != 1:
        raise LoopError(f"unsupported session version {doc.get('version')!r}")
    config = LoopConfig(**doc["config"])
    rng = None
    if doc["rng_state"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = doc["rng_state"]
    state = SessionState(
        round_index=doc["round_index"],
        phi=Network.from_json(json.dumps(doc["phi"])),
        hhat=None if doc["hhat"] is None else Network.from_json(json.dumps(doc["hhat"])),
        buffer=ResponseBuffer.from_doc(doc["buffer"]),
        metrics=list(doc["metrics"]),
        pending=None if doc["pending"] is None else [Query.from_doc(q) for q in doc["pending"]],
        rng=rng,
    )
    return state, config
