"""Scatterplot experiment: rotate noisy 3-D point clouds so their 2-D
projection reads as an `X` or an `O`.

Each cloud hides its shape in a 2-D plane of R^p; the remaining directions
carry similarly scaled Gaussian noise, and a fixed random rotation mixes
everything.  The embedding is a single p x p linear map trained with an
orthogonality penalty; the responder (here a synthetic template-matching
oracle, in the live game a person) only ever sees the first two output
coordinates as a scatterplot.  The decision stand-in is a small conv net
reading a differentiable 6x6 histogram of the plot, which is what lets
response gradients reach the projection matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import special_ortho_group

from .loop import Experiment, LoopConfig, SessionState, ResponseBuffer, issue_queries, run_round
from .nn import Dense, Network, Tensor

GRID_BINS = 6
GRID_LO, GRID_HI = -1.5, 1.5
BIN_WIDTH = (GRID_HI - GRID_LO) / GRID_BINS
BIN_CENTERS = GRID_LO + BIN_WIDTH * (np.arange(GRID_BINS) + 0.5)

LABEL_X, LABEL_O = "X", "O"


# ----------------------------------------------------------------------
# dataset
# ----------------------------------------------------------------------
@dataclass
class PointCloudDataset:
    clouds: np.ndarray        # (n, m, p)
    labels: np.ndarray        # (n,) with 1 = X, 0 = O
    rotation: np.ndarray      # the shared p x p rotation applied to every cloud

    def __len__(self) -> int:
        return len(self.clouds)

    def ground_truth_projection(self) -> np.ndarray:
        """Matrix that undoes the rotation; its first two output columns show the shape."""
        return self.rotation.T


def _canonical_shape(label: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """m points forming an X (two diagonals of [-1,1]^2) or an O (unit circle)."""
    if label == 1:
        t = rng.uniform(-1.0, 1.0, size=m)
        sign = np.where(rng.random(m) < 0.5, 1.0, -1.0)
        return np.column_stack([t, sign * t])
    theta = rng.uniform(0.0, 2.0 * np.pi, size=m)
    return np.column_stack([np.cos(theta), np.sin(theta)])


def generate_dataset(
    n: int,
    p: int = 3,
    m: int = 40,
    jitter: float = 0.05,
    seed: int = 0,
    rotation: np.ndarray | None = None,
) -> PointCloudDataset:
    """Sample ``n`` labeled clouds sharing one hidden rotation.

    In-plane coordinates get Gaussian jitter of scale ``jitter``; the p-2
    off-plane coordinates are N(0, 1/3), matching the variance of the shape
    coordinates themselves.
    """
    if p < 3:
        raise ValueError("p must be at least 3")
    if m < 8:
        raise ValueError("m must be at least 8")
    rng = np.random.default_rng(seed)
    if rotation is None:
        rotation = special_ortho_group.rvs(p, random_state=rng)
    labels = (rng.random(n) < 0.5).astype(np.float64)
    clouds = np.empty((n, m, p))
    noise_sigma = np.sqrt(1.0 / 3.0)
    for i in range(n):
        base = np.zeros((m, p))
        base[:, :2] = _canonical_shape(int(labels[i]), m, rng)
        base[:, :2] += rng.normal(0.0, jitter, size=(m, 2))
        base[:, 2:] = rng.normal(0.0, noise_sigma, size=(m, p - 2))
        clouds[i] = base @ rotation
    return PointCloudDataset(clouds, labels, rotation)


def export_jsonl(dataset: PointCloudDataset, path) -> None:
    with open(path, "w") as fh:
        for points, label in zip(dataset.clouds, dataset.labels):
            fh.write(json.dumps({"points": points.tolist(), "label": LABEL_X if label else LABEL_O}))
            fh.write("\n")


def import_jsonl(path) -> tuple[np.ndarray, np.ndarray]:
    clouds, labels = [], []
    with open(path) as fh:
        for line in fh:
            doc = json.loads(line)
            clouds.append(np.asarray(doc["points"], dtype=np.float64))
            labels.append(1.0 if doc["label"] == LABEL_X else 0.0)
    return np.asarray(clouds), np.asarray(labels)


# ----------------------------------------------------------------------
# projection
# ----------------------------------------------------------------------
def project(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply the p x p map and keep the first two output coordinates."""
    matrix = np.asarray(matrix, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"projection matrix must be square, got {matrix.shape}")
    if points.shape[-1] != matrix.shape[0]:
        raise ValueError(f"points have dim {points.shape[-1]}, matrix expects {matrix.shape[0]}")
    return (points @ matrix)[..., :2]


def orthogonality_penalty(matrix) -> float | Tensor:
    """Squared Frobenius norm of M'M - I; accepts arrays or Tensors."""
    if isinstance(matrix, Tensor):
        gram = matrix.T @ matrix
        eye = Tensor(np.eye(matrix.shape[0]))
        diff = gram - eye
        return (diff * diff).sum()
    m = np.asarray(matrix, dtype=np.float64)
    diff = m.T @ m - np.eye(m.shape[0])
    return float((diff * diff).sum())


def new_projection_model(p: int = 3, rng: np.random.Generator | None = None, scale: float = 0.5) -> Network:
    """The embedding: one square linear layer without bias.

    Weights start uniform in +-scale; the small default keeps the first-round
    plots genuinely uninformative, which is the intended baseline condition.
    """
    net = Network([Dense(p, p, bias=False, rng=rng)])
    if rng is not None:
        net.layers[0].weight.data = rng.uniform(-scale, scale, size=(p, p))
    return net


def projection_matrix(phi: Network) -> np.ndarray:
    return phi.layers[0].weight.data


# ----------------------------------------------------------------------
# soft histogram
# ----------------------------------------------------------------------
@dataclass
class SoftHistogram:
    grid: np.ndarray          # (6, 6), entries sum to the point count
    bandwidth: float


def soft_histogram_t(points: Tensor, bandwidth: float) -> Tensor:
    """Differentiable histogram of (batch, m, 2) points -> (batch, 1, 6, 6).

    Each point spreads unit mass over the grid with a product of triangular
    kernels and is renormalized, so the grid always sums to m.  Coordinates
    clamp into the grid square; mass conservation needs bandwidth > 0.25
    (half the worst-case distance to the nearest bin centre).

    Implemented as one fused graph node: this sits inside every embedding
    training step, and composing it from primitive ops costs several large
    temporaries per step.
    """
    if bandwidth <= 0.25:
        raise ValueError("bandwidth must exceed 0.25 to conserve mass on the grid")
    pd = points.data
    b, m, _ = pd.shape
    clipped = np.clip(pd, GRID_LO, GRID_HI)
    inside = (pd >= GRID_LO) & (pd <= GRID_HI)
    dx = clipped[:, :, 0, None] - BIN_CENTERS                       # (b, m, 6)
    dy = clipped[:, :, 1, None] - BIN_CENTERS
    wx = np.maximum(0.0, 1.0 - np.abs(dx) / bandwidth)
    wy = np.maximum(0.0, 1.0 - np.abs(dy) / bandwidth)
    # the 2-D kernel is a product of 1-D kernels, so normalizing each axis to
    # unit mass and taking a batched outer-product sum avoids any (b,m,6,6)
    # temporary: grid[i,j] = sum_m ux[m,i] * uy[m,j]
    sx = wx.sum(axis=2, keepdims=True) + 1e-12
    sy = wy.sum(axis=2, keepdims=True) + 1e-12
    ux, uy = wx / sx, wy / sy
    grid = np.matmul(ux.transpose(0, 2, 1), uy).reshape(b, 1, GRID_BINS, GRID_BINS)

    def backward(g: np.ndarray) -> None:
        gg = g.reshape(b, GRID_BINS, GRID_BINS)
        dux = np.matmul(uy, gg.transpose(0, 2, 1))                  # (b, m, 6)
        duy = np.matmul(ux, gg)
        dwx = (dux - (dux * ux).sum(axis=2, keepdims=True)) / sx
        dwy = (duy - (duy * uy).sum(axis=2, keepdims=True)) / sy
        dpx = -(dwx * np.sign(dx) * (wx > 0)).sum(axis=2) / bandwidth
        dpy = -(dwy * np.sign(dy) * (wy > 0)).sum(axis=2) / bandwidth
        grad = np.stack([dpx * inside[:, :, 0], dpy * inside[:, :, 1]], axis=2)
        points._accumulate(grad)

    return Tensor(grid, _parents=(points,), _backward=backward)


def soft_histogram(points2d: np.ndarray, bandwidth: float = 0.5) -> SoftHistogram:
    """Histogram of a single (m, 2) point set as plain arrays."""
    pts = np.asarray(points2d, dtype=np.float64)[None]
    grid = soft_histogram_t(Tensor(pts), bandwidth).data[0, 0]
    return SoftHistogram(grid, bandwidth)


def hard_histogram(points2d: np.ndarray) -> np.ndarray:
    """Nearest-bin counts on the same 6x6 grid (not differentiable)."""
    pts = np.clip(np.asarray(points2d, dtype=np.float64), GRID_LO, GRID_HI)
    idx = np.clip(((pts - GRID_LO) / BIN_WIDTH).astype(int), 0, GRID_BINS - 1)
    grid = np.zeros((GRID_BINS, GRID_BINS))
    np.add.at(grid, (idx[:, 0], idx[:, 1]), 1.0)
    return grid


# ----------------------------------------------------------------------
# synthetic responder
# ----------------------------------------------------------------------
@dataclass
class ShapeOracle:
    """Template matcher standing in for a person looking at the plot.

    Holds average histograms of clean canonical shapes; classifies by the
    L1 distance gap, squashed through a logistic with temperature tau.
    The only contract is that its signal strengthens as the projection
    approaches the hidden plane.
    """

    reference_x: np.ndarray
    reference_o: np.ndarray
    tau: float

    def probability_x(self, points2d: np.ndarray) -> float:
        if np.isinf(self.tau):
            return 0.5
        hist = hard_histogram(points2d)
        hist = hist / hist.sum()
        d_x = np.abs(hist - self.reference_x).sum()
        d_o = np.abs(hist - self.reference_o).sum()
        return float(1.0 / (1.0 + np.exp(-(d_o - d_x) / self.tau)))

    def label(self, points2d: np.ndarray, rng: np.random.Generator) -> str:
        return LABEL_X if rng.random() < self.probability_x(points2d) else LABEL_O


def build_oracle(tau: float, m: int = 40, references: int = 200, seed: int = 1234) -> ShapeOracle:
    """Average jitter-free canonical histograms into the two templates."""
    rng = np.random.default_rng(seed)
    refs = {1: np.zeros((GRID_BINS, GRID_BINS)), 0: np.zeros((GRID_BINS, GRID_BINS))}
    for label in (1, 0):
        for _ in range(references):
            shape = _canonical_shape(label, m, rng)
            hist = hard_histogram(shape)
            refs[label] += hist / hist.sum()
        refs[label] /= references
    return ShapeOracle(refs[1], refs[0], tau)


def oracle_label(points2d: np.ndarray, oracle: ShapeOracle, rng: np.random.Generator) -> str:
    return oracle.label(points2d, rng)


def expected_oracle_accuracy(
    matrix: np.ndarray, clouds: np.ndarray, labels: np.ndarray, oracle: ShapeOracle
) -> float:
    """Mean probability that the oracle names the true label under this projection."""
    probs = np.array([oracle.probability_x(project(matrix, c)) for c in clouds])
    return float(np.mean(np.where(labels > 0.5, probs, 1.0 - probs)))


# ----------------------------------------------------------------------
# simulated session
# ----------------------------------------------------------------------
def pointcloud_loop_config(**overrides) -> LoopConfig:
    """Loop defaults for this task: paper-scale epochs, desk-scale model selection."""
    base = dict(
        epochs_proxy=500,
        epochs_embed=300,
        lr_proxy=0.07,
        lr_embed=0.03,
        restarts_proxy=2,
        proxy_splits=2,
        batch_embed=128,
        proxy_loss="bce",
    )
    base.update(overrides)
    return LoopConfig(**base)


@dataclass
class SimulationConfig:
    rounds: int = 5
    queries_per_round: int = 15
    tau: float = 0.05
    n_train: int = 600
    n_eval: int = 200
    p: int = 3
    m: int = 40
    jitter: float = 0.05
    bandwidth: float = 0.5
    ortho_weight: float = 2.0
    skip_retrain_when_perfect: bool = True   # a fully correct round leaves phi untouched
    loop: LoopConfig = field(default_factory=pointcloud_loop_config)


HHAT_ARCHITECTURE = [
    {"kind": "conv2d", "in_channels": 1, "out_channels": 3, "kernel": 3, "bias": True},
    {"kind": "maxpool2d", "size": 2},
    {"kind": "dense", "in": 12, "out": 1, "bias": True},
    {"kind": "sigmoid"},
]


class PointCloudExperiment(Experiment):
    """Task adapter wiring clouds, projections and histograms into the loop."""

    hhat_architecture = HHAT_ARCHITECTURE

    def __init__(
        self,
        train: PointCloudDataset | tuple[np.ndarray, np.ndarray],
        eval_clouds: np.ndarray,
        eval_labels: np.ndarray,
        oracle: ShapeOracle,
        bandwidth: float = 0.5,
        ortho_weight: float = 1.0,
    ):
        if isinstance(train, PointCloudDataset):
            self.clouds, self.labels = train.clouds, train.labels
        else:
            self.clouds, self.labels = train
        self.eval_clouds = eval_clouds
        self.eval_labels = eval_labels
        self.oracle = oracle
        self.bandwidth = bandwidth
        self.ortho_weight = ortho_weight

    def dataset_size(self) -> int:
        return len(self.clouds)

    def input_at(self, index: int) -> np.ndarray:
        return self.clouds[index]

    def label_at(self, index: int) -> float:
        return float(self.labels[index])

    def represent(self, phi: Network, index: int) -> np.ndarray:
        return project(projection_matrix(phi), self.clouds[index])

    def featurize(self, z: np.ndarray) -> np.ndarray:
        return soft_histogram(z, self.bandwidth).grid[None]

    def predict(self, phi: Network, hhat: Network, batch: np.ndarray) -> Tensor:
        b, m, p = batch.shape
        flat = phi.forward(batch.reshape(-1, p))
        points2d = flat.reshape(b, m, p)[:, :, :2]
        return hhat.forward(soft_histogram_t(points2d, self.bandwidth))

    def training_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.clouds, self.labels

    def regularizers(self, config: LoopConfig):
        weight = self.ortho_weight

        def penalty(phi: Network) -> Tensor:
            return weight * orthogonality_penalty(phi.layers[0].weight)

        return [penalty]

    def evaluate(self, phi: Network, hhat: Network | None, rng: np.random.Generator) -> dict:
        matrix = projection_matrix(phi)
        out = {
            "heldout_accuracy": expected_oracle_accuracy(
                matrix, self.eval_clouds, self.eval_labels, self.oracle
            ),
            "ortho_penalty": orthogonality_penalty(matrix),
        }
        if hhat is not None:
            hists = np.stack([self.featurize(project(matrix, c)) for c in self.eval_clouds])
            proxy_says_x = hhat.forward(hists).data.reshape(-1) > 0.5
            oracle_says_x = np.array(
                [self.oracle.probability_x(project(matrix, c)) > 0.5 for c in self.eval_clouds]
            )
            out["proxy_oracle_agreement"] = float(np.mean(proxy_says_x == oracle_says_x))
        return out


@dataclass
class SimulationResult:
    accuracy_trace: list[float]        # held-out oracle accuracy of the phi shown each round
    response_accuracy: list[float]     # oracle correctness on the queried plots
    agreement_trace: list[float]       # stand-in vs oracle hard-label agreement after each round
    final_ortho_penalty: float
    final_matrix: np.ndarray
    metrics: list[dict]


def run_simulated_session(config: SimulationConfig, seed: int) -> SimulationResult:
    """Play the full game with the synthetic oracle as the responder.

    The accuracy trace entry for round r scores the projection the responder
    actually saw in round r, i.e. before that round's update; improvement
    from feedback therefore shows up from the second entry on.
    """
    rng = np.random.default_rng(seed)
    data = generate_dataset(
        config.n_train + config.n_eval, config.p, config.m, config.jitter, seed=seed
    )
    train = (data.clouds[: config.n_train], data.labels[: config.n_train])
    eval_clouds = data.clouds[config.n_train :]
    eval_labels = data.labels[config.n_train :]
    oracle = build_oracle(config.tau, m=config.m)
    experiment = PointCloudExperiment(
        train, eval_clouds, eval_labels, oracle, config.bandwidth, config.ortho_weight
    )
    phi = new_projection_model(config.p, rng=rng)
    state = SessionState(0, phi, None, ResponseBuffer(), rng=rng)

    trace: list[float] = []
    response_acc: list[float] = []
    agreement: list[float] = []
    for _ in range(config.rounds):
        trace.append(
            expected_oracle_accuracy(projection_matrix(state.phi), eval_clouds, eval_labels, oracle)
        )
        queries = issue_queries(state, experiment, config.queries_per_round)
        responses = {
            q.query_id: 1.0 if oracle_label(q.z, oracle, rng) == LABEL_X else 0.0 for q in queries
        }
        retrain = True
        if config.skip_retrain_when_perfect:
            all_correct = all(
                (responses[q.query_id] > 0.5) == (experiment.label_at(q.index) > 0.5)
                for q in queries
            )
            retrain = not all_correct
        run_round(state, responses, config.loop, experiment, retrain=retrain)
        response_acc.append(state.metrics[-1]["response_accuracy"])
        agreement.append(state.metrics[-1].get("proxy_oracle_agreement", float("nan")))
    return SimulationResult(
        accuracy_trace=trace,
        response_accuracy=response_acc,
        agreement_trace=agreement,
        final_ortho_penalty=orthogonality_penalty(projection_matrix(state.phi)),
        final_matrix=projection_matrix(state.phi).copy(),
        metrics=state.metrics,
    )
